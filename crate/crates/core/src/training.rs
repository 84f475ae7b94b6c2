//! Initialization and the two-phase fitting protocol.
//!
//! Phase 1 moves only the variational parameters and feature locations;
//! phase 2 moves everything. Both phases maximize the ELBO by minimizing its
//! negation.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::features::{ActivationKind, InducingSet, Prior};
use crate::kernels::{KernelFamily, ZonalKernel};
use crate::models::{GPModel, Mode, ParamGroup};
use crate::optim::{Adam, Lbfgs, LbfgsSettings, StepOutcome};
use crate::{Error, Result};

type Mat = DMatrix<f64>;

const PHASE1_GROUPS: [ParamGroup; 2] = [ParamGroup::Variational, ParamGroup::Locations];
const LLOYD_ITERS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFamily {
    Points,
    Harmonics,
    Activations,
}

/// Everything needed to build an untrained model for a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kernel: KernelFamily,
    #[serde(default = "default_bias")]
    pub bias: f64,
    /// Truncation level `L`.
    pub max_level: usize,
    pub base: FeatureFamily,
    /// `M`; ignored for harmonic features, whose count follows from `L`.
    pub num_base: usize,
    #[serde(default = "default_orthogonal")]
    pub orthogonal: FeatureFamily,
    /// `K`; zero means no orthogonal set.
    #[serde(default)]
    pub num_orthogonal: usize,
    #[serde(default = "default_activation")]
    pub activation: ActivationKind,
    #[serde(default = "default_mode")]
    pub mode: Mode,
}

fn default_bias() -> f64 {
    1.0
}
fn default_orthogonal() -> FeatureFamily {
    FeatureFamily::Points
}
fn default_activation() -> ActivationKind {
    ActivationKind::Relu
}
fn default_mode() -> Mode {
    Mode::Solve
}

impl ModelSpec {
    /// The effective mode: no orthogonal variables means SVGP.
    pub fn effective_mode(&self) -> Mode {
        if self.num_orthogonal == 0 && self.orthogonal != FeatureFamily::Harmonics {
            Mode::Svgp
        } else {
            self.mode
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base != FeatureFamily::Harmonics && self.num_base == 0 {
            return Err(Error::InvalidArgument("at least one base feature is required".into()));
        }
        if self.mode == Mode::Svgp && self.num_orthogonal > 0 {
            return Err(Error::InvalidArgument(
                "SVGP mode takes no orthogonal features; use odvgp or solve".into(),
            ));
        }
        if !(self.bias.is_finite() && self.bias > 0.0) {
            return Err(Error::InvalidArgument("bias must be positive".into()));
        }
        Ok(())
    }
}

/// Lloyd-refined k-means++ centers of the rows of `x`.
pub fn kmeans_plus_plus(x: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Result<Mat> {
    let n = x.nrows();
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "{k} inducing points requested from {n} training inputs"
        )));
    }
    let dist2 = |i: usize, c: &Mat, j: usize| (x.row(i) - c.row(j)).norm_squared();
    let mut centers = Mat::zeros(k, x.ncols());
    if k == 0 {
        return Ok(centers);
    }
    centers.set_row(0, &x.row(rng.random_range(0..n)));
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, &centers, 0)).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            nearest
                .iter()
                .position(|&d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        centers.set_row(c, &x.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(i, &centers, c));
        }
    }
    for _ in 0..LLOYD_ITERS {
        let assign: Vec<usize> = (0..n)
            .map(|i| {
                (0..k)
                    .min_by(|&a, &b| dist2(i, &centers, a).total_cmp(&dist2(i, &centers, b)))
                    .expect("k ≥ 1")
            })
            .collect();
        let mut sums = Mat::zeros(k, x.ncols());
        let mut counts = vec![0usize; k];
        for (i, &c) in assign.iter().enumerate() {
            let mut row = sums.row_mut(c);
            row += x.row(i);
            counts[c] += 1;
        }
        let mut moved = false;
        for c in 0..k {
            // An emptied cluster keeps its previous center.
            if counts[c] > 0 {
                let mean = sums.row(c) / counts[c] as f64;
                moved |= mean != centers.row(c);
                centers.set_row(c, &mean);
            }
        }
        if !moved {
            break;
        }
    }
    Ok(centers)
}

/// `m` directions drawn uniformly on the unit sphere of `R^dim`.
pub fn random_unit_rows(m: usize, dim: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut z = Mat::from_fn(m, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    for mut row in z.row_iter_mut() {
        let n = row.norm();
        row /= n;
    }
    z
}

fn build_set(
    family: FeatureFamily,
    count: usize,
    spec: &ModelSpec,
    prior: &Prior,
    x: &Mat,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<InducingSet> {
    match family {
        FeatureFamily::Points => Ok(InducingSet::Points {
            z: kmeans_plus_plus(x, count, rng)?,
        }),
        FeatureFamily::Harmonics => InducingSet::harmonics(prior, seed),
        FeatureFamily::Activations => {
            let z = random_unit_rows(count, prior.geometry.ambient_dim(), rng);
            InducingSet::activations(z, spec.activation, prior)
        }
    }
}

/// Unit amplitude and lengthscale, `β = 1`, `q = N(0, I)`, k-means++ points
/// and uniformly random activation directions.
pub fn init_model(spec: &ModelSpec, x: &Mat, seed: u64) -> Result<GPModel> {
    spec.validate()?;
    if x.nrows() == 0 {
        return Err(Error::InvalidArgument("cannot initialize from an empty dataset".into()));
    }
    let kernel = ZonalKernel::new(spec.kernel).with_bias(spec.bias);
    let prior = Prior::new(kernel, x.ncols(), spec.max_level)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = build_set(spec.base, spec.num_base, spec, &prior, x, &mut rng, seed)?;
    let mode = spec.effective_mode();
    let orthogonal = match mode {
        Mode::Svgp => None,
        _ => Some(build_set(
            spec.orthogonal,
            spec.num_orthogonal,
            spec,
            &prior,
            x,
            &mut rng,
            seed,
        )?),
    };
    GPModel::new(prior, base, orthogonal, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// L-BFGS on the full data set.
    #[serde(alias = "lbfgs")]
    QuasiNewtonFullBatch,
    /// Adam on shuffled minibatches.
    #[serde(alias = "adam")]
    StochasticMinibatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSchedule {
    #[serde(default = "default_phase1")]
    pub phase1_iters: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    /// Phase-2 iterations (quasi-Newton) or epochs (stochastic).
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    /// Keep inducing locations at their initial values in both phases.
    #[serde(default)]
    pub freeze_locations: bool,
    /// Quasi-Newton relative-decrease stopping tolerance; zero runs every
    /// iteration.
    #[serde(default = "default_ftol")]
    pub ftol: f64,
}

fn default_phase1() -> usize {
    100
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::QuasiNewtonFullBatch
}
fn default_max_iters() -> usize {
    1000
}
fn default_batch() -> usize {
    256
}
fn default_lr() -> f64 {
    1e-3
}
fn default_ftol() -> f64 {
    LbfgsSettings::default().ftol
}

impl Default for FitSchedule {
    fn default() -> Self {
        Self {
            phase1_iters: default_phase1(),
            optimizer: default_optimizer(),
            max_iters: default_max_iters(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            seed: 0,
            freeze_locations: false,
            ftol: default_ftol(),
        }
    }
}

impl FitSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.ftol >= 0.0) {
            return Err(Error::InvalidArgument("ftol must be non-negative".into()));
        }
        if self.optimizer == OptimizerKind::StochasticMinibatch {
            if self.batch_size == 0 {
                return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
            }
            if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
                return Err(Error::InvalidArgument("learning_rate must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub phase: u8,
    pub elapsed_s: f64,
    /// Full-batch ELBO for quasi-Newton, minibatch estimate for stochastic.
    pub elbo: f64,
    pub param_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitTrace {
    /// Iteration 0 holds the initial ELBO.
    pub records: Vec<TraceRecord>,
    pub iterations: usize,
    pub elapsed_s: f64,
    /// Completed optimization iterations per second.
    pub throughput: f64,
    pub best_elbo: f64,
    /// False when the quasi-Newton line search gave up.
    pub converged: bool,
    /// Evaluations that failed and were discarded.
    pub rejected_evaluations: usize,
    pub rollbacks: usize,
    pub message: Option<String>,
}

impl FitTrace {
    pub fn final_elbo(&self) -> Option<f64> {
        self.records.last().map(|r| r.elbo)
    }

    /// CSV with columns `iteration,phase,elapsed_s,elbo,param_norm`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let mut s = String::from_utf8(bytes).expect("csv output is utf-8");
        if self.records.is_empty() {
            s = "iteration,phase,elapsed_s,elbo,param_norm\n".into();
        }
        Ok(s)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv()?.as_bytes())
    }
}

struct Run<'a> {
    init: &'a GPModel,
    reference: Vec<f64>,
    x: &'a Mat,
    y: &'a DVector<f64>,
    start: Instant,
    trace: FitTrace,
}

impl Run<'_> {
    fn model_at(&self, theta: &[f64]) -> Result<GPModel> {
        let mut m = self.init.clone();
        m.unpack_changed(theta, &self.reference)?;
        Ok(m)
    }

    fn elbo_grad(&self, theta: &[f64], rows: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
        let m = self.model_at(theta)?;
        let n_total = self.x.nrows() as f64;
        match rows {
            None => m.elbo_with_gradient(self.x, self.y, n_total),
            Some(idx) => {
                let xb = self.x.select_rows(idx);
                let yb = self.y.select_rows(idx);
                m.elbo_with_gradient(&xb, &yb, n_total)
            }
        }
    }

    fn record(&mut self, phase: u8, elbo: f64, theta: &[f64]) {
        let iteration = self.trace.records.len();
        self.trace.records.push(TraceRecord {
            iteration,
            phase,
            elapsed_s: self.start.elapsed().as_secs_f64(),
            elbo,
            param_norm: theta.iter().map(|v| v * v).sum::<f64>().sqrt(),
        });
    }
}

fn gather(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn scatter(full: &mut [f64], idx: &[usize], sub: &[f64]) {
    idx.iter().zip(sub).for_each(|(&i, &v)| full[i] = v);
}

/// Two-phase fit. Returns the best-ELBO model and the full trace.
pub fn fit(model: &GPModel, x: &Mat, y: &DVector<f64>, schedule: &FitSchedule) -> Result<(GPModel, FitTrace)> {
    schedule.validate()?;
    model.validate()?;
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "dataset must be nonempty with matching targets ({} inputs, {} targets)",
            x.nrows(),
            y.len()
        )));
    }
    let layout = model.layout();
    let theta0 = model.pack();
    let mut run = Run {
        init: model,
        reference: theta0.clone(),
        x,
        y,
        start: Instant::now(),
        trace: FitTrace {
            converged: true,
            ..Default::default()
        },
    };
    let (elbo0, _) = run.elbo_grad(&theta0, None)?;
    run.record(0, elbo0, &theta0);
    let mut best = (elbo0, theta0.clone());
    let mut theta = theta0;

    let active = |groups: &[ParamGroup]| -> Vec<usize> {
        let groups: Vec<ParamGroup> = groups
            .iter()
            .copied()
            .filter(|g| !(schedule.freeze_locations && *g == ParamGroup::Locations))
            .collect();
        let mask = layout.mask(&groups);
        (0..layout.len).filter(|&i| mask[i]).collect()
    };
    let all_groups = [
        ParamGroup::Variational,
        ParamGroup::Locations,
        ParamGroup::Kernel,
        ParamGroup::Noise,
    ];
    let phases = [(1u8, active(&PHASE1_GROUPS), schedule.phase1_iters), (2u8, active(&all_groups), schedule.max_iters)];
    for (phase, idx, iters) in phases {
        if iters == 0 || idx.is_empty() {
            continue;
        }
        let stop = match schedule.optimizer {
            OptimizerKind::QuasiNewtonFullBatch => quasi_newton(&mut run, &mut theta, &idx, iters, phase, schedule.ftol, &mut best)?,
            OptimizerKind::StochasticMinibatch => stochastic(&mut run, &mut theta, &idx, iters, phase, schedule, &mut best)?,
        };
        if stop {
            break;
        }
    }
    let elapsed = run.start.elapsed().as_secs_f64();
    let mut trace = run.trace;
    trace.iterations = trace.records.len() - 1;
    trace.elapsed_s = elapsed;
    trace.throughput = if elapsed > 0.0 { trace.iterations as f64 / elapsed } else { 0.0 };
    trace.best_elbo = best.0;
    let mut fitted = model.clone();
    fitted.unpack_changed(&best.1, &model.pack())?;
    Ok((fitted, trace))
}

/// Returns true when the whole fit should stop.
fn quasi_newton(
    run: &mut Run,
    theta: &mut Vec<f64>,
    idx: &[usize],
    iters: usize,
    phase: u8,
    ftol: f64,
    best: &mut (f64, Vec<f64>),
) -> Result<bool> {
    let base = theta.clone();
    let mut objective = |sub: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut full = base.clone();
        scatter(&mut full, idx, sub);
        let (e, g) = run.elbo_grad(&full, None)?;
        Ok((-e, gather(&g, idx).into_iter().map(|v| -v).collect()))
    };
    let mut sub = gather(theta, idx);
    let (mut f, mut g) = objective(&sub)?;
    let mut opt = Lbfgs::new(LbfgsSettings {
        ftol,
        ..Default::default()
    });
    let mut outcome = StepOutcome::Accepted;
    let mut history = Vec::new();
    for _ in 0..iters {
        let before = f;
        outcome = opt.step(&mut sub, &mut f, &mut g, &mut objective);
        if f != before {
            history.push((-f, sub.clone()));
        }
        if outcome != StepOutcome::Accepted {
            break;
        }
    }
    for (elbo, s) in history {
        scatter(theta, idx, &s);
        run.record(phase, elbo, theta);
        if elbo > best.0 {
            *best = (elbo, theta.clone());
        }
    }
    run.trace.rejected_evaluations += opt.failed_evaluations;
    if outcome == StepOutcome::LineSearchFailed {
        run.trace.converged = false;
        run.trace.message = Some(format!("line search failed in phase {phase}"));
        log::warn!("line search failed in phase {phase}; stopping");
        return Ok(true);
    }
    Ok(false)
}

fn stochastic(
    run: &mut Run,
    theta: &mut Vec<f64>,
    idx: &[usize],
    epochs: usize,
    phase: u8,
    schedule: &FitSchedule,
    best: &mut (f64, Vec<f64>),
) -> Result<bool> {
    let n = run.x.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed.wrapping_add(phase as u64));
    let mut adam = Adam::new(idx.len(), schedule.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(schedule.batch_size.min(n)) {
            let mut rows = batch.to_vec();
            rows.sort_unstable();
            match run.elbo_grad(theta, Some(&rows)) {
                Ok((e, g)) => {
                    let mut sub = gather(theta, idx);
                    let neg: Vec<f64> = gather(&g, idx).into_iter().map(|v| -v).collect();
                    adam.step(&mut sub, &neg);
                    scatter(theta, idx, &sub);
                    run.record(phase, e, theta);
                }
                Err(e) if e.is_numerical() => {
                    *theta = best.1.clone();
                    run.trace.rollbacks += 1;
                    run.trace.message = Some(format!("rolled back to the best finite iterate: {e}"));
                    log::warn!("non-finite objective in phase {phase}; rolled back");
                    return Ok(true);
                }
                Err(e) => return Err(e),
            }
        }
        match run.elbo_grad(theta, None) {
            Ok((e, _)) if e > best.0 => *best = (e, theta.clone()),
            Ok(_) => {}
            Err(e) if e.is_numerical() => {
                *theta = best.1.clone();
                run.trace.rollbacks += 1;
                run.trace.message = Some(format!("rolled back to the best finite iterate: {e}"));
                return Ok(true);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(false)
}
