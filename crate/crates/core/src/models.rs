//! SVGP and orthogonally decoupled variational models.
//!
//! Two independent routes compute the same quantities. The plain route
//! ([`svgp_predict`], [`solvegp_predict`], [`elbo`], ...) works on assembled
//! blocks with nalgebra. The taped route ([`GPModel::elbo_with_gradient`])
//! rebuilds the ELBO on an autodiff tape over unconstrained parameters and is
//! what training uses.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{inv_softplus, softplus, Tape, Var};
use crate::features::{
    assemble_blocks, cov_kuu, cross_cov, cross_cov_kuf, cross_tape, kff_diag, kff_diag_tape, schur_diag,
    InducingSet, KernelVars, Lifted, Prior, SetVars,
};
use crate::kernels::{kernel_eval, ZonalKernel};
use crate::linalg::{cancel_sub, jittered_cholesky, jittered_cholesky_scaled, solve_lower, solve_upper_tr};
use crate::{Error, Result};

type Mat = DMatrix<f64>;

const VARIANCE_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Base features only.
    Svgp,
    /// Decoupled, with `C_v` pinned to `C_vv`.
    Odvgp,
    /// Decoupled, with free `C_v`.
    Solve,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Svgp => "svgp",
            Mode::Odvgp => "odvgp",
            Mode::Solve => "solve",
        }
    }
}

/// `N(mean, scale · scaleᵀ)` with `scale` lower triangular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalGaussian {
    #[serde(with = "crate::linalg::plain_vector")]
    pub mean: DVector<f64>,
    #[serde(with = "crate::linalg::row_major")]
    pub scale: Mat,
}

impl VariationalGaussian {
    /// Zero mean, identity covariance.
    pub fn standard(n: usize) -> Self {
        Self {
            mean: DVector::zeros(n),
            scale: Mat::identity(n, n),
        }
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn covariance(&self) -> Mat {
        &self.scale * self.scale.transpose()
    }

    pub fn check(&self, what: &str) -> Result<()> {
        let n = self.mean.len();
        if self.scale.shape() != (n, n) {
            return Err(Error::InvalidArgument(format!(
                "{what}: scale is {:?}, mean has {n} entries",
                self.scale.shape()
            )));
        }
        for i in 0..n {
            if !(self.scale[(i, i)] > 0.0) {
                return Err(Error::InvalidArgument(format!("{what}: scale diagonal must be positive")));
            }
            for j in i + 1..n {
                if self.scale[(i, j)] != 0.0 {
                    return Err(Error::InvalidArgument(format!("{what}: scale must be lower triangular")));
                }
            }
        }
        if self.mean.iter().chain(self.scale.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPModel {
    pub prior: Prior,
    pub base: InducingSet,
    pub orthogonal: Option<InducingSet>,
    pub q_u: VariationalGaussian,
    /// In ODVGP mode only the mean is used; the covariance is `C_vv`.
    pub q_v: Option<VariationalGaussian>,
    /// Likelihood precision `β`.
    pub noise_precision: f64,
    pub mode: Mode,
}

/// Predictive mean with marginal variances and optionally the full covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGaussian {
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub covariance: Option<Mat>,
}

/// Signed constituents of the predictive variance at each query point.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceTerms {
    /// `k(x, x)`.
    pub prior: DVector<f64>,
    /// `Q_{*u} K_uu Q_{u*}` (subtracted).
    pub base_projection: DVector<f64>,
    /// `Q_{*u} C_u Q_{u*}` (added).
    pub base_posterior: DVector<f64>,
    /// `C_{*v} C_vv⁻¹ C_vv C_vv⁻¹ C_{v*}` (subtracted).
    pub orthogonal_projection: DVector<f64>,
    /// `C_{*v} C_vv⁻¹ C_v C_vv⁻¹ C_{v*}` (added).
    pub orthogonal_posterior: DVector<f64>,
}

impl VarianceTerms {
    /// Unclamped signed sum.
    pub fn total(&self) -> DVector<f64> {
        &self.prior - &self.base_projection + &self.base_posterior - &self.orthogonal_projection
            + &self.orthogonal_posterior
    }
}

fn clamp_variance(v: DVector<f64>) -> DVector<f64> {
    v.map(|x| if (-VARIANCE_CLAMP..0.0).contains(&x) { 0.0 } else { x })
}

impl GPModel {
    /// Standard variational distributions and unit noise precision.
    pub fn new(prior: Prior, base: InducingSet, orthogonal: Option<InducingSet>, mode: Mode) -> Result<Self> {
        let q_u = VariationalGaussian::standard(base.len());
        let q_v = orthogonal.as_ref().map(|o| VariationalGaussian::standard(o.len()));
        let model = Self {
            prior,
            base,
            orthogonal,
            q_u,
            q_v,
            noise_precision: 1.0,
            mode,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn kernel(&self) -> &ZonalKernel {
        &self.prior.kernel
    }

    pub fn validate(&self) -> Result<()> {
        self.prior.kernel.validate()?;
        self.base.check(&self.prior)?;
        self.q_u.check("q(u)")?;
        if self.q_u.len() != self.base.len() {
            return Err(Error::InvalidArgument(format!(
                "q(u) has {} entries for {} base features",
                self.q_u.len(),
                self.base.len()
            )));
        }
        if !(self.noise_precision.is_finite() && self.noise_precision > 0.0) {
            return Err(Error::InvalidArgument("noise precision must be positive".into()));
        }
        match (self.mode, &self.orthogonal, &self.q_v) {
            (Mode::Svgp, None, None) => Ok(()),
            (Mode::Svgp, _, _) => Err(Error::InvalidArgument("SVGP mode takes no orthogonal set".into())),
            (_, Some(o), Some(q)) => {
                o.check(&self.prior)?;
                if q.len() != o.len() {
                    return Err(Error::InvalidArgument(format!(
                        "q(v) has {} entries for {} orthogonal features",
                        q.len(),
                        o.len()
                    )));
                }
                q.check("q(v)")
            }
            (mode, _, _) => Err(Error::InvalidArgument(format!(
                "{} mode needs an orthogonal set and q(v)",
                mode.label()
            ))),
        }
    }

    fn decoupled(&self) -> Option<(&InducingSet, &VariationalGaussian)> {
        match (self.mode, &self.orthogonal, &self.q_v) {
            (Mode::Svgp, _, _) => None,
            (_, Some(o), Some(q)) if !o.is_empty() => Some((o, q)),
            _ => None,
        }
    }
}

/// `KL(N(m, SSᵀ) ‖ N(0, LLᵀ))`.
fn kl_with_factor(q: &VariationalGaussian, l: &Mat) -> f64 {
    let n = q.len() as f64;
    let lis = solve_lower(l, &q.scale);
    let lim = solve_lower(l, &Mat::from_column_slice(q.len(), 1, q.mean.as_slice()));
    let logdet_p: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
    let logdet_q: f64 = q.scale.diagonal().iter().map(|d| d.abs().ln()).sum();
    0.5 * (lis.norm_squared() + lim.norm_squared() - n + 2.0 * logdet_p - 2.0 * logdet_q)
}

/// `KL(q ‖ N(0, prior_cov))`.
pub fn kl_gaussian(q: &VariationalGaussian, prior_cov: &Mat) -> Result<f64> {
    if prior_cov.shape() != (q.len(), q.len()) {
        return Err(Error::InvalidArgument("KL prior covariance has the wrong shape".into()));
    }
    let (l, _) = jittered_cholesky(prior_cov, "KL prior covariance")?;
    Ok(kl_with_factor(q, &l))
}

/// Everything that does not depend on query inputs.
struct Factors {
    lu: Mat,
    orth: Option<OrthFactors>,
}

struct OrthFactors {
    /// `L_u⁻¹ K_uv`.
    av: Mat,
    lv: Mat,
}

fn factors(model: &GPModel) -> Result<Factors> {
    let kuu = cov_kuu(&model.base, &model.prior)?;
    let (lu, _) = jittered_cholesky(&kuu, "K_uu")?;
    let orth = match model.decoupled() {
        Some((o, _)) => {
            let kvu = cross_cov(o, &model.base, &model.prior)?;
            let kvv = cov_kuu(o, &model.prior)?;
            let av = solve_lower(&lu, &kvu.transpose());
            let cvv = cancel_sub(&kvv, &av.tr_mul(&av));
            let cvv = (&cvv + cvv.transpose()) * 0.5;
            let scale = kvv.diagonal().mean();
            let (lv, _) = jittered_cholesky_scaled(&cvv, scale, "C_vv (orthogonal set)")?;
            Some(OrthFactors { av, lv })
        }
        None => None,
    };
    Ok(Factors { lu, orth })
}

/// Per-query quantities: `a = L_u⁻¹K_uf`, `S_uᵀK_uu⁻¹K_uf`, and their
/// orthogonal counterparts `L_v⁻¹C_vf`, `S_vᵀC_vv⁻¹C_vf`.
struct Projection {
    mean: DVector<f64>,
    kff_diag: DVector<f64>,
    a: Mat,
    su_b: Mat,
    orth: Option<(Mat, Mat)>,
}

fn project(model: &GPModel, f: &Factors, xs: &Mat) -> Result<Projection> {
    let kuf = cross_cov_kuf(&model.base, &model.prior, xs)?;
    let a = solve_lower(&f.lu, &kuf);
    let b = solve_upper_tr(&f.lu, &a);
    let mut mean = b.tr_mul(&model.q_u.mean);
    let su_b = model.q_u.scale.tr_mul(&b);
    let orth = match (model.decoupled(), &f.orth) {
        (Some((o, q)), Some(of)) => {
            let kvf = cross_cov_kuf(o, &model.prior, xs)?;
            let cvf = cancel_sub(&kvf, &of.av.tr_mul(&a));
            let av2 = solve_lower(&of.lv, &cvf);
            let bv = solve_upper_tr(&of.lv, &av2);
            mean += bv.tr_mul(&q.mean);
            let sv_bv = match model.mode {
                Mode::Odvgp => of.lv.tr_mul(&bv),
                _ => q.scale.tr_mul(&bv),
            };
            Some((av2, sv_bv))
        }
        _ => None,
    };
    Ok(Projection {
        mean,
        kff_diag: kff_diag(&model.prior, xs)?,
        a,
        su_b,
        orth,
    })
}

fn col_sq(m: &Mat) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.norm_squared()))
}

fn terms_of(p: &Projection) -> VarianceTerms {
    let n = p.kff_diag.len();
    let (op, oq) = match &p.orth {
        Some((av2, sv_bv)) => (col_sq(av2), col_sq(sv_bv)),
        None => (DVector::zeros(n), DVector::zeros(n)),
    };
    VarianceTerms {
        prior: p.kff_diag.clone(),
        base_projection: col_sq(&p.a),
        base_posterior: col_sq(&p.su_b),
        orthogonal_projection: op,
        orthogonal_posterior: oq,
    }
}

fn posterior(model: &GPModel, f: &Factors, xs: &Mat, full: bool) -> Result<PosteriorGaussian> {
    let p = project(model, f, xs)?;
    let variance = clamp_variance(terms_of(&p).total());
    let covariance = if full {
        let mut c = kernel_eval(&model.prior.kernel, xs, xs)? - p.a.tr_mul(&p.a) + p.su_b.tr_mul(&p.su_b);
        if let Some((av2, sv_bv)) = &p.orth {
            c += sv_bv.tr_mul(sv_bv) - av2.tr_mul(av2);
        }
        Some((&c + c.transpose()) * 0.5)
    } else {
        None
    };
    Ok(PosteriorGaussian {
        mean: p.mean,
        variance,
        covariance,
    })
}

/// `μ = Q_{*u} m_u`, `Σ = K_** − Q_{*u}(K_uu − C_u)Q_{u*}`. On a decoupled
/// model the orthogonal part is ignored.
pub fn svgp_predict(model: &GPModel, xs: &Mat, full_cov: bool) -> Result<PosteriorGaussian> {
    let mut base_only = model.clone();
    base_only.mode = Mode::Svgp;
    base_only.orthogonal = None;
    base_only.q_v = None;
    let f = factors(&base_only)?;
    posterior(&base_only, &f, xs, full_cov)
}

/// Decoupled predictive: adds `C_{*v}C_vv⁻¹m_v` to the mean and
/// `C_{*v}C_vv⁻¹(C_v − C_vv)C_vv⁻¹C_{v*}` to the covariance.
pub fn solvegp_predict(model: &GPModel, xs: &Mat, full_cov: bool) -> Result<PosteriorGaussian> {
    if model.mode == Mode::Svgp || model.orthogonal.is_none() {
        return Err(Error::InvalidArgument(
            "decoupled prediction needs an orthogonal set in ODVGP or SOLVE mode".into(),
        ));
    }
    let f = factors(model)?;
    posterior(model, &f, xs, full_cov)
}

/// Mode-appropriate predictive.
pub fn predict(model: &GPModel, xs: &Mat, full_cov: bool) -> Result<PosteriorGaussian> {
    match model.mode {
        Mode::Svgp => svgp_predict(model, xs, full_cov),
        _ => solvegp_predict(model, xs, full_cov),
    }
}

pub fn predictive_variance_terms(model: &GPModel, xs: &Mat) -> Result<VarianceTerms> {
    let f = factors(model)?;
    Ok(terms_of(&project(model, &f, xs)?))
}

/// `(diag Q_**, diag(K_** − Q_**))`: prior variance explained by the base
/// features and the remainder carried by the orthogonal process.
pub fn prior_variance_decomposition(model: &GPModel, xs: &Mat) -> Result<(DVector<f64>, DVector<f64>)> {
    let kdiag = kff_diag(&model.prior, xs)?;
    if model.base.is_empty() {
        return Ok((DVector::zeros(xs.nrows()), kdiag));
    }
    let blocks = assemble_blocks(&model.prior, &model.base, None, xs)?;
    let ny = crate::features::nystrom_terms(&blocks)?;
    let var_h = schur_diag(&kdiag, &ny.qff_diag);
    Ok((ny.qff_diag, var_h))
}

fn check_data(x: &Mat, y: &DVector<f64>, prior: &Prior) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::InvalidArgument(format!(
            "{} inputs but {} targets",
            x.nrows(),
            y.len()
        )));
    }
    if x.nrows() > 0 && x.ncols() != prior.input_dim() {
        return Err(Error::InvalidArgument(format!(
            "inputs have {} columns, model expects {}",
            x.ncols(),
            prior.input_dim()
        )));
    }
    Ok(())
}

fn finite(value: f64, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(format!("ELBO {what} ({value})")))
    }
}

/// `(N_total/|B|) Σ_n [log N(y_n | μ_n, β⁻¹) − β σ_n²/2] − KL_u − KL_v`.
pub fn elbo(model: &GPModel, x: &Mat, y: &DVector<f64>, n_total: f64) -> Result<f64> {
    model.validate()?;
    check_data(x, y, &model.prior)?;
    let f = factors(model)?;
    let beta = model.noise_precision;
    let data = if x.nrows() == 0 {
        0.0
    } else {
        let p = project(model, &f, x)?;
        let var = terms_of(&p).total();
        let n = x.nrows() as f64;
        let resid = y - &p.mean;
        let sum = 0.5 * n * (beta.ln() - (2.0 * PI).ln()) - 0.5 * beta * (resid.norm_squared() + var.sum());
        n_total / n * sum
    };
    let data = finite(data, "data term")?;
    let kl_u = finite(kl_with_factor(&model.q_u, &f.lu), "KL(q(u))")?;
    let kl_v = match (model.decoupled(), &f.orth) {
        (Some((_, q)), Some(of)) => {
            let kl = match model.mode {
                Mode::Odvgp => {
                    let lim = solve_lower(&of.lv, &Mat::from_column_slice(q.len(), 1, q.mean.as_slice()));
                    0.5 * lim.norm_squared()
                }
                _ => kl_with_factor(q, &of.lv),
            };
            finite(kl, "KL(q(v))")?
        }
        _ => 0.0,
    };
    Ok(data - kl_u - kl_v)
}

/// Which optimizer phase may move a parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Kernel,
    Noise,
    Locations,
    Variational,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: &'static str,
    pub group: ParamGroup,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Position of every parameter block in the unconstrained vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub blocks: Vec<ParamBlock>,
    pub len: usize,
}

impl ParamLayout {
    /// Mask selecting the entries of the given groups.
    pub fn mask(&self, groups: &[ParamGroup]) -> Vec<bool> {
        let mut mask = vec![false; self.len];
        for b in &self.blocks {
            if groups.contains(&b.group) {
                mask[b.range()].iter_mut().for_each(|m| *m = true);
            }
        }
        mask
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

fn pack_scale(s: &Mat) -> Mat {
    let mut raw = s.clone();
    for i in 0..raw.nrows() {
        raw[(i, i)] = inv_softplus(raw[(i, i)]);
    }
    raw
}

fn unpack_scale(raw: &Mat) -> Mat {
    let n = raw.nrows();
    Mat::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Less => 0.0,
        std::cmp::Ordering::Equal => softplus(raw[(i, i)]),
        std::cmp::Ordering::Greater => raw[(i, j)],
    })
}

/// Leaves of one ELBO evaluation, in layout order.
struct Leaves<'t> {
    vars: Vec<Var<'t>>,
}

impl GPModel {
    /// Unconstrained parameterization: softplus for positive scalars and
    /// scale diagonals, identity elsewhere.
    pub fn layout(&self) -> ParamLayout {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name, group, rows, cols| {
            blocks.push(ParamBlock {
                name,
                group,
                rows,
                cols,
                offset,
            });
            offset += rows * cols;
        };
        push("amplitude", ParamGroup::Kernel, 1, 1);
        if self.prior.kernel.family.has_lengthscale() {
            push("lengthscale", ParamGroup::Kernel, 1, 1);
        }
        push("noise_precision", ParamGroup::Noise, 1, 1);
        if let Some(z) = self.base.locations() {
            push("base_locations", ParamGroup::Locations, z.nrows(), z.ncols());
        }
        let orth = self.decoupled().map(|(o, _)| o);
        if let Some(w) = orth.and_then(|o| o.locations()) {
            push("orthogonal_locations", ParamGroup::Locations, w.nrows(), w.ncols());
        }
        let m = self.base.len();
        push("q_u_mean", ParamGroup::Variational, m, 1);
        push("q_u_scale", ParamGroup::Variational, m, m);
        if let Some(o) = orth {
            let k = o.len();
            push("q_v_mean", ParamGroup::Variational, k, 1);
            if self.mode == Mode::Solve {
                push("q_v_scale", ParamGroup::Variational, k, k);
            }
        }
        ParamLayout { blocks, len: offset }
    }

    fn block_values(&self, name: &str) -> Mat {
        match name {
            "amplitude" => Mat::from_element(1, 1, inv_softplus(self.prior.kernel.amplitude)),
            "lengthscale" => Mat::from_element(1, 1, inv_softplus(self.prior.kernel.lengthscale)),
            "noise_precision" => Mat::from_element(1, 1, inv_softplus(self.noise_precision)),
            "base_locations" => self.base.locations().cloned().unwrap_or_default(),
            "orthogonal_locations" => self
                .orthogonal
                .as_ref()
                .and_then(|o| o.locations())
                .cloned()
                .unwrap_or_default(),
            "q_u_mean" => Mat::from_column_slice(self.q_u.len(), 1, self.q_u.mean.as_slice()),
            "q_u_scale" => pack_scale(&self.q_u.scale),
            "q_v_mean" => {
                let q = self.q_v.as_ref().expect("layout lists q_v only when present");
                Mat::from_column_slice(q.len(), 1, q.mean.as_slice())
            }
            "q_v_scale" => pack_scale(&self.q_v.as_ref().expect("q_v present").scale),
            other => unreachable!("unknown parameter block {other}"),
        }
    }

    pub fn pack(&self) -> Vec<f64> {
        let layout = self.layout();
        let mut theta = vec![0.0; layout.len];
        for b in &layout.blocks {
            theta[b.range()].copy_from_slice(self.block_values(b.name).as_slice());
        }
        theta
    }

    /// Inverse of [`GPModel::pack`].
    pub fn unpack(&mut self, theta: &[f64]) -> Result<()> {
        self.unpack_blocks(theta, None)
    }

    /// As [`GPModel::unpack`], but only blocks whose entries differ from
    /// `reference` are written. Untouched fields stay bit-identical instead of
    /// going through a softplus round trip.
    pub fn unpack_changed(&mut self, theta: &[f64], reference: &[f64]) -> Result<()> {
        self.unpack_blocks(theta, Some(reference))
    }

    fn unpack_blocks(&mut self, theta: &[f64], reference: Option<&[f64]>) -> Result<()> {
        let layout = self.layout();
        if theta.len() != layout.len || reference.is_some_and(|r| r.len() != layout.len) {
            return Err(Error::InvalidArgument(format!(
                "parameter vector has {} entries, layout needs {}",
                theta.len(),
                layout.len
            )));
        }
        for b in &layout.blocks {
            if reference.is_some_and(|r| r[b.range()] == theta[b.range()]) {
                continue;
            }
            let m = Mat::from_column_slice(b.rows, b.cols, &theta[b.range()]);
            match b.name {
                "amplitude" => self.prior.kernel.amplitude = softplus(m[0]),
                "lengthscale" => self.prior.kernel.lengthscale = softplus(m[0]),
                "noise_precision" => self.noise_precision = softplus(m[0]),
                "base_locations" => *self.base.locations_mut().expect("layout matches") = m,
                "orthogonal_locations" => {
                    *self
                        .orthogonal
                        .as_mut()
                        .and_then(|o| o.locations_mut())
                        .expect("layout matches") = m
                }
                "q_u_mean" => self.q_u.mean = DVector::from_column_slice(m.as_slice()),
                "q_u_scale" => self.q_u.scale = unpack_scale(&m),
                "q_v_mean" => {
                    self.q_v.as_mut().expect("layout matches").mean = DVector::from_column_slice(m.as_slice())
                }
                "q_v_scale" => self.q_v.as_mut().expect("layout matches").scale = unpack_scale(&m),
                other => unreachable!("unknown parameter block {other}"),
            }
        }
        Ok(())
    }

    /// ELBO at the current parameters and its gradient with respect to the
    /// unconstrained vector [`GPModel::pack`].
    pub fn elbo_with_gradient(&self, x: &Mat, y: &DVector<f64>, n_total: f64) -> Result<(f64, Vec<f64>)> {
        self.validate()?;
        check_data(x, y, &self.prior)?;
        let layout = self.layout();
        let tape = Tape::new();
        let leaves = Leaves {
            vars: layout
                .blocks
                .iter()
                .map(|b| tape.leaf(self.block_values(b.name)))
                .collect(),
        };
        let out = self.elbo_tape(&tape, &layout, &leaves, x, y, n_total)?;
        let value = out.scalar_value();
        let grads = tape.gradient(out);
        let mut g = vec![0.0; layout.len];
        for (b, v) in layout.blocks.iter().zip(&leaves.vars) {
            if let Some(gv) = grads.wrt(*v) {
                g[b.range()].copy_from_slice(gv.as_slice());
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ELBO gradient".into()));
        }
        Ok((value, g))
    }

    fn elbo_tape<'t>(
        &self,
        tape: &'t Tape,
        layout: &ParamLayout,
        leaves: &Leaves<'t>,
        x: &Mat,
        y: &DVector<f64>,
        n_total: f64,
    ) -> Result<Var<'t>> {
        let leaf = |name: &str| {
            layout
                .blocks
                .iter()
                .position(|b| b.name == name)
                .map(|i| leaves.vars[i])
        };
        let amplitude = leaf("amplitude").expect("always present").softplus();
        let lengthscale = match leaf("lengthscale") {
            Some(v) => v.softplus(),
            None => tape.scalar(self.prior.kernel.lengthscale),
        };
        let beta = leaf("noise_precision").expect("always present").softplus();
        let kv = KernelVars::new(&self.prior, amplitude, lengthscale)?;
        let bias = self.prior.kernel.bias;

        let base = SetVars::new(&self.base, tape, bias, leaf("base_locations"));
        let lifted_x = Lifted::inputs(tape.constant(x.clone()), bias);
        let data_set = SetVars::Points(lifted_x);
        let kuu = cross_tape(&kv, &base, &base)?.symmetrize();
        let lu = kuu.cholesky("K_uu")?;
        let m_u = leaf("q_u_mean").expect("always present");
        let s_u = leaf("q_u_scale").expect("always present").to_cholesky_factor();
        let kl_u = kl_tape(lu, m_u, s_u);

        let n = x.nrows();
        let mut kl_v = tape.scalar(0.0);
        let data = if n == 0 {
            tape.scalar(0.0)
        } else {
            let kuf = cross_tape(&kv, &base, &data_set)?;
            let a = lu.solve_lower(kuf);
            let bu = lu.solve_lower_tr(a);
            let mut mean = bu.tr_matmul(m_u);
            let mut var = kff_diag_tape(&kv, &lifted_x)
                .sub(a.col_sum_sq())
                .add(s_u.tr_matmul(bu).col_sum_sq());
            if let Some((o, _)) = self.decoupled() {
                let orth = SetVars::new(o, tape, bias, leaf("orthogonal_locations"));
                let kvv = cross_tape(&kv, &orth, &orth)?.symmetrize();
                let kvu = cross_tape(&kv, &orth, &base)?;
                let kvf = cross_tape(&kv, &orth, &data_set)?;
                let av = lu.solve_lower(kvu.transpose());
                let cvf = kvf.cancel_sub(av.tr_matmul(a));
                let cvv = kvv.cancel_sub(av.tr_matmul(av)).symmetrize();
                let scale = kvv.value().diagonal().mean();
                let lv = cvv.cholesky_scaled(scale, "C_vv (orthogonal set)")?;
                let av2 = lv.solve_lower(cvf);
                let bv = lv.solve_lower_tr(av2);
                let m_v = leaf("q_v_mean").expect("decoupled models have q_v");
                mean = mean.add(bv.tr_matmul(m_v));
                if self.mode == Mode::Solve {
                    let s_v = leaf("q_v_scale").expect("SOLVE has q_v scale").to_cholesky_factor();
                    var = var.add(s_v.tr_matmul(bv).col_sum_sq()).sub(av2.col_sum_sq());
                    kl_v = kl_tape(lv, m_v, s_v);
                } else {
                    kl_v = lv.solve_lower(m_v).square().sum().scale(0.5);
                }
            }
            let yv = tape.constant(Mat::from_column_slice(n, 1, y.as_slice()));
            let sq = yv.sub(mean).square().sum();
            let nf = n as f64;
            let log_term = beta.ln().scale(0.5 * nf).add_const(-0.5 * nf * (2.0 * PI).ln());
            let fit = sq.add(var.sum()).scale_by(beta).scale(0.5);
            log_term.sub(fit).scale(n_total / nf)
        };
        finite(data.scalar_value(), "data term")?;
        finite(kl_u.scalar_value(), "KL(q(u))")?;
        finite(kl_v.scalar_value(), "KL(q(v))")?;
        Ok(data.sub(kl_u).sub(kl_v))
    }
}

fn kl_tape<'t>(l: Var<'t>, m: Var<'t>, s: Var<'t>) -> Var<'t> {
    let n = m.shape().0 as f64;
    let trace = l.solve_lower(s).square().sum();
    let maha = l.solve_lower(m).square().sum();
    let logdets = l.log_diag_sum().sub(s.log_diag_sum()).scale(2.0);
    trace.add(maha).add(logdets).add_const(-n).scale(0.5)
}

pub const CHECKPOINT_FORMAT: &str = "sogp-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON envelope around a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: Option<u64>,
    /// Free-form provenance (config path, dataset name, ...).
    #[serde(default)]
    pub provenance: std::collections::BTreeMap<String, String>,
    /// Standardization the model was trained under, if any.
    #[serde(default)]
    pub transform: Option<crate::data::Transform>,
    pub model: GPModel,
}

impl Checkpoint {
    pub fn new(model: GPModel, seed: Option<u64>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            provenance: Default::default(),
            transform: None,
            model,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let format = raw.get("format").and_then(|v| v.as_str()).unwrap_or_default();
        if format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unrecognized format '{format}'")));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or_default();
        if version != CHECKPOINT_VERSION as u64 {
            return Err(Error::Checkpoint(format!(
                "version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let ck: Checkpoint = serde_json::from_value(raw)?;
        ck.model.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ActivationKind;
    use crate::kernels::KernelFamily;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5))
    }

    fn random_q(n: usize, seed: u64) -> VariationalGaussian {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let scale = Mat::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => rng.random_range(0.3..1.2),
            std::cmp::Ordering::Greater => rng.random_range(-0.3..0.3),
        });
        VariationalGaussian { mean, scale }
    }

    fn decoupled_model(mode: Mode, seed: u64) -> (GPModel, Mat) {
        let prior = Prior::new(ZonalKernel::new(KernelFamily::Matern52).with_lengthscale(0.8), 2, 6).unwrap();
        let base = InducingSet::activations(random(3, 3, seed), ActivationKind::Softplus, &prior).unwrap();
        let orth = InducingSet::Points { z: random(2, 2, seed + 1) };
        let mut m = GPModel::new(prior, base, Some(orth), Mode::Solve).unwrap();
        m.mode = mode;
        m.q_u = random_q(3, seed + 2);
        m.q_v = Some(random_q(2, seed + 3));
        m.noise_precision = 4.0;
        (m, random(6, 2, seed + 4))
    }

    #[test]
    fn kl_examples() {
        let prior = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let l = prior.clone().cholesky().unwrap().l();
        let q = VariationalGaussian { mean: DVector::zeros(2), scale: l };
        assert!(kl_gaussian(&q, &prior).unwrap().abs() <= 1e-10);
        let q1 = VariationalGaussian {
            mean: DVector::from_vec(vec![1.0]),
            scale: Mat::identity(1, 1),
        };
        assert_relative_eq!(kl_gaussian(&q1, &Mat::identity(1, 1)).unwrap(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn exact_prior_posterior_is_prior() {
        let prior = Prior::new(ZonalKernel::new(KernelFamily::SquaredExp), 1, 6).unwrap();
        let z = random(3, 1, 1);
        let mut m = GPModel::new(prior, InducingSet::Points { z: z.clone() }, None, Mode::Svgp).unwrap();
        let kuu = cov_kuu(&m.base, &prior).unwrap();
        m.q_u.scale = kuu.cholesky().unwrap().l();
        let xs = random(4, 1, 2);
        let post = svgp_predict(&m, &xs, true).unwrap();
        assert!(post.mean.amax() == 0.0);
        assert_relative_eq!(post.covariance.unwrap(), kernel_eval(&prior.kernel, &xs, &xs).unwrap(), epsilon = 1e-10);
    }

    #[test]
    fn decoupled_reduces_to_svgp_at_the_prior_orthogonal_distribution() {
        for mode in [Mode::Solve, Mode::Odvgp] {
            let (mut m, xs) = decoupled_model(mode, 10);
            m.q_v.as_mut().unwrap().mean.fill(0.0);
            let f = factors(&m).unwrap();
            m.q_v.as_mut().unwrap().scale = f.orth.as_ref().unwrap().lv.clone();
            let a = solvegp_predict(&m, &xs, true).unwrap();
            let b = svgp_predict(&m, &xs, true).unwrap();
            assert_relative_eq!(a.mean, b.mean, epsilon = 1e-10);
            assert_relative_eq!(a.variance, b.variance, epsilon = 1e-10);
            assert_relative_eq!(a.covariance.unwrap(), b.covariance.unwrap(), epsilon = 1e-10);
        }
    }

    #[test]
    fn empty_orthogonal_set_is_bit_identical_to_svgp() {
        let (mut m, xs) = decoupled_model(Mode::Solve, 20);
        m.orthogonal = Some(InducingSet::Points { z: Mat::zeros(0, 2) });
        m.q_v = Some(VariationalGaussian::standard(0));
        let a = solvegp_predict(&m, &xs, true).unwrap();
        let b = svgp_predict(&m, &xs, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decoupled_predictive_matches_dense_inverse_oracle() {
        let (m, xs) = decoupled_model(Mode::Solve, 30);
        let post = solvegp_predict(&m, &xs, true).unwrap();
        let o = m.orthogonal.as_ref().unwrap();
        let pr = &m.prior;
        let kuu = cov_kuu(&m.base, pr).unwrap();
        let kvv = cov_kuu(o, pr).unwrap();
        let kvu = cross_cov(o, &m.base, pr).unwrap();
        let kus = cross_cov_kuf(&m.base, pr, &xs).unwrap();
        let kvs = cross_cov_kuf(o, pr, &xs).unwrap();
        let kss = kernel_eval(&pr.kernel, &xs, &xs).unwrap();
        let kuu_inv = kuu.clone().try_inverse().unwrap();
        let cvv = &kvv - &kvu * &kuu_inv * kvu.transpose();
        let cvs = &kvs - &kvu * &kuu_inv * &kus;
        let cvv_inv = cvv.clone().try_inverse().unwrap();
        let qv = m.q_v.as_ref().unwrap();
        let mean = kus.transpose() * &kuu_inv * &m.q_u.mean + cvs.transpose() * &cvv_inv * &qv.mean;
        let cov = &kss + kus.transpose() * &kuu_inv * (m.q_u.covariance() - &kuu) * &kuu_inv * &kus
            + cvs.transpose() * &cvv_inv * (qv.covariance() - &cvv) * &cvv_inv * &cvs;
        assert_relative_eq!(post.mean, mean, epsilon = 1e-8);
        assert_relative_eq!(post.covariance.unwrap(), cov, epsilon = 1e-8);
    }

    #[test]
    fn variance_terms_sum_to_predictive_variance() {
        for mode in [Mode::Solve, Mode::Odvgp] {
            let (m, xs) = decoupled_model(mode, 40);
            let t = predictive_variance_terms(&m, &xs).unwrap();
            let post = solvegp_predict(&m, &xs, false).unwrap();
            assert_relative_eq!(clamp_variance(t.total()), post.variance, epsilon = 1e-10);
        }
        let (mut m, xs) = decoupled_model(Mode::Solve, 41);
        m.mode = Mode::Svgp;
        m.orthogonal = None;
        m.q_v = None;
        let t = predictive_variance_terms(&m, &xs).unwrap();
        assert!(t.orthogonal_projection.iter().chain(t.orthogonal_posterior.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn taped_elbo_matches_plain_elbo() {
        for mode in [Mode::Svgp, Mode::Odvgp, Mode::Solve] {
            let (mut m, xs) = decoupled_model(mode, 50);
            if mode == Mode::Svgp {
                m.orthogonal = None;
                m.q_v = None;
            }
            let y = DVector::from_fn(6, |i, _| (i as f64).sin());
            let plain = elbo(&m, &xs, &y, 20.0).unwrap();
            let (taped, _) = m.elbo_with_gradient(&xs, &y, 20.0).unwrap();
            assert_relative_eq!(plain, taped, max_relative = 1e-10);
        }
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        for mode in [Mode::Odvgp, Mode::Solve] {
            let (m, xs) = decoupled_model(mode, 55);
            let y = DVector::from_fn(6, |i, _| (0.7 * i as f64).cos());
            let (_, g) = m.elbo_with_gradient(&xs, &y, 6.0).unwrap();
            let theta = m.pack();
            let eval = |t: &[f64]| {
                let mut c = m.clone();
                c.unpack(t).unwrap();
                elbo(&c, &xs, &y, 6.0).unwrap()
            };
            for i in 0..theta.len() {
                let h = 1e-5;
                let (mut tp, mut tm) = (theta.clone(), theta.clone());
                tp[i] += h;
                tm[i] -= h;
                let fd = (eval(&tp) - eval(&tm)) / (2.0 * h);
                assert!(
                    (fd - g[i]).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "{mode:?} entry {i}: fd {fd} vs tape {}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn empty_batch_is_negative_kl() {
        let (m, _) = decoupled_model(Mode::Solve, 60);
        let f = factors(&m).unwrap();
        let kl = kl_with_factor(&m.q_u, &f.lu) + kl_with_factor(m.q_v.as_ref().unwrap(), &f.orth.as_ref().unwrap().lv);
        let e = elbo(&m, &Mat::zeros(0, 2), &DVector::zeros(0), 0.0).unwrap();
        assert_relative_eq!(e, -kl, max_relative = 1e-12);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let (m, _) = decoupled_model(Mode::Solve, 70);
        let theta = m.pack();
        let mut back = m.clone();
        back.unpack(&theta).unwrap();
        assert_relative_eq!(back.q_u.scale, m.q_u.scale, max_relative = 1e-12);
        assert_relative_eq!(back.noise_precision, m.noise_precision, max_relative = 1e-12);
        assert_eq!(m.layout().len, theta.len());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let (m, _) = decoupled_model(Mode::Odvgp, 80);
        let ck = Checkpoint::new(m, Some(3));
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(ck, back);
        let mut bad: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        bad["version"] = serde_json::json!(99);
        assert!(matches!(Checkpoint::from_json(&bad.to_string()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn invalid_mode_combinations_are_rejected() {
        let prior = Prior::new(ZonalKernel::new(KernelFamily::Matern52), 1, 4).unwrap();
        let base = InducingSet::Points { z: random(2, 1, 1) };
        assert!(GPModel::new(prior, base.clone(), None, Mode::Odvgp).is_err());
        let orth = InducingSet::Points { z: random(2, 1, 2) };
        assert!(GPModel::new(prior, base, Some(orth), Mode::Svgp).is_err());
    }
}
