//! Subcommands behind the `sogp` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use sogp::bench::{run_benchmark, Aggregate};
use sogp::config::RunConfig;
use sogp::data::{load_dataset, standardize, Dataset, Transform};
use sogp::features::activation_spectrum;
use sogp::io::write_atomic;
use sogp::kernels::{kernel_spectrum, spectrum_diagnostics, ZonalKernel};
use sogp::linalg::Mat;
use sogp::models::{predict, predictive_variance_terms, Checkpoint};
use sogp::plot::{band_plot, spectrum_grid, variance_terms_plot, write_figure, SpectrumPanel};
use sogp::special::SphereGeometry;
use sogp::training::{fit, init_model};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;
pub const EXIT_PARTIAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sogp", version, about = "Sparse variational GPs with spherical features and orthogonal decoupling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed (overrides `seed` and `schedule.seed` in the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Also write SVG figures.
    #[arg(long, global = true)]
    pub plot: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Kernel and activation coefficients with pairing diagnostics.
    Spectrum,
    /// Fit a model and write a checkpoint and trace.
    Fit,
    /// Predict from a checkpoint.
    Predict,
    /// Run a benchmark grid.
    Benchmark,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(sogp::Error),
    /// Number of failed benchmark cells.
    Partial(usize),
}

impl From<sogp::Error> for CliError {
    fn from(e: sogp::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_USAGE,
            CliError::Partial(_) => EXIT_PARTIAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(s) => write!(f, "{s}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Partial(n) => write!(f, "{n} benchmark cell(s) failed"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.schedule.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    match cli.command {
        Command::Spectrum => cmd_spectrum(&cfg, cli.plot).map(|_| ()),
        Command::Fit => cmd_fit(&cfg).map(|_| ()),
        Command::Predict => cmd_predict(&cfg, cli.plot).map(|_| ()),
        Command::Benchmark => cmd_benchmark(&cfg),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairDiagnostics {
    pub kernel: String,
    pub activation: String,
    pub mismatch_levels: Vec<usize>,
    pub excluded_levels: Vec<usize>,
    pub divergent: bool,
    pub truncation_residual: f64,
}

/// Writes `spectrum.csv` and `diagnostics.json` (plus `spectrum.svg` with
/// `plot`) and returns the per-pair diagnostics.
pub fn cmd_spectrum(cfg: &RunConfig, plot: bool) -> CliResult<Vec<PairDiagnostics>> {
    let sc = &cfg.spectrum;
    if sc.kernels.is_empty() || sc.activations.is_empty() {
        return Err(CliError::Usage("spectrum needs at least one kernel and one activation".into()));
    }
    if sc.input_dim == 0 {
        return Err(CliError::Usage("spectrum.input_dim must be positive".into()));
    }
    let mut geometry = SphereGeometry::for_input_dim(sc.input_dim)?;
    if let Some(c) = sc.funk_hecke_constant {
        geometry = geometry.with_funk_hecke_constant(c)?;
    }
    let mut panels = Vec::new();
    let mut report = Vec::new();
    for &family in &sc.kernels {
        let mut kernel = ZonalKernel::new(family);
        if let Some(ls) = sc.lengthscale {
            kernel = kernel.with_lengthscale(ls);
        }
        kernel.validate()?;
        let ks = kernel_spectrum(&kernel, &geometry, sc.max_level)?;
        for &act in &sc.activations {
            let fs = activation_spectrum(act, &geometry, sc.max_level)?;
            let d = spectrum_diagnostics(&ks, &fs)?;
            println!(
                "{:>10} + {:<8} divergent={:<5} mismatch={:?}",
                family.label(),
                act.label(),
                d.divergent,
                d.mismatch_levels
            );
            report.push(PairDiagnostics {
                kernel: family.label().into(),
                activation: act.label().into(),
                mismatch_levels: d.mismatch_levels,
                excluded_levels: d.excluded_levels,
                divergent: d.divergent,
                truncation_residual: d.truncation_residual,
            });
            panels.push(SpectrumPanel {
                kernel: family.label().into(),
                activation: act.label().into(),
                sqrt_lambda: ks.coefficients.iter().map(|l| l.max(0.0).sqrt()).collect(),
                varsigma: fs.coefficients.clone(),
            });
        }
    }
    let (svg, csv) = spectrum_grid(&panels);
    write_atomic(&cfg.out.join("spectrum.csv"), csv.as_bytes())?;
    if plot {
        write_atomic(&cfg.out.join("spectrum.svg"), svg.as_bytes())?;
    }
    let json = serde_json::to_string_pretty(&report).map_err(sogp::Error::from)?;
    write_atomic(&cfg.out.join("diagnostics.json"), json.as_bytes())?;
    Ok(report)
}

fn training_data(cfg: &RunConfig) -> CliResult<(Dataset, Transform)> {
    let raw = load_dataset(&cfg.data)?;
    Ok(standardize(&raw))
}

/// Fits on the whole dataset (standardized) and writes `checkpoint.json`
/// and `trace.csv`. Returns the final ELBO.
pub fn cmd_fit(cfg: &RunConfig) -> CliResult<f64> {
    let spec = cfg
        .model
        .as_ref()
        .ok_or_else(|| CliError::Usage("fit needs a [model] section in the config".into()))?;
    let (train, transform) = training_data(cfg)?;
    let schedule = sogp::training::FitSchedule {
        seed: cfg.seed,
        ..cfg.schedule.clone()
    };
    let model = init_model(spec, &train.x, cfg.seed)?;
    let (fitted, trace) = fit(&model, &train.x, &train.y, &schedule)?;
    let mut ck = Checkpoint::new(fitted, Some(cfg.seed));
    ck.transform = Some(transform);
    ck.provenance.insert("dataset".into(), train.name.clone());
    ck.provenance.insert("config".into(), cfg.to_toml()?);
    ck.save(&cfg.out.join("checkpoint.json"))?;
    trace.write_csv(&cfg.out.join("trace.csv"))?;
    let elbo = trace
        .final_elbo()
        .ok_or_else(|| CliError::Core(sogp::Error::Evaluation("fit produced an empty trace".into())))?;
    println!(
        "final elbo {elbo:.6} after {} iterations ({:.1} it/s){}",
        trace.iterations,
        trace.throughput,
        trace.message.as_deref().map(|m| format!("; {m}")).unwrap_or_default()
    );
    Ok(elbo)
}

/// Query inputs in original units.
fn query_inputs(cfg: &RunConfig, data: &Dataset) -> Mat {
    let n = cfg.predict.grid;
    if data.input_dim() != 1 || n == 0 {
        return data.x.clone();
    }
    let col = data.x.column(0);
    let (lo, hi) = (col.min(), col.max());
    let pad = cfg.predict.padding * (hi - lo);
    let (a, b) = (lo - pad, hi + pad);
    Mat::from_fn(n, 1, |i, _| {
        if n == 1 {
            0.5 * (a + b)
        } else {
            a + (b - a) * i as f64 / (n - 1) as f64
        }
    })
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub x: Mat,
    pub mean: Vec<f64>,
    /// Latent-function variance, original units.
    pub variance: Vec<f64>,
}

/// Writes `predictions.csv` (inputs, mean, latent variance in original
/// units), plus band and variance-term figures with `plot`.
pub fn cmd_predict(cfg: &RunConfig, plot: bool) -> CliResult<Prediction> {
    let ck = Checkpoint::load(&cfg.checkpoint_path())?;
    let data = load_dataset(&cfg.data)?;
    if data.input_dim() != ck.model.prior.input_dim() {
        return Err(CliError::Usage(format!(
            "dataset has {} inputs but the checkpoint expects {}",
            data.input_dim(),
            ck.model.prior.input_dim()
        )));
    }
    let xs = query_inputs(cfg, &data);
    let (xs_model, scale_mean, scale_var): (Mat, Box<dyn Fn(f64) -> f64>, f64) = match &ck.transform {
        Some(t) => {
            let t2 = t.clone();
            (t.apply_inputs(&xs), Box::new(move |m| m * t2.y_std + t2.y_mean), t.y_std * t.y_std)
        }
        None => (xs.clone(), Box::new(|m| m), 1.0),
    };
    let post = predict(&ck.model, &xs_model, false)?;
    let mean: Vec<f64> = post.mean.iter().map(|&m| scale_mean(m)).collect();
    let variance: Vec<f64> = post.variance.iter().map(|v| v * scale_var).collect();

    let d = xs.ncols();
    let mut csv = String::new();
    for j in 0..d {
        csv.push_str(&format!("x{j},"));
    }
    csv.push_str("mean,variance\n");
    for i in 0..xs.nrows() {
        for j in 0..d {
            csv.push_str(&format!("{},", xs[(i, j)]));
        }
        csv.push_str(&format!("{},{}\n", mean[i], variance[i]));
    }
    write_atomic(&cfg.out.join("predictions.csv"), csv.as_bytes())?;

    if plot {
        if d > 1 {
            log::warn!("inputs are {d}-dimensional; figures use the first input column");
        }
        let mut order: Vec<usize> = (0..xs.nrows()).collect();
        order.sort_by(|&a, &b| xs[(a, 0)].total_cmp(&xs[(b, 0)]));
        let x0: Vec<f64> = order.iter().map(|&i| xs[(i, 0)]).collect();
        let m: Vec<f64> = order.iter().map(|&i| mean[i]).collect();
        let v: Vec<f64> = order.iter().map(|&i| variance[i]).collect();
        let dx: Vec<f64> = data.x.column(0).iter().copied().collect();
        let dy: Vec<f64> = data.y.iter().copied().collect();
        let (svg, csv) = band_plot(&x0, &m, &v, Some((&dx, &dy)));
        write_figure(&cfg.out, "band", &svg, &csv)?;

        let sorted = xs_model.select_rows(&order);
        let mut terms = predictive_variance_terms(&ck.model, &sorted)?;
        for t in [
            &mut terms.prior,
            &mut terms.base_projection,
            &mut terms.base_posterior,
            &mut terms.orthogonal_projection,
            &mut terms.orthogonal_posterior,
        ] {
            *t *= scale_var;
        }
        let (svg, csv) = variance_terms_plot(&x0, &terms);
        write_figure(&cfg.out, "variance_terms", &svg, &csv)?;
    }
    Ok(Prediction { x: xs, mean, variance })
}

fn print_aggregates(aggs: &[Aggregate]) {
    println!(
        "{:<10} {:<11} {:<9} {:<14} {:>3} {:>2} {:>19} {:>19} {:>21} {:>17}",
        "dataset", "kernel", "features", "config", "L", "n", "rmse", "nlpd", "elbo", "throughput"
    );
    for a in aggs {
        println!(
            "{:<10} {:<11} {:<9} {:<14} {:>3} {:>2} {:>9.4} ± {:<7.4} {:>9.4} ± {:<7.4} {:>11.3} ± {:<7.3} {:>8.1} ± {:<6.1}",
            a.dataset,
            a.kernel.label(),
            a.features.label(),
            a.config,
            a.l,
            a.n,
            a.rmse_mean,
            a.rmse_se,
            a.nlpd_mean,
            a.nlpd_se,
            a.elbo_mean,
            a.elbo_se,
            a.throughput_mean,
            a.throughput_se
        );
    }
}

/// Runs the `[benchmark]` grid into `out`; any failed cell makes this an
/// error after all other cells have run.
pub fn cmd_benchmark(cfg: &RunConfig) -> CliResult<()> {
    let grid = cfg
        .benchmark
        .as_ref()
        .ok_or_else(|| CliError::Usage("benchmark needs a [benchmark] section in the config".into()))?;
    let report = run_benchmark(grid, Some(&cfg.out))?;
    let aggs = report.aggregates();
    print_aggregates(&aggs);
    for f in &report.failures {
        eprintln!("failed: {}: {}", f.key.describe(), f.error);
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Partial(report.failures.len()))
    }
}
