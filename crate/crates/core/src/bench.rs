//! Benchmark grid runner with resumable, cell-keyed results.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{evaluate, load_dataset, split_standardize, standardize, DataSource, Dataset, Metrics};
use crate::features::ActivationKind;
use crate::io::write_atomic;
use crate::kernels::KernelFamily;
use crate::models::{elbo, Mode};
use crate::training::{fit, init_model, FeatureFamily, FitSchedule, ModelSpec};
use crate::{Error, Result};

/// Base feature family as it appears in result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureLabel {
    Points,
    Harmonics,
    Relu,
    Softplus,
}

impl FeatureLabel {
    pub fn label(&self) -> &'static str {
        match self {
            FeatureLabel::Points => "points",
            FeatureLabel::Harmonics => "harmonics",
            FeatureLabel::Relu => "relu",
            FeatureLabel::Softplus => "softplus",
        }
    }

    fn family(&self) -> (FeatureFamily, ActivationKind) {
        match self {
            FeatureLabel::Points => (FeatureFamily::Points, ActivationKind::Relu),
            FeatureLabel::Harmonics => (FeatureFamily::Harmonics, ActivationKind::Relu),
            FeatureLabel::Relu => (FeatureFamily::Activations, ActivationKind::Relu),
            FeatureLabel::Softplus => (FeatureFamily::Activations, ActivationKind::Softplus),
        }
    }
}

/// Base count `M`, orthogonal count `K` and truncation level `L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
}

impl GridConfig {
    /// Row label in the style "M=128, K=0".
    pub fn label(&self) -> String {
        format!("M={}, K={}", self.m, self.k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkGrid {
    #[serde(default)]
    pub datasets: Vec<String>,
    #[serde(default)]
    pub kernels: Vec<KernelFamily>,
    #[serde(default)]
    pub features: Vec<FeatureLabel>,
    #[serde(default)]
    pub configs: Vec<GridConfig>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Zero fits on the whole dataset and leaves RMSE/NLPD as NaN.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_orthogonal")]
    pub orthogonal: FeatureFamily,
    #[serde(default = "default_bias")]
    pub bias: f64,
    #[serde(default)]
    pub schedule: FitSchedule,
}

fn default_test_fraction() -> f64 {
    0.1
}
fn default_mode() -> Mode {
    Mode::Solve
}
fn default_orthogonal() -> FeatureFamily {
    FeatureFamily::Points
}
fn default_bias() -> f64 {
    1.0
}

/// One grid cell: everything except the settings shared by the grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellKey {
    pub dataset: String,
    pub kernel: KernelFamily,
    pub features: FeatureLabel,
    pub config: GridConfig,
    pub seed: u64,
}

impl CellKey {
    pub fn describe(&self) -> String {
        format!(
            "{}/{}/{}/M={}/K={}/L={}/seed={}",
            self.dataset,
            self.kernel.label(),
            self.features.label(),
            self.config.m,
            self.config.k,
            self.config.l,
            self.seed
        )
    }
}

impl BenchmarkGrid {
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for d in &self.datasets {
            for &kernel in &self.kernels {
                for &features in &self.features {
                    for &config in &self.configs {
                        for &seed in &self.seeds {
                            out.push(CellKey {
                                dataset: d.clone(),
                                kernel,
                                features,
                                config,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Stable hash of a cell together with every shared setting, so a
    /// changed grid never resumes from stale rows.
    pub fn cell_hash(&self, key: &CellKey) -> String {
        let shared = serde_json::json!({
            "test_fraction": self.test_fraction,
            "mode": self.mode,
            "orthogonal": self.orthogonal,
            "bias": self.bias,
            "schedule": self.schedule,
        });
        let mut h = Sha256::new();
        h.update(key.describe().as_bytes());
        h.update(shared.to_string().as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn spec(&self, key: &CellKey) -> ModelSpec {
        let (base, activation) = key.features.family();
        ModelSpec {
            kernel: key.kernel,
            bias: self.bias,
            max_level: key.config.l,
            base,
            num_base: key.config.m,
            orthogonal: self.orthogonal,
            num_orthogonal: key.config.k,
            activation,
            mode: if key.config.k == 0 { Mode::Svgp } else { self.mode },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub dataset: String,
    pub kernel: KernelFamily,
    pub features: FeatureLabel,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub seed: u64,
    pub rmse: f64,
    pub nlpd: f64,
    pub elbo: f64,
    pub throughput: f64,
}

impl ResultRow {
    pub fn key(&self) -> CellKey {
        CellKey {
            dataset: self.dataset.clone(),
            kernel: self.kernel,
            features: self.features,
            config: GridConfig {
                m: self.m,
                k: self.k,
                l: self.l,
            },
            seed: self.seed,
        }
    }
}

pub const RESULTS_HEADER: &str = "dataset,kernel,features,M,K,L,seed,rmse,nlpd,elbo,throughput";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub dataset: String,
    pub kernel: KernelFamily,
    pub features: FeatureLabel,
    pub config: String,
    #[serde(rename = "L")]
    pub l: usize,
    pub n: usize,
    pub rmse_mean: f64,
    pub rmse_se: f64,
    pub nlpd_mean: f64,
    pub nlpd_se: f64,
    pub elbo_mean: f64,
    pub elbo_se: f64,
    pub throughput_mean: f64,
    pub throughput_se: f64,
}

/// Mean and standard error (sample standard deviation over `√n`; zero for
/// a single value).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Groups rows by everything except the seed.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, KernelFamily, FeatureLabel, GridConfig), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let k = r.key();
        groups.entry((k.dataset, k.kernel, k.features, k.config)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, kernel, features, config), rs)| {
            let col = |f: fn(&ResultRow) -> f64| mean_se(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            let (rmse_mean, rmse_se) = col(|r| r.rmse);
            let (nlpd_mean, nlpd_se) = col(|r| r.nlpd);
            let (elbo_mean, elbo_se) = col(|r| r.elbo);
            let (throughput_mean, throughput_se) = col(|r| r.throughput);
            Aggregate {
                dataset,
                kernel,
                features,
                config: config.label(),
                l: config.l,
                n: rs.len(),
                rmse_mean,
                rmse_se,
                nlpd_mean,
                nlpd_se,
                elbo_mean,
                elbo_se,
                throughput_mean,
                throughput_se,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub key: CellKey,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchmarkReport {
    /// In grid order.
    pub rows: Vec<ResultRow>,
    pub failures: Vec<CellFailure>,
    /// Cells taken from a previous run's results instead of refitted.
    pub resumed: usize,
}

impl BenchmarkReport {
    pub fn aggregates(&self) -> Vec<Aggregate> {
        aggregate(&self.rows)
    }
}

fn csv_string<T: Serialize>(rows: &[T], header: &str) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let s = String::from_utf8(bytes).expect("csv output is utf-8");
    Ok(if rows.is_empty() { format!("{header}\n") } else { s })
}

pub fn results_csv(rows: &[ResultRow]) -> Result<String> {
    csv_string(rows, RESULTS_HEADER)
}

pub fn aggregates_csv(aggs: &[Aggregate]) -> Result<String> {
    csv_string(
        aggs,
        "dataset,kernel,features,config,L,n,rmse_mean,rmse_se,nlpd_mean,nlpd_se,elbo_mean,elbo_se,throughput_mean,throughput_se",
    )
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.display().to_string(),
                row: i + 2,
                column: 0,
                detail: e.to_string(),
            })
        })
        .collect()
}

/// Fits and scores one cell.
pub fn run_cell(grid: &BenchmarkGrid, key: &CellKey, data: &Dataset) -> Result<ResultRow> {
    let spec = grid.spec(key);
    let schedule = FitSchedule {
        seed: key.seed,
        ..grid.schedule.clone()
    };
    let (train, test, transform) = if grid.test_fraction > 0.0 {
        let (tr, te, t) = split_standardize(data, grid.test_fraction, key.seed)?;
        (tr, Some(te), Some(t))
    } else {
        (standardize(data).0, None, None)
    };
    let model = init_model(&spec, &train.x, key.seed)?;
    let (fitted, trace) = fit(&model, &train.x, &train.y, &schedule)?;
    let Metrics { rmse, nlpd } = match (&test, &transform) {
        (Some(te), Some(t)) => evaluate(&fitted, te, t)?,
        _ => Metrics {
            rmse: f64::NAN,
            nlpd: f64::NAN,
        },
    };
    let final_elbo = elbo(&fitted, &train.x, &train.y, train.len() as f64)?;
    Ok(ResultRow {
        dataset: key.dataset.clone(),
        kernel: key.kernel,
        features: key.features,
        m: key.config.m,
        k: key.config.k,
        l: key.config.l,
        seed: key.seed,
        rmse,
        nlpd,
        elbo: final_elbo,
        throughput: trace.throughput,
    })
}

/// Per-cell outcome files under `<out>/cells/`. Each cell has a single
/// writer, so concurrent runs over one directory never clobber each other;
/// the summary tables are rebuilt from whatever cell files exist.
struct CellStore<'a> {
    dir: &'a Path,
}

enum Stored {
    Done(ResultRow),
    Failed(String),
}

impl CellStore<'_> {
    fn ok_path(&self, hash: &str) -> std::path::PathBuf {
        self.dir.join("cells").join(format!("{hash}.csv"))
    }

    fn failed_path(&self, hash: &str) -> std::path::PathBuf {
        self.dir.join("cells").join(format!("{hash}.failed"))
    }

    fn get(&self, hash: &str) -> Result<Option<Stored>> {
        let ok = self.ok_path(hash);
        if ok.exists() {
            let mut rows = read_results(&ok)?;
            return match rows.pop() {
                Some(r) if rows.is_empty() => Ok(Some(Stored::Done(r))),
                _ => Err(Error::InvalidArgument(format!("{}: expected one row", ok.display()))),
            };
        }
        let failed = self.failed_path(hash);
        if failed.exists() {
            return Ok(Some(Stored::Failed(std::fs::read_to_string(failed)?)));
        }
        Ok(None)
    }

    fn put(&self, hash: &str, outcome: &std::result::Result<ResultRow, String>) -> Result<()> {
        match outcome {
            Ok(row) => {
                write_atomic(&self.ok_path(hash), results_csv(std::slice::from_ref(row))?.as_bytes())?;
                let failed = self.failed_path(hash);
                if failed.exists() {
                    std::fs::remove_file(failed)?;
                }
                Ok(())
            }
            Err(e) => write_atomic(&self.failed_path(hash), e.as_bytes()),
        }
    }

    /// Rewrites `results.csv`, `index.csv` and `aggregates.csv` for the
    /// cells of `grid`, in grid order.
    fn summarize(&self, grid: &BenchmarkGrid, cells: &[CellKey]) -> Result<Vec<ResultRow>> {
        let mut rows = Vec::new();
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidArgument(e.to_string());
        w.write_record(["hash", "cell", "status"]).map_err(csv_err)?;
        for key in cells {
            let hash = grid.cell_hash(key);
            let status = match self.get(&hash)? {
                Some(Stored::Done(r)) => {
                    rows.push(r);
                    "ok".to_string()
                }
                Some(Stored::Failed(e)) => format!("failed: {e}"),
                None => "pending".to_string(),
            };
            w.write_record([hash.as_str(), key.describe().as_str(), status.as_str()])
                .map_err(csv_err)?;
        }
        let index = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        write_atomic(&self.dir.join("results.csv"), results_csv(&rows)?.as_bytes())?;
        write_atomic(&self.dir.join("index.csv"), &index)?;
        write_atomic(&self.dir.join("aggregates.csv"), aggregates_csv(&aggregate(&rows))?.as_bytes())?;
        Ok(rows)
    }
}

/// Runs every cell, reusing cells already completed under `out_dir`
/// (failed cells are retried). Summary tables are rewritten atomically
/// after each cell, so an interrupted run resumes where it stopped.
pub fn run_benchmark(grid: &BenchmarkGrid, out_dir: Option<&Path>) -> Result<BenchmarkReport> {
    let cells = grid.cells();
    let store = out_dir.map(|dir| CellStore { dir });
    let mut datasets: HashMap<String, std::result::Result<Dataset, String>> = HashMap::new();
    let mut report = BenchmarkReport::default();
    if let Some(s) = &store {
        s.summarize(grid, &cells)?;
    }

    for key in &cells {
        let hash = grid.cell_hash(key);
        if let Some(s) = &store {
            if let Some(Stored::Done(row)) = s.get(&hash)? {
                report.rows.push(row);
                report.resumed += 1;
                continue;
            }
        }
        let data = datasets
            .entry(key.dataset.clone())
            .or_insert_with(|| load_dataset(&DataSource::named(&key.dataset)).map_err(|e| e.to_string()));
        let outcome = match data {
            Ok(d) => run_cell(grid, key, d).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        match &outcome {
            Ok(row) => {
                log::info!("{}: elbo {:.3}", key.describe(), row.elbo);
                report.rows.push(row.clone());
            }
            Err(e) => {
                log::warn!("{} failed: {e}", key.describe());
                report.failures.push(CellFailure {
                    key: key.clone(),
                    error: e.clone(),
                });
            }
        }
        if let Some(s) = &store {
            s.put(&hash, &outcome)?;
            s.summarize(grid, &cells)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::OptimizerKind;

    fn tiny_grid(seeds: Vec<u64>) -> BenchmarkGrid {
        BenchmarkGrid {
            datasets: vec!["snelson".into()],
            kernels: vec![KernelFamily::SquaredExp],
            features: vec![FeatureLabel::Points],
            configs: vec![GridConfig { m: 4, k: 0, l: 4 }],
            seeds,
            test_fraction: 0.1,
            mode: Mode::Solve,
            orthogonal: FeatureFamily::Points,
            bias: 1.0,
            schedule: FitSchedule {
                phase1_iters: 3,
                optimizer: OptimizerKind::QuasiNewtonFullBatch,
                max_iters: 5,
                ..Default::default()
            },
        }
    }

    #[test]
    fn five_seeds_give_five_rows_and_one_aggregate() {
        let report = run_benchmark(&tiny_grid(vec![0, 1, 2, 3, 4]), None).unwrap();
        assert_eq!(report.rows.len(), 5);
        let aggs = report.aggregates();
        assert_eq!(aggs.len(), 1);
        assert_eq!(aggs[0].config, "M=4, K=0");
        let (m, se) = mean_se(&report.rows.iter().map(|r| r.rmse).collect::<Vec<_>>());
        assert_eq!((aggs[0].rmse_mean, aggs[0].rmse_se), (m, se));
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_table() {
        let dir = tempfile::tempdir().unwrap();
        let full = tempfile::tempdir().unwrap();
        let grid = tiny_grid(vec![0, 1, 2]);
        let uninterrupted = run_benchmark(&grid, Some(full.path())).unwrap();
        // Simulate a kill after the first two cells.
        run_benchmark(&tiny_grid(vec![0, 1]), Some(dir.path())).unwrap();
        let resumed = run_benchmark(&grid, Some(dir.path())).unwrap();
        assert_eq!(resumed.resumed, 2);
        // Throughput is wall-clock; every other column must agree exactly.
        let strip = |rows: Vec<ResultRow>| -> Vec<ResultRow> {
            rows.into_iter().map(|r| ResultRow { throughput: 0.0, ..r }).collect()
        };
        let on_disk = read_results(&dir.path().join("results.csv")).unwrap();
        assert_eq!(strip(on_disk), strip(uninterrupted.rows.clone()));
        assert_eq!(strip(resumed.rows), strip(uninterrupted.rows));
    }

    #[test]
    fn failed_cells_are_recorded_not_fatal() {
        let mut grid = tiny_grid(vec![0]);
        grid.datasets.push("/nonexistent/missing.csv".into());
        let dir = tempfile::tempdir().unwrap();
        let report = run_benchmark(&grid, Some(dir.path())).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.failures.len(), 1);
        let index = std::fs::read_to_string(dir.path().join("index.csv")).unwrap();
        assert!(index.contains("failed"));
    }

    #[test]
    fn empty_grid_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_benchmark(&BenchmarkGrid { seeds: vec![], ..tiny_grid(vec![]) }, Some(dir.path())).unwrap();
        assert!(report.rows.is_empty());
        assert_eq!(
            std::fs::read_to_string(dir.path().join("results.csv")).unwrap(),
            format!("{RESULTS_HEADER}\n")
        );
    }

    #[test]
    fn results_round_trip_through_csv() {
        let row = ResultRow {
            dataset: "d".into(),
            kernel: KernelFamily::Matern52,
            features: FeatureLabel::Relu,
            m: 128,
            k: 128,
            l: 6,
            seed: 3,
            rmse: 0.1 + 0.2,
            nlpd: f64::NAN,
            elbo: -12.5,
            throughput: 3.25,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        std::fs::write(&p, results_csv(std::slice::from_ref(&row)).unwrap()).unwrap();
        let back = read_results(&p).unwrap();
        assert_eq!(back[0].rmse, row.rmse);
        assert!(back[0].nlpd.is_nan());
        assert_eq!(back[0].key(), row.key());
        assert!(results_csv(&[row]).unwrap().starts_with(RESULTS_HEADER));
    }
}
