//! Dataset ingestion, seeded splits, standardization and test metrics.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::models::{predict, GPModel};
use crate::{Error, Result};

type Mat = DMatrix<f64>;

const SNELSON_CSV: &str = include_str!("../data/snelson.csv");

/// Directory searched for user-supplied UCI CSVs before `data/uci`.
pub const UCI_DIR_VAR: &str = "SOGP_UCI_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub x: Mat,
    pub y: DVector<f64>,
    /// Present on splits produced by [`split_standardize`].
    pub standardization: Option<Transform>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }
}

/// Per-column affine maps learned on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub x_mean: Vec<f64>,
    pub x_std: Vec<f64>,
    pub y_mean: f64,
    pub y_std: f64,
    /// Columns (input index, or `None` for the target) whose std was zero
    /// and was replaced by one.
    pub degenerate: Vec<Option<usize>>,
}

impl Transform {
    pub fn apply_inputs(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.x_mean[j]) / self.x_std[j])
    }

    pub fn apply_targets(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| (v - self.y_mean) / self.y_std)
    }

    pub fn restore_targets(&self, y: &DVector<f64>) -> DVector<f64> {
        y.map(|v| v * self.y_std + self.y_mean)
    }

    pub fn restore_variances(&self, v: &DVector<f64>) -> DVector<f64> {
        v * (self.y_std * self.y_std)
    }
}

/// Where a dataset comes from: a bundled or UCI name, or a CSV path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    /// `snelson`, a UCI name looked up in [`UCI_DIR_VAR`] or `data/uci`, or
    /// a CSV path.
    pub name: String,
    /// Target column header; the last column when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

impl DataSource {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            target: None,
        }
    }
}

fn uci_candidates(name: &str) -> Vec<PathBuf> {
    let mut dirs = Vec::new();
    if let Ok(dir) = std::env::var(UCI_DIR_VAR) {
        dirs.push(PathBuf::from(dir));
    }
    dirs.push(Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("uci"));
    dirs.into_iter().map(|d| d.join(format!("{name}.csv"))).collect()
}

pub fn load_dataset(source: &DataSource) -> Result<Dataset> {
    if source.name == "snelson" {
        return parse_csv(SNELSON_CSV, "snelson", "snelson", source.target.as_deref());
    }
    let path = Path::new(&source.name);
    let looks_like_path = path.extension().is_some() || source.name.contains(std::path::MAIN_SEPARATOR);
    let path = if looks_like_path {
        path.to_path_buf()
    } else {
        let candidates = uci_candidates(&source.name);
        candidates.iter().find(|p| p.is_file()).cloned().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "dataset '{}' not found; looked in {}",
                source.name,
                candidates.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
            ))
        })?
    };
    let text = std::fs::read_to_string(&path).map_err(|e| {
        Error::InvalidArgument(format!("cannot read dataset {}: {e}", path.display()))
    })?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_csv(&text, &name, &path.display().to_string(), source.target.as_deref())
}

/// Header row required; every other cell must be a finite number.
pub fn parse_csv(text: &str, name: &str, origin: &str, target: Option<&str>) -> Result<Dataset> {
    let parse_err = |row: usize, column: usize, detail: String| Error::Parse {
        path: origin.to_string(),
        row,
        column,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, 0, e.to_string()))?
        .clone();
    let width = headers.len();
    if width < 2 {
        return Err(parse_err(1, 0, "need at least one input column and a target".into()));
    }
    let target_col = match target {
        Some(t) => headers
            .iter()
            .position(|h| h == t)
            .ok_or_else(|| parse_err(1, 0, format!("no column named '{t}'")))?,
        None => width - 1,
    };
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        // Row numbers are 1-based and count the header.
        let row = i + 2;
        let rec = rec.map_err(|e| parse_err(row, 0, e.to_string()))?;
        if rec.len() != width {
            return Err(parse_err(row, rec.len().min(width) + 1, format!("expected {width} cells, found {}", rec.len())));
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(row, j + 1, format!("'{cell}' is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(row, j + 1, format!("non-finite value '{cell}' in column '{}'", &headers[j])));
            }
            if j == target_col {
                ys.push(v);
            } else {
                xs.push(v);
            }
        }
    }
    if ys.is_empty() {
        return Err(parse_err(2, 0, "no data rows".into()));
    }
    let d = width - 1;
    Ok(Dataset {
        name: name.to_string(),
        x: Mat::from_row_slice(ys.len(), d, &xs),
        y: DVector::from_vec(ys),
        standardization: None,
    })
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Standardization statistics of `x` and `y`; constant columns get std 1.
pub fn fit_transform(name: &str, x: &Mat, y: &DVector<f64>) -> Transform {
    let mut degenerate = Vec::new();
    let mut x_mean = Vec::with_capacity(x.ncols());
    let mut x_std = Vec::with_capacity(x.ncols());
    for j in 0..x.ncols() {
        let (m, s) = mean_std(x.column(j).iter().copied());
        x_mean.push(m);
        x_std.push(if s > 0.0 {
            s
        } else {
            log::warn!("{name}: input column {j} is constant; std set to 1");
            degenerate.push(Some(j));
            1.0
        });
    }
    let (y_mean, mut y_std) = mean_std(y.iter().copied());
    if !(y_std > 0.0) {
        log::warn!("{name}: target is constant; std set to 1");
        degenerate.push(None);
        y_std = 1.0;
    }
    Transform {
        x_mean,
        x_std,
        y_mean,
        y_std,
        degenerate,
    }
}

/// Standardizes the whole dataset with its own statistics.
pub fn standardize(ds: &Dataset) -> (Dataset, Transform) {
    let t = fit_transform(&ds.name, &ds.x, &ds.y);
    let out = Dataset {
        name: ds.name.clone(),
        x: t.apply_inputs(&ds.x),
        y: t.apply_targets(&ds.y),
        standardization: Some(t.clone()),
    };
    (out, t)
}

/// Seeded permutation split, standardized with training-split statistics.
pub fn split_standardize(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset, Transform)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("test fraction {test_fraction} is not in (0, 1)")));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two rows to split".into()));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (test_idx, train_idx) = perm.split_at(n_test);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let t = fit_transform(&ds.name, &ds.x.select_rows(&train_idx), &ds.y.select_rows(&train_idx));
    let make = |idx: &[usize], suffix: &str| Dataset {
        name: format!("{}-{suffix}", ds.name),
        x: t.apply_inputs(&ds.x.select_rows(idx)),
        y: t.apply_targets(&ds.y.select_rows(idx)),
        standardization: Some(t.clone()),
    };
    Ok((make(&train_idx, "train"), make(&test_idx, "test"), t))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub rmse: f64,
    pub nlpd: f64,
}

/// RMSE and mean negative log density of `y` under independent Gaussians.
pub fn gaussian_metrics(y: &DVector<f64>, mean: &DVector<f64>, var: &DVector<f64>) -> Result<Metrics> {
    if let Some(v) = var.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::Evaluation(format!("predictive variance {v} is not positive")));
    }
    let n = y.len() as f64;
    let resid = y - mean;
    let rmse = (resid.norm_squared() / n).sqrt();
    let nlpd = resid
        .iter()
        .zip(var.iter())
        .map(|(r, v)| 0.5 * (2.0 * PI * v).ln() + r * r / (2.0 * v))
        .sum::<f64>()
        / n;
    Ok(Metrics { rmse, nlpd })
}

/// Metrics on the original output scale. The predictive density of `y*`
/// includes the observation noise `1/β`.
pub fn evaluate(model: &GPModel, test: &Dataset, transform: &Transform) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let post = predict(model, &test.x, false)?;
    let noisy = post.variance.add_scalar(1.0 / model.noise_precision);
    gaussian_metrics(
        &transform.restore_targets(&test.y),
        &transform.restore_targets(&post.mean),
        &transform.restore_variances(&noisy),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn snelson_is_bundled() {
        let ds = load_dataset(&DataSource::named("snelson")).unwrap();
        assert_eq!((ds.len(), ds.input_dim()), (200, 1));
    }

    #[test]
    fn small_csv_parses() {
        let ds = parse_csv("x1,x2,y\n1,2,3\n4,5,6\n7,8,9\n", "t", "t.csv", None).unwrap();
        assert_eq!(ds.x.shape(), (3, 2));
        assert_eq!(ds.y.as_slice(), &[3.0, 6.0, 9.0]);
        let by_name = parse_csv("a,y,b\n1,2,3\n", "t", "t.csv", Some("y")).unwrap();
        assert_eq!(by_name.x.as_slice(), &[1.0, 3.0]);
    }

    #[test]
    fn bad_cells_are_located() {
        match parse_csv("x,y\n1,2\n3,NaN\n", "t", "t.csv", None) {
            Err(Error::Parse { row, column, .. }) => assert_eq!((row, column), (3, 2)),
            other => panic!("{other:?}"),
        }
        match parse_csv("x,y\n1,2\n3\n", "t", "t.csv", None) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_csv("x,y\n1,abc\n", "t", "t.csv", None),
            Err(Error::Parse { row: 2, column: 2, .. })
        ));
        assert!(load_dataset(&DataSource::named("/nonexistent/file.csv")).is_err());
    }

    #[test]
    fn split_is_disjoint_complete_and_standardized() {
        let x = Mat::from_fn(100, 2, |i, j| (i * (j + 3)) as f64 % 17.0);
        let y = DVector::from_fn(100, |i, _| i as f64 * 0.5);
        let ds = Dataset {
            name: "s".into(),
            x,
            y,
            standardization: None,
        };
        let (tr, te, t) = split_standardize(&ds, 0.1, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (90, 10));
        let mut all: Vec<f64> = t
            .restore_targets(&tr.y)
            .iter()
            .chain(t.restore_targets(&te.y).iter())
            .map(|v| (v * 2.0).round())
            .collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, (0..100).map(|i| i as f64).collect::<Vec<_>>());
        for j in 0..2 {
            let (m, s) = mean_std(tr.x.column(j).iter().copied());
            assert!(m.abs() <= 1e-8 && (s - 1.0).abs() <= 1e-8);
        }
        let (m, s) = mean_std(tr.y.iter().copied());
        assert!(m.abs() <= 1e-8 && (s - 1.0).abs() <= 1e-8);
        assert_eq!(split_standardize(&ds, 0.1, 4).unwrap().0, tr);
    }

    #[test]
    fn constant_column_gets_unit_std() {
        let ds = parse_csv("a,b,y\n1,5,1\n2,5,2\n3,5,4\n4,5,3\n", "c", "c.csv", None).unwrap();
        let (_, _, t) = split_standardize(&ds, 0.25, 0).unwrap();
        assert_eq!(t.x_std[1], 1.0);
        assert_eq!(t.degenerate, vec![Some(1)]);
    }

    #[test]
    fn metric_closed_forms() {
        let y = DVector::from_vec(vec![0.0]);
        let m = gaussian_metrics(&y, &y, &DVector::from_vec(vec![1.0])).unwrap();
        assert_eq!(m.rmse, 0.0);
        assert_relative_eq!(m.nlpd, 0.918_938_533_204_672_7, epsilon = 1e-12);
        assert!(gaussian_metrics(&y, &y, &DVector::from_vec(vec![0.0])).is_err());
    }

    #[test]
    fn destandardized_nlpd_shifts_by_log_std() {
        let y = DVector::from_vec(vec![0.3, -1.2, 0.8]);
        let mu = DVector::from_vec(vec![0.1, -0.9, 1.1]);
        let var = DVector::from_vec(vec![0.5, 0.2, 1.3]);
        let t = Transform {
            x_mean: vec![],
            x_std: vec![],
            y_mean: 4.0,
            y_std: 2.5,
            degenerate: vec![],
        };
        let a = gaussian_metrics(&y, &mu, &var).unwrap();
        let b = gaussian_metrics(&t.restore_targets(&y), &t.restore_targets(&mu), &t.restore_variances(&var)).unwrap();
        assert_relative_eq!(b.nlpd, a.nlpd + 2.5f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(b.rmse, a.rmse * 2.5, epsilon = 1e-12);
    }
}
