//! Dense helpers shared by the plain and taped computations.

use nalgebra::DMatrix;

use crate::{Error, Result};

pub type Mat = DMatrix<f64>;

const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-4;

/// Lower Cholesky factor of `a`, retrying with diagonal jitter that starts at
/// `1e-8` and grows tenfold up to `1e-4`, both relative to the mean diagonal.
/// Returns the factor and the jitter actually added.
pub fn jittered_cholesky(a: &Mat, what: &str) -> Result<(Mat, f64)> {
    let n = a.nrows().max(1);
    jittered_cholesky_scaled(a, a.diagonal().sum() / n as f64, what)
}

/// As [`jittered_cholesky`] with the jitter measured against `scale`
/// instead of the mean diagonal of `a`. Schur complements use the scale of
/// the matrix they were reduced from, since their own diagonal can vanish.
pub fn jittered_cholesky_scaled(a: &Mat, scale: f64, what: &str) -> Result<(Mat, f64)> {
    let n = a.nrows();
    if n == 0 {
        return Ok((Mat::zeros(0, 0), 0.0));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(what.to_string()));
    }
    let scale = scale.abs().max(f64::MIN_POSITIVE);
    let sym = (a + a.transpose()) * 0.5;
    if let Some(l) = try_cholesky(&sym) {
        return Ok((l, 0.0));
    }
    let mut jitter = JITTER_START * scale;
    while jitter <= JITTER_MAX * scale * (1.0 + 1e-9) {
        let mut shifted = sym.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(l) = try_cholesky(&shifted) {
            log::debug!("{what}: cholesky needed jitter {jitter:.3e}");
            return Ok((l, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Conditioning {
        what: what.to_string(),
        condition: condition_estimate(&sym),
    })
}

fn try_cholesky(a: &Mat) -> Option<Mat> {
    let l = a.clone().cholesky()?.unpack();
    let ok = (0..l.nrows()).all(|i| l[(i, i)].is_finite() && l[(i, i)] > 0.0);
    ok.then_some(l)
}

/// Ratio of the extreme eigenvalue magnitudes of a symmetric matrix.
pub fn condition_estimate(a: &Mat) -> f64 {
    let eig = a.clone().symmetric_eigen().eigenvalues;
    let max = eig.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Entries of `a − b` smaller than the rounding error of the subtraction's
/// operands are set to exactly zero.
pub fn cancel_sub(a: &Mat, b: &Mat) -> Mat {
    Mat::from_fn(a.nrows(), a.ncols(), |i, j| cancel_entry(a[(i, j)], b[(i, j)]))
}

pub(crate) const CANCEL_ULPS: f64 = 64.0;

pub(crate) fn cancel_entry(a: f64, b: f64) -> f64 {
    let d = a - b;
    if d.abs() <= CANCEL_ULPS * f64::EPSILON * (a.abs() + b.abs()) {
        0.0
    } else {
        d
    }
}

/// `L⁻¹ B` for lower-triangular `L`.
pub fn solve_lower(l: &Mat, b: &Mat) -> Mat {
    l.solve_lower_triangular(b)
        .unwrap_or_else(|| Mat::from_element(b.nrows(), b.ncols(), f64::NAN))
}

/// `L⁻ᵀ B` for lower-triangular `L`.
pub fn solve_upper_tr(l: &Mat, b: &Mat) -> Mat {
    l.tr_solve_lower_triangular(b)
        .unwrap_or_else(|| Mat::from_element(b.nrows(), b.ncols(), f64::NAN))
}

/// Serde adapter storing a matrix as `{rows, cols, data}` with `data` in
/// row-major order.
pub mod row_major {
    use super::Mat;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Dense {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        let data = m.transpose().as_slice().to_vec();
        Dense {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        let dense = Dense::deserialize(d)?;
        if dense.data.len() != dense.rows * dense.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix data has {} entries, expected {}x{}",
                dense.data.len(),
                dense.rows,
                dense.cols
            )));
        }
        Ok(Mat::from_row_slice(dense.rows, dense.cols, &dense.data))
    }
}

/// Serde adapter storing a vector as a plain array.
pub mod plain_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
