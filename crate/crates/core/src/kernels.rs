//! Zonal kernels on the bias-augmented sphere and their Funk–Hecke spectra.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::special::{default_quadrature, funk_hecke_coefficients, num_harmonics, SphereGeometry};
use crate::{Error, Result};

type Mat = DMatrix<f64>;

/// Spectral coefficients below this fraction of the largest one are zero.
pub const SPECTRUM_CLAMP: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    #[serde(alias = "arccos")]
    Arccos1,
    #[serde(alias = "matern")]
    Matern52,
    #[serde(alias = "se")]
    SquaredExp,
    /// `κ ≡ amplitude`; only useful as a degenerate reference.
    Constant,
}

impl KernelFamily {
    pub fn label(&self) -> &'static str {
        match self {
            KernelFamily::Arccos1 => "arccos1",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::SquaredExp => "squaredexp",
            KernelFamily::Constant => "constant",
        }
    }

    /// Exponent `p` of the norm prefactor `(‖x̃‖‖x̃′‖)^p`.
    pub fn homogeneity_degree(&self) -> f64 {
        match self {
            KernelFamily::Arccos1 => 1.0,
            _ => 0.0,
        }
    }

    pub fn has_lengthscale(&self) -> bool {
        matches!(self, KernelFamily::Matern52 | KernelFamily::SquaredExp)
    }
}

/// `k(x, x′) = (‖x̃‖‖x̃′‖)^p κ(x̂ᵀx̂′)` where `x̃ = [x; bias]` and `x̂ = x̃/‖x̃‖`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZonalKernel {
    pub family: KernelFamily,
    pub amplitude: f64,
    pub lengthscale: f64,
    pub bias: f64,
}

impl ZonalKernel {
    pub fn new(family: KernelFamily) -> Self {
        Self {
            family,
            amplitude: 1.0,
            lengthscale: 1.0,
            bias: 1.0,
        }
    }

    pub fn with_amplitude(mut self, amplitude: f64) -> Self {
        self.amplitude = amplitude;
        self
    }

    pub fn with_lengthscale(mut self, lengthscale: f64) -> Self {
        self.lengthscale = lengthscale;
        self
    }

    pub fn with_bias(mut self, bias: f64) -> Self {
        self.bias = bias;
        self
    }

    pub fn homogeneity_degree(&self) -> f64 {
        self.family.homogeneity_degree()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.amplitude) {
            return Err(Error::InvalidArgument(format!(
                "kernel amplitude must be positive, got {}",
                self.amplitude
            )));
        }
        if !positive(self.lengthscale) {
            return Err(Error::InvalidArgument(format!(
                "kernel lengthscale must be positive, got {}",
                self.lengthscale
            )));
        }
        if !(self.bias.is_finite() && self.bias >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel bias must be nonnegative, got {}",
                self.bias
            )));
        }
        Ok(())
    }
}

/// Appends `bias`, then splits into direction and norm.
pub fn lift_to_sphere(x: &[f64], bias: f64) -> Result<(Vec<f64>, f64)> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input row".into()));
    }
    let norm = (x.iter().map(|v| v * v).sum::<f64>() + bias * bias).sqrt();
    if norm == 0.0 {
        return Err(Error::InvalidArgument(
            "cannot lift the zero vector with zero bias onto the sphere".into(),
        ));
    }
    let mut out: Vec<f64> = x.iter().map(|v| v / norm).collect();
    out.push(bias / norm);
    Ok((out, norm))
}

/// Row-wise [`lift_to_sphere`]: unit rows (`N × (d+1)`) and their norms.
pub fn lift_rows(x: &Mat, bias: f64) -> Result<(Mat, Vec<f64>)> {
    let (n, d) = x.shape();
    let mut unit = Mat::zeros(n, d + 1);
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        let (u, r) = lift_to_sphere(&row, bias)?;
        for (j, v) in u.into_iter().enumerate() {
            unit[(i, j)] = v;
        }
        norms.push(r);
    }
    Ok((unit, norms))
}

/// `κ` and its partial derivatives at one argument. The amplitude partial is
/// `value / amplitude` and is not stored.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ShapePartials {
    pub value: f64,
    pub d_t: f64,
    pub d_lengthscale: f64,
}

pub(crate) fn shape_partials(kernel: &ZonalKernel, t: f64) -> ShapePartials {
    let t = t.clamp(-1.0, 1.0);
    let a = kernel.amplitude;
    let ls = kernel.lengthscale;
    match kernel.family {
        KernelFamily::Arccos1 => {
            let angle = PI - t.acos();
            ShapePartials {
                value: a / PI * ((1.0 - t * t).max(0.0).sqrt() + t * angle),
                d_t: a / PI * angle,
                d_lengthscale: 0.0,
            }
        }
        KernelFamily::Matern52 => {
            let s = 5f64.sqrt() * (2.0 - 2.0 * t).max(0.0).sqrt() / ls;
            let e = (-s).exp();
            ShapePartials {
                value: a * (1.0 + s + s * s / 3.0) * e,
                d_t: a * 5.0 / (3.0 * ls * ls) * (1.0 + s) * e,
                d_lengthscale: a * s * s * (1.0 + s) * e / (3.0 * ls),
            }
        }
        KernelFamily::SquaredExp => {
            let u = 1.0 - t;
            let value = a * (-u / (ls * ls)).exp();
            ShapePartials {
                value,
                d_t: value / (ls * ls),
                d_lengthscale: value * 2.0 * u / (ls * ls * ls),
            }
        }
        KernelFamily::Constant => ShapePartials {
            value: a,
            d_t: 0.0,
            d_lengthscale: 0.0,
        },
    }
}

/// Shape function `κ(t)`, `t` clamped to `[−1, 1]`.
pub fn shape_function(kernel: &ZonalKernel, t: f64) -> f64 {
    shape_partials(kernel, t).value
}

/// Gram matrix between the rows of `x` and `x2`.
pub fn kernel_eval(kernel: &ZonalKernel, x: &Mat, x2: &Mat) -> Result<Mat> {
    if x.ncols() != x2.ncols() {
        return Err(Error::InvalidArgument(format!(
            "kernel_eval column mismatch: {} vs {}",
            x.ncols(),
            x2.ncols()
        )));
    }
    let (u1, n1) = lift_rows(x, kernel.bias)?;
    let (u2, n2) = lift_rows(x2, kernel.bias)?;
    let p = kernel.homogeneity_degree();
    let dots = &u1 * u2.transpose();
    Ok(Mat::from_fn(x.nrows(), x2.nrows(), |i, j| {
        let scale = if p == 0.0 { 1.0 } else { (n1[i] * n2[j]).powf(p) };
        scale * shape_function(kernel, dots[(i, j)])
    }))
}

/// Diagonal `k(x, x)` for every row.
pub fn kernel_diag(kernel: &ZonalKernel, x: &Mat) -> Result<Vec<f64>> {
    let (_, norms) = lift_rows(x, kernel.bias)?;
    let p = kernel.homogeneity_degree();
    let k1 = shape_function(kernel, 1.0);
    Ok(norms.iter().map(|r| r.powf(2.0 * p) * k1).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectrumKind {
    Kernel,
    Activation,
}

/// Per-level coefficients `λ_ℓ` (kernels) or `ς_ℓ` (activations), `ℓ = 0..=L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub geometry: SphereGeometry,
    pub coefficients: Vec<f64>,
    pub multiplicities: Vec<usize>,
    pub kind: SpectrumKind,
    /// Shape function at `t = 1`, the total mass of the Mercer series.
    pub value_at_one: f64,
}

impl Spectrum {
    pub(crate) fn from_coefficients(
        geometry: SphereGeometry,
        coefficients: Vec<f64>,
        kind: SpectrumKind,
        value_at_one: f64,
    ) -> Self {
        let multiplicities = (0..coefficients.len())
            .map(|l| num_harmonics(&geometry, l))
            .collect();
        Self {
            geometry,
            coefficients,
            multiplicities,
            kind,
            value_at_one,
        }
    }

    pub fn max_level(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// `Σ_ℓ c_ℓ N_ℓ P_ℓ(t) / A_D`, which reproduces the shape function for a
    /// kernel spectrum as `L → ∞`.
    pub fn mercer_sum(&self, t: f64) -> f64 {
        let alpha = self.geometry.alpha();
        let mut p = vec![0.0; self.coefficients.len()];
        crate::special::normalized_gegenbauer_into(alpha, t.clamp(-1.0, 1.0), &mut p);
        self.coefficients
            .iter()
            .enumerate()
            .map(|(l, c)| c * self.geometry.addition_factor(l) * p[l])
            .sum()
    }

    /// Levels whose coefficient survived the clamp.
    pub fn positive_levels(&self) -> Vec<usize> {
        (0..self.coefficients.len())
            .filter(|&l| self.coefficients[l] > 0.0)
            .collect()
    }
}

/// Zeroes coefficients below [`SPECTRUM_CLAMP`] relative to the largest.
pub(crate) fn clamp_spectrum(values: &mut [f64]) {
    let max = values.iter().fold(0.0f64, |m, v| m.max(*v));
    for v in values.iter_mut() {
        if *v <= SPECTRUM_CLAMP * max {
            *v = 0.0;
        }
    }
}

/// Mercer coefficients `λ_0..=λ_L` of `kernel` on `geometry`.
pub fn kernel_spectrum(kernel: &ZonalKernel, geometry: &SphereGeometry, max_level: usize) -> Result<Spectrum> {
    Ok(kernel_spectrum_partials(kernel, geometry, max_level)?.0)
}

/// Spectrum together with `∂λ_ℓ/∂lengthscale`; clamped levels get zero
/// derivative. `∂λ_ℓ/∂amplitude = λ_ℓ/amplitude`.
pub(crate) fn kernel_spectrum_partials(
    kernel: &ZonalKernel,
    geometry: &SphereGeometry,
    max_level: usize,
) -> Result<(Spectrum, Vec<f64>)> {
    kernel.validate()?;
    let rule = default_quadrature(geometry, max_level)?;
    let mut lambda = funk_hecke_coefficients(|t| shape_function(kernel, t), max_level, &rule)?;
    clamp_spectrum(&mut lambda);
    let mut d_ls = if kernel.family.has_lengthscale() {
        funk_hecke_coefficients(|t| shape_partials(kernel, t).d_lengthscale, max_level, &rule)?
    } else {
        vec![0.0; max_level + 1]
    };
    for (d, l) in d_ls.iter_mut().zip(&lambda) {
        if *l == 0.0 {
            *d = 0.0;
        }
    }
    let spectrum = Spectrum::from_coefficients(
        *geometry,
        lambda,
        SpectrumKind::Kernel,
        shape_function(kernel, 1.0),
    );
    Ok((spectrum, d_ls))
}

/// Comparison of a kernel spectrum against a feature spectrum.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    /// Levels where the feature coefficient vanishes but the kernel's does not.
    pub mismatch_levels: Vec<usize>,
    /// Levels where the kernel coefficient vanishes but the feature's does not.
    pub excluded_levels: Vec<usize>,
    /// `(ℓ, Σ_{ℓ′≤ℓ} ς²/λ · N)` over levels where both coefficients are resolved.
    pub partial_sums: Vec<(usize, f64)>,
    pub divergent: bool,
    /// `κ(1)` minus the truncated Mercer series at `t = 1`.
    pub truncation_residual: f64,
}

/// A feature coefficient counts as zero when it is below `SPECTRUM_CLAMP`
/// both absolutely and relative to its neighbouring levels. The second test
/// separates exact zeros (parity) from smooth exponential decay, whose values
/// underflow the quadrature but are not zero.
fn feature_zeros(values: &[f64]) -> Vec<bool> {
    let n = values.len();
    (0..n)
        .map(|l| {
            let v = values[l].abs();
            let left = if l > 0 { values[l - 1].abs() } else { 0.0 };
            let right = if l + 1 < n { values[l + 1].abs() } else { 0.0 };
            v <= SPECTRUM_CLAMP && v <= SPECTRUM_CLAMP * left.max(right)
        })
        .collect()
}

pub fn spectrum_diagnostics(kernel_spec: &Spectrum, feature_spec: &Spectrum) -> Result<DiagnosticsReport> {
    if kernel_spec.geometry.ambient_dim() != feature_spec.geometry.ambient_dim()
        || kernel_spec.coefficients.len() != feature_spec.coefficients.len()
    {
        return Err(Error::InvalidArgument(
            "diagnostics need spectra on the same sphere and truncation level".into(),
        ));
    }
    let lambda = &kernel_spec.coefficients;
    let sigma = &feature_spec.coefficients;
    let zero = feature_zeros(sigma);
    let sigma_max = sigma.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    let mut mismatch_levels = Vec::new();
    let mut excluded_levels = Vec::new();
    let mut partial_sums = Vec::new();
    let mut terms = Vec::new();
    let mut acc = 0.0;
    for l in 0..lambda.len() {
        let kernel_on = lambda[l] > 0.0;
        if zero[l] && kernel_on {
            mismatch_levels.push(l);
        }
        if !zero[l] && !kernel_on {
            excluded_levels.push(l);
        }
        let resolved = sigma[l].abs() > SPECTRUM_CLAMP * sigma_max;
        if kernel_on && resolved {
            let term = sigma[l] * sigma[l] / lambda[l] * kernel_spec.multiplicities[l] as f64;
            acc += term;
            terms.push(term);
            partial_sums.push((l, acc));
        }
    }
    let q = (terms.len() / 4).max(2).min(terms.len());
    let tail = &terms[terms.len() - q..];
    let divergent = tail.len() >= 2 && tail.windows(2).all(|w| w[1] >= w[0]);

    let area = kernel_spec.geometry.area();
    let captured: f64 = lambda
        .iter()
        .zip(&kernel_spec.multiplicities)
        .map(|(l, &n)| l * n as f64 / area)
        .sum();
    Ok(DiagnosticsReport {
        mismatch_levels,
        excluded_levels,
        partial_sums,
        divergent,
        truncation_residual: kernel_spec.value_at_one - captured,
    })
}
