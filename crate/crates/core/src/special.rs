//! Gegenbauer polynomials, harmonic multiplicities, sphere areas and the
//! Gauss–Jacobi rules used to evaluate Funk–Hecke integrals.
//!
//! Everything downstream works with the *normalized* polynomial
//! `P_ℓ(t) = C_ℓ^{(α)}(t) / C_ℓ^{(α)}(1)`. It stays well defined at `α = 0`
//! (the circle, `D = 2`) where it reduces to the Chebyshev polynomial `T_ℓ`,
//! while `C_ℓ^{(0)}` itself vanishes identically for `ℓ ≥ 1`.

use std::f64::consts::PI;
use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, ln_gamma};

use crate::error::{Error, Result};

const T_TOLERANCE: f64 = 1e-12;

/// Unit sphere `S^{D-1}` embedded in `R^D`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereGeometry {
    ambient_dim: usize,
    alpha: f64,
    weight_exponent: f64,
    funk_hecke_constant: f64,
}

impl SphereGeometry {
    pub fn new(ambient_dim: usize) -> Result<Self> {
        if ambient_dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "ambient dimension must be at least 2, got {ambient_dim}"
            )));
        }
        let alpha = (ambient_dim as f64 - 2.0) / 2.0;
        Ok(Self {
            ambient_dim,
            alpha,
            weight_exponent: alpha - 0.5,
            funk_hecke_constant: sphere_area(ambient_dim - 1)?,
        })
    }

    /// Geometry for inputs of dimension `d` after appending the bias coordinate.
    pub fn for_input_dim(input_dim: usize) -> Result<Self> {
        Self::new(input_dim + 1)
    }

    /// Replaces the Funk–Hecke prefactor (the area of `S^{D-2}` by default).
    pub fn with_funk_hecke_constant(mut self, constant: f64) -> Result<Self> {
        if !(constant.is_finite() && constant > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "Funk-Hecke constant must be positive, got {constant}"
            )));
        }
        self.funk_hecke_constant = constant;
        Ok(self)
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn weight_exponent(&self) -> f64 {
        self.weight_exponent
    }

    pub fn funk_hecke_constant(&self) -> f64 {
        self.funk_hecke_constant
    }

    /// Surface area of `S^{D-1}`.
    pub fn area(&self) -> f64 {
        sphere_area(self.ambient_dim).expect("ambient_dim >= 2")
    }

    /// Σ_j Y_ℓj(x) Y_ℓj(x') = addition_factor(ℓ) · P_ℓ(xᵀx').
    pub fn addition_factor(&self, level: usize) -> f64 {
        num_harmonics(self, level) as f64 / self.area()
    }
}

fn check_t(t: f64) -> Result<f64> {
    if !t.is_finite() || t.abs() > 1.0 + T_TOLERANCE {
        return Err(Error::InvalidArgument(format!(
            "Gegenbauer argument {t} outside [-1, 1]"
        )));
    }
    Ok(t.clamp(-1.0, 1.0))
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > -0.5) {
        return Err(Error::InvalidArgument(format!(
            "Gegenbauer order must exceed -1/2, got {alpha}"
        )));
    }
    Ok(())
}

/// `C_ℓ^{(α)}(t)` by the three-term recurrence.
pub fn gegenbauer(level: usize, alpha: f64, t: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let t = check_t(t)?;
    Ok(gegenbauer_unchecked(level, alpha, t))
}

pub(crate) fn gegenbauer_unchecked(level: usize, alpha: f64, t: f64) -> f64 {
    let mut prev = 1.0;
    if level == 0 {
        return prev;
    }
    let mut cur = 2.0 * alpha * t;
    for l in 2..=level {
        let lf = l as f64;
        let next = (2.0 * t * (lf + alpha - 1.0) * cur - (lf + 2.0 * alpha - 2.0) * prev) / lf;
        prev = cur;
        cur = next;
    }
    cur
}

/// `C_ℓ^{(α)}(1) = binom(ℓ + 2α − 1, ℓ)`, accumulated in log space.
pub fn gegenbauer_at_one(level: usize, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let mut log_abs = 0.0;
    let mut sign = 1.0;
    for k in 1..=level {
        let factor = (k as f64 + 2.0 * alpha - 1.0) / k as f64;
        if factor == 0.0 {
            return Ok(0.0);
        }
        if factor < 0.0 {
            sign = -sign;
        }
        log_abs += factor.abs().ln();
    }
    Ok(sign * log_abs.exp())
}

/// Normalized Gegenbauer polynomial `P_ℓ(t) = C_ℓ(t)/C_ℓ(1)`.
pub fn normalized_gegenbauer(level: usize, alpha: f64, t: f64) -> Result<f64> {
    check_alpha(alpha)?;
    let t = check_t(t)?;
    let mut out = vec![0.0; level + 1];
    normalized_gegenbauer_into(alpha, t, &mut out);
    Ok(out[level])
}

/// Fills `out[ℓ] = P_ℓ(t)` for ℓ = 0..out.len().
pub(crate) fn normalized_gegenbauer_into(alpha: f64, t: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = t;
    }
    for l in 2..out.len() {
        let lf = l as f64;
        out[l] = (2.0 * (lf + alpha - 1.0) * t * out[l - 1] - (lf - 1.0) * out[l - 2])
            / (lf + 2.0 * alpha - 1.0);
    }
}

/// `(a_ℓ, b_ℓ)` with `P_ℓ = a_ℓ t P_{ℓ−1} − b_ℓ P_{ℓ−2}`, for ℓ = 0..levels
/// (entries below 2 unused).
pub(crate) fn gegenbauer_recurrence(alpha: f64, levels: usize) -> Vec<(f64, f64)> {
    (0..levels)
        .map(|l| {
            let lf = l as f64;
            let c = lf + 2.0 * alpha - 1.0;
            if l < 2 {
                (0.0, 0.0)
            } else {
                (2.0 * (lf + alpha - 1.0) / c, (lf - 1.0) / c)
            }
        })
        .collect()
}

/// Values and first derivatives of `P_ℓ` for ℓ = 0..vals.len().
pub(crate) fn normalized_gegenbauer_with_derivative(
    alpha: f64,
    t: f64,
    vals: &mut [f64],
    derivs: &mut [f64],
) {
    debug_assert_eq!(vals.len(), derivs.len());
    if vals.is_empty() {
        return;
    }
    vals[0] = 1.0;
    derivs[0] = 0.0;
    if vals.len() > 1 {
        vals[1] = t;
        derivs[1] = 1.0;
    }
    for l in 2..vals.len() {
        let lf = l as f64;
        let a = 2.0 * (lf + alpha - 1.0);
        let b = lf - 1.0;
        let c = lf + 2.0 * alpha - 1.0;
        vals[l] = (a * t * vals[l - 1] - b * vals[l - 2]) / c;
        derivs[l] = (a * (vals[l - 1] + t * derivs[l - 1]) - b * derivs[l - 2]) / c;
    }
}

fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Dimension of the space of degree-ℓ spherical harmonics on `S^{D-1}`.
pub fn num_harmonics(geometry: &SphereGeometry, level: usize) -> usize {
    let d = geometry.ambient_dim() as u64;
    let l = level as u64;
    match l {
        0 => 1,
        1 => d as usize,
        _ => {
            let b = binomial(l + d - 3, l - 1);
            ((2 * l + d - 2) as u128 * b / l as u128) as usize
        }
    }
}

/// Surface area of `S^{D-1}`, `2π^{D/2} / Γ(D/2)`.
pub fn sphere_area(dim: usize) -> Result<f64> {
    if dim < 1 {
        return Err(Error::InvalidArgument(
            "sphere area needs D >= 1".to_string(),
        ));
    }
    let half = dim as f64 / 2.0;
    Ok(2.0 * PI.powf(half) / gamma(half))
}

/// Nodes and weights integrating `f(t)(1-t²)^{α-1/2}` over [-1, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    geometry: SphereGeometry,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn geometry(&self) -> &SphereGeometry {
        &self.geometry
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Σ_i w_i f(t_i).
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&t, &w)| w * f(t))
            .sum()
    }
}

/// Gauss–Jacobi nodes/weights on [-1, 1] for the weight `(1-t)^a (1+t)^b`,
/// via the eigen-decomposition of the Jacobi matrix.
fn gauss_jacobi(n: usize, a: f64, b: f64) -> std::result::Result<(Vec<f64>, Vec<f64>), String> {
    if n == 0 {
        return Err("need at least one node".into());
    }
    if !(a > -1.0 && b > -1.0) {
        return Err(format!("Jacobi exponents must exceed -1 (a={a}, b={b})"));
    }
    let ab = a + b;
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 0..n {
        let kf = k as f64;
        let diag = if k == 0 {
            (b - a) / (ab + 2.0)
        } else {
            let s = 2.0 * kf + ab;
            (b * b - a * a) / (s * (s + 2.0))
        };
        jacobi[(k, k)] = diag;
        if k + 1 < n {
            let j = kf + 1.0;
            let s = 2.0 * j + ab;
            let beta2 = if k == 0 {
                4.0 * (1.0 + a) * (1.0 + b) / ((2.0 + ab).powi(2) * (3.0 + ab))
            } else {
                4.0 * j * (j + a) * (j + b) * (j + ab) / (s * s * (s + 1.0) * (s - 1.0))
            };
            let off = beta2.sqrt();
            jacobi[(k, k + 1)] = off;
            jacobi[(k + 1, k)] = off;
        }
    }
    let mu0 = ((ab + 1.0) * 2f64.ln() + ln_gamma(a + 1.0) + ln_gamma(b + 1.0)
        - ln_gamma(ab + 2.0))
    .exp();
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| {
            let v0 = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], mu0 * v0 * v0)
        })
        .collect();
    if pairs.iter().any(|(t, w)| !t.is_finite() || !w.is_finite()) {
        return Err("eigen solver produced non-finite nodes".into());
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    // Symmetric weights give symmetric rules; enforce it exactly so odd
    // moments cancel to rounding.
    if a == b {
        for i in 0..n / 2 {
            let j = n - 1 - i;
            let t = 0.5 * (pairs[j].0 - pairs[i].0);
            let w = 0.5 * (pairs[i].1 + pairs[j].1);
            pairs[i] = (-t, w);
            pairs[j] = (t, w);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
    }
    Ok(pairs.into_iter().unzip())
}

/// Gauss–Legendre nodes are rebuilt by eigen-decomposition otherwise, which
/// dominates a spectrum evaluation inside the training loop.
fn gauss_legendre_cached(n: usize) -> std::result::Result<Arc<(Vec<f64>, Vec<f64>)>, String> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<(Vec<f64>, Vec<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(rule) = cache.lock().unwrap_or_else(|e| e.into_inner()).get(&n) {
        return Ok(rule.clone());
    }
    let rule = Arc::new(gauss_jacobi(n, 0.0, 0.0)?);
    cache.lock().unwrap_or_else(|e| e.into_inner()).insert(n, rule.clone());
    Ok(rule)
}

fn quadrature_error(geometry: &SphereGeometry, n: usize, detail: String) -> Error {
    Error::Quadrature {
        ambient_dim: geometry.ambient_dim(),
        n_nodes: n,
        detail,
    }
}

/// Gauss–Jacobi rule with `n_nodes` nodes for the weight `(1-t²)^{α-1/2}`.
pub fn build_quadrature(geometry: &SphereGeometry, n_nodes: usize) -> Result<QuadratureRule> {
    let a = geometry.weight_exponent();
    let (nodes, weights) =
        gauss_jacobi(n_nodes, a, a).map_err(|d| quadrature_error(geometry, n_nodes, d))?;
    Ok(QuadratureRule {
        nodes,
        weights,
        geometry: *geometry,
    })
}

/// Composite Gauss–Legendre rule in the angle `φ = arccos t`, one panel on
/// each of [0, π/2] and [π/2, π].
///
/// The weight becomes `sin^{2α} φ` with `2α = D − 2` a non-negative integer,
/// so kernels with `√(1 − t²)` or `√(2 − 2t)` endpoint behaviour are analytic
/// in φ, and the split puts a kink at `t = 0` (ReLU) on a panel boundary.
pub fn build_split_quadrature(
    geometry: &SphereGeometry,
    nodes_per_half: usize,
) -> Result<QuadratureRule> {
    let power = 2.0 * geometry.alpha();
    let legendre = gauss_legendre_cached(nodes_per_half)
        .map_err(|d| quadrature_error(geometry, 2 * nodes_per_half, d))?;
    let (s, w) = (&legendre.0, &legendre.1);
    let quarter = std::f64::consts::FRAC_PI_4;
    let mut pairs = Vec::with_capacity(2 * nodes_per_half);
    for offset in [0.0, 2.0 * quarter] {
        for (&si, &wi) in s.iter().zip(w) {
            let phi = offset + quarter * (1.0 + si);
            pairs.push((phi.cos(), quarter * wi * phi.sin().powf(power)));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (nodes, weights) = pairs.into_iter().unzip();
    Ok(QuadratureRule {
        nodes,
        weights,
        geometry: *geometry,
    })
}

/// Default rule for spectra truncated at level `max_level`: 2L+64 nodes split
/// evenly over the two half-intervals.
pub fn default_quadrature(geometry: &SphereGeometry, max_level: usize) -> Result<QuadratureRule> {
    build_split_quadrature(geometry, max_level + 32)
}

/// Funk–Hecke coefficient `a_ℓ = Ω Σ_i w_i κ(t_i) P_ℓ(t_i)`.
pub fn funk_hecke_coefficient(
    shape: impl Fn(f64) -> f64,
    level: usize,
    rule: &QuadratureRule,
) -> Result<f64> {
    Ok(funk_hecke_coefficients(shape, level, rule)?[level])
}

/// All coefficients `a_0..=a_L` from a single pass over the nodes.
pub fn funk_hecke_coefficients(
    shape: impl Fn(f64) -> f64,
    max_level: usize,
    rule: &QuadratureRule,
) -> Result<Vec<f64>> {
    let alpha = rule.geometry().alpha();
    let omega = rule.geometry().funk_hecke_constant();
    let mut acc = vec![0.0; max_level + 1];
    let mut p = vec![0.0; max_level + 1];
    for (&t, &w) in rule.nodes().iter().zip(rule.weights()) {
        let value = shape(t);
        if !value.is_finite() {
            return Err(Error::InvalidShape { t, value });
        }
        normalized_gegenbauer_into(alpha, t, &mut p);
        for (a, &pl) in acc.iter_mut().zip(&p) {
            *a += w * value * pl;
        }
    }
    Ok(acc.into_iter().map(|a| omega * a).collect())
}
