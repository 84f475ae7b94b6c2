//! Inducing features and the covariance blocks they induce.
//!
//! Every block is a covariance between two feature sets; data inputs are a
//! points set. The assembly runs on an [`autodiff::Tape`](crate::autodiff::Tape),
//! so the same code produces plain blocks (constant leaves) and
//! differentiable ones for training.

use std::rc::Rc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::harmonics::{build_harmonic_basis, HarmonicBasis};
use crate::kernels::{
    kernel_spectrum_partials, lift_to_sphere, shape_partials, Spectrum, SpectrumKind, ZonalKernel,
};
use crate::linalg::{jittered_cholesky, solve_lower};
use crate::special::{default_quadrature, funk_hecke_coefficients, gegenbauer_recurrence, SphereGeometry};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Softplus,
}

impl ActivationKind {
    pub fn label(&self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Softplus => "softplus",
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match self {
            ActivationKind::Relu => t.max(0.0),
            ActivationKind::Softplus => crate::autodiff::softplus(t),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Softplus => crate::autodiff::sigmoid(t),
        }
    }
}

/// An activation together with its coefficients `ς_0..=ς_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationShape {
    pub kind: ActivationKind,
    pub spectrum: Spectrum,
}

pub fn activation_spectrum(kind: ActivationKind, geometry: &SphereGeometry, max_level: usize) -> Result<Spectrum> {
    let rule = default_quadrature(geometry, max_level)?;
    let coefficients = funk_hecke_coefficients(|t| kind.value(t), max_level, &rule)?;
    Ok(Spectrum::from_coefficients(
        *geometry,
        coefficients,
        SpectrumKind::Activation,
        kind.value(1.0),
    ))
}

impl ActivationShape {
    pub fn new(kind: ActivationKind, geometry: &SphereGeometry, max_level: usize) -> Result<Self> {
        Ok(Self {
            kind,
            spectrum: activation_spectrum(kind, geometry, max_level)?,
        })
    }
}

/// `H(x) = (‖z‖‖x̃‖)^p σ(ẑᵀx̂)`. The weight `z` lives in the bias-augmented
/// space; `x` is lifted with `bias`.
pub fn activation_feature(z: &[f64], x: &[f64], kind: ActivationKind, degree: f64, bias: f64) -> Result<f64> {
    let (xh, xn) = lift_to_sphere(x, bias)?;
    if z.len() != xh.len() {
        return Err(Error::InvalidArgument(format!(
            "activation weight has {} entries, lifted input has {}",
            z.len(),
            xh.len()
        )));
    }
    let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if zn == 0.0 || !zn.is_finite() {
        return Err(Error::InvalidArgument("activation weight must be nonzero and finite".into()));
    }
    let t: f64 = z.iter().zip(&xh).map(|(a, b)| a * b).sum::<f64>() / zn;
    Ok((zn * xn).powf(degree) * kind.value(t.clamp(-1.0, 1.0)))
}

/// An inducing-feature family with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase")]
pub enum InducingSet {
    /// Point evaluations at the rows of `z` (`M × d`, raw input space).
    Points {
        #[serde(with = "crate::linalg::row_major")]
        z: Mat,
    },
    /// Harmonics of every level whose kernel coefficient is positive.
    Harmonics { basis: HarmonicBasis },
    /// Activation units with weights `z` (`M × D`, bias-augmented space).
    Activations {
        #[serde(with = "crate::linalg::row_major")]
        z: Mat,
        activation: ActivationShape,
    },
}

impl InducingSet {
    /// Harmonics up to `max_level`, dropping levels with `λ_ℓ = 0`.
    pub fn harmonics(prior: &Prior, seed: u64) -> Result<Self> {
        let (spectrum, _) = kernel_spectrum_partials(&prior.kernel, &prior.geometry, prior.max_level)?;
        let basis = build_harmonic_basis(&prior.geometry, prior.max_level, seed)?
            .retain_levels(|l| spectrum.coefficients[l] > 0.0);
        if basis.size() == 0 {
            return Err(Error::DegenerateSpectrum(prior.max_level));
        }
        Ok(InducingSet::Harmonics { basis })
    }

    pub fn activations(z: Mat, kind: ActivationKind, prior: &Prior) -> Result<Self> {
        Ok(InducingSet::Activations {
            z,
            activation: ActivationShape::new(kind, &prior.geometry, prior.max_level)?,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            InducingSet::Points { z } | InducingSet::Activations { z, .. } => z.nrows(),
            InducingSet::Harmonics { basis } => basis.size(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self) -> &'static str {
        match self {
            InducingSet::Points { .. } => "points",
            InducingSet::Harmonics { .. } => "harmonics",
            InducingSet::Activations { .. } => "activations",
        }
    }

    /// Trainable locations, if the family has any.
    pub fn locations(&self) -> Option<&Mat> {
        match self {
            InducingSet::Points { z } | InducingSet::Activations { z, .. } => Some(z),
            InducingSet::Harmonics { .. } => None,
        }
    }

    pub fn locations_mut(&mut self) -> Option<&mut Mat> {
        match self {
            InducingSet::Points { z } | InducingSet::Activations { z, .. } => Some(z),
            InducingSet::Harmonics { .. } => None,
        }
    }

    /// Rejects sets that do not live on the prior's sphere.
    pub fn check(&self, prior: &Prior) -> Result<()> {
        let dim = prior.geometry.ambient_dim();
        let bad = |what: String| Err(Error::InvalidArgument(what));
        match self {
            InducingSet::Points { z } => {
                if z.ncols() + 1 != dim {
                    return bad(format!("points have {} columns, inputs have {}", z.ncols(), dim - 1));
                }
            }
            InducingSet::Activations { z, activation } => {
                if z.ncols() != dim {
                    return bad(format!("activation weights need {dim} columns, got {}", z.ncols()));
                }
                if activation.spectrum.geometry.ambient_dim() != dim
                    || activation.spectrum.max_level() != prior.max_level
                {
                    return bad("activation spectrum does not match the prior".into());
                }
                if z.row_iter().any(|r| r.norm() == 0.0) {
                    return bad("activation weights must be nonzero".into());
                }
            }
            InducingSet::Harmonics { basis } => {
                if basis.geometry.ambient_dim() != dim {
                    return bad(format!(
                        "harmonic basis lives in D={}, prior in D={dim}",
                        basis.geometry.ambient_dim()
                    ));
                }
                if basis.systems.iter().any(|s| s.level > prior.max_level) {
                    return bad("harmonic basis exceeds the truncation level".into());
                }
            }
        }
        if let Some(z) = self.locations() {
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{} locations", self.label())));
            }
        }
        Ok(())
    }
}

/// Kernel, sphere and truncation level shared by every spectral quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub kernel: ZonalKernel,
    pub geometry: SphereGeometry,
    pub max_level: usize,
}

impl Prior {
    pub fn new(kernel: ZonalKernel, input_dim: usize, max_level: usize) -> Result<Self> {
        Ok(Self {
            kernel,
            geometry: SphereGeometry::for_input_dim(input_dim)?,
            max_level,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.geometry.ambient_dim() - 1
    }
}

/// Kernel hyperparameters and spectrum held on a tape.
pub(crate) struct KernelVars<'t> {
    pub kernel: ZonalKernel,
    pub geometry: SphereGeometry,
    pub amplitude: Var<'t>,
    pub lengthscale: Var<'t>,
    /// `(L+1) × 1`.
    pub lambda: Var<'t>,
}

impl<'t> KernelVars<'t> {
    /// `amplitude` and `lengthscale` must be 1×1 and hold the values in
    /// `prior.kernel`.
    pub fn new(prior: &Prior, amplitude: Var<'t>, lengthscale: Var<'t>) -> Result<Self> {
        let (spectrum, d_ls) = kernel_spectrum_partials(&prior.kernel, &prior.geometry, prior.max_level)?;
        let lam = DVector::from_vec(spectrum.coefficients.clone());
        let amp = prior.kernel.amplitude;
        let tape = amplitude.tape();
        let value = Mat::from_column_slice(lam.len(), 1, lam.as_slice());
        let lambda = tape.custom(&[amplitude, lengthscale], value, move |g| {
            let da: f64 = g.iter().zip(lam.iter()).map(|(g, l)| g * l / amp).sum();
            let dl: f64 = g.iter().zip(&d_ls).map(|(g, d)| g * d).sum();
            vec![Some(Mat::from_element(1, 1, da)), Some(Mat::from_element(1, 1, dl))]
        });
        Ok(Self {
            kernel: prior.kernel,
            geometry: prior.geometry,
            amplitude,
            lengthscale,
            lambda,
        })
    }

    pub fn constant(tape: &'t Tape, prior: &Prior) -> Result<Self> {
        Self::new(
            prior,
            tape.scalar(prior.kernel.amplitude),
            tape.scalar(prior.kernel.lengthscale),
        )
    }

    fn degree(&self) -> f64 {
        self.kernel.homogeneity_degree()
    }

    /// Elementwise `κ(T)`.
    fn shape(&self, t: Var<'t>) -> Var<'t> {
        let tv = t.value();
        let kernel = self.kernel;
        let parts: Vec<_> = tv.iter().map(|&x| shape_partials(&kernel, x)).collect();
        let (r, c) = tv.shape();
        let value = Mat::from_iterator(r, c, parts.iter().map(|p| p.value));
        let parts = Rc::new(parts);
        let amp = kernel.amplitude;
        t.tape().custom(&[t, self.amplitude, self.lengthscale], value, move |g| {
            let dt = Mat::from_iterator(r, c, g.iter().zip(parts.iter()).map(|(g, p)| g * p.d_t));
            let da: f64 = g.iter().zip(parts.iter()).map(|(g, p)| g * p.value / amp).sum();
            let dl: f64 = g.iter().zip(parts.iter()).map(|(g, p)| g * p.d_lengthscale).sum();
            vec![
                Some(dt),
                Some(Mat::from_element(1, 1, da)),
                Some(Mat::from_element(1, 1, dl)),
            ]
        })
    }

    /// `Σ_ℓ c_ℓ N_ℓ P_ℓ(T) / A_D` elementwise, `c` an `(L+1) × 1` variable.
    fn series(&self, t: Var<'t>, coef: Var<'t>) -> Var<'t> {
        let tv = t.value();
        let cv = coef.value();
        let levels = cv.nrows();
        let rec = gegenbauer_recurrence(self.geometry.alpha(), levels);
        let factors: Vec<f64> = (0..levels).map(|l| self.geometry.addition_factor(l)).collect();
        let weights: Vec<f64> = (0..levels).map(|l| cv[(l, 0)] * factors[l]).collect();
        let (r, c) = tv.shape();
        let value = Mat::from_iterator(r, c, tv.iter().map(|&x| series_value(x.clamp(-1.0, 1.0), &weights, &rec)));
        t.tape().custom(&[t, coef], value, move |g| {
            let mut dt = Mat::zeros(r, c);
            // Accumulates Σ_k g_k P_ℓ(t_k); scaled by N_ℓ/A_D at the end.
            let mut dc = vec![0.0; levels];
            for (k, &x) in tv.iter().enumerate() {
                dt[k] = g[k] * series_backward(x.clamp(-1.0, 1.0), g[k], &weights, &rec, &mut dc);
            }
            let dc = Mat::from_iterator(levels, 1, dc.iter().zip(&factors).map(|(d, f)| d * f));
            vec![Some(dt), Some(dc)]
        })
    }

    /// `w_ℓ / λ_ℓ` on levels with `λ_ℓ > 0`, zero elsewhere.
    fn masked_ratio(&self, weights: Vec<f64>) -> Var<'t> {
        let lam = self.lambda.value();
        let value = Mat::from_iterator(
            lam.nrows(),
            1,
            (0..lam.nrows()).map(|l| if lam[l] > 0.0 { weights[l] / lam[l] } else { 0.0 }),
        );
        self.lambda.tape().custom(&[self.lambda], value, move |g| {
            let d = Mat::from_iterator(
                lam.nrows(),
                1,
                (0..lam.nrows()).map(|l| {
                    if lam[l] > 0.0 {
                        -g[l] * weights[l] / (lam[l] * lam[l])
                    } else {
                        0.0
                    }
                }),
            );
            vec![Some(d)]
        })
    }

    /// `weights` with the levels outside the kernel's support zeroed.
    fn masked(&self, weights: &[f64]) -> Var<'t> {
        let lam = self.lambda.value();
        let value = Mat::from_iterator(
            lam.nrows(),
            1,
            (0..lam.nrows()).map(|l| if lam[l] > 0.0 { weights[l] } else { 0.0 }),
        );
        self.lambda.tape().constant(value)
    }

    /// `λ_ℓ` for every column level, failing if any vanished.
    fn lambda_at(&self, levels: &[usize]) -> Result<Var<'t>> {
        let lam = self.lambda.value();
        if let Some(&l) = levels.iter().find(|&&l| l >= lam.nrows() || lam[l] <= 0.0) {
            return Err(Error::NonFinite(format!(
                "harmonic feature at level {l} whose kernel coefficient vanished"
            )));
        }
        Ok(self.lambda.gather(levels.to_vec()))
    }
}

/// Unit directions and norms of a set of vectors on a tape.
#[derive(Clone, Copy)]
pub(crate) struct Lifted<'t> {
    pub unit: Var<'t>,
    /// `n × 1`.
    pub norms: Var<'t>,
}

impl<'t> Lifted<'t> {
    /// Raw inputs: append the bias coordinate, then normalize.
    pub fn inputs(x: Var<'t>, bias: f64) -> Self {
        Self::weights(x.append_const_col(bias))
    }

    /// Vectors already in the augmented space.
    pub fn weights(z: Var<'t>) -> Self {
        let norms = z.row_norms();
        Self {
            unit: z.scale_rows(norms.recip()),
            norms,
        }
    }

    fn prefactor(&self, degree: f64) -> Option<Var<'t>> {
        if degree == 0.0 {
            None
        } else if degree == 1.0 {
            Some(self.norms)
        } else {
            Some(self.norms.map(move |r| r.powf(degree), move |r| degree * r.powf(degree - 1.0)))
        }
    }
}

/// An inducing set with its locations on a tape.
pub(crate) enum SetVars<'s, 't> {
    Points(Lifted<'t>),
    Harmonics(&'s HarmonicBasis),
    Activations(Lifted<'t>, &'s ActivationShape),
}

impl<'s, 't> SetVars<'s, 't> {
    /// `locations` overrides the stored locations (e.g. with a leaf).
    pub fn new(set: &'s InducingSet, tape: &'t Tape, bias: f64, locations: Option<Var<'t>>) -> Self {
        let loc = || locations.unwrap_or_else(|| tape.constant(set.locations().cloned().unwrap_or_default()));
        match set {
            InducingSet::Points { .. } => SetVars::Points(Lifted::inputs(loc(), bias)),
            InducingSet::Harmonics { basis } => SetVars::Harmonics(basis),
            InducingSet::Activations { activation, .. } => SetVars::Activations(Lifted::weights(loc()), activation),
        }
    }

    fn rank(&self) -> u8 {
        match self {
            SetVars::Points(_) => 0,
            SetVars::Harmonics(_) => 1,
            SetVars::Activations(..) => 2,
        }
    }
}

/// `Σ_ℓ w_ℓ P_ℓ(t)` by the three-term recurrence.
fn series_value(t: f64, w: &[f64], rec: &[(f64, f64)]) -> f64 {
    let (mut p0, mut p1) = (1.0, t);
    let mut sum = w.first().copied().unwrap_or(0.0);
    if w.len() > 1 {
        sum += w[1] * t;
    }
    for (wl, &(a, b)) in w.iter().zip(rec).skip(2) {
        let p2 = a * t * p1 - b * p0;
        sum += wl * p2;
        p0 = p1;
        p1 = p2;
    }
    sum
}

/// Returns `Σ_ℓ w_ℓ P′_ℓ(t)` and adds `g P_ℓ(t)` into `acc`.
fn series_backward(t: f64, g: f64, w: &[f64], rec: &[(f64, f64)], acc: &mut [f64]) -> f64 {
    let n = w.len();
    if n == 0 {
        return 0.0;
    }
    acc[0] += g;
    if n == 1 {
        return 0.0;
    }
    acc[1] += g * t;
    let (mut p0, mut p1, mut d0, mut d1) = (1.0, t, 0.0, 1.0);
    let mut deriv = w[1];
    for ((wl, &(a, b)), al) in w.iter().zip(rec).zip(acc.iter_mut()).skip(2) {
        let p2 = a * t * p1 - b * p0;
        let d2 = a * (p1 + t * d1) - b * d0;
        deriv += wl * d2;
        *al += g * p2;
        p0 = p1;
        p1 = p2;
        d0 = d1;
        d1 = d2;
    }
    deriv
}

fn scale_both<'t>(m: Var<'t>, rows: Option<Var<'t>>, cols: Option<Var<'t>>) -> Var<'t> {
    let m = match rows {
        Some(r) => m.scale_rows(r),
        None => m,
    };
    match cols {
        Some(c) => m.scale_cols(c),
        None => m,
    }
}

/// `⟨Y_k, Y′_m⟩` in `L₂` for two bases; identity for a basis against itself.
fn basis_overlap(a: &HarmonicBasis, b: &HarmonicBasis) -> Mat {
    let mut out = Mat::zeros(a.size(), b.size());
    let mut col = 0;
    for sb in &b.systems {
        let mut row = 0;
        for sa in &a.systems {
            if sa.level == sb.level {
                let single = HarmonicBasis {
                    geometry: a.geometry,
                    max_level: a.max_level,
                    systems: vec![sa.clone()],
                };
                let ya = crate::harmonics::eval_harmonics(&single, &sb.directions)
                    .expect("fundamental directions are unit vectors");
                let block = solve_lower(&sb.gram_factor, &ya).transpose();
                out.view_mut((row, col), (sa.len(), sb.len())).copy_from(&block);
            }
            row += sa.len();
        }
        col += sb.len();
    }
    out
}

/// Covariance between the features of `a` (rows) and `b` (columns).
pub(crate) fn cross_tape<'t>(kv: &KernelVars<'t>, a: &SetVars<'_, 't>, b: &SetVars<'_, 't>) -> Result<Var<'t>> {
    if a.rank() > b.rank() {
        return Ok(cross_tape(kv, b, a)?.transpose());
    }
    let p = kv.degree();
    let out = match (a, b) {
        (SetVars::Points(x), SetVars::Points(z)) => {
            let k = kv.shape(x.unit.matmul_tr(z.unit));
            scale_both(k, x.prefactor(p), z.prefactor(p))
        }
        (SetVars::Points(x), SetVars::Harmonics(basis)) => {
            scale_both(basis.eval_tape(x.unit), x.prefactor(p), None)
        }
        (SetVars::Points(x), SetVars::Activations(z, act)) => {
            // RKHS projection ⟨k(x, ·), H_m⟩: the activation truncated to the
            // levels that also enter K_uu, so K − Q stays positive semidefinite.
            let coef = kv.masked(&act.spectrum.coefficients);
            let h = kv.series(x.unit.matmul_tr(z.unit), coef);
            scale_both(h, x.prefactor(p), z.prefactor(p))
        }
        (SetVars::Harmonics(ba), SetVars::Harmonics(bb)) => {
            let overlap = kv.lambda.tape().constant(basis_overlap(ba, bb));
            overlap.scale_cols(kv.lambda_at(&bb.column_levels())?.recip())
        }
        (SetVars::Harmonics(basis), SetVars::Activations(z, act)) => {
            let levels = basis.column_levels();
            let sigma = &act.spectrum.coefficients;
            let lam = kv.lambda_at(&levels)?;
            let s = kv.lambda.tape().constant(Mat::from_iterator(
                levels.len(),
                1,
                levels.iter().map(|&l| sigma[l]),
            ));
            let y = basis.eval_tape(z.unit).transpose();
            scale_both(y, Some(s.mul(lam.recip())), z.prefactor(p))
        }
        (SetVars::Activations(x, act_a), SetVars::Activations(z, act_b)) => {
            let sa = &act_a.spectrum.coefficients;
            let sb = &act_b.spectrum.coefficients;
            let weights = sa.iter().zip(sb).map(|(a, b)| a * b).collect();
            let coef = kv.masked_ratio(weights);
            let s = kv.series(x.unit.matmul_tr(z.unit), coef);
            scale_both(s, x.prefactor(p), z.prefactor(p))
        }
        _ => unreachable!("pairs are ordered by rank"),
    };
    if out.value().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "covariance block between {} and {}",
            set_name(a),
            set_name(b)
        )));
    }
    Ok(out)
}

fn set_name(s: &SetVars<'_, '_>) -> &'static str {
    match s {
        SetVars::Points(_) => "points",
        SetVars::Harmonics(_) => "harmonics",
        SetVars::Activations(..) => "activations",
    }
}

/// `k(x, x)` for lifted inputs, `n × 1`.
pub(crate) fn kff_diag_tape<'t>(kv: &KernelVars<'t>, x: &Lifted<'t>) -> Var<'t> {
    let n = x.norms.shape().0;
    let ones = kv.amplitude.tape().constant(Mat::from_element(n, 1, 1.0));
    let k = kv.shape(ones);
    match x.prefactor(2.0 * kv.degree()) {
        Some(f) => k.mul(f),
        None => k,
    }
}

fn plain<'t>(
    prior: &Prior,
    build: impl for<'s> FnOnce(&'s Tape, &KernelVars<'s>) -> Result<Var<'s>>,
) -> Result<Mat> {
    let tape = Tape::new();
    let kv = KernelVars::constant(&tape, prior)?;
    let v = build(&tape, &kv)?;
    let out = (*v.value()).clone();
    Ok(out)
}

fn points_set(x: &Mat) -> InducingSet {
    InducingSet::Points { z: x.clone() }
}

/// Covariance between two inducing sets.
pub fn cross_cov(a: &InducingSet, b: &InducingSet, prior: &Prior) -> Result<Mat> {
    a.check(prior)?;
    b.check(prior)?;
    let bias = prior.kernel.bias;
    plain(prior, |tape, kv| {
        let va = SetVars::new(a, tape, bias, None);
        let vb = SetVars::new(b, tape, bias, None);
        cross_tape(kv, &va, &vb)
    })
}

/// `K_uf`, `M × N`.
pub fn cross_cov_kuf(features: &InducingSet, prior: &Prior, x: &Mat) -> Result<Mat> {
    cross_cov(features, &points_set(x), prior)
}

/// `K_uu`, symmetric `M × M`.
pub fn cov_kuu(features: &InducingSet, prior: &Prior) -> Result<Mat> {
    let (spectrum, _) = kernel_spectrum_partials(&prior.kernel, &prior.geometry, prior.max_level)?;
    if spectrum.coefficients.iter().all(|&l| l == 0.0) {
        return Err(Error::DegenerateSpectrum(prior.max_level));
    }
    let k = cross_cov(features, features, prior)?;
    Ok((&k + k.transpose()) * 0.5)
}

/// `K_vu`, `K × M`, for orthogonal features `psi` against base features `phi`.
pub fn cross_cov_kvu(psi: &InducingSet, phi: &InducingSet, prior: &Prior) -> Result<Mat> {
    cross_cov(psi, phi, prior)
}

/// `k(x, x)` for every row.
pub fn kff_diag(prior: &Prior, x: &Mat) -> Result<DVector<f64>> {
    let bias = prior.kernel.bias;
    let v = plain(prior, |tape, kv| {
        let lifted = Lifted::inputs(tape.constant(x.clone()), bias);
        Ok(kff_diag_tape(kv, &lifted))
    })?;
    Ok(DVector::from_column_slice(v.as_slice()))
}

#[derive(Debug, Clone)]
pub struct CovarianceBlocks {
    pub kff_diag: DVector<f64>,
    pub kuf: Mat,
    pub kuu: Mat,
    pub kvf: Option<Mat>,
    pub kvu: Option<Mat>,
    pub kvv: Option<Mat>,
}

pub fn assemble_blocks(
    prior: &Prior,
    base: &InducingSet,
    orthogonal: Option<&InducingSet>,
    x: &Mat,
) -> Result<CovarianceBlocks> {
    let kuu = cov_kuu(base, prior)?;
    let kuf = cross_cov_kuf(base, prior, x)?;
    let (kvf, kvu, kvv) = match orthogonal {
        Some(o) => (
            Some(cross_cov_kuf(o, prior, x)?),
            Some(cross_cov_kvu(o, base, prior)?),
            Some(cov_kuu(o, prior)?),
        ),
        None => (None, None, None),
    };
    Ok(CovarianceBlocks {
        kff_diag: kff_diag(prior, x)?,
        kuf,
        kuu,
        kvf,
        kvu,
        kvv,
    })
}

/// Nyström projections through the base features.
#[derive(Debug, Clone)]
pub struct NystromTerms {
    /// `L_u L_uᵀ = K_uu` (with jitter).
    pub kuu_factor: Mat,
    /// `L_u⁻¹ K_uf`.
    pub a_f: Mat,
    pub qff_diag: DVector<f64>,
    pub qvf: Option<Mat>,
    pub qvv: Option<Mat>,
}

impl NystromTerms {
    /// Full `Q_ff`.
    pub fn qff(&self) -> Mat {
        self.a_f.tr_mul(&self.a_f)
    }
}

pub fn nystrom_terms(blocks: &CovarianceBlocks) -> Result<NystromTerms> {
    let (lu, _) = jittered_cholesky(&blocks.kuu, "K_uu")?;
    let a_f = solve_lower(&lu, &blocks.kuf);
    let qff_diag = DVector::from_iterator(a_f.ncols(), a_f.column_iter().map(|c| c.norm_squared()));
    let (qvf, qvv) = match &blocks.kvu {
        Some(kvu) => {
            let a_v = solve_lower(&lu, &kvu.transpose());
            (Some(a_v.tr_mul(&a_f)), Some(a_v.tr_mul(&a_v)))
        }
        None => (None, None),
    };
    Ok(NystromTerms {
        kuu_factor: lu,
        a_f,
        qff_diag,
        qvf,
        qvv,
    })
}

const SCHUR_CLAMP: f64 = 1e-10;

/// `K − Q`. Square symmetric inputs give a symmetrized result.
pub fn schur_terms(k: &Mat, q: &Mat) -> Mat {
    let c = k - q;
    let square = k.nrows() == k.ncols();
    let sym = |m: &Mat| square && (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax());
    if sym(k) && sym(q) {
        (&c + c.transpose()) * 0.5
    } else {
        c
    }
}

/// `diag(K − Q)` with round-off negatives (down to `−1e−10`) set to zero.
pub fn schur_diag(k: &DVector<f64>, q: &DVector<f64>) -> DVector<f64> {
    (k - q).map(|v| if (-SCHUR_CLAMP..0.0).contains(&v) { 0.0 } else { v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{kernel_eval, KernelFamily};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn prior(family: KernelFamily, d: usize, l: usize) -> Prior {
        Prior::new(ZonalKernel::new(family), d, l).unwrap()
    }

    fn random(r: usize, c: usize, seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn activation_feature_examples() {
        let h = activation_feature(&[0.0, 1.0], &[0.0], ActivationKind::Relu, 1.0, 1.0).unwrap();
        assert_relative_eq!(h, 1.0, epsilon = 1e-15);
        // x̃ = (0, 3) and z = 2·(√3/2, −1/2): ẑ·x̂ = −1/2, norms 3 and 2.
        let z = [3f64.sqrt(), -1.0];
        let h = activation_feature(&z, &[0.0], ActivationKind::Relu, 1.0, 3.0).unwrap();
        assert_eq!(h, 0.0);
        let soft = activation_feature(&z, &[0.0], ActivationKind::Softplus, 1.0, 3.0).unwrap();
        assert_relative_eq!(soft, 6.0 * (1.0 + (-0.5f64).exp()).ln(), max_relative = 1e-14);
        let h = activation_feature(&[1.0, 0.0], &[0.0], ActivationKind::Softplus, 1.0, 1.0).unwrap();
        assert_relative_eq!(h, 2f64.ln(), epsilon = 1e-15);
    }

    #[test]
    fn points_kuf_matches_kernel() {
        let pr = prior(KernelFamily::Matern52, 2, 6);
        let x = random(5, 2, 1);
        let z = x.rows(0, 2).into_owned();
        let kuf = cross_cov_kuf(&InducingSet::Points { z: z.clone() }, &pr, &x).unwrap();
        assert_relative_eq!(kuf, kernel_eval(&pr.kernel, &z, &x).unwrap(), epsilon = 1e-14);
        assert_relative_eq!(kuf[(1, 1)], 1.0, epsilon = 1e-14);
    }

    /// `(‖z‖‖x̃‖)^p Σ_{ℓ≤L, λ_ℓ>0} ς_ℓ ((ℓ+α)/α) C_ℓ^α(t) / A_D` from
    /// unnormalized Gegenbauer values.
    fn truncated_feature_oracle(pr: &Prior, kind: ActivationKind, z: &[f64], x: &[f64]) -> f64 {
        let geom = pr.geometry;
        let alpha = geom.alpha();
        let lam = crate::kernels::kernel_spectrum(&pr.kernel, &geom, pr.max_level).unwrap();
        let sig = activation_spectrum(kind, &geom, pr.max_level).unwrap();
        let (xh, xn) = lift_to_sphere(x, pr.kernel.bias).unwrap();
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let t = (xh.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / zn).clamp(-1.0, 1.0);
        let sum: f64 = (0..=pr.max_level)
            .filter(|&l| lam.coefficients[l] > 0.0)
            .map(|l| {
                sig.coefficients[l] * (l as f64 + alpha) / alpha * crate::special::gegenbauer(l, alpha, t).unwrap()
            })
            .sum();
        (zn * xn).powf(pr.kernel.homogeneity_degree()) * sum / geom.area()
    }

    #[test]
    fn activation_kuf_is_the_truncated_feature() {
        for family in [KernelFamily::Arccos1, KernelFamily::Matern52, KernelFamily::SquaredExp] {
            for kind in [ActivationKind::Relu, ActivationKind::Softplus] {
                let pr = prior(family, 2, 7);
                let z = random(2, 3, 2);
                let x = random(4, 2, 3);
                let set = InducingSet::activations(z.clone(), kind, &pr).unwrap();
                let kuf = cross_cov_kuf(&set, &pr, &x).unwrap();
                for m in 0..2 {
                    for n in 0..4 {
                        let zr: Vec<f64> = z.row(m).iter().copied().collect();
                        let xr: Vec<f64> = x.row(n).iter().copied().collect();
                        let want = truncated_feature_oracle(&pr, kind, &zr, &xr);
                        assert!((kuf[(m, n)] - want).abs() <= 1e-10 * want.abs().max(1e-3));
                    }
                }
            }
        }
    }

    #[test]
    fn truncated_softplus_feature_converges_to_activation() {
        // Arccos keeps every level Softplus uses, so the projection is H itself.
        let pr = prior(KernelFamily::Arccos1, 2, 40);
        let z = random(1, 3, 2);
        let x = random(4, 2, 3);
        let set = InducingSet::activations(z.clone(), ActivationKind::Softplus, &pr).unwrap();
        let kuf = cross_cov_kuf(&set, &pr, &x).unwrap();
        let zr: Vec<f64> = z.row(0).iter().copied().collect();
        for n in 0..4 {
            let xr: Vec<f64> = x.row(n).iter().copied().collect();
            let h = activation_feature(&zr, &xr, ActivationKind::Softplus, 1.0, 1.0).unwrap();
            assert_relative_eq!(kuf[(0, n)], h, max_relative = 1e-7);
        }
    }

    #[test]
    fn harmonic_kuu_is_reciprocal_spectrum() {
        let pr = prior(KernelFamily::Matern52, 2, 4);
        let set = InducingSet::harmonics(&pr, 3).unwrap();
        let kuu = cov_kuu(&set, &pr).unwrap();
        let (spec, _) = kernel_spectrum_partials(&pr.kernel, &pr.geometry, 4).unwrap();
        let InducingSet::Harmonics { basis } = &set else { unreachable!() };
        for (i, &l) in basis.column_levels().iter().enumerate() {
            for j in 0..kuu.ncols() {
                let expect = if i == j { 1.0 / spec.coefficients[l] } else { 0.0 };
                assert!((kuu[(i, j)] - expect).abs() <= 1e-10 * expect.abs().max(1.0));
            }
        }
    }

    #[test]
    fn activation_kuu_single_feature_is_positive() {
        let pr = prior(KernelFamily::Arccos1, 2, 8);
        let set = InducingSet::activations(random(1, 3, 4), ActivationKind::Relu, &pr).unwrap();
        let kuu = cov_kuu(&set, &pr).unwrap();
        assert_eq!(kuu.shape(), (1, 1));
        assert!(kuu[(0, 0)] > 0.0);
    }

    #[test]
    fn activation_pair_equals_kuu() {
        let pr = prior(KernelFamily::Matern52, 2, 8);
        let set = InducingSet::activations(random(4, 3, 5), ActivationKind::Softplus, &pr).unwrap();
        let kvu = cross_cov_kvu(&set, &set, &pr).unwrap();
        assert_relative_eq!(kvu, cov_kuu(&set, &pr).unwrap(), epsilon = 1e-13);
    }

    #[test]
    fn same_basis_harmonics_give_reciprocal_diagonal() {
        let pr = prior(KernelFamily::SquaredExp, 2, 5);
        let set = InducingSet::harmonics(&pr, 7).unwrap();
        let kvu = cross_cov_kvu(&set, &set, &pr).unwrap();
        assert_relative_eq!(kvu, cov_kuu(&set, &pr).unwrap(), epsilon = 1e-10);
        let other = InducingSet::harmonics(&pr, 8).unwrap();
        // Different fundamental systems span the same spaces: the overlap is
        // orthogonal within each level.
        let InducingSet::Harmonics { basis: a } = &set else { unreachable!() };
        let InducingSet::Harmonics { basis: b } = &other else { unreachable!() };
        let o = basis_overlap(a, b);
        assert_relative_eq!(&o * o.transpose(), Mat::identity(o.nrows(), o.nrows()), epsilon = 1e-9);
    }

    #[test]
    fn point_orthogonal_on_activation_base_is_forward_pass() {
        let pr = prior(KernelFamily::Arccos1, 2, 40);
        let z = random(3, 3, 6);
        // w = first two coordinates of z scaled so that [w; 1] ∥ z_0.
        let w = Mat::from_row_slice(1, 2, &[z[(0, 0)] / z[(0, 2)], z[(0, 1)] / z[(0, 2)]]);
        let base = InducingSet::activations(z.clone(), ActivationKind::Softplus, &pr).unwrap();
        let kvu = cross_cov_kvu(&InducingSet::Points { z: w.clone() }, &base, &pr).unwrap();
        let zr: Vec<f64> = z.row(0).iter().copied().collect();
        let wr: Vec<f64> = w.row(0).iter().copied().collect();
        let h = activation_feature(&zr, &wr, ActivationKind::Softplus, 1.0, 1.0).unwrap();
        assert_relative_eq!(kvu[(0, 0)], h, max_relative = 1e-7);
        let (wh, wn) = lift_to_sphere(&wr, 1.0).unwrap();
        let zn = z.row(0).norm();
        let t: f64 = wh.iter().zip(&zr).map(|(a, b)| a * b).sum::<f64>() / zn;
        if z[(0, 2)] > 0.0 {
            assert_relative_eq!(t, 1.0, epsilon = 1e-12);
            assert_relative_eq!(h, zn * wn * ActivationKind::Softplus.value(1.0), max_relative = 1e-12);
        }
    }

    #[test]
    fn nystrom_is_exact_on_full_basis() {
        let pr = prior(KernelFamily::SquaredExp, 1, 6);
        let x = random(6, 1, 7);
        let blocks = assemble_blocks(&pr, &InducingSet::Points { z: x.clone() }, None, &x).unwrap();
        let ny = nystrom_terms(&blocks).unwrap();
        let kff = kernel_eval(&pr.kernel, &x, &x).unwrap();
        assert_relative_eq!(ny.qff(), kff, epsilon = 1e-8);
        let z = x.rows(0, 1).into_owned();
        let blocks = assemble_blocks(&pr, &InducingSet::Points { z }, None, &x).unwrap();
        let ny = nystrom_terms(&blocks).unwrap();
        let ku = blocks.kuf.row(0).transpose();
        assert_relative_eq!(ny.qff(), &ku * ku.transpose() / blocks.kuu[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn nystrom_matches_dense_inverse() {
        let pr = prior(KernelFamily::Matern52, 2, 6);
        let x = random(7, 2, 8);
        let base = InducingSet::Points { z: random(3, 2, 9) };
        let orth = InducingSet::activations(random(2, 3, 10), ActivationKind::Softplus, &pr).unwrap();
        let blocks = assemble_blocks(&pr, &base, Some(&orth), &x).unwrap();
        let ny = nystrom_terms(&blocks).unwrap();
        let inv = blocks.kuu.clone().try_inverse().unwrap();
        let kvu = blocks.kvu.as_ref().unwrap();
        assert_relative_eq!(ny.qff(), blocks.kuf.transpose() * &inv * &blocks.kuf, epsilon = 1e-8);
        assert_relative_eq!(ny.qvf.unwrap(), kvu * &inv * &blocks.kuf, epsilon = 1e-8);
        assert_relative_eq!(ny.qvv.unwrap(), kvu * &inv * kvu.transpose(), epsilon = 1e-8);
    }

    #[test]
    fn schur_examples() {
        let k = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert_eq!(schur_terms(&k, &k), Mat::zeros(2, 2));
        let d = schur_diag(&DVector::from_vec(vec![1.0, 1.0, 1.0]), &DVector::from_vec(vec![1.0 + 1e-12, 0.5, 1.5]));
        assert_eq!(d.as_slice(), &[0.0, 0.5, -0.5]);
    }

    #[test]
    fn assembled_kuu_is_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100u64 {
            let family = [KernelFamily::Arccos1, KernelFamily::Matern52, KernelFamily::SquaredExp][trial as usize % 3];
            let pr = prior(family, 2, 6);
            let m = rng.random_range(1..6);
            let set = match trial % 3 {
                0 => InducingSet::Points { z: random(m, 2, trial) },
                1 => InducingSet::harmonics(&pr, trial).unwrap(),
                _ => {
                    let kind = if trial % 2 == 0 { ActivationKind::Relu } else { ActivationKind::Softplus };
                    InducingSet::activations(random(m, 3, trial), kind, &pr).unwrap()
                }
            };
            let kuu = cov_kuu(&set, &pr).unwrap();
            assert_eq!(kuu, kuu.transpose());
            jittered_cholesky(&kuu, "K_uu").unwrap();
        }
    }

    #[test]
    fn spectral_pairings_on_the_two_sphere() {
        use crate::kernels::{kernel_spectrum, spectrum_diagnostics};
        let g = SphereGeometry::new(3).unwrap();
        let relu = activation_spectrum(ActivationKind::Relu, &g, 35).unwrap();
        let soft = activation_spectrum(ActivationKind::Softplus, &g, 35).unwrap();
        for l in (3..=35).step_by(2) {
            assert!(relu.coefficients[l].abs() <= 1e-8);
        }
        let spec = |f| kernel_spectrum(&ZonalKernel::new(f), &g, 35).unwrap();
        let m = spectrum_diagnostics(&spec(KernelFamily::Matern52), &relu).unwrap();
        assert!(!m.mismatch_levels.is_empty() && m.divergent, "{m:?}");
        let se = spectrum_diagnostics(&spec(KernelFamily::SquaredExp), &relu).unwrap();
        assert!(se.divergent, "{se:?}");
        let ok = spectrum_diagnostics(&spec(KernelFamily::Arccos1), &soft).unwrap();
        assert!(ok.mismatch_levels.is_empty() && !ok.divergent, "{ok:?}");
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let pr = prior(KernelFamily::Matern52, 2, 4);
        let bad = InducingSet::Points { z: random(2, 3, 1) };
        assert!(cross_cov_kuf(&bad, &pr, &random(2, 2, 2)).is_err());
        let pr3 = prior(KernelFamily::Matern52, 3, 4);
        let set = InducingSet::harmonics(&pr3, 1).unwrap();
        assert!(cov_kuu(&set, &pr).is_err());
    }
}
