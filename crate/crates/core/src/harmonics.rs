//! Orthonormal spherical harmonics on `S^{D-1}` for any `D`, realized as
//! fundamental systems.
//!
//! For level `ℓ` pick `N = N_{D,ℓ}` directions `v_i` whose reproducing
//! kernels `G(·, v_i) = (N/A_D) P_ℓ(⟨·, v_i⟩)` are linearly independent. With
//! `R` the lower Cholesky factor of `[G(v_i, v_j)]`, the functions
//! `Y = R⁻¹ [G(·, v_i)]_i` form an orthonormal basis of the level-ℓ space.

use std::rc::Rc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::linalg::{solve_lower, solve_upper_tr};
use crate::special::{normalized_gegenbauer_into, normalized_gegenbauer_with_derivative, num_harmonics, SphereGeometry};
use crate::{Error, Result};

type Mat = DMatrix<f64>;

/// Random candidates drawn per basis function.
const CANDIDATES_PER_FUNCTION: usize = 20;
/// Smallest admissible pivot relative to `√(N/A_D)`.
const MIN_PIVOT: f64 = 1e-10;
const UNIT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FundamentalSystem {
    pub level: usize,
    /// `N × D`, unit rows.
    #[serde(with = "crate::linalg::row_major")]
    pub directions: Mat,
    /// Lower Cholesky factor of the reproducing-kernel Gram of the directions.
    #[serde(with = "crate::linalg::row_major")]
    pub gram_factor: Mat,
}

impl FundamentalSystem {
    pub fn len(&self) -> usize {
        self.directions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[G(x_n, v_i)]` (`n × N`) and, if requested, `[∂G/∂t]` at the same
    /// arguments.
    fn kernel_block(&self, geometry: &SphereGeometry, points: &Mat, with_derivative: bool) -> (Mat, Option<Mat>) {
        let c = geometry.addition_factor(self.level);
        let alpha = geometry.alpha();
        let dots = points * self.directions.transpose();
        let mut vals = vec![0.0; self.level + 1];
        let mut ders = vec![0.0; self.level + 1];
        let mut g = Mat::zeros(dots.nrows(), dots.ncols());
        let mut dg = with_derivative.then(|| Mat::zeros(dots.nrows(), dots.ncols()));
        for j in 0..dots.ncols() {
            for i in 0..dots.nrows() {
                let t = dots[(i, j)].clamp(-1.0, 1.0);
                if let Some(dg) = dg.as_mut() {
                    normalized_gegenbauer_with_derivative(alpha, t, &mut vals, &mut ders);
                    dg[(i, j)] = c * ders[self.level];
                } else {
                    normalized_gegenbauer_into(alpha, t, &mut vals);
                }
                g[(i, j)] = c * vals[self.level];
            }
        }
        (g, dg)
    }

    /// `Y_{ℓ,j}(x_n)` as an `n × N` block.
    fn eval(&self, geometry: &SphereGeometry, points: &Mat) -> Mat {
        let (g, _) = self.kernel_block(geometry, points, false);
        solve_lower(&self.gram_factor, &g.transpose()).transpose()
    }
}

/// Greedy determinant maximization: a pivoted Cholesky over a pool of
/// `20·N` random unit vectors, keeping at each step the candidate with the
/// largest residual diagonal.
pub fn build_fundamental_system(geometry: &SphereGeometry, level: usize, seed: u64) -> Result<FundamentalSystem> {
    let dim = geometry.ambient_dim();
    let n = num_harmonics(geometry, level);
    let pool_size = CANDIDATES_PER_FUNCTION * n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(level as u64);
    let mut pool = Mat::zeros(pool_size, dim);
    for i in 0..pool_size {
        loop {
            let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                for (j, v) in row.into_iter().enumerate() {
                    pool[(i, j)] = v / norm;
                }
                break;
            }
        }
    }

    let c = geometry.addition_factor(level);
    let alpha = geometry.alpha();
    let mut residual = vec![c; pool_size];
    let mut factor = Mat::zeros(pool_size, n);
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut p = vec![0.0; level + 1];
    let min_pivot = MIN_PIVOT * c.sqrt();
    for k in 0..n {
        let (best, &best_residual) = residual
            .iter()
            .enumerate()
            .filter(|(i, _)| !chosen.contains(i))
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("pool holds more candidates than functions");
        let pivot = best_residual.max(0.0).sqrt();
        if pivot < min_pivot {
            return Err(Error::DegenerateSystem {
                level,
                ambient_dim: dim,
                achieved: k,
                required: n,
            });
        }
        let v = pool.row(best).into_owned();
        let prev = factor.row(best).columns(0, k).into_owned();
        for i in 0..pool_size {
            let t = pool.row(i).dot(&v).clamp(-1.0, 1.0);
            normalized_gegenbauer_into(alpha, t, &mut p);
            let mut entry = c * p[level];
            for j in 0..k {
                entry -= factor[(i, j)] * prev[j];
            }
            let lik = entry / pivot;
            factor[(i, k)] = lik;
            residual[i] -= lik * lik;
        }
        chosen.push(best);
    }

    let directions = Mat::from_fn(n, dim, |i, j| pool[(chosen[i], j)]);
    let mut gram_factor = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            gram_factor[(i, j)] = factor[(chosen[i], j)];
        }
    }
    Ok(FundamentalSystem {
        level,
        directions,
        gram_factor,
    })
}

/// Harmonics for a set of levels, columns ordered by level then index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicBasis {
    pub geometry: SphereGeometry,
    pub max_level: usize,
    pub systems: Vec<FundamentalSystem>,
}

pub fn build_harmonic_basis(geometry: &SphereGeometry, max_level: usize, seed: u64) -> Result<HarmonicBasis> {
    let systems = (0..=max_level)
        .map(|l| build_fundamental_system(geometry, l, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(HarmonicBasis {
        geometry: *geometry,
        max_level,
        systems,
    })
}

impl HarmonicBasis {
    pub fn size(&self) -> usize {
        self.systems.iter().map(|s| s.len()).sum()
    }

    pub fn levels(&self) -> Vec<usize> {
        self.systems.iter().map(|s| s.level).collect()
    }

    /// Level of every column.
    pub fn column_levels(&self) -> Vec<usize> {
        self.systems
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.level, s.len()))
            .collect()
    }

    /// Drops every level for which `keep` is false.
    pub fn retain_levels(mut self, keep: impl Fn(usize) -> bool) -> Self {
        self.systems.retain(|s| keep(s.level));
        self
    }

    fn check_points(&self, points: &Mat) -> Result<()> {
        if points.ncols() != self.geometry.ambient_dim() {
            return Err(Error::InvalidArgument(format!(
                "harmonics on S^{} need {} columns, got {}",
                self.geometry.ambient_dim() - 1,
                self.geometry.ambient_dim(),
                points.ncols()
            )));
        }
        for (i, row) in points.row_iter().enumerate() {
            let norm = row.norm();
            if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "point {i} has norm {norm}, expected a unit vector"
                )));
            }
        }
        Ok(())
    }

    fn eval_unchecked(&self, points: &Mat) -> Mat {
        let mut out = Mat::zeros(points.nrows(), self.size());
        let mut col = 0;
        for s in &self.systems {
            let block = s.eval(&self.geometry, points);
            out.columns_mut(col, s.len()).copy_from(&block);
            col += s.len();
        }
        out
    }

    /// Differentiable evaluation at unit rows held on a tape.
    pub fn eval_tape<'t>(&self, points: Var<'t>) -> Var<'t> {
        let x = points.value();
        let value = self.eval_unchecked(&x);
        let basis = Rc::new(self.clone());
        points.tape().custom(&[points], value, move |g| {
            let mut grad = Mat::zeros(x.nrows(), x.ncols());
            let mut col = 0;
            for s in &basis.systems {
                let (_, dg) = s.kernel_block(&basis.geometry, &x, true);
                let dg = dg.expect("derivative requested");
                let block = g.columns(col, s.len()).transpose();
                let zbar = solve_upper_tr(&s.gram_factor, &block).transpose().component_mul(&dg);
                grad += zbar * &s.directions;
                col += s.len();
            }
            vec![Some(grad)]
        })
    }
}

/// `Y_{ℓ,j}(x_n)` for every unit row, `n × basis.size()`.
pub fn eval_harmonics(basis: &HarmonicBasis, points: &Mat) -> Result<Mat> {
    basis.check_points(points)?;
    Ok(basis.eval_unchecked(points))
}
