//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every operation as a node holding its value and a
//! closure mapping the output adjoint to the adjoints of its parents. Nodes
//! that do not depend on any leaf carry no closure, so assembling blocks from
//! constants costs nothing beyond the forward pass.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::DMatrix;

use crate::linalg;

pub type Mat = DMatrix<f64>;

type Backward = Box<dyn Fn(&Mat) -> Vec<Option<Mat>>>;

struct Node {
    value: Rc<Mat>,
    parents: Vec<usize>,
    backward: Option<Backward>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

pub struct Gradients {
    adjoints: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Mat> {
        self.adjoints.get(var.id).and_then(|a| a.as_ref())
    }
}

fn accumulate(slot: &mut Option<Mat>, g: Mat) {
    match slot {
        Some(acc) => *acc += g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Mat, parents: Vec<usize>, backward: Option<Backward>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Mat) -> Var<'_> {
        self.push(value, vec![], Some(Box::new(|_| vec![])))
    }

    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, vec![], None)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Mat::from_element(1, 1, value))
    }

    pub fn scalar_leaf(&self, value: f64) -> Var<'_> {
        self.leaf(Mat::from_element(1, 1, value))
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].backward.is_some()
    }

    /// Records an operation with a caller-supplied backward rule. The closure
    /// receives the output adjoint and returns one adjoint per parent (`None`
    /// where no gradient flows).
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t>],
        value: Mat,
        backward: impl Fn(&Mat) -> Vec<Option<Mat>> + 'static,
    ) -> Var<'t> {
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let needs_grad = ids.iter().any(|&i| self.tracked(i));
        let bw: Option<Backward> = if needs_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        self.push(value, ids, bw)
    }

    /// Adjoints of every node with respect to the scalar `output`.
    pub fn gradient(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        assert_eq!(out.value.shape(), (1, 1), "gradient needs a scalar output");
        let mut adjoints: Vec<Option<Mat>> = vec![None; nodes.len()];
        adjoints[output.id] = Some(Mat::from_element(1, 1, 1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(bw) = &node.backward else { continue };
            if node.parents.is_empty() {
                continue;
            }
            let Some(adj) = adjoints[id].take() else { continue };
            let grads = bw(&adj);
            for (&p, g) in node.parents.iter().zip(grads) {
                if let Some(g) = g {
                    if nodes[p].backward.is_some() {
                        accumulate(&mut adjoints[p], g);
                    }
                }
            }
            adjoints[id] = Some(adj);
        }
        Gradients { adjoints }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn tril(m: &Mat) -> Mat {
    let mut out = m.clone();
    for j in 0..out.ncols() {
        for i in 0..j.min(out.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Mat> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.tape
            .custom(&[self, other], v, |g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.tape
            .custom(&[self, other], v, |g| vec![Some(g.clone()), Some(-g)])
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let v = a.component_mul(&b);
        self.tape.custom(&[self, other], v, move |g| {
            vec![Some(g.component_mul(&b)), Some(g.component_mul(&a))]
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.tape.custom(&[self], v, move |g| vec![Some(g * c)])
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        let v = self.value().add_scalar(c);
        self.tape.custom(&[self], v, |g| vec![Some(g.clone())])
    }

    /// Multiplies every entry by the 1×1 variable `s`.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        let a = self.value();
        let sv = s.scalar_value();
        let v = &*a * sv;
        self.tape.custom(&[self, s], v, move |g| {
            vec![Some(g * sv), Some(Mat::from_element(1, 1, g.dot(&a)))]
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let v = &*a * &*b;
        self.tape.custom(&[self, other], v, move |g| {
            vec![Some(g * b.transpose()), Some(a.transpose() * g)]
        })
    }

    /// `selfᵀ · other`.
    pub fn tr_matmul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let v = a.tr_mul(&b);
        self.tape.custom(&[self, other], v, move |g| {
            vec![Some(&*b * g.transpose()), Some(&*a * g)]
        })
    }

    /// `self · otherᵀ`.
    pub fn matmul_tr(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let v = &*a * b.transpose();
        self.tape.custom(&[self, other], v, move |g| {
            vec![Some(g * &*b), Some(g.tr_mul(&a))]
        })
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().transpose();
        self.tape.custom(&[self], v, |g| vec![Some(g.transpose())])
    }

    /// Elementwise `f` with derivative `df`.
    pub fn map(self, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Var<'t> {
        let x = self.value();
        let v = x.map(&f);
        let d = x.map(&df);
        self.tape
            .custom(&[self], v, move |g| vec![Some(g.component_mul(&d))])
    }

    pub fn square(self) -> Var<'t> {
        self.map(|x| x * x, |x| 2.0 * x)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        let out = v.clone();
        self.tape
            .custom(&[self], v, move |g| vec![Some(g.component_mul(&out))])
    }

    pub fn ln(self) -> Var<'t> {
        self.map(f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.map(f64::sqrt, |x| 0.5 / x.sqrt())
    }

    pub fn recip(self) -> Var<'t> {
        self.map(|x| 1.0 / x, |x| -1.0 / (x * x))
    }

    pub fn softplus(self) -> Var<'t> {
        self.map(softplus, sigmoid)
    }

    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let (r, c) = x.shape();
        let v = Mat::from_element(1, 1, x.sum());
        self.tape
            .custom(&[self], v, move |g| vec![Some(Mat::from_element(r, c, g[(0, 0)]))])
    }

    /// Σ_ij self_ij · other_ij as a 1×1 value.
    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        self.mul(other).sum()
    }

    /// Column sums of squares as an `ncols × 1` vector: `diag(selfᵀ self)`.
    pub fn col_sum_sq(self) -> Var<'t> {
        let x = self.value();
        let v = Mat::from_iterator(
            x.ncols(),
            1,
            x.column_iter().map(|c| c.norm_squared()),
        );
        self.tape.custom(&[self], v, move |g| {
            let mut out = (*x).clone() * 2.0;
            for (j, mut col) in out.column_iter_mut().enumerate() {
                col *= g[(j, 0)];
            }
            vec![Some(out)]
        })
    }

    /// Euclidean norm of every row as an `nrows × 1` vector.
    pub fn row_norms(self) -> Var<'t> {
        let x = self.value();
        let norms = Mat::from_iterator(x.nrows(), 1, x.row_iter().map(|r| r.norm()));
        let n2 = norms.clone();
        self.tape.custom(&[self], norms, move |g| {
            let mut out = (*x).clone();
            for (i, mut row) in out.row_iter_mut().enumerate() {
                let n = n2[(i, 0)];
                let s = if n > 0.0 { g[(i, 0)] / n } else { 0.0 };
                row *= s;
            }
            vec![Some(out)]
        })
    }

    /// `diag(v) · self` for a column vector `v`.
    pub fn scale_rows(self, v: Var<'t>) -> Var<'t> {
        let a = self.value();
        let s = v.value();
        let mut out = (*a).clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= s[(i, 0)];
        }
        self.tape.custom(&[self, v], out, move |g| {
            let mut ga = g.clone();
            for (i, mut row) in ga.row_iter_mut().enumerate() {
                row *= s[(i, 0)];
            }
            let gs = Mat::from_iterator(
                a.nrows(),
                1,
                (0..a.nrows()).map(|i| g.row(i).dot(&a.row(i))),
            );
            vec![Some(ga), Some(gs)]
        })
    }

    /// `self · diag(v)` for a column vector `v`.
    pub fn scale_cols(self, v: Var<'t>) -> Var<'t> {
        let a = self.value();
        let s = v.value();
        let mut out = (*a).clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col *= s[(j, 0)];
        }
        self.tape.custom(&[self, v], out, move |g| {
            let mut ga = g.clone();
            for (j, mut col) in ga.column_iter_mut().enumerate() {
                col *= s[(j, 0)];
            }
            let gs = Mat::from_iterator(
                a.ncols(),
                1,
                (0..a.ncols()).map(|j| g.column(j).dot(&a.column(j))),
            );
            vec![Some(ga), Some(gs)]
        })
    }

    /// Outer product `self · otherᵀ` of two column vectors.
    pub fn outer(self, other: Var<'t>) -> Var<'t> {
        self.matmul_tr(other)
    }

    /// Diagonal of a square matrix as a column vector.
    pub fn diag(self) -> Var<'t> {
        let x = self.value();
        let n = x.nrows();
        let v = Mat::from_iterator(n, 1, (0..n).map(|i| x[(i, i)]));
        self.tape.custom(&[self], v, move |g| {
            let mut out = Mat::zeros(n, n);
            for i in 0..n {
                out[(i, i)] = g[(i, 0)];
            }
            vec![Some(out)]
        })
    }

    /// Square diagonal matrix from a column vector.
    pub fn diag_matrix(self) -> Var<'t> {
        let x = self.value();
        let n = x.nrows();
        let v = Mat::from_diagonal(&x.column(0).into_owned());
        self.tape.custom(&[self], v, move |g| {
            vec![Some(Mat::from_iterator(n, 1, (0..n).map(|i| g[(i, i)])))]
        })
    }

    /// Appends a constant column.
    pub fn append_const_col(self, c: f64) -> Var<'t> {
        let x = self.value();
        let k = x.ncols();
        let v = (*x).clone().insert_column(k, c);
        self.tape
            .custom(&[self], v, move |g| vec![Some(g.columns(0, k).into_owned())])
    }

    /// Entries `self[idx[i], 0]` as a column vector.
    pub fn gather(self, idx: Vec<usize>) -> Var<'t> {
        let x = self.value();
        let n = x.nrows();
        let v = Mat::from_iterator(idx.len(), 1, idx.iter().map(|&i| x[(i, 0)]));
        self.tape.custom(&[self], v, move |g| {
            let mut out = Mat::zeros(n, 1);
            for (k, &i) in idx.iter().enumerate() {
                out[(i, 0)] += g[(k, 0)];
            }
            vec![Some(out)]
        })
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let vals: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals[0].ncols();
        let rows: Vec<usize> = vals.iter().map(|v| v.nrows()).collect();
        let total = rows.iter().sum();
        let mut out = Mat::zeros(total, cols);
        let mut r0 = 0;
        for v in &vals {
            out.rows_mut(r0, v.nrows()).copy_from(v);
            r0 += v.nrows();
        }
        tape.custom(parts, out, move |g| {
            let mut r0 = 0;
            rows.iter()
                .map(|&r| {
                    let piece = g.rows(r0, r).into_owned();
                    r0 += r;
                    Some(piece)
                })
                .collect()
        })
    }

    /// Keeps the strict upper triangle at zero and passes the diagonal
    /// through `softplus`: an unconstrained square matrix becomes a Cholesky
    /// factor with positive diagonal.
    pub fn to_cholesky_factor(self) -> Var<'t> {
        let x = self.value();
        let n = x.nrows();
        let mut v = tril(&x);
        for i in 0..n {
            v[(i, i)] = softplus(x[(i, i)]);
        }
        self.tape.custom(&[self], v, move |g| {
            let mut out = tril(g);
            for i in 0..n {
                out[(i, i)] = g[(i, i)] * sigmoid(x[(i, i)]);
            }
            vec![Some(out)]
        })
    }

    /// Lower Cholesky factor of a symmetric matrix, adding jitter on failure
    /// per [`linalg::jittered_cholesky`]. The jitter is treated as a constant.
    pub fn cholesky(self, what: &str) -> crate::Result<Var<'t>> {
        let a = self.value();
        let n = a.nrows().max(1);
        self.cholesky_scaled(a.diagonal().sum() / n as f64, what)
    }

    /// [`Var::cholesky`] with jitter relative to `scale`.
    pub fn cholesky_scaled(self, scale: f64, what: &str) -> crate::Result<Var<'t>> {
        let a = self.value();
        let (l, _) = linalg::jittered_cholesky_scaled(&a, scale, what)?;
        let lc = l.clone();
        Ok(self.tape.custom(&[self], l, move |g| {
            // Φ(Lᵀ Ḡ) with halved diagonal, then L⁻ᵀ Φ L⁻¹, symmetrized.
            let mut p = tril(&lc.tr_mul(&tril(g)));
            for i in 0..p.nrows() {
                p[(i, i)] *= 0.5;
            }
            let s = linalg::solve_upper_tr(&lc, &p);
            let s = linalg::solve_upper_tr(&lc, &s.transpose()).transpose();
            let sym = (&s + s.transpose()) * 0.5;
            vec![Some(sym)]
        }))
    }

    /// `self⁻¹ · b` for lower-triangular `self`.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        let l = self.value();
        let bv = b.value();
        let x = linalg::solve_lower(&l, &bv);
        let xc = x.clone();
        self.tape.custom(&[self, b], x, move |g| {
            let gb = linalg::solve_upper_tr(&l, g);
            let gl = -tril(&(&gb * xc.transpose()));
            vec![Some(gl), Some(gb)]
        })
    }

    /// `self⁻ᵀ · b` for lower-triangular `self`.
    pub fn solve_lower_tr(self, b: Var<'t>) -> Var<'t> {
        let l = self.value();
        let bv = b.value();
        let x = linalg::solve_upper_tr(&l, &bv);
        let xc = x.clone();
        self.tape.custom(&[self, b], x, move |g| {
            let gb = linalg::solve_lower(&l, g);
            let gl = -tril(&(&xc * gb.transpose()));
            vec![Some(gl), Some(gb)]
        })
    }

    /// `self − other` with round-off-level differences set to exactly zero
    /// (see [`linalg::cancel_sub`]). Zeroed entries pass no gradient.
    pub fn cancel_sub(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let v = linalg::cancel_sub(&a, &b);
        let mask = v.map(|x| if x == 0.0 { 0.0 } else { 1.0 });
        self.tape.custom(&[self, other], v, move |g| {
            let gm = g.component_mul(&mask);
            vec![Some(gm.clone()), Some(-gm)]
        })
    }

    /// `(self + selfᵀ)/2`.
    pub fn symmetrize(self) -> Var<'t> {
        self.add(self.transpose()).scale(0.5)
    }

    /// Σ_i log self_ii.
    pub fn log_diag_sum(self) -> Var<'t> {
        let x = self.value();
        let n = x.nrows();
        let v = Mat::from_element(1, 1, (0..n).map(|i| x[(i, i)].ln()).sum());
        self.tape.custom(&[self], v, move |g| {
            let mut out = Mat::zeros(n, n);
            for i in 0..n {
                out[(i, i)] = g[(0, 0)] / x[(i, i)];
            }
            vec![Some(out)]
        })
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn inv_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random(r: usize, c: usize, seed: u64) -> Mat {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d f / d x for every entry of `x0`.
    fn check(x0: &Mat, f: impl for<'a> Fn(Var<'a>) -> Var<'a>) {
        let tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = f(x);
        let g = tape.gradient(y);
        let analytic = g.wrt(x).cloned().unwrap_or_else(|| Mat::zeros(x0.nrows(), x0.ncols()));
        let h = 1e-6;
        for i in 0..x0.nrows() {
            for j in 0..x0.ncols() {
                let eval = |delta: f64| {
                    let mut xp = x0.clone();
                    xp[(i, j)] += delta;
                    let t = Tape::new();
                    f(t.constant(xp)).scalar_value()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert_relative_eq!(analytic[(i, j)], fd, epsilon = 1e-6, max_relative = 1e-5);
            }
        }
    }

    fn spd(n: usize, seed: u64) -> Mat {
        let a = random(n, n, seed);
        &a * a.transpose() + Mat::identity(n, n) * n as f64
    }

    #[test]
    fn elementwise_and_products() {
        let b = random(3, 4, 2);
        check(&random(3, 4, 1), move |x| {
            let t = x.tape();
            x.mul(t.constant(b.clone())).square().sum()
        });
        let c = random(4, 2, 3);
        check(&random(3, 4, 1), move |x| {
            let t = x.tape();
            x.matmul(t.constant(c.clone())).exp().sum()
        });
        check(&random(4, 3, 5), |x| x.tr_matmul(x).sum());
        check(&random(4, 3, 5), |x| x.matmul_tr(x).square().sum());
        check(&random(4, 3, 6), |x| x.col_sum_sq().softplus().sum());
        check(&random(4, 3, 7), |x| x.row_norms().ln().sum());
        check(&random(4, 3, 7), |x| {
            let n = x.row_norms().recip();
            x.scale_rows(n).append_const_col(0.5).square().sum()
        });
        check(&random(3, 3, 8), |x| {
            let d = x.diag();
            x.scale_cols(d).diag().diag_matrix().square().sum()
        });
        check(&random(5, 1, 9), |x| {
            let g = x.gather(vec![0, 2, 2, 4]);
            Var::vstack(&[g, x]).outer(x.transpose().transpose()).sum()
        });
        check(&random(2, 2, 10), |x| {
            let s = x.tape().scalar_leaf(0.3);
            x.scale_by(x.sum()).add(x.scale_by(s)).square().sum()
        });
    }

    #[test]
    fn cholesky_and_solves() {
        let a0 = spd(4, 11);
        check(&a0, |a| {
            let sym = a.add(a.transpose()).scale(0.5);
            let l = sym.cholesky("test").unwrap();
            l.log_diag_sum().add(l.square().sum())
        });
        let b = random(4, 3, 12);
        check(&a0, move |a| {
            let t = a.tape();
            let sym = a.add(a.transpose()).scale(0.5);
            let l = sym.cholesky("test").unwrap();
            let bb = t.constant(b.clone());
            l.solve_lower(bb).square().sum().add(l.solve_lower_tr(bb).sum())
        });
        let l0 = spd(3, 13).cholesky().unwrap().l();
        let rhs = random(3, 2, 14);
        check(&rhs, move |b| {
            let l = b.tape().constant(l0.clone());
            l.solve_lower(b).exp().sum().add(l.solve_lower_tr(b).square().sum())
        });
        let raw = random(3, 3, 15);
        check(&raw, |x| x.to_cholesky_factor().log_diag_sum().add(x.to_cholesky_factor().square().sum()));
    }

    #[test]
    fn constants_are_untracked() {
        let tape = Tape::new();
        let c = tape.constant(Mat::identity(2, 2));
        let x = tape.leaf(Mat::identity(2, 2));
        let y = c.matmul(c).add(x).sum();
        let g = tape.gradient(y);
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &Mat::from_element(2, 2, 1.0));
    }

    #[test]
    fn softplus_inverse() {
        for &y in &[1e-6, 0.3, 1.0, 12.0, 40.0] {
            assert_relative_eq!(softplus(inv_softplus(y)), y, max_relative = 1e-12);
        }
    }
}
