//! Minimizers used by the fitting harness.
//!
//! The objective is fallible: an evaluation error is treated as `+∞`, so the
//! line search backs off instead of accepting a non-finite iterate.

use std::collections::VecDeque;

use crate::Result;

/// Objective value and gradient at a point.
pub type Evaluation = (f64, Vec<f64>);

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + a * d).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsSettings {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    /// Stop once `‖g‖∞ ≤ grad_tol · max(1, |f|)`.
    pub grad_tol: f64,
    /// Stop once a step decreases `f` by at most `ftol · max(|f|, |f′|, 1)`.
    pub ftol: f64,
    pub max_line_evals: usize,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            grad_tol: 1e-8,
            ftol: 2.220446049250313e-9,
            max_line_evals: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Accepted,
    /// Either the gradient tolerance was already met and nothing moved, or
    /// the step just taken (and applied) decreased `f` by less than `ftol`.
    Converged,
    /// No point satisfying the Wolfe conditions was found; the iterate is
    /// unchanged.
    LineSearchFailed,
}

/// Limited-memory BFGS state over a fixed-size vector.
#[derive(Debug, Clone)]
pub struct Lbfgs {
    pub settings: LbfgsSettings,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    /// Count of evaluations that failed and were treated as `+∞`.
    pub failed_evaluations: usize,
}

impl Lbfgs {
    pub fn new(settings: LbfgsSettings) -> Self {
        Self {
            settings,
            s: VecDeque::new(),
            y: VecDeque::new(),
            failed_evaluations: 0,
        }
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let mut alpha = Vec::with_capacity(self.s.len());
        for (s, y) in self.s.iter().zip(&self.y).rev() {
            let a = dot(s, &q) / dot(y, s);
            q.iter_mut().zip(y).for_each(|(q, y)| *q -= a * y);
            alpha.push(a);
        }
        if let (Some(s), Some(y)) = (self.s.back(), self.y.back()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y), a) in self.s.iter().zip(&self.y).zip(alpha.into_iter().rev()) {
            let b = dot(y, &q) / dot(y, s);
            q.iter_mut().zip(s).for_each(|(q, s)| *q += (a - b) * s);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One iteration from `(x, f, g)`, updating all three in place on success.
    pub fn step<F>(&mut self, x: &mut Vec<f64>, f: &mut f64, g: &mut Vec<f64>, objective: &mut F) -> StepOutcome
    where
        F: FnMut(&[f64]) -> Result<Evaluation>,
    {
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax <= self.settings.grad_tol * f.abs().max(1.0) {
            return StepOutcome::Converged;
        }
        let mut d = self.direction(g);
        let mut slope = dot(g, &d);
        if !(slope < 0.0) {
            self.s.clear();
            self.y.clear();
            d = g.iter().map(|v| -v).collect();
            slope = dot(g, &d);
        }
        let alpha0 = if self.s.is_empty() { (1.0 / gmax).min(1.0) } else { 1.0 };
        match self.line_search(x, *f, slope, &d, alpha0, objective) {
            Some((alpha, fnew, gnew)) => {
                let s: Vec<f64> = d.iter().map(|v| alpha * v).collect();
                let yv: Vec<f64> = gnew.iter().zip(g.iter()).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &yv);
                if sy > 1e-10 * dot(&yv, &yv) {
                    if self.s.len() == self.settings.memory {
                        self.s.pop_front();
                        self.y.pop_front();
                    }
                    self.s.push_back(s.clone());
                    self.y.push_back(yv);
                }
                x.iter_mut().zip(&s).for_each(|(x, s)| *x += s);
                let decrease = *f - fnew;
                let scale = f.abs().max(fnew.abs()).max(1.0);
                *f = fnew;
                *g = gnew;
                if decrease <= self.settings.ftol * scale {
                    StepOutcome::Converged
                } else {
                    StepOutcome::Accepted
                }
            }
            None => StepOutcome::LineSearchFailed,
        }
    }

    fn eval<F>(&mut self, x: &[f64], objective: &mut F) -> Option<Evaluation>
    where
        F: FnMut(&[f64]) -> Result<Evaluation>,
    {
        match objective(x) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Some((f, g)),
            Ok(_) => {
                self.failed_evaluations += 1;
                None
            }
            Err(e) => {
                log::debug!("objective failed inside line search: {e}");
                self.failed_evaluations += 1;
                None
            }
        }
    }

    /// Strong-Wolfe bracketing and zoom.
    fn line_search<F>(
        &mut self,
        x: &[f64],
        f0: f64,
        slope0: f64,
        d: &[f64],
        alpha0: f64,
        objective: &mut F,
    ) -> Option<(f64, f64, Vec<f64>)>
    where
        F: FnMut(&[f64]) -> Result<Evaluation>,
    {
        let (c1, c2) = (self.settings.c1, self.settings.c2);
        let mut evals = 0;
        let mut lo = (0.0, f0, slope0);
        let mut hi: Option<(f64, f64, f64)> = None;
        let mut alpha = alpha0;
        let mut best: Option<(f64, f64, Vec<f64>)> = None;
        while evals < self.settings.max_line_evals {
            evals += 1;
            let trial = self.eval(&axpy(x, alpha, d), objective);
            let Some((fa, ga)) = trial else {
                hi = Some((alpha, f64::INFINITY, f64::NAN));
                alpha = next_trial(lo, hi, alpha);
                continue;
            };
            let slope = dot(&ga, d);
            if fa > f0 + c1 * alpha * slope0 || fa >= lo.1 && lo.0 > 0.0 {
                hi = Some((alpha, fa, slope));
            } else {
                if slope.abs() <= -c2 * slope0 {
                                    return Some((alpha, fa, ga));
                }
                if fa < f0 && best.as_ref().is_none_or(|b| fa < b.1) {
                    best = Some((alpha, fa, ga.clone()));
                }
                if hi.is_none() && slope < 0.0 {
                    lo = (alpha, fa, slope);
                    alpha *= 2.0;
                    continue;
                }
                if slope * (hi.map_or(alpha, |h| h.0) - lo.0) >= 0.0 {
                    hi = Some(lo);
                }
                lo = (alpha, fa, slope);
            }
            alpha = next_trial(lo, hi, alpha);
            if let Some(h) = hi {
                if (h.0 - lo.0).abs() <= 1e-14 * lo.0.max(h.0) {
                    break;
                }
            }
        }
        // Sufficient decrease without the curvature condition still makes
        // progress; accept the best such point rather than stalling.
        best
    }
}

/// Cubic interpolation inside the bracket, safeguarded towards bisection.
fn next_trial(lo: (f64, f64, f64), hi: Option<(f64, f64, f64)>, alpha: f64) -> f64 {
    let Some(hi) = hi else { return alpha * 2.0 };
    let (a, b) = (lo.0.min(hi.0), lo.0.max(hi.0));
    let mid = 0.5 * (a + b);
    if !hi.1.is_finite() || !hi.2.is_finite() {
        return lo.0 + 0.5 * (hi.0 - lo.0);
    }
    let d1 = lo.2 + hi.2 - 3.0 * (lo.1 - hi.1) / (lo.0 - hi.0);
    let disc = d1 * d1 - lo.2 * hi.2;
    if disc < 0.0 {
        return mid;
    }
    let d2 = (hi.0 - lo.0).signum() * disc.sqrt();
    let t = hi.0 - (hi.0 - lo.0) * (hi.2 + d2 - d1) / (hi.2 - lo.2 + 2.0 * d2);
    let margin = 0.1 * (b - a);
    if t.is_finite() && t > a + margin && t < b - margin {
        t
    } else {
        mid
    }
}

/// Adaptive-moment descent.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Descends along the gradient `g` of the objective being minimized.
    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            x[i] -= self.learning_rate * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64]) -> Result<Evaluation> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
        Ok((f, g))
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let mut opt = Lbfgs::new(LbfgsSettings {
            ftol: 0.0,
            ..Default::default()
        });
        let mut x = vec![-1.2, 1.0];
        let (mut f, mut g) = rosenbrock(&x).unwrap();
        let mut obj = rosenbrock;
        for _ in 0..200 {
            if opt.step(&mut x, &mut f, &mut g, &mut obj) != StepOutcome::Accepted {
                break;
            }
        }
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6, "{x:?}");
    }

    #[test]
    fn lbfgs_backs_off_from_failed_regions() {
        // Undefined beyond x = 0.5; the minimum of (x − 0.45)² sits inside and
        // the first unit step lands outside.
        let mut obj = |x: &[f64]| -> Result<Evaluation> {
            if x[0] > 0.5 {
                Err(crate::Error::NonFinite("outside domain".into()))
            } else {
                Ok(((x[0] - 0.45).powi(2), vec![2.0 * (x[0] - 0.45)]))
            }
        };
        let mut opt = Lbfgs::new(LbfgsSettings::default());
        let mut x = vec![0.0];
        let (mut f, mut g) = obj(&x).unwrap();
        for _ in 0..50 {
            if opt.step(&mut x, &mut f, &mut g, &mut obj) != StepOutcome::Accepted {
                break;
            }
        }
        assert!((x[0] - 0.45).abs() < 1e-6);
        assert!(opt.failed_evaluations > 0);
    }

    #[test]
    fn lbfgs_iterates_decrease_monotonically() {
        let mut opt = Lbfgs::new(LbfgsSettings::default());
        let mut x = vec![0.0, 2.0];
        let (mut f, mut g) = rosenbrock(&x).unwrap();
        let mut obj = rosenbrock;
        for _ in 0..40 {
            let before = f;
            if opt.step(&mut x, &mut f, &mut g, &mut obj) != StepOutcome::Accepted {
                break;
            }
            assert!(f < before);
        }
    }

    #[test]
    fn adam_first_step_has_learning_rate_length() {
        let mut adam = Adam::new(2, 1e-3);
        let mut x = vec![1.0, -1.0];
        adam.step(&mut x, &[5.0, -0.01]);
        assert!((x[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((x[1] - (-1.0 + 1e-3)).abs() < 1e-6);
    }
}
