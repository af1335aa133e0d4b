//! Limited-memory BFGS with a strong Wolfe line search.
//!
//! The two-loop recursion follows Nocedal & Wright (Alg. 7.4), the line
//! search their Alg. 3.5/3.6 with safeguarded cubic interpolation in the
//! zoom phase. When the line search cannot produce a Wolfe point the
//! iteration falls back to a backtracking steepest-descent step; if that
//! fails too the minimizer stops at the current iterate.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsParams {
    pub memory: usize,
    /// Stop once `‖∇f‖∞ ≤ grad_tol · max(1, |f|)`.
    pub grad_tol: f64,
    pub max_iters: usize,
    pub c1: f64,
    pub c2: f64,
}

impl Default for LbfgsParams {
    fn default() -> Self {
        Self {
            memory: 10,
            grad_tol: 1e-8,
            max_iters: 500,
            c1: 1e-4,
            c2: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LbfgsStatus {
    GradientTolerance,
    MaxIterations,
    /// Neither the Wolfe search nor the backtracking fallback made progress.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct LbfgsReport {
    pub status: LbfgsStatus,
    pub iterations: usize,
    pub value: f64,
    pub grad_inf_norm: f64,
    /// Objective after each accepted step, starting with the initial value.
    pub accepted_values: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[derive(Clone, Copy, Debug)]
struct Probe {
    step: f64,
    value: f64,
    slope: f64,
}

/// Minimizer of the cubic interpolating two probes, or `None` when the
/// interpolant has no real minimizer.
fn cubic_min(a: Probe, b: Probe) -> Option<f64> {
    let d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.step - b.step);
    let disc = d1 * d1 - a.slope * b.slope;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b.step - a.step).signum() * disc.sqrt();
    let denom = b.slope - a.slope + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let t = b.step - (b.step - a.step) * (b.slope + d2 - d1) / denom;
    t.is_finite().then_some(t)
}

struct LineSearch<'a, F> {
    f: &'a mut F,
    x: &'a [f64],
    dir: &'a [f64],
    trial: Vec<f64>,
    grad: Vec<f64>,
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> LineSearch<'_, F> {
    fn probe(&mut self, step: f64) -> Probe {
        for ((t, x), d) in self.trial.iter_mut().zip(self.x).zip(self.dir) {
            *t = x + step * d;
        }
        let value = (self.f)(&self.trial, &mut self.grad);
        let slope = dot(&self.grad, self.dir);
        Probe { step, value, slope }
    }

    fn sufficient(&self, p: &Probe) -> bool {
        p.value.is_finite() && p.value <= self.f0 + self.c1 * p.step * self.slope0
    }

    fn curvature(&self, p: &Probe) -> bool {
        p.slope.abs() <= -self.c2 * self.slope0
    }

    /// Returns the accepted probe; `self.trial`/`self.grad` hold its point.
    fn run(&mut self, initial: f64) -> Option<Probe> {
        const MAX_BRACKET: usize = 25;
        let mut prev = Probe {
            step: 0.0,
            value: self.f0,
            slope: self.slope0,
        };
        let mut step = initial;
        for i in 0..MAX_BRACKET {
            let cur = self.probe(step);
            if !cur.value.is_finite() {
                // Overshot into overflow: shrink and retry.
                step = 0.5 * (prev.step + step);
                continue;
            }
            if !self.sufficient(&cur) || (i > 0 && cur.value >= prev.value) {
                return self.zoom(prev, cur);
            }
            if self.curvature(&cur) {
                return Some(cur);
            }
            if cur.slope >= 0.0 {
                return self.zoom(cur, prev);
            }
            prev = cur;
            step *= 2.0;
        }
        None
    }

    fn zoom(&mut self, mut lo: Probe, mut hi: Probe) -> Option<Probe> {
        const MAX_ZOOM: usize = 40;
        for _ in 0..MAX_ZOOM {
            let (left, right) = if lo.step < hi.step {
                (lo.step, hi.step)
            } else {
                (hi.step, lo.step)
            };
            let width = right - left;
            if width <= 1e-14 * right.abs().max(1e-300) {
                break;
            }
            let step = match cubic_min(lo, hi) {
                Some(t) if t > left + 0.1 * width && t < right - 0.1 * width => t,
                _ => 0.5 * (left + right),
            };
            let cur = self.probe(step);
            if !self.sufficient(&cur) || cur.value >= lo.value {
                hi = cur;
            } else {
                if self.curvature(&cur) {
                    return Some(cur);
                }
                if cur.slope * (hi.step - lo.step) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        // An Armijo point that failed curvature is still a useful step.
        if lo.step > 0.0 && self.sufficient(&lo) {
            let p = self.probe(lo.step);
            return Some(p);
        }
        None
    }
}

/// Minimizes `f` starting from `x`, overwriting `x` with the result.
/// `f(x, grad)` must return the value and write the gradient.
pub fn minimize<F>(x: &mut [f64], mut f: F, params: &LbfgsParams) -> LbfgsReport
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dim = x.len();
    let mut grad = vec![0.0; dim];
    let mut value = f(x, &mut grad);
    let mut accepted_values = vec![value];
    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(params.memory);
    let mut dir = vec![0.0; dim];
    let mut alpha = vec![0.0; params.memory];

    let converged = |g: &[f64], v: f64| inf_norm(g) <= params.grad_tol * v.abs().max(1.0);

    for iter in 0..params.max_iters {
        if converged(&grad, value) {
            return LbfgsReport {
                status: LbfgsStatus::GradientTolerance,
                iterations: iter,
                value,
                grad_inf_norm: inf_norm(&grad),
                accepted_values,
            };
        }

        // Two-loop recursion.
        dir.iter_mut().zip(&grad).for_each(|(d, g)| *d = -g);
        for (i, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha[i] = a;
            dir.iter_mut().zip(y).for_each(|(d, yv)| *d -= a * yv);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|d| *d *= gamma);
        }
        for (i, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &dir);
            let a = alpha[i];
            dir.iter_mut().zip(s).for_each(|(d, sv)| *d += (a - b) * sv);
        }

        let mut slope = dot(&grad, &dir);
        if !(slope < 0.0) {
            history.clear();
            dir.iter_mut().zip(&grad).for_each(|(d, g)| *d = -g);
            slope = dot(&grad, &dir);
        }
        let initial = if history.is_empty() {
            (1.0 / dot(&grad, &grad).sqrt()).min(1.0)
        } else {
            1.0
        };

        let mut search = LineSearch {
            f: &mut f,
            x,
            dir: &dir,
            trial: vec![0.0; dim],
            grad: vec![0.0; dim],
            f0: value,
            slope0: slope,
            c1: params.c1,
            c2: params.c2,
        };
        let accepted = search.run(initial);
        let (new_x, new_grad, new_value) = match accepted {
            Some(p) => (search.trial, search.grad, p.value),
            None => match backtrack(&mut f, x, &grad, value, params.c1) {
                Some(found) => {
                    history.clear();
                    found
                }
                None => {
                    return LbfgsReport {
                        status: LbfgsStatus::LineSearchFailed,
                        iterations: iter,
                        value,
                        grad_inf_norm: inf_norm(&grad),
                        accepted_values,
                    }
                }
            },
        };

        let s: Vec<f64> = new_x.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == params.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        x.copy_from_slice(&new_x);
        grad = new_grad;
        value = new_value;
        accepted_values.push(value);
    }

    LbfgsReport {
        status: if converged(&grad, value) {
            LbfgsStatus::GradientTolerance
        } else {
            LbfgsStatus::MaxIterations
        },
        iterations: params.max_iters,
        value,
        grad_inf_norm: inf_norm(&grad),
        accepted_values,
    }
}

/// Armijo backtracking along the negative gradient.
fn backtrack<F>(
    f: &mut F,
    x: &[f64],
    grad: &[f64],
    value: f64,
    c1: f64,
) -> Option<(Vec<f64>, Vec<f64>, f64)>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let gg = dot(grad, grad);
    if gg == 0.0 {
        return None;
    }
    let mut step = 1.0 / gg.sqrt();
    let mut trial = vec![0.0; x.len()];
    let mut g = vec![0.0; x.len()];
    for _ in 0..60 {
        for ((t, xv), gv) in trial.iter_mut().zip(x).zip(grad) {
            *t = xv - step * gv;
        }
        let v = f(&trial, &mut g);
        if v.is_finite() && v <= value - c1 * step * gg && v < value {
            return Some((trial, g, v));
        }
        step *= 0.5;
    }
    None
}
