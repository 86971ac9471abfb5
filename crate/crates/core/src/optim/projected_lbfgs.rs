//! Box-constrained limited-memory quasi-Newton minimisation.
//!
//! Variables at a bound whose gradient points outward are held fixed; the
//! two-loop recursion runs on the remaining free set and a projected
//! backtracking line search keeps every iterate inside the box. Accepted
//! objective values never increase.

use std::collections::VecDeque;

/// Settings for [`minimize`].
#[derive(Clone, Debug, PartialEq)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Converged when the projected gradient's infinity norm drops below this.
    pub projected_gradient_tol: f64,
    /// Converged when `(f_prev - f) <= tol * max(|f_prev|, |f|, 1)`.
    pub relative_decrease_tol: f64,
    /// Forward-difference step for the gradient.
    pub gradient_step: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 200,
            projected_gradient_tol: 1e-6,
            relative_decrease_tol: 1e-10,
            gradient_step: 1e-4,
            armijo: 1e-4,
            max_backtracks: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    ProjectedGradient,
    RelativeDecrease,
    MaxIterations,
    /// No descent was found along either the quasi-Newton or the steepest
    /// descent direction.
    LineSearchFailed,
    /// The objective was not finite at the start point.
    InvalidStart,
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

impl LbfgsResult {
    pub fn converged(&self) -> bool {
        matches!(
            self.termination,
            Termination::ProjectedGradient | Termination::RelativeDecrease
        )
    }
}

fn project(x: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, &l), &u) in x.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(l, u);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Forward-difference gradient; steps that would leave the box go backward.
///
/// `f_batch` evaluates a batch of points, which lets the caller spread the
/// `n` evaluations over threads.
pub fn fd_gradient<B>(x: &[f64], fx: f64, lower: &[f64], upper: &[f64], h: f64, f_batch: &B) -> Vec<f64>
where
    B: Fn(&[Vec<f64>]) -> Vec<f64>,
{
    let mut steps = Vec::with_capacity(x.len());
    let points: Vec<Vec<f64>> = (0..x.len())
        .map(|j| {
            let mut p = x.to_vec();
            let step = if x[j] + h <= upper[j] { h } else { -h };
            let step = if x[j] + step < lower[j] { upper[j] - x[j] } else { step };
            p[j] += step;
            steps.push(p[j] - x[j]);
            p
        })
        .collect();
    let values = f_batch(&points);
    values
        .iter()
        .zip(&steps)
        .map(|(&v, &s)| if s == 0.0 { 0.0 } else { (v - fx) / s })
        .collect()
}

/// Minimise `f` over `lower <= x <= upper` starting from `x0` (projected).
/// `f_batch` must return one value per point, in order; non-finite values
/// are treated as infinitely bad.
pub fn minimize<B>(x0: &[f64], lower: &[f64], upper: &[f64], options: &LbfgsOptions, f_batch: B) -> LbfgsResult
where
    B: Fn(&[Vec<f64>]) -> Vec<f64>,
{
    let n = x0.len();
    let eval = |x: &[f64]| {
        let v = f_batch(&[x.to_vec()])[0];
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };
    let mut x = x0.to_vec();
    project(&mut x, lower, upper);
    let mut fx = eval(&x);
    let mut evaluations = 1;
    let initial_value = fx;
    if !fx.is_finite() {
        return LbfgsResult {
            x,
            value: fx,
            initial_value,
            iterations: 0,
            evaluations,
            termination: Termination::InvalidStart,
        };
    }

    let mut memory: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut g = fd_gradient(&x, fx, lower, upper, options.gradient_step, &f_batch);
    evaluations += n;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        // Projected gradient and the free set.
        let mut pg_norm = 0.0f64;
        let mut free = vec![true; n];
        for j in 0..n {
            let moved = (x[j] - g[j]).clamp(lower[j], upper[j]) - x[j];
            pg_norm = pg_norm.max(moved.abs());
            let at_lower = x[j] <= lower[j] && g[j] > 0.0;
            let at_upper = x[j] >= upper[j] && g[j] < 0.0;
            free[j] = !(at_lower || at_upper);
        }
        if pg_norm <= options.projected_gradient_tol {
            termination = Termination::ProjectedGradient;
            break;
        }
        iterations += 1;

        let gf: Vec<f64> = (0..n).map(|j| if free[j] { g[j] } else { 0.0 }).collect();
        let steepest: Vec<f64> = gf.iter().map(|v| -v).collect();
        let mut directions = Vec::with_capacity(2);
        if !memory.is_empty() {
            let d = two_loop(&gf, &memory, &free);
            if dot(&d, &gf) < 0.0 {
                directions.push(d);
            }
        }
        directions.push(steepest);

        let mut accepted = None;
        for dir in directions {
            // Unit quasi-Newton step; steepest descent starts at a unit move.
            let mut alpha = if memory.is_empty() {
                (1.0 / dot(&gf, &gf).sqrt().max(1e-12)).min(1.0)
            } else {
                1.0
            };
            for _ in 0..options.max_backtracks {
                let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
                project(&mut trial, lower, upper);
                let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                if step.iter().all(|s| *s == 0.0) {
                    break;
                }
                let decrease = dot(&g, &step);
                let ft = eval(&trial);
                evaluations += 1;
                if ft <= fx + options.armijo * decrease.min(0.0) && ft <= fx {
                    accepted = Some((trial, ft));
                    break;
                }
                alpha *= 0.5;
            }
            if accepted.is_some() {
                break;
            }
            memory.clear();
        }

        let Some((x_new, f_new)) = accepted else {
            termination = Termination::LineSearchFailed;
            break;
        };
        let g_new = fd_gradient(&x_new, f_new, lower, upper, options.gradient_step, &f_batch);
        evaluations += n;
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if memory.len() == options.memory {
                memory.pop_front();
            }
            memory.push_back((s, y, 1.0 / sy));
        }
        let f_prev = fx;
        x = x_new;
        fx = f_new;
        g = g_new;
        let scale = f_prev.abs().max(fx.abs()).max(1.0);
        if f_prev - fx <= options.relative_decrease_tol * scale {
            termination = Termination::RelativeDecrease;
            break;
        }
    }

    LbfgsResult {
        x,
        value: fx,
        initial_value,
        iterations,
        evaluations,
        termination,
    }
}

/// L-BFGS two-loop recursion restricted to the free variables.
fn two_loop(g: &[f64], memory: &VecDeque<(Vec<f64>, Vec<f64>, f64)>, free: &[bool]) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> { v.iter().zip(free).map(|(x, &f)| if f { *x } else { 0.0 }).collect() };
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(memory.len());
    for (s, y, rho) in memory.iter().rev() {
        let s = mask(s);
        let y = mask(y);
        let a = rho * dot(&s, &q);
        for (qi, yi) in q.iter_mut().zip(&y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = memory.back() {
        let (s, y) = (mask(s), mask(y));
        let yy = dot(&y, &y);
        let sy = dot(&s, &y);
        if yy > 0.0 && sy > 0.0 {
            let gamma = sy / yy;
            q.iter_mut().for_each(|v| *v *= gamma);
        }
    }
    for ((s, y, rho), a) in memory.iter().zip(alphas.iter().rev()) {
        let s = mask(s);
        let y = mask(y);
        let b = rho * dot(&y, &q);
        for (qi, si) in q.iter_mut().zip(&s) {
            *qi += (a - b) * si;
        }
    }
    q.iter().zip(free).map(|(v, &f)| if f { -v } else { 0.0 }).collect()
}
