//! Bound-constrained Levenberg-Marquardt for `min 1/2 ||r(x)||^2`.
//!
//! The damping parameter plays the role of an inverse trust-region radius
//! (Nielsen's update). Variables sitting on a bound with the gradient
//! pointing out of the box are frozen for the step; trial points are
//! projected onto the box, so every iterate is feasible.

use nalgebra::{DMatrix, DVector};

/// Residual function with an optional batched form for Jacobian columns.
pub trait LeastSquaresProblem {
    /// `None` when the model cannot be evaluated at `x`.
    fn residuals(&self, x: &[f64]) -> Option<Vec<f64>>;

    fn residuals_batch(&self, points: &[Vec<f64>]) -> Vec<Option<Vec<f64>>> {
        points.iter().map(|p| self.residuals(p)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step lowers the cost by less than `ftol * cost`.
    pub ftol: f64,
    /// Stop when `||step|| <= xtol * (||x|| + xtol)`.
    pub xtol: f64,
    /// Stop when the projected gradient's infinity norm is below this.
    pub gtol: f64,
    /// Forward-difference step for Jacobian columns.
    pub jacobian_step: f64,
    pub initial_damping: f64,
    /// Add the second-order (geodesic) correction to each step.
    pub geodesic_acceleration: bool,
    /// Accept the correction only while `2 |a| / |v|` stays below this.
    pub acceleration_ratio: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            max_iterations: 300,
            ftol: 1e-12,
            xtol: 1e-10,
            gtol: 1e-15,
            jacobian_step: 1e-6,
            initial_damping: 1e-3,
            geodesic_acceleration: true,
            acceleration_ratio: 0.75,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmTermination {
    CostDecrease,
    SmallStep,
    ProjectedGradient,
    ZeroCost,
    MaxIterations,
    /// Damping grew without finding a decrease.
    Stalled,
    /// The residuals could not be evaluated at the start point.
    InvalidStart,
}

#[derive(Clone, Debug)]
pub struct LmReport {
    pub x: Vec<f64>,
    pub cost: f64,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: LmTermination,
}

impl LmReport {
    pub fn converged(&self) -> bool {
        !matches!(
            self.termination,
            LmTermination::MaxIterations | LmTermination::Stalled | LmTermination::InvalidStart
        )
    }
}

fn cost(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Forward-difference Jacobian. Columns step backward when the forward
/// point would leave the box; a column whose both points fail stays zero.
pub fn fd_jacobian<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    r: &[f64],
    lower: &[f64],
    upper: &[f64],
    h: f64,
) -> DMatrix<f64> {
    let n = x.len();
    let m = r.len();
    let scaled = |j: usize| h * x[j].abs().max(1.0);
    let mut steps = Vec::with_capacity(n);
    let points: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let hj = scaled(j);
            let s = if x[j] + hj <= upper[j] { hj } else { -hj };
            let mut p = x.to_vec();
            p[j] = (x[j] + s).clamp(lower[j], upper[j]);
            steps.push(p[j] - x[j]);
            p
        })
        .collect();
    let values = problem.residuals_batch(&points);
    let mut jac = DMatrix::zeros(m, n);
    for (j, (val, &s)) in values.into_iter().zip(&steps).enumerate() {
        let column = match val {
            Some(v) => Some((v, s)),
            None => {
                // Retry on the other side.
                let mut p = x.to_vec();
                p[j] = (x[j] - s).clamp(lower[j], upper[j]);
                let s2 = p[j] - x[j];
                problem.residuals(&p).map(|v| (v, s2))
            }
        };
        if let Some((v, s)) = column {
            if s != 0.0 && v.len() == m {
                for i in 0..m {
                    jac[(i, j)] = (v[i] - r[i]) / s;
                }
            }
        }
    }
    jac
}

/// Minimise `1/2 ||r(x)||^2` subject to `lower <= x <= upper`.
pub fn minimize<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    options: &LmOptions,
) -> LmReport {
    let n = x0.len();
    let mut x: Vec<f64> = x0
        .iter()
        .zip(lower.iter().zip(upper))
        .map(|(v, (l, u))| v.clamp(*l, *u))
        .collect();
    let mut evaluations = 1;
    let Some(mut r) = problem.residuals(&x) else {
        return LmReport {
            x,
            cost: f64::INFINITY,
            residuals: Vec::new(),
            iterations: 0,
            evaluations,
            termination: LmTermination::InvalidStart,
        };
    };
    let mut f = cost(&r);
    if f == 0.0 {
        return LmReport {
            x,
            cost: f,
            residuals: r,
            iterations: 0,
            evaluations,
            termination: LmTermination::ZeroCost,
        };
    }

    let mut jac = fd_jacobian(problem, &x, &r, lower, upper, options.jacobian_step);
    evaluations += n;
    let mut damping: Option<f64> = None;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut termination = LmTermination::MaxIterations;

    while iterations < options.max_iterations {
        let jtj = jac.transpose() * &jac;
        let grad = jac.transpose() * DVector::from_column_slice(&r);

        let mut pg = 0.0f64;
        let mut free = Vec::with_capacity(n);
        for j in 0..n {
            let moved = (x[j] - grad[j]).clamp(lower[j], upper[j]) - x[j];
            pg = pg.max(moved.abs());
            let blocked = (x[j] <= lower[j] && grad[j] > 0.0) || (x[j] >= upper[j] && grad[j] < 0.0);
            if !blocked {
                free.push(j);
            }
        }
        if pg <= options.gtol || free.is_empty() {
            termination = LmTermination::ProjectedGradient;
            break;
        }

        let max_diag = (0..n).map(|j| jtj[(j, j)]).fold(0.0f64, f64::max).max(1e-300);
        let lambda = *damping.get_or_insert(options.initial_damping * max_diag);
        iterations += 1;

        let nf = free.len();
        let mut a = DMatrix::zeros(nf, nf);
        let mut b = DVector::zeros(nf);
        for (p, &i) in free.iter().enumerate() {
            b[p] = -grad[i];
            for (q, &j) in free.iter().enumerate() {
                a[(p, q)] = jtj[(i, j)];
            }
            let d = jtj[(i, i)].max(1e-12 * max_diag);
            a[(p, p)] += lambda * d;
        }
        let chol = a.clone().cholesky();
        let lu = if chol.is_none() { Some(a.lu()) } else { None };
        let solve = |rhs: &DVector<f64>| match (&chol, &lu) {
            (Some(c), _) => Some(c.solve(rhs)),
            (None, Some(l)) => l.solve(rhs),
            _ => None,
        };
        let Some(velocity) = solve(&b) else {
            damping = Some(lambda * nu);
            nu *= 2.0;
            continue;
        };
        let mut delta = velocity.clone();
        if options.geodesic_acceleration {
            // Second directional derivative of r along the velocity by a
            // finite difference; the acceleration bends the step along the
            // valley (Transtrum & Sethna).
            let h = 0.1;
            let mut probe = x.clone();
            let mut inside = true;
            for (p, &j) in free.iter().enumerate() {
                probe[j] = x[j] + h * velocity[p];
                inside &= probe[j] >= lower[j] && probe[j] <= upper[j];
            }
            if inside {
                evaluations += 1;
                if let Some(rp) = problem.residuals(&probe) {
                    let mut jv = DVector::zeros(r.len());
                    for (p, &j) in free.iter().enumerate() {
                        jv.axpy(velocity[p], &jac.column(j), 1.0);
                    }
                    let rpp = (DVector::from_column_slice(&rp) - DVector::from_column_slice(&r)) * (2.0 / (h * h))
                        - jv * (2.0 / h);
                    let rhs = DVector::from_iterator(nf, free.iter().map(|&j| -jac.column(j).dot(&rpp)));
                    if let Some(acc) = solve(&rhs) {
                        if 2.0 * acc.norm() <= options.acceleration_ratio * velocity.norm() {
                            delta += acc * 0.5;
                        }
                    }
                }
            }
        }

        let mut trial = x.clone();
        for (p, &j) in free.iter().enumerate() {
            trial[j] = (x[j] + delta[p]).clamp(lower[j], upper[j]);
        }
        let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let step_norm = step.iter().map(|s| s * s).sum::<f64>().sqrt();
        let x_norm = x.iter().map(|s| s * s).sum::<f64>().sqrt();
        if step_norm <= options.xtol * (x_norm + options.xtol) {
            termination = LmTermination::SmallStep;
            break;
        }

        let s_vec = DVector::from_column_slice(&step);
        let predicted = -(grad.dot(&s_vec) + 0.5 * s_vec.dot(&(&jtj * &s_vec)));
        evaluations += 1;
        let trial_r = problem.residuals(&trial);
        let trial_f = trial_r.as_deref().map(cost).unwrap_or(f64::INFINITY);

        if trial_f < f {
            let ratio = if predicted > 0.0 {
                (f - trial_f) / predicted
            } else {
                0.0
            };
            let factor = (1.0 - (2.0 * ratio - 1.0).powi(3)).max(1.0 / 3.0);
            damping = Some(lambda * factor);
            nu = 2.0;
            let decrease = f - trial_f;
            x = trial;
            r = trial_r.expect("finite cost implies residuals");
            f = trial_f;
            if f == 0.0 {
                termination = LmTermination::ZeroCost;
                break;
            }
            if decrease < options.ftol * (f + decrease) {
                termination = LmTermination::CostDecrease;
                break;
            }
            jac = fd_jacobian(problem, &x, &r, lower, upper, options.jacobian_step);
            evaluations += n;
        } else {
            damping = Some(lambda * nu);
            nu *= 2.0;
            if lambda > 1e20 * max_diag {
                termination = LmTermination::Stalled;
                break;
            }
        }
    }

    LmReport {
        x,
        cost: f,
        residuals: r,
        iterations,
        evaluations,
        termination,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Exp {
        t: Vec<f64>,
        y: Vec<f64>,
    }

    impl LeastSquaresProblem for Exp {
        fn residuals(&self, x: &[f64]) -> Option<Vec<f64>> {
            Some(
                self.t
                    .iter()
                    .zip(&self.y)
                    .map(|(t, y)| x[0] * (-x[1] * t).exp() + x[2] - y)
                    .collect(),
            )
        }
    }

    fn exp_problem(a: f64, k: f64, c: f64) -> Exp {
        let t: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let y = t.iter().map(|t| a * (-k * t).exp() + c).collect();
        Exp { t, y }
    }

    #[test]
    fn recovers_exponential_decay() {
        let p = exp_problem(2.0, 0.7, 0.3);
        let r = minimize(
            &p,
            &[1.0, 0.2, 0.0],
            &[0.0, 0.0, -1.0],
            &[5.0, 5.0, 1.0],
            &LmOptions::default(),
        );
        assert!(r.converged(), "{r:?}");
        assert!((r.x[0] - 2.0).abs() < 1e-6);
        assert!((r.x[1] - 0.7).abs() < 1e-6);
        assert!((r.x[2] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn respects_bounds() {
        // Truth outside the box: the decay rate is pinned at its upper bound.
        let p = exp_problem(2.0, 0.7, 0.3);
        let r = minimize(
            &p,
            &[1.0, 0.2, 0.0],
            &[0.0, 0.0, -1.0],
            &[5.0, 0.5, 1.0],
            &LmOptions::default(),
        );
        assert!(r.x[1] <= 0.5);
        assert!((r.x[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn zero_cost_start_is_fixed_point() {
        let p = exp_problem(2.0, 0.7, 0.3);
        let r = minimize(&p, &[2.0, 0.7, 0.3], &[0.0; 3], &[5.0; 3], &LmOptions::default());
        assert_eq!(r.termination, LmTermination::ZeroCost);
        assert_eq!(r.x, vec![2.0, 0.7, 0.3]);
    }

    struct Failing;
    impl LeastSquaresProblem for Failing {
        fn residuals(&self, x: &[f64]) -> Option<Vec<f64>> {
            // Undefined right of 1; the minimum of (x-2)^2 is outside.
            (x[0] <= 1.0).then(|| vec![x[0] - 2.0])
        }
    }

    #[test]
    fn failed_evaluations_shrink_the_step() {
        let r = minimize(&Failing, &[0.0], &[-5.0], &[5.0], &LmOptions::default());
        assert!(r.x[0] <= 1.0);
        assert!(r.cost.is_finite());
    }
}
