//! Finite-difference output sensitivities, information matrices and the
//! D-optimal uncertainty functionals used by the design loop.

use std::path::Path;

use nalgebra::{DMatrix, SMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::params::{PARAMETER_COUNT, SCALED_UPPER};
use crate::model::{CellModel, InputArray, ScaledParameterVector, VoltageTrace};
use crate::{Error, Result};

/// Default forward-difference step on the scaled parameters.
pub const DEFAULT_PERTURBATION: f64 = 1e-3;

/// Default weight of the `||u||^2` regulariser in the design objective.
pub const DEFAULT_REGULARIZATION: f64 = 1e-4;

/// Finite stand-in for `-log det` of a singular matrix. Any regular 9x9
/// matrix with eigenvalues above `1e-300` scores below ~6300, so the
/// sentinel is ordered above every regular value.
pub const SINGULAR_SENTINEL: f64 = 1e6;

/// Eigenvalues at or below this count as zero in the D-criterion.
pub const EIGENVALUE_FLOOR: f64 = 1e-300;

type Matrix9 = SMatrix<f64, PARAMETER_COUNT, PARAMETER_COUNT>;

/// Signed perturbation per parameter: `+nu`, or `-nu` when the forward point
/// would leave the box.
pub fn perturbation_steps(mu: &ScaledParameterVector, nu: f64) -> [f64; PARAMETER_COUNT] {
    let mut steps = [nu; PARAMETER_COUNT];
    for (j, s) in steps.iter_mut().enumerate() {
        if mu.0[j] + nu > SCALED_UPPER[j] {
            *s = -nu;
        }
    }
    steps
}

/// Voltage sensitivities `s^j = (v(mu + nu e_j) - v(mu)) / nu` on the base
/// trace's time grid.
#[derive(Clone, Debug)]
pub struct SensitivityBundle {
    pub base: VoltageTrace,
    /// `(K + 1) x 9`, column `j` is `s^j`.
    pub matrix: DMatrix<f64>,
    /// Signed step used for each column; negative entries are backward
    /// differences taken at the upper bound.
    pub steps: [f64; PARAMETER_COUNT],
}

impl SensitivityBundle {
    pub fn times(&self) -> &[f64] {
        &self.base.times
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.matrix.column(j).iter().copied().collect()
    }

    pub fn is_backward(&self, j: usize) -> bool {
        self.steps[j] < 0.0
    }

    /// CSV with header `time_s,s_mu1,...,s_mu9`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["time_s".to_string()];
        header.extend((1..=PARAMETER_COUNT).map(|j| format!("s_mu{j}")));
        w.write_record(&header)?;
        for (k, t) in self.base.times.iter().enumerate() {
            let mut row = vec![format!("{t}")];
            row.extend((0..PARAMETER_COUNT).map(|j| format!("{:e}", self.matrix[(k, j)])));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Assemble a bundle from a simulator closure evaluated at the base point
/// and the nine perturbed points (in parallel).
pub fn sensitivities_with<F>(mu: &ScaledParameterVector, nu: f64, simulate: F) -> Result<SensitivityBundle>
where
    F: Fn(&ScaledParameterVector) -> Result<VoltageTrace> + Sync,
{
    let steps = perturbation_steps(mu, nu);
    let points: Vec<ScaledParameterVector> = std::iter::once(*mu)
        .chain((0..PARAMETER_COUNT).map(|j| mu.with_component(j, mu.0[j] + steps[j])))
        .collect();
    let traces: Vec<Result<VoltageTrace>> = points.par_iter().map(&simulate).collect();
    let mut traces = traces.into_iter();
    let base = traces.next().expect("base point")?;
    let rows = base.len();
    let mut matrix = DMatrix::zeros(rows, PARAMETER_COUNT);
    for (j, trace) in traces.enumerate() {
        let trace = trace.map_err(|e| Error::Perturbation {
            index: j + 1,
            source: Box::new(e),
        })?;
        if trace.len() != rows {
            return Err(Error::Data(format!(
                "perturbed trace {} has {} samples, base has {rows}",
                j + 1,
                trace.len()
            )));
        }
        let h = steps[j];
        for k in 0..rows {
            matrix[(k, j)] = (trace.voltages[k] - base.voltages[k]) / h;
        }
    }
    Ok(SensitivityBundle { base, matrix, steps })
}

/// Forward-difference sensitivities of the voltage for one input.
pub fn sensitivities(
    model: &CellModel,
    mu: &ScaledParameterVector,
    input: &InputArray,
    nu: f64,
) -> Result<SensitivityBundle> {
    mu.check_admissible()?;
    let profile = input.profile();
    sensitivities_with(mu, nu, |p| model.simulate(p, &profile, input.v0).map(|s| s.trace))
}

/// Central-difference sensitivities, for checking the forward differences.
/// Components within `nu` of a bound fall back to a one-sided difference.
pub fn central_sensitivities(
    model: &CellModel,
    mu: &ScaledParameterVector,
    input: &InputArray,
    nu: f64,
) -> Result<DMatrix<f64>> {
    use crate::model::params::SCALED_LOWER;
    let profile = input.profile();
    let run = |p: &ScaledParameterVector| model.simulate(p, &profile, input.v0).map(|s| s.trace.voltages);
    let columns: Vec<Result<Vec<f64>>> = (0..PARAMETER_COUNT)
        .into_par_iter()
        .map(|j| {
            let hi = (mu.0[j] + nu).min(SCALED_UPPER[j]);
            let lo = (mu.0[j] - nu).max(SCALED_LOWER[j]);
            let a = run(&mu.with_component(j, hi))?;
            let b = run(&mu.with_component(j, lo))?;
            Ok(a.iter().zip(&b).map(|(x, y)| (x - y) / (hi - lo)).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(PARAMETER_COUNT);
    for c in columns {
        out.push(c?);
    }
    let rows = out[0].len();
    Ok(DMatrix::from_fn(rows, PARAMETER_COUNT, |k, j| out[j][k]))
}

/// Trapezoidal quadrature weights on a (possibly non-uniform) grid.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    let mut w = vec![0.0; n];
    for k in 0..n.saturating_sub(1) {
        let h = 0.5 * (times[k + 1] - times[k]);
        w[k] += h;
        w[k + 1] += h;
    }
    w
}

/// Symmetric positive semidefinite 9x9 information matrix.
///
/// Matrices assembled from sensitivities also carry a square-root factor
/// `R` with `M = R^T R`. Single inputs routinely give `M` with a condition
/// number beyond `1/eps`, where the eigenvalues of the Gram matrix itself
/// are rounding noise; the spectrum is then taken from the singular values
/// of `R` instead. The factor is not serialised.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct InformationMatrix {
    matrix: Matrix9,
    root: Option<Matrix9>,
}

impl PartialEq for InformationMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.matrix == other.matrix
    }
}

impl Default for InformationMatrix {
    fn default() -> Self {
        Self::zeros()
    }
}

/// Upper-triangular `R` of a QR factorisation of `a`, padded to 9x9.
fn triangular_root(a: DMatrix<f64>) -> Matrix9 {
    let a = if a.nrows() < PARAMETER_COUNT {
        a.resize_vertically(PARAMETER_COUNT, 0.0)
    } else {
        a
    };
    let r = a.qr().r();
    Matrix9::from_fn(|i, j| r[(i, j)])
}

impl InformationMatrix {
    pub fn zeros() -> Self {
        Self {
            matrix: Matrix9::zeros(),
            root: Some(Matrix9::zeros()),
        }
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix9::identity(),
            root: Some(Matrix9::identity()),
        }
    }

    /// Symmetrises `m`; fails if it is far from symmetric or not finite.
    pub fn from_matrix(m: Matrix9) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "information matrix",
            });
        }
        let scale = m.abs().max().max(f64::MIN_POSITIVE);
        if (m - m.transpose()).abs().max() > 1e-12 * scale {
            return Err(Error::Data("information matrix is not symmetric".into()));
        }
        Ok(Self {
            matrix: 0.5 * (m + m.transpose()),
            root: None,
        })
    }

    /// Whether the accurate square-root factor is available.
    pub fn has_root(&self) -> bool {
        self.root.is_some()
    }

    pub fn from_rows(rows: &[[f64; PARAMETER_COUNT]; PARAMETER_COUNT]) -> Result<Self> {
        Self::from_matrix(Matrix9::from_fn(|i, j| rows[i][j]))
    }

    pub fn matrix(&self) -> &Matrix9 {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            matrix: self.matrix * factor,
            root: self.root.filter(|_| factor >= 0.0).map(|r| r * factor.sqrt()),
        }
    }

    /// Eigenvalues in descending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = match &self.root {
            Some(r) => r.singular_values().iter().map(|s| s * s).collect(),
            None => self.matrix.symmetric_eigenvalues().iter().copied().collect(),
        };
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    /// Symmetric to 1e-12 and smallest eigenvalue `>= -1e-10 * trace`.
    pub fn is_symmetric_psd(&self) -> bool {
        let scale = self.matrix.abs().max().max(f64::MIN_POSITIVE);
        let symmetric = (self.matrix - self.matrix.transpose()).abs().max() <= 1e-12 * scale;
        let min = self.eigenvalues().last().copied().unwrap_or(0.0);
        symmetric && min >= -1e-10 * self.trace().abs()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for i in 0..PARAMETER_COUNT {
            let row: Vec<String> = (0..PARAMETER_COUNT)
                .map(|j| format!("{:e}", self.matrix[(i, j)]))
                .collect();
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

impl std::ops::Add for InformationMatrix {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let root = match (self.root, rhs.root) {
            (Some(a), Some(b)) => {
                let stacked = DMatrix::from_fn(2 * PARAMETER_COUNT, PARAMETER_COUNT, |i, j| {
                    if i < PARAMETER_COUNT {
                        a[(i, j)]
                    } else {
                        b[(i - PARAMETER_COUNT, j)]
                    }
                });
                Some(triangular_root(stacked))
            }
            _ => None,
        };
        Self {
            matrix: self.matrix + rhs.matrix,
            root,
        }
    }
}

impl std::ops::AddAssign for InformationMatrix {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for InformationMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::zeros(), |a, b| a + b)
    }
}

impl From<InformationMatrix> for Vec<Vec<f64>> {
    fn from(m: InformationMatrix) -> Self {
        (0..PARAMETER_COUNT)
            .map(|i| (0..PARAMETER_COUNT).map(|j| m.matrix[(i, j)]).collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for InformationMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != PARAMETER_COUNT || rows.iter().any(|r| r.len() != PARAMETER_COUNT) {
            return Err(Error::Dimension {
                expected: PARAMETER_COUNT,
                got: rows.len(),
            });
        }
        Self::from_matrix(Matrix9::from_fn(|i, j| rows[i][j]))
    }
}

/// `sum_k w_k s_k s_k^T` over the rows of `s`.
pub fn weighted_gram(s: &DMatrix<f64>, weights: &[f64]) -> InformationMatrix {
    assert_eq!(s.ncols(), PARAMETER_COUNT);
    assert_eq!(s.nrows(), weights.len());
    let mut m = Matrix9::zeros();
    for (k, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = s.row(k);
        for i in 0..PARAMETER_COUNT {
            let wi = w * row[i];
            for j in i..PARAMETER_COUNT {
                m[(i, j)] += wi * row[j];
            }
        }
    }
    for i in 0..PARAMETER_COUNT {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
    // Negative weights have no real square root; fall back to the Gram form.
    let root = weights.iter().all(|&w| w >= 0.0).then(|| {
        let kept: Vec<usize> = (0..weights.len()).filter(|&k| weights[k] > 0.0).collect();
        triangular_root(DMatrix::from_fn(kept.len(), PARAMETER_COUNT, |r, j| {
            weights[kept[r]].sqrt() * s[(kept[r], j)]
        }))
    });
    InformationMatrix { matrix: m, root }
}

/// Trapezoidal `L2(0, t_f)` Gram matrix of the sensitivity columns.
pub fn information_matrix(bundle: &SensitivityBundle) -> InformationMatrix {
    weighted_gram(&bundle.matrix, &trapezoid_weights(bundle.times()))
}

/// `-ln det M` from the eigenvalues, or [`SINGULAR_SENTINEL`].
pub fn d_criterion(m: &InformationMatrix) -> f64 {
    let ev = m.eigenvalues();
    if ev.iter().any(|&l| l <= EIGENVALUE_FLOOR || !l.is_finite()) {
        return SINGULAR_SENTINEL;
    }
    -ev.iter().map(|l| l.ln()).sum::<f64>()
}

/// `-log10 det M`, or [`SINGULAR_SENTINEL`].
pub fn log10_uncertainty(m: &InformationMatrix) -> f64 {
    let phi = d_criterion(m);
    if phi >= SINGULAR_SENTINEL {
        SINGULAR_SENTINEL
    } else {
        phi / std::f64::consts::LN_10
    }
}

/// `Phi = -log10 det(prior + m) + gamma ||u||^2`, `u` including `v0`.
pub fn uncertainty(prior: &InformationMatrix, m: &InformationMatrix, u: &[f64], gamma: f64) -> f64 {
    let det_term = log10_uncertainty(&(*prior + *m));
    if det_term >= SINGULAR_SENTINEL {
        return SINGULAR_SENTINEL;
    }
    det_term + gamma * u.iter().map(|x| x * x).sum::<f64>()
}

/// `sum_prev 1 / (1 + 100 ||u - u_prev||_inf)`.
pub fn distance_penalty(u: &[f64], previous: &[Vec<f64>]) -> Result<f64> {
    let mut total = 0.0;
    for p in previous {
        if p.len() != u.len() {
            return Err(Error::Dimension {
                expected: u.len(),
                got: p.len(),
            });
        }
        let d = u.iter().zip(p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        total += 1.0 / (1.0 + 100.0 * d);
    }
    Ok(total)
}

/// The design objective `Phi` for a collection input, with its
/// information matrix.
pub fn design_objective(
    model: &CellModel,
    input: &InputArray,
    mu: &ScaledParameterVector,
    prior: &InformationMatrix,
    gamma: f64,
    nu: f64,
) -> Result<(f64, InformationMatrix)> {
    let bundle = sensitivities(model, mu, input, nu)?;
    let m = information_matrix(&bundle);
    Ok((uncertainty(prior, &m, &input.to_vector(), gamma), m))
}

/// `Phi_hat = Phi + distance_penalty`.
pub fn penalized_objective(
    model: &CellModel,
    input: &InputArray,
    mu: &ScaledParameterVector,
    prior: &InformationMatrix,
    previous: &[InputArray],
    gamma: f64,
    nu: f64,
) -> Result<f64> {
    let (phi, _) = design_objective(model, input, mu, prior, gamma, nu)?;
    let prev: Vec<Vec<f64>> = previous.iter().map(|p| p.to_vector()).collect();
    Ok(phi + distance_penalty(&input.to_vector(), &prev)?)
}
