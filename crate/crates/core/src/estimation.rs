//! Multi-dataset parameter estimation by bounded least squares on relative
//! voltage errors, Gauss-Newton conditioning, and randomized restart studies.

use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::params::{PARAMETER_COUNT, SCALED_LOWER, SCALED_UPPER};
use crate::model::{CellModel, CurrentProfile, InputArray, ScaledParameterVector};
use crate::optim::bounded_lm::{self, LeastSquaresProblem, LmOptions, LmTermination};
use crate::{Error, Result};

/// Where a data set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Virtual,
    Measured,
}

/// Protocol phase of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prep,
    Rest,
    Impulse,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Prep => "prep",
            Phase::Rest => "rest",
            Phase::Impulse => "impulse",
        }
    }
}

impl std::str::FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "prep" | "preparation" => Ok(Phase::Prep),
            "rest" => Ok(Phase::Rest),
            "impulse" => Ok(Phase::Impulse),
            other => Err(format!("unknown phase label {other:?}")),
        }
    }
}

/// Voltage samples recorded while one current profile was applied from the
/// equilibrium at `v0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataBlock {
    pub label: String,
    pub profile: CurrentProfile,
    pub v0: f64,
    pub times: Vec<f64>,
    pub voltages: Vec<f64>,
    pub phases: Vec<Phase>,
    /// Recorded currents, kept for measured data so it can be written back
    /// unchanged. The model always uses `profile`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub currents: Option<Vec<f64>>,
}

impl DataBlock {
    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        let currents_ok = self.currents.as_ref().is_none_or(|c| c.len() == n);
        if n == 0 || self.voltages.len() != n || self.phases.len() != n || !currents_ok {
            return Err(Error::Data(format!(
                "block {}: times/voltages/phases must be non-empty and of equal length",
                self.label
            )));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data(format!(
                "block {}: times must increase strictly",
                self.label
            )));
        }
        for (k, (&t, &w)) in self.times.iter().zip(&self.voltages).enumerate() {
            if !t.is_finite() || !w.is_finite() {
                return Err(Error::NonFinite { what: "data sample" });
            }
            if w <= 0.0 {
                return Err(Error::Data(format!(
                    "block {}: sample {k} at t = {t} s has non-positive voltage {w}",
                    self.label
                )));
            }
        }
        if self.times[0] < 0.0 || self.times[n - 1] > self.profile.horizon() * (1.0 + 1e-12) {
            return Err(Error::Data(format!(
                "block {}: samples fall outside the profile horizon",
                self.label
            )));
        }
        Ok(())
    }

    /// Keep only samples whose phase is in `keep`.
    pub fn filtered(&self, keep: &[Phase]) -> DataBlock {
        let idx: Vec<usize> = (0..self.times.len())
            .filter(|&k| keep.contains(&self.phases[k]))
            .collect();
        DataBlock {
            label: self.label.clone(),
            profile: self.profile.clone(),
            v0: self.v0,
            times: idx.iter().map(|&k| self.times[k]).collect(),
            voltages: idx.iter().map(|&k| self.voltages[k]).collect(),
            phases: idx.iter().map(|&k| self.phases[k]).collect(),
            currents: self.currents.as_ref().map(|c| idx.iter().map(|&k| c[k]).collect()),
        }
    }
}

/// Stacked voltage data from several experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSet {
    pub provenance: Provenance,
    pub blocks: Vec<DataBlock>,
}

impl DataSet {
    pub fn new(provenance: Provenance, blocks: Vec<DataBlock>) -> Result<Self> {
        for b in &blocks {
            b.validate()?;
        }
        Ok(Self { provenance, blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.times.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total duration of all applied profiles.
    pub fn experiment_time(&self) -> f64 {
        self.blocks.iter().map(|b| b.profile.horizon()).sum()
    }

    pub fn subset(&self, blocks: &[usize]) -> DataSet {
        DataSet {
            provenance: self.provenance,
            blocks: blocks.iter().map(|&i| self.blocks[i].clone()).collect(),
        }
    }
}

/// Relative errors `(v - w) / w` of one block.
pub fn block_residuals(model: &CellModel, mu: &ScaledParameterVector, block: &DataBlock) -> Result<Vec<f64>> {
    let sim = model.simulate(mu, &block.profile, block.v0)?;
    let trace = &sim.trace;
    Ok(block
        .times
        .iter()
        .zip(&block.voltages)
        .map(|(&t, &w)| (trace.voltage_at(t) - w) / w)
        .collect())
}

/// Stacked relative errors over all blocks, evaluated in parallel.
pub fn residuals(model: &CellModel, mu: &ScaledParameterVector, data: &DataSet) -> Result<Vec<f64>> {
    let parts: Vec<Result<Vec<f64>>> = data.blocks.par_iter().map(|b| block_residuals(model, mu, b)).collect();
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `J = 1/2 ||e||^2`.
pub fn cost(residuals: &[f64]) -> f64 {
    0.5 * residuals.iter().map(|r| r * r).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationOptions {
    pub max_iterations: usize,
    pub ftol: f64,
    pub xtol: f64,
    pub jacobian_step: f64,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        let lm = LmOptions::default();
        Self {
            max_iterations: lm.max_iterations,
            ftol: lm.ftol,
            xtol: lm.xtol,
            jacobian_step: lm.jacobian_step,
        }
    }
}

impl EstimationOptions {
    fn lm(&self) -> LmOptions {
        LmOptions {
            max_iterations: self.max_iterations,
            ftol: self.ftol,
            xtol: self.xtol,
            jacobian_step: self.jacobian_step,
            ..LmOptions::default()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EstimationResult {
    pub mu: ScaledParameterVector,
    pub cost: f64,
    #[serde(skip)]
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub termination: LmTermination,
    pub wall_time_s: f64,
}

struct Problem<'a> {
    model: &'a CellModel,
    data: &'a DataSet,
}

impl LeastSquaresProblem for Problem<'_> {
    fn residuals(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mu = ScaledParameterVector::from_slice(x).ok()?;
        residuals(self.model, &mu, self.data).ok()
    }

    fn residuals_batch(&self, points: &[Vec<f64>]) -> Vec<Option<Vec<f64>>> {
        points
            .par_iter()
            .map(|p| LeastSquaresProblem::residuals(self, p))
            .collect()
    }
}

/// Bounded least-squares fit of `mu` to the stacked data.
pub fn estimate(
    model: &CellModel,
    mu_init: &ScaledParameterVector,
    data: &DataSet,
    options: &EstimationOptions,
) -> Result<EstimationResult> {
    mu_init.check_admissible()?;
    let start = Instant::now();
    let problem = Problem { model, data };
    let report = bounded_lm::minimize(
        &problem,
        mu_init.as_slice(),
        &SCALED_LOWER,
        &SCALED_UPPER,
        &options.lm(),
    );
    if report.termination == LmTermination::InvalidStart {
        // Surface the underlying simulation error.
        residuals(model, mu_init, data)?;
    }
    let mu = ScaledParameterVector::from_slice(&report.x)?.clamped();
    Ok(EstimationResult {
        mu,
        cost: report.cost,
        converged: report.converged(),
        residuals: report.residuals,
        iterations: report.iterations,
        termination: report.termination,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Forward-difference Jacobian of the stacked relative residuals
/// (`step` reflected at the upper bounds).
pub fn residual_jacobian(
    model: &CellModel,
    mu: &ScaledParameterVector,
    data: &DataSet,
    step: f64,
) -> Result<DMatrix<f64>> {
    let r = residuals(model, mu, data)?;
    let problem = Problem { model, data };
    Ok(bounded_lm::fd_jacobian(
        &problem,
        mu.as_slice(),
        &r,
        &SCALED_LOWER,
        &SCALED_UPPER,
        step,
    ))
}

/// Spectrum and condition number of a Gauss-Newton Hessian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    /// `lambda_max / lambda_min`; `None` when `lambda_min <= 0`.
    pub beta: Option<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
}

impl Conditioning {
    pub fn from_hessian(h: &DMatrix<f64>) -> Self {
        let sym = 0.5 * (h + h.transpose());
        let mut eigenvalues: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let max = eigenvalues.first().copied().unwrap_or(0.0);
        let min = eigenvalues.last().copied().unwrap_or(0.0);
        let beta = (min > max.abs() * f64::EPSILON * 1e-3 && min > 0.0).then(|| max / min);
        Self { beta, eigenvalues }
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }
}

/// `beta` of `G^T G`, `G` the FD Jacobian of the relative residuals at `mu`.
pub fn hessian_conditioning(
    model: &CellModel,
    mu: &ScaledParameterVector,
    data: &DataSet,
    step: f64,
) -> Result<Conditioning> {
    let g = residual_jacobian(model, mu, data, step)?;
    Ok(Conditioning::from_hessian(&(g.transpose() * &g)))
}

/// One restart of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRun {
    pub run: usize,
    pub start: ScaledParameterVector,
    pub mu: ScaledParameterVector,
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Set when the estimator returned an error for this start.
    pub error: Option<String>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Per-parameter histogram over the scaled box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub parameter: usize,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Study {
    pub seed: u64,
    pub runs: Vec<StudyRun>,
}

/// Number of histogram bins across each parameter's box.
pub const HISTOGRAM_BINS: usize = 40;

/// Uniform start for restart `run`: a ChaCha stream per run.
pub fn restart_start(seed: u64, run: usize) -> ScaledParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(run as u64);
    let mut mu = [0.0; PARAMETER_COUNT];
    for (j, m) in mu.iter_mut().enumerate() {
        *m = rng.random_range(SCALED_LOWER[j]..=SCALED_UPPER[j]);
    }
    ScaledParameterVector(mu)
}

/// `n_runs` estimations from uniform random starts in the box.
pub fn restart_study(
    model: &CellModel,
    data: &DataSet,
    n_runs: usize,
    seed: u64,
    options: &EstimationOptions,
) -> Study {
    let runs = (0..n_runs)
        .into_par_iter()
        .map(|run| {
            let start = restart_start(seed, run);
            match estimate(model, &start, data, options) {
                Ok(r) => StudyRun {
                    run,
                    start,
                    mu: r.mu,
                    cost: r.cost,
                    converged: r.converged,
                    iterations: r.iterations,
                    error: None,
                    wall_time_s: r.wall_time_s,
                },
                Err(e) => StudyRun {
                    run,
                    start,
                    mu: start,
                    cost: f64::INFINITY,
                    converged: false,
                    iterations: 0,
                    error: Some(e.to_string()),
                    wall_time_s: 0.0,
                },
            }
        })
        .collect();
    Study { seed, runs }
}

impl Study {
    /// Fraction of runs whose estimate is within `tol` relative error of `truth`.
    pub fn fraction_within(&self, truth: &ScaledParameterVector, tol: f64) -> f64 {
        if self.runs.is_empty() {
            return 0.0;
        }
        let hits = self
            .runs
            .iter()
            .filter(|r| r.error.is_none() && r.mu.relative_error(truth) <= tol)
            .count();
        hits as f64 / self.runs.len() as f64
    }

    pub fn mean_wall_time(&self) -> f64 {
        if self.runs.is_empty() {
            return 0.0;
        }
        self.runs.iter().map(|r| r.wall_time_s).sum::<f64>() / self.runs.len() as f64
    }

    /// Histograms of the estimates (all runs without an error).
    pub fn histograms(&self) -> Vec<Histogram> {
        (0..PARAMETER_COUNT)
            .map(|j| {
                let (lo, hi) = (SCALED_LOWER[j], SCALED_UPPER[j]);
                let width = (hi - lo) / HISTOGRAM_BINS as f64;
                let edges = (0..=HISTOGRAM_BINS).map(|b| lo + b as f64 * width).collect();
                let mut counts = vec![0; HISTOGRAM_BINS];
                for r in self.runs.iter().filter(|r| r.error.is_none()) {
                    let b = ((r.mu.0[j] - lo) / width).floor() as isize;
                    counts[b.clamp(0, HISTOGRAM_BINS as isize - 1) as usize] += 1;
                }
                Histogram {
                    parameter: j + 1,
                    edges,
                    counts,
                }
            })
            .collect()
    }

    /// Centroid of the largest cluster of converged estimates, clustering by
    /// rounding every component to `decimals` places. Ties go to the cluster
    /// with the lower cost.
    pub fn most_common_optimizer(&self, decimals: i32) -> Option<ScaledParameterVector> {
        use std::collections::BTreeMap;
        let scale = 10f64.powi(decimals);
        let mut clusters: BTreeMap<Vec<i64>, Vec<&StudyRun>> = BTreeMap::new();
        for r in self.runs.iter().filter(|r| r.converged && r.error.is_none()) {
            let key = r.mu.0.iter().map(|v| (v * scale).round() as i64).collect();
            clusters.entry(key).or_default().push(r);
        }
        let best = clusters.values().max_by(|a, b| {
            a.len().cmp(&b.len()).then_with(|| {
                let ca = a.iter().map(|r| r.cost).fold(f64::INFINITY, f64::min);
                let cb = b.iter().map(|r| r.cost).fold(f64::INFINITY, f64::min);
                cb.total_cmp(&ca)
            })
        })?;
        let mut centroid = [0.0; PARAMETER_COUNT];
        for r in best {
            for (c, v) in centroid.iter_mut().zip(&r.mu.0) {
                *c += v / best.len() as f64;
            }
        }
        Some(ScaledParameterVector(centroid))
    }

    /// CSV `run,converged,J,mu_1..mu_9`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["run".to_string(), "converged".into(), "J".into()];
        header.extend((1..=PARAMETER_COUNT).map(|j| format!("mu_{j}")));
        w.write_record(&header)?;
        for r in &self.runs {
            let mut row = vec![r.run.to_string(), r.converged.to_string(), format!("{:e}", r.cost)];
            row.extend(r.mu.0.iter().map(|v| format!("{v:.17e}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Noiseless virtual data for `inputs`, simulated at `truth`.
/// Every sample on the model grid is labelled as an impulse.
pub fn virtual_collection(model: &CellModel, truth: &ScaledParameterVector, inputs: &[InputArray]) -> Result<DataSet> {
    let blocks: Vec<Result<DataBlock>> = inputs
        .par_iter()
        .enumerate()
        .map(|(n, u)| {
            let profile = u.profile();
            let sim = model.simulate(truth, &profile, u.v0)?;
            let len = sim.trace.len();
            Ok(DataBlock {
                label: format!("input_{}", n + 1),
                profile,
                v0: u.v0,
                times: sim.trace.times,
                voltages: sim.trace.voltages,
                phases: vec![Phase::Impulse; len],
                currents: None,
            })
        })
        .collect();
    DataSet::new(Provenance::Virtual, blocks.into_iter().collect::<Result<_>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synthetic_truth;

    fn inputs(n: usize) -> Vec<InputArray> {
        (0..n)
            .map(|m| {
                let amps: Vec<f64> = (0..24)
                    .map(|k| {
                        if (k / (m + 1)) % 2 == 0 {
                            3.0 + m as f64 * 0.5
                        } else {
                            -4.0
                        }
                    })
                    .collect();
                InputArray::new(amps, 3.6 + 0.03 * m as f64, 60.0).unwrap()
            })
            .collect()
    }

    #[test]
    fn residuals_vanish_at_truth_and_scale() {
        let model = CellModel::default();
        let mu = synthetic_truth();
        let data = virtual_collection(&model, &mu, &inputs(10)).unwrap();
        assert_eq!(data.len(), 6010);
        let r = residuals(&model, &mu, &data).unwrap();
        assert!(r.iter().all(|&e| e == 0.0));

        let mut scaled = data.clone();
        for b in &mut scaled.blocks {
            for w in &mut b.voltages {
                *w /= 1.01;
            }
        }
        let r = residuals(&model, &mu, &scaled).unwrap();
        assert!(r.iter().all(|&e| (e - 0.01).abs() < 1e-12));
    }

    #[test]
    fn nonpositive_voltage_rejected() {
        let model = CellModel::default();
        let mut data = virtual_collection(&model, &synthetic_truth(), &inputs(1)).unwrap();
        data.blocks[0].voltages[17] = 0.0;
        let err = DataSet::new(Provenance::Measured, data.blocks).unwrap_err();
        assert!(err.to_string().contains("sample 17"), "{err}");
    }

    #[test]
    fn stacking_adds_costs() {
        let model = CellModel::default();
        let data = virtual_collection(&model, &synthetic_truth(), &inputs(3)).unwrap();
        let mu = synthetic_truth().with_component(0, 1.2);
        let total = cost(&residuals(&model, &mu, &data).unwrap());
        let parts: f64 = (0..3)
            .map(|i| cost(&residuals(&model, &mu, &data.subset(&[i])).unwrap()))
            .sum();
        assert!((total - parts).abs() <= 1e-14 * total);
    }

    #[test]
    fn truth_is_fixed_point() {
        let model = CellModel::default();
        let mu = synthetic_truth();
        let data = virtual_collection(&model, &mu, &inputs(2)).unwrap();
        let r = estimate(&model, &mu, &data, &EstimationOptions::default()).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.mu, mu);
    }

    #[test]
    fn resistance_is_recovered() {
        let model = CellModel::default();
        let mu = synthetic_truth();
        let data = virtual_collection(&model, &mu, &inputs(1)).unwrap();
        let start = mu.with_component(3, mu.0[3] + 0.01);
        let r = estimate(&model, &start, &data, &EstimationOptions::default()).unwrap();
        assert!((r.mu.0[3] - mu.0[3]).abs() < 1e-6, "{:?}", r);
        assert!(r.mu.is_admissible());
    }

    #[test]
    fn conditioning_seams() {
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0]));
        let c = Conditioning::from_hessian(&h);
        assert_eq!(c.beta, Some(4.0));
        assert_eq!(c.eigenvalues, vec![4.0, 1.0]);

        let g = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.1]);
        let mut p = g.clone();
        p.swap_rows(0, 2);
        let a = Conditioning::from_hessian(&(g.transpose() * &g)).beta.unwrap();
        let b = Conditioning::from_hessian(&(p.transpose() * &p)).beta.unwrap();
        assert!((a - b).abs() <= 1e-12 * a);

        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(Conditioning::from_hessian(&singular).beta, None);
    }

    #[test]
    fn restart_starts_are_deterministic_and_in_box() {
        for run in 0..200 {
            let a = restart_start(42, run);
            assert_eq!(a, restart_start(42, run));
            assert!(a.is_admissible());
        }
        assert_ne!(restart_start(42, 0), restart_start(42, 1));
        assert_ne!(restart_start(42, 0), restart_start(43, 0));
    }

    #[test]
    fn histogram_and_cluster_rule() {
        let truth = synthetic_truth();
        let mut near = truth;
        near.0[0] += 2e-4;
        let far = ScaledParameterVector::box_center();
        let mk = |run, mu, cost| StudyRun {
            run,
            start: mu,
            mu,
            cost,
            converged: true,
            iterations: 1,
            error: None,
            wall_time_s: 0.0,
        };
        let study = Study {
            seed: 0,
            runs: vec![mk(0, truth, 0.0), mk(1, near, 1e-9), mk(2, far, 1.0)],
        };
        let c = study.most_common_optimizer(3).unwrap();
        assert!((c.0[0] - (truth.0[0] + 1e-4)).abs() < 1e-12);
        assert!((study.fraction_within(&truth, 1e-2) - 2.0 / 3.0).abs() < 1e-15);
        let h = study.histograms();
        assert_eq!(h.len(), 9);
        assert!(h.iter().all(|h| h.counts.iter().sum::<usize>() == 3));
    }
}
