//! Adaptive optimal input design.
//!
//! Each iteration designs a new input at the current parameter estimate,
//! acquires data for it and re-estimates the parameters on everything
//! collected so far. Two frameworks are supported:
//!
//! * **collection** — independent short inputs `[u_1..u_nu, v0]`, each
//!   applied from its own equilibrium. The first input is a fixed
//!   alternating `-1, +1, ...` profile.
//! * **concatenated** — one long experiment from a fixed initial voltage,
//!   grown segment by segment. A segment is `nu` equal steps followed by a
//!   rest phase; earlier segments stay frozen and the objective is evaluated
//!   on the whole concatenated profile.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimation::{estimate, hessian_conditioning, DataBlock, DataSet, EstimationOptions, Phase, Provenance};
use crate::model::profile::{CURRENT_BOUND, VOLTAGE_BOUNDS};
use crate::model::{CellModel, CurrentProfile, InputArray, ScaledParameterVector};
use crate::optim::projected_lbfgs::{self, LbfgsOptions, Termination};
use crate::sensitivity::{
    distance_penalty, information_matrix, log10_uncertainty, sensitivities, sensitivities_with, trapezoid_weights,
    uncertainty, weighted_gram, InformationMatrix, SINGULAR_SENTINEL,
};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    Collection,
    #[serde(alias = "concat")]
    Concatenated,
}

impl std::str::FromStr for Framework {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "collection" => Ok(Framework::Collection),
            "concat" | "concatenated" => Ok(Framework::Concatenated),
            other => Err(Error::Config(format!("unknown framework {other:?}"))),
        }
    }
}

/// Settings of the bound-constrained design optimiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub projected_gradient_tol: f64,
    pub relative_decrease_tol: f64,
    pub gradient_step: f64,
    pub memory: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let o = LbfgsOptions::default();
        Self {
            max_iterations: o.max_iterations,
            projected_gradient_tol: o.projected_gradient_tol,
            relative_decrease_tol: o.relative_decrease_tol,
            gradient_step: o.gradient_step,
            memory: o.memory,
        }
    }
}

impl OptimizerConfig {
    fn lbfgs(&self) -> LbfgsOptions {
        LbfgsOptions {
            memory: self.memory,
            max_iterations: self.max_iterations,
            projected_gradient_tol: self.projected_gradient_tol,
            relative_decrease_tol: self.relative_decrease_tol,
            gradient_step: self.gradient_step,
            ..LbfgsOptions::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    pub framework: Framework,
    /// Design steps per input (collection) or per segment (concatenated).
    pub steps: usize,
    /// Duration of the stepped part of an input or segment, s.
    pub horizon: f64,
    /// Rest appended to every concatenated segment, s.
    pub rest: f64,
    /// Maximum number of inputs, or the number of segments.
    pub max_inputs: usize,
    /// L2 distance below which a new input counts as a repeat.
    pub tolerance: f64,
    /// Weight of `||u||^2` in the objective.
    pub gamma: f64,
    /// Finite-difference step for the sensitivities.
    pub perturbation: f64,
    /// `v0` of the first collection input; the fixed `v0` of a
    /// concatenated experiment.
    pub initial_voltage: f64,
    /// Magnitude of the alternating start amplitudes.
    pub initial_amplitude: f64,
    pub current_bound: f64,
    pub voltage_bounds: (f64, f64),
    pub optimizer: OptimizerConfig,
    pub estimation: EstimationOptions,
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self::collection()
    }
}

impl DesignConfig {
    pub fn collection() -> Self {
        Self {
            framework: Framework::Collection,
            steps: 24,
            horizon: 60.0,
            rest: 0.0,
            max_inputs: 10,
            tolerance: 0.1,
            gamma: crate::sensitivity::DEFAULT_REGULARIZATION,
            perturbation: crate::sensitivity::DEFAULT_PERTURBATION,
            initial_voltage: 3.7,
            initial_amplitude: 1.0,
            current_bound: CURRENT_BOUND,
            voltage_bounds: VOLTAGE_BOUNDS,
            optimizer: OptimizerConfig::default(),
            estimation: EstimationOptions::default(),
        }
    }

    pub fn concatenated() -> Self {
        Self {
            framework: Framework::Concatenated,
            steps: 6,
            horizon: 120.0,
            rest: 600.0,
            max_inputs: 9,
            initial_voltage: 3.9,
            ..Self::collection()
        }
    }

    pub fn for_framework(framework: Framework) -> Self {
        match framework {
            Framework::Collection => Self::collection(),
            Framework::Concatenated => Self::concatenated(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.steps == 0 {
            return bad("design.steps must be at least 1");
        }
        if !(self.horizon > 0.0) || !(self.rest >= 0.0) {
            return bad("design.horizon must be positive and design.rest non-negative");
        }
        if self.max_inputs == 0 {
            return bad("design.max_inputs must be at least 1");
        }
        if !(self.current_bound > 0.0) || !(self.voltage_bounds.0 < self.voltage_bounds.1) {
            return bad("design bounds must be ordered");
        }
        if !(self.tolerance >= 0.0 && self.gamma >= 0.0 && self.perturbation > 0.0) {
            return bad("design.tolerance/gamma must be non-negative and perturbation positive");
        }
        let (lo, hi) = self.voltage_bounds;
        if !(lo..=hi).contains(&self.initial_voltage) {
            return bad("design.initial_voltage outside voltage_bounds");
        }
        if self.initial_amplitude.abs() > self.current_bound {
            return bad("design.initial_amplitude exceeds current_bound");
        }
        Ok(())
    }

    /// Length of one segment (stepped part plus rest).
    pub fn segment_duration(&self) -> f64 {
        self.horizon + self.rest
    }

    /// Total experiment time when every input/segment is used.
    pub fn full_experiment_time(&self) -> f64 {
        self.max_inputs as f64 * self.segment_duration()
    }

    fn lower(&self) -> Vec<f64> {
        let mut v = vec![-self.current_bound; self.steps];
        if self.framework == Framework::Collection {
            v.push(self.voltage_bounds.0);
        }
        v
    }

    fn upper(&self) -> Vec<f64> {
        let mut v = vec![self.current_bound; self.steps];
        if self.framework == Framework::Collection {
            v.push(self.voltage_bounds.1);
        }
        v
    }

    /// Alternating start amplitudes `-a, +a, ...`.
    pub fn alternating_amplitudes(&self) -> Vec<f64> {
        (0..self.steps)
            .map(|j| {
                if j % 2 == 0 {
                    -self.initial_amplitude
                } else {
                    self.initial_amplitude
                }
            })
            .collect()
    }

    /// Profile of one concatenated segment.
    pub fn segment_profile(&self, amplitudes: &[f64]) -> Result<CurrentProfile> {
        let active = CurrentProfile::uniform(amplitudes, self.horizon)?;
        if self.rest > 0.0 {
            Ok(active.concatenate(&CurrentProfile::rest(self.rest)?))
        } else {
            Ok(active)
        }
    }

    /// Concatenation of `segments` in order.
    pub fn concatenated_profile(&self, segments: &[Vec<f64>]) -> Result<CurrentProfile> {
        let mut iter = segments.iter();
        let first = iter.next().ok_or_else(|| Error::Profile("no segments".into()))?;
        let mut profile = self.segment_profile(first)?;
        for s in iter {
            profile = profile.concatenate(&self.segment_profile(s)?);
        }
        Ok(profile)
    }
}

/// Supplies measured or simulated voltages for a designed experiment.
pub trait DataSource {
    /// Data recorded while `profile` is applied from the equilibrium at `v0`.
    /// `index` counts acquisitions from 1.
    fn acquire(&mut self, index: usize, profile: &CurrentProfile, v0: f64) -> Result<DataBlock>;

    fn provenance(&self) -> Provenance;

    /// The hidden parameter, for error reporting only.
    fn truth(&self) -> Option<ScaledParameterVector> {
        None
    }
}

/// Simulated data at a hidden parameter, optionally with additive Gaussian
/// noise (a separate ChaCha stream per acquisition).
#[derive(Clone, Debug)]
pub struct VirtualSource {
    pub model: CellModel,
    pub truth: ScaledParameterVector,
    /// Noise standard deviation in volts; zero gives the exact model output.
    pub noise: f64,
    pub seed: u64,
}

impl VirtualSource {
    pub fn new(model: CellModel, truth: ScaledParameterVector) -> Self {
        Self {
            model,
            truth,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl DataSource for VirtualSource {
    fn acquire(&mut self, index: usize, profile: &CurrentProfile, v0: f64) -> Result<DataBlock> {
        let sim = self.model.simulate(&self.truth, profile, v0)?;
        let mut voltages = sim.trace.voltages;
        if self.noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(index as u64);
            let normal = Normal::new(0.0, self.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
            for v in &mut voltages {
                *v += normal.sample(&mut rng);
            }
        }
        let n = voltages.len();
        let block = DataBlock {
            label: format!("input_{index}"),
            profile: profile.clone(),
            v0,
            times: sim.trace.times,
            voltages,
            // The whole designed profile is the impulse phase.
            phases: vec![Phase::Impulse; n],
            currents: None,
        };
        block.validate()?;
        Ok(block)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Virtual
    }

    fn truth(&self) -> Option<ScaledParameterVector> {
        Some(self.truth)
    }
}

/// True iff some previous input lies within `tolerance` of `candidate` in
/// `L2(0, t_f)`; never true for an empty history.
pub fn stopping_criterion(candidate: &CurrentProfile, previous: &[CurrentProfile], tolerance: f64) -> Result<bool> {
    Ok(min_distance(candidate, previous)?.is_some_and(|d| d < tolerance))
}

/// Smallest `L2` distance to the history, `None` if it is empty.
pub fn min_distance(candidate: &CurrentProfile, previous: &[CurrentProfile]) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    for p in previous {
        let d = candidate.l2_distance(p)?;
        best = Some(best.map_or(d, |b: f64| b.min(d)));
    }
    Ok(best)
}

/// `-log10 det` of the summed information of `inputs` at `mu`.
pub fn accumulated_uncertainty(
    model: &CellModel,
    mu: &ScaledParameterVector,
    inputs: &[InputArray],
    nu: f64,
) -> Result<f64> {
    let total = prior_information(model, mu, inputs, nu)?;
    Ok(log10_uncertainty(&total))
}

/// `sum_m M_mu^{u[m]}`.
pub fn prior_information(
    model: &CellModel,
    mu: &ScaledParameterVector,
    inputs: &[InputArray],
    nu: f64,
) -> Result<InformationMatrix> {
    let mats: Vec<Result<InformationMatrix>> = inputs
        .par_iter()
        .map(|u| sensitivities(model, mu, u, nu).map(|b| information_matrix(&b)))
        .collect();
    mats.into_iter().sum::<Result<InformationMatrix>>()
}

/// Outcome of one design optimisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignStep {
    /// Decision vector: amplitudes, plus `v0` in the collection framework.
    pub design: Vec<f64>,
    /// `Phi_hat` at the start and at the returned point.
    pub start_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    pub termination: String,
    /// Set when the optimiser stopped without meeting its tolerances.
    pub warning: Option<String>,
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::ProjectedGradient => "projected_gradient",
        Termination::RelativeDecrease => "relative_decrease",
        Termination::MaxIterations => "max_iterations",
        Termination::LineSearchFailed => "line_search_failed",
        Termination::InvalidStart => "invalid_start",
    }
}

fn run_optimizer<F>(start: &[f64], config: &DesignConfig, objective: F) -> DesignStep
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let lower = config.lower();
    let upper = config.upper();
    let batch = |points: &[Vec<f64>]| -> Vec<f64> { points.par_iter().map(|p| objective(p)).collect() };
    let result = projected_lbfgs::minimize(start, &lower, &upper, &config.optimizer.lbfgs(), batch);
    let warning = (!result.converged()).then(|| {
        format!(
            "design optimiser stopped by {} after {} iterations",
            termination_name(result.termination),
            result.iterations
        )
    });
    DesignStep {
        design: result.x,
        start_objective: result.initial_value,
        objective: result.value,
        iterations: result.iterations,
        termination: termination_name(result.termination).to_string(),
        warning,
    }
}

/// Design one collection input: a local minimiser of `Phi_hat` over the box,
/// started from `start`.
pub fn design_step(
    model: &CellModel,
    mu: &ScaledParameterVector,
    prior: &InformationMatrix,
    previous: &[InputArray],
    start: &InputArray,
    config: &DesignConfig,
) -> Result<DesignStep> {
    mu.check_admissible()?;
    let prev: Vec<Vec<f64>> = previous.iter().map(|p| p.to_vector()).collect();
    let objective = |x: &[f64]| -> f64 {
        let eval = || -> Result<f64> {
            let input = InputArray::from_vector(x, config.horizon)?;
            let bundle = sensitivities(model, mu, &input, config.perturbation)?;
            let m = information_matrix(&bundle);
            Ok(uncertainty(prior, &m, x, config.gamma) + distance_penalty(x, &prev)?)
        };
        eval().unwrap_or(SINGULAR_SENTINEL)
    };
    let mut start = start.to_vector();
    if start.len() != config.steps + 1 {
        return Err(Error::Dimension {
            expected: config.steps + 1,
            got: start.len(),
        });
    }
    for (x, (l, u)) in start.iter_mut().zip(config.lower().into_iter().zip(config.upper())) {
        *x = x.clamp(l, u);
    }
    Ok(run_optimizer(&start, config, objective))
}

/// Cached prefix information for concatenated designs: the trapezoid sum
/// over the prefix grid without its last node, which belongs to the next
/// segment's window.
struct PrefixInformation {
    matrix: InformationMatrix,
    start: f64,
}

fn prefix_information(
    model: &CellModel,
    mu: &ScaledParameterVector,
    prefix: Option<&CurrentProfile>,
    v0: f64,
    nu: f64,
) -> Result<PrefixInformation> {
    let Some(prefix) = prefix else {
        return Ok(PrefixInformation {
            matrix: InformationMatrix::zeros(),
            start: 0.0,
        });
    };
    let bundle = sensitivities_with(mu, nu, |p| model.simulate(p, prefix, v0).map(|s| s.trace))?;
    let times = bundle.times();
    let mut w = trapezoid_weights(times);
    let n = w.len();
    // Drop the closing half-weight; the window adds that node back with
    // its interior weight.
    w[n - 1] = 0.0;
    Ok(PrefixInformation {
        matrix: weighted_gram(&bundle.matrix, &w),
        start: times[n - 1],
    })
}

/// Information of the whole concatenated profile, reusing the prefix sum.
fn concatenated_information(
    model: &CellModel,
    mu: &ScaledParameterVector,
    profile: &CurrentProfile,
    v0: f64,
    prefix: &PrefixInformation,
    nu: f64,
) -> Result<InformationMatrix> {
    let bundle = sensitivities_with(mu, nu, |p| {
        model.simulate_window(p, profile, v0, prefix.start).map(|s| s.trace)
    })?;
    let times = bundle.times();
    let mut w = trapezoid_weights(times);
    if prefix.start > 0.0 && times.len() > 1 {
        // The first window node is interior in the full grid.
        w[0] += 0.5 * (times[1] - times[0]);
    }
    Ok(prefix.matrix + weighted_gram(&bundle.matrix, &w))
}

/// Design the next concatenated segment with `frozen` segments in front.
pub fn design_segment(
    model: &CellModel,
    mu: &ScaledParameterVector,
    frozen: &[Vec<f64>],
    start: &[f64],
    config: &DesignConfig,
) -> Result<(DesignStep, InformationMatrix)> {
    mu.check_admissible()?;
    let v0 = config.initial_voltage;
    let prefix_profile = if frozen.is_empty() {
        None
    } else {
        Some(config.concatenated_profile(frozen)?)
    };
    let prefix = prefix_information(model, mu, prefix_profile.as_ref(), v0, config.perturbation)?;
    let build = |x: &[f64]| -> Result<CurrentProfile> {
        let seg = config.segment_profile(x)?;
        Ok(match &prefix_profile {
            Some(p) => p.concatenate(&seg),
            None => seg,
        })
    };
    let objective = |x: &[f64]| -> f64 {
        let eval = || -> Result<f64> {
            let m = concatenated_information(model, mu, &build(x)?, v0, &prefix, config.perturbation)?;
            Ok(uncertainty(&InformationMatrix::zeros(), &m, x, config.gamma) + distance_penalty(x, frozen)?)
        };
        eval().unwrap_or(SINGULAR_SENTINEL)
    };
    if start.len() != config.steps {
        return Err(Error::Dimension {
            expected: config.steps,
            got: start.len(),
        });
    }
    let step = run_optimizer(start, config, objective);
    let info = concatenated_information(model, mu, &build(&step.design)?, v0, &prefix, config.perturbation)?;
    Ok((step, info))
}

/// One pass of design, acquisition and estimation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignIteration {
    pub iteration: usize,
    /// Decision vector of the new input (with `v0` for collections).
    pub design: Vec<f64>,
    /// Profile applied in this iteration's experiment.
    pub profile: CurrentProfile,
    pub v0: f64,
    /// Parameter at which the input was designed.
    pub design_mu: ScaledParameterVector,
    /// Information of the new input (collection) or of the whole profile
    /// (concatenated) at `design_mu`.
    pub information: InformationMatrix,
    /// `Phi` and `Phi_hat` at the designed input.
    pub phi: f64,
    pub phi_hat: f64,
    pub design_iterations: usize,
    pub design_termination: String,
    pub warnings: Vec<String>,
    /// `L2` distance to the closest earlier input.
    pub min_distance: Option<f64>,
    pub estimate: ScaledParameterVector,
    pub cost: f64,
    pub estimation_converged: bool,
    pub estimation_iterations: usize,
    /// Relative parameter error, when the truth is known.
    pub relative_error: Option<f64>,
    /// Condition number of the Gauss-Newton Hessian on the data so far.
    pub beta: Option<f64>,
    pub data_points: usize,
    #[serde(skip)]
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignRecord {
    pub framework: Framework,
    pub config: DesignConfig,
    pub initial_mu: ScaledParameterVector,
    pub iterations: Vec<DesignIteration>,
    /// Why the loop ended.
    pub stop_reason: String,
    /// A designed input rejected by the stopping rule, if any.
    pub rejected_candidate: Option<Vec<f64>>,
}

impl DesignRecord {
    pub fn final_estimate(&self) -> Option<ScaledParameterVector> {
        self.iterations.last().map(|i| i.estimate)
    }

    /// Profiles of every experiment, in order.
    pub fn profiles(&self) -> Vec<(CurrentProfile, f64)> {
        self.iterations.iter().map(|i| (i.profile.clone(), i.v0)).collect()
    }

    /// Designed collection inputs.
    pub fn inputs(&self) -> Result<Vec<InputArray>> {
        self.iterations
            .iter()
            .map(|i| InputArray::from_vector(&i.design, self.config.horizon))
            .collect()
    }

    /// Total duration of the designed experiment(s).
    pub fn experiment_time(&self) -> f64 {
        match self.framework {
            Framework::Collection => self.iterations.iter().map(|i| i.profile.horizon()).sum(),
            Framework::Concatenated => self.iterations.last().map_or(0.0, |i| i.profile.horizon()),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// CSV `iter,phi,J,rel_err,beta`; unknown values are empty.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iter", "phi", "J", "rel_err", "beta"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for it in &self.iterations {
            w.write_record([
                it.iteration.to_string(),
                format!("{:e}", it.phi),
                format!("{:e}", it.cost),
                opt(it.relative_error),
                opt(it.beta),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

struct Estimated {
    mu: ScaledParameterVector,
    cost: f64,
    converged: bool,
    iterations: usize,
    warning: Option<String>,
}

fn estimate_or_keep(
    model: &CellModel,
    mu: &ScaledParameterVector,
    data: &DataSet,
    options: &EstimationOptions,
) -> Estimated {
    match estimate(model, mu, data, options) {
        Ok(r) => Estimated {
            warning: (!r.converged).then(|| format!("estimation stopped by {:?}", r.termination)),
            mu: r.mu,
            cost: r.cost,
            converged: r.converged,
            iterations: r.iterations,
        },
        Err(e) => Estimated {
            mu: *mu,
            cost: f64::NAN,
            converged: false,
            iterations: 0,
            warning: Some(format!("estimation failed, keeping previous estimate: {e}")),
        },
    }
}

fn diagnostics(
    model: &CellModel,
    source: &dyn DataSource,
    estimate: &ScaledParameterVector,
    data: &DataSet,
    options: &EstimationOptions,
) -> (Option<f64>, Option<f64>) {
    let truth = source.truth();
    let at = truth.unwrap_or(*estimate);
    let beta = hessian_conditioning(model, &at, data, options.jacobian_step)
        .ok()
        .and_then(|c| c.beta);
    (truth.map(|t| estimate.relative_error(&t)), beta)
}

/// Collection-of-inputs design loop.
pub fn run_collection_design(
    model: &CellModel,
    mu0: &ScaledParameterVector,
    config: &DesignConfig,
    source: &mut dyn DataSource,
) -> Result<DesignRecord> {
    config.validate()?;
    if config.framework != Framework::Collection {
        return Err(Error::Config(
            "run_collection_design needs framework = collection".into(),
        ));
    }
    mu0.check_admissible()?;
    let nu = config.perturbation;
    let mut mu = *mu0;
    let mut inputs: Vec<InputArray> = Vec::new();
    let mut blocks: Vec<DataBlock> = Vec::new();
    let mut iterations = Vec::new();
    let mut stop_reason = format!("reached {} inputs", config.max_inputs);
    let mut rejected = None;

    for n in 1..=config.max_inputs {
        let clock = Instant::now();
        let mut warnings = Vec::new();
        let prior = prior_information(model, &mu, &inputs, nu)?;
        let (input, step) = if n == 1 {
            let u = InputArray::new(config.alternating_amplitudes(), config.initial_voltage, config.horizon)?;
            (u, None)
        } else {
            let start = inputs.last().expect("n >= 2").clone();
            let step = design_step(model, &mu, &prior, &inputs, &start, config)?;
            (InputArray::from_vector(&step.design, config.horizon)?, Some(step))
        };
        if let Some(w) = step.as_ref().and_then(|s| s.warning.clone()) {
            warnings.push(w);
        }
        let history: Vec<CurrentProfile> = inputs.iter().map(|u| u.profile()).collect();
        let distance = min_distance(&input.profile(), &history)?;
        if distance.is_some_and(|d| d < config.tolerance) {
            stop_reason = format!(
                "input {n} within {} of an earlier input (distance {:e})",
                config.tolerance,
                distance.unwrap_or(0.0)
            );
            rejected = Some(input.to_vector());
            break;
        }

        let info = information_matrix(&sensitivities(model, &mu, &input, nu)?);
        let x = input.to_vector();
        let prev: Vec<Vec<f64>> = inputs.iter().map(|u| u.to_vector()).collect();
        let phi = uncertainty(&prior, &info, &x, config.gamma);
        let phi_hat = phi + distance_penalty(&x, &prev)?;

        let block = source.acquire(n, &input.profile(), input.v0)?;
        blocks.push(block);
        inputs.push(input.clone());
        let data = DataSet::new(source.provenance(), blocks.clone())?;
        let design_mu = mu;
        let est = estimate_or_keep(model, &mu, &data, &config.estimation);
        warnings.extend(est.warning);
        mu = est.mu;
        let (relative_error, beta) = diagnostics(model, source, &mu, &data, &config.estimation);

        iterations.push(DesignIteration {
            iteration: n,
            design: x,
            profile: input.profile(),
            v0: input.v0,
            design_mu,
            information: info,
            phi,
            phi_hat,
            design_iterations: step.as_ref().map_or(0, |s| s.iterations),
            design_termination: step.map_or_else(|| "fixed".to_string(), |s| s.termination),
            warnings,
            min_distance: distance,
            estimate: mu,
            cost: est.cost,
            estimation_converged: est.converged,
            estimation_iterations: est.iterations,
            relative_error,
            beta,
            data_points: data.len(),
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
    }

    Ok(DesignRecord {
        framework: Framework::Collection,
        config: config.clone(),
        initial_mu: *mu0,
        iterations,
        stop_reason,
        rejected_candidate: rejected,
    })
}

/// Concatenated-segment design loop; always runs `max_inputs` segments.
pub fn run_concatenated_design(
    model: &CellModel,
    mu0: &ScaledParameterVector,
    config: &DesignConfig,
    source: &mut dyn DataSource,
) -> Result<DesignRecord> {
    config.validate()?;
    if config.framework != Framework::Concatenated {
        return Err(Error::Config(
            "run_concatenated_design needs framework = concatenated".into(),
        ));
    }
    mu0.check_admissible()?;
    let v0 = config.initial_voltage;
    let mut mu = *mu0;
    let mut segments: Vec<Vec<f64>> = Vec::new();
    let mut iterations = Vec::new();

    for n in 1..=config.max_inputs {
        let clock = Instant::now();
        let mut warnings = Vec::new();
        let start = segments
            .last()
            .cloned()
            .unwrap_or_else(|| config.alternating_amplitudes());
        let (step, info) = design_segment(model, &mu, &segments, &start, config)?;
        warnings.extend(step.warning.clone());
        let history: Vec<CurrentProfile> = segments
            .iter()
            .map(|s| config.segment_profile(s))
            .collect::<Result<_>>()?;
        let distance = min_distance(&config.segment_profile(&step.design)?, &history)?;
        let phi = uncertainty(&InformationMatrix::zeros(), &info, &step.design, config.gamma);
        let phi_hat = phi + distance_penalty(&step.design, &segments)?;

        segments.push(step.design.clone());
        let profile = config.concatenated_profile(&segments)?;
        let block = source.acquire(n, &profile, v0)?;
        let data = DataSet::new(source.provenance(), vec![block])?;
        let design_mu = mu;
        let est = estimate_or_keep(model, &mu, &data, &config.estimation);
        warnings.extend(est.warning);
        mu = est.mu;
        let (relative_error, beta) = diagnostics(model, source, &mu, &data, &config.estimation);

        iterations.push(DesignIteration {
            iteration: n,
            design: step.design.clone(),
            profile,
            v0,
            design_mu,
            information: info,
            phi,
            phi_hat,
            design_iterations: step.iterations,
            design_termination: step.termination.clone(),
            warnings,
            min_distance: distance,
            estimate: mu,
            cost: est.cost,
            estimation_converged: est.converged,
            estimation_iterations: est.iterations,
            relative_error,
            beta,
            data_points: data.len(),
            wall_time_s: clock.elapsed().as_secs_f64(),
        });
    }

    Ok(DesignRecord {
        framework: Framework::Concatenated,
        config: config.clone(),
        initial_mu: *mu0,
        iterations,
        stop_reason: format!("completed {} segments", config.max_inputs),
        rejected_candidate: None,
    })
}

/// Dispatch on `config.framework`.
pub fn run_design(
    model: &CellModel,
    mu0: &ScaledParameterVector,
    config: &DesignConfig,
    source: &mut dyn DataSource,
) -> Result<DesignRecord> {
    match config.framework {
        Framework::Collection => run_collection_design(model, mu0, config, source),
        Framework::Concatenated => run_concatenated_design(model, mu0, config, source),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::synthetic_truth;

    #[test]
    fn first_collection_input_is_alternating() {
        let c = DesignConfig::collection();
        let u = InputArray::new(c.alternating_amplitudes(), c.initial_voltage, c.horizon).unwrap();
        let v = u.to_vector();
        assert_eq!(v.len(), 25);
        for (j, a) in v[..24].iter().enumerate() {
            assert_eq!(*a, if j % 2 == 0 { -1.0 } else { 1.0 });
        }
        assert_eq!(v[24], 3.7);
    }

    #[test]
    fn concatenated_durations() {
        let c = DesignConfig::concatenated();
        assert_eq!(c.full_experiment_time(), 6480.0);
        let segs = vec![vec![1.0; 6]; 9];
        let p = c.concatenated_profile(&segs).unwrap();
        assert_eq!(p.horizon(), 6480.0);
        assert_eq!(p.grid_intervals(0.1).unwrap(), 64_800);
        // Each segment: six 20 s steps then one 600 s rest.
        let s = c.segment_profile(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(s.breakpoints(), &[0.0, 20.0, 40.0, 60.0, 80.0, 100.0, 120.0, 720.0]);
        assert_eq!(s.amplitudes(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn stopping_rule() {
        let a = CurrentProfile::uniform(&[1.0, -1.0], 60.0).unwrap();
        let b = CurrentProfile::uniform(&[2.0, 0.0], 60.0).unwrap();
        assert!(stopping_criterion(&a, std::slice::from_ref(&a), 1e-12).unwrap());
        assert!(!stopping_criterion(&a, &[], 1e9).unwrap());
        let d = min_distance(&a, std::slice::from_ref(&b)).unwrap().unwrap();
        assert!((d - 60f64.sqrt()).abs() < 1e-12);
        let short = CurrentProfile::uniform(&[1.0], 30.0).unwrap();
        assert!(stopping_criterion(&a, &[short], 0.1).is_err());
    }

    #[test]
    fn concatenated_information_matches_direct_assembly() {
        let model = CellModel::default();
        let mut c = DesignConfig::concatenated();
        c.rest = 30.0;
        c.horizon = 12.0;
        let mu = synthetic_truth();
        let frozen = vec![vec![4.0, -3.0, 2.0, 0.0, 8.8, -1.0]];
        let seg = vec![-2.0, 1.0, 5.0, -5.0, 3.0, 0.5];
        let prefix_profile = c.concatenated_profile(&frozen).unwrap();
        let prefix = prefix_information(&model, &mu, Some(&prefix_profile), c.initial_voltage, 1e-3).unwrap();
        let full = c.concatenated_profile(&[frozen[0].clone(), seg.clone()]).unwrap();
        let split = concatenated_information(&model, &mu, &full, c.initial_voltage, &prefix, 1e-3).unwrap();
        let bundle = sensitivities_with(&mu, 1e-3, |p| {
            model.simulate(p, &full, c.initial_voltage).map(|s| s.trace)
        })
        .unwrap();
        let direct = information_matrix(&bundle);
        for i in 0..9 {
            for j in 0..9 {
                let (a, b) = (split.get(i, j), direct.get(i, j));
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-12), "({i},{j}) {a} vs {b}");
            }
        }
    }

    #[test]
    fn design_step_respects_box_and_descends() {
        let model = CellModel::default();
        let mut c = DesignConfig::collection();
        c.steps = 4;
        c.horizon = 10.0;
        c.optimizer.max_iterations = 5;
        let mu = synthetic_truth();
        let start = InputArray::new(vec![-1.0, 1.0, -1.0, 1.0], 3.7, 10.0).unwrap();
        let prior = prior_information(&model, &mu, std::slice::from_ref(&start), 1e-3).unwrap();
        let step = design_step(&model, &mu, &prior, std::slice::from_ref(&start), &start, &c).unwrap();
        assert!(step.objective <= step.start_objective);
        let u = InputArray::from_vector(&step.design, c.horizon).unwrap();
        assert!(u.within_bounds());
        let d = step
            .design
            .iter()
            .zip(start.to_vector())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d > 0.0);
    }

    #[test]
    fn virtual_noise_is_seeded_and_zero_is_exact() {
        let model = CellModel::default();
        let p = CurrentProfile::uniform(&[2.0, -2.0], 10.0).unwrap();
        let mut clean = VirtualSource::new(model.clone(), synthetic_truth());
        let a = clean.acquire(1, &p, 3.7).unwrap();
        let exact = model.simulate(&synthetic_truth(), &p, 3.7).unwrap().trace;
        assert_eq!(a.voltages, exact.voltages);
        let mut noisy = VirtualSource {
            noise: 1e-3,
            seed: 5,
            ..clean.clone()
        };
        let b = noisy.acquire(1, &p, 3.7).unwrap();
        let c = noisy.acquire(1, &p, 3.7).unwrap();
        assert_eq!(b.voltages, c.voltages);
        assert_ne!(b.voltages, a.voltages);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = DesignConfig::concatenated();
        let text = toml::to_string(&c).unwrap();
        let back: DesignConfig = toml::from_str(&text).unwrap();
        assert_eq!(c, back);
    }
}
