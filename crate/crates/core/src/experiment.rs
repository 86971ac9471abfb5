//! Experiment configuration and the four analysis pipelines.
//!
//! | test | design        | data kept                     |
//! |------|---------------|-------------------------------|
//! | 1    | collection    | impulses only (cut)           |
//! | 2    | collection    | impulses, rest, prep (full)   |
//! | 3    | concatenated  | cut                           |
//! | 4    | concatenated  | full                          |
//!
//! Each pipeline takes a fixed design, ingests lab-format measurements,
//! runs a seeded restart study, proposes the most common optimiser and
//! writes a report bundle. Without a measurement file, a synthetic lab
//! fixture is generated from a hidden parameter.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{run_design, DataSource, DesignConfig, DesignRecord, Framework, VirtualSource};
use crate::estimation::{restart_study, DataSet, EstimationOptions, Phase, Provenance, Study};
use crate::io::{require_file, ErrorTrace, IngestMode, MeasurementBlock, MeasurementFile, MeasurementRow};
use crate::model::{synthetic_truth, CellModel, CurrentProfile, ModelConfig, ScaledParameterVector};
use crate::{Error, Result};

/// Version of the report bundle layout.
pub const BUNDLE_VERSION: u32 = 1;

/// Decimals used to cluster study optimisers.
pub const CLUSTER_DECIMALS: i32 = 3;

/// Relative error below which a study run counts as a recovery.
pub const RECOVERY_TOLERANCE: f64 = 1e-2;

/// Design framework and ingestion mode of one of the four tests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSpec {
    pub number: u8,
    pub framework: Framework,
    pub mode: IngestMode,
}

impl TestSpec {
    pub fn new(number: u8) -> Result<Self> {
        let (framework, mode) = match number {
            1 => (Framework::Collection, IngestMode::Cut),
            2 => (Framework::Collection, IngestMode::Full),
            3 => (Framework::Concatenated, IngestMode::Cut),
            4 => (Framework::Concatenated, IngestMode::Full),
            n => return Err(Error::Config(format!("test must be 1, 2, 3 or 4, got {n}"))),
        };
        Ok(Self {
            number,
            framework,
            mode,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub n_runs: usize,
    pub seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { n_runs: 100, seed: 0 }
    }
}

/// Layout of a synthetic lab block: a charge-neutral preparation cycle,
/// a rest, the designed input and a closing rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureLayout {
    /// Preparation: `prep_current` one way, then back, each for half of
    /// `prep_s`. The cell returns to its starting equilibrium.
    pub prep_s: f64,
    pub prep_current: f64,
    pub rest_s: f64,
    /// Sampling step of the preparation and rest phases.
    pub slow_step: f64,
    /// Samples on `[0, t_f)` of the designed input.
    pub impulse_points: usize,
    pub tail_s: f64,
    /// Samples of the closing rest, both ends included.
    pub tail_points: usize,
}

impl FixtureLayout {
    /// Blocks of 6336.2 s with 2035 impulse and 8316 total samples.
    pub fn collection() -> Self {
        Self {
            prep_s: 1800.0,
            prep_current: 1.0,
            rest_s: 4000.0,
            slow_step: 1.0,
            impulse_points: 2035,
            tail_s: 476.2,
            tail_points: 481,
        }
    }

    /// One 14199 s block with 216002 impulse and 223727 total samples.
    pub fn concatenated() -> Self {
        Self {
            prep_s: 2000.0,
            prep_current: 1.0,
            rest_s: 5000.0,
            slow_step: 1.0,
            impulse_points: 216_002,
            tail_s: 719.0,
            tail_points: 725,
        }
    }

    pub fn for_framework(framework: Framework) -> Self {
        match framework {
            Framework::Collection => Self::collection(),
            Framework::Concatenated => Self::concatenated(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.prep_s >= 0.0
            && self.rest_s > 0.0
            && self.slow_step > 0.0
            && self.impulse_points >= 2
            && self.tail_s > 0.0
            && self.tail_points >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(
                "fixture layout needs positive durations and point counts".into(),
            ))
        }
    }
}

/// Run configuration (TOML) shared by the command-line tools. Only
/// `run-test` needs `test`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub test: Option<u8>,
    /// Ingestion mode; implied by `test` when that is set.
    #[serde(default)]
    pub mode: Option<IngestMode>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// TOML file with a model configuration; defaults otherwise.
    #[serde(default)]
    pub model_config: Option<PathBuf>,
    /// Lab-format measurement file; a synthetic fixture otherwise.
    #[serde(default)]
    pub measurements: Option<PathBuf>,
    /// A finished design record; the design is run otherwise.
    #[serde(default)]
    pub design_record: Option<PathBuf>,
    /// Hidden parameter of virtual data, used for error reporting only.
    #[serde(default)]
    pub truth: Option<Vec<f64>>,
    /// Start of the adaptive design.
    #[serde(default)]
    pub initial_mu: Option<Vec<f64>>,
    /// Standard deviation of additive voltage noise on virtual data, V.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Overrides on top of the framework's design defaults.
    #[serde(default)]
    pub design: Option<toml::Table>,
    #[serde(default)]
    pub fixture: Option<FixtureLayout>,
    #[serde(default)]
    pub estimation: EstimationOptions,
    #[serde(default)]
    pub study: StudyConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("report")
}

impl ExperimentConfig {
    pub fn new(test: Option<u8>) -> Self {
        Self {
            test,
            mode: None,
            output_dir: default_output(),
            model_config: None,
            measurements: None,
            design_record: None,
            truth: None,
            initial_mu: None,
            noise: 0.0,
            noise_seed: 0,
            design: None,
            fixture: None,
            estimation: EstimationOptions::default(),
            study: StudyConfig::default(),
        }
    }

    /// Parse TOML; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for p in [&mut c.output_dir]
            .into_iter()
            .chain(c.model_config.as_mut())
            .chain(c.measurements.as_mut())
            .chain(c.design_record.as_mut())
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn spec(&self) -> Result<TestSpec> {
        let number = self
            .test
            .ok_or_else(|| Error::Config("no test selected (set `test = 1..4`)".into()))?;
        let spec = TestSpec::new(number)?;
        if let Some(mode) = self.mode {
            if mode != spec.mode {
                return Err(Error::Config(format!(
                    "test {number} uses {:?} data, the config asks for {mode:?}",
                    spec.mode
                )));
            }
        }
        Ok(spec)
    }

    /// Ingestion mode: the test's, else `mode`, else full.
    pub fn ingest_mode(&self) -> Result<IngestMode> {
        match self.test {
            Some(_) => Ok(self.spec()?.mode),
            None => Ok(self.mode.unwrap_or(IngestMode::Full)),
        }
    }

    /// Design settings of the selected test's framework.
    pub fn design_config(&self) -> Result<DesignConfig> {
        self.design_config_for(self.spec()?.framework)
    }

    /// `framework` defaults with the `[design]` overrides applied.
    pub fn design_config_for(&self, framework: Framework) -> Result<DesignConfig> {
        let defaults = DesignConfig::for_framework(framework);
        let Some(overrides) = &self.design else {
            return Ok(defaults);
        };
        let mut table = toml::Table::try_from(&defaults).map_err(|e| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            table.insert(k.clone(), v.clone());
        }
        let config: DesignConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if config.framework != framework {
            return Err(Error::Config(format!(
                "the {framework:?} framework is selected, the design section asks for {:?}",
                config.framework
            )));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn fixture_layout(&self) -> Result<FixtureLayout> {
        let layout = match &self.fixture {
            Some(f) => f.clone(),
            None => FixtureLayout::for_framework(self.spec()?.framework),
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn model(&self) -> Result<CellModel> {
        let config = match &self.model_config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str::<ModelConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
            }
            None => ModelConfig::default(),
        };
        CellModel::new(config)
    }

    pub fn truth(&self) -> Result<ScaledParameterVector> {
        let mu = match &self.truth {
            Some(v) => ScaledParameterVector::from_slice(v)?,
            None => synthetic_truth(),
        };
        mu.check_admissible()?;
        Ok(mu)
    }

    pub fn initial_mu(&self) -> Result<ScaledParameterVector> {
        let mu = match &self.initial_mu {
            Some(v) => ScaledParameterVector::from_slice(v)?,
            None => ScaledParameterVector::box_center(),
        };
        mu.check_admissible()?;
        Ok(mu)
    }

    /// Every check that can fail before any simulation. `test` is only
    /// required when `need_test` is set.
    pub fn validate(&self, need_test: bool) -> Result<()> {
        if need_test || self.test.is_some() {
            self.spec()?;
            self.design_config()?;
            self.fixture_layout()?;
        }
        if let Some(p) = &self.model_config {
            require_file(p, "model config")?;
        }
        if let Some(p) = &self.measurements {
            require_file(p, "measurement file")?;
        }
        if let Some(p) = &self.design_record {
            require_file(p, "design record")?;
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be a non-negative number".into()));
        }
        self.truth()?;
        self.initial_mu()?;
        Ok(())
    }
}

/// Noiseless (or noisy) virtual data `w = v_{truth, u}` for each profile.
pub fn generate_virtual_data(
    model: &CellModel,
    truth: &ScaledParameterVector,
    inputs: &[(CurrentProfile, f64)],
    noise: f64,
    seed: u64,
) -> Result<DataSet> {
    truth.check_admissible()?;
    let blocks = inputs
        .par_iter()
        .enumerate()
        .map(|(n, (profile, v0))| {
            let mut source = VirtualSource {
                noise,
                seed,
                ..VirtualSource::new(model.clone(), *truth)
            };
            source.acquire(n + 1, profile, *v0)
        })
        .collect::<Result<Vec<_>>>()?;
    DataSet::new(Provenance::Virtual, blocks)
}

fn sample_segment(start: f64, duration: f64, points: usize, include_end: bool) -> impl Iterator<Item = f64> {
    let denom = if include_end { points - 1 } else { points } as f64;
    (0..points).map(move |k| start + duration * k as f64 / denom)
}

/// One lab-format block for `profile` applied from equilibrium at `v0`.
pub fn synthetic_block(
    model: &CellModel,
    truth: &ScaledParameterVector,
    label: &str,
    profile: &CurrentProfile,
    v0: f64,
    layout: &FixtureLayout,
    noise: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<MeasurementBlock> {
    // Discharge first from high voltages, charge first from low ones, so
    // the cycle stays near the operating window.
    let sign = if v0 >= 3.7 { 1.0 } else { -1.0 };
    let half = 0.5 * layout.prep_s;
    let mut full = if layout.prep_s > 0.0 {
        CurrentProfile::new(
            vec![0.0, half, layout.prep_s],
            vec![sign * layout.prep_current, -sign * layout.prep_current],
        )?
        .concatenate(&CurrentProfile::rest(layout.rest_s)?)
    } else {
        CurrentProfile::rest(layout.rest_s)?
    };
    let impulse_start = layout.prep_s + layout.rest_s;
    full = full
        .concatenate(profile)
        .concatenate(&CurrentProfile::rest(layout.tail_s)?);
    let sim = model.simulate(truth, &full, v0)?;

    let slow = |from: f64, to: f64| {
        let n = ((to - from) / layout.slow_step).round() as usize;
        (0..n).map(move |k| from + k as f64 * layout.slow_step)
    };
    let t_f = profile.horizon();
    let impulse_end = impulse_start + t_f;
    let mut samples: Vec<(f64, Phase)> = Vec::new();
    samples.extend(slow(0.0, layout.prep_s).map(|t| (t, Phase::Prep)));
    samples.extend(slow(layout.prep_s, impulse_start).map(|t| (t, Phase::Rest)));
    samples.extend(sample_segment(impulse_start, t_f, layout.impulse_points, false).map(|t| (t, Phase::Impulse)));
    samples.extend(sample_segment(impulse_end, layout.tail_s, layout.tail_points, true).map(|t| (t, Phase::Rest)));

    let normal = match &noise {
        Some((sigma, _)) if *sigma > 0.0 => {
            Some(Normal::new(0.0, *sigma).map_err(|e| Error::Config(format!("noise: {e}")))?)
        }
        _ => None,
    };
    let mut rng = noise.map(|(_, r)| r);
    let rows = samples
        .into_iter()
        .map(|(t, phase)| {
            let mut v = sim.trace.voltage_at(t);
            if let (Some(n), Some(r)) = (&normal, rng.as_deref_mut()) {
                v += n.sample(r);
            }
            MeasurementRow {
                time: t,
                current: full.current_at(t),
                voltage: v,
                phase,
            }
        })
        .collect();
    Ok(MeasurementBlock {
        label: label.to_string(),
        v0,
        rows,
    })
}

/// A lab-format measurement file for every experiment of `record`.
pub fn synthetic_measurements(
    model: &CellModel,
    truth: &ScaledParameterVector,
    record: &DesignRecord,
    layout: &FixtureLayout,
    noise: f64,
    seed: u64,
) -> Result<MeasurementFile> {
    let experiments: Vec<(String, CurrentProfile, f64)> = match record.framework {
        Framework::Collection => record
            .iterations
            .iter()
            .map(|it| (format!("input_{}", it.iteration), it.profile.clone(), it.v0))
            .collect(),
        Framework::Concatenated => record
            .iterations
            .last()
            .map(|it| vec![("concatenated".to_string(), it.profile.clone(), it.v0)])
            .unwrap_or_default(),
    };
    if experiments.is_empty() {
        return Err(Error::Data("design record has no experiments".into()));
    }
    let blocks = experiments
        .par_iter()
        .enumerate()
        .map(|(n, (label, profile, v0))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(n as u64 + 1);
            synthetic_block(model, truth, label, profile, *v0, layout, Some((noise, &mut rng)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementFile { blocks })
}

/// Relative output errors of every block at `mu`.
pub fn error_traces(model: &CellModel, mu: &ScaledParameterVector, data: &DataSet) -> Result<Vec<ErrorTrace>> {
    data.blocks
        .par_iter()
        .map(|b| {
            let sim = model.simulate(mu, &b.profile, b.v0)?;
            Ok(ErrorTrace {
                label: b.label.clone(),
                times: b.times.clone(),
                data: b.voltages.clone(),
                model: b.times.iter().map(|&t| sim.trace.voltage_at(t)).collect(),
            })
        })
        .collect()
}

/// Deterministic part of a test report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    pub bundle_version: u32,
    pub test: u8,
    pub framework: Framework,
    pub mode: IngestMode,
    pub provenance: Provenance,
    /// Total duration of the applied profiles, s.
    pub experiment_time_s: f64,
    pub data_points: usize,
    pub blocks: usize,
    pub n_runs: usize,
    pub seed: u64,
    pub converged_runs: usize,
    /// Centroid of the largest cluster of converged optimisers.
    pub mu_opt: Option<ScaledParameterVector>,
    pub cluster_decimals: i32,
    /// Hidden parameter of synthetic data, if any.
    pub truth: Option<ScaledParameterVector>,
    pub mu_opt_relative_error: Option<f64>,
    /// Share of runs within [`RECOVERY_TOLERANCE`] of the truth.
    pub recovered_fraction: Option<f64>,
    /// Largest `|e_rel|` over all error traces at `mu_opt`.
    pub max_abs_relative_error: Option<f64>,
}

/// Wall-clock figures; kept out of the summary so reruns are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_optimization_time_s: f64,
    pub study_wall_time_s: f64,
    pub total_wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TestReport {
    pub summary: TestSummary,
    pub timing: Timing,
    pub study: Study,
    pub traces: Vec<ErrorTrace>,
    pub record: DesignRecord,
}

impl TestReport {
    /// Files written by [`TestReport::write_bundle`], in order.
    pub fn bundle_files(&self) -> Vec<String> {
        let mut files = vec!["summary.json".to_string(), "study.csv".to_string()];
        files.extend((1..=9).map(|j| format!("hist_mu{j}.json")));
        files.extend((1..=self.traces.len()).map(|n| format!("error_trace_{n}.csv")));
        files.push("design_record.json".to_string());
        files.push("timing.json".to_string());
        files
    }

    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("summary.json"), &self.summary)?;
        write_study_files(&self.study, dir)?;
        for (n, t) in self.traces.iter().enumerate() {
            t.write_csv(&dir.join(format!("error_trace_{}.csv", n + 1)))?;
        }
        self.record.write_json(&dir.join("design_record.json"))?;
        write_json(&dir.join("timing.json"), &self.timing)
    }
}

/// `study.csv` and `hist_mu{1..9}.json` in `dir`.
pub fn write_study_files(study: &Study, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    study.write_csv(&dir.join("study.csv"))?;
    for h in study.histograms() {
        write_json(&dir.join(format!("hist_mu{}.json", h.parameter)), &h)?;
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Run one of the four test pipelines and write its report bundle.
pub fn run_test(config: &ExperimentConfig) -> Result<TestReport> {
    let report = evaluate_test(config)?;
    report.write_bundle(&config.output_dir)?;
    Ok(report)
}

/// [`run_test`] without writing anything.
pub fn evaluate_test(config: &ExperimentConfig) -> Result<TestReport> {
    let clock = Instant::now();
    config.validate(true)?;
    let spec = config.spec()?;
    let design_config = config.design_config()?;
    let model = config.model()?;

    let synthetic = config.measurements.is_none();
    let truth = if synthetic || config.truth.is_some() {
        Some(config.truth()?)
    } else {
        None
    };

    let record = match &config.design_record {
        Some(path) => {
            let r = DesignRecord::read_json(path)?;
            if r.framework != spec.framework {
                return Err(Error::Config(format!(
                    "test {} needs a {:?} design record, found {:?}",
                    spec.number, spec.framework, r.framework
                )));
            }
            r
        }
        None => {
            let mut source = VirtualSource {
                noise: config.noise,
                seed: config.noise_seed,
                ..VirtualSource::new(model.clone(), config.truth()?)
            };
            run_design(&model, &config.initial_mu()?, &design_config, &mut source)?
        }
    };

    let step = model.time_step();
    let data = match &config.measurements {
        Some(path) => MeasurementFile::read(path)?.to_dataset(spec.mode, step)?,
        None => {
            let truth = truth.expect("synthetic data has a truth");
            let file = synthetic_measurements(
                &model,
                &truth,
                &record,
                &config.fixture_layout()?,
                config.noise,
                config.noise_seed,
            )?;
            let mut data = file.to_dataset(spec.mode, step)?;
            data.provenance = Provenance::Virtual;
            data
        }
    };

    let study_clock = Instant::now();
    let study = restart_study(
        &model,
        &data,
        config.study.n_runs,
        config.study.seed,
        &config.estimation,
    );
    let study_wall = study_clock.elapsed().as_secs_f64();
    let mu_opt = study.most_common_optimizer(CLUSTER_DECIMALS);
    let traces = match &mu_opt {
        Some(mu) => error_traces(&model, mu, &data)?,
        None => Vec::new(),
    };
    let max_abs = (!traces.is_empty()).then(|| traces.iter().map(ErrorTrace::max_abs).fold(0.0, f64::max));

    let summary = TestSummary {
        bundle_version: BUNDLE_VERSION,
        test: spec.number,
        framework: spec.framework,
        mode: spec.mode,
        provenance: data.provenance,
        experiment_time_s: data.experiment_time(),
        data_points: data.len(),
        blocks: data.blocks.len(),
        n_runs: config.study.n_runs,
        seed: config.study.seed,
        converged_runs: study.runs.iter().filter(|r| r.converged).count(),
        mu_opt,
        cluster_decimals: CLUSTER_DECIMALS,
        truth,
        mu_opt_relative_error: mu_opt.zip(truth).map(|(m, t)| m.relative_error(&t)),
        recovered_fraction: truth.map(|t| study.fraction_within(&t, RECOVERY_TOLERANCE)),
        max_abs_relative_error: max_abs,
    };
    let timing = Timing {
        mean_optimization_time_s: study.mean_wall_time(),
        study_wall_time_s: study_wall,
        total_wall_time_s: clock.elapsed().as_secs_f64(),
    };
    Ok(TestReport {
        summary,
        timing,
        study,
        traces,
        record,
    })
}
