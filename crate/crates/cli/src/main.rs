use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use spm_oid::design::{run_design, DesignRecord, Framework, VirtualSource};
use spm_oid::estimation::{estimate, restart_study, DataSet};
use spm_oid::experiment::{
    run_test, write_json, write_study_files, ExperimentConfig, TestSummary, Timing, CLUSTER_DECIMALS,
};
use spm_oid::io::{read_profile_csv, write_profile_csv, write_trace_csv, MeasurementFile};
use spm_oid::model::ScaledParameterVector;
use spm_oid::{Error, Result};

/// Optimal input design and parameter estimation for a single-particle
/// lithium-ion cell model.
#[derive(Parser)]
#[command(name = "spm-oid", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FrameworkArg {
    Collection,
    #[value(alias = "concatenated")]
    Concat,
}

impl From<FrameworkArg> for Framework {
    fn from(f: FrameworkArg) -> Self {
        match f {
            FrameworkArg::Collection => Framework::Collection,
            FrameworkArg::Concat => Framework::Concatenated,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the voltage response to a current profile.
    Simulate {
        /// JSON file with the 9 scaled parameters (array or {"mu": [...]}).
        #[arg(long)]
        params: PathBuf,
        /// Current profile CSV (`time_s,current_A`, `# horizon_s:`, `# v0_V:`).
        #[arg(long)]
        input: PathBuf,
        /// Output CSV `time_s,current_A,voltage_V`.
        #[arg(long)]
        out: PathBuf,
        /// Initial voltage; overrides the profile's `# v0_V:` line.
        #[arg(long)]
        v0: Option<f64>,
        /// Run configuration (TOML), for a custom model.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the adaptive input design on virtual data.
    Design {
        #[arg(long, value_enum)]
        framework: FrameworkArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the parameters from a measurement file.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the result JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Seeded restart study on a measurement file.
    Study {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for `study.csv` and the histograms.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run analysis test 1-4 and write its report bundle.
    RunTest {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        test: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate one or more report bundles.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::read(p),
        None => Ok(ExperimentConfig::new(None)),
    }
}

fn read_params(path: &Path) -> Result<ScaledParameterVector> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let values = value.get("mu").unwrap_or(&value);
    let mu: Vec<f64> = serde_json::from_value(values.clone())?;
    let mu = ScaledParameterVector::from_slice(&mu)?;
    mu.check_admissible()?;
    Ok(mu)
}

fn read_data(path: &Path, config: &ExperimentConfig) -> Result<DataSet> {
    let model = config.model()?;
    MeasurementFile::read(path)?.to_dataset(config.ingest_mode()?, model.time_step())
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            params,
            input,
            out,
            v0,
            config,
        } => {
            let config = load_config(config.as_deref())?;
            config.validate(false)?;
            let model = config.model()?;
            let mu = read_params(&params)?;
            let (profile, file_v0) = read_profile_csv(&input)?;
            let v0 = v0
                .or(file_v0)
                .ok_or_else(|| Error::Config("no initial voltage: pass --v0 or add '# v0_V:'".into()))?;
            let sim = model.simulate(&mu, &profile, v0)?;
            write_trace_csv(&sim.trace, &profile, &out)
        }
        Command::Design { framework, config, out } => {
            let config = load_config(config.as_deref())?;
            config.validate(false)?;
            let design = config.design_config_for(framework.into())?;
            let model = config.model()?;
            let mut source = VirtualSource {
                noise: config.noise,
                seed: config.noise_seed,
                ..VirtualSource::new(model.clone(), config.truth()?)
            };
            let record = run_design(&model, &config.initial_mu()?, &design, &mut source)?;
            write_design(&record, &out)?;
            print_json(&json!({
                "framework": record.framework,
                "inputs": record.iterations.len(),
                "stop_reason": record.stop_reason,
                "final_mu": record.final_estimate(),
                "relative_error": record.iterations.last().and_then(|i| i.relative_error),
                "experiment_time_s": record.experiment_time(),
            }))
        }
        Command::Estimate { data, config, out } => {
            let config = load_config(config.as_deref())?;
            config.validate(false)?;
            let model = config.model()?;
            let data = read_data(&data, &config)?;
            let result = estimate(&model, &config.initial_mu()?, &data, &config.estimation)?;
            match out {
                Some(path) => write_json(&path, &result),
                None => print_json(&result),
            }
        }
        Command::Study {
            data,
            runs,
            seed,
            config,
            out,
        } => {
            let config = load_config(config.as_deref())?;
            config.validate(false)?;
            let model = config.model()?;
            let data = read_data(&data, &config)?;
            let study = restart_study(&model, &data, runs, seed, &config.estimation);
            if let Some(dir) = &out {
                write_study_files(&study, dir)?;
            }
            print_json(&json!({
                "runs": runs,
                "seed": seed,
                "converged_runs": study.runs.iter().filter(|r| r.converged).count(),
                "mu_opt": study.most_common_optimizer(CLUSTER_DECIMALS),
                "data_points": data.len(),
                "experiment_time_s": data.experiment_time(),
            }))
        }
        Command::RunTest { test, config, out } => {
            let mut config = load_config(config.as_deref())?;
            if config.test.is_some_and(|t| t != test) {
                return Err(Error::Config(format!(
                    "--test {test} contradicts test = {} in the config",
                    config.test.unwrap_or_default()
                )));
            }
            config.test = Some(test);
            if let Some(dir) = out {
                config.output_dir = dir;
            }
            let report = run_test(&config)?;
            print_json(&report.summary)
        }
        Command::Report { dirs } => report(&dirs),
    }
}

fn write_design(record: &DesignRecord, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    record.write_json(&dir.join("design_record.json"))?;
    record.write_summary_csv(&dir.join("summary.csv"))?;
    for it in &record.iterations {
        write_profile_csv(
            &it.profile,
            Some(it.v0),
            &dir.join(format!("input_{}.csv", it.iteration)),
        )?;
    }
    Ok(())
}

fn read_bundle(dir: &Path) -> Result<(TestSummary, Option<Timing>)> {
    let read = |name: &str| {
        let path = dir.join(name);
        std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })
    };
    let summary: TestSummary = serde_json::from_str(&read("summary.json")?)?;
    let timing = read("timing.json").ok().map(|t| serde_json::from_str(&t)).transpose()?;
    Ok((summary, timing))
}

/// Prints a plain-text table with one column per bundle.
fn report(dirs: &[PathBuf]) -> Result<()> {
    let bundles = dirs.iter().map(|d| read_bundle(d)).collect::<Result<Vec<_>>>()?;
    let cell = |v: Option<String>| v.unwrap_or_else(|| "-".to_string());
    let rows: Vec<(&str, Vec<String>)> = vec![
        ("test", bundles.iter().map(|(s, _)| s.test.to_string()).collect()),
        (
            "experiment time (s)",
            bundles
                .iter()
                .map(|(s, _)| format!("{}", s.experiment_time_s))
                .collect(),
        ),
        (
            "data points",
            bundles.iter().map(|(s, _)| s.data_points.to_string()).collect(),
        ),
        (
            "optimization time (s)",
            bundles
                .iter()
                .map(|(_, t)| cell(t.as_ref().map(|t| format!("{:.1}", t.mean_optimization_time_s))))
                .collect(),
        ),
        (
            "converged runs",
            bundles
                .iter()
                .map(|(s, _)| format!("{}/{}", s.converged_runs, s.n_runs))
                .collect(),
        ),
        (
            "mu_opt rel. error",
            bundles
                .iter()
                .map(|(s, _)| cell(s.mu_opt_relative_error.map(|e| format!("{e:.2e}"))))
                .collect(),
        ),
        (
            "max |e_rel|",
            bundles
                .iter()
                .map(|(s, _)| cell(s.max_abs_relative_error.map(|e| format!("{e:.2e}"))))
                .collect(),
        ),
    ];
    let label_width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let width = rows
        .iter()
        .flat_map(|(_, v)| v.iter().map(String::len))
        .max()
        .unwrap_or(0)
        .max(8);
    for (label, values) in rows {
        let mut line = format!("{label:<label_width$}");
        for v in values {
            line.push_str(&format!("  {v:>width$}"));
        }
        println!("{line}");
    }
    Ok(())
}

fn main() -> ExitCode {
    // Usage errors exit with 2 from inside clap.
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{record}");
            ExitCode::from(1)
        }
    }
}
