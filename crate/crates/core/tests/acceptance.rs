//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails. Slow (tens of minutes in release mode).

use std::path::Path;
use std::time::Instant;

use spm_oid::design::{
    accumulated_uncertainty, prior_information, run_collection_design, run_concatenated_design, DesignConfig,
    DesignRecord, VirtualSource,
};
use spm_oid::estimation::{restart_study, virtual_collection, EstimationOptions};
use spm_oid::experiment::{run_test, ExperimentConfig};
use spm_oid::model::diffusion::ParticleSolver;
use spm_oid::model::params::{
    scale_parameters, unscale_values, CellParameters, PHYSICAL_LOWER, PHYSICAL_UPPER, SCALED_LOWER, SCALED_UPPER,
};
use spm_oid::model::{synthetic_truth, CellModel, CurrentProfile, InputArray, ScaledParameterVector};
use spm_oid::sensitivity::{
    central_sensitivities, distance_penalty, information_matrix, sensitivities, DEFAULT_PERTURBATION,
};

const RECOVERY_TOL: f64 = 1e-3;
const COLLECTION_BUDGET_S: f64 = 15.0 * 60.0;
const CONCATENATED_BUDGET_S: f64 = 30.0 * 60.0;
const STUDY_RUNS: usize = 100;
const STUDY_SEED: u64 = 0;
const STUDY_TOL: f64 = 1e-2;
const INVARIANT_BUDGET_S: f64 = 60.0;
const CONSERVATION_TOL: f64 = 1e-12;
const FIXED_POINT_TOL: f64 = 1e-12;
const ROUND_TRIP_TOL: f64 = 1e-12;
const FD_TOL: f64 = 5e-3;
const RESISTANCE_SENS_TOL: f64 = 1e-8;
const TABLE_TOL: f64 = 1e-12;

#[derive(Default)]
struct Ledger {
    failures: Vec<String>,
}

impl Ledger {
    fn check(&mut self, name: &str, pass: bool, detail: String) {
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failures.push(name.to_string());
        }
    }
}

fn final_error(record: &DesignRecord) -> f64 {
    record
        .iterations
        .last()
        .and_then(|it| it.relative_error)
        .unwrap_or(f64::INFINITY)
}

fn collection_recovery(ledger: &mut Ledger, model: &CellModel) -> DesignRecord {
    let truth = synthetic_truth();
    let config = DesignConfig::collection();
    let mut source = VirtualSource::new(model.clone(), truth);
    let clock = Instant::now();
    let record = run_collection_design(model, &ScaledParameterVector::box_center(), &config, &mut source)
        .expect("collection design runs");
    let wall = clock.elapsed().as_secs_f64();
    let err = final_error(&record);
    ledger.check(
        "collection recovery",
        err <= RECOVERY_TOL && wall <= COLLECTION_BUDGET_S,
        format!(
            "{} inputs, rel. error {err:.3e} (tol {RECOVERY_TOL:e}), {wall:.1} s (budget {COLLECTION_BUDGET_S} s)",
            record.iterations.len()
        ),
    );
    record
}

fn concatenated_recovery(ledger: &mut Ledger, model: &CellModel) -> DesignRecord {
    let truth = synthetic_truth();
    let config = DesignConfig::concatenated();
    let mut source = VirtualSource::new(model.clone(), truth);
    let clock = Instant::now();
    let record = run_concatenated_design(model, &ScaledParameterVector::box_center(), &config, &mut source)
        .expect("concatenated design runs");
    let wall = clock.elapsed().as_secs_f64();
    let err = final_error(&record);
    let segments = record.iterations.len();
    let time = record.experiment_time();
    ledger.check(
        "concatenated recovery",
        segments == 9 && time == 6480.0 && err <= RECOVERY_TOL && wall <= CONCATENATED_BUDGET_S,
        format!(
            "{segments} segments, {time} s experiment, rel. error {err:.3e} (tol {RECOVERY_TOL:e}), \
             {wall:.1} s (budget {CONCATENATED_BUDGET_S} s)"
        ),
    );
    record
}

fn conditioning_trend(ledger: &mut Ledger, record: &DesignRecord) {
    let first = record.iterations.first().and_then(|it| it.beta);
    let last = record.iterations.last().and_then(|it| it.beta);
    let pass = matches!((first, last), (Some(a), Some(b)) if b < a);
    let show = |b: Option<f64>| b.map_or("n/a".to_string(), |b| format!("{b:.3e}"));
    ledger.check(
        "conditioning trend",
        pass,
        format!(
            "beta_1 = {}, beta_final = {} (strictly smaller)",
            show(first),
            show(last)
        ),
    );
}

fn study_contrast(ledger: &mut Ledger, model: &CellModel, record: &DesignRecord) {
    let truth = synthetic_truth();
    let inputs = record.inputs().expect("collection inputs");
    let options = EstimationOptions::default();
    let designed = virtual_collection(model, &truth, &inputs).expect("designed data");
    let baseline = virtual_collection(model, &truth, &inputs[..1]).expect("baseline data");
    let clock = Instant::now();
    let designed = restart_study(model, &designed, STUDY_RUNS, STUDY_SEED, &options).fraction_within(&truth, STUDY_TOL);
    let baseline = restart_study(model, &baseline, STUDY_RUNS, STUDY_SEED, &options).fraction_within(&truth, STUDY_TOL);
    ledger.check(
        "study contrast",
        designed > baseline && designed >= 0.5 && baseline <= 0.2,
        format!(
            "{STUDY_RUNS} restarts, within {STUDY_TOL:e}: designed {designed:.2} (>= 0.5), \
             u1 only {baseline:.2} (<= 0.2), {:.1} s",
            clock.elapsed().as_secs_f64()
        ),
    );
}

fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn invariant_suite(ledger: &mut Ledger, model: &CellModel, designed: &[InputArray]) {
    let clock = Instant::now();
    let truth = synthetic_truth();
    let mut sub = Vec::new();

    // Lithium conservation per step, relative to the particle content, for the
    // extreme diffusion constants.
    let mut worst = 0.0f64;
    for d in [PHYSICAL_LOWER[0], PHYSICAL_UPPER[0]] {
        let solver = ParticleSolver::new(0.3, model.config().shells, d, model.time_step());
        let grid = solver.grid().clone();
        let mut xi = vec![0.5; grid.shells()];
        let mut scratch = vec![0.0; grid.shells()];
        for k in 0..5000 {
            let q = if (k / 250) % 2 == 0 { 3e-4 } else { -2e-4 };
            let before = grid.content(&xi);
            solver.step(&mut xi, q, &mut scratch);
            let expected = -solver.dt() * grid.surface_area() * q;
            worst = worst.max(((grid.content(&xi) - before) - expected).abs() / before);
        }
    }
    sub.push((
        "lithium conservation",
        worst <= CONSERVATION_TOL,
        format!("{worst:.2e} <= {CONSERVATION_TOL:e}"),
    ));

    // Zero current keeps the equilibrium state and voltage.
    let v0 = 3.8;
    let state = model.initial_state(&truth, v0).expect("equilibrium");
    let rest = CurrentProfile::rest(600.0).unwrap();
    let sim = model.simulate_from(&truth, &rest, state.clone()).expect("rest");
    let end = sim.final_state.expect("stepping path returns the state");
    let v_start = sim.trace.voltages[0];
    let drift = state
        .cathode
        .iter()
        .chain(&state.anode)
        .zip(end.cathode.iter().chain(&end.anode))
        .map(|(a, b)| (a - b).abs())
        .chain(sim.trace.voltages.iter().map(|v| (v - v_start).abs()))
        .fold(0.0, f64::max);
    sub.push((
        "equilibrium fixed point",
        drift <= FIXED_POINT_TOL,
        format!("{drift:.2e} <= {FIXED_POINT_TOL:e}"),
    ));

    // Scale/unscale round trip at the box corners, centre and truth.
    let mut worst = 0.0f64;
    for mu in [
        ScaledParameterVector(SCALED_LOWER),
        ScaledParameterVector(SCALED_UPPER),
        ScaledParameterVector::box_center(),
        truth,
    ] {
        let physical = unscale_values(&mu).unwrap();
        let back = scale_parameters(&CellParameters::from_physical(&physical, model.config())).unwrap();
        worst = back
            .0
            .iter()
            .zip(&mu.0)
            .map(|(a, b)| (a - b).abs())
            .fold(worst, f64::max);
    }
    sub.push((
        "scale round trip",
        worst <= ROUND_TRIP_TOL,
        format!("{worst:.2e} <= {ROUND_TRIP_TOL:e}"),
    ));

    // Information matrices are symmetric PSD, individually and summed.
    let infos: Vec<_> = designed
        .iter()
        .map(|u| information_matrix(&sensitivities(model, &truth, u, DEFAULT_PERTURBATION).unwrap()))
        .collect();
    let total = prior_information(model, &truth, designed, DEFAULT_PERTURBATION).unwrap();
    let psd = infos.iter().all(|m| m.is_symmetric_psd()) && total.is_symmetric_psd();
    sub.push((
        "information symmetric PSD",
        psd,
        format!("{} inputs and their sum", infos.len()),
    ));

    // Accumulating inputs never increases -log10 det.
    let phis: Vec<f64> = (1..=designed.len())
        .map(|n| accumulated_uncertainty(model, &truth, &designed[..n], DEFAULT_PERTURBATION).unwrap())
        .collect();
    let monotone = phis.windows(2).all(|w| w[1] <= w[0]);
    sub.push((
        "uncertainty non-increasing",
        monotone,
        phis.iter().map(|p| format!("{p:.3}")).collect::<Vec<_>>().join(" >= "),
    ));

    // Forward against central differences on the first input.
    let u1 = &designed[0];
    let forward = sensitivities(model, &truth, u1, DEFAULT_PERTURBATION).unwrap();
    let central = central_sensitivities(model, &truth, u1, DEFAULT_PERTURBATION).unwrap();
    let errors: Vec<f64> = (0..9)
        .map(|j| relative_l2(forward.matrix.column(j).as_slice(), central.column(j).as_slice()))
        .collect();
    let (worst_j, worst) = errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (j, e)| if e > acc.1 { (j, e) } else { acc });
    sub.push((
        "forward vs central FD",
        worst <= FD_TOL,
        format!("worst column mu{} {worst:.2e} <= {FD_TOL:e}", worst_j + 1),
    ));

    // The inner-resistance sensitivity is the current times the midpoint.
    let dev = forward
        .base
        .currents
        .iter()
        .enumerate()
        .map(|(k, &i)| (forward.matrix[(k, 3)] - 0.0365 * i).abs())
        .fold(0.0, f64::max);
    sub.push((
        "mu4 sensitivity",
        dev <= RESISTANCE_SENS_TOL,
        format!("{dev:.2e} <= {RESISTANCE_SENS_TOL:e}"),
    ));

    // One identical previous input contributes exactly 1.
    let x = u1.to_vector();
    let penalty = distance_penalty(&x, std::slice::from_ref(&x)).unwrap();
    sub.push(("penalty at zero distance", penalty == 1.0, format!("{penalty}")));

    // Unit-amplitude difference over 60 s.
    let a = CurrentProfile::uniform(&[1.0; 24], 60.0).unwrap();
    let b = CurrentProfile::uniform(&[0.0; 24], 60.0).unwrap();
    let d = a.l2_distance(&b).unwrap();
    let sqrt60 = 60f64.sqrt();
    sub.push((
        "L2 stopping distance",
        (d - sqrt60).abs() <= 1e-12,
        format!("{d} vs {sqrt60}"),
    ));

    let wall = clock.elapsed().as_secs_f64();
    for (name, pass, detail) in &sub {
        println!("    {} {name}: {detail}", if *pass { "ok  " } else { "FAIL" });
    }
    let failed: Vec<&str> = sub.iter().filter(|s| !s.1).map(|s| s.0).collect();
    ledger.check(
        "invariant suite",
        failed.is_empty() && wall < INVARIANT_BUDGET_S,
        format!(
            "{} checks, failed {failed:?}, {wall:.1} s (budget {INVARIANT_BUDGET_S} s)",
            sub.len()
        ),
    );
}

fn table_fidelity(ledger: &mut Ledger, model: &CellModel) {
    // Scaling the lower and upper physical corners reproduces the scaled box.
    // The anode rate offset uses matching corners, which is how its box is
    // defined; the full physical range would give [-22, 30].
    let mut worst = 0.0f64;
    for (physical, scaled) in [(PHYSICAL_LOWER, SCALED_LOWER), (PHYSICAL_UPPER, SCALED_UPPER)] {
        let mu = scale_parameters(&CellParameters::from_physical(&physical, model.config())).unwrap();
        worst =
            mu.0.iter()
                .zip(&scaled)
                .map(|(a, b)| (a - b).abs())
                .fold(worst, f64::max);
    }
    ledger.check(
        "bound table fidelity",
        worst <= TABLE_TOL,
        format!("max deviation {worst:.2e} <= {TABLE_TOL:e}"),
    );
}

fn synthetic_tests(ledger: &mut Ledger, collection: &DesignRecord, concatenated: &DesignRecord, dir: &Path) {
    let collection_path = dir.join("collection_record.json");
    let concatenated_path = dir.join("concatenated_record.json");
    collection.write_json(&collection_path).unwrap();
    concatenated.write_json(&concatenated_path).unwrap();

    for test in 1..=4u8 {
        let mut config = ExperimentConfig::new(Some(test));
        config.design_record = Some(
            if test <= 2 {
                &collection_path
            } else {
                &concatenated_path
            }
            .clone(),
        );
        config.output_dir = dir.join(format!("test{test}"));
        config.study.n_runs = 2;
        config.estimation.max_iterations = 30;
        if test == 1 {
            config.noise = 1e-4;
            config.noise_seed = 7;
        }
        let clock = Instant::now();
        let outcome = run_test(&config);
        let wall = clock.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(report) => {
                let s = &report.summary;
                let expected_time = match test {
                    1 => Some(600.0),
                    3 => Some(6480.0),
                    _ => None,
                };
                let time_ok = expected_time.is_none_or(|t| s.experiment_time_s == t);
                let files_ok = report
                    .bundle_files()
                    .iter()
                    .all(|f| config.output_dir.join(f).is_file());
                (
                    time_ok && files_ok && s.data_points > 0,
                    format!(
                        "{:?}/{:?}, experiment {} s{}, {} points, {} blocks, bundle {}, {wall:.1} s",
                        s.framework,
                        s.mode,
                        s.experiment_time_s,
                        expected_time.map(|t| format!(" (expected {t})")).unwrap_or_default(),
                        s.data_points,
                        s.blocks,
                        if files_ok { "complete" } else { "incomplete" },
                    ),
                )
            }
            Err(e) => (false, format!("error: {e}")),
        };
        ledger.check(&format!("synthetic test {test}"), pass, detail);
    }
}

#[test]
fn acceptance() {
    let model = CellModel::default();
    let dir = tempfile::tempdir().unwrap();
    let mut ledger = Ledger::default();

    let collection = collection_recovery(&mut ledger, &model);
    let concatenated = concatenated_recovery(&mut ledger, &model);
    conditioning_trend(&mut ledger, &collection);
    study_contrast(&mut ledger, &model, &collection);
    invariant_suite(&mut ledger, &model, &collection.inputs().unwrap());
    table_fidelity(&mut ledger, &model);
    synthetic_tests(&mut ledger, &collection, &concatenated, dir.path());

    assert!(ledger.failures.is_empty(), "failed criteria: {:?}", ledger.failures);
}
