use nalgebra::DMatrix;
use proptest::prelude::*;

use spm_oid::design::stopping_criterion;
use spm_oid::io::reconstruct_profile;
use spm_oid::model::params::{scale_parameters, unscale_values, CellParameters, SCALED_LOWER, SCALED_UPPER};
use spm_oid::model::{CurrentProfile, ModelConfig, ParticleSolver, ScaledParameterVector};
use spm_oid::sensitivity::{d_criterion, distance_penalty, weighted_gram, InformationMatrix};

const STEP: f64 = 0.1;

fn scaled_vector() -> impl Strategy<Value = ScaledParameterVector> {
    let ranges: Vec<_> = (0..9).map(|j| SCALED_LOWER[j]..=SCALED_UPPER[j]).collect();
    ranges.prop_map(|v| ScaledParameterVector::from_slice(&v).unwrap())
}

/// Grid-aligned step profiles: (steps in grid units, amplitude).
fn grid_profile() -> impl Strategy<Value = CurrentProfile> {
    prop::collection::vec((1usize..40, -8.8f64..8.8), 1..12).prop_map(|steps| {
        let mut breakpoints = vec![0.0];
        let mut k = 0;
        for (len, _) in &steps {
            k += len;
            breakpoints.push(k as f64 * STEP);
        }
        CurrentProfile::new(breakpoints, steps.iter().map(|s| s.1).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_round_trips(mu in scaled_vector()) {
        let config = ModelConfig::default();
        let physical = unscale_values(&mu).unwrap();
        let back = scale_parameters(&CellParameters::from_physical(&physical, &config)).unwrap();
        for j in 0..9 {
            prop_assert!((back.0[j] - mu.0[j]).abs() <= 1e-12, "component {}: {} vs {}", j + 1, back.0[j], mu.0[j]);
        }
    }

    // Relative to the particle's content: the per-step change itself is too
    // small for its own 1e-12 to survive rounding of the stored state.
    #[test]
    fn diffusion_step_conserves_lithium(
        log_d in -4.0f64..-2.0,
        fluxes in prop::collection::vec(prop_oneof![-1e-3f64..-1e-6, 1e-6f64..1e-3], 1..200),
    ) {
        let solver = ParticleSolver::new(0.35, 50, 10f64.powf(log_d), STEP);
        let grid = solver.grid().clone();
        let mut xi = vec![0.4; 50];
        let mut scratch = vec![0.0; 50];
        for q in fluxes {
            let before = grid.content(&xi);
            solver.step(&mut xi, q, &mut scratch);
            let expected = -solver.dt() * grid.surface_area() * q;
            let change = grid.content(&xi) - before;
            prop_assert!((change - expected).abs() <= 1e-12 * before, "{change} vs {expected}");
        }
    }

    #[test]
    fn gram_matrices_are_psd(
        rows in 1usize..30,
        seed in prop::collection::vec(-10.0f64..10.0, 30 * 9),
        weights in prop::collection::vec(0.0f64..2.0, 30),
    ) {
        let s = DMatrix::from_fn(rows, 9, |i, j| seed[i * 9 + j]);
        let m = weighted_gram(&s, &weights[..rows]);
        prop_assert!(m.is_symmetric_psd());
        prop_assert!((m + m).is_symmetric_psd());
    }

    #[test]
    fn adding_information_never_raises_uncertainty(
        seed in prop::collection::vec(-1.0f64..1.0, 12 * 9),
        extra in prop::collection::vec(-1.0f64..1.0, 3 * 9),
    ) {
        let a = weighted_gram(&DMatrix::from_fn(12, 9, |i, j| seed[i * 9 + j]), &[1.0; 12]);
        let b = weighted_gram(&DMatrix::from_fn(3, 9, |i, j| extra[i * 9 + j]), &[1.0; 3]);
        let before = d_criterion(&(a + InformationMatrix::identity()));
        let after = d_criterion(&(a + b + InformationMatrix::identity()));
        prop_assert!(after <= before + 1e-9, "{after} > {before}");
    }

    #[test]
    fn penalty_counts_coincident_inputs(
        u in prop::collection::vec(-8.8f64..8.8, 25),
        others in prop::collection::vec(prop::collection::vec(-8.8f64..8.8, 25), 0..5),
    ) {
        let p = distance_penalty(&u, &others).unwrap();
        prop_assert!(p >= 0.0 && p <= others.len() as f64);
        let mut with_self = others.clone();
        with_self.push(u.clone());
        let q = distance_penalty(&u, &with_self).unwrap();
        prop_assert!((q - p - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn l2_distance_is_a_metric(a in grid_profile(), amps in prop::collection::vec(-8.8f64..8.8, 1..6)) {
        let b = CurrentProfile::uniform(&amps, a.horizon()).unwrap();
        let zero = CurrentProfile::rest(a.horizon()).unwrap();
        let ab = a.l2_distance(&b).unwrap();
        prop_assert!((ab - b.l2_distance(&a).unwrap()).abs() <= 1e-12 * ab.max(1.0));
        prop_assert!(a.l2_distance(&a).unwrap() == 0.0);
        prop_assert!(ab <= a.l2_distance(&zero).unwrap() + zero.l2_distance(&b).unwrap() + 1e-9);
        prop_assert!(!stopping_criterion(&a, &[], f64::INFINITY).unwrap());
    }

    #[test]
    fn sampled_profiles_reconstruct(profile in grid_profile()) {
        let currents = profile.sample_grid(STEP).unwrap();
        let times: Vec<f64> = (0..currents.len()).map(|k| k as f64 * STEP).collect();
        let rebuilt = reconstruct_profile(&times, &currents, STEP).unwrap();
        prop_assert!((rebuilt.horizon() - profile.horizon()).abs() <= 1e-9);
        prop_assert!(rebuilt.l2_distance(&profile).unwrap() <= 1e-9);
    }
}
