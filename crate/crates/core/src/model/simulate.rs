use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::diffusion::{CellState, ParticleSolver};
use super::kinetics::{boundary_flux, electrode_potential};
use super::ocv::{rk_ocv, SurfaceGuard};
use super::params::{cell_parameters, CellParameters, ScaledParameterVector};
use super::profile::{CurrentProfile, InputArray};
use crate::{Error, Result};

/// Discrete voltage output on a strictly increasing time grid.
///
/// `voltages[k]` is the value just after `t_k`, i.e. with the current of the
/// step that starts there. Where the current jumps, the value just before
/// `t_k` (same state, previous current) is kept in `left_limits` so that
/// interpolation inside a step never mixes two currents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoltageTrace {
    pub times: Vec<f64>,
    pub voltages: Vec<f64>,
    pub currents: Vec<f64>,
    /// `(k, v(t_k^-))` for every sample index `k > 0` at a current jump.
    #[serde(default)]
    pub left_limits: Vec<(usize, f64)>,
}

impl VoltageTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.len() != self.voltages.len() || self.times.len() != self.currents.len() {
            return Err(Error::Data("trace columns differ in length".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("trace times must increase strictly".into()));
        }
        if self
            .times
            .iter()
            .chain(&self.voltages)
            .chain(&self.currents)
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite { what: "voltage trace" });
        }
        Ok(())
    }

    /// Linear interpolation of the voltage at `t` within the step that
    /// contains it, clamped to the grid ends.
    pub fn voltage_at(&self, t: f64) -> f64 {
        let n = self.times.len();
        if t <= self.times[0] {
            return self.voltages[0];
        }
        if t >= self.times[n - 1] {
            return self.voltages[n - 1];
        }
        let hi = self.times.partition_point(|&x| x <= t);
        let lo = hi - 1;
        let (t0, t1) = (self.times[lo], self.times[hi]);
        let w = (t - t0) / (t1 - t0);
        let end = match self.left_limits.binary_search_by_key(&hi, |&(k, _)| k) {
            Ok(j) => self.left_limits[j].1,
            Err(_) => self.voltages[hi],
        };
        self.voltages[lo] + w * (end - self.voltages[lo])
    }
}

/// Result of one simulation run.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub trace: VoltageTrace,
    /// Radial profiles at the end; only produced by the stepping path.
    pub final_state: Option<CellState>,
    pub clamp_events: usize,
}

/// Cathode surface concentration that puts the cell at open-circuit voltage
/// `v0`, by bracketing bisection after a monotonicity scan.
pub fn initial_cathode_soc(params: &CellParameters, v0: f64, guard: &SurfaceGuard, scan_points: usize) -> Result<f64> {
    if !v0.is_finite() {
        return Err(Error::NonFinite {
            what: "initial voltage",
        });
    }
    let vt = params.thermal_voltage();
    let xi_a = guard
        .apply(params.anode_initial_soc, params.anode.max_active_order())?
        .xi;
    let target = v0 - rk_ocv(&params.anode, xi_a, vt);
    let f = |xi: f64| rk_ocv(&params.cathode, xi, vt) - target;

    let (lo, hi) = (guard.clamp, 1.0 - guard.clamp);
    let n = scan_points.max(2);
    let mut crossings = 0;
    let mut bracket = None;
    let mut prev_x = lo;
    let mut prev_f = f(lo);
    if prev_f == 0.0 {
        return Ok(lo);
    }
    for i in 1..n {
        let x = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let fx = f(x);
        if fx == 0.0 || (fx < 0.0) != (prev_f < 0.0) {
            crossings += 1;
            if bracket.is_none() {
                bracket = Some((prev_x, x, prev_f));
            }
        }
        prev_x = x;
        prev_f = fx;
    }
    let (mut a, mut b, mut fa) = match (crossings, bracket) {
        (1, Some(br)) => br,
        (0, _) => return Err(Error::VoltageUnreachable { v0 }),
        _ => return Err(Error::NonMonotoneOcv { v0, crossings }),
    };
    loop {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = f(m);
        if fm == 0.0 {
            return Ok(m);
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    // Pick the endpoint with the smaller residual.
    Ok(if f(a).abs() <= f(b).abs() { a } else { b })
}

/// Step responses kept per `(radius, diffusion)` bit pattern.
const RESPONSE_CACHE_LIMIT: usize = 48;

type ResponseKey = (u64, u64);

/// Outer-shell step responses `G[n]`: the outer-shell value after `n` steps
/// of unit surface flux from a zero state. Read-mostly and shared by clones
/// of a model; cached values are bit-identical to recomputed ones.
#[derive(Debug, Default)]
struct ResponseCache {
    map: Mutex<HashMap<ResponseKey, Arc<Vec<f64>>>>,
}

/// The single-particle cell model with its fixed configuration.
///
/// Diffusion is linear and time-invariant for fixed `(R, D)` and the
/// current is piecewise constant, so simulations from an equilibrium state
/// superpose cached outer-shell step responses at the current jumps instead
/// of stepping the full radial profile. [`CellModel::simulate_from`] steps
/// explicitly and handles arbitrary initial states.
#[derive(Clone, Debug, Default)]
pub struct CellModel {
    config: ModelConfig,
    responses: Arc<ResponseCache>,
}

/// Everything the voltage map needs, resolved once per simulation.
struct OutputMap<'a> {
    params: &'a CellParameters,
    vt: f64,
    guard: SurfaceGuard,
    order_c: Option<usize>,
    order_a: Option<usize>,
    /// Surface flux `j / (rho c)` per ampere.
    q_c_unit: f64,
    q_a_unit: f64,
}

impl<'a> OutputMap<'a> {
    fn new(params: &'a CellParameters, guard: SurfaceGuard) -> Self {
        let faraday = params.faraday;
        Self {
            params,
            vt: params.thermal_voltage(),
            guard,
            order_c: params.cathode.max_active_order(),
            order_a: params.anode.max_active_order(),
            q_c_unit: boundary_flux(&params.cathode, 1.0, faraday) / params.cathode.density_capacity,
            q_a_unit: boundary_flux(&params.anode, 1.0, faraday) / params.anode.density_capacity,
        }
    }

    /// Cell voltage from the extrapolated surface values; returns the number
    /// of guard events alongside.
    fn voltage(&self, surface_c: f64, surface_a: f64, i: f64) -> Result<(f64, usize)> {
        let p = self.params;
        let sc = self.guard.apply(surface_c, self.order_c)?;
        let sa = self.guard.apply(surface_a, self.order_a)?;
        let u_c = electrode_potential(&p.cathode, sc.xi, i, self.vt, p.faraday, "cathode")?;
        let u_a = electrode_potential(&p.anode, sa.xi, i, self.vt, p.faraday, "anode")?;
        let v = u_c + u_a + i * p.inner_resistance;
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "voltage" });
        }
        Ok((v, sc.event as usize + sa.event as usize))
    }
}

impl CellModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            responses: Arc::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn time_step(&self) -> f64 {
        self.config.time_step
    }

    pub fn guard(&self) -> SurfaceGuard {
        SurfaceGuard {
            clamp: self.config.surface_clamp,
            pole_guard: self.config.pole_guard,
        }
    }

    pub fn parameters(&self, mu: &ScaledParameterVector) -> Result<CellParameters> {
        cell_parameters(mu, &self.config)
    }

    /// Equilibrium state at open-circuit voltage `v0`.
    pub fn initial_state(&self, mu: &ScaledParameterVector, v0: f64) -> Result<CellState> {
        let params = self.parameters(mu)?;
        let xi_c = initial_cathode_soc(&params, v0, &self.guard(), self.config.ocv_scan_points)?;
        Ok(CellState::uniform(xi_c, params.anode_initial_soc, self.config.shells))
    }

    fn step_response(&self, radius: f64, diffusion: f64, steps: usize) -> Arc<Vec<f64>> {
        let key = (radius.to_bits(), diffusion.to_bits());
        if let Some(g) = self.responses.map.lock().expect("cache lock").get(&key) {
            if g.len() > steps {
                return Arc::clone(g);
            }
        }
        let shells = self.config.shells;
        let solver = ParticleSolver::new(radius, shells, diffusion, self.config.time_step);
        let mut xi = vec![0.0; shells];
        let mut scratch = vec![0.0; shells];
        let mut g = Vec::with_capacity(steps + 1);
        g.push(0.0);
        for _ in 0..steps {
            solver.step(&mut xi, 1.0, &mut scratch);
            g.push(xi[shells - 1]);
        }
        let g = Arc::new(g);
        let mut map = self.responses.map.lock().expect("cache lock");
        if map.len() >= RESPONSE_CACHE_LIMIT {
            map.clear();
        }
        map.insert(key, Arc::clone(&g));
        g
    }

    /// Simulate `profile` from the equilibrium at `v0`.
    pub fn simulate(&self, mu: &ScaledParameterVector, profile: &CurrentProfile, v0: f64) -> Result<Simulation> {
        self.simulate_window(mu, profile, v0, 0.0)
    }

    pub fn simulate_input(&self, mu: &ScaledParameterVector, input: &InputArray) -> Result<Simulation> {
        self.simulate(mu, &input.profile(), input.v0)
    }

    /// Like [`CellModel::simulate`] but only samples `t_k >= start` are
    /// produced; the dynamics before `start` are still accounted for. The
    /// returned simulation carries no final state.
    pub fn simulate_window(
        &self,
        mu: &ScaledParameterVector,
        profile: &CurrentProfile,
        v0: f64,
        start: f64,
    ) -> Result<Simulation> {
        mu.check_admissible()?;
        let params = self.parameters(mu)?;
        let dt = self.config.time_step;
        let currents = profile.sample_grid(dt)?;
        let last = currents.len() - 1;
        let first = ((start / dt).round().max(0.0) as usize).min(last);
        let xi_c0 = initial_cathode_soc(&params, v0, &self.guard(), self.config.ocv_scan_points)?;
        let xi_a0 = params.anode_initial_soc;

        let map = OutputMap::new(&params, self.guard());
        let g_c = self.step_response(params.cathode.radius, params.cathode.diffusion, last);
        let g_a = self.step_response(params.anode.radius, params.anode.diffusion, last);
        let half_dr_c = 0.5 * params.cathode.radius / self.config.shells as f64 / params.cathode.diffusion;
        let half_dr_a = 0.5 * params.anode.radius / self.config.shells as f64 / params.anode.diffusion;

        // Current jumps `(k_j, delta_i)`; the flux of step k -> k+1 is i(t_k).
        let mut jumps: Vec<(usize, f64)> = Vec::new();
        let mut prev = 0.0;
        for (k, &i) in currents.iter().enumerate() {
            if i != prev {
                jumps.push((k, i - prev));
                prev = i;
            }
        }

        let len = last + 1 - first;
        let mut times = Vec::with_capacity(len);
        let mut voltages = Vec::with_capacity(len);
        let mut left_limits = Vec::new();
        let mut clamp_events = 0usize;
        for k in first..=last {
            // Charge-weighted response sum in amperes, shared by both particles.
            let (mut sum_c, mut sum_a) = (0.0, 0.0);
            for &(kj, di) in jumps.iter().take_while(|(kj, _)| *kj < k) {
                sum_c += di * g_c[k - kj];
                sum_a += di * g_a[k - kj];
            }
            let mean_c = xi_c0 + map.q_c_unit * sum_c;
            let mean_a = xi_a0 + map.q_a_unit * sum_a;
            let surfaces = |i: f64| {
                (
                    mean_c - half_dr_c * map.q_c_unit * i,
                    mean_a - half_dr_a * map.q_a_unit * i,
                )
            };
            let i = currents[k];
            let (surface_c, surface_a) = surfaces(i);
            let (v, events) = map.voltage(surface_c, surface_a, i)?;
            clamp_events += events;
            if k > first && currents[k - 1] != i {
                let (sc, sa) = surfaces(currents[k - 1]);
                left_limits.push((k - first, map.voltage(sc, sa, currents[k - 1])?.0));
            }
            times.push(k as f64 * dt);
            voltages.push(v);
        }
        self.check_budget(clamp_events)?;
        Ok(Simulation {
            trace: VoltageTrace {
                times,
                voltages,
                currents: currents[first..].to_vec(),
                left_limits,
            },
            final_state: None,
            clamp_events,
        })
    }

    fn check_budget(&self, clamp_events: usize) -> Result<()> {
        match self.config.clamp_budget {
            Some(budget) if clamp_events > budget => Err(Error::Saturation {
                events: clamp_events,
                budget,
            }),
            _ => Ok(()),
        }
    }

    /// Simulate `profile` starting from an arbitrary state by stepping the
    /// radial profiles; output times are offset by `state.time`.
    pub fn simulate_from(
        &self,
        mu: &ScaledParameterVector,
        profile: &CurrentProfile,
        mut state: CellState,
    ) -> Result<Simulation> {
        mu.check_admissible()?;
        let params = self.parameters(mu)?;
        let dt = self.config.time_step;
        let currents = profile.sample_grid(dt)?;
        let shells = self.config.shells;
        if state.cathode.len() != shells || state.anode.len() != shells {
            return Err(Error::Data(format!(
                "state has {}/{} shells, model uses {shells}",
                state.cathode.len(),
                state.anode.len()
            )));
        }

        let solver_c = ParticleSolver::new(params.cathode.radius, shells, params.cathode.diffusion, dt);
        let solver_a = ParticleSolver::new(params.anode.radius, shells, params.anode.diffusion, dt);
        let map = OutputMap::new(&params, self.guard());

        let t0 = state.time;
        let mut times = Vec::with_capacity(currents.len());
        let mut voltages = Vec::with_capacity(currents.len());
        let mut scratch = vec![0.0; shells];
        let mut clamp_events = 0usize;
        let mut left_limits = Vec::new();
        let last = currents.len() - 1;

        for (k, &i) in currents.iter().enumerate() {
            let output = |i: f64| {
                map.voltage(
                    solver_c.surface(&state.cathode, map.q_c_unit * i),
                    solver_a.surface(&state.anode, map.q_a_unit * i),
                    i,
                )
            };
            let (v, events) = output(i)?;
            clamp_events += events;
            if k > 0 && currents[k - 1] != i {
                left_limits.push((k, output(currents[k - 1])?.0));
            }
            let q_c = map.q_c_unit * i;
            let q_a = map.q_a_unit * i;
            times.push(t0 + k as f64 * dt);
            voltages.push(v);
            if k < last {
                solver_c.step(&mut state.cathode, q_c, &mut scratch);
                solver_a.step(&mut state.anode, q_a, &mut scratch);
            }
        }
        self.check_budget(clamp_events)?;
        state.time = t0 + last as f64 * dt;
        Ok(Simulation {
            trace: VoltageTrace {
                times,
                voltages,
                currents,
                left_limits,
            },
            final_state: Some(state),
            clamp_events,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::synthetic_truth;

    fn model() -> CellModel {
        CellModel::default()
    }

    #[test]
    fn constructed_root_is_recovered() {
        let m = model();
        let p = m.parameters(&synthetic_truth()).unwrap();
        let vt = p.thermal_voltage();
        let v0 = rk_ocv(&p.cathode, 0.5, vt) + rk_ocv(&p.anode, p.anode_initial_soc, vt);
        let xi = initial_cathode_soc(&p, v0, &m.guard(), 512).unwrap();
        assert!((xi - 0.5).abs() < 1e-10);
    }

    #[test]
    fn unreachable_voltage_is_an_error() {
        let m = model();
        let p = m.parameters(&synthetic_truth()).unwrap();
        assert!(matches!(
            initial_cathode_soc(&p, 9.0, &m.guard(), 512),
            Err(Error::VoltageUnreachable { .. })
        ));
    }

    #[test]
    fn non_monotone_ocv_is_an_error() {
        let m = model();
        let mut p = m.parameters(&synthetic_truth()).unwrap();
        // A strongly positive order-0 coefficient makes the OCV rise in the
        // middle, giving three roots for a mid-range voltage.
        p.cathode.rk_coefficients = vec![6.0];
        let vt = p.thermal_voltage();
        let v0 = rk_ocv(&p.cathode, 0.5, vt) + rk_ocv(&p.anode, p.anode_initial_soc, vt);
        assert!(matches!(
            initial_cathode_soc(&p, v0, &m.guard(), 512),
            Err(Error::NonMonotoneOcv { crossings: 3, .. })
        ));
    }

    #[test]
    fn zero_current_is_steady() {
        let m = model();
        let p = CurrentProfile::rest(60.0).unwrap();
        let sim = m.simulate(&synthetic_truth(), &p, 3.8).unwrap();
        assert_eq!(sim.trace.len(), 601);
        for &v in &sim.trace.voltages {
            assert!((v - 3.8).abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn reruns_are_bit_identical() {
        let m = model();
        let u = InputArray::alternating(24, 3.7, 60.0).unwrap();
        let a = m.simulate_input(&synthetic_truth(), &u).unwrap();
        let b = m.simulate_input(&synthetic_truth(), &u).unwrap();
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn inner_resistance_enters_linearly() {
        let m = model();
        let u = InputArray::new(vec![2.0, -3.0, 5.0, 0.0, 8.8, -8.8], 3.9, 60.0).unwrap();
        let mu = synthetic_truth();
        let mu2 = mu.with_component(3, mu.0[3] + 0.25);
        let a = m.simulate_input(&mu, &u).unwrap().trace;
        let b = m.simulate_input(&mu2, &u).unwrap().trace;
        let delta_r = 0.25 * 0.0365;
        for k in 0..a.len() {
            let dv = b.voltages[k] - a.voltages[k];
            assert!((dv - a.currents[k] * delta_r).abs() < 1e-12);
        }
    }

    #[test]
    fn superposition_matches_stepping() {
        let m = model();
        let mu = synthetic_truth();
        let amps: Vec<f64> = (0..24).map(|k| ((k * 7) % 11) as f64 - 5.0).collect();
        let u = InputArray::new(amps, 3.8, 60.0).unwrap();
        let fast = m.simulate_input(&mu, &u).unwrap().trace;
        let state = m.initial_state(&mu, u.v0).unwrap();
        let slow = m.simulate_from(&mu, &u.profile(), state).unwrap().trace;
        assert_eq!(fast.times, slow.times);
        for (a, b) in fast.voltages.iter().zip(&slow.voltages) {
            assert!((a - b).abs() < 1e-11, "{a} vs {b}");
        }
        assert_eq!(fast.left_limits.len(), slow.left_limits.len());
        for (a, b) in fast.left_limits.iter().zip(&slow.left_limits) {
            assert_eq!(a.0, b.0);
            assert!((a.1 - b.1).abs() < 1e-11);
        }
    }

    #[test]
    fn left_limit_is_the_closing_value_of_the_prefix() {
        let m = model();
        let mu = synthetic_truth();
        let u = InputArray::new(vec![4.0, -6.0, 2.0], 3.7, 30.0).unwrap();
        let full = m.simulate_input(&mu, &u).unwrap().trace;
        let prefix = InputArray::new(vec![4.0], 3.7, 10.0).unwrap();
        let head = m.simulate_input(&mu, &prefix).unwrap().trace;
        let (k, v) = full.left_limits[0];
        assert_eq!(k, 100);
        assert_eq!(v, *head.voltages.last().unwrap());
        assert_eq!(full.left_limits.len(), 2);
    }

    #[test]
    fn window_matches_full_run() {
        let m = model();
        let mu = synthetic_truth();
        let u = InputArray::new(vec![3.0, -2.0, 0.0, 8.8, -8.8, 1.0], 3.6, 60.0).unwrap();
        let full = m.simulate_input(&mu, &u).unwrap().trace;
        let tail = m.simulate_window(&mu, &u.profile(), u.v0, 30.0).unwrap().trace;
        assert_eq!(tail.len(), 301);
        assert_eq!(tail.times[0], 30.0);
        assert_eq!(&full.voltages[300..], &tail.voltages[..]);
        let shifted: Vec<(usize, f64)> = full
            .left_limits
            .iter()
            .filter(|(k, _)| *k > 300)
            .map(|&(k, v)| (k - 300, v))
            .collect();
        assert_eq!(tail.left_limits, shifted);
    }

    #[test]
    fn interpolation_hits_nodes() {
        let t = VoltageTrace {
            times: vec![0.0, 1.0, 2.0],
            voltages: vec![3.0, 4.0, 2.0],
            currents: vec![0.0; 3],
            left_limits: Vec::new(),
        };
        assert_eq!(t.voltage_at(1.0), 4.0);
        assert_eq!(t.voltage_at(0.5), 3.5);
        assert_eq!(t.voltage_at(1.5), 3.0);
        assert_eq!(t.voltage_at(-1.0), 3.0);
        let jump = VoltageTrace {
            left_limits: vec![(1, 3.5)],
            ..t
        };
        assert_eq!(jump.voltage_at(1.0), 4.0);
        assert_eq!(jump.voltage_at(0.5), 3.25);
        assert_eq!(jump.voltage_at(1.5), 3.0);
    }
}
