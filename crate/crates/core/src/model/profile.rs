//! Piecewise-constant current inputs.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower/upper bound for a current amplitude, A.
pub const CURRENT_BOUND: f64 = 8.8;
/// Admissible initial voltages, V.
pub const VOLTAGE_BOUNDS: (f64, f64) = (3.3, 4.1);

/// Design variable of the collection framework: `n_u` step amplitudes over a
/// fixed horizon plus the initial voltage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputArray {
    pub amplitudes: Vec<f64>,
    pub v0: f64,
    pub horizon: f64,
}

impl InputArray {
    pub fn new(amplitudes: Vec<f64>, v0: f64, horizon: f64) -> Result<Self> {
        if amplitudes.is_empty() {
            return Err(Error::Profile("an input needs at least one step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Profile("horizon must be positive".into()));
        }
        if amplitudes.iter().any(|a| !a.is_finite()) || !v0.is_finite() {
            return Err(Error::NonFinite { what: "input array" });
        }
        Ok(Self {
            amplitudes,
            v0,
            horizon,
        })
    }

    /// The alternating `-1, +1, ...` start input with initial voltage `v0`.
    pub fn alternating(steps: usize, v0: f64, horizon: f64) -> Result<Self> {
        let amps = (0..steps).map(|j| if j % 2 == 0 { -1.0 } else { 1.0 }).collect();
        Self::new(amps, v0, horizon)
    }

    pub fn step_count(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn step_width(&self) -> f64 {
        self.horizon / self.amplitudes.len() as f64
    }

    /// `[u_1, .., u_nu, v0]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.amplitudes.clone();
        v.push(self.v0);
        v
    }

    pub fn from_vector(values: &[f64], horizon: f64) -> Result<Self> {
        let (v0, amps) = values
            .split_last()
            .ok_or_else(|| Error::Profile("empty input vector".into()))?;
        Self::new(amps.to_vec(), *v0, horizon)
    }

    pub fn lower_bounds(steps: usize) -> Vec<f64> {
        let mut v = vec![-CURRENT_BOUND; steps];
        v.push(VOLTAGE_BOUNDS.0);
        v
    }

    pub fn upper_bounds(steps: usize) -> Vec<f64> {
        let mut v = vec![CURRENT_BOUND; steps];
        v.push(VOLTAGE_BOUNDS.1);
        v
    }

    pub fn within_bounds(&self) -> bool {
        self.amplitudes
            .iter()
            .all(|a| (-CURRENT_BOUND..=CURRENT_BOUND).contains(a))
            && (VOLTAGE_BOUNDS.0..=VOLTAGE_BOUNDS.1).contains(&self.v0)
    }

    pub fn profile(&self) -> CurrentProfile {
        CurrentProfile::uniform(&self.amplitudes, self.horizon).expect("validated on construction")
    }
}

/// Right-open step function `i(t)` on `[0, t_f]`; the last step is closed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurrentProfile {
    /// `t_0 = 0 < t_1 < ... < t_m = t_f`.
    breakpoints: Vec<f64>,
    /// `amplitudes[j]` holds on `[t_j, t_{j+1})`.
    amplitudes: Vec<f64>,
}

impl CurrentProfile {
    pub fn new(breakpoints: Vec<f64>, amplitudes: Vec<f64>) -> Result<Self> {
        if amplitudes.is_empty() || breakpoints.len() != amplitudes.len() + 1 {
            return Err(Error::Profile(format!(
                "{} breakpoints do not match {} amplitudes",
                breakpoints.len(),
                amplitudes.len()
            )));
        }
        if breakpoints[0] != 0.0 {
            return Err(Error::Profile("profiles start at t = 0".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Profile("breakpoints must increase strictly".into()));
        }
        if breakpoints.iter().chain(&amplitudes).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "current profile",
            });
        }
        Ok(Self {
            breakpoints,
            amplitudes,
        })
    }

    /// `amplitudes.len()` equal steps on `[0, horizon]`.
    pub fn uniform(amplitudes: &[f64], horizon: f64) -> Result<Self> {
        let n = amplitudes.len();
        let width = horizon / n as f64;
        let breakpoints = (0..=n)
            .map(|j| if j == n { horizon } else { j as f64 * width })
            .collect();
        Self::new(breakpoints, amplitudes.to_vec())
    }

    /// A single zero-current step.
    pub fn rest(duration: f64) -> Result<Self> {
        Self::new(vec![0.0, duration], vec![0.0])
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().expect("non-empty")
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn amplitudes(&self) -> &[f64] {
        &self.amplitudes
    }

    /// `(start, end, amplitude)` for each step.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.breakpoints
            .windows(2)
            .zip(&self.amplitudes)
            .map(|(w, &a)| (w[0], w[1], a))
    }

    /// `i(t)`; right-open steps, with `i(t_f)` equal to the last amplitude.
    pub fn current_at(&self, t: f64) -> f64 {
        let idx = self.breakpoints[1..].partition_point(|&b| b <= t);
        self.amplitudes[idx.min(self.amplitudes.len() - 1)]
    }

    /// Append `other`, shifted to start at this profile's horizon.
    pub fn concatenate(&self, other: &CurrentProfile) -> CurrentProfile {
        let offset = self.horizon();
        let mut breakpoints = self.breakpoints.clone();
        breakpoints.extend(other.breakpoints[1..].iter().map(|t| t + offset));
        let mut amplitudes = self.amplitudes.clone();
        amplitudes.extend_from_slice(&other.amplitudes);
        CurrentProfile {
            breakpoints,
            amplitudes,
        }
    }

    /// Number of `step`-wide intervals covering the horizon. Every breakpoint
    /// must sit on the grid.
    pub fn grid_intervals(&self, step: f64) -> Result<usize> {
        for &b in &self.breakpoints {
            let k = (b / step).round();
            if (k * step - b).abs() > 1e-9 * step.max(b) {
                return Err(Error::StepMisaligned { time: b, step });
            }
        }
        Ok((self.horizon() / step).round() as usize)
    }

    /// `i(t_k)` on the grid `t_k = k * step`, `k = 0..=K`.
    pub fn sample_grid(&self, step: f64) -> Result<Vec<f64>> {
        let intervals = self.grid_intervals(step)?;
        let mut out = Vec::with_capacity(intervals + 1);
        let mut j = 0;
        for k in 0..=intervals {
            let t = k as f64 * step;
            // Breakpoints are grid-aligned, compare on the integer index.
            while j + 1 < self.amplitudes.len() && (self.breakpoints[j + 1] / step).round() as usize <= k {
                j += 1;
            }
            debug_assert!(t <= self.horizon() + step);
            out.push(self.amplitudes[j]);
        }
        Ok(out)
    }

    /// Exact `||self - other||_{L2(0, t_f)}` of two step functions.
    pub fn l2_distance(&self, other: &CurrentProfile) -> Result<f64> {
        let (a, b) = (self.horizon(), other.horizon());
        if (a - b).abs() > 1e-9 * a.max(b) {
            return Err(Error::HorizonMismatch { left: a, right: b });
        }
        let mut cuts: Vec<f64> = self
            .breakpoints
            .iter()
            .chain(other.breakpoints.iter())
            .copied()
            .collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup_by(|x, y| (*x - *y).abs() <= 1e-12 * a);
        let mut sum = 0.0;
        for w in cuts.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let d = self.current_at(mid) - other.current_at(mid);
            sum += d * d * (w[1] - w[0]);
        }
        Ok(sum.sqrt())
    }

    /// Total charge `int_0^t_f i dt`, C.
    pub fn charge(&self) -> f64 {
        self.steps().map(|(s, e, a)| a * (e - s)).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alternating_start_input() {
        let u = InputArray::alternating(24, 3.7, 60.0).unwrap();
        let v = u.to_vector();
        assert_eq!(v.len(), 25);
        for (j, &a) in v[..24].iter().enumerate() {
            assert_eq!(a, if j % 2 == 0 { -1.0 } else { 1.0 });
        }
        assert_eq!(v[24], 3.7);
        assert_eq!(u.step_width(), 2.5);
    }

    #[test]
    fn right_open_steps() {
        let p = CurrentProfile::uniform(&[1.0, 2.0, 3.0], 3.0).unwrap();
        assert_eq!(p.current_at(0.0), 1.0);
        assert_eq!(p.current_at(0.999), 1.0);
        assert_eq!(p.current_at(1.0), 2.0);
        assert_eq!(p.current_at(3.0), 3.0);
    }

    #[test]
    fn grid_sampling() {
        let p = CurrentProfile::uniform(&[1.0, -1.0], 1.0).unwrap();
        let g = p.sample_grid(0.1).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!(&g[..5], &[1.0; 5]);
        assert_eq!(&g[5..], &[-1.0; 6]);
        let bad = CurrentProfile::new(vec![0.0, 0.25, 1.0], vec![1.0, 2.0]).unwrap();
        assert!(matches!(bad.sample_grid(0.1), Err(Error::StepMisaligned { .. })));
    }

    #[test]
    fn concatenation_adds_durations() {
        let a = CurrentProfile::uniform(&[1.0; 6], 120.0).unwrap();
        let r = CurrentProfile::rest(600.0).unwrap();
        let seg = a.concatenate(&r);
        let two = seg.concatenate(&seg);
        assert_eq!(two.horizon(), 1440.0);
        assert_eq!(two.current_at(720.0), 1.0);
        assert_eq!(two.current_at(700.0), 0.0);
    }

    #[test]
    fn l2_distance_of_unit_offset() {
        let a = CurrentProfile::uniform(&[1.0; 24], 60.0).unwrap();
        let b = CurrentProfile::uniform(&[0.0; 24], 60.0).unwrap();
        assert!((a.l2_distance(&b).unwrap() - 60f64.sqrt()).abs() < 1e-12);
        assert_eq!(a.l2_distance(&a).unwrap(), 0.0);
        let c = CurrentProfile::uniform(&[0.0; 3], 30.0).unwrap();
        assert!(a.l2_distance(&c).is_err());
    }

    #[test]
    fn l2_distance_with_different_step_widths() {
        // Two steps vs. three steps on [0, 6]: overlap cuts at 2, 3, 4.
        let a = CurrentProfile::uniform(&[1.0, -1.0], 6.0).unwrap();
        let b = CurrentProfile::uniform(&[0.0, 2.0, 0.0], 6.0).unwrap();
        // [0,2): 1, [2,3): -1, [3,4): -3, [4,6): -1 -> 2 + 1 + 9 + 2 = 14
        assert!((a.l2_distance(&b).unwrap() - 14f64.sqrt()).abs() < 1e-12);
    }
}
