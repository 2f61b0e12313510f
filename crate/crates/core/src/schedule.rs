//! Diffusion time grid, forward noising and adjacent trajectory pairs.
//!
//! Pair construction is exact: times live on a `2^-30` lattice, shared
//! noise on a `2^-12` lattice (clamped to `[-8, 8]`) and clean signals on a
//! `2^-42` lattice. With `t_max <= 128` and `|x0| < 1024` every product and
//! sum in `x0 + t * eps` and `x_tn + (t_{n-1} - t_n) * eps` is representable
//! in `f64`, so the two members of a pair differ by exactly
//! `(t_{n-1} - t_n) * eps`, bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{SeededRng, Tensor};

pub const TIME_QUANTUM: f64 = 1.0 / (1u64 << 30) as f64;
pub const NOISE_QUANTUM: f64 = 1.0 / (1u64 << 12) as f64;
pub const SIGNAL_QUANTUM: f64 = 1.0 / (1u64 << 42) as f64;
pub const MAX_NOISE: f64 = 8.0;
pub const MAX_TIME: f64 = 128.0;
pub const MAX_SIGNAL: f64 = 1024.0;

// Adding +0.0 turns a rounded -0.0 into +0.0.
fn snap(v: f64, quantum: f64) -> f64 {
    (v / quantum).round() * quantum + 0.0
}

/// Rounds a time value onto the pair-construction lattice.
pub fn snap_time(t: f64) -> f64 {
    snap(t, TIME_QUANTUM)
}

/// Rounds a clean signal onto the pair-construction lattice.
pub fn snap_signal(x0: &Tensor) -> Result<Tensor> {
    if x0.data().iter().any(|v| v.abs() >= MAX_SIGNAL) {
        return Err(invalid!("clean signal magnitude must stay below {MAX_SIGNAL}"));
    }
    Ok(x0.map(|v| snap(v, SIGNAL_QUANTUM)))
}

fn snap_noise(v: f64) -> f64 {
    snap(v.clamp(-MAX_NOISE, MAX_NOISE), NOISE_QUANTUM)
}

/// Grid parameters before discretization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: f64,
    pub t_min: f64,
    pub rho: f64,
    /// Curriculum endpoints for the number of intervals.
    pub n_start: usize,
    pub n_end: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_max: 80.0,
            t_min: 0.002,
            rho: 7.0,
            n_start: 20,
            n_end: 80,
        }
    }
}

/// Discretized time grid `t_0 < t_1 < ... < t_N`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    t_max: f64,
    t_min: f64,
    rho: f64,
    grid: Vec<f64>,
}

impl NoiseSchedule {
    /// Warped grid `(t_min^(1/rho) + i/N * (T^(1/rho) - t_min^(1/rho)))^rho`,
    /// snapped to the time lattice. Endpoints are pinned to the snapped
    /// `t_min` and `t_max`.
    pub fn discretize(t_max: f64, t_min: f64, intervals: usize, rho: f64) -> Result<Self> {
        if intervals == 0 {
            return Err(invalid!("schedule needs at least one interval"));
        }
        if !(t_min > 0.0 && t_min < t_max) || !t_max.is_finite() {
            return Err(invalid!("need 0 < t_min < t_max, got t_min={t_min}, t_max={t_max}"));
        }
        if t_max > MAX_TIME {
            return Err(invalid!("t_max {t_max} exceeds the exact-arithmetic limit {MAX_TIME}"));
        }
        if !(rho > 0.0) {
            return Err(invalid!("rho must be positive, got {rho}"));
        }
        let lo = t_min.powf(1.0 / rho);
        let hi = t_max.powf(1.0 / rho);
        let mut grid: Vec<f64> = (0..=intervals)
            .map(|i| snap_time((lo + (i as f64 / intervals as f64) * (hi - lo)).powf(rho)))
            .collect();
        grid[0] = snap_time(t_min);
        grid[intervals] = snap_time(t_max);
        if grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid!(
                "grid with {intervals} intervals is not strictly increasing on the time lattice"
            ));
        }
        Ok(Self {
            t_max,
            t_min,
            rho,
            grid,
        })
    }

    pub fn from_config(config: &ScheduleConfig, intervals: usize) -> Result<Self> {
        Self::discretize(config.t_max, config.t_min, intervals, config.rho)
    }

    pub fn intervals(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn time(&self, n: usize) -> f64 {
        self.grid[n]
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

/// `x0 + t * eps`.
pub fn forward_sample(x0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
    if t < 0.0 {
        return Err(invalid!("negative time {t}"));
    }
    x0.zip_map(eps, |x, e| x + t * e)
}

/// Two adjacent points of one trajectory built from a single noise draw.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryPair {
    pub x_tn: Tensor,
    pub x_tn_minus1: Tensor,
    pub n: usize,
    pub eps: Tensor,
}

/// Draws one `eps` and returns `(x0 + t_n eps, x_tn + (t_{n-1} - t_n) eps)`.
pub fn adjacent_pair(
    x0: &Tensor,
    n: usize,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<TrajectoryPair> {
    if n == 0 || n > schedule.intervals() {
        return Err(invalid!(
            "interval index {n} outside 1..={}",
            schedule.intervals()
        ));
    }
    let x0 = snap_signal(x0)?;
    let mut noise = vec![0.0; x0.len()];
    rng.fill_gaussian(&mut noise);
    noise.iter_mut().for_each(|v| *v = snap_noise(*v));
    let eps = Tensor::new(x0.shape().to_vec(), noise)?;
    let (t_n, t_prev) = (schedule.time(n), schedule.time(n - 1));
    let x_tn = forward_sample(&x0, t_n, &eps)?;
    let step = t_prev - t_n;
    let x_tn_minus1 = x_tn.zip_map(&eps, |x, e| x + step * e)?;
    Ok(TrajectoryPair {
        x_tn,
        x_tn_minus1,
        n,
        eps,
    })
}

/// Time corresponding to a smoothing noise level; the two coincide when
/// `x_t = x0 + t * eps`.
pub fn sigma_to_time(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(invalid!("noise level must be positive, got {sigma}"));
    }
    Ok(sigma)
}

/// Piecewise-constant ramp of the interval count over training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CurriculumState {
    pub n_start: usize,
    pub n_end: usize,
    pub k: u64,
    pub total: u64,
}

/// Number of plateaus of the interval-count ramp.
pub const CURRICULUM_PLATEAUS: u64 = 4;

impl CurriculumState {
    /// Interval count at iteration `k`: `CURRICULUM_PLATEAUS` equal-length
    /// plateaus evenly spaced from `n_start` to `n_end`, the last one
    /// including `k = total`.
    pub fn intervals(&self) -> Result<usize> {
        if self.k > self.total {
            return Err(invalid!("iteration {} beyond total {}", self.k, self.total));
        }
        if self.n_start == 0 || self.n_end < self.n_start {
            return Err(invalid!(
                "curriculum needs 1 <= n_start <= n_end, got {}..{}",
                self.n_start,
                self.n_end
            ));
        }
        if self.total == 0 {
            return Ok(self.n_start);
        }
        let last = CURRICULUM_PLATEAUS - 1;
        let stage = ((self.k as u128 * CURRICULUM_PLATEAUS as u128 / self.total as u128) as u64).min(last);
        let span = (self.n_end - self.n_start) as f64;
        Ok(self.n_start + (span * stage as f64 / last as f64).round() as usize)
    }
}
