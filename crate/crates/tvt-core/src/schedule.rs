//! Scaled-linear diffusion noise schedule.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{fmath, CoreError, Result};

/// Serializable recipe for a [`DiffusionSchedule`], so configs can carry the
/// schedule as three numbers instead of the precomputed tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            steps: DiffusionSchedule::DEFAULT_STEPS,
            beta_start: DiffusionSchedule::DEFAULT_BETA_START,
            beta_end: DiffusionSchedule::DEFAULT_BETA_END,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::scaled_linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// Noise schedule over 1-indexed timesteps t in [1, steps].
///
/// Betas follow the scaled-linear rule: sqrt(beta) is linear from
/// sqrt(beta_start) to sqrt(beta_end). `alpha_bar(t)` is the cumulative
/// product of (1 - beta) up to and including t.
#[derive(Debug, Clone)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DiffusionSchedule {
    pub const DEFAULT_STEPS: usize = 1000;
    pub const DEFAULT_BETA_START: f64 = 0.000_85;
    pub const DEFAULT_BETA_END: f64 = 0.012;

    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(CoreError::InvalidConfig("schedule needs >= 1 step".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "betas must satisfy 0 < start <= end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let s0 = fmath::sqrt(beta_start);
        let s1 = fmath::sqrt(beta_end);
        let mut betas = Vec::with_capacity(steps);
        for i in 0..steps {
            let frac = if steps == 1 {
                0.0
            } else {
                i as f64 / (steps - 1) as f64
            };
            let s = s0 + (s1 - s0) * frac;
            betas.push(s * s);
        }
        let mut alpha_bars = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for &b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(DiffusionSchedule { betas, alpha_bars })
    }

    pub fn default_schedule() -> Self {
        Self::scaled_linear(
            Self::DEFAULT_STEPS,
            Self::DEFAULT_BETA_START,
            Self::DEFAULT_BETA_END,
        )
        .expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// beta at 1-indexed timestep t.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative alpha-bar at 1-indexed timestep t.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    /// Forward diffusion: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps,
    /// written into `out`.
    pub fn diffuse_into(&self, t: usize, z0: &[f64], eps: &[f64], out: &mut [f64]) {
        let ab = self.alpha_bar(t);
        let a = fmath::sqrt(ab);
        let b = fmath::sqrt(1.0 - ab);
        for ((o, &z), &e) in out.iter_mut().zip(z0).zip(eps) {
            *o = a * z + b * e;
        }
    }
}
