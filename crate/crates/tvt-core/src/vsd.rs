//! Variational score distillation for one-step restoration training.
//!
//! Two denoiser copies regularize the generator's latent output: a frozen
//! pretrained score ("phi") and a finetunable score ("theta") that tracks the
//! generator's current output distribution. The generator receives the score
//! difference as a gradient through a proxy scalar; the theta copy trains on
//! plain noise-prediction MSE over detached generator outputs.

use alloc::format;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::layers::TrainSet;
use crate::losses::mse_loss;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::Stream;
use crate::schedule::DiffusionSchedule;
use crate::tape::{ParamStore, Tape, VarId};
use crate::tensor::Tensor;
use crate::unet::{predict_noise, UNetModel};
use crate::Result;

/// Per-timestep weighting of the score difference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VsdWeight {
    /// Constant 1.
    Uniform,
    /// Signal-to-noise ratio alpha_bar / (1 - alpha_bar) at the sampled t.
    Snr,
}

/// Score-distillation settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VsdConfig {
    /// Inclusive sampled-timestep range (1-indexed into the schedule).
    pub t_min: usize,
    pub t_max: usize,
    pub weight: VsdWeight,
}

impl Default for VsdConfig {
    fn default() -> Self {
        VsdConfig {
            t_min: 20,
            t_max: 980,
            weight: VsdWeight::Uniform,
        }
    }
}

impl VsdConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.t_min == 0 || self.t_min > self.t_max || self.t_max > schedule.steps() {
            return Err(CoreError::InvalidConfig(format!(
                "timestep range [{}, {}] outside schedule 1..={}",
                self.t_min,
                self.t_max,
                schedule.steps()
            )));
        }
        Ok(())
    }

    fn weight_at(&self, schedule: &DiffusionSchedule, t: usize) -> f64 {
        match self.weight {
            VsdWeight::Uniform => 1.0,
            VsdWeight::Snr => {
                let ab = schedule.alpha_bar(t);
                ab / (1.0 - ab)
            }
        }
    }
}

/// What the generator-side term saw this step (for logging and tests).
#[derive(Debug, Clone)]
pub struct VsdSample {
    pub t: usize,
    pub weight: f64,
    /// The stop-gradded direction w(t) * (eps_phi - eps_theta) at z_t.
    pub direction: Tensor,
}

/// Builds the generator-side proxy scalar on the tape. Its gradient with
/// respect to `z_sr` is exactly `w(t) * (eps_phi(z_t) - eps_theta(z_t))`
/// where z_t diffuses the current value of `z_sr`; no gradient flows into
/// either score network (they run off-tape on the detached latent).
#[allow(clippy::too_many_arguments)]
pub fn vsd_generator_proxy(
    tape: &mut Tape,
    store: &ParamStore,
    z_sr: VarId,
    ctx: &Tensor,
    schedule: &DiffusionSchedule,
    score_phi: &UNetModel,
    score_theta: &UNetModel,
    cfg: &VsdConfig,
    rng: &mut Stream,
) -> Result<(VarId, VsdSample)> {
    cfg.validate(schedule)?;
    let t = rng.int_range(cfg.t_min as i64, cfg.t_max as i64) as usize;
    let z0 = tape.value(z_sr).clone();
    let mut eps = Tensor::zeros(z0.shape());
    rng.fill_normal(eps.data_mut());
    let mut z_t = Tensor::zeros(z0.shape());
    schedule.diffuse_into(t, z0.data(), eps.data(), z_t.data_mut());

    let e_phi = predict_noise(score_phi, store, &z_t, t as f64, ctx)?;
    let e_theta = predict_noise(score_theta, store, &z_t, t as f64, ctx)?;
    let weight = cfg.weight_at(schedule, t);
    let mut direction = Tensor::zeros(z0.shape());
    for ((d, &p), &q) in direction
        .data_mut()
        .iter_mut()
        .zip(e_phi.data())
        .zip(e_theta.data())
    {
        *d = weight * (p - q);
    }

    let dir_v = tape.constant(direction.clone());
    let proxy = tape.dot(z_sr, dir_v)?;
    Ok((
        proxy,
        VsdSample {
            t,
            weight,
            direction,
        },
    ))
}

/// One finetuning step for the theta score network: noise-prediction MSE on
/// the diffused, detached generator latents, averaged over the batch (one
/// optimizer update regardless of batch size). Returns the scalar loss.
#[allow(clippy::too_many_arguments)]
pub fn vsd_regularizer_step(
    store: &mut ParamStore,
    score_theta: &UNetModel,
    z_batch: &[Tensor],
    ctx: &Tensor,
    schedule: &DiffusionSchedule,
    cfg: &VsdConfig,
    opt: &mut AdamState,
    opt_cfg: &AdamConfig,
    rng: &mut Stream,
) -> Result<f64> {
    cfg.validate(schedule)?;
    if z_batch.is_empty() {
        return Err(CoreError::InvalidConfig(
            "regularizer step needs at least one latent".into(),
        ));
    }
    let ts = TrainSet::from_ids(store, score_theta.params());
    let mut tape = Tape::new();
    let cv = tape.constant(ctx.clone());
    let mut total: Option<VarId> = None;
    for z_sr in z_batch {
        let t = rng.int_range(cfg.t_min as i64, cfg.t_max as i64) as usize;
        let mut eps = Tensor::zeros(z_sr.shape());
        rng.fill_normal(eps.data_mut());
        let mut z_t = Tensor::zeros(z_sr.shape());
        schedule.diffuse_into(t, z_sr.data(), eps.data(), z_t.data_mut());
        let zv = tape.constant(z_t);
        let pred = score_theta.forward(&mut tape, store, &ts, zv, t as f64, cv)?;
        let target = tape.constant(eps);
        let item = mse_loss(&mut tape, pred, target)?;
        total = Some(match total {
            None => item,
            Some(acc) => tape.add(acc, item)?,
        });
    }
    let loss = tape.scale(total.expect("non-empty batch"), 1.0 / z_batch.len() as f64);
    let val = tape.value(loss).item();
    if !val.is_finite() {
        return Err(CoreError::non_finite(format!("regularizer loss = {val}")));
    }
    let grads = tape.backward(loss)?;
    for (id, _) in grads.params() {
        if !ts.is_trainable(id) {
            return Err(CoreError::frozen(format!(
                "gradient reached frozen parameter {}",
                store.name(id)
            )));
        }
    }
    opt.apply(store, &grads, opt_cfg)?;
    Ok(val)
}
