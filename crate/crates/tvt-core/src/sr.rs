//! One-step super-resolution pipeline.
//!
//! Inference: bicubic-upsample the low-res input to the output frame, encode
//! it with the compact autoencoder (mean latent, no sampling), run the
//! efficient denoiser once at a fixed early timestep, invert the noising
//! equation in closed form to get a clean latent, and decode. Training
//! combines pixel L1, the perceptual distance, and score distillation, and
//! updates only the denoiser wrapper's trainable groups plus a learnable
//! conditioning stub — the autoencoder, the base denoiser weights, and the
//! fixed score network stay bitwise frozen.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ce_unet::{ce_predict_noise, CeUnetModel};
use crate::error::CoreError;
use crate::fmath;
use crate::layers::TrainSet;
use crate::losses::{l1_loss, LossReport, PerceptualNet};
use crate::metrics::{psnr_y, ssim_y, summarize, ReconRecord, ReconSummary};
use crate::optim::{AdamConfig, AdamState};
use crate::resize::{resize, ResizeKernel};
use crate::rng::Stream;
use crate::schedule::{DiffusionSchedule, ScheduleSpec};
use crate::tape::{ParamId, ParamStore, Tape, VarId};
use crate::tensor::Tensor;
use crate::tvt::{check_finite, check_grad_scope};
use crate::unet::UNetModel;
use crate::vae::{decode, encode, ImageTensor, LatentTensor, VaeModel};
use crate::vsd::{vsd_generator_proxy, vsd_regularizer_step, VsdConfig};
use crate::Result;

/// Fixed upscaling factor of the restoration pipeline.
pub const SR_SCALE: usize = 4;

/// Settings for one-step restoration and its training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrConfig {
    /// Denoising timestep used at inference (1-indexed into the schedule).
    pub t: usize,
    /// Weight of the perceptual term in the training loss.
    pub lambda_perceptual: f64,
    /// Weight of the score-distillation term in the training loss.
    pub lambda_vsd: f64,
    pub schedule: ScheduleSpec,
    pub vsd: VsdConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    /// Token count of the learnable conditioning stub.
    pub context_len: usize,
    /// Embedding width of the conditioning stub; must match the denoiser.
    pub context_dim: usize,
}

impl Default for SrConfig {
    fn default() -> Self {
        SrConfig {
            t: 1,
            lambda_perceptual: 2.0,
            lambda_vsd: 1.0,
            schedule: ScheduleSpec::default(),
            vsd: VsdConfig::default(),
            optimizer: AdamConfig::default(),
            batch_size: 16,
            context_len: 77,
            context_dim: 1024,
        }
    }
}

impl SrConfig {
    /// Desk-scale settings matching the toy models.
    pub fn toy() -> Self {
        SrConfig {
            batch_size: 2,
            context_len: 4,
            context_dim: 8,
            optimizer: AdamConfig::with_lr(1e-3),
            ..SrConfig::default()
        }
    }

    /// Validates every field and returns the built schedule.
    pub fn validated_schedule(&self) -> Result<DiffusionSchedule> {
        let schedule = self.schedule.build()?;
        if self.t == 0 || self.t > schedule.steps() {
            return Err(CoreError::InvalidConfig(format!(
                "timestep {} outside schedule 1..={}",
                self.t,
                schedule.steps()
            )));
        }
        if !(self.lambda_perceptual > 0.0) || !(self.lambda_vsd > 0.0) {
            return Err(CoreError::InvalidConfig(format!(
                "loss weights must be positive, got {} and {}",
                self.lambda_perceptual, self.lambda_vsd
            )));
        }
        if self.batch_size == 0 || self.context_len == 0 || self.context_dim == 0 {
            return Err(CoreError::InvalidConfig(
                "batch size and context dims must be positive".into(),
            ));
        }
        self.vsd.validate(&schedule)?;
        self.optimizer.validate()?;
        Ok(schedule)
    }
}

/// Learnable stand-in for a prompt encoder: a fixed token matrix
/// [context_len, context_dim], trained jointly with the generator and shared
/// by every input.
#[derive(Debug, Clone)]
pub struct ConditioningStub {
    id: ParamId,
}

impl ConditioningStub {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        context_len: usize,
        context_dim: usize,
        stream: &mut Stream,
    ) -> Self {
        let mut t = Tensor::zeros(&[context_len, context_dim]);
        for v in t.data_mut() {
            *v = 0.02 * stream.normal();
        }
        ConditioningStub {
            id: store.add(name, t),
        }
    }

    pub fn param(&self) -> ParamId {
        self.id
    }

    pub fn on_tape(&self, tape: &mut Tape, store: &ParamStore, ts: &TrainSet) -> VarId {
        tape.param(store, self.id, ts.is_trainable(self.id))
    }

    pub fn value<'s>(&self, store: &'s ParamStore) -> &'s Tensor {
        store.get(self.id)
    }
}

/// Everything the restoration trainer owns, registered in one store.
pub struct SrSystem {
    /// Compact 4x autoencoder (frozen).
    pub vae: VaeModel,
    /// Efficient denoiser wrapper (its replica/adapter/low-rank groups train).
    pub ce: CeUnetModel,
    pub stub: ConditioningStub,
    /// Fixed pretrained score network (frozen).
    pub score_phi: UNetModel,
    /// Finetuned score network tracking the generator's outputs.
    pub score_theta: UNetModel,
}

impl SrSystem {
    /// Parameters the generator step updates: the wrapper's trainable groups
    /// plus the conditioning stub.
    pub fn trainable_set(&self, store: &ParamStore) -> TrainSet {
        let mut ts = self.ce.train_set(store);
        ts.extend(&[self.stub.id]);
        ts
    }

    /// Bitwise-frozen throughout training: the whole autoencoder, the base
    /// denoiser without its low-rank factors, and the fixed score network.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        let mut ids = self.vae.all_params();
        ids.extend(self.ce.frozen_ids());
        ids.extend_from_slice(self.score_phi.params());
        ids
    }
}

/// A low-res/high-res training or evaluation pair (hr sides = 4x lr sides).
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
}

/// Closed-form inversion of the noising equation:
/// z0 = (z_t - sqrt(1 - alpha_bar) * eps) / sqrt(alpha_bar).
pub fn invert_with_alpha_bar(alpha_bar: f64, z_t: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(CoreError::InvalidConfig(format!(
            "alpha_bar must be in (0, 1], got {alpha_bar}"
        )));
    }
    if z_t.shape() != eps.shape() {
        return Err(CoreError::shape(format!(
            "latent {:?} vs noise {:?}",
            z_t.shape(),
            eps.shape()
        )));
    }
    let s = fmath::sqrt(1.0 - alpha_bar);
    let inv = 1.0 / fmath::sqrt(alpha_bar);
    let mut out = Tensor::zeros(z_t.shape());
    for ((o, &z), &e) in out.data_mut().iter_mut().zip(z_t.data()).zip(eps.data()) {
        *o = (z + (-s) * e) * inv;
    }
    Ok(out)
}

/// [`invert_with_alpha_bar`] at the schedule's 1-indexed timestep `t`.
pub fn invert_noising(
    schedule: &DiffusionSchedule,
    t: usize,
    z_t: &Tensor,
    eps: &Tensor,
) -> Result<Tensor> {
    if t == 0 || t > schedule.steps() {
        return Err(CoreError::InvalidConfig(format!(
            "timestep {t} outside schedule 1..={}",
            schedule.steps()
        )));
    }
    invert_with_alpha_bar(schedule.alpha_bar(t), z_t, eps)
}

/// Same inversion built on the tape (bit-identical to the off-tape form).
fn invert_on_tape(
    tape: &mut Tape,
    schedule: &DiffusionSchedule,
    t: usize,
    z_t: VarId,
    eps: VarId,
) -> Result<VarId> {
    let ab = schedule.alpha_bar(t);
    let neg = tape.scale(eps, -fmath::sqrt(1.0 - ab));
    let num = tape.add(z_t, neg)?;
    Ok(tape.scale(num, 1.0 / fmath::sqrt(ab)))
}

/// Restores one low-res image: bicubic x4 to the output frame, encode (mean
/// latent), one denoiser call at `cfg.t`, closed-form inversion, decode.
/// Fully deterministic — no noise is injected anywhere.
pub fn one_step_restore(
    vae: &VaeModel,
    ce: &CeUnetModel,
    store: &ParamStore,
    ctx: &Tensor,
    lr: &ImageTensor,
    cfg: &SrConfig,
) -> Result<ImageTensor> {
    let schedule = cfg.validated_schedule()?;
    let (h, w) = lr.hw();
    let up = resize(lr.tensor(), SR_SCALE * h, SR_SCALE * w, ResizeKernel::Bicubic)?;
    let z = encode(vae, store, &ImageTensor::new(up)?, false, None)?;
    let eps_hat = ce_predict_noise(ce, store, z.tensor(), cfg.t as f64, ctx)?;
    let z_sr = invert_noising(&schedule, cfg.t, z.tensor(), &eps_hat)?;
    decode(vae, store, &LatentTensor::new(z_sr)?)
}

/// What one training step produced.
#[derive(Debug, Clone)]
pub struct SrStepOutcome {
    pub report: LossReport,
    /// Noise-prediction MSE of the finetuned score network's own update.
    pub regularizer_mse: f64,
}

/// One generator update followed by one finetuned-score update.
///
/// The generator loss over the batch is
/// `L1(I_SR, I_HR) + lambda_perceptual * perceptual + lambda_vsd * VSD`,
/// where the VSD term is reported as its gradient proxy (its value carries no
/// meaning; its gradient at the restored latent is the weighted score
/// difference). A non-finite total aborts with an error before any update so
/// the caller can fall back to its last good checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn sr_train_step(
    sys: &SrSystem,
    store: &mut ParamStore,
    pairs: &[ImagePair],
    percep: &PerceptualNet,
    cfg: &SrConfig,
    gen_opt: &mut AdamState,
    reg_opt: &mut AdamState,
    rng: &mut Stream,
) -> Result<SrStepOutcome> {
    let schedule = cfg.validated_schedule()?;
    if pairs.is_empty() {
        return Err(CoreError::InvalidConfig(
            "training step needs at least one pair".into(),
        ));
    }

    let ts = sys.trainable_set(store);
    let ctx_val = sys.stub.value(store).clone();
    let mut tape = Tape::new();
    let ctx_var = sys.stub.on_tape(&mut tape, store, &ts);

    let mut l1_terms = Vec::with_capacity(pairs.len());
    let mut percep_terms = Vec::with_capacity(pairs.len());
    let mut vsd_terms = Vec::with_capacity(pairs.len());
    let mut z_sr_values = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let (lh, lw) = pair.lr.hw();
        let (hh, hw) = pair.hr.hw();
        if hh != SR_SCALE * lh || hw != SR_SCALE * lw {
            return Err(CoreError::shape(format!(
                "pair [{lh},{lw}] -> [{hh},{hw}] is not a x{SR_SCALE} pair"
            )));
        }
        let up = resize(pair.lr.tensor(), hh, hw, ResizeKernel::Bicubic)?;
        // The encoder is frozen and the latent does not depend on any
        // trainable parameter, so it is computed off-tape.
        let z = encode(&sys.vae, store, &ImageTensor::new(up)?, false, None)?;
        let zv = tape.constant(z.0);
        let eps_hat = sys
            .ce
            .forward(&mut tape, store, &ts, zv, cfg.t as f64, ctx_var)?;
        let z_sr = invert_on_tape(&mut tape, &schedule, cfg.t, zv, eps_hat)?;
        z_sr_values.push(tape.value(z_sr).clone());
        let i_sr = sys.vae.forward_decode(&mut tape, store, &ts, z_sr)?;
        let hr_v = tape.constant(pair.hr.0.clone());
        l1_terms.push(l1_loss(&mut tape, i_sr, hr_v)?);
        percep_terms.push(percep.distance(&mut tape, store, i_sr, hr_v)?);
        let (proxy, _) = vsd_generator_proxy(
            &mut tape,
            store,
            z_sr,
            &ctx_val,
            &schedule,
            &sys.score_phi,
            &sys.score_theta,
            &cfg.vsd,
            rng,
        )?;
        vsd_terms.push(proxy);
    }

    let l1 = mean_of(&mut tape, &l1_terms)?;
    let perceptual = mean_of(&mut tape, &percep_terms)?;
    let vsd = mean_of(&mut tape, &vsd_terms)?;
    let p_scaled = tape.scale(perceptual, cfg.lambda_perceptual);
    let v_scaled = tape.scale(vsd, cfg.lambda_vsd);
    let partial = tape.add(l1, p_scaled)?;
    let total = tape.add(partial, v_scaled)?;

    let report = LossReport {
        l1: check_finite("sr l1", tape.value(l1).item())?,
        perceptual: check_finite("sr perceptual", tape.value(perceptual).item())?,
        gan_g: 0.0,
        gan_d: 0.0,
        kl: 0.0,
        vsd: check_finite("sr vsd proxy", tape.value(vsd).item())?,
        align: 0.0,
        lambda_d: 0.0,
        total: check_finite("sr total", tape.value(total).item())?,
    };

    let grads = tape.backward(total)?;
    check_grad_scope(store, &grads, &ts)?;
    gen_opt.apply(store, &grads, &cfg.optimizer)?;

    let regularizer_mse = vsd_regularizer_step(
        store,
        &sys.score_theta,
        &z_sr_values,
        &ctx_val,
        &schedule,
        &cfg.vsd,
        reg_opt,
        &cfg.optimizer,
        rng,
    )?;

    Ok(SrStepOutcome {
        report,
        regularizer_mse,
    })
}

fn mean_of(tape: &mut Tape, terms: &[VarId]) -> Result<VarId> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

/// Per-pair and aggregate restoration quality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrEvaluation {
    pub records: Vec<ReconRecord>,
    pub summary: ReconSummary,
}

/// Restores every pair's low-res input and scores it against the high-res
/// reference: luma PSNR (capped), luma SSIM, and the perceptual distance.
/// Records keep the input order; an empty set is an error, not an empty table.
pub fn evaluate_sr(
    vae: &VaeModel,
    ce: &CeUnetModel,
    store: &ParamStore,
    ctx: &Tensor,
    percep: &PerceptualNet,
    pairs: &[ImagePair],
    cfg: &SrConfig,
) -> Result<SrEvaluation> {
    if pairs.is_empty() {
        return Err(CoreError::InvalidConfig(
            "evaluation needs at least one pair".into(),
        ));
    }
    let mut records = Vec::with_capacity(pairs.len());
    for (index, pair) in pairs.iter().enumerate() {
        let sr = one_step_restore(vae, ce, store, ctx, &pair.lr, cfg)?;
        let mut tape = Tape::new();
        let a = tape.constant(sr.0.clone());
        let b = tape.constant(pair.hr.0.clone());
        let d = percep.distance(&mut tape, store, a, b)?;
        records.push(ReconRecord {
            index,
            psnr_y: psnr_y(sr.tensor(), pair.hr.tensor())?,
            ssim_y: ssim_y(sr.tensor(), pair.hr.tensor())?,
            perceptual: tape.value(d).item(),
        });
    }
    let summary = summarize(&records);
    Ok(SrEvaluation { records, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ce_unet::{build_ce_unet, CeUnetSpec};
    use crate::unet::{build_unet, wake_unet, UNetSpec};
    use crate::vae::{build_vae, VaeSpec};

    struct SrRig {
        store: ParamStore,
        sys: SrSystem,
        percep: PerceptualNet,
        cfg: SrConfig,
    }

    fn rig(seed: u64) -> SrRig {
        let mut store = ParamStore::new();
        let vae = build_vae(&VaeSpec::d4_toy(), "vae", &mut store, seed).unwrap();
        let ce = build_ce_unet(&CeUnetSpec::toy(), "ce", &mut store, seed + 1).unwrap();
        let mut stream = Stream::derive(seed + 2, &["stub"]);
        let cfg = SrConfig::toy();
        let stub = ConditioningStub::init(
            &mut store,
            "stub",
            cfg.context_len,
            cfg.context_dim,
            &mut stream,
        );
        let score_phi = build_unet(&UNetSpec::toy(), "phi", &mut store, seed + 3).unwrap();
        let score_theta = build_unet(&UNetSpec::toy(), "theta", &mut store, seed + 4).unwrap();
        // The frozen base and score networks stand in for pretrained models,
        // so their zero output layers get small nonzero values; the wrapper's
        // own replica head stays zero (it is trainable and starts at the
        // identity restoration).
        wake_unet(&ce.base, &mut store, seed + 5);
        wake_unet(&score_phi, &mut store, seed + 6);
        wake_unet(&score_theta, &mut store, seed + 7);
        let percep = PerceptualNet::init(&mut store);
        SrRig {
            store,
            sys: SrSystem {
                vae,
                ce,
                stub,
                score_phi,
                score_theta,
            },
            percep,
            cfg,
        }
    }

    fn toy_pair(seed: u64, lr_side: usize) -> ImagePair {
        let mut s = Stream::derive(seed, &["pair"]);
        let mut lr = Tensor::zeros(&[3, lr_side, lr_side]);
        for c in 0..3 {
            for y in 0..lr_side {
                for x in 0..lr_side {
                    let v = 0.5
                        + 0.3 * fmath::sin(0.9 * x as f64 + 0.4 * c as f64)
                        + 0.15 * fmath::cos(0.7 * y as f64)
                        + 0.05 * s.normal();
                    lr.data_mut()[(c * lr_side + y) * lr_side + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        let hr = resize(
            &lr,
            SR_SCALE * lr_side,
            SR_SCALE * lr_side,
            ResizeKernel::Bicubic,
        )
        .unwrap();
        ImagePair {
            lr: ImageTensor::new(lr).unwrap(),
            hr: ImageTensor::new(hr).unwrap(),
        }
    }

    #[test]
    fn inversion_recovers_the_clean_latent_at_every_timestep() {
        let schedule = DiffusionSchedule::default_schedule();
        let mut s = Stream::derive(41, &["inv"]);
        let mut z0 = Tensor::zeros(&[4, 3, 3]);
        s.fill_normal(z0.data_mut());
        let mut eps = Tensor::zeros(&[4, 3, 3]);
        s.fill_normal(eps.data_mut());
        let mut z_t = Tensor::zeros(&[4, 3, 3]);
        for t in 1..=schedule.steps() {
            schedule.diffuse_into(t, z0.data(), eps.data(), z_t.data_mut());
            let back = invert_noising(&schedule, t, &z_t, &eps).unwrap();
            for (&b, &z) in back.data().iter().zip(z0.data()) {
                let rel = (b - z).abs() / z.abs().max(1e-12);
                assert!(rel <= 1e-6, "t={t}: {b} vs {z}");
            }
        }
    }

    #[test]
    fn inversion_degenerate_and_zero_noise_forms() {
        let mut s = Stream::derive(42, &["deg"]);
        let mut z = Tensor::zeros(&[2, 2, 2]);
        s.fill_normal(z.data_mut());
        let mut eps = Tensor::zeros(&[2, 2, 2]);
        s.fill_normal(eps.data_mut());
        // alpha_bar = 1: the input comes back untouched, whatever eps says.
        let back = invert_with_alpha_bar(1.0, &z, &eps).unwrap();
        for (a, b) in back.data().iter().zip(z.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // eps = 0: pure elementwise rescale by 1/sqrt(alpha_bar).
        let zero = Tensor::zeros(&[2, 2, 2]);
        let schedule = DiffusionSchedule::default_schedule();
        let ab = schedule.alpha_bar(1);
        let scaled = invert_noising(&schedule, 1, &z, &zero).unwrap();
        for (&a, &b) in scaled.data().iter().zip(z.data()) {
            assert_eq!(a.to_bits(), (b * (1.0 / fmath::sqrt(ab))).to_bits());
        }
        // Range errors.
        assert!(invert_noising(&schedule, 0, &z, &zero).is_err());
        assert!(invert_noising(&schedule, 1001, &z, &zero).is_err());
        assert!(invert_with_alpha_bar(0.0, &z, &eps).is_err());
    }

    #[test]
    fn restoration_is_deterministic_with_expected_shape() {
        let r = rig(50);
        let pair = toy_pair(51, 8);
        let ctx = r.sys.stub.value(&r.store).clone();
        let a = one_step_restore(&r.sys.vae, &r.sys.ce, &r.store, &ctx, &pair.lr, &r.cfg).unwrap();
        let b = one_step_restore(&r.sys.vae, &r.sys.ce, &r.store, &ctx, &pair.lr, &r.cfg).unwrap();
        assert_eq!(a.hw(), (32, 32));
        for (x, y) in a.tensor().data().iter().zip(b.tensor().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn fresh_wrapper_predicts_zero_so_restore_rescales_the_latent() {
        // The wrapper's output head is a copy of the base's zero-initialized
        // head, so an untrained restoration reduces to decode(z / sqrt(ab)).
        let r = rig(60);
        let pair = toy_pair(61, 8);
        let ctx = r.sys.stub.value(&r.store).clone();
        let (h, w) = pair.lr.hw();
        let up = resize(pair.lr.tensor(), 4 * h, 4 * w, ResizeKernel::Bicubic).unwrap();
        let z = encode(
            &r.sys.vae,
            &r.store,
            &ImageTensor::new(up).unwrap(),
            false,
            None,
        )
        .unwrap();
        let eps_hat =
            ce_predict_noise(&r.sys.ce, &r.store, z.tensor(), 1.0, &ctx).unwrap();
        assert!(eps_hat.data().iter().all(|&v| v == 0.0));

        let restored =
            one_step_restore(&r.sys.vae, &r.sys.ce, &r.store, &ctx, &pair.lr, &r.cfg).unwrap();
        let schedule = r.cfg.validated_schedule().unwrap();
        let zero = Tensor::zeros(z.tensor().shape());
        let z_sr = invert_noising(&schedule, r.cfg.t, z.tensor(), &zero).unwrap();
        let direct = decode(&r.sys.vae, &r.store, &LatentTensor::new(z_sr).unwrap()).unwrap();
        for (a, b) in restored
            .tensor()
            .data()
            .iter()
            .zip(direct.tensor().data())
        {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn train_step_respects_the_freeze_contract() {
        let mut r = rig(70);
        let pairs = [toy_pair(71, 8), toy_pair(72, 8)];
        let frozen_before: Vec<(ParamId, Tensor)> = r
            .sys
            .frozen_ids()
            .into_iter()
            .map(|id| (id, r.store.get(id).clone()))
            .collect();
        let stub_before = r.sys.stub.value(&r.store).clone();
        let groups = r.sys.ce.trainable_groups();
        let snap = |store: &ParamStore, ids: &[ParamId]| -> Vec<Tensor> {
            ids.iter().map(|&id| store.get(id).clone()).collect()
        };
        let replicas_before = snap(&r.store, &groups.replicas);
        let adapters_before = snap(&r.store, &groups.adapters);
        let lora_before = snap(&r.store, &groups.lora);
        let theta_before = snap(&r.store, r.sys.score_theta.params());

        let mut gen_opt = AdamState::new();
        let mut reg_opt = AdamState::new();
        let mut rng = Stream::derive(73, &["step"]);
        // The wrapper's output head starts as a zero-weight copy, so the
        // first step only moves the head itself; upstream groups (adapters,
        // low-rank factors, stub) receive gradient from the second step on.
        for _ in 0..3 {
            let out = sr_train_step(
                &r.sys,
                &mut r.store,
                &pairs,
                &r.percep,
                &r.cfg,
                &mut gen_opt,
                &mut reg_opt,
                &mut rng,
            )
            .unwrap();
            assert!(out.report.total.is_finite());
            assert!(out.regularizer_mse > 0.0);
        }

        for (id, old) in &frozen_before {
            assert_eq!(
                old.data(),
                r.store.get(*id).data(),
                "frozen parameter {} moved",
                r.store.name(*id)
            );
        }
        let moved = |store: &ParamStore, ids: &[ParamId], before: &[Tensor]| -> bool {
            ids.iter()
                .zip(before)
                .any(|(&id, old)| old.data() != store.get(id).data())
        };
        assert!(moved(&r.store, &groups.replicas, &replicas_before));
        assert!(moved(&r.store, &groups.adapters, &adapters_before));
        assert!(moved(&r.store, &groups.lora, &lora_before));
        assert!(moved(&r.store, r.sys.score_theta.params(), &theta_before));
        assert!(stub_before.data() != r.sys.stub.value(&r.store).data());
    }

    #[test]
    fn perfect_pairs_with_matched_scores_give_zero_total() {
        let mut r = rig(80);
        // Make the two score networks identical so the distillation
        // direction vanishes.
        let phi_ids: Vec<ParamId> = r.sys.score_phi.params().to_vec();
        let theta_ids: Vec<ParamId> = r.sys.score_theta.params().to_vec();
        for (&src, &dst) in phi_ids.iter().zip(&theta_ids) {
            let v = r.store.get(src).clone();
            *r.store.get_mut(dst) = v;
        }
        let pair = toy_pair(81, 8);
        let ctx = r.sys.stub.value(&r.store).clone();
        let sr = one_step_restore(&r.sys.vae, &r.sys.ce, &r.store, &ctx, &pair.lr, &r.cfg).unwrap();
        let perfect = ImagePair {
            lr: pair.lr,
            hr: sr,
        };
        let mut gen_opt = AdamState::new();
        let mut reg_opt = AdamState::new();
        let mut rng = Stream::derive(82, &["zero"]);
        let out = sr_train_step(
            &r.sys,
            &mut r.store,
            &[perfect],
            &r.percep,
            &r.cfg,
            &mut gen_opt,
            &mut reg_opt,
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.report.l1, 0.0);
        assert_eq!(out.report.perceptual, 0.0);
        assert_eq!(out.report.vsd, 0.0);
        assert_eq!(out.report.total, 0.0);
    }

    #[test]
    fn a_few_steps_reduce_the_reconstruction_loss() {
        let mut r = rig(90);
        r.cfg.lambda_vsd = 0.1;
        let pairs = [toy_pair(91, 8)];
        let mut gen_opt = AdamState::new();
        let mut reg_opt = AdamState::new();
        let mut rng = Stream::derive(92, &["fit"]);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..12 {
            let out = sr_train_step(
                &r.sys,
                &mut r.store,
                &pairs,
                &r.percep,
                &r.cfg,
                &mut gen_opt,
                &mut reg_opt,
                &mut rng,
            )
            .unwrap();
            let rec = out.report.l1 + r.cfg.lambda_perceptual * out.report.perceptual;
            if step == 0 {
                first = rec;
            }
            last = rec;
        }
        assert!(
            last < first,
            "reconstruction loss did not improve: {first} -> {last}"
        );
    }

    #[test]
    fn evaluation_reports_capped_metrics_for_identical_pairs() {
        let r = rig(100);
        let ctx = r.sys.stub.value(&r.store).clone();
        let lr_a = toy_pair(101, 8).lr;
        let lr_b = toy_pair(102, 8).lr;
        // Use each input's own restoration as its reference: metrics must hit
        // their caps exactly.
        let pairs: Vec<ImagePair> = [lr_a, lr_b]
            .into_iter()
            .map(|lr| {
                let hr =
                    one_step_restore(&r.sys.vae, &r.sys.ce, &r.store, &ctx, &lr, &r.cfg).unwrap();
                ImagePair { lr, hr }
            })
            .collect();
        let eval = evaluate_sr(
            &r.sys.vae,
            &r.sys.ce,
            &r.store,
            &ctx,
            &r.percep,
            &pairs,
            &r.cfg,
        )
        .unwrap();
        assert_eq!(eval.records.len(), 2);
        for (i, rec) in eval.records.iter().enumerate() {
            assert_eq!(rec.index, i);
            assert_eq!(rec.psnr_y, crate::metrics::PSNR_CAP_DB);
            assert_eq!(rec.ssim_y, 1.0);
            assert_eq!(rec.perceptual, 0.0);
        }
        assert_eq!(eval.summary.count, 2);
        assert_eq!(eval.summary.mean_psnr_y, crate::metrics::PSNR_CAP_DB);

        let empty: [ImagePair; 0] = [];
        assert!(evaluate_sr(
            &r.sys.vae,
            &r.sys.ce,
            &r.store,
            &ctx,
            &r.percep,
            &empty,
            &r.cfg,
        )
        .is_err());
    }
}
