//! Two-stage transfer training for the compact factor-4 autoencoder.
//!
//! Stage 1 aligns the compact decoder with the reference factor-8 encoder's
//! latent space: each image is bicubic-upsampled 2x, encoded by the frozen
//! reference encoder (whose factor-8 grid on the 2x frame equals the compact
//! model's factor-4 grid on the original frame), and the compact decoder
//! learns to reconstruct the original image from that latent, with an
//! adversarial term whose weight balances reconstruction and adversarial
//! gradient norms at the decoder's last convolution. Stage 2 freezes the
//! decoder and trains the compact encoder so its own latents decode well.
//! Joint single-stage variants (from-scratch and latent-alignment-penalty
//! training) exist as ablation presets.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::layers::TrainSet;
use crate::losses::{
    adaptive_gan_weight, grad_norm, hinge_d_loss, hinge_g_loss, l1_loss, kl_on_tape,
    LossReport, PatchDiscriminator, PerceptualNet,
};
use crate::optim::{AdamConfig, AdamState};
use crate::resize::{resize, ResizeKernel};
use crate::rng::Stream;
use crate::tape::{Grads, ParamId, ParamStore, Tape, VarId};
use crate::tensor::Tensor;
use crate::vae::{encode, ImageTensor, VaeModel};
use crate::Result;

/// Stage-1 (decoder transfer) settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvtStage1Config {
    /// Fixed at 2: ties the reference factor-8 grid to the compact factor-4
    /// grid.
    pub upsample_factor: usize,
    /// Denominator floor in the adaptive adversarial weight.
    pub lambda_eps: f64,
    /// Step index from which the adversarial term and discriminator run.
    pub gan_start_step: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub disc_optimizer: AdamConfig,
}

impl Default for TvtStage1Config {
    fn default() -> Self {
        TvtStage1Config {
            upsample_factor: 2,
            lambda_eps: 1e-6,
            gan_start_step: 500,
            total_steps: 2000,
            batch_size: 2,
            optimizer: AdamConfig::default(),
            disc_optimizer: AdamConfig::default(),
        }
    }
}

impl TvtStage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.upsample_factor != 2 {
            return Err(CoreError::invalid_spec(
                "stage-1 upsample factor is fixed at 2",
            ));
        }
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(CoreError::invalid_spec("empty stage-1 schedule"));
        }
        if self.lambda_eps <= 0.0 {
            return Err(CoreError::invalid_spec("lambda floor must be positive"));
        }
        self.optimizer.validate()?;
        self.disc_optimizer.validate()
    }
}

/// Stage-2 (encoder alignment) settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TvtStage2Config {
    pub total_steps: u64,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Posterior regularizer weight. The reference pipeline's value is
    /// unconfirmed; kept tiny and configurable.
    pub kl_weight: f64,
}

impl Default for TvtStage2Config {
    fn default() -> Self {
        TvtStage2Config {
            total_steps: 2000,
            batch_size: 2,
            optimizer: AdamConfig::default(),
            kl_weight: 1e-6,
        }
    }
}

impl TvtStage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(CoreError::invalid_spec("empty stage-2 schedule"));
        }
        if self.kl_weight < 0.0 {
            return Err(CoreError::invalid_spec("negative posterior weight"));
        }
        self.optimizer.validate()
    }
}

/// Mutable stage-1 training state (step counter + optimizer moments).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1State {
    pub step: u64,
    pub opt_decoder: AdamState,
    pub opt_disc: AdamState,
}

/// Mutable stage-2 training state.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2State {
    pub step: u64,
    pub opt_encoder: AdamState,
}

pub(crate) fn check_finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::non_finite(format!("{name} = {v}")))
    }
}

/// Rejects gradients outside the allowed parameter set.
pub(crate) fn check_grad_scope(store: &ParamStore, grads: &Grads, allowed: &TrainSet) -> Result<()> {
    for (id, _) in grads.params() {
        if !allowed.is_trainable(id) {
            return Err(CoreError::frozen(format!(
                "gradient reached frozen parameter {}",
                store.name(id)
            )));
        }
    }
    Ok(())
}

/// Merges `a + w * b` over parameter gradients.
fn merge_grads(a: Grads, b: Grads, w: f64) -> BTreeMap<ParamId, Tensor> {
    let mut out = a.into_params();
    for (id, g) in b.into_params() {
        match out.get_mut(&id) {
            Some(acc) => {
                for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                    *x += w * y;
                }
            }
            None => {
                let mut g = g;
                for x in g.data_mut().iter_mut() {
                    *x *= w;
                }
                out.insert(id, g);
            }
        }
    }
    out
}

/// One stage-1 step. Before `gan_start_step` every step updates the decoder
/// on reconstruction alone; once adversarial training starts, decoder
/// (generator) steps and discriminator steps alternate, starting with a
/// generator step.
#[allow(clippy::too_many_arguments)]
pub fn stage1_step(
    store: &mut ParamStore,
    reference: &VaeModel,
    compact: &VaeModel,
    disc: &PatchDiscriminator,
    percep: &PerceptualNet,
    batch: &[ImageTensor],
    cfg: &TvtStage1Config,
    state: &mut Stage1State,
) -> Result<LossReport> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(CoreError::InvalidConfig("empty batch".into()));
    }
    let step = state.step;
    let gan_active = step >= cfg.gan_start_step;
    let disc_turn = gan_active && (step - cfg.gan_start_step) % 2 == 1;

    // The frozen reference encoder runs off-tape: its latents enter the
    // graph as constants, so no gradient can exist for it by construction.
    let mut latents = Vec::with_capacity(batch.len());
    for img in batch {
        let (h, w) = img.hw();
        let up = resize(
            img.tensor(),
            h * cfg.upsample_factor,
            w * cfg.upsample_factor,
            ResizeKernel::Bicubic,
        )?;
        let z = encode(reference, store, &ImageTensor::new(up)?, false, None)?;
        latents.push(z);
    }

    let mut report = LossReport::default();
    if disc_turn {
        // Discriminator step: decoder outputs are constants here.
        let ts = TrainSet::from_ids(store, disc.params());
        let mut tape = Tape::new();
        let mut d_acc: Option<VarId> = None;
        for (img, z) in batch.iter().zip(&latents) {
            let fake = crate::vae::decode(compact, store, z)?;
            let real_v = tape.constant(img.tensor().clone());
            let fake_v = tape.constant(fake.tensor().clone());
            let real_logits = disc.forward(&mut tape, store, &ts, real_v)?;
            let fake_logits = disc.forward(&mut tape, store, &ts, fake_v)?;
            let d = hinge_d_loss(&mut tape, real_logits, fake_logits)?;
            d_acc = Some(match d_acc {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
        let d_mean = tape.scale(d_acc.expect("nonempty batch"), 1.0 / batch.len() as f64);
        report.gan_d = check_finite("adversarial (disc)", tape.value(d_mean).item())?;
        report.total = report.gan_d;
        let grads = tape.backward(d_mean)?;
        check_grad_scope(store, &grads, &ts)?;
        state.opt_disc.apply(store, &grads, &cfg.disc_optimizer)?;
        state.step += 1;
        return Ok(report);
    }

    // Generator (decoder) step.
    let ts = TrainSet::from_ids(store, compact.decoder_params());
    let mut tape = Tape::new();
    let mut rec_acc: Option<VarId> = None;
    let mut l1_sum = 0.0;
    let mut lp_sum = 0.0;
    let mut gan_acc: Option<VarId> = None;
    for (img, z) in batch.iter().zip(&latents) {
        let zv = tape.constant(z.tensor().clone());
        let out = compact.forward_decode(&mut tape, store, &ts, zv)?;
        let target = tape.constant(img.tensor().clone());
        let l1 = l1_loss(&mut tape, out, target)?;
        let lp = percep.distance(&mut tape, store, out, target)?;
        l1_sum += tape.value(l1).item();
        lp_sum += tape.value(lp).item();
        let rec = tape.add(l1, lp)?;
        rec_acc = Some(match rec_acc {
            Some(acc) => tape.add(acc, rec)?,
            None => rec,
        });
        if gan_active {
            let logits = disc.forward(&mut tape, store, &ts, out)?;
            let g = hinge_g_loss(&mut tape, logits);
            gan_acc = Some(match gan_acc {
                Some(acc) => tape.add(acc, g)?,
                None => g,
            });
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let rec = tape.scale(rec_acc.expect("nonempty batch"), inv);
    report.l1 = l1_sum * inv;
    report.perceptual = lp_sum * inv;
    let rec_val = check_finite("reconstruction", tape.value(rec).item())?;

    let last_w = compact.decoder_last_conv_w();
    let update = if let Some(gan) = gan_acc {
        let gan = tape.scale(gan, inv);
        report.gan_g = check_finite("adversarial (gen)", tape.value(gan).item())?;
        // Adaptive weight from the two terms' gradient norms at the
        // decoder's final conv weight; the backward passes are discarded
        // afterwards, so the weight acts as a detached constant.
        let rec_grads = tape.backward(rec)?;
        let gan_grads = tape.backward(gan)?;
        let lambda = {
            let g_rec = grad_norm(&rec_grads, last_w);
            let g_gan = grad_norm(&gan_grads, last_w);
            // The floor is part of the definition; the shared helper uses
            // the documented 1e-6, which `lambda_eps` must match.
            debug_assert!((cfg.lambda_eps - 1e-6).abs() < f64::EPSILON);
            adaptive_gan_weight(g_rec, g_gan)
        };
        report.lambda_d = lambda;
        report.total = rec_val + lambda * report.gan_g;
        merge_grads(rec_grads, gan_grads, lambda)
    } else {
        report.total = rec_val;
        tape.backward(rec)?.into_params()
    };
    check_finite("stage-1 total", report.total)?;
    for id in update.keys() {
        if !ts.is_trainable(*id) {
            return Err(CoreError::frozen(format!(
                "gradient reached frozen parameter {}",
                store.name(*id)
            )));
        }
    }
    state.opt_decoder.apply_map(store, &update, &cfg.optimizer)?;
    state.step += 1;
    Ok(report)
}

/// One stage-2 step: the compact encoder trains against its frozen decoder
/// with reconstruction losses and a tiny posterior penalty; the latent is a
/// reparameterized sample.
pub fn stage2_step(
    store: &mut ParamStore,
    compact: &VaeModel,
    percep: &PerceptualNet,
    batch: &[ImageTensor],
    cfg: &TvtStage2Config,
    state: &mut Stage2State,
    noise: &mut Stream,
) -> Result<LossReport> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(CoreError::InvalidConfig("empty batch".into()));
    }
    let ts = TrainSet::from_ids(store, compact.encoder_params());
    let mut tape = Tape::new();
    let mut acc: Option<VarId> = None;
    let mut report = LossReport::default();
    for img in batch {
        let x = tape.constant(img.tensor().clone());
        let (mean, logvar) = compact.forward_encode(&mut tape, store, &ts, x)?;
        let mut eps = Tensor::zeros(tape.value(mean).shape());
        noise.fill_normal(eps.data_mut());
        let z = compact.latent_on_tape(&mut tape, mean, logvar, Some(&eps))?;
        let out = compact.forward_decode(&mut tape, store, &ts, z)?;
        let target = tape.constant(img.tensor().clone());
        let l1 = l1_loss(&mut tape, out, target)?;
        let lp = percep.distance(&mut tape, store, out, target)?;
        let kl = kl_on_tape(&mut tape, mean, logvar)?;
        report.l1 += tape.value(l1).item();
        report.perceptual += tape.value(lp).item();
        report.kl += tape.value(kl).item();
        let rec = tape.add(l1, lp)?;
        let klw = tape.scale(kl, cfg.kl_weight);
        let tot = tape.add(rec, klw)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, tot)?,
            None => tot,
        });
    }
    let inv = 1.0 / batch.len() as f64;
    let total = tape.scale(acc.expect("nonempty batch"), inv);
    report.l1 *= inv;
    report.perceptual *= inv;
    report.kl *= inv;
    report.total = check_finite("stage-2 total", tape.value(total).item())?;
    let grads = tape.backward(total)?;
    check_grad_scope(store, &grads, &ts)?;
    state.opt_encoder.apply(store, &grads, &cfg.optimizer)?;
    state.step += 1;
    Ok(report)
}

/// Joint single-stage ablation step: trains the compact encoder and decoder
/// together from scratch. With `reference` set, adds `align_weight` times an
/// L1 penalty tying the compact mean latent to the frozen reference
/// encoder's latent of the 2x-upsampled image.
#[allow(clippy::too_many_arguments)]
pub fn joint_step(
    store: &mut ParamStore,
    compact: &VaeModel,
    reference: Option<(&VaeModel, f64)>,
    percep: &PerceptualNet,
    batch: &[ImageTensor],
    cfg: &TvtStage2Config,
    state: &mut Stage2State,
    noise: &mut Stream,
) -> Result<LossReport> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(CoreError::InvalidConfig("empty batch".into()));
    }
    let ts = TrainSet::from_ids(store, &compact.all_params());
    let mut tape = Tape::new();
    let mut acc: Option<VarId> = None;
    let mut report = LossReport::default();
    for img in batch {
        let x = tape.constant(img.tensor().clone());
        let (mean, logvar) = compact.forward_encode(&mut tape, store, &ts, x)?;
        let mut eps = Tensor::zeros(tape.value(mean).shape());
        noise.fill_normal(eps.data_mut());
        let z = compact.latent_on_tape(&mut tape, mean, logvar, Some(&eps))?;
        let out = compact.forward_decode(&mut tape, store, &ts, z)?;
        let target = tape.constant(img.tensor().clone());
        let l1 = l1_loss(&mut tape, out, target)?;
        let lp = percep.distance(&mut tape, store, out, target)?;
        let kl = kl_on_tape(&mut tape, mean, logvar)?;
        report.l1 += tape.value(l1).item();
        report.perceptual += tape.value(lp).item();
        report.kl += tape.value(kl).item();
        let rec = tape.add(l1, lp)?;
        let klw = tape.scale(kl, cfg.kl_weight);
        let mut tot = tape.add(rec, klw)?;
        if let Some((reference, weight)) = reference {
            let (h, w) = img.hw();
            let up = resize(img.tensor(), h * 2, w * 2, ResizeKernel::Bicubic)?;
            let zr = encode(reference, store, &ImageTensor::new(up)?, false, None)?;
            let zr_v = tape.constant(zr.tensor().clone());
            let al = l1_loss(&mut tape, mean, zr_v)?;
            report.align += tape.value(al).item();
            let alw = tape.scale(al, weight);
            tot = tape.add(tot, alw)?;
        }
        acc = Some(match acc {
            Some(a) => tape.add(a, tot)?,
            None => tot,
        });
    }
    let inv = 1.0 / batch.len() as f64;
    let total = tape.scale(acc.expect("nonempty batch"), inv);
    report.l1 *= inv;
    report.perceptual *= inv;
    report.kl *= inv;
    report.align *= inv;
    report.total = check_finite("joint total", tape.value(total).item())?;
    let grads = tape.backward(total)?;
    check_grad_scope(store, &grads, &ts)?;
    state.opt_encoder.apply(store, &grads, &cfg.optimizer)?;
    state.step += 1;
    Ok(report)
}

/// One log line per training step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TvtLogEntry {
    pub stage: u8,
    pub step: u64,
    pub report: LossReport,
}

/// Draws `n` batch indices deterministically.
pub fn batch_indices(stream: &mut Stream, dataset_len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|_| stream.below(dataset_len)).collect()
}

/// Runs stage 1 then stage 2 over an in-memory dataset, verifying the freeze
/// contracts at each stage boundary. Returns the per-step log; callers
/// handle checkpointing.
#[allow(clippy::too_many_arguments)]
pub fn run_tvt(
    store: &mut ParamStore,
    reference: &VaeModel,
    compact: &VaeModel,
    disc: &PatchDiscriminator,
    percep: &PerceptualNet,
    dataset: &[ImageTensor],
    cfg1: &TvtStage1Config,
    cfg2: &TvtStage2Config,
    seed: u64,
) -> Result<Vec<TvtLogEntry>> {
    if dataset.is_empty() {
        return Err(CoreError::InvalidConfig("empty dataset".into()));
    }
    let mut log = Vec::new();
    let mut batch_stream = Stream::derive(seed, &["tvt", "batches"]);
    let mut noise_stream = Stream::derive(seed, &["tvt", "stage2-noise"]);

    let ref_before = snapshot(store, reference.all_params());
    let enc_before = snapshot(store, compact.encoder_params().to_vec());
    let mut s1 = Stage1State::default();
    for _ in 0..cfg1.total_steps {
        let batch = gather(dataset, &batch_indices(&mut batch_stream, dataset.len(), cfg1.batch_size));
        let report = stage1_step(store, reference, compact, disc, percep, &batch, cfg1, &mut s1)?;
        log.push(TvtLogEntry {
            stage: 1,
            step: s1.step - 1,
            report,
        });
    }
    verify_unchanged(store, &ref_before, "reference model during stage 1")?;
    verify_unchanged(store, &enc_before, "compact encoder during stage 1")?;

    let dec_before = snapshot(store, compact.decoder_params().to_vec());
    let mut s2 = Stage2State::default();
    for _ in 0..cfg2.total_steps {
        let batch = gather(dataset, &batch_indices(&mut batch_stream, dataset.len(), cfg2.batch_size));
        let report = stage2_step(store, compact, percep, &batch, cfg2, &mut s2, &mut noise_stream)?;
        log.push(TvtLogEntry {
            stage: 2,
            step: s2.step - 1,
            report,
        });
    }
    verify_unchanged(store, &ref_before, "reference model during stage 2")?;
    verify_unchanged(store, &dec_before, "compact decoder during stage 2")?;
    Ok(log)
}

fn gather(dataset: &[ImageTensor], idx: &[usize]) -> Vec<ImageTensor> {
    idx.iter().map(|&i| dataset[i].clone()).collect()
}

pub(crate) fn snapshot(store: &ParamStore, ids: Vec<ParamId>) -> Vec<(ParamId, Tensor)> {
    ids.into_iter().map(|id| (id, store.get(id).clone())).collect()
}

pub(crate) fn verify_unchanged(
    store: &ParamStore,
    before: &[(ParamId, Tensor)],
    what: &str,
) -> Result<()> {
    for (id, old) in before {
        let now = store.get(*id);
        let same = old
            .data()
            .iter()
            .zip(now.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(CoreError::frozen(format!(
                "{what}: parameter {} changed",
                store.name(*id)
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::DiscSpec;
    use crate::vae::{build_vae, VaeSpec};

    struct Rig {
        store: ParamStore,
        reference: VaeModel,
        compact: VaeModel,
        disc: PatchDiscriminator,
        percep: PerceptualNet,
        images: Vec<ImageTensor>,
    }

    fn rig(seed: u64, n_images: usize, side: usize) -> Rig {
        let mut store = ParamStore::new();
        let reference = build_vae(&VaeSpec::d8_toy(), "ref", &mut store, seed).unwrap();
        let compact = build_vae(&VaeSpec::d4_toy(), "cmp", &mut store, seed + 1).unwrap();
        let disc =
            PatchDiscriminator::init(&mut store, "disc", &DiscSpec::toy(), seed + 2).unwrap();
        let percep = PerceptualNet::init(&mut store);
        let mut s = Stream::derive(seed, &["tvt-test-imgs"]);
        let images = (0..n_images)
            .map(|_| {
                let mut t = Tensor::zeros(&[3, side, side]);
                for v in t.data_mut() {
                    *v = s.uniform();
                }
                ImageTensor::new(t).unwrap()
            })
            .collect();
        Rig {
            store,
            reference,
            compact,
            disc,
            percep,
            images,
        }
    }

    fn cfg1(total: u64, gan_start: u64) -> TvtStage1Config {
        TvtStage1Config {
            gan_start_step: gan_start,
            total_steps: total,
            batch_size: 1,
            optimizer: AdamConfig::with_lr(1e-3),
            disc_optimizer: AdamConfig::with_lr(1e-3),
            ..TvtStage1Config::default()
        }
    }

    fn cfg2(total: u64) -> TvtStage2Config {
        TvtStage2Config {
            total_steps: total,
            batch_size: 1,
            optimizer: AdamConfig::with_lr(1e-3),
            ..TvtStage2Config::default()
        }
    }

    #[test]
    fn stage1_moves_decoder_only_and_keeps_reference_frozen() {
        let mut r = rig(1, 2, 16);
        let ref_before = snapshot(&r.store, r.reference.all_params());
        let enc_before = snapshot(&r.store, r.compact.encoder_params().to_vec());
        let dec_before = snapshot(&r.store, r.compact.decoder_params().to_vec());

        let mut state = Stage1State::default();
        let report = stage1_step(
            &mut r.store,
            &r.reference,
            &r.compact,
            &r.disc,
            &r.percep,
            &r.images[..1],
            &cfg1(4, 100),
            &mut state,
        )
        .unwrap();
        assert!(report.total.is_finite());
        assert!(report.l1 > 0.0);
        assert_eq!(report.gan_g, 0.0, "adversarial term inactive before start");
        assert_eq!(report.lambda_d, 0.0);

        verify_unchanged(&r.store, &ref_before, "reference").unwrap();
        verify_unchanged(&r.store, &enc_before, "compact encoder").unwrap();
        let dec_moved = dec_before
            .iter()
            .any(|(id, old)| old.data() != r.store.get(*id).data());
        assert!(dec_moved, "decoder should update");
    }

    #[test]
    fn gan_steps_alternate_generator_and_discriminator() {
        let mut r = rig(2, 2, 16);
        let cfg = cfg1(6, 0); // adversarial from the first step
        let mut state = Stage1State::default();

        // Step 0: generator turn with adaptive weight.
        let disc_before = snapshot(&r.store, r.disc.params().to_vec());
        let g_report = stage1_step(
            &mut r.store,
            &r.reference,
            &r.compact,
            &r.disc,
            &r.percep,
            &r.images[..1],
            &cfg,
            &mut state,
        )
        .unwrap();
        assert!(g_report.lambda_d >= 0.0);
        assert!(g_report.gan_g != 0.0 || g_report.lambda_d == 0.0);
        verify_unchanged(&r.store, &disc_before, "discriminator on generator turn").unwrap();

        // Step 1: discriminator turn; decoder must hold still.
        let dec_before = snapshot(&r.store, r.compact.decoder_params().to_vec());
        let d_report = stage1_step(
            &mut r.store,
            &r.reference,
            &r.compact,
            &r.disc,
            &r.percep,
            &r.images[..1],
            &cfg,
            &mut state,
        )
        .unwrap();
        assert!(d_report.gan_d > 0.0);
        verify_unchanged(&r.store, &dec_before, "decoder on discriminator turn").unwrap();
        let disc_moved = disc_before
            .iter()
            .any(|(id, old)| old.data() != r.store.get(*id).data());
        assert!(disc_moved, "discriminator should update on its turn");
    }

    #[test]
    fn stage2_moves_encoder_only() {
        let mut r = rig(3, 2, 16);
        let dec_before = snapshot(&r.store, r.compact.decoder_params().to_vec());
        let enc_before = snapshot(&r.store, r.compact.encoder_params().to_vec());
        let mut state = Stage2State::default();
        let mut noise = Stream::derive(7, &["noise"]);
        let report = stage2_step(
            &mut r.store,
            &r.compact,
            &r.percep,
            &r.images[..1],
            &cfg2(4),
            &mut state,
            &mut noise,
        )
        .unwrap();
        assert!(report.total.is_finite());
        assert!(report.kl >= 0.0);
        assert_eq!(report.gan_g, 0.0);
        assert_eq!(report.gan_d, 0.0);
        assert_eq!(report.lambda_d, 0.0);
        verify_unchanged(&r.store, &dec_before, "decoder").unwrap();
        let enc_moved = enc_before
            .iter()
            .any(|(id, old)| old.data() != r.store.get(*id).data());
        assert!(enc_moved);
    }

    #[test]
    fn non_finite_input_aborts_with_diagnostic() {
        let mut r = rig(4, 1, 16);
        let mut bad = r.images[0].tensor().clone();
        bad.data_mut()[0] = f64::NAN;
        let bad = ImageTensor::new(bad).unwrap();
        let mut state = Stage2State::default();
        let mut noise = Stream::derive(7, &["noise"]);
        let err = stage2_step(
            &mut r.store,
            &r.compact,
            &r.percep,
            &[bad],
            &cfg2(4),
            &mut state,
            &mut noise,
        )
        .unwrap_err();
        assert!(matches!(err, CoreError::NonFinite(_)), "{err}");
    }

    #[test]
    fn joint_ablations_run_and_log_alignment() {
        let mut r = rig(5, 2, 16);
        let mut state = Stage2State::default();
        let mut noise = Stream::derive(8, &["noise"]);
        // From-scratch preset: no reference, no alignment term.
        let t1 = joint_step(
            &mut r.store,
            &r.compact,
            None,
            &r.percep,
            &r.images[..1],
            &cfg2(4),
            &mut state,
            &mut noise,
        )
        .unwrap();
        assert_eq!(t1.align, 0.0);
        assert!(t1.total.is_finite());
        // Alignment preset: reference latent pulls the compact latent.
        let t2 = joint_step(
            &mut r.store,
            &r.compact,
            Some((&r.reference, 1.0)),
            &r.percep,
            &r.images[..1],
            &cfg2(4),
            &mut state,
            &mut noise,
        )
        .unwrap();
        assert!(t2.align > 0.0);
        assert!(t2.total.is_finite());
    }

    #[test]
    fn run_is_deterministic_for_a_fixed_seed() {
        let run = || {
            let mut r = rig(6, 3, 16);
            let log = run_tvt(
                &mut r.store,
                &r.reference,
                &r.compact,
                &r.disc,
                &r.percep,
                &r.images,
                &cfg1(3, 2),
                &cfg2(2),
                99,
            )
            .unwrap();
            let bits: Vec<u64> = r
                .compact
                .all_params()
                .iter()
                .flat_map(|&id| r.store.get(id).data().iter().map(|v| v.to_bits()))
                .collect();
            (log.len(), bits)
        };
        let (n1, a) = run();
        let (n2, b) = run();
        assert_eq!(n1, 5);
        assert_eq!(n1, n2);
        assert_eq!(a, b);
    }
}
