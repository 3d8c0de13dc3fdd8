//! Training losses: pixel terms, a frozen perceptual distance, a patch
//! discriminator with hinge objectives, and the adaptive weight that
//! balances reconstruction against adversarial gradients.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::layers::{Conv2d, GroupNorm, TrainSet};
use crate::rng::Stream;
use crate::tape::{Grads, ParamId, ParamStore, Tape, VarId};
use crate::{CoreError, Result};

/// Mean absolute error.
pub fn l1_loss(tape: &mut Tape, a: VarId, b: VarId) -> Result<VarId> {
    let d = tape.sub(a, b)?;
    let ad = tape.abs(d);
    Ok(tape.mean_all(ad))
}

/// Mean squared error.
pub fn mse_loss(tape: &mut Tape, a: VarId, b: VarId) -> Result<VarId> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    Ok(tape.mean_all(sq))
}

/// KL divergence of a diagonal Gaussian to the standard normal, summed over
/// elements, kept on the tape so the encoder receives its gradient.
pub fn kl_on_tape(tape: &mut Tape, mean: VarId, logvar: VarId) -> Result<VarId> {
    let sq = tape.square(mean);
    let ev = tape.exp(logvar);
    let a = tape.add(sq, ev)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -1.0);
    let s = tape.sum_all(c);
    Ok(tape.scale(s, 0.5))
}

/// Fixed random conv pyramid standing in for a pretrained perceptual
/// network: five stride-2 conv+leaky stages, channel-normalized feature
/// differences averaged per stage and summed.
///
/// Weights derive from a constant seed, never train, and are shared by every
/// phase, so the distance is one fixed function of its two inputs.
pub struct PerceptualNet {
    convs: Vec<Conv2d>,
}

/// Seed for the perceptual weights; independent of experiment seeds.
const PERCEPTUAL_SEED: u64 = 0x7065_7263_6570_7431;

pub const PERCEPTUAL_CHANNELS: [usize; 5] = [8, 16, 32, 64, 64];

impl PerceptualNet {
    /// Registers the frozen weights under `percep.` in the store.
    pub fn init(store: &mut ParamStore) -> Self {
        let mut stream = Stream::derive(PERCEPTUAL_SEED, &["init", "percep"]);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in PERCEPTUAL_CHANNELS.iter().enumerate() {
            convs.push(Conv2d::init(
                store,
                &format!("percep.conv{i}"),
                cin,
                cout,
                3,
                2,
                1,
                &mut stream,
            ));
            cin = cout;
        }
        PerceptualNet { convs }
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    fn features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: VarId,
    ) -> Result<Vec<VarId>> {
        // images arrive in [0,1]; the net sees [-1,1]
        let x = tape.scale(x, 2.0);
        let mut h = tape.add_scalar(x, -1.0);
        let mut feats = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let w = tape.param(store, conv.w, false);
            let b = tape.param(store, conv.b, false);
            h = tape.conv2d(h, w, Some(b), conv.stride, conv.pad)?;
            h = tape.leaky_relu(h, 0.2);
            feats.push(tape.channel_l2_normalize(h, 1e-10)?);
        }
        Ok(feats)
    }

    /// Perceptual distance between two images in [0,1]; differentiable
    /// w.r.t. both.
    pub fn distance(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        a: VarId,
        b: VarId,
    ) -> Result<VarId> {
        let fa = self.features(tape, store, a)?;
        let fb = self.features(tape, store, b)?;
        let mut total = tape.constant(crate::tensor::Tensor::scalar(0.0));
        for (&na, &nb) in fa.iter().zip(&fb) {
            let d = tape.sub(na, nb)?;
            let sq = tape.square(d);
            let m = tape.mean_all(sq);
            total = tape.add(total, m)?;
        }
        Ok(total)
    }
}

/// Channel plan for the patch discriminator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscSpec {
    pub channels: Vec<usize>,
}

impl DiscSpec {
    pub fn full() -> Self {
        DiscSpec {
            channels: vec![64, 128, 256, 1],
        }
    }

    pub fn toy() -> Self {
        DiscSpec {
            channels: vec![8, 16, 32, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(CoreError::invalid_spec("discriminator needs >= 2 layers"));
        }
        if *self.channels.last().unwrap() != 1 {
            return Err(CoreError::invalid_spec("discriminator must end in 1 channel"));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(CoreError::invalid_spec("zero-width discriminator layer"));
        }
        Ok(())
    }
}

/// PatchGAN discriminator: 4x4 convs, stride 2 except the last, group norm
/// and leaky ReLU on the middle layers, patch logit map output.
pub struct PatchDiscriminator {
    convs: Vec<Conv2d>,
    norms: Vec<Option<GroupNorm>>,
    param_ids: Vec<ParamId>,
}

impl PatchDiscriminator {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        spec: &DiscSpec,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        let mut stream = Stream::derive(seed, &["init", prefix]);
        let first = store.len();
        let n = spec.channels.len();
        let mut convs = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        let mut cin = 3;
        for (i, &cout) in spec.channels.iter().enumerate() {
            let last = i == n - 1;
            let stride = if last { 1 } else { 2 };
            convs.push(Conv2d::init(
                store,
                &format!("{prefix}.conv{i}"),
                cin,
                cout,
                4,
                stride,
                1,
                &mut stream,
            ));
            let normed = i > 0 && !last;
            norms.push(normed.then(|| {
                GroupNorm::init(
                    store,
                    &format!("{prefix}.norm{i}"),
                    cout,
                    crate::layers::norm_groups(cout),
                )
            }));
            cin = cout;
        }
        let param_ids = (first..store.len()).collect();
        Ok(PatchDiscriminator {
            convs,
            norms,
            param_ids,
        })
    }

    pub fn params(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// Patch logits for an image in [0,1].
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
    ) -> Result<VarId> {
        let x = tape.scale(x, 2.0);
        let mut h = tape.add_scalar(x, -1.0);
        let n = self.convs.len();
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(tape, store, ts, h)?;
            if let Some(norm) = &self.norms[i] {
                h = norm.forward(tape, store, ts, h)?;
            }
            if i < n - 1 {
                h = tape.leaky_relu(h, 0.2);
            }
        }
        Ok(h)
    }
}

/// Hinge discriminator loss: mean(relu(1 - real)) + mean(relu(1 + fake)).
/// A zero-output discriminator scores exactly 2.
pub fn hinge_d_loss(tape: &mut Tape, real_logits: VarId, fake_logits: VarId) -> Result<VarId> {
    let nr = tape.scale(real_logits, -1.0);
    let m_real = tape.add_scalar(nr, 1.0);
    let r = tape.leaky_relu(m_real, 0.0);
    let a = tape.mean_all(r);
    let m_fake = tape.add_scalar(fake_logits, 1.0);
    let f = tape.leaky_relu(m_fake, 0.0);
    let b = tape.mean_all(f);
    tape.add(a, b)
}

/// Hinge generator loss: -mean(fake logits). Zero for a zero discriminator.
pub fn hinge_g_loss(tape: &mut Tape, fake_logits: VarId) -> VarId {
    let m = tape.mean_all(fake_logits);
    tape.scale(m, -1.0)
}

/// L2 norm of the gradient one backward pass produced for one parameter
/// (zero when the parameter received no gradient).
pub fn grad_norm(grads: &Grads, id: ParamId) -> f64 {
    match grads.for_param(id) {
        Some(g) => crate::fmath::sqrt(g.data().iter().map(|v| v * v).sum()),
        None => 0.0,
    }
}

pub const ADAPTIVE_WEIGHT_MAX: f64 = 1.0e4;

/// Adaptive adversarial weight: ratio of reconstruction to adversarial
/// gradient norms at the generator's final conv weight, clamped to
/// [0, 1e4]. The 1e-6 floor keeps a dead adversarial branch finite.
pub fn adaptive_gan_weight(rec_grad_norm: f64, gan_grad_norm: f64) -> f64 {
    (rec_grad_norm / (gan_grad_norm + 1e-6)).clamp(0.0, ADAPTIVE_WEIGHT_MAX)
}

/// Per-step scalar losses for logging; unused terms stay zero.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub perceptual: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub kl: f64,
    pub vsd: f64,
    /// Latent-alignment penalty (joint-training ablation only).
    pub align: f64,
    pub lambda_d: f64,
    pub total: f64,
}
