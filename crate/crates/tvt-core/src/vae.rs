//! Convolutional VAE family: a 5-stage 8x-downsampling reference and a
//! pruned 3-stage 4x-downsampling variant share this builder.
//!
//! Encoders stack residual stages with stride-2 downsamples and emit a
//! diagonal Gaussian over latents (log-variance clamped to [-30, 20]);
//! decoders mirror the stages with nearest-neighbor upsampling, one extra
//! residual block per stage, and 1x1 quantization convolutions on both sides,
//! matching the layout the complexity auditor enumerates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::layers::{Conv2d, GroupNorm, ResBlock, SpatialAttention, TrainSet};
use crate::rng::Stream;
use crate::tape::{ParamId, ParamStore, Tape, VarId};
use crate::tensor::Tensor;
use crate::{fmath, CoreError, Result};

/// Log-variance outputs are clamped to this range before any use.
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Architecture description of one VAE.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSpec {
    /// Spatial reduction factor from image to latent; 4 or 8.
    pub downsample_factor: usize,
    /// Channel width per resolution stage, outermost first. Must hold
    /// log2(factor) + 1 entries.
    pub stage_channels: Vec<usize>,
    /// Encoder residual blocks per stage; the decoder uses one more per
    /// stage, mirroring the reference architecture.
    pub blocks_per_stage: usize,
    /// Channels of the latent tensor.
    pub latent_channels: usize,
    /// Attention block in the middle of encoder and decoder.
    pub mid_attention: bool,
    /// Nominal training resolution; inputs must be divisible by the factor.
    pub base_resolution: usize,
}

impl VaeSpec {
    /// Full-scale 8x reference: 5 effective stages (4 resolution stages plus
    /// middle), channels 128/256/512/512, 2 encoder blocks per stage.
    pub fn d8_full() -> Self {
        VaeSpec {
            downsample_factor: 8,
            stage_channels: vec![128, 256, 512, 512],
            blocks_per_stage: 2,
            latent_channels: 4,
            mid_attention: true,
            base_resolution: 512,
        }
    }

    /// Pruned 4x variant: 3 stages, channels capped at 128/256/256, no
    /// middle attention.
    pub fn d4_full() -> Self {
        VaeSpec {
            downsample_factor: 4,
            stage_channels: vec![128, 256, 256],
            blocks_per_stage: 2,
            latent_channels: 4,
            mid_attention: false,
            base_resolution: 512,
        }
    }

    /// Desk-scale 8x reference (same shape, 1/16 channels).
    pub fn d8_toy() -> Self {
        VaeSpec {
            downsample_factor: 8,
            stage_channels: vec![8, 16, 32, 32],
            blocks_per_stage: 1,
            latent_channels: 4,
            mid_attention: true,
            base_resolution: 64,
        }
    }

    /// Desk-scale 4x variant.
    pub fn d4_toy() -> Self {
        VaeSpec {
            downsample_factor: 4,
            stage_channels: vec![8, 16, 16],
            blocks_per_stage: 1,
            latent_channels: 4,
            mid_attention: false,
            base_resolution: 64,
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn decoder_blocks_per_stage(&self) -> usize {
        self.blocks_per_stage + 1
    }

    pub fn validate(&self) -> Result<()> {
        let expected_stages = match self.downsample_factor {
            4 => 3,
            8 => 4,
            other => {
                return Err(CoreError::invalid_spec(format!(
                    "downsample_factor must be 4 or 8, got {other}"
                )))
            }
        };
        if self.stage_channels.len() != expected_stages {
            return Err(CoreError::invalid_spec(format!(
                "factor {} needs {expected_stages} stages, got {}",
                self.downsample_factor,
                self.stage_channels.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(CoreError::invalid_spec("zero-width stage"));
        }
        if self.blocks_per_stage == 0 {
            return Err(CoreError::invalid_spec("blocks_per_stage must be >= 1"));
        }
        if self.latent_channels == 0 {
            return Err(CoreError::invalid_spec("latent_channels must be >= 1"));
        }
        if self.base_resolution == 0 || self.base_resolution % self.downsample_factor != 0 {
            return Err(CoreError::invalid_spec(format!(
                "base_resolution {} not divisible by factor {}",
                self.base_resolution, self.downsample_factor
            )));
        }
        Ok(())
    }
}

/// RGB image in [0,1], shape [3,h,w].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor(pub Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let (c, _, _) = t.dims3()?;
        if c != 3 {
            return Err(CoreError::shape(format!("image needs 3 channels, got {c}")));
        }
        Ok(ImageTensor(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn hw(&self) -> (usize, usize) {
        let (_, h, w) = self.0.dims3().expect("validated at construction");
        (h, w)
    }
}

/// Latent activation, shape [c,h,w].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor(pub Tensor);

impl LatentTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        t.dims3()?;
        Ok(LatentTensor(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// Diagonal Gaussian over latents (log-variance already clamped).
#[derive(Debug, Clone)]
pub struct GaussianLatent {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl GaussianLatent {
    /// Distribution mean as a latent.
    pub fn mean_latent(&self) -> LatentTensor {
        LatentTensor(self.mean.clone())
    }

    /// Reparameterized draw: mean + exp(logvar/2) * eps.
    pub fn sample(&self, stream: &mut Stream) -> LatentTensor {
        let mut data = self.mean.data().to_vec();
        for (v, &lv) in data.iter_mut().zip(self.logvar.data()) {
            *v += fmath::exp(0.5 * lv) * stream.normal();
        }
        LatentTensor(Tensor::new(self.mean.shape(), data).expect("latent shape"))
    }
}

/// KL divergence to the standard normal, summed over latent elements:
/// 0.5 * sum(mean^2 + exp(logvar) - 1 - logvar).
pub fn kl_divergence(lat: &GaussianLatent) -> f64 {
    lat.mean
        .data()
        .iter()
        .zip(lat.logvar.data())
        .map(|(&m, &lv)| 0.5 * (m * m + fmath::exp(lv) - 1.0 - lv))
        .sum()
}

struct EncStage {
    blocks: Vec<ResBlock>,
    down: Option<Conv2d>,
}

struct DecStage {
    blocks: Vec<ResBlock>,
    up: Option<Conv2d>,
}

struct MidBlock {
    rb1: ResBlock,
    attn: SpatialAttention,
    rb2: ResBlock,
}

impl MidBlock {
    fn init(store: &mut ParamStore, name: &str, ch: usize, stream: &mut Stream) -> Self {
        MidBlock {
            rb1: ResBlock::init(store, &format!("{name}.rb1"), ch, ch, None, false, stream),
            attn: SpatialAttention::init(store, &format!("{name}.attn"), ch, stream),
            rb2: ResBlock::init(store, &format!("{name}.rb2"), ch, ch, None, false, stream),
        }
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
    ) -> Result<VarId> {
        let h = self.rb1.forward(tape, store, ts, x, None)?;
        let h = self.attn.forward(tape, store, ts, h)?;
        self.rb2.forward(tape, store, ts, h, None)
    }
}

/// One built VAE: encoder and decoder over a shared parameter store.
pub struct VaeModel {
    pub spec: VaeSpec,
    pub prefix: String,
    conv_in: Conv2d,
    enc_stages: Vec<EncStage>,
    enc_mid: Option<MidBlock>,
    enc_norm_out: GroupNorm,
    enc_conv_out: Conv2d,
    quant: Conv2d,
    post_quant: Conv2d,
    dec_conv_in: Conv2d,
    dec_mid: Option<MidBlock>,
    dec_stages: Vec<DecStage>,
    dec_norm_out: GroupNorm,
    dec_conv_out: Conv2d,
    encoder_param_ids: Vec<ParamId>,
    decoder_param_ids: Vec<ParamId>,
}

/// Builds a VAE under `prefix` in the store, initialized from `seed`.
pub fn build_vae(
    spec: &VaeSpec,
    prefix: &str,
    store: &mut ParamStore,
    seed: u64,
) -> Result<VaeModel> {
    spec.validate()?;
    let mut stream = Stream::derive(seed, &["init", prefix]);
    let chans = &spec.stage_channels;
    let n = chans.len();
    let first_param = store.len();

    // encoder
    let conv_in = Conv2d::init(store, &format!("{prefix}.enc.conv_in"), 3, chans[0], 3, 1, 1, &mut stream);
    let mut enc_stages = Vec::with_capacity(n);
    for (i, &ch) in chans.iter().enumerate() {
        let cin = if i == 0 { chans[0] } else { chans[i - 1] };
        let mut blocks = Vec::with_capacity(spec.blocks_per_stage);
        for b in 0..spec.blocks_per_stage {
            let bci = if b == 0 { cin } else { ch };
            blocks.push(ResBlock::init(
                store,
                &format!("{prefix}.enc.stage{i}.block{b}"),
                bci,
                ch,
                None,
                false,
                &mut stream,
            ));
        }
        let down = (i < n - 1).then(|| {
            Conv2d::init(store, &format!("{prefix}.enc.stage{i}.down"), ch, ch, 3, 2, 1, &mut stream)
        });
        enc_stages.push(EncStage { blocks, down });
    }
    let top = chans[n - 1];
    let enc_mid = spec
        .mid_attention
        .then(|| MidBlock::init(store, &format!("{prefix}.enc.mid"), top, &mut stream));
    let enc_norm_out = GroupNorm::init(
        store,
        &format!("{prefix}.enc.norm_out"),
        top,
        crate::layers::norm_groups(top),
    );
    let enc_conv_out = Conv2d::init(
        store,
        &format!("{prefix}.enc.conv_out"),
        top,
        2 * spec.latent_channels,
        3,
        1,
        1,
        &mut stream,
    );
    let quant = Conv2d::init(
        store,
        &format!("{prefix}.enc.quant"),
        2 * spec.latent_channels,
        2 * spec.latent_channels,
        1,
        1,
        0,
        &mut stream,
    );
    let first_dec_param = store.len();

    // decoder
    let post_quant = Conv2d::init(
        store,
        &format!("{prefix}.dec.post_quant"),
        spec.latent_channels,
        spec.latent_channels,
        1,
        1,
        0,
        &mut stream,
    );
    let dec_conv_in = Conv2d::init(
        store,
        &format!("{prefix}.dec.conv_in"),
        spec.latent_channels,
        top,
        3,
        1,
        1,
        &mut stream,
    );
    let dec_mid = spec
        .mid_attention
        .then(|| MidBlock::init(store, &format!("{prefix}.dec.mid"), top, &mut stream));
    let mut dec_stages = Vec::with_capacity(n);
    let dec_bps = spec.decoder_blocks_per_stage();
    for (j, &ch) in chans.iter().rev().enumerate() {
        let cin = if j == 0 { top } else { chans[n - j] };
        let mut blocks = Vec::with_capacity(dec_bps);
        for b in 0..dec_bps {
            let bci = if b == 0 { cin } else { ch };
            blocks.push(ResBlock::init(
                store,
                &format!("{prefix}.dec.stage{j}.block{b}"),
                bci,
                ch,
                None,
                false,
                &mut stream,
            ));
        }
        let up = (j < n - 1).then(|| {
            Conv2d::init(store, &format!("{prefix}.dec.stage{j}.up"), ch, ch, 3, 1, 1, &mut stream)
        });
        dec_stages.push(DecStage { blocks, up });
    }
    let dec_norm_out = GroupNorm::init(
        store,
        &format!("{prefix}.dec.norm_out"),
        chans[0],
        crate::layers::norm_groups(chans[0]),
    );
    let dec_conv_out = Conv2d::init(
        store,
        &format!("{prefix}.dec.conv_out"),
        chans[0],
        3,
        3,
        1,
        1,
        &mut stream,
    );
    let last_param = store.len();

    Ok(VaeModel {
        spec: spec.clone(),
        prefix: prefix.into(),
        conv_in,
        enc_stages,
        enc_mid,
        enc_norm_out,
        enc_conv_out,
        quant,
        post_quant,
        dec_conv_in,
        dec_mid,
        dec_stages,
        dec_norm_out,
        dec_conv_out,
        encoder_param_ids: (first_param..first_dec_param).collect(),
        decoder_param_ids: (first_dec_param..last_param).collect(),
    })
}

impl VaeModel {
    pub fn encoder_params(&self) -> &[ParamId] {
        &self.encoder_param_ids
    }

    pub fn decoder_params(&self) -> &[ParamId] {
        &self.decoder_param_ids
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        let mut p = self.encoder_param_ids.clone();
        p.extend_from_slice(&self.decoder_param_ids);
        p
    }

    /// Weight of the decoder's final convolution; the adaptive adversarial
    /// weight balances gradient norms measured on this parameter.
    pub fn decoder_last_conv_w(&self) -> ParamId {
        self.dec_conv_out.w
    }

    /// Encoder forward on the tape. `x` is an RGB image in [0,1]; it is
    /// shifted to [-1,1] internally. Returns (mean, clamped logvar).
    pub fn forward_encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
    ) -> Result<(VarId, VarId)> {
        let (c, h, w) = tape.value(x).dims3()?;
        if c != 3 || h % self.spec.downsample_factor != 0 || w % self.spec.downsample_factor != 0 {
            return Err(CoreError::shape(format!(
                "encoder input [{c},{h},{w}] vs factor {}",
                self.spec.downsample_factor
            )));
        }
        let x = tape.scale(x, 2.0);
        let x = tape.add_scalar(x, -1.0);
        let mut hid = self.conv_in.forward(tape, store, ts, x)?;
        for stage in &self.enc_stages {
            for block in &stage.blocks {
                hid = block.forward(tape, store, ts, hid, None)?;
            }
            if let Some(down) = &stage.down {
                hid = down.forward(tape, store, ts, hid)?;
            }
        }
        if let Some(mid) = &self.enc_mid {
            hid = mid.forward(tape, store, ts, hid)?;
        }
        hid = self.enc_norm_out.forward(tape, store, ts, hid)?;
        hid = tape.silu(hid);
        hid = self.enc_conv_out.forward(tape, store, ts, hid)?;
        hid = self.quant.forward(tape, store, ts, hid)?;
        let lat = self.spec.latent_channels;
        let mean = tape.slice_chans(hid, 0, lat)?;
        let logvar_raw = tape.slice_chans(hid, lat, 2 * lat)?;
        let logvar = tape.clamp(logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        Ok((mean, logvar))
    }

    /// Decoder forward on the tape; output is an RGB image in the [0,1]
    /// frame (unclamped).
    pub fn forward_decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        z: VarId,
    ) -> Result<VarId> {
        let (c, _, _) = tape.value(z).dims3()?;
        if c != self.spec.latent_channels {
            return Err(CoreError::shape(format!(
                "latent channels {c} vs spec {}",
                self.spec.latent_channels
            )));
        }
        let mut hid = self.post_quant.forward(tape, store, ts, z)?;
        hid = self.dec_conv_in.forward(tape, store, ts, hid)?;
        if let Some(mid) = &self.dec_mid {
            hid = mid.forward(tape, store, ts, hid)?;
        }
        for stage in &self.dec_stages {
            for block in &stage.blocks {
                hid = block.forward(tape, store, ts, hid, None)?;
            }
            if let Some(up) = &stage.up {
                hid = tape.upsample_nearest_2x(hid)?;
                hid = up.forward(tape, store, ts, hid)?;
            }
        }
        hid = self.dec_norm_out.forward(tape, store, ts, hid)?;
        hid = tape.silu(hid);
        hid = self.dec_conv_out.forward(tape, store, ts, hid)?;
        let y = tape.add_scalar(hid, 1.0);
        Ok(tape.scale(y, 0.5))
    }

    /// Reparameterized latent on the tape: mean + exp(logvar/2) * eps with a
    /// fixed noise tensor, or the mean when `eps` is None.
    pub fn latent_on_tape(
        &self,
        tape: &mut Tape,
        mean: VarId,
        logvar: VarId,
        eps: Option<&Tensor>,
    ) -> Result<VarId> {
        match eps {
            None => Ok(mean),
            Some(e) => {
                let half = tape.scale(logvar, 0.5);
                let std = tape.exp(half);
                let ev = tape.constant(e.clone());
                let noise = tape.mul(std, ev)?;
                tape.add(mean, noise)
            }
        }
    }
}

/// Off-tape encode: returns the latent distribution.
pub fn encode_dist(model: &VaeModel, store: &ParamStore, img: &ImageTensor) -> Result<GaussianLatent> {
    let mut tape = Tape::new();
    let ts = TrainSet::none(store);
    let x = tape.constant(img.0.clone());
    let (mean, logvar) = model.forward_encode(&mut tape, store, &ts, x)?;
    Ok(GaussianLatent {
        mean: tape.value(mean).clone(),
        logvar: tape.value(logvar).clone(),
    })
}

/// Off-tape encode. `sample: false` returns the distribution mean; `true`
/// draws one reparameterized sample from `stream`.
pub fn encode(
    model: &VaeModel,
    store: &ParamStore,
    img: &ImageTensor,
    sample: bool,
    stream: Option<&mut Stream>,
) -> Result<LatentTensor> {
    let dist = encode_dist(model, store, img)?;
    if sample {
        let stream = stream.ok_or_else(|| {
            CoreError::InvalidConfig("sampling encode needs a random stream".into())
        })?;
        Ok(dist.sample(stream))
    } else {
        Ok(dist.mean_latent())
    }
}

/// Off-tape decode.
pub fn decode(model: &VaeModel, store: &ParamStore, z: &LatentTensor) -> Result<ImageTensor> {
    let mut tape = Tape::new();
    let ts = TrainSet::none(store);
    let zv = tape.constant(z.0.clone());
    let out = model.forward_decode(&mut tape, store, &ts, zv)?;
    ImageTensor::new(tape.value(out).clone())
}
