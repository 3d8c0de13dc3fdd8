//! Text-conditioned denoising UNet: residual stages with stride-2
//! downsamples, transformer blocks (self-attention, cross-attention over a
//! token context, gated-GELU feed-forward), a skip stack mirrored by the
//! upsampling path, and a zero-initialized output head so a fresh model
//! predicts zero noise.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::layers::{
    norm_groups, AdaptedLinear, Conv2d, GroupNorm, LayerNorm, Linear, ResBlock, TimeEmbed,
    TrainSet,
};
use crate::rng::Stream;
use crate::tape::{ParamId, ParamStore, Tape, VarId};
use crate::{CoreError, Result};

/// Architecture description of the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width per resolution level, outermost first.
    pub block_channels: Vec<usize>,
    /// Residual(+transformer) layers per level.
    pub layers_per_block: usize,
    /// Whether each level carries transformer blocks.
    pub attention: Vec<bool>,
    pub mid_attention: bool,
    /// Width of each context token.
    pub context_dim: usize,
    /// Number of context tokens the conditioning provides.
    pub context_len: usize,
    /// Per-head width of all attention.
    pub head_dim: usize,
    /// Width of the time embedding MLP output.
    pub time_embed_dim: usize,
}

impl UNetSpec {
    /// Full-scale text-to-image denoiser configuration.
    pub fn sd_full() -> Self {
        UNetSpec {
            in_channels: 4,
            out_channels: 4,
            block_channels: vec![320, 640, 1280, 1280],
            layers_per_block: 2,
            attention: vec![true, true, true, false],
            mid_attention: true,
            context_dim: 1024,
            context_len: 77,
            head_dim: 64,
            time_embed_dim: 1280,
        }
    }

    /// Desk-scale configuration.
    pub fn toy() -> Self {
        UNetSpec {
            in_channels: 4,
            out_channels: 4,
            block_channels: vec![16, 32],
            layers_per_block: 1,
            attention: vec![false, true],
            mid_attention: true,
            context_dim: 8,
            context_len: 4,
            head_dim: 8,
            time_embed_dim: 64,
        }
    }

    pub fn levels(&self) -> usize {
        self.block_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_channels.is_empty() {
            return Err(CoreError::invalid_spec("no levels"));
        }
        if self.block_channels.iter().any(|&c| c == 0) {
            return Err(CoreError::invalid_spec("zero-width level"));
        }
        if self.attention.len() != self.block_channels.len() {
            return Err(CoreError::invalid_spec(format!(
                "attention flags {} vs levels {}",
                self.attention.len(),
                self.block_channels.len()
            )));
        }
        if self.layers_per_block == 0 {
            return Err(CoreError::invalid_spec("layers_per_block must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(CoreError::invalid_spec("zero in/out channels"));
        }
        if self.context_dim == 0 || self.context_len == 0 {
            return Err(CoreError::invalid_spec("empty context"));
        }
        if self.head_dim == 0 || self.time_embed_dim == 0 {
            return Err(CoreError::invalid_spec("zero head or time width"));
        }
        for (i, (&c, &a)) in self.block_channels.iter().zip(&self.attention).enumerate() {
            if a && c % self.head_dim != 0 {
                return Err(CoreError::invalid_spec(format!(
                    "level {i}: channels {c} not divisible by head_dim {}",
                    self.head_dim
                )));
            }
        }
        if self.mid_attention && self.block_channels.last().unwrap() % self.head_dim != 0 {
            return Err(CoreError::invalid_spec("middle channels vs head_dim"));
        }
        Ok(())
    }
}

/// Transformer block: token projection in/out around self-attention,
/// cross-attention, and a gated-GELU feed-forward, each behind a LayerNorm
/// with a residual add. Attention projections are adapter-capable.
pub struct TransformerBlock {
    norm: GroupNorm,
    proj_in: Linear,
    ln1: LayerNorm,
    pub sa_q: AdaptedLinear,
    pub sa_k: AdaptedLinear,
    pub sa_v: AdaptedLinear,
    pub sa_out: AdaptedLinear,
    ln2: LayerNorm,
    pub ca_q: AdaptedLinear,
    pub ca_k: AdaptedLinear,
    pub ca_v: AdaptedLinear,
    pub ca_out: AdaptedLinear,
    ln3: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    proj_out: Linear,
    heads: usize,
    pub name: String,
    pub channels: usize,
    pub context_dim: usize,
}

impl TransformerBlock {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        context_dim: usize,
        stream: &mut Stream,
    ) -> Self {
        let c = channels;
        let lin = |store: &mut ParamStore, n: &str, cin: usize, cout: usize, bias: bool, s: &mut Stream| {
            AdaptedLinear::wrap(Linear::init(store, n, cin, cout, bias, s))
        };
        TransformerBlock {
            norm: GroupNorm::init(store, &format!("{name}.norm"), c, norm_groups(c)),
            proj_in: Linear::init(store, &format!("{name}.proj_in"), c, c, true, stream),
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), c),
            sa_q: lin(store, &format!("{name}.sa.q"), c, c, false, stream),
            sa_k: lin(store, &format!("{name}.sa.k"), c, c, false, stream),
            sa_v: lin(store, &format!("{name}.sa.v"), c, c, false, stream),
            sa_out: lin(store, &format!("{name}.sa.out"), c, c, true, stream),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), c),
            ca_q: lin(store, &format!("{name}.ca.q"), c, c, false, stream),
            ca_k: lin(store, &format!("{name}.ca.k"), context_dim, c, false, stream),
            ca_v: lin(store, &format!("{name}.ca.v"), context_dim, c, false, stream),
            ca_out: lin(store, &format!("{name}.ca.out"), c, c, true, stream),
            ln3: LayerNorm::init(store, &format!("{name}.ln3"), c),
            ff1: Linear::init(store, &format!("{name}.ff1"), c, 8 * c, true, stream),
            ff2: Linear::init(store, &format!("{name}.ff2"), 4 * c, c, true, stream),
            proj_out: Linear::init_zero(store, &format!("{name}.proj_out"), c, c, true),
            heads,
            name: name.into(),
            channels: c,
            context_dim,
        }
    }

    /// Every parameter of the block, including any attached low-rank
    /// factors, in registration order.
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm.params();
        p.extend(self.proj_in.params());
        p.extend(self.ln1.params());
        for proj in [&self.sa_q, &self.sa_k, &self.sa_v, &self.sa_out] {
            p.extend(proj.base_params());
            p.extend(proj.adapter_params());
        }
        p.extend(self.ln2.params());
        for proj in [&self.ca_q, &self.ca_k, &self.ca_v, &self.ca_out] {
            p.extend(proj.base_params());
            p.extend(proj.adapter_params());
        }
        p.extend(self.ln3.params());
        p.extend(self.ff1.params());
        p.extend(self.ff2.params());
        p.extend(self.proj_out.params());
        p
    }

    /// All attention projection layers (adapter attachment points).
    pub fn attention_projections(&mut self) -> [&mut AdaptedLinear; 8] {
        [
            &mut self.sa_q,
            &mut self.sa_k,
            &mut self.sa_v,
            &mut self.sa_out,
            &mut self.ca_q,
            &mut self.ca_k,
            &mut self.ca_v,
            &mut self.ca_out,
        ]
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
        ctx: VarId,
    ) -> Result<VarId> {
        let (_, h, w) = tape.value(x).dims3()?;
        let n = self.norm.forward(tape, store, ts, x)?;
        let tok = tape.chw_to_tokens(n)?;
        let mut t = self.proj_in.forward(tape, store, ts, tok)?;

        let a = self.ln1.forward(tape, store, ts, t)?;
        let q = self.sa_q.forward(tape, store, ts, a)?;
        let k = self.sa_k.forward(tape, store, ts, a)?;
        let v = self.sa_v.forward(tape, store, ts, a)?;
        let s = tape.attention(q, k, v, self.heads)?;
        let o = self.sa_out.forward(tape, store, ts, s)?;
        t = tape.add(t, o)?;

        let a = self.ln2.forward(tape, store, ts, t)?;
        let q = self.ca_q.forward(tape, store, ts, a)?;
        let k = self.ca_k.forward(tape, store, ts, ctx)?;
        let v = self.ca_v.forward(tape, store, ts, ctx)?;
        let s = tape.attention(q, k, v, self.heads)?;
        let o = self.ca_out.forward(tape, store, ts, s)?;
        t = tape.add(t, o)?;

        let a = self.ln3.forward(tape, store, ts, t)?;
        let hcat = self.ff1.forward(tape, store, ts, a)?;
        let half = 4 * self.channels;
        let lin_part = tape.slice_cols(hcat, 0, half)?;
        let gate_part = tape.slice_cols(hcat, half, 2 * half)?;
        let gated = tape.gelu(gate_part);
        let ff = tape.mul(lin_part, gated)?;
        let ff = self.ff2.forward(tape, store, ts, ff)?;
        t = tape.add(t, ff)?;

        let t = self.proj_out.forward(tape, store, ts, t)?;
        let back = tape.tokens_to_chw(t, h, w)?;
        tape.add(x, back)
    }
}

enum LayerBlock {
    Res(ResBlock),
    ResAttn(ResBlock, TransformerBlock),
}

struct DownLevel {
    blocks: Vec<LayerBlock>,
    down: Option<Conv2d>,
}

struct UpLevel {
    blocks: Vec<LayerBlock>,
    up: Option<Conv2d>,
}

struct Mid {
    rb1: ResBlock,
    attn: Option<TransformerBlock>,
    rb2: ResBlock,
}

/// One built denoiser over a parameter store.
pub struct UNetModel {
    pub spec: UNetSpec,
    pub prefix: String,
    time: TimeEmbed,
    conv_in: Conv2d,
    down: Vec<DownLevel>,
    mid: Mid,
    up: Vec<UpLevel>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    param_ids: Vec<ParamId>,
}

/// Builds a denoiser under `prefix`, initialized from `seed`.
pub fn build_unet(
    spec: &UNetSpec,
    prefix: &str,
    store: &mut ParamStore,
    seed: u64,
) -> Result<UNetModel> {
    spec.validate()?;
    let mut stream = Stream::derive(seed, &["init", prefix]);
    let first = store.len();
    let chans = &spec.block_channels;
    let n = chans.len();
    let ted = spec.time_embed_dim;

    let time = TimeEmbed::init(store, &format!("{prefix}.time"), chans[0], ted, &mut stream);
    let conv_in = Conv2d::init(
        store,
        &format!("{prefix}.conv_in"),
        spec.in_channels,
        chans[0],
        3,
        1,
        1,
        &mut stream,
    );

    // skip-channel bookkeeping shared with the upsampling path
    let mut skip_ch = vec![chans[0]];
    let mut down = Vec::with_capacity(n);
    for (i, &ch) in chans.iter().enumerate() {
        let mut blocks = Vec::with_capacity(spec.layers_per_block);
        let cin0 = if i == 0 { chans[0] } else { chans[i - 1] };
        for b in 0..spec.layers_per_block {
            let cin = if b == 0 { cin0 } else { ch };
            let rb = ResBlock::init(
                store,
                &format!("{prefix}.down{i}.res{b}"),
                cin,
                ch,
                Some(ted),
                true,
                &mut stream,
            );
            let block = if spec.attention[i] {
                let tr = TransformerBlock::init(
                    store,
                    &format!("{prefix}.down{i}.attn{b}"),
                    ch,
                    ch / spec.head_dim,
                    spec.context_dim,
                    &mut stream,
                );
                LayerBlock::ResAttn(rb, tr)
            } else {
                LayerBlock::Res(rb)
            };
            blocks.push(block);
            skip_ch.push(ch);
        }
        let has_down = i < n - 1;
        let down_conv = has_down.then(|| {
            skip_ch.push(ch);
            Conv2d::init(store, &format!("{prefix}.down{i}.down"), ch, ch, 3, 2, 1, &mut stream)
        });
        down.push(DownLevel {
            blocks,
            down: down_conv,
        });
    }

    let top = chans[n - 1];
    let mid = Mid {
        rb1: ResBlock::init(
            store,
            &format!("{prefix}.mid.res1"),
            top,
            top,
            Some(ted),
            true,
            &mut stream,
        ),
        attn: spec.mid_attention.then(|| {
            TransformerBlock::init(
                store,
                &format!("{prefix}.mid.attn"),
                top,
                top / spec.head_dim,
                spec.context_dim,
                &mut stream,
            )
        }),
        rb2: ResBlock::init(
            store,
            &format!("{prefix}.mid.res2"),
            top,
            top,
            Some(ted),
            true,
            &mut stream,
        ),
    };

    let mut up = Vec::with_capacity(n);
    let mut h_ch = top;
    for j in 0..n {
        let level = n - 1 - j;
        let ch = chans[level];
        let mut blocks = Vec::with_capacity(spec.layers_per_block + 1);
        for b in 0..spec.layers_per_block + 1 {
            let skip = skip_ch.pop().ok_or_else(|| {
                CoreError::invalid_spec("skip stack underflow during construction")
            })?;
            let rb = ResBlock::init(
                store,
                &format!("{prefix}.up{j}.res{b}"),
                h_ch + skip,
                ch,
                Some(ted),
                true,
                &mut stream,
            );
            let block = if spec.attention[level] {
                let tr = TransformerBlock::init(
                    store,
                    &format!("{prefix}.up{j}.attn{b}"),
                    ch,
                    ch / spec.head_dim,
                    spec.context_dim,
                    &mut stream,
                );
                LayerBlock::ResAttn(rb, tr)
            } else {
                LayerBlock::Res(rb)
            };
            blocks.push(block);
            h_ch = ch;
        }
        let up_conv = (j < n - 1).then(|| {
            Conv2d::init(store, &format!("{prefix}.up{j}.up"), ch, ch, 3, 1, 1, &mut stream)
        });
        up.push(UpLevel {
            blocks,
            up: up_conv,
        });
    }
    if !skip_ch.is_empty() {
        return Err(CoreError::invalid_spec("skip stack not consumed"));
    }

    let norm_out = GroupNorm::init(
        store,
        &format!("{prefix}.norm_out"),
        chans[0],
        norm_groups(chans[0]),
    );
    let conv_out = Conv2d::init_zero(
        store,
        &format!("{prefix}.conv_out"),
        chans[0],
        spec.out_channels,
        3,
        1,
        1,
    );

    Ok(UNetModel {
        spec: spec.clone(),
        prefix: prefix.into(),
        time,
        conv_in,
        down,
        mid,
        up,
        norm_out,
        conv_out,
        param_ids: (first..store.len()).collect(),
    })
}

impl UNetModel {
    pub fn params(&self) -> &[ParamId] {
        &self.param_ids
    }

    /// Every transformer block in network order (down, mid, up).
    pub fn transformer_blocks_mut(&mut self) -> Vec<&mut TransformerBlock> {
        let mut out = Vec::new();
        for level in &mut self.down {
            for b in &mut level.blocks {
                if let LayerBlock::ResAttn(_, tr) = b {
                    out.push(tr);
                }
            }
        }
        if let Some(tr) = &mut self.mid.attn {
            out.push(tr);
        }
        for level in &mut self.up {
            for b in &mut level.blocks {
                if let LayerBlock::ResAttn(_, tr) = b {
                    out.push(tr);
                }
            }
        }
        out
    }

    /// Pre-activation time embedding tokens [1, time_embed_dim] for `t`.
    pub fn time_embedding(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        t: f64,
    ) -> Result<VarId> {
        self.time.forward(tape, store, ts, t)
    }

    /// Noise prediction. `x` is [in_channels, h, w] with h, w divisible by
    /// 2^(levels-1); `ctx` is a [context_len, context_dim] token matrix.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
        t: f64,
        ctx: VarId,
    ) -> Result<VarId> {
        let temb = self.time_embedding(tape, store, ts, t)?;
        self.forward_with_temb(tape, store, ts, x, temb, ctx)
    }

    /// Same as `forward` but with a caller-supplied time embedding, so a
    /// wrapper can share one embedding between the base and its own blocks.
    pub fn forward_with_temb(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
        temb: VarId,
        ctx: VarId,
    ) -> Result<VarId> {
        let (c, h, w) = tape.value(x).dims3()?;
        let div = 1 << (self.spec.levels() - 1);
        if c != self.spec.in_channels || h % div != 0 || w % div != 0 {
            return Err(CoreError::shape(format!(
                "denoiser input [{c},{h},{w}] vs spec (div {div})"
            )));
        }
        let (cl, cd) = tape.value(ctx).dims2()?;
        if cl != self.spec.context_len || cd != self.spec.context_dim {
            return Err(CoreError::shape(format!(
                "context [{cl},{cd}] vs spec [{},{}]",
                self.spec.context_len, self.spec.context_dim
            )));
        }

        let mut hid = self.conv_in.forward(tape, store, ts, x)?;
        let mut skips = vec![hid];
        for level in &self.down {
            for block in &level.blocks {
                hid = match block {
                    LayerBlock::Res(rb) => rb.forward(tape, store, ts, hid, Some(temb))?,
                    LayerBlock::ResAttn(rb, tr) => {
                        let r = rb.forward(tape, store, ts, hid, Some(temb))?;
                        tr.forward(tape, store, ts, r, ctx)?
                    }
                };
                skips.push(hid);
            }
            if let Some(dc) = &level.down {
                hid = dc.forward(tape, store, ts, hid)?;
                skips.push(hid);
            }
        }

        hid = self.mid.rb1.forward(tape, store, ts, hid, Some(temb))?;
        if let Some(tr) = &self.mid.attn {
            hid = tr.forward(tape, store, ts, hid, ctx)?;
        }
        hid = self.mid.rb2.forward(tape, store, ts, hid, Some(temb))?;

        for level in &self.up {
            for block in &level.blocks {
                let skip = skips.pop().ok_or_else(|| {
                    CoreError::shape("skip stack underflow during forward")
                })?;
                hid = tape.concat_chans(hid, skip)?;
                hid = match block {
                    LayerBlock::Res(rb) => rb.forward(tape, store, ts, hid, Some(temb))?,
                    LayerBlock::ResAttn(rb, tr) => {
                        let r = rb.forward(tape, store, ts, hid, Some(temb))?;
                        tr.forward(tape, store, ts, r, ctx)?
                    }
                };
            }
            if let Some(uc) = &level.up {
                hid = tape.upsample_nearest_2x(hid)?;
                hid = uc.forward(tape, store, ts, hid)?;
            }
        }
        debug_assert!(skips.is_empty());

        hid = self.norm_out.forward(tape, store, ts, hid)?;
        hid = tape.silu(hid);
        self.conv_out.forward(tape, store, ts, hid)
    }
}

/// Fills a fresh network's zero-initialized output layers (each residual
/// block's second conv, every attention output projection, the final head)
/// with small values so the network behaves like a pretrained one: outputs
/// are nonzero and input-dependent, and gradients reach every interior layer
/// even when the whole network is frozen. Values come from per-parameter
/// name-derived streams, so the result is independent of registration order
/// and identical across stores for the same prefix and seed.
pub fn wake_unet(model: &UNetModel, store: &mut ParamStore, seed: u64) {
    for &id in model.params() {
        let name = store.name(id).to_string();
        if name.ends_with(".conv2.w")
            || name.ends_with(".proj_out.w")
            || name.ends_with(".conv_out.w")
        {
            let mut stream = Stream::derive(seed, &["wake", &name]);
            for v in store.get_mut(id).data_mut() {
                *v = 0.05 * stream.normal();
            }
        }
    }
}

/// Off-tape noise prediction.
pub fn predict_noise(
    model: &UNetModel,
    store: &ParamStore,
    x: &crate::tensor::Tensor,
    t: f64,
    ctx: &crate::tensor::Tensor,
) -> Result<crate::tensor::Tensor> {
    let mut tape = Tape::new();
    let ts = TrainSet::none(store);
    let xv = tape.constant(x.clone());
    let cv = tape.constant(ctx.clone());
    let out = model.forward(&mut tape, store, &ts, xv, t, cv)?;
    Ok(tape.value(out).clone())
}
