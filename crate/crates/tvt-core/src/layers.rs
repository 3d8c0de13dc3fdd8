//! Parameterized building blocks: convolutions, linears (with optional
//! low-rank adapters), normalization layers, residual blocks, attention
//! blocks, and time embeddings.
//!
//! Construction draws initial weights from a caller-supplied deterministic
//! stream in declaration order, so a (seed, spec) pair always builds the
//! same model. Forward methods take a [`TrainSet`] deciding which parameters
//! participate in the backward sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::rng::Stream;
use crate::tape::{ParamId, ParamStore, Tape, VarId};
use crate::tensor::Tensor;
use crate::{fmath, Result};

/// Which parameters are trainable for the current step.
#[derive(Debug, Clone)]
pub struct TrainSet {
    flags: Vec<bool>,
}

impl TrainSet {
    pub fn none(store: &ParamStore) -> Self {
        TrainSet {
            flags: vec![false; store.len()],
        }
    }

    pub fn all(store: &ParamStore) -> Self {
        TrainSet {
            flags: vec![true; store.len()],
        }
    }

    pub fn from_ids(store: &ParamStore, ids: &[ParamId]) -> Self {
        let mut ts = Self::none(store);
        ts.extend(ids);
        ts
    }

    pub fn extend(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.flags[id] = true;
        }
    }

    pub fn remove(&mut self, ids: &[ParamId]) {
        for &id in ids {
            self.flags[id] = false;
        }
    }

    #[inline]
    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.flags.get(id).copied().unwrap_or(false)
    }

    /// Ids marked trainable, ascending.
    pub fn ids(&self) -> Vec<ParamId> {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(i, &f)| f.then_some(i))
            .collect()
    }
}

fn he_normal(stream: &mut Stream, fan_in: usize, len: usize) -> Vec<f64> {
    let std = fmath::sqrt(2.0 / fan_in as f64);
    (0..len).map(|_| stream.normal() * std).collect()
}

/// 2D convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        stream: &mut Stream,
    ) -> Self {
        let w = Tensor::new(
            &[cout, cin, k, k],
            he_normal(stream, cin * k * k, cout * cin * k * k),
        )
        .expect("conv weight shape");
        let b = Tensor::zeros(&[cout]);
        Conv2d {
            w: store.add(&format!("{name}.w"), w),
            b: store.add(&format!("{name}.b"), b),
            stride,
            pad,
        }
    }

    /// Same as `init` but with a zero weight, so the layer starts as a
    /// pure-bias map (used on residual-branch outputs of UNet blocks).
    #[allow(clippy::too_many_arguments)]
    pub fn init_zero(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = Tensor::zeros(&[cout, cin, k, k]);
        let b = Tensor::zeros(&[cout]);
        Conv2d {
            w: store.add(&format!("{name}.w"), w),
            b: store.add(&format!("{name}.b"), b),
            stride,
            pad,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
    ) -> Result<VarId> {
        let w = tape.param(store, self.w, ts.is_trainable(self.w));
        let b = tape.param(store, self.b, ts.is_trainable(self.b));
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }
}

/// Token-wise linear layer.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        stream: &mut Stream,
    ) -> Self {
        let w = Tensor::new(&[cout, cin], he_normal(stream, cin, cout * cin))
            .expect("linear weight shape");
        Linear {
            w: store.add(&format!("{name}.w"), w),
            b: bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(&[cout]))),
        }
    }

    pub fn init_zero(store: &mut ParamStore, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let w = Tensor::zeros(&[cout, cin]);
        Linear {
            w: store.add(&format!("{name}.w"), w),
            b: bias.then(|| store.add(&format!("{name}.b"), Tensor::zeros(&[cout]))),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
    ) -> Result<VarId> {
        let w = tape.param(store, self.w, ts.is_trainable(self.w));
        let b = self
            .b
            .map(|b| tape.param(store, b, ts.is_trainable(b)));
        tape.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.w];
        if let Some(b) = self.b {
            p.push(b);
        }
        p
    }
}

/// Linear layer with an optional low-rank adapter:
/// y = W x + b + (alpha / rank) * B (A x).
///
/// `B` is zero-initialized, so a freshly wrapped layer reproduces the base
/// mapping exactly. Base weights and adapter weights are separate parameters;
/// training only the adapter leaves the base mapping untouched.
#[derive(Debug, Clone)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub adapter: Option<LowRankAdapter>,
}

#[derive(Debug, Clone)]
pub struct LowRankAdapter {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl AdaptedLinear {
    pub fn wrap(base: Linear) -> Self {
        AdaptedLinear {
            base,
            adapter: None,
        }
    }

    /// Attaches a fresh adapter. `down` is [rank, cin] with small random
    /// init; `up` is [cout, rank], zero-initialized.
    #[allow(clippy::too_many_arguments)]
    pub fn attach_adapter(
        &mut self,
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rank: usize,
        alpha: f64,
        stream: &mut Stream,
    ) {
        let down_data: Vec<f64> = (0..rank * cin).map(|_| stream.normal() * 0.02).collect();
        let down = Tensor::new(&[rank, cin], down_data).expect("adapter down shape");
        let up = Tensor::zeros(&[cout, rank]);
        self.adapter = Some(LowRankAdapter {
            down: store.add(&format!("{name}.down.w"), down),
            up: store.add(&format!("{name}.up.w"), up),
            rank,
            alpha,
        });
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
    ) -> Result<VarId> {
        let y = self.base.forward(tape, store, ts, x)?;
        match &self.adapter {
            None => Ok(y),
            Some(ad) => {
                let down = tape.param(store, ad.down, ts.is_trainable(ad.down));
                let up = tape.param(store, ad.up, ts.is_trainable(ad.up));
                let mid = tape.linear(x, down, None)?;
                let delta = tape.linear(mid, up, None)?;
                let scaled = tape.scale(delta, ad.alpha / ad.rank as f64);
                tape.add(y, scaled)
            }
        }
    }

    pub fn base_params(&self) -> Vec<ParamId> {
        self.base.params()
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        match &self.adapter {
            Some(ad) => vec![ad.down, ad.up],
            None => Vec::new(),
        }
    }
}

/// GroupNorm with per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNorm {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        GroupNorm {
            gamma: store.add(&format!("{name}.g"), Tensor::full(&[channels], 1.0)),
            beta: store.add(&format!("{name}.b"), Tensor::zeros(&[channels])),
            groups,
            eps: 1e-6,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
    ) -> Result<VarId> {
        let gamma = tape.param(store, self.gamma, ts.is_trainable(self.gamma));
        let beta = tape.param(store, self.beta, ts.is_trainable(self.beta));
        tape.group_norm(x, gamma, beta, self.groups, self.eps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// LayerNorm over token channels.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        LayerNorm {
            gamma: store.add(&format!("{name}.g"), Tensor::full(&[channels], 1.0)),
            beta: store.add(&format!("{name}.b"), Tensor::zeros(&[channels])),
            eps: 1e-5,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
    ) -> Result<VarId> {
        let gamma = tape.param(store, self.gamma, ts.is_trainable(self.gamma));
        let beta = tape.param(store, self.beta, ts.is_trainable(self.beta));
        tape.layer_norm_rows(x, gamma, beta, self.eps)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Picks a GroupNorm group count that divides `channels`: the largest value
/// up to 32 keeping at least two channels per group (32 at full scale,
/// smaller for toy widths). Single-channel groups would normalize away the
/// per-channel conditioning shifts residual blocks rely on.
pub fn norm_groups(channels: usize) -> usize {
    let cap = 32.min(channels / 2);
    (1..=cap).rev().find(|g| channels % g == 0).unwrap_or(1)
}

/// Residual block: norm/SiLU/conv twice, optional time conditioning between
/// the halves, identity or 1x1-projected skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time_proj: Option<Linear>,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    /// `time_dim: Some(d)` adds a per-block projection of the time embedding.
    /// `zero_out` zero-initializes the residual branch's second conv
    /// (standard for denoiser blocks; reconstruction blocks keep random init).
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        time_dim: Option<usize>,
        zero_out: bool,
        stream: &mut Stream,
    ) -> Self {
        let norm1 = GroupNorm::init(store, &format!("{name}.norm1"), cin, norm_groups(cin));
        let conv1 = Conv2d::init(store, &format!("{name}.conv1"), cin, cout, 3, 1, 1, stream);
        let time_proj = time_dim.map(|d| {
            Linear::init(store, &format!("{name}.time"), d, cout, true, stream)
        });
        let norm2 = GroupNorm::init(store, &format!("{name}.norm2"), cout, norm_groups(cout));
        let conv2 = if zero_out {
            Conv2d::init_zero(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1)
        } else {
            Conv2d::init(store, &format!("{name}.conv2"), cout, cout, 3, 1, 1, stream)
        };
        let skip = (cin != cout)
            .then(|| Conv2d::init(store, &format!("{name}.skip"), cin, cout, 1, 1, 0, stream));
        ResBlock {
            norm1,
            conv1,
            time_proj,
            norm2,
            conv2,
            skip,
        }
    }

    /// `temb`: pre-activation time embedding tokens [1, time_dim]; required
    /// iff the block was built with time conditioning.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
        temb: Option<VarId>,
    ) -> Result<VarId> {
        let mut h = self.norm1.forward(tape, store, ts, x)?;
        h = tape.silu(h);
        h = self.conv1.forward(tape, store, ts, h)?;
        if let Some(tp) = &self.time_proj {
            let temb = temb.expect("time-conditioned block needs an embedding");
            let ta = tape.silu(temb);
            let tv = tp.forward(tape, store, ts, ta)?;
            let cout = tape.value(tv).shape()[1];
            let tvec = tape.reshape(tv, &[cout])?;
            h = tape.add_channel_vec(h, tvec)?;
        }
        let mut r = self.norm2.forward(tape, store, ts, h)?;
        r = tape.silu(r);
        r = self.conv2.forward(tape, store, ts, r)?;
        let sk = match &self.skip {
            Some(conv) => conv.forward(tape, store, ts, x)?,
            None => x,
        };
        tape.add(r, sk)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        p.extend(self.norm1.params());
        p.extend(self.conv1.params());
        if let Some(tp) = &self.time_proj {
            p.extend(tp.params());
        }
        p.extend(self.norm2.params());
        p.extend(self.conv2.params());
        if let Some(sk) = &self.skip {
            p.extend(sk.params());
        }
        p
    }
}

/// Single-head spatial self-attention block used inside autoencoders:
/// x + proj(attend(norm(x))).
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
}

impl SpatialAttention {
    pub fn init(store: &mut ParamStore, name: &str, channels: usize, stream: &mut Stream) -> Self {
        SpatialAttention {
            norm: GroupNorm::init(store, &format!("{name}.norm"), channels, norm_groups(channels)),
            q: Linear::init(store, &format!("{name}.q"), channels, channels, true, stream),
            k: Linear::init(store, &format!("{name}.k"), channels, channels, true, stream),
            v: Linear::init(store, &format!("{name}.v"), channels, channels, true, stream),
            proj: Linear::init(store, &format!("{name}.proj"), channels, channels, true, stream),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        x: VarId,
    ) -> Result<VarId> {
        let (_, h, w) = tape.value(x).dims3()?;
        let n = self.norm.forward(tape, store, ts, x)?;
        let tok = tape.chw_to_tokens(n)?;
        let q = self.q.forward(tape, store, ts, tok)?;
        let k = self.k.forward(tape, store, ts, tok)?;
        let v = self.v.forward(tape, store, ts, tok)?;
        let a = tape.attention(q, k, v, 1)?;
        let o = self.proj.forward(tape, store, ts, a)?;
        let o = tape.tokens_to_chw(o, h, w)?;
        tape.add(x, o)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        p.extend(self.norm.params());
        p.extend(self.q.params());
        p.extend(self.k.params());
        p.extend(self.v.params());
        p.extend(self.proj.params());
        p
    }
}

/// Sinusoidal timestep features of width `dim` (half sine, half cosine,
/// geometric frequency ladder). Computed off-tape; timesteps carry no grad.
pub fn timestep_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = fmath::exp(-fmath::ln(10000.0) * i as f64 / half as f64);
        data[i] = fmath::sin(t * freq);
        data[half + i] = fmath::cos(t * freq);
    }
    Tensor::new(&[1, dim], data).expect("timestep feature shape")
}

/// Two-layer MLP lifting sinusoidal features to the UNet time embedding.
#[derive(Debug, Clone)]
pub struct TimeEmbed {
    pub lin1: Linear,
    pub lin2: Linear,
    pub feature_dim: usize,
}

impl TimeEmbed {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        embed_dim: usize,
        stream: &mut Stream,
    ) -> Self {
        TimeEmbed {
            lin1: Linear::init(store, &format!("{name}.lin1"), feature_dim, embed_dim, true, stream),
            lin2: Linear::init(store, &format!("{name}.lin2"), embed_dim, embed_dim, true, stream),
            feature_dim,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        t: f64,
    ) -> Result<VarId> {
        let feats = tape.constant(timestep_features(t, self.feature_dim));
        let h = self.lin1.forward(tape, store, ts, feats)?;
        let h = tape.silu(h);
        self.lin2.forward(tape, store, ts, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.lin1.params();
        p.extend(self.lin2.params());
        p
    }
}
