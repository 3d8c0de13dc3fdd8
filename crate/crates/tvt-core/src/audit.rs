//! Static complexity auditor: enumerates every parameterized operation a
//! model's forward pass performs and totals parameters and multiply-
//! accumulates, without building the model. The enumeration mirrors the
//! builders in `vae`, `unet`, and `ce_unet` op for op, so on any
//! configuration the audited counts equal the instrumented counts the tape
//! reports for one forward pass (and the parameter totals equal the store's).
//!
//! Conventions: convolution and linear MACs are tallied separately from
//! attention matrix products (logits plus value mix, `2*tq*tk*c`). Biases and
//! normalization affine pairs count as parameters but no MACs. Headline
//! wrapper and pipeline claims use conv+linear MACs; autoencoder claims use
//! the total. Low-rank adapter terms are excluded from headline numbers and
//! included when checking against an instrumented model that carries them.
//!
//! Every model audit is available both as a single [`CostReport`] and as an
//! ordered per-section breakdown ([`CostSection`]); the totals are defined as
//! the sum of the sections.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::Serialize;

use crate::ce_unet::CeUnetSpec;
use crate::unet::UNetSpec;
use crate::vae::VaeSpec;

/// Parameter and multiply-accumulate totals for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub macs_conv_linear: u64,
    pub macs_attention: u64,
}

impl CostReport {
    pub fn total_macs(&self) -> u64 {
        self.macs_conv_linear + self.macs_attention
    }

    pub fn merge(&mut self, o: CostReport) {
        self.params += o.params;
        self.macs_conv_linear += o.macs_conv_linear;
        self.macs_attention += o.macs_attention;
    }

    fn conv(&mut self, cin: usize, cout: usize, k: usize, hw_out: usize) {
        self.params += (k * k * cin * cout + cout) as u64;
        self.macs_conv_linear += (k * k * cin * cout) as u64 * hw_out as u64;
    }

    fn linear(&mut self, cin: usize, cout: usize, tokens: usize, bias: bool) {
        self.params += (cin * cout + if bias { cout } else { 0 }) as u64;
        self.macs_conv_linear += (cin * cout) as u64 * tokens as u64;
    }

    fn norm(&mut self, c: usize) {
        self.params += 2 * c as u64;
    }

    fn attention(&mut self, tq: usize, tk: usize, c: usize) {
        self.macs_attention += 2 * (tq as u64) * (tk as u64) * (c as u64);
    }

    /// One low-rank adapter pair on a projection: down [rank, cin] then
    /// up [cout, rank], both bias-free.
    fn lora(&mut self, cin: usize, cout: usize, tokens: usize, rank: usize) {
        self.linear(cin, rank, tokens, false);
        self.linear(rank, cout, tokens, false);
    }

    /// Residual block: two 3x3 convs behind norms, optional per-block time
    /// projection, 1x1 skip when widths differ.
    fn resblock(&mut self, cin: usize, cout: usize, hw: usize, time_dim: Option<usize>) {
        self.norm(cin);
        self.conv(cin, cout, 3, hw);
        if let Some(td) = time_dim {
            self.linear(td, cout, 1, true);
        }
        self.norm(cout);
        self.conv(cout, cout, 3, hw);
        if cin != cout {
            self.conv(cin, cout, 1, hw);
        }
    }

    /// Autoencoder-style single-head attention: norm, q/k/v/proj projections
    /// with bias, full token-token attention.
    fn spatial_attention(&mut self, c: usize, hw: usize) {
        self.norm(c);
        for _ in 0..4 {
            self.linear(c, c, hw, true);
        }
        self.attention(hw, hw, c);
    }

    /// Denoiser transformer block; `lora_rank` adds adapter factors on all
    /// eight attention projections.
    fn transformer(
        &mut self,
        c: usize,
        tokens: usize,
        ctx_dim: usize,
        ctx_tokens: usize,
        lora_rank: Option<usize>,
    ) {
        self.norm(c);
        self.linear(c, c, tokens, true); // proj_in
        self.norm(c); // ln1
        for _ in 0..3 {
            self.linear(c, c, tokens, false); // self q, k, v
        }
        self.attention(tokens, tokens, c);
        self.linear(c, c, tokens, true); // self out
        self.norm(c); // ln2
        self.linear(c, c, tokens, false); // cross q
        self.linear(ctx_dim, c, ctx_tokens, false); // cross k
        self.linear(ctx_dim, c, ctx_tokens, false); // cross v
        self.attention(tokens, ctx_tokens, c);
        self.linear(c, c, tokens, true); // cross out
        self.norm(c); // ln3
        self.linear(c, 8 * c, tokens, true); // gated feed-forward in
        self.linear(4 * c, c, tokens, true); // feed-forward out
        self.linear(c, c, tokens, true); // proj_out
        if let Some(r) = lora_rank {
            for _ in 0..3 {
                self.lora(c, c, tokens, r); // self q, k, v
            }
            self.lora(c, c, tokens, r); // self out
            self.lora(c, c, tokens, r); // cross q
            self.lora(ctx_dim, c, ctx_tokens, r); // cross k
            self.lora(ctx_dim, c, ctx_tokens, r); // cross v
            self.lora(c, c, tokens, r); // cross out
        }
    }
}

/// One named slice of a forward pass with its own subtotal. Sections appear
/// in execution order; summing them reproduces the model total.
#[derive(Debug, Clone, Serialize)]
pub struct CostSection {
    pub name: String,
    pub cost: CostReport,
}

/// Sums a breakdown back into one report.
pub fn merge_sections(sections: &[CostSection]) -> CostReport {
    let mut a = CostReport::default();
    for s in sections {
        a.merge(s.cost);
    }
    a
}

fn section<'a>(out: &'a mut Vec<CostSection>, name: String) -> &'a mut CostReport {
    out.push(CostSection {
        name,
        cost: CostReport::default(),
    });
    &mut out.last_mut().expect("just pushed").cost
}

/// Encoder forward breakdown at input resolution `res` x `res`.
pub fn encoder_sections(spec: &VaeSpec, res: usize) -> Vec<CostSection> {
    let mut out = Vec::new();
    let chans = &spec.stage_channels;
    let n = chans.len();
    let mut hw = res * res;
    section(&mut out, "conv_in".into()).conv(3, chans[0], 3, hw);
    let mut c_prev = chans[0];
    for (i, &ch) in chans.iter().enumerate() {
        let a = section(&mut out, format!("down-{i}"));
        for _ in 0..spec.blocks_per_stage {
            a.resblock(c_prev, ch, hw, None);
            c_prev = ch;
        }
        if i < n - 1 {
            hw /= 4;
            a.conv(ch, ch, 3, hw);
        }
    }
    let top = chans[n - 1];
    if spec.mid_attention {
        let a = section(&mut out, "mid".into());
        a.resblock(top, top, hw, None);
        a.spatial_attention(top, hw);
        a.resblock(top, top, hw, None);
    }
    let a = section(&mut out, "head".into());
    a.norm(top);
    a.conv(top, 2 * spec.latent_channels, 3, hw);
    a.conv(2 * spec.latent_channels, 2 * spec.latent_channels, 1, hw);
    out
}

/// Encoder forward cost at input resolution `res` x `res`.
pub fn encoder_cost(spec: &VaeSpec, res: usize) -> CostReport {
    merge_sections(&encoder_sections(spec, res))
}

/// Decoder forward breakdown producing a `res` x `res` image.
pub fn decoder_sections(spec: &VaeSpec, res: usize) -> Vec<CostSection> {
    let mut out = Vec::new();
    let chans = &spec.stage_channels;
    let n = chans.len();
    let top = chans[n - 1];
    let lat = spec.latent_channels;
    let side = res / spec.downsample_factor;
    let mut hw = side * side;
    {
        let a = section(&mut out, "stem".into());
        a.conv(lat, lat, 1, hw);
        a.conv(lat, top, 3, hw);
    }
    if spec.mid_attention {
        let a = section(&mut out, "mid".into());
        a.resblock(top, top, hw, None);
        a.spatial_attention(top, hw);
        a.resblock(top, top, hw, None);
    }
    let mut c_prev = top;
    for (j, &ch) in chans.iter().rev().enumerate() {
        let a = section(&mut out, format!("up-{j}"));
        for _ in 0..spec.decoder_blocks_per_stage() {
            a.resblock(c_prev, ch, hw, None);
            c_prev = ch;
        }
        if j < n - 1 {
            hw *= 4;
            a.conv(ch, ch, 3, hw);
        }
    }
    let a = section(&mut out, "head".into());
    a.norm(chans[0]);
    a.conv(chans[0], 3, 3, hw);
    out
}

/// Decoder forward cost producing a `res` x `res` image.
pub fn decoder_cost(spec: &VaeSpec, res: usize) -> CostReport {
    merge_sections(&decoder_sections(spec, res))
}

/// Encode-plus-decode roundtrip cost at resolution `res`.
pub fn vae_roundtrip_cost(spec: &VaeSpec, res: usize) -> CostReport {
    let mut a = encoder_cost(spec, res);
    a.merge(decoder_cost(spec, res));
    a
}

/// Denoiser forward breakdown on a `res` x `res` latent. `lora_rank` counts
/// low-rank adapters attached to every transformer attention projection.
pub fn unet_sections(spec: &UNetSpec, res: usize, lora_rank: Option<usize>) -> Vec<CostSection> {
    let mut out = Vec::new();
    let chans = &spec.block_channels;
    let n = chans.len();
    let td = spec.time_embed_dim;
    let (cd, ct) = (spec.context_dim, spec.context_len);

    {
        let a = section(&mut out, "time_embed".into());
        a.linear(chans[0], td, 1, true);
        a.linear(td, td, 1, true);
    }

    let mut hw = res * res;
    section(&mut out, "conv_in".into()).conv(spec.in_channels, chans[0], 3, hw);
    let mut skips = Vec::with_capacity(1 + n * spec.layers_per_block + n);
    skips.push(chans[0]);
    let mut c_prev = chans[0];
    for (i, &ch) in chans.iter().enumerate() {
        let a = section(&mut out, format!("down-{i}"));
        for _ in 0..spec.layers_per_block {
            a.resblock(c_prev, ch, hw, Some(td));
            c_prev = ch;
            if spec.attention[i] {
                a.transformer(ch, hw, cd, ct, lora_rank);
            }
            skips.push(ch);
        }
        if i < n - 1 {
            hw /= 4;
            a.conv(ch, ch, 3, hw);
            skips.push(ch);
        }
    }

    let top = chans[n - 1];
    {
        let a = section(&mut out, "mid".into());
        a.resblock(top, top, hw, Some(td));
        if spec.mid_attention {
            a.transformer(top, hw, cd, ct, lora_rank);
        }
        a.resblock(top, top, hw, Some(td));
    }

    for i in (0..n).rev() {
        let ch = chans[i];
        let a = section(&mut out, format!("up-{i}"));
        for _ in 0..spec.layers_per_block + 1 {
            let skip = skips.pop().expect("skip stack underflow in audit");
            a.resblock(c_prev + skip, ch, hw, Some(td));
            c_prev = ch;
            if spec.attention[i] {
                a.transformer(ch, hw, cd, ct, lora_rank);
            }
        }
        if i > 0 {
            hw *= 4;
            a.conv(ch, ch, 3, hw);
        }
    }
    debug_assert!(skips.is_empty());

    let a = section(&mut out, "head".into());
    a.norm(chans[0]);
    a.conv(chans[0], spec.out_channels, 3, hw);
    out
}

/// Denoiser forward cost on a `res` x `res` latent.
pub fn unet_cost(spec: &UNetSpec, res: usize, lora_rank: Option<usize>) -> CostReport {
    merge_sections(&unet_sections(spec, res, lora_rank))
}

/// Wrapper forward breakdown on a `res` x `res` latent: full-resolution
/// replica front/back plus the untouched base at half resolution.
/// `with_lora` counts the base's low-rank adapters (replicas never carry
/// them).
pub fn ce_unet_sections(spec: &CeUnetSpec, res: usize, with_lora: bool) -> Vec<CostSection> {
    let mut out = Vec::new();
    let b = &spec.base;
    let c0 = b.block_channels[0];
    let td = b.time_embed_dim;
    let (cd, ct) = (b.context_dim, b.context_len);
    let hw_hi = res * res;
    let hw_lo = hw_hi / 4;

    section(&mut out, "front.conv_in".into()).conv(b.in_channels, c0, 3, hw_hi);
    for k in 0..spec.replica_depth {
        let a = section(&mut out, format!("front.block-{k}"));
        a.resblock(c0, c0, hw_hi, Some(td));
        if b.attention[0] {
            a.transformer(c0, hw_hi, cd, ct, None);
        }
    }
    // stride-2 down adapter
    section(&mut out, "front.down_adapter".into()).conv(c0, b.in_channels, 3, hw_lo);

    for s in unet_sections(b, res / 2, with_lora.then_some(spec.lora.rank)) {
        out.push(CostSection {
            name: format!("base.{}", s.name),
            cost: s.cost,
        });
    }

    // up adapter after nearest x2
    section(&mut out, "back.up_adapter".into()).conv(b.out_channels, c0, 3, hw_hi);
    for k in 0..spec.replica_depth {
        let a = section(&mut out, format!("back.block-{k}"));
        a.conv(2 * c0, 2 * c0, 3, hw_hi); // fusion
        a.resblock(2 * c0, c0, hw_hi, Some(td));
        if b.attention[0] {
            a.transformer(c0, hw_hi, cd, ct, None);
        }
    }
    let a = section(&mut out, "back.head".into());
    a.norm(c0);
    a.conv(c0, b.out_channels, 3, hw_hi);
    out
}

/// Wrapper forward cost on a `res` x `res` latent.
pub fn ce_unet_cost(spec: &CeUnetSpec, res: usize, with_lora: bool) -> CostReport {
    merge_sections(&ce_unet_sections(spec, res, with_lora))
}

/// The full-scale complexity claims, computed from the audit functions at
/// the published operating points (512 x 512 images, 128 x 128 latents for
/// the wrapper, adapters excluded).
#[derive(Debug, Clone, Serialize)]
pub struct ComplexityClaims {
    /// 8x autoencoder roundtrip at 512.
    pub vae_d8: CostReport,
    /// 4x autoencoder roundtrip at 512.
    pub vae_d4: CostReport,
    /// Parameter saving of the 4x autoencoder, percent.
    pub vae_param_reduction_pct: f64,
    /// Total-MAC saving of the 4x autoencoder roundtrip, percent.
    pub vae_macs_reduction_pct: f64,
    /// Base denoiser on a 128 latent.
    pub unet_at_128: CostReport,
    /// Wrapper on a 128 latent (base runs at 64).
    pub ce_at_128: CostReport,
    /// Wrapper / base conv+linear MAC ratio.
    pub ce_ratio: f64,
    /// Conv+linear MACs of encode + wrapper + decode.
    pub pipeline_macs_conv_linear: u64,
    /// Parameters of the 4x autoencoder plus the wrapper.
    pub pipeline_params: u64,
}

pub fn complexity_claims() -> ComplexityClaims {
    let res = 512;
    let d8 = vae_roundtrip_cost(&VaeSpec::d8_full(), res);
    let d4 = vae_roundtrip_cost(&VaeSpec::d4_full(), res);
    let ce_spec = CeUnetSpec::sd_full();
    let unet = unet_cost(&ce_spec.base, res / 4, None);
    let ce = ce_unet_cost(&ce_spec, res / 4, false);
    let enc4 = encoder_cost(&VaeSpec::d4_full(), res);
    let dec4 = decoder_cost(&VaeSpec::d4_full(), res);
    let pct = |old: u64, new: u64| 100.0 * (1.0 - new as f64 / old as f64);
    ComplexityClaims {
        vae_d8: d8,
        vae_d4: d4,
        vae_param_reduction_pct: pct(d8.params, d4.params),
        vae_macs_reduction_pct: pct(d8.total_macs(), d4.total_macs()),
        unet_at_128: unet,
        ce_at_128: ce,
        ce_ratio: ce.macs_conv_linear as f64 / unet.macs_conv_linear as f64,
        pipeline_macs_conv_linear: enc4.macs_conv_linear
            + ce.macs_conv_linear
            + dec4.macs_conv_linear,
        pipeline_params: d4.params + ce.params,
    }
}
