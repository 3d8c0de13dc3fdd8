//! Compute-efficient denoiser wrapper.
//!
//! Wraps a base denoiser so most of its compute runs at half the working
//! resolution: trainable replicas of the base's first and last layers operate
//! at full resolution, a stride-2 adapter convolution hands their features to
//! the untouched base, and a nearest-neighbor upsample plus adapter
//! convolution brings the base's prediction back up, where fusion
//! convolutions merge it with skip features from the replica front. The base
//! itself is frozen except for low-rank adapters on its attention
//! projections, so the pretrained weights stay pristine in checkpoints.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::layers::{norm_groups, Conv2d, GroupNorm, ResBlock, TrainSet};
use crate::rng::Stream;
use crate::tape::{ParamId, ParamStore, Tape, VarId};
use crate::tensor::Tensor;
use crate::unet::{build_unet, TransformerBlock, UNetModel, UNetSpec};
use crate::Result;

/// Low-rank adapter settings for the base's attention projections.
///
/// The update is `y = W x + (alpha / rank) * B (A x)` with `B` zero-initialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scale numerator; defaults to the rank so `alpha / rank = 1`.
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        LoraConfig {
            rank: 4,
            alpha: 4.0,
        }
    }
}

/// Wrapper configuration: the base denoiser plus how many of its first/last
/// layer blocks are replicated at full resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeUnetSpec {
    pub base: UNetSpec,
    /// Number of replicated blocks on each side of the base.
    pub replica_depth: usize,
    pub lora: LoraConfig,
}

impl CeUnetSpec {
    /// Full-scale configuration used by the complexity report.
    pub fn sd_full() -> Self {
        CeUnetSpec {
            base: UNetSpec::sd_full(),
            replica_depth: 2,
            lora: LoraConfig::default(),
        }
    }

    /// Desk-scale configuration for tests and toy training runs.
    pub fn toy() -> Self {
        CeUnetSpec {
            base: UNetSpec::toy(),
            replica_depth: 1,
            lora: LoraConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.replica_depth == 0 {
            return Err(CoreError::invalid_spec("replica depth must be at least 1"));
        }
        // The front copies the first `depth` blocks of the top down level
        // (`layers_per_block` of them); the back copies the last `depth`
        // blocks of the final up level whose input width is twice the top
        // channel count, which holds for all but that level's first block.
        if self.replica_depth > self.base.layers_per_block {
            return Err(CoreError::invalid_spec(
                "replica depth exceeds the base's layers per block",
            ));
        }
        if self.lora.rank == 0 {
            return Err(CoreError::invalid_spec("adapter rank must be at least 1"));
        }
        if !(self.lora.alpha > 0.0 && self.lora.alpha.is_finite()) {
            return Err(CoreError::invalid_spec("adapter alpha must be positive"));
        }
        Ok(())
    }
}

struct FrontBlock {
    rb: ResBlock,
    attn: Option<TransformerBlock>,
}

struct BackBlock {
    /// Fresh 3x3 convolution merging the upsampled base prediction (or the
    /// previous block's output) with a replica-front skip feature.
    fusion: Conv2d,
    rb: ResBlock,
    attn: Option<TransformerBlock>,
}

/// Parameter groups a training step may update; everything else in the
/// wrapped model (the base minus its low-rank adapters) stays frozen.
#[derive(Debug, Clone, Default)]
pub struct TrainableGroups {
    /// Full-resolution copies of the base's first/last layers.
    pub replicas: Vec<ParamId>,
    /// Resolution-bridging and fusion convolutions, trained from scratch.
    pub adapters: Vec<ParamId>,
    /// Low-rank adapter factors on the base's attention projections.
    pub lora: Vec<ParamId>,
}

impl TrainableGroups {
    /// All trainable ids in one list (replicas, adapters, then low-rank).
    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut ids = self.replicas.clone();
        ids.extend_from_slice(&self.adapters);
        ids.extend_from_slice(&self.lora);
        ids
    }
}

/// Values captured along the wrapper's forward pass, for verifying that the
/// base runs unmodified at half resolution.
#[derive(Debug, Clone)]
pub struct CeProbe {
    /// What the stride-2 adapter hands to the base.
    pub base_input: Tensor,
    /// The base's prediction before upsampling.
    pub base_output: Tensor,
}

/// A base denoiser wrapped with full-resolution replicas and adapters.
pub struct CeUnetModel {
    pub spec: CeUnetSpec,
    pub prefix: String,
    /// The wrapped base; its attention projections carry low-rank adapters.
    pub base: UNetModel,
    front_conv_in: Conv2d,
    front_blocks: Vec<FrontBlock>,
    down_adapter: Conv2d,
    up_adapter: Conv2d,
    back_blocks: Vec<BackBlock>,
    back_norm: GroupNorm,
    back_conv_out: Conv2d,
    replica_ids: Vec<ParamId>,
    adapter_ids: Vec<ParamId>,
    lora_ids: Vec<ParamId>,
}

/// Copies every parameter registered under `dst.` from its counterpart under
/// `src.`, requiring identical shapes.
fn copy_group(store: &mut ParamStore, src: &str, dst: &str) -> Result<()> {
    let dst_prefix = format!("{dst}.");
    let ids = store.ids_with_prefix(&dst_prefix);
    if ids.is_empty() {
        return Err(CoreError::invalid_spec("replica group has no parameters"));
    }
    for id in ids {
        let suffix = store.name(id)[dst.len()..].to_string();
        let src_name = format!("{src}{suffix}");
        let src_id = store.find(&src_name).ok_or_else(|| {
            CoreError::invalid_spec("base weights lack a replica counterpart")
        })?;
        if store.get(src_id).shape() != store.get(id).shape() {
            return Err(CoreError::invalid_spec(
                "base weights are shape-incompatible with the replica",
            ));
        }
        let data = store.get(src_id).clone();
        *store.get_mut(id) = data;
    }
    Ok(())
}

/// Builds the wrapper under `prefix`; the base lives at `{prefix}.base` and
/// the replicas start as bit-exact copies of the base's first/last layers.
pub fn build_ce_unet(
    spec: &CeUnetSpec,
    prefix: &str,
    store: &mut ParamStore,
    seed: u64,
) -> Result<CeUnetModel> {
    spec.validate()?;
    let base_prefix = format!("{prefix}.base");
    let mut base = build_unet(&spec.base, &base_prefix, store, seed)?;

    let mut stream = Stream::derive(seed, &["init", prefix, "wrapper"]);
    let bspec = &spec.base;
    let c0 = bspec.block_channels[0];
    let depth = spec.replica_depth;
    let ted = bspec.time_embed_dim;
    let heads0 = c0 / bspec.head_dim;
    let mut replica_ids = Vec::new();
    let mut adapter_ids = Vec::new();

    let wrap_start = store.len();
    let front_conv_in = Conv2d::init(
        store,
        &format!("{prefix}.front.conv_in"),
        bspec.in_channels,
        c0,
        3,
        1,
        1,
        &mut stream,
    );
    replica_ids.extend(front_conv_in.params());

    let mut front_blocks = Vec::with_capacity(depth);
    for d in 0..depth {
        let rb = ResBlock::init(
            store,
            &format!("{prefix}.front.res{d}"),
            c0,
            c0,
            Some(ted),
            true,
            &mut stream,
        );
        replica_ids.extend(rb.params());
        let attn = bspec.attention[0].then(|| {
            let tr = TransformerBlock::init(
                store,
                &format!("{prefix}.front.attn{d}"),
                c0,
                heads0,
                bspec.context_dim,
                &mut stream,
            );
            replica_ids.extend(tr.params());
            tr
        });
        front_blocks.push(FrontBlock { rb, attn });
    }

    let down_adapter = Conv2d::init(
        store,
        &format!("{prefix}.adapter.down"),
        c0,
        bspec.in_channels,
        3,
        2,
        1,
        &mut stream,
    );
    adapter_ids.extend(down_adapter.params());
    let up_adapter = Conv2d::init(
        store,
        &format!("{prefix}.adapter.up"),
        bspec.out_channels,
        c0,
        3,
        1,
        1,
        &mut stream,
    );
    adapter_ids.extend(up_adapter.params());

    let mut back_blocks = Vec::with_capacity(depth);
    for d in 0..depth {
        let fusion = Conv2d::init(
            store,
            &format!("{prefix}.back.fuse{d}"),
            2 * c0,
            2 * c0,
            3,
            1,
            1,
            &mut stream,
        );
        adapter_ids.extend(fusion.params());
        let rb = ResBlock::init(
            store,
            &format!("{prefix}.back.res{d}"),
            2 * c0,
            c0,
            Some(ted),
            true,
            &mut stream,
        );
        replica_ids.extend(rb.params());
        let attn = bspec.attention[0].then(|| {
            let tr = TransformerBlock::init(
                store,
                &format!("{prefix}.back.attn{d}"),
                c0,
                heads0,
                bspec.context_dim,
                &mut stream,
            );
            replica_ids.extend(tr.params());
            tr
        });
        back_blocks.push(BackBlock { fusion, rb, attn });
    }

    let back_norm = GroupNorm::init(
        store,
        &format!("{prefix}.back.norm_out"),
        c0,
        norm_groups(c0),
    );
    replica_ids.extend(back_norm.params());
    let back_conv_out = Conv2d::init_zero(
        store,
        &format!("{prefix}.back.conv_out"),
        c0,
        bspec.out_channels,
        3,
        1,
        1,
    );
    replica_ids.extend(back_conv_out.params());
    debug_assert_eq!(
        replica_ids.len() + adapter_ids.len(),
        store.len() - wrap_start
    );

    // Overwrite the replica initializations with copies of the base weights.
    copy_group(store, &format!("{base_prefix}.conv_in"), &format!("{prefix}.front.conv_in"))?;
    let last_up = bspec.levels() - 1;
    let layers = bspec.layers_per_block;
    for d in 0..depth {
        copy_group(
            store,
            &format!("{base_prefix}.down0.res{d}"),
            &format!("{prefix}.front.res{d}"),
        )?;
        let src_b = layers + 1 - depth + d;
        copy_group(
            store,
            &format!("{base_prefix}.up{last_up}.res{src_b}"),
            &format!("{prefix}.back.res{d}"),
        )?;
        if bspec.attention[0] {
            copy_group(
                store,
                &format!("{base_prefix}.down0.attn{d}"),
                &format!("{prefix}.front.attn{d}"),
            )?;
            copy_group(
                store,
                &format!("{base_prefix}.up{last_up}.attn{src_b}"),
                &format!("{prefix}.back.attn{d}"),
            )?;
        }
    }
    copy_group(store, &format!("{base_prefix}.norm_out"), &format!("{prefix}.back.norm_out"))?;
    copy_group(store, &format!("{base_prefix}.conv_out"), &format!("{prefix}.back.conv_out"))?;

    // Low-rank adapters go on every attention projection of the base. Their
    // parameters live under `...lora.` names so checkpoints can keep them
    // separate from the pristine base weights.
    let mut lora_stream = Stream::derive(seed, &["init", prefix, "lora"]);
    let mut lora_ids = Vec::new();
    const PROJ: [&str; 8] = [
        "sa.q", "sa.k", "sa.v", "sa.out", "ca.q", "ca.k", "ca.v", "ca.out",
    ];
    for tb in base.transformer_blocks_mut() {
        let name = tb.name.clone();
        for (proj, suffix) in tb.attention_projections().into_iter().zip(PROJ) {
            let wshape = store.get(proj.base.w).shape().to_vec();
            let (cout, cin) = (wshape[0], wshape[1]);
            proj.attach_adapter(
                store,
                &format!("{name}.{suffix}.lora"),
                cin,
                cout,
                spec.lora.rank,
                spec.lora.alpha,
                &mut lora_stream,
            );
            let ad = proj.adapter.as_ref().expect("adapter just attached");
            lora_ids.push(ad.down);
            lora_ids.push(ad.up);
        }
    }

    Ok(CeUnetModel {
        spec: spec.clone(),
        prefix: prefix.into(),
        base,
        front_conv_in,
        front_blocks,
        down_adapter,
        up_adapter,
        back_blocks,
        back_norm,
        back_conv_out,
        replica_ids,
        adapter_ids,
        lora_ids,
    })
}

impl CeUnetModel {
    /// The three trainable parameter groups. Together with
    /// [`UNetModel::params`] on `base` (the frozen set) they partition the
    /// model's parameters.
    pub fn trainable_groups(&self) -> TrainableGroups {
        TrainableGroups {
            replicas: self.replica_ids.clone(),
            adapters: self.adapter_ids.clone(),
            lora: self.lora_ids.clone(),
        }
    }

    /// Base parameters excluding the low-rank factors: the frozen set.
    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.base.params().to_vec()
    }

    /// Trainable-parameter mask: replicas, adapters, and low-rank factors.
    pub fn train_set(&self, store: &ParamStore) -> TrainSet {
        TrainSet::from_ids(store, &self.trainable_groups().all_ids())
    }

    /// Noise prediction at full resolution; `z` is [in_channels, h, w] with
    /// h, w even (and h/2, w/2 divisible as the base requires).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        z: VarId,
        t: f64,
        ctx: VarId,
    ) -> Result<VarId> {
        self.forward_probed(tape, store, ts, z, t, ctx).map(|(out, _)| out)
    }

    /// As [`forward`](Self::forward), also returning the base's input and
    /// output so tests can check the base runs unmodified at half resolution.
    pub fn forward_probed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ts: &TrainSet,
        z: VarId,
        t: f64,
        ctx: VarId,
    ) -> Result<(VarId, CeProbe)> {
        let (c, h, w) = tape.value(z).dims3()?;
        if c != self.spec.base.in_channels || h % 2 != 0 || w % 2 != 0 {
            return Err(CoreError::shape(format!(
                "wrapper input [{c},{h},{w}] needs {} channels and even sides",
                self.spec.base.in_channels
            )));
        }

        let temb = self.base.time_embedding(tape, store, ts, t)?;
        let mut hid = self.front_conv_in.forward(tape, store, ts, z)?;
        let mut skips = Vec::with_capacity(self.front_blocks.len());
        for blk in &self.front_blocks {
            hid = blk.rb.forward(tape, store, ts, hid, Some(temb))?;
            if let Some(tr) = &blk.attn {
                hid = tr.forward(tape, store, ts, hid, ctx)?;
            }
            skips.push(hid);
        }

        let down = self.down_adapter.forward(tape, store, ts, hid)?;
        let base_input = tape.value(down).clone();
        let base_out = self.base.forward_with_temb(tape, store, ts, down, temb, ctx)?;
        let base_output = tape.value(base_out).clone();

        let up = tape.upsample_nearest_2x(base_out)?;
        let mut hid = self.up_adapter.forward(tape, store, ts, up)?;
        for blk in &self.back_blocks {
            let skip = skips.pop().expect("front and back replicas share depth");
            hid = tape.concat_chans(hid, skip)?;
            hid = blk.fusion.forward(tape, store, ts, hid)?;
            hid = blk.rb.forward(tape, store, ts, hid, Some(temb))?;
            if let Some(tr) = &blk.attn {
                hid = tr.forward(tape, store, ts, hid, ctx)?;
            }
        }
        let hid = self.back_norm.forward(tape, store, ts, hid)?;
        let hid = tape.silu(hid);
        let out = self.back_conv_out.forward(tape, store, ts, hid)?;
        Ok((
            out,
            CeProbe {
                base_input,
                base_output,
            },
        ))
    }
}

/// Off-tape noise prediction through the wrapper.
pub fn ce_predict_noise(
    model: &CeUnetModel,
    store: &ParamStore,
    z: &Tensor,
    t: f64,
    ctx: &Tensor,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ts = TrainSet::none(store);
    let zv = tape.constant(z.clone());
    let cv = tape.constant(ctx.clone());
    let out = model.forward(&mut tape, store, &ts, zv, t, cv)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::AdaptedLinear;
    use crate::unet::predict_noise;
    use alloc::string::ToString;
    use alloc::vec;

    fn toy_inputs(seed: u64) -> (Tensor, Tensor) {
        let mut s = Stream::derive(seed, &["ce-in"]);
        let mut z = Tensor::zeros(&[4, 16, 16]);
        s.fill_normal(z.data_mut());
        let mut ctx = Tensor::zeros(&[4, 8]);
        s.fill_normal(ctx.data_mut());
        (z, ctx)
    }

    /// Gives the zero-initialized layers (residual second convs, transformer
    /// output projections, prediction heads) nonzero weights so signals pass,
    /// drawing each parameter's values from its name so that the same layer
    /// receives the same weights in any store.
    fn wake_zero_layers(store: &mut ParamStore, prefix: &str) {
        for id in store.ids_with_prefix(prefix) {
            let name = store.name(id).to_string();
            if name.ends_with(".conv2.w")
                || name.ends_with(".proj_out.w")
                || name.ends_with(".conv_out.w")
            {
                let mut s = Stream::derive(0x77616b65, &["wake", &name]);
                for v in store.get_mut(id).data_mut() {
                    *v = 0.05 * s.normal();
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(CeUnetSpec::sd_full().validate().is_ok());
        assert!(CeUnetSpec::toy().validate().is_ok());

        let mut bad = CeUnetSpec::toy();
        bad.replica_depth = 0;
        assert!(bad.validate().is_err());

        // Toy base has one layer per block, so depth 2 has nothing to copy.
        let mut bad = CeUnetSpec::toy();
        bad.replica_depth = 2;
        assert!(bad.validate().is_err());

        let mut bad = CeUnetSpec::toy();
        bad.lora.rank = 0;
        assert!(bad.validate().is_err());

        let mut bad = CeUnetSpec::toy();
        bad.lora.alpha = 0.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn replicas_start_bit_equal_to_base_layers() {
        let mut store = ParamStore::new();
        let model = build_ce_unet(&CeUnetSpec::toy(), "ce", &mut store, 11).unwrap();
        let layers = model.spec.base.layers_per_block;
        let last_up = model.spec.base.levels() - 1;

        // (replica, base source) name pairs for the toy configuration.
        let pairs = [
            ("ce.front.conv_in".to_string(), "ce.base.conv_in".to_string()),
            ("ce.front.res0".to_string(), "ce.base.down0.res0".to_string()),
            (
                "ce.back.res0".to_string(),
                format!("ce.base.up{last_up}.res{layers}"),
            ),
            ("ce.back.norm_out".to_string(), "ce.base.norm_out".to_string()),
            ("ce.back.conv_out".to_string(), "ce.base.conv_out".to_string()),
        ];
        let mut checked = 0usize;
        for (replica, source) in &pairs {
            for id in store.ids_with_prefix(&format!("{replica}.")) {
                let suffix = &store.name(id)[replica.len()..];
                let src = store.find(&format!("{source}{suffix}")).expect("counterpart");
                assert_eq!(store.get(id).shape(), store.get(src).shape());
                for (a, b) in store.get(id).data().iter().zip(store.get(src).data()) {
                    assert_eq!(a.to_bits(), b.to_bits(), "{}", store.name(id));
                }
                checked += 1;
            }
        }
        assert!(checked > 10);

        // The fusion and resolution adapters exist and are fresh random
        // weights rather than copies of anything in the base.
        for name in ["ce.back.fuse0.w", "ce.adapter.down.w", "ce.adapter.up.w"] {
            let id = store.find(name).expect(name);
            assert!(store.get(id).data().iter().any(|&v| v != 0.0), "{name}");
        }
    }

    #[test]
    fn parameter_groups_partition_the_model() {
        let mut store = ParamStore::new();
        let model = build_ce_unet(&CeUnetSpec::toy(), "ce", &mut store, 3).unwrap();
        let groups = model.trainable_groups();
        let frozen = model.frozen_ids();

        let mut seen = alloc::collections::BTreeSet::new();
        for id in groups
            .replicas
            .iter()
            .chain(&groups.adapters)
            .chain(&groups.lora)
            .chain(&frozen)
        {
            assert!(seen.insert(*id), "{} in two groups", store.name(*id));
        }
        let all: alloc::collections::BTreeSet<_> =
            store.ids_with_prefix("ce.").into_iter().collect();
        assert_eq!(seen, all, "groups must cover the whole model");

        assert!(!groups.replicas.is_empty());
        assert!(!groups.adapters.is_empty());
        assert!(!groups.lora.is_empty());
        // Low-rank factors are named so checkpoints can split them out.
        for &id in &groups.lora {
            assert!(store.name(id).contains(".lora."), "{}", store.name(id));
        }
        for &id in &frozen {
            assert!(!store.name(id).contains(".lora."));
        }
    }

    #[test]
    fn fresh_wrapper_predicts_zero_and_keeps_shape() {
        let mut store = ParamStore::new();
        let model = build_ce_unet(&CeUnetSpec::toy(), "ce", &mut store, 5).unwrap();
        let (z, ctx) = toy_inputs(1);
        let out = ce_predict_noise(&model, &store, &z, 1.0, &ctx).unwrap();
        assert_eq!(out.shape(), &[4, 16, 16]);
        assert!(out.data().iter().all(|&v| v == 0.0));

        // Other even sizes work too; odd sides are rejected.
        let z = Tensor::zeros(&[4, 8, 24]);
        let out = ce_predict_noise(&model, &store, &z, 3.0, &ctx).unwrap();
        assert_eq!(out.shape(), &[4, 8, 24]);
        let z = Tensor::zeros(&[4, 10, 16]);
        assert!(ce_predict_noise(&model, &store, &z, 3.0, &ctx).is_err());
    }

    #[test]
    fn base_runs_unmodified_at_half_resolution() {
        let seed = 29;
        let mut store = ParamStore::new();
        let model = build_ce_unet(&CeUnetSpec::toy(), "ce", &mut store, seed).unwrap();
        wake_zero_layers(&mut store, "ce.");

        let (z, ctx) = toy_inputs(2);
        let mut tape = Tape::new();
        let ts = TrainSet::none(&store);
        let zv = tape.constant(z.clone());
        let cv = tape.constant(ctx.clone());
        let (out, probe) = model
            .forward_probed(&mut tape, &store, &ts, zv, 2.0, cv)
            .unwrap();
        assert_eq!(tape.value(out).shape(), &[4, 16, 16]);
        assert_eq!(probe.base_input.shape(), &[4, 8, 8]);
        assert_eq!(probe.base_output.shape(), &[4, 8, 8]);

        // An independently built plain base (same seed and prefix, so the
        // same initialization and waking, but no low-rank adapters) fed the
        // probed half-resolution input must reproduce the wrapped base's
        // output bit for bit: the wrapper leaves the base intact and the
        // fresh zero-factor adapters are invisible.
        let mut plain_store = ParamStore::new();
        let plain = build_unet(&UNetSpec::toy(), "ce.base", &mut plain_store, seed).unwrap();
        wake_zero_layers(&mut plain_store, "ce.");
        let direct = predict_noise(&plain, &plain_store, &probe.base_input, 2.0, &ctx).unwrap();
        for (a, b) in direct.data().iter().zip(probe.base_output.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn deterministic_build() {
        let mut a = ParamStore::new();
        build_ce_unet(&CeUnetSpec::toy(), "ce", &mut a, 7).unwrap();
        let mut b = ParamStore::new();
        build_ce_unet(&CeUnetSpec::toy(), "ce", &mut b, 7).unwrap();
        assert_eq!(a.len(), b.len());
        for id in 0..a.len() {
            assert_eq!(a.name(id), b.name(id));
            for (x, y) in a.get(id).data().iter().zip(b.get(id).data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let mut c = ParamStore::new();
        build_ce_unet(&CeUnetSpec::toy(), "ce", &mut c, 8).unwrap();
        let differs = (0..a.len()).any(|id| {
            a.get(id)
                .data()
                .iter()
                .zip(c.get(id).data())
                .any(|(x, y)| x != y)
        });
        assert!(differs);
    }

    #[test]
    fn low_rank_update_matches_explicit_matrix_assembly() {
        // y = W x + (alpha/r) B (A x) against a directly assembled
        // (W + (alpha/r) B A) x on a rectangular projection.
        let mut store = ParamStore::new();
        let lin = crate::layers::Linear::init(
            &mut store,
            "proj",
            6,
            10,
            false,
            &mut Stream::derive(1, &["w"]),
        );
        let mut al = AdaptedLinear::wrap(lin.clone());
        al.attach_adapter(&mut store, "proj.lora", 6, 10, 3, 1.5, &mut Stream::derive(2, &["a"]));
        let ad = al.adapter.as_ref().unwrap();
        // Give B nonzero values so the update participates.
        let mut s = Stream::derive(3, &["b"]);
        for v in store.get_mut(ad.up).data_mut() {
            *v = s.normal();
        }

        let mut x = Tensor::zeros(&[5, 6]);
        Stream::derive(4, &["x"]).fill_normal(x.data_mut());

        let mut tape = Tape::new();
        let ts = TrainSet::none(&store);
        let xv = tape.constant(x.clone());
        let y = al.forward(&mut tape, &store, &ts, xv).unwrap();
        let got = tape.value(y);

        let w = store.get(lin.w).data();
        let a = store.get(al.adapter.as_ref().unwrap().down).data();
        let b = store.get(al.adapter.as_ref().unwrap().up).data();
        let (rank, scale) = (3usize, 1.5 / 3.0);
        let mut eff = vec![0.0; 10 * 6];
        for o in 0..10 {
            for i in 0..6 {
                let mut lr = 0.0;
                for k in 0..rank {
                    lr += b[o * rank + k] * a[k * 6 + i];
                }
                eff[o * 6 + i] = w[o * 6 + i] + scale * lr;
            }
        }
        for tkn in 0..5 {
            for o in 0..10 {
                let mut want = 0.0;
                for i in 0..6 {
                    want += eff[o * 6 + i] * x.data()[tkn * 6 + i];
                }
                let have = got.data()[tkn * 10 + o];
                assert!(
                    (want - have).abs() <= 1e-12 * want.abs().max(1.0),
                    "token {tkn} out {o}: {want} vs {have}"
                );
            }
        }
    }

    #[test]
    fn identity_factors_reproduce_the_input_exactly() {
        // W = 0, A = I, B = I, alpha = rank makes the layer the identity.
        let n = 5;
        let mut store = ParamStore::new();
        let lin = crate::layers::Linear::init_zero(&mut store, "idw", n, n, false);
        let mut al = AdaptedLinear::wrap(lin);
        al.attach_adapter(
            &mut store,
            "idw.lora",
            n,
            n,
            n,
            n as f64,
            &mut Stream::derive(9, &["i"]),
        );
        let ad = al.adapter.as_ref().unwrap();
        let (down, up) = (ad.down, ad.up);
        for id in [down, up] {
            let t = store.get_mut(id);
            t.data_mut().fill(0.0);
            for i in 0..n {
                t.data_mut()[i * n + i] = 1.0;
            }
        }
        let mut x = Tensor::zeros(&[3, n]);
        Stream::derive(10, &["x"]).fill_normal(x.data_mut());
        let mut tape = Tape::new();
        let ts = TrainSet::none(&store);
        let xv = tape.constant(x.clone());
        let y = al.forward(&mut tape, &store, &ts, xv).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn training_step_moves_only_the_trainable_groups() {
        let mut store = ParamStore::new();
        let model = build_ce_unet(&CeUnetSpec::toy(), "ce", &mut store, 13).unwrap();
        wake_zero_layers(&mut store, "ce.");
        // Wake the zero-initialized B factors too so every group has live
        // members receiving gradient.
        let groups = model.trainable_groups();
        let mut s = Stream::derive(14, &["lora-wake"]);
        for &id in &groups.lora {
            for v in store.get_mut(id).data_mut() {
                *v = 0.05 * s.normal();
            }
        }

        let before: Vec<Tensor> = (0..store.len()).map(|id| store.get(id).clone()).collect();
        let ts = model.train_set(&store);
        let (z, ctx) = toy_inputs(6);
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let cv = tape.constant(ctx);
        let out = model.forward(&mut tape, &store, &ts, zv, 4.0, cv).unwrap();
        let sq = tape.square(out);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();

        for (id, g) in grads.params() {
            let step: Vec<f64> = store
                .get(id)
                .data()
                .iter()
                .zip(g.data())
                .map(|(w, gr)| w - 0.1 * gr)
                .collect();
            store.get_mut(id).data_mut().copy_from_slice(&step);
        }

        let moved = |ids: &[ParamId]| {
            ids.iter()
                .map(|&id| {
                    before[id]
                        .data()
                        .iter()
                        .zip(store.get(id).data())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0f64, f64::max)
                })
                .fold(0.0f64, f64::max)
        };
        assert_eq!(moved(&model.frozen_ids()), 0.0, "base weights must not move");
        assert!(moved(&groups.replicas) > 0.0);
        assert!(moved(&groups.adapters) > 0.0);
        assert!(moved(&groups.lora) > 0.0);
    }
}
