//! Reverse-mode autodiff on a flat tape.
//!
//! Forward calls push nodes and values; `backward` walks the tape once in
//! reverse with a fixed accumulation order, so gradients are bit-identical
//! across runs. The tape also counts multiply-accumulate operations executed
//! by convolution, linear, and attention kernels during the forward pass;
//! this instrumented count is what the static complexity auditor is checked
//! against.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::tensor::{col2im_acc, conv_out_len, im2col, mm_nn_acc, mm_nt_acc, mm_tn_acc, Tensor};
use crate::{CoreError, Result};

/// Index of a value on the tape.
pub type VarId = usize;

/// Index of a parameter in a [`ParamStore`].
pub type ParamId = usize;

/// Named parameter tensors for one experiment. Models allocate their
/// parameters here; checkpoints and optimizers address them by id or name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<alloc::string::String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        debug_assert!(
            !self.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    /// Ids whose names start with `prefix`, in id order.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.len())
            .filter(|&id| self.names[id].starts_with(prefix))
            .collect()
    }

    /// Total number of scalar parameters across `ids`.
    pub fn count_scalars(&self, ids: &[ParamId]) -> u64 {
        ids.iter().map(|&id| self.tensors[id].numel() as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Silu,
    Gelu,
    LeakyRelu(f64),
    Exp,
    Abs,
    Square,
    Clamp(f64, f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug)]
enum Node {
    Leaf,
    Param(ParamId),
    Unary {
        kind: UnaryKind,
        a: VarId,
    },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Dot(VarId, VarId),
    MeanAll(VarId),
    SumAll(VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
    },
    GroupNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        groups: usize,
        // saved: per-group mean and reciprocal std
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    UpsampleNearest2x(VarId),
    Concat2(VarId, VarId),
    SliceChans {
        a: VarId,
        lo: usize,
    },
    SliceCols {
        a: VarId,
        lo: usize,
    },
    Reshape(VarId),
    ChwToTokens(VarId),
    TokensToChw {
        a: VarId,
        h: usize,
        w: usize,
    },
    AddChannelVec {
        x: VarId,
        v: VarId,
    },
    LayerNormRows {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    ChannelL2Norm {
        x: VarId,
        // saved reciprocal norm per pixel
        rnorm: Vec<f64>,
    },
    Attention {
        q: VarId,
        k: VarId,
        v: VarId,
        heads: usize,
        // saved softmax probabilities, [heads, tq, tk] flattened
        probs: Vec<f64>,
    },
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Grads {
    node: Vec<Option<Tensor>>,
    param: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    /// Gradient w.r.t. a tape value (leaves included), if it was required.
    pub fn of(&self, id: VarId) -> Option<&Tensor> {
        self.node.get(id).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a parameter, if any path required it.
    pub fn for_param(&self, id: ParamId) -> Option<&Tensor> {
        self.param.get(&id)
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.param.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.param
    }
}

/// The autodiff tape.
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<Tensor>,
    requires: Vec<bool>,
    macs: u64,
    scratch_col: Vec<f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            vals: Vec::new(),
            requires: Vec::new(),
            macs: 0,
            scratch_col: Vec::new(),
        }
    }

    /// Multiply-accumulate operations executed by forward convolution,
    /// linear, and attention kernels since construction (or the last reset).
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = 0;
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.vals[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node, val: Tensor, requires: bool) -> VarId {
        self.nodes.push(node);
        self.vals.push(val);
        self.requires.push(requires);
        self.nodes.len() - 1
    }

    fn req(&self, id: VarId) -> bool {
        self.requires[id]
    }

    /// Constant input; no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> VarId {
        self.push(Node::Leaf, t, false)
    }

    /// Input that should receive a gradient (used by finite-difference checks
    /// and by losses differentiated w.r.t. activations).
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> VarId {
        self.push(Node::Leaf, t, requires_grad)
    }

    /// Loads a parameter onto the tape. `trainable: false` keeps the whole
    /// subgraph feeding only frozen parameters out of the backward sweep.
    pub fn param(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> VarId {
        self.push(Node::Param(id), store.get(id).clone(), trainable)
    }

    fn unary(&mut self, kind: UnaryKind, a: VarId) -> VarId {
        let x = &self.vals[a];
        let data: Vec<f64> = match kind {
            UnaryKind::Silu => x.data().iter().map(|&v| v * fmath::sigmoid(v)).collect(),
            UnaryKind::Gelu => x.data().iter().map(|&v| fmath::gelu(v)).collect(),
            UnaryKind::LeakyRelu(s) => x
                .data()
                .iter()
                .map(|&v| if v >= 0.0 { v } else { s * v })
                .collect(),
            UnaryKind::Exp => x.data().iter().map(|&v| fmath::exp(v)).collect(),
            UnaryKind::Abs => x.data().iter().map(|&v| fmath::abs(v)).collect(),
            UnaryKind::Square => x.data().iter().map(|&v| v * v).collect(),
            UnaryKind::Clamp(lo, hi) => x.data().iter().map(|&v| v.clamp(lo, hi)).collect(),
            UnaryKind::Scale(s) => x.data().iter().map(|&v| s * v).collect(),
            UnaryKind::AddScalar(c) => x.data().iter().map(|&v| v + c).collect(),
        };
        let val = Tensor::new(x.shape(), data).expect("unary preserves shape");
        let req = self.req(a);
        self.push(Node::Unary { kind, a }, val, req)
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn gelu(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        self.unary(UnaryKind::LeakyRelu(slope), a)
    }

    pub fn exp(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn abs(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Abs, a)
    }

    pub fn square(&mut self, a: VarId) -> VarId {
        self.unary(UnaryKind::Square, a)
    }

    pub fn clamp(&mut self, a: VarId, lo: f64, hi: f64) -> VarId {
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    pub fn scale(&mut self, a: VarId, s: f64) -> VarId {
        self.unary(UnaryKind::Scale(s), a)
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        self.unary(UnaryKind::AddScalar(c), a)
    }

    fn binary_same_shape(&self, a: VarId, b: VarId, what: &str) -> Result<()> {
        if !self.vals[a].same_shape(&self.vals[b]) {
            return Err(CoreError::shape(format!(
                "{what}: {:?} vs {:?}",
                self.vals[a].shape(),
                self.vals[b].shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(a, b, "add")?;
        let data: Vec<f64> = self.vals[a]
            .data()
            .iter()
            .zip(self.vals[b].data())
            .map(|(x, y)| x + y)
            .collect();
        let val = Tensor::new(self.vals[a].shape(), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Node::Add(a, b), val, req))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(a, b, "sub")?;
        let data: Vec<f64> = self.vals[a]
            .data()
            .iter()
            .zip(self.vals[b].data())
            .map(|(x, y)| x - y)
            .collect();
        let val = Tensor::new(self.vals[a].shape(), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Node::Sub(a, b), val, req))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(a, b, "mul")?;
        let data: Vec<f64> = self.vals[a]
            .data()
            .iter()
            .zip(self.vals[b].data())
            .map(|(x, y)| x * y)
            .collect();
        let val = Tensor::new(self.vals[a].shape(), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Node::Mul(a, b), val, req))
    }

    /// Inner product of two same-shape tensors; result is a scalar tensor.
    pub fn dot(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape(a, b, "dot")?;
        let s: f64 = self.vals[a]
            .data()
            .iter()
            .zip(self.vals[b].data())
            .map(|(x, y)| x * y)
            .sum();
        let req = self.req(a) || self.req(b);
        Ok(self.push(Node::Dot(a, b), Tensor::scalar(s), req))
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let n = self.vals[a].numel() as f64;
        let s: f64 = self.vals[a].data().iter().sum();
        let req = self.req(a);
        self.push(Node::MeanAll(a), Tensor::scalar(s / n), req)
    }

    pub fn sum_all(&mut self, a: VarId) -> VarId {
        let s: f64 = self.vals[a].data().iter().sum();
        let req = self.req(a);
        self.push(Node::SumAll(a), Tensor::scalar(s), req)
    }

    /// 2D convolution over [cin,h,w] with weight [cout,cin,k,k].
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        pad: usize,
    ) -> Result<VarId> {
        let (cin, h, wd) = self.vals[x].dims3()?;
        let wshape = self.vals[w].shape().to_vec();
        let [cout, wcin, k, k2]: [usize; 4] = wshape
            .as_slice()
            .try_into()
            .map_err(|_| CoreError::shape(format!("conv weight rank: {wshape:?}")))?;
        if wcin != cin || k != k2 {
            return Err(CoreError::shape(format!(
                "conv weight {wshape:?} vs input [{cin},{h},{wd}]"
            )));
        }
        if let Some(bv) = b {
            if self.vals[bv].shape() != [cout] {
                return Err(CoreError::shape(format!(
                    "conv bias {:?} vs cout {cout}",
                    self.vals[bv].shape()
                )));
            }
        }
        let mut col = core::mem::take(&mut self.scratch_col);
        let (hout, wout) = im2col(self.vals[x].data(), cin, h, wd, k, stride, pad, &mut col);
        let hw = hout * wout;
        let mut y = vec![0.0; cout * hw];
        self.macs += mm_nn_acc(&mut y, self.vals[w].data(), &col, cout, cin * k * k, hw);
        self.scratch_col = col;
        if let Some(bv) = b {
            let bias = self.vals[bv].data();
            for co in 0..cout {
                let row = &mut y[co * hw..(co + 1) * hw];
                let bc = bias[co];
                for v in row.iter_mut() {
                    *v += bc;
                }
            }
        }
        let val = Tensor::new(&[cout, hout, wout], y)?;
        let req = self.req(x) || self.req(w) || b.map(|bv| self.req(bv)).unwrap_or(false);
        Ok(self.push(
            Node::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            val,
            req,
        ))
    }

    /// Token-wise affine map: x[t,in] * w[out,in]^T + b[out].
    pub fn linear(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> Result<VarId> {
        let (t, cin) = self.vals[x].dims2()?;
        let (cout, wcin) = self.vals[w].dims2()?;
        if wcin != cin {
            return Err(CoreError::shape(format!(
                "linear weight [{cout},{wcin}] vs input [{t},{cin}]"
            )));
        }
        let mut y = vec![0.0; t * cout];
        self.macs += mm_nt_acc(&mut y, self.vals[x].data(), self.vals[w].data(), t, cin, cout);
        if let Some(bv) = b {
            if self.vals[bv].shape() != [cout] {
                return Err(CoreError::shape(format!(
                    "linear bias {:?} vs cout {cout}",
                    self.vals[bv].shape()
                )));
            }
            let bias = self.vals[bv].data();
            for row in 0..t {
                let yr = &mut y[row * cout..(row + 1) * cout];
                for (v, bc) in yr.iter_mut().zip(bias) {
                    *v += bc;
                }
            }
        }
        let val = Tensor::new(&[t, cout], y)?;
        let req = self.req(x) || self.req(w) || b.map(|bv| self.req(bv)).unwrap_or(false);
        Ok(self.push(Node::Linear { x, w, b }, val, req))
    }

    /// GroupNorm over [c,h,w] with per-channel affine parameters.
    pub fn group_norm(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        groups: usize,
        eps: f64,
    ) -> Result<VarId> {
        let (c, h, w) = self.vals[x].dims3()?;
        if c % groups != 0 {
            return Err(CoreError::shape(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if self.vals[gamma].shape() != [c] || self.vals[beta].shape() != [c] {
            return Err(CoreError::shape("group_norm affine params"));
        }
        let cg = c / groups;
        let gsize = cg * h * w;
        let xd = self.vals[x].data();
        let mut mean = vec![0.0; groups];
        let mut rstd = vec![0.0; groups];
        let mut y = vec![0.0; c * h * w];
        for g in 0..groups {
            let seg = &xd[g * gsize..(g + 1) * gsize];
            let mu: f64 = seg.iter().sum::<f64>() / gsize as f64;
            let var: f64 = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / gsize as f64;
            let r = 1.0 / fmath::sqrt(var + eps);
            mean[g] = mu;
            rstd[g] = r;
            let gam = self.vals[gamma].data();
            let bet = self.vals[beta].data();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let src = &xd[ch * h * w..(ch + 1) * h * w];
                let dst = &mut y[ch * h * w..(ch + 1) * h * w];
                let ga = gam[ch];
                let be = bet[ch];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mu) * r * ga + be;
                }
            }
        }
        let val = Tensor::new(&[c, h, w], y)?;
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Node::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            val,
            req,
        ))
    }

    /// Nearest-neighbor 2x spatial upsample of [c,h,w].
    pub fn upsample_nearest_2x(&mut self, a: VarId) -> Result<VarId> {
        let (c, h, w) = self.vals[a].dims3()?;
        let xd = self.vals[a].data();
        let mut y = vec![0.0; c * 4 * h * w];
        let (h2, w2) = (2 * h, 2 * w);
        for ch in 0..c {
            for oy in 0..h2 {
                let iy = oy / 2;
                let src = &xd[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                let dst = &mut y[(ch * h2 + oy) * w2..(ch * h2 + oy + 1) * w2];
                for ox in 0..w2 {
                    dst[ox] = src[ox / 2];
                }
            }
        }
        let val = Tensor::new(&[c, h2, w2], y)?;
        let req = self.req(a);
        Ok(self.push(Node::UpsampleNearest2x(a), val, req))
    }

    /// Concatenates two [c,h,w] tensors along channels.
    pub fn concat_chans(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ca, h, w) = self.vals[a].dims3()?;
        let (cb, hb, wb) = self.vals[b].dims3()?;
        if h != hb || w != wb {
            return Err(CoreError::shape(format!(
                "concat: [{ca},{h},{w}] vs [{cb},{hb},{wb}]"
            )));
        }
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(self.vals[a].data());
        data.extend_from_slice(self.vals[b].data());
        let val = Tensor::new(&[ca + cb, h, w], data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(Node::Concat2(a, b), val, req))
    }

    /// Keeps channels lo..hi of a [c,h,w] tensor.
    pub fn slice_chans(&mut self, a: VarId, lo: usize, hi: usize) -> Result<VarId> {
        let (c, h, w) = self.vals[a].dims3()?;
        if lo >= hi || hi > c {
            return Err(CoreError::shape(format!("slice {lo}..{hi} of {c} channels")));
        }
        let data = self.vals[a].data()[lo * h * w..hi * h * w].to_vec();
        let val = Tensor::new(&[hi - lo, h, w], data)?;
        let req = self.req(a);
        Ok(self.push(Node::SliceChans { a, lo }, val, req))
    }

    /// Column slice of a rank-2 token matrix: out[r, j] = in[r, lo + j].
    pub fn slice_cols(&mut self, a: VarId, lo: usize, hi: usize) -> Result<VarId> {
        let (rows, cols) = self.vals[a].dims2()?;
        if lo >= hi || hi > cols {
            return Err(CoreError::shape(format!("slice {lo}..{hi} of {cols} columns")));
        }
        let xd = self.vals[a].data();
        let out_cols = hi - lo;
        let mut data = Vec::with_capacity(rows * out_cols);
        for r in 0..rows {
            data.extend_from_slice(&xd[r * cols + lo..r * cols + hi]);
        }
        let val = Tensor::new(&[rows, out_cols], data)?;
        let req = self.req(a);
        Ok(self.push(Node::SliceCols { a, lo }, val, req))
    }

    /// Same data, different shape (element count must match).
    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.vals[a].numel() {
            return Err(CoreError::shape(format!(
                "reshape {:?} -> {shape:?}",
                self.vals[a].shape()
            )));
        }
        let val = Tensor::new(shape, self.vals[a].data().to_vec())?;
        let req = self.req(a);
        Ok(self.push(Node::Reshape(a), val, req))
    }

    /// [c,h,w] -> [h*w, c] token layout.
    pub fn chw_to_tokens(&mut self, a: VarId) -> Result<VarId> {
        let (c, h, w) = self.vals[a].dims3()?;
        let xd = self.vals[a].data();
        let hw = h * w;
        let mut y = vec![0.0; hw * c];
        for ch in 0..c {
            let src = &xd[ch * hw..(ch + 1) * hw];
            for p in 0..hw {
                y[p * c + ch] = src[p];
            }
        }
        let val = Tensor::new(&[hw, c], y)?;
        let req = self.req(a);
        Ok(self.push(Node::ChwToTokens(a), val, req))
    }

    /// [h*w, c] token layout -> [c,h,w].
    pub fn tokens_to_chw(&mut self, a: VarId, h: usize, w: usize) -> Result<VarId> {
        let (t, c) = self.vals[a].dims2()?;
        if t != h * w {
            return Err(CoreError::shape(format!("tokens {t} vs {h}x{w}")));
        }
        let xd = self.vals[a].data();
        let hw = h * w;
        let mut y = vec![0.0; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                y[ch * hw + p] = xd[p * c + ch];
            }
        }
        let val = Tensor::new(&[c, h, w], y)?;
        let req = self.req(a);
        Ok(self.push(Node::TokensToChw { a, h, w }, val, req))
    }

    /// LayerNorm across the channel axis of a [t,c] token tensor, with
    /// per-channel affine parameters.
    pub fn layer_norm_rows(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<VarId> {
        let (t, c) = self.vals[x].dims2()?;
        if self.vals[gamma].shape() != [c] || self.vals[beta].shape() != [c] {
            return Err(CoreError::shape("layer_norm affine params"));
        }
        let xd = self.vals[x].data();
        let gam = self.vals[gamma].data();
        let bet = self.vals[beta].data();
        let mut mean = vec![0.0; t];
        let mut rstd = vec![0.0; t];
        let mut y = vec![0.0; t * c];
        for row in 0..t {
            let seg = &xd[row * c..(row + 1) * c];
            let mu: f64 = seg.iter().sum::<f64>() / c as f64;
            let var: f64 = seg.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let r = 1.0 / fmath::sqrt(var + eps);
            mean[row] = mu;
            rstd[row] = r;
            let dst = &mut y[row * c..(row + 1) * c];
            for ch in 0..c {
                dst[ch] = (seg[ch] - mu) * r * gam[ch] + bet[ch];
            }
        }
        let val = Tensor::new(&[t, c], y)?;
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Node::LayerNormRows {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            val,
            req,
        ))
    }

    /// Adds a per-channel vector to every spatial position of [c,h,w].
    pub fn add_channel_vec(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        let (c, h, w) = self.vals[x].dims3()?;
        if self.vals[v].shape() != [c] {
            return Err(CoreError::shape(format!(
                "channel vec {:?} vs {c} channels",
                self.vals[v].shape()
            )));
        }
        let hw = h * w;
        let mut y = self.vals[x].data().to_vec();
        let vd = self.vals[v].data();
        for ch in 0..c {
            let seg = &mut y[ch * hw..(ch + 1) * hw];
            let add = vd[ch];
            for s in seg.iter_mut() {
                *s += add;
            }
        }
        let val = Tensor::new(&[c, h, w], y)?;
        let req = self.req(x) || self.req(v);
        Ok(self.push(Node::AddChannelVec { x, v }, val, req))
    }

    /// Normalizes each pixel's channel vector to unit length:
    /// y_c = x_c / sqrt(sum_c x_c^2 + eps).
    pub fn channel_l2_normalize(&mut self, x: VarId, eps: f64) -> Result<VarId> {
        let (c, h, w) = self.vals[x].dims3()?;
        let hw = h * w;
        let xd = self.vals[x].data();
        let mut rnorm = vec![0.0; hw];
        for p in 0..hw {
            let mut s = 0.0;
            for ch in 0..c {
                let v = xd[ch * hw + p];
                s += v * v;
            }
            rnorm[p] = 1.0 / fmath::sqrt(s + eps);
        }
        let mut y = vec![0.0; c * hw];
        for ch in 0..c {
            for p in 0..hw {
                y[ch * hw + p] = xd[ch * hw + p] * rnorm[p];
            }
        }
        let val = Tensor::new(&[c, h, w], y)?;
        let req = self.req(x);
        Ok(self.push(Node::ChannelL2Norm { x, rnorm }, val, req))
    }

    /// Scaled dot-product attention over token tensors.
    /// q: [tq, c], k/v: [tk, c], c divisible by heads; softmax scale is
    /// 1/sqrt(c/heads). Returns [tq, c] (before any output projection).
    pub fn attention(&mut self, q: VarId, k: VarId, v: VarId, heads: usize) -> Result<VarId> {
        let (tq, c) = self.vals[q].dims2()?;
        let (tk, ck) = self.vals[k].dims2()?;
        let (tv, cv) = self.vals[v].dims2()?;
        if ck != c || cv != c || tv != tk {
            return Err(CoreError::shape(format!(
                "attention shapes q[{tq},{c}] k[{tk},{ck}] v[{tv},{cv}]"
            )));
        }
        if c % heads != 0 {
            return Err(CoreError::shape(format!("{c} channels / {heads} heads")));
        }
        let hd = c / heads;
        let scale = 1.0 / fmath::sqrt(hd as f64);
        let qd = self.vals[q].data();
        let kd = self.vals[k].data();
        let vd = self.vals[v].data();

        let mut probs = vec![0.0; heads * tq * tk];
        let mut out = vec![0.0; tq * c];
        let mut qh = vec![0.0; tq * hd];
        let mut kh = vec![0.0; tk * hd];
        let mut vh = vec![0.0; tk * hd];
        let mut mix = vec![0.0; tq * hd];
        for hix in 0..heads {
            let off = hix * hd;
            for t in 0..tq {
                qh[t * hd..(t + 1) * hd].copy_from_slice(&qd[t * c + off..t * c + off + hd]);
            }
            for t in 0..tk {
                kh[t * hd..(t + 1) * hd].copy_from_slice(&kd[t * c + off..t * c + off + hd]);
                vh[t * hd..(t + 1) * hd].copy_from_slice(&vd[t * c + off..t * c + off + hd]);
            }
            let p = &mut probs[hix * tq * tk..(hix + 1) * tq * tk];
            self.macs += mm_nt_acc(p, &qh, &kh, tq, hd, tk);
            for row in p.chunks_mut(tk) {
                let mut mx = f64::NEG_INFINITY;
                for v in row.iter_mut() {
                    *v *= scale;
                    if *v > mx {
                        mx = *v;
                    }
                }
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = fmath::exp(*v - mx);
                    z += *v;
                }
                let inv = 1.0 / z;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            mix.iter_mut().for_each(|m| *m = 0.0);
            self.macs += mm_nn_acc(&mut mix, p, &vh, tq, tk, hd);
            for t in 0..tq {
                out[t * c + off..t * c + off + hd].copy_from_slice(&mix[t * hd..(t + 1) * hd]);
            }
        }
        let val = Tensor::new(&[tq, c], out)?;
        let req = self.req(q) || self.req(k) || self.req(v);
        Ok(self.push(
            Node::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            val,
            req,
        ))
    }

    /// Reverse sweep from a scalar root. Returns gradients for every value
    /// and parameter that required them.
    pub fn backward(&mut self, root: VarId) -> Result<Grads> {
        if self.vals[root].numel() != 1 {
            return Err(CoreError::shape(format!(
                "backward root must be scalar, got {:?}",
                self.vals[root].shape()
            )));
        }
        let n = self.nodes.len();
        let mut node_grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut param_grads: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        if !self.req(root) {
            return Ok(Grads {
                node: node_grads,
                param: param_grads,
            });
        }
        node_grads[root] = Some(Tensor::scalar(1.0));

        for i in (0..=root).rev() {
            let g = match node_grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.req(i) {
                continue;
            }
            match &self.nodes[i] {
                Node::Leaf => {
                    node_grads[i] = Some(g);
                    continue;
                }
                Node::Param(pid) => {
                    let pid = *pid;
                    match param_grads.get_mut(&pid) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += b;
                            }
                        }
                        None => {
                            param_grads.insert(pid, g.clone());
                        }
                    }
                    node_grads[i] = Some(g);
                    continue;
                }
                Node::Unary { kind, a } => {
                    let (kind, a) = (*kind, *a);
                    if self.req(a) {
                        let xd = self.vals[a].data();
                        let gd = g.data();
                        let contrib: Vec<f64> = match kind {
                            UnaryKind::Silu => xd
                                .iter()
                                .zip(gd)
                                .map(|(&x, &gv)| {
                                    let s = fmath::sigmoid(x);
                                    gv * (s * (1.0 + x * (1.0 - s)))
                                })
                                .collect(),
                            UnaryKind::Gelu => xd
                                .iter()
                                .zip(gd)
                                .map(|(&x, &gv)| gv * fmath::gelu_deriv(x))
                                .collect(),
                            UnaryKind::LeakyRelu(sl) => xd
                                .iter()
                                .zip(gd)
                                .map(|(&x, &gv)| if x >= 0.0 { gv } else { sl * gv })
                                .collect(),
                            UnaryKind::Exp => {
                                let yd = self.vals[i].data();
                                yd.iter().zip(gd).map(|(&y, &gv)| gv * y).collect()
                            }
                            UnaryKind::Abs => xd
                                .iter()
                                .zip(gd)
                                .map(|(&x, &gv)| {
                                    if x > 0.0 {
                                        gv
                                    } else if x < 0.0 {
                                        -gv
                                    } else {
                                        0.0
                                    }
                                })
                                .collect(),
                            UnaryKind::Square => {
                                xd.iter().zip(gd).map(|(&x, &gv)| 2.0 * x * gv).collect()
                            }
                            UnaryKind::Clamp(lo, hi) => xd
                                .iter()
                                .zip(gd)
                                .map(|(&x, &gv)| if x > lo && x < hi { gv } else { 0.0 })
                                .collect(),
                            UnaryKind::Scale(s) => gd.iter().map(|&gv| s * gv).collect(),
                            UnaryKind::AddScalar(_) => gd.to_vec(),
                        };
                        self.acc_into(&mut node_grads, a, &contrib);
                    }
                }
                Node::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.req(a) {
                        self.acc_into(&mut node_grads, a, g.data());
                    }
                    if self.req(b) {
                        self.acc_into(&mut node_grads, b, g.data());
                    }
                }
                Node::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.req(a) {
                        self.acc_into(&mut node_grads, a, g.data());
                    }
                    if self.req(b) {
                        let neg: Vec<f64> = g.data().iter().map(|&v| -v).collect();
                        self.acc_into(&mut node_grads, b, &neg);
                    }
                }
                Node::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.req(a) {
                        let contrib: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(self.vals[b].data())
                            .map(|(&gv, &bv)| gv * bv)
                            .collect();
                        self.acc_into(&mut node_grads, a, &contrib);
                    }
                    if self.req(b) {
                        let contrib: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(self.vals[a].data())
                            .map(|(&gv, &av)| gv * av)
                            .collect();
                        self.acc_into(&mut node_grads, b, &contrib);
                    }
                }
                Node::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    let gs = g.item();
                    if self.req(a) {
                        let contrib: Vec<f64> =
                            self.vals[b].data().iter().map(|&v| gs * v).collect();
                        self.acc_into(&mut node_grads, a, &contrib);
                    }
                    if self.req(b) {
                        let contrib: Vec<f64> =
                            self.vals[a].data().iter().map(|&v| gs * v).collect();
                        self.acc_into(&mut node_grads, b, &contrib);
                    }
                }
                Node::MeanAll(a) => {
                    let a = *a;
                    if self.req(a) {
                        let n = self.vals[a].numel() as f64;
                        let gv = g.item() / n;
                        let contrib = vec![gv; self.vals[a].numel()];
                        self.acc_into(&mut node_grads, a, &contrib);
                    }
                }
                Node::SumAll(a) => {
                    let a = *a;
                    if self.req(a) {
                        let gv = g.item();
                        let contrib = vec![gv; self.vals[a].numel()];
                        self.acc_into(&mut node_grads, a, &contrib);
                    }
                }
                Node::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (x, w, b, stride, pad) = (*x, *w, *b, *stride, *pad);
                    let (cin, h, wd) = self.vals[x].dims3().expect("checked at forward");
                    let wshape = self.vals[w].shape();
                    let (cout, k) = (wshape[0], wshape[2]);
                    let (hout, wout) = (
                        conv_out_len(h, k, stride, pad),
                        conv_out_len(wd, k, stride, pad),
                    );
                    let hw = hout * wout;
                    let gd = g.data();
                    if let Some(bv) = b {
                        if self.req(bv) {
                            let mut db = vec![0.0; cout];
                            for co in 0..cout {
                                db[co] = gd[co * hw..(co + 1) * hw].iter().sum();
                            }
                            self.acc_into(&mut node_grads, bv, &db);
                        }
                    }
                    let need_w = self.req(w);
                    let need_x = self.req(x);
                    if need_w || need_x {
                        let mut col = core::mem::take(&mut self.scratch_col);
                        if need_w {
                            im2col(self.vals[x].data(), cin, h, wd, k, stride, pad, &mut col);
                            let mut dw = vec![0.0; cout * cin * k * k];
                            mm_nt_acc(&mut dw, gd, &col, cout, hw, cin * k * k);
                            self.acc_into(&mut node_grads, w, &dw);
                        }
                        if need_x {
                            let rows = cin * k * k;
                            let mut dcol = vec![0.0; rows * hw];
                            mm_tn_acc(&mut dcol, self.vals[w].data(), gd, rows, cout, hw);
                            let mut dx = vec![0.0; cin * h * wd];
                            col2im_acc(&dcol, cin, h, wd, k, stride, pad, &mut dx);
                            self.acc_into(&mut node_grads, x, &dx);
                        }
                        self.scratch_col = col;
                    }
                }
                Node::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (t, cin) = self.vals[x].dims2().expect("checked at forward");
                    let (cout, _) = self.vals[w].dims2().expect("checked at forward");
                    let gd = g.data();
                    if let Some(bv) = b {
                        if self.req(bv) {
                            let mut db = vec![0.0; cout];
                            for row in 0..t {
                                for co in 0..cout {
                                    db[co] += gd[row * cout + co];
                                }
                            }
                            self.acc_into(&mut node_grads, bv, &db);
                        }
                    }
                    if self.req(w) {
                        let mut dw = vec![0.0; cout * cin];
                        mm_tn_acc(&mut dw, gd, self.vals[x].data(), cout, t, cin);
                        self.acc_into(&mut node_grads, w, &dw);
                    }
                    if self.req(x) {
                        let mut dx = vec![0.0; t * cin];
                        mm_nn_acc(&mut dx, gd, self.vals[w].data(), t, cout, cin);
                        self.acc_into(&mut node_grads, x, &dx);
                    }
                }
                Node::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    mean,
                    rstd,
                } => {
                    let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                    let (c, h, w) = self.vals[x].dims3().expect("checked at forward");
                    let cg = c / groups;
                    let hw = h * w;
                    let gsize = cg * hw;
                    let xd = self.vals[x].data();
                    let gd = g.data();
                    let gam = self.vals[gamma].data();
                    if self.req(gamma) {
                        let mut dgam = vec![0.0; c];
                        for ch in 0..c {
                            let grp = ch / cg;
                            let (mu, r) = (mean[grp], rstd[grp]);
                            let mut s = 0.0;
                            for p in 0..hw {
                                let idx = ch * hw + p;
                                s += gd[idx] * (xd[idx] - mu) * r;
                            }
                            dgam[ch] = s;
                        }
                        self.acc_into(&mut node_grads, gamma, &dgam);
                    }
                    if self.req(beta) {
                        let mut dbet = vec![0.0; c];
                        for ch in 0..c {
                            dbet[ch] = gd[ch * hw..(ch + 1) * hw].iter().sum();
                        }
                        self.acc_into(&mut node_grads, beta, &dbet);
                    }
                    if self.req(x) {
                        let mut dx = vec![0.0; c * hw];
                        for grp in 0..groups {
                            let (mu, r) = (mean[grp], rstd[grp]);
                            // dxhat within the group, then the standard
                            // two-moment correction.
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for ci in 0..cg {
                                let ch = grp * cg + ci;
                                let ga = gam[ch];
                                for p in 0..hw {
                                    let idx = ch * hw + p;
                                    let dxh = gd[idx] * ga;
                                    let xh = (xd[idx] - mu) * r;
                                    sum_dxhat += dxh;
                                    sum_dxhat_xhat += dxh * xh;
                                }
                            }
                            let m = gsize as f64;
                            for ci in 0..cg {
                                let ch = grp * cg + ci;
                                let ga = gam[ch];
                                for p in 0..hw {
                                    let idx = ch * hw + p;
                                    let dxh = gd[idx] * ga;
                                    let xh = (xd[idx] - mu) * r;
                                    dx[idx] = r
                                        * (dxh - sum_dxhat / m - xh * (sum_dxhat_xhat / m));
                                }
                            }
                        }
                        self.acc_into(&mut node_grads, x, &dx);
                    }
                }
                Node::UpsampleNearest2x(a) => {
                    let a = *a;
                    if self.req(a) {
                        let (c, h, w) = self.vals[a].dims3().expect("checked at forward");
                        let (h2, w2) = (2 * h, 2 * w);
                        let gd = g.data();
                        let mut dx = vec![0.0; c * h * w];
                        for ch in 0..c {
                            for oy in 0..h2 {
                                let iy = oy / 2;
                                let src = &gd[(ch * h2 + oy) * w2..(ch * h2 + oy + 1) * w2];
                                let dst = &mut dx[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                                for ox in 0..w2 {
                                    dst[ox / 2] += src[ox];
                                }
                            }
                        }
                        self.acc_into(&mut node_grads, a, &dx);
                    }
                }
                Node::Concat2(a, b) => {
                    let (a, b) = (*a, *b);
                    let na = self.vals[a].numel();
                    if self.req(a) {
                        self.acc_into(&mut node_grads, a, &g.data()[..na]);
                    }
                    if self.req(b) {
                        self.acc_into(&mut node_grads, b, &g.data()[na..]);
                    }
                }
                Node::SliceChans { a, lo } => {
                    let (a, lo) = (*a, *lo);
                    if self.req(a) {
                        let (c, h, w) = self.vals[a].dims3().expect("checked at forward");
                        let hw = h * w;
                        let mut dx = vec![0.0; c * hw];
                        let gd = g.data();
                        dx[lo * hw..lo * hw + gd.len()].copy_from_slice(gd);
                        self.acc_into(&mut node_grads, a, &dx);
                    }
                }
                Node::SliceCols { a, lo } => {
                    let (a, lo) = (*a, *lo);
                    if self.req(a) {
                        let (rows, cols) = self.vals[a].dims2().expect("checked at forward");
                        let out_cols = g.data().len() / rows;
                        let mut dx = vec![0.0; rows * cols];
                        let gd = g.data();
                        for r in 0..rows {
                            dx[r * cols + lo..r * cols + lo + out_cols]
                                .copy_from_slice(&gd[r * out_cols..(r + 1) * out_cols]);
                        }
                        self.acc_into(&mut node_grads, a, &dx);
                    }
                }
                Node::Reshape(a) => {
                    let a = *a;
                    if self.req(a) {
                        self.acc_into(&mut node_grads, a, g.data());
                    }
                }
                Node::ChwToTokens(a) => {
                    let a = *a;
                    if self.req(a) {
                        let (c, h, w) = self.vals[a].dims3().expect("checked at forward");
                        let hw = h * w;
                        let gd = g.data();
                        let mut dx = vec![0.0; c * hw];
                        for ch in 0..c {
                            for p in 0..hw {
                                dx[ch * hw + p] = gd[p * c + ch];
                            }
                        }
                        self.acc_into(&mut node_grads, a, &dx);
                    }
                }
                Node::TokensToChw { a, h, w } => {
                    let (a, h, w) = (*a, *h, *w);
                    if self.req(a) {
                        let (_, c) = self.vals[a].dims2().expect("checked at forward");
                        let hw = h * w;
                        let gd = g.data();
                        let mut dx = vec![0.0; hw * c];
                        for p in 0..hw {
                            for ch in 0..c {
                                dx[p * c + ch] = gd[ch * hw + p];
                            }
                        }
                        self.acc_into(&mut node_grads, a, &dx);
                    }
                }
                Node::LayerNormRows {
                    x,
                    gamma,
                    beta,
                    mean,
                    rstd,
                } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let (t, c) = self.vals[x].dims2().expect("checked at forward");
                    let xd = self.vals[x].data();
                    let gd = g.data();
                    let gam = self.vals[gamma].data();
                    if self.req(gamma) {
                        let mut dgam = vec![0.0; c];
                        for row in 0..t {
                            let (mu, r) = (mean[row], rstd[row]);
                            for ch in 0..c {
                                let idx = row * c + ch;
                                dgam[ch] += gd[idx] * (xd[idx] - mu) * r;
                            }
                        }
                        self.acc_into(&mut node_grads, gamma, &dgam);
                    }
                    if self.req(beta) {
                        let mut dbet = vec![0.0; c];
                        for row in 0..t {
                            for ch in 0..c {
                                dbet[ch] += gd[row * c + ch];
                            }
                        }
                        self.acc_into(&mut node_grads, beta, &dbet);
                    }
                    if self.req(x) {
                        let mut dx = vec![0.0; t * c];
                        let m = c as f64;
                        for row in 0..t {
                            let (mu, r) = (mean[row], rstd[row]);
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for ch in 0..c {
                                let idx = row * c + ch;
                                let dxh = gd[idx] * gam[ch];
                                let xh = (xd[idx] - mu) * r;
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xh;
                            }
                            for ch in 0..c {
                                let idx = row * c + ch;
                                let dxh = gd[idx] * gam[ch];
                                let xh = (xd[idx] - mu) * r;
                                dx[idx] =
                                    r * (dxh - sum_dxhat / m - xh * (sum_dxhat_xhat / m));
                            }
                        }
                        self.acc_into(&mut node_grads, x, &dx);
                    }
                }
                Node::AddChannelVec { x, v } => {
                    let (x, v) = (*x, *v);
                    if self.req(x) {
                        self.acc_into(&mut node_grads, x, g.data());
                    }
                    if self.req(v) {
                        let (c, h, w) = self.vals[x].dims3().expect("checked at forward");
                        let hw = h * w;
                        let gd = g.data();
                        let mut dv = vec![0.0; c];
                        for ch in 0..c {
                            dv[ch] = gd[ch * hw..(ch + 1) * hw].iter().sum();
                        }
                        self.acc_into(&mut node_grads, v, &dv);
                    }
                }
                Node::ChannelL2Norm { x, rnorm } => {
                    let x = *x;
                    if self.req(x) {
                        let (c, h, w) = self.vals[x].dims3().expect("checked at forward");
                        let hw = h * w;
                        let xd = self.vals[x].data();
                        let gd = g.data();
                        let mut dx = vec![0.0; c * hw];
                        for p in 0..hw {
                            let r = rnorm[p];
                            let mut gx = 0.0;
                            for ch in 0..c {
                                gx += gd[ch * hw + p] * xd[ch * hw + p];
                            }
                            let corr = gx * r * r;
                            for ch in 0..c {
                                let idx = ch * hw + p;
                                dx[idx] = r * (gd[idx] - xd[idx] * corr);
                            }
                        }
                        self.acc_into(&mut node_grads, x, &dx);
                    }
                }
                Node::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (q, k, v, heads) = (*q, *k, *v, *heads);
                    let (tq, c) = self.vals[q].dims2().expect("checked at forward");
                    let (tk, _) = self.vals[k].dims2().expect("checked at forward");
                    let hd = c / heads;
                    let scale = 1.0 / fmath::sqrt(hd as f64);
                    let qd = self.vals[q].data();
                    let kd = self.vals[k].data();
                    let vd = self.vals[v].data();
                    let gd = g.data();
                    let mut dq = vec![0.0; tq * c];
                    let mut dk = vec![0.0; tk * c];
                    let mut dv = vec![0.0; tk * c];
                    let mut qh = vec![0.0; tq * hd];
                    let mut kh = vec![0.0; tk * hd];
                    let mut vh = vec![0.0; tk * hd];
                    let mut gh = vec![0.0; tq * hd];
                    for hix in 0..heads {
                        let off = hix * hd;
                        for t in 0..tq {
                            qh[t * hd..(t + 1) * hd]
                                .copy_from_slice(&qd[t * c + off..t * c + off + hd]);
                            gh[t * hd..(t + 1) * hd]
                                .copy_from_slice(&gd[t * c + off..t * c + off + hd]);
                        }
                        for t in 0..tk {
                            kh[t * hd..(t + 1) * hd]
                                .copy_from_slice(&kd[t * c + off..t * c + off + hd]);
                            vh[t * hd..(t + 1) * hd]
                                .copy_from_slice(&vd[t * c + off..t * c + off + hd]);
                        }
                        let p = &probs[hix * tq * tk..(hix + 1) * tq * tk];
                        // dV = P^T gh
                        let mut dvh = vec![0.0; tk * hd];
                        mm_tn_acc(&mut dvh, p, &gh, tk, tq, hd);
                        // dP = gh V^T
                        let mut dp = vec![0.0; tq * tk];
                        mm_nt_acc(&mut dp, &gh, &vh, tq, hd, tk);
                        // softmax backward row-wise
                        for t in 0..tq {
                            let prow = &p[t * tk..(t + 1) * tk];
                            let dprow = &mut dp[t * tk..(t + 1) * tk];
                            let dotsum: f64 =
                                prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dpv, &pv) in dprow.iter_mut().zip(prow) {
                                *dpv = pv * (*dpv - dotsum) * scale;
                            }
                        }
                        // dq = dlogits K ; dk = dlogits^T q
                        let mut dqh = vec![0.0; tq * hd];
                        mm_nn_acc(&mut dqh, &dp, &kh, tq, tk, hd);
                        let mut dkh = vec![0.0; tk * hd];
                        mm_tn_acc(&mut dkh, &dp, &qh, tk, tq, hd);
                        for t in 0..tq {
                            dq[t * c + off..t * c + off + hd]
                                .copy_from_slice(&dqh[t * hd..(t + 1) * hd]);
                        }
                        for t in 0..tk {
                            dk[t * c + off..t * c + off + hd]
                                .copy_from_slice(&dkh[t * hd..(t + 1) * hd]);
                            dv[t * c + off..t * c + off + hd]
                                .copy_from_slice(&dvh[t * hd..(t + 1) * hd]);
                        }
                    }
                    if self.req(q) {
                        self.acc_into(&mut node_grads, q, &dq);
                    }
                    if self.req(k) {
                        self.acc_into(&mut node_grads, k, &dk);
                    }
                    if self.req(v) {
                        self.acc_into(&mut node_grads, v, &dv);
                    }
                }
            }
        }

        Ok(Grads {
            node: node_grads,
            param: param_grads,
        })
    }

    fn acc_into(&self, grads: &mut [Option<Tensor>], id: VarId, contrib: &[f64]) {
        match &mut grads[id] {
            Some(t) => {
                debug_assert_eq!(t.numel(), contrib.len());
                for (a, b) in t.data_mut().iter_mut().zip(contrib) {
                    *a += b;
                }
            }
            None => {
                let shape = self.vals[id].shape().to_vec();
                grads[id] =
                    Some(Tensor::new(&shape, contrib.to_vec()).expect("gradient shape"));
            }
        }
    }
}
