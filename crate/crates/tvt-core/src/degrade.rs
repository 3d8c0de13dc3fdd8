//! Seeded synthetic degradation: turns clean high-res crops into realistic
//! low-res counterparts through an ordered pipeline of blur, rescaling,
//! noise, and block-DCT compression, ending in an exact /4 resize. Every
//! sampled parameter is drawn from one seeded stream and reported in an
//! applied-ops record, so the whole pipeline is a pure function of
//! (image, config, seed).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::CoreError;
use crate::fmath;
use crate::resize::{filter2d, gaussian_kernel, resize, ResizeKernel};
use crate::rng::{derive_seed, Stream};
use crate::sr::ImagePair;
use crate::tensor::Tensor;
use crate::vae::ImageTensor;
use crate::Result;

/// Shape of the sampled blur kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurFamily {
    Isotropic,
    /// Independent principal-axis widths plus a random rotation.
    Anisotropic,
}

/// One step of the degradation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationStage {
    Blur {
        family: BlurFamily,
        /// Sampled standard-deviation range (inclusive; may be degenerate).
        sigma: (f64, f64),
    },
    Resize {
        /// Relative scale range; the resampling kernel is drawn uniformly
        /// from the four supported kinds.
        scale: (f64, f64),
    },
    Noise {
        /// Gaussian standard-deviation range (unit pixel scale).
        gaussian_sigma: (f64, f64),
        /// Shot-noise range: photons per unit intensity.
        poisson_lambda: (f64, f64),
        /// Probability of choosing gaussian over shot noise.
        gaussian_prob: f64,
    },
    Compression {
        /// Block-DCT quality range, 1 (worst) to 100 (near lossless).
        quality: (usize, usize),
    },
}

/// Full pipeline description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationConfig {
    pub stages: Vec<DegradationStage>,
    /// Run the stage list twice before the final resize.
    pub second_order: bool,
    /// Output scale divisor; the pipeline contract fixes this at 4.
    pub final_scale: usize,
    /// Kernel of the exact final downsample.
    pub final_kernel: ResizeKernel,
    /// Default seed for callers that do not pass one explicitly.
    pub seed: u64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            stages: vec![
                DegradationStage::Blur {
                    family: BlurFamily::Anisotropic,
                    sigma: (0.2, 2.0),
                },
                DegradationStage::Resize { scale: (0.5, 1.5) },
                DegradationStage::Noise {
                    gaussian_sigma: (0.0, 0.08),
                    poisson_lambda: (50.0, 400.0),
                    gaussian_prob: 0.5,
                },
                DegradationStage::Compression { quality: (30, 95) },
            ],
            second_order: false,
            final_scale: 4,
            final_kernel: ResizeKernel::Bicubic,
            seed: 0,
        }
    }
}

impl DegradationConfig {
    /// No-op pipeline: only the exact /4 resize.
    pub fn identity() -> Self {
        DegradationConfig {
            stages: Vec::new(),
            ..DegradationConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.final_scale != 4 {
            return Err(CoreError::InvalidConfig(format!(
                "final scale is fixed at 4, got {}",
                self.final_scale
            )));
        }
        for (i, stage) in self.stages.iter().enumerate() {
            let bad = |what: &str| {
                Err(CoreError::InvalidConfig(format!(
                    "stage {i}: empty or invalid {what} range"
                )))
            };
            match stage {
                DegradationStage::Blur { sigma, .. } => {
                    if !(sigma.0 > 0.0 && sigma.0 <= sigma.1) {
                        return bad("sigma");
                    }
                }
                DegradationStage::Resize { scale } => {
                    if !(scale.0 > 0.0 && scale.0 <= scale.1) {
                        return bad("scale");
                    }
                }
                DegradationStage::Noise {
                    gaussian_sigma,
                    poisson_lambda,
                    gaussian_prob,
                } => {
                    if !(gaussian_sigma.0 >= 0.0 && gaussian_sigma.0 <= gaussian_sigma.1) {
                        return bad("gaussian sigma");
                    }
                    if !(poisson_lambda.0 > 0.0 && poisson_lambda.0 <= poisson_lambda.1) {
                        return bad("shot-noise lambda");
                    }
                    if !(0.0..=1.0).contains(gaussian_prob) {
                        return bad("gaussian probability");
                    }
                }
                DegradationStage::Compression { quality } => {
                    if !(quality.0 >= 1 && quality.0 <= quality.1 && quality.1 <= 100) {
                        return bad("quality");
                    }
                }
            }
        }
        Ok(())
    }
}

/// One concretely applied operation with its sampled parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum AppliedOp {
    Blur {
        family: BlurFamily,
        sigma_x: f64,
        sigma_y: f64,
        theta: f64,
    },
    Resize {
        scale: f64,
        kernel: ResizeKernel,
        out_h: usize,
        out_w: usize,
    },
    GaussianNoise {
        sigma: f64,
    },
    ShotNoise {
        lambda: f64,
    },
    Compression {
        quality: usize,
    },
    FinalDownsample {
        kernel: ResizeKernel,
        out_h: usize,
        out_w: usize,
    },
}

/// What one degradation run actually did.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecord {
    pub seed: u64,
    pub ops: Vec<AppliedOp>,
}

const RESIZE_KERNELS: [ResizeKernel; 4] = [
    ResizeKernel::Nearest,
    ResizeKernel::Bilinear,
    ResizeKernel::Bicubic,
    ResizeKernel::Area,
];

/// Degrades one high-res image to its /4 low-res counterpart.
/// Deterministic in (image, config, seed); dims must divide by the scale.
pub fn degrade(
    hr: &ImageTensor,
    cfg: &DegradationConfig,
    seed: u64,
) -> Result<(ImageTensor, DegradationRecord)> {
    cfg.validate()?;
    let (h0, w0) = hr.hw();
    if h0 % cfg.final_scale != 0 || w0 % cfg.final_scale != 0 {
        return Err(CoreError::shape(format!(
            "image {h0}x{w0} not divisible by {}",
            cfg.final_scale
        )));
    }
    let mut rng = Stream::derive(seed, &["degrade"]);
    let mut img = hr.tensor().clone();
    let mut ops = Vec::new();
    let rounds = if cfg.second_order { 2 } else { 1 };
    for _ in 0..rounds {
        for stage in &cfg.stages {
            img = apply_stage(&img, stage, cfg, h0, &mut rng, &mut ops)?;
        }
    }
    let (lh, lw) = (h0 / cfg.final_scale, w0 / cfg.final_scale);
    img = resize(&img, lh, lw, cfg.final_kernel)?;
    ops.push(AppliedOp::FinalDownsample {
        kernel: cfg.final_kernel,
        out_h: lh,
        out_w: lw,
    });
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((ImageTensor::new(img)?, DegradationRecord { seed, ops }))
}

fn apply_stage(
    img: &Tensor,
    stage: &DegradationStage,
    cfg: &DegradationConfig,
    h0: usize,
    rng: &mut Stream,
    ops: &mut Vec<AppliedOp>,
) -> Result<Tensor> {
    match stage {
        DegradationStage::Blur { family, sigma } => {
            let (sx, sy, theta) = match family {
                BlurFamily::Isotropic => {
                    let s = rng.range(sigma.0, sigma.1);
                    (s, s, 0.0)
                }
                BlurFamily::Anisotropic => (
                    rng.range(sigma.0, sigma.1),
                    rng.range(sigma.0, sigma.1),
                    rng.range(0.0, core::f64::consts::PI),
                ),
            };
            ops.push(AppliedOp::Blur {
                family: *family,
                sigma_x: sx,
                sigma_y: sy,
                theta,
            });
            filter2d(img, &gaussian_kernel(sx, sy, theta))
        }
        DegradationStage::Resize { scale } => {
            let (_, h, w) = img.dims3()?;
            let s = rng.range(scale.0, scale.1);
            let lo = h0 / cfg.final_scale;
            let target = |d: usize| -> usize {
                (fmath::floor(d as f64 * s + 0.5) as usize).clamp(lo.max(1), 2 * h0)
            };
            let (oh, ow) = (target(h), target(w));
            let kernel = RESIZE_KERNELS[rng.below(RESIZE_KERNELS.len())];
            ops.push(AppliedOp::Resize {
                scale: s,
                kernel,
                out_h: oh,
                out_w: ow,
            });
            resize(img, oh, ow, kernel)
        }
        DegradationStage::Noise {
            gaussian_sigma,
            poisson_lambda,
            gaussian_prob,
        } => {
            let mut out = img.clone();
            if rng.uniform() < *gaussian_prob {
                let s = rng.range(gaussian_sigma.0, gaussian_sigma.1);
                ops.push(AppliedOp::GaussianNoise { sigma: s });
                for v in out.data_mut() {
                    *v += s * rng.normal();
                }
            } else {
                let lambda = rng.range(poisson_lambda.0, poisson_lambda.1);
                ops.push(AppliedOp::ShotNoise { lambda });
                for v in out.data_mut() {
                    let mean = (*v).max(0.0) * lambda;
                    *v = rng.poisson(mean) as f64 / lambda;
                }
            }
            Ok(out)
        }
        DegradationStage::Compression { quality } => {
            let q = rng.int_range(quality.0 as i64, quality.1 as i64) as usize;
            ops.push(AppliedOp::Compression { quality: q });
            block_dct_compress(img, q)
        }
    }
}

// ----- block-DCT compression ------------------------------------------------

const BLOCK: usize = 8;

/// Standard luminance quantization table, applied to every channel.
const QUANT_BASE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0, //
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0, //
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0, //
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0, //
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0, //
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0, //
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0, //
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

fn quant_table(quality: usize) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, &b) in t.iter_mut().zip(&QUANT_BASE) {
        *o = fmath::floor((b * scale + 50.0) / 100.0).clamp(1.0, 255.0);
    }
    t
}

/// Orthonormal DCT-II basis: C[u][n] = c(u) cos((2n+1) u pi / 16).
fn dct_basis() -> [[f64; BLOCK]; BLOCK] {
    let mut c = [[0.0; BLOCK]; BLOCK];
    let norm0 = fmath::sqrt(1.0 / BLOCK as f64);
    let norm = fmath::sqrt(2.0 / BLOCK as f64);
    for (u, row) in c.iter_mut().enumerate() {
        for (n, v) in row.iter_mut().enumerate() {
            let ang = core::f64::consts::PI * (2.0 * n as f64 + 1.0) * u as f64
                / (2.0 * BLOCK as f64);
            *v = if u == 0 { norm0 } else { norm } * fmath::cos(ang);
        }
    }
    c
}

/// Lossy roundtrip through quantized 8x8 DCT blocks per channel, in the
/// 0..255 integer-signal convention with edge-replicated padding.
fn block_dct_compress(img: &Tensor, quality: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let qt = quant_table(quality);
    let basis = dct_basis();
    let ph = h.div_ceil(BLOCK) * BLOCK;
    let pw = w.div_ceil(BLOCK) * BLOCK;
    let src = img.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    let mut padded = vec![0.0; ph * pw];
    let mut block = [[0.0; BLOCK]; BLOCK];
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                let sx = x.min(w - 1);
                padded[y * pw + x] = plane[sy * w + sx] * 255.0 - 128.0;
            }
        }
        for by in (0..ph).step_by(BLOCK) {
            for bx in (0..pw).step_by(BLOCK) {
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        *v = padded[(by + y) * pw + bx + x];
                    }
                }
                // forward: B = C X C^T
                mat_c_x(&basis, &block, &mut tmp); // tmp = C X
                mat_x_ct(&tmp, &basis, &mut block); // block = tmp C^T
                for (y, row) in block.iter_mut().enumerate() {
                    for (x, v) in row.iter_mut().enumerate() {
                        let q = qt[y * BLOCK + x];
                        *v = fmath::floor(*v / q + 0.5) * q;
                    }
                }
                // inverse: X = C^T B C
                mat_ct_x(&basis, &block, &mut tmp); // tmp = C^T B
                mat_x_c(&tmp, &basis, &mut block); // block = tmp C
                for (y, row) in block.iter().enumerate() {
                    for (x, v) in row.iter().enumerate() {
                        padded[(by + y) * pw + bx + x] = *v;
                    }
                }
            }
        }
        let dst = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                dst[(ch * h + y) * w + x] = ((padded[y * pw + x] + 128.0) / 255.0).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

fn mat_c_x(c: &[[f64; BLOCK]; BLOCK], x: &[[f64; BLOCK]; BLOCK], out: &mut [[f64; BLOCK]; BLOCK]) {
    for (i, orow) in out.iter_mut().enumerate() {
        for (j, o) in orow.iter_mut().enumerate() {
            *o = (0..BLOCK).map(|k| c[i][k] * x[k][j]).sum();
        }
    }
}

fn mat_x_ct(x: &[[f64; BLOCK]; BLOCK], c: &[[f64; BLOCK]; BLOCK], out: &mut [[f64; BLOCK]; BLOCK]) {
    for (i, orow) in out.iter_mut().enumerate() {
        for (j, o) in orow.iter_mut().enumerate() {
            *o = (0..BLOCK).map(|k| x[i][k] * c[j][k]).sum();
        }
    }
}

fn mat_ct_x(c: &[[f64; BLOCK]; BLOCK], x: &[[f64; BLOCK]; BLOCK], out: &mut [[f64; BLOCK]; BLOCK]) {
    for (i, orow) in out.iter_mut().enumerate() {
        for (j, o) in orow.iter_mut().enumerate() {
            *o = (0..BLOCK).map(|k| c[k][i] * x[k][j]).sum();
        }
    }
}

fn mat_x_c(x: &[[f64; BLOCK]; BLOCK], c: &[[f64; BLOCK]; BLOCK], out: &mut [[f64; BLOCK]; BLOCK]) {
    for (i, orow) in out.iter_mut().enumerate() {
        for (j, o) in orow.iter_mut().enumerate() {
            *o = (0..BLOCK).map(|k| x[i][k] * c[k][j]).sum();
        }
    }
}

// ----- pair dataset ---------------------------------------------------------

/// Provenance of one generated pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub source_index: usize,
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop: usize,
    pub seed: u64,
    pub applied: DegradationRecord,
}

/// Reproducible description of a generated pair dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairManifest {
    pub crop: usize,
    pub base_seed: u64,
    pub records: Vec<PairRecord>,
}

/// Crops `n` random square patches from the sources and degrades each.
/// Fully reproducible from (sources, cfg, n, crop, base_seed).
pub fn make_pairs(
    sources: &[ImageTensor],
    cfg: &DegradationConfig,
    n: usize,
    crop: usize,
    base_seed: u64,
) -> Result<(Vec<ImagePair>, PairManifest)> {
    cfg.validate()?;
    if crop == 0 || crop % cfg.final_scale != 0 {
        return Err(CoreError::InvalidConfig(format!(
            "crop {crop} must be a positive multiple of {}",
            cfg.final_scale
        )));
    }
    if n > 0 && sources.is_empty() {
        return Err(CoreError::InvalidConfig("no source images".into()));
    }
    for (i, s) in sources.iter().enumerate() {
        let (h, w) = s.hw();
        if h < crop || w < crop {
            return Err(CoreError::InvalidConfig(format!(
                "source {i} is {h}x{w}, smaller than crop {crop}"
            )));
        }
    }
    let mut rng = Stream::derive(base_seed, &["pairs"]);
    let mut pairs = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let source_index = rng.below(sources.len());
        let (h, w) = sources[source_index].hw();
        let crop_y = rng.below(h - crop + 1);
        let crop_x = rng.below(w - crop + 1);
        let hr = crop_image(sources[source_index].tensor(), crop_y, crop_x, crop)?;
        let seed = derive_seed(base_seed, &["pair-item"]) ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let (lr, applied) = degrade(&hr, cfg, seed)?;
        records.push(PairRecord {
            source_index,
            crop_y,
            crop_x,
            crop,
            seed,
            applied,
        });
        pairs.push(ImagePair { lr, hr });
    }
    Ok((
        pairs,
        PairManifest {
            crop,
            base_seed,
            records,
        },
    ))
}

fn crop_image(src: &Tensor, y0: usize, x0: usize, side: usize) -> Result<ImageTensor> {
    let (c, h, w) = src.dims3()?;
    if y0 + side > h || x0 + side > w {
        return Err(CoreError::shape(format!(
            "crop {side} at ({y0},{x0}) outside {h}x{w}"
        )));
    }
    let mut out = Tensor::zeros(&[c, side, side]);
    let s = src.data();
    let d = out.data_mut();
    for ch in 0..c {
        for y in 0..side {
            let srow = &s[(ch * h + y0 + y) * w + x0..(ch * h + y0 + y) * w + x0 + side];
            d[(ch * side + y) * side..(ch * side + y) * side + side].copy_from_slice(srow);
        }
    }
    ImageTensor::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_image(side: usize, v: f64) -> ImageTensor {
        ImageTensor::new(Tensor::full(&[3, side, side], v)).unwrap()
    }

    fn textured_image(side: usize, seed: u64) -> ImageTensor {
        let mut s = Stream::derive(seed, &["tex"]);
        let mut t = Tensor::zeros(&[3, side, side]);
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let v = 0.5
                        + 0.25 * fmath::sin(0.35 * x as f64 + c as f64)
                        + 0.2 * fmath::cos(0.23 * y as f64 + 0.1 * x as f64)
                        + 0.05 * s.normal();
                    t.data_mut()[(c * side + y) * side + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        ImageTensor::new(t).unwrap()
    }

    fn upsample4(lr: &ImageTensor, kernel: ResizeKernel) -> Tensor {
        let (h, w) = lr.hw();
        resize(lr.tensor(), 4 * h, 4 * w, kernel).unwrap()
    }

    fn mean_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / a.numel() as f64
    }

    #[test]
    fn identity_config_keeps_constants_flat() {
        let hr = constant_image(32, 0.37);
        let (lr, record) = degrade(&hr, &DegradationConfig::identity(), 7).unwrap();
        assert_eq!(lr.hw(), (8, 8));
        for &v in lr.tensor().data() {
            assert!((v - 0.37).abs() < 1e-12, "{v}");
        }
        assert_eq!(record.ops.len(), 1);
        assert!(matches!(
            record.ops[0],
            AppliedOp::FinalDownsample { out_h: 8, out_w: 8, .. }
        ));
    }

    #[test]
    fn non_divisible_dims_are_rejected() {
        let hr = ImageTensor::new(Tensor::full(&[3, 30, 30], 0.5)).unwrap();
        assert!(degrade(&hr, &DegradationConfig::identity(), 1).is_err());
    }

    #[test]
    fn deterministic_in_seed_and_sensitive_to_it() {
        let hr = textured_image(32, 11);
        let cfg = DegradationConfig::default();
        let (a, ra) = degrade(&hr, &cfg, 101).unwrap();
        let (b, rb) = degrade(&hr, &cfg, 101).unwrap();
        assert_eq!(ra, rb);
        for (x, y) in a.tensor().data().iter().zip(b.tensor().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let (c, rc) = degrade(&hr, &cfg, 102).unwrap();
        assert!(rc != ra || c.tensor().data() != a.tensor().data());
    }

    #[test]
    fn record_reports_every_sampled_parameter_in_range() {
        let hr = textured_image(32, 12);
        let cfg = DegradationConfig::default();
        let (_, record) = degrade(&hr, &cfg, 55).unwrap();
        // one op per stage plus the final downsample
        assert_eq!(record.ops.len(), cfg.stages.len() + 1);
        for op in &record.ops {
            match *op {
                AppliedOp::Blur { sigma_x, sigma_y, .. } => {
                    assert!((0.2..=2.0).contains(&sigma_x));
                    assert!((0.2..=2.0).contains(&sigma_y));
                }
                AppliedOp::Resize { scale, .. } => assert!((0.5..=1.5).contains(&scale)),
                AppliedOp::GaussianNoise { sigma } => assert!((0.0..=0.08).contains(&sigma)),
                AppliedOp::ShotNoise { lambda } => assert!((50.0..=400.0).contains(&lambda)),
                AppliedOp::Compression { quality } => assert!((30..=95).contains(&quality)),
                AppliedOp::FinalDownsample { out_h, out_w, .. } => {
                    assert_eq!((out_h, out_w), (8, 8));
                }
            }
        }
        // second order doubles the sampled ops
        let cfg2 = DegradationConfig {
            second_order: true,
            ..DegradationConfig::default()
        };
        let (_, record2) = degrade(&hr, &cfg2, 55).unwrap();
        assert_eq!(record2.ops.len(), 2 * cfg.stages.len() + 1);
    }

    #[test]
    fn gaussian_noise_variance_matches_the_configured_sigma() {
        // Nearest-neighbor final sampling keeps iid pixel noise untouched, so
        // the variance of (upsampled lr - hr) estimates sigma^2 directly.
        let sigma = 0.1;
        let hr = constant_image(256, 0.5);
        let cfg = DegradationConfig {
            stages: vec![DegradationStage::Noise {
                gaussian_sigma: (sigma, sigma),
                poisson_lambda: (100.0, 100.0),
                gaussian_prob: 1.0,
            }],
            final_kernel: ResizeKernel::Nearest,
            ..DegradationConfig::default()
        };
        let (lr, record) = degrade(&hr, &cfg, 21).unwrap();
        assert!(matches!(record.ops[0], AppliedOp::GaussianNoise { .. }));
        let up = upsample4(&lr, ResizeKernel::Nearest);
        let diff: Vec<f64> = up
            .data()
            .iter()
            .zip(hr.tensor().data())
            .map(|(&a, &b)| a - b)
            .collect();
        let mean = diff.iter().sum::<f64>() / diff.len() as f64;
        let var = diff.iter().map(|&d| (d - mean) * (d - mean)).sum::<f64>() / diff.len() as f64;
        let rel = (var - sigma * sigma).abs() / (sigma * sigma);
        assert!(rel < 0.10, "variance {var} vs {}", sigma * sigma);
    }

    #[test]
    fn error_energy_grows_with_stronger_ranges() {
        let hr = textured_image(64, 13);
        let energy = |cfg: &DegradationConfig| -> f64 {
            let (lr, _) = degrade(&hr, cfg, 31).unwrap();
            mean_abs_diff(&upsample4(&lr, ResizeKernel::Bicubic), hr.tensor())
        };
        let noise_cfg = |hi: f64| DegradationConfig {
            stages: vec![DegradationStage::Noise {
                gaussian_sigma: (hi, hi),
                poisson_lambda: (100.0, 100.0),
                gaussian_prob: 1.0,
            }],
            ..DegradationConfig::default()
        };
        let blur_cfg = |hi: f64| DegradationConfig {
            stages: vec![DegradationStage::Blur {
                family: BlurFamily::Isotropic,
                sigma: (hi, hi),
            }],
            ..DegradationConfig::default()
        };
        let n: Vec<f64> = [0.02, 0.1, 0.3].iter().map(|&s| energy(&noise_cfg(s))).collect();
        assert!(n[0] < n[1] && n[1] < n[2], "noise energies {n:?}");
        let b: Vec<f64> = [0.5, 1.5, 3.0].iter().map(|&s| energy(&blur_cfg(s))).collect();
        assert!(b[0] < b[1] && b[1] < b[2], "blur energies {b:?}");
    }

    #[test]
    fn lower_compression_quality_means_larger_error() {
        let hr = textured_image(64, 14);
        let err_at = |q: usize| -> f64 {
            let out = block_dct_compress(hr.tensor(), q).unwrap();
            mean_abs_diff(&out, hr.tensor())
        };
        let e90 = err_at(90);
        let e10 = err_at(10);
        assert!(e10 > 2.0 * e90, "q=10 err {e10} vs q=90 err {e90}");
        // near-lossless at the top of the scale
        assert!(err_at(100) < 0.005);
    }

    #[test]
    fn output_stays_in_unit_range() {
        let hr = textured_image(32, 15);
        let cfg = DegradationConfig {
            stages: vec![DegradationStage::Noise {
                gaussian_sigma: (0.5, 0.5),
                poisson_lambda: (100.0, 100.0),
                gaussian_prob: 1.0,
            }],
            ..DegradationConfig::default()
        };
        let (lr, _) = degrade(&hr, &cfg, 41).unwrap();
        for &v in lr.tensor().data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pair_dataset_is_reproducible_with_crops_in_bounds() {
        let sources = [textured_image(48, 16), textured_image(64, 17)];
        let cfg = DegradationConfig::default();
        let (pairs_a, man_a) = make_pairs(&sources, &cfg, 5, 16, 99).unwrap();
        let (pairs_b, man_b) = make_pairs(&sources, &cfg, 5, 16, 99).unwrap();
        assert_eq!(man_a, man_b);
        assert_eq!(pairs_a.len(), 5);
        for (pa, pb) in pairs_a.iter().zip(&pairs_b) {
            assert_eq!(pa.hr.tensor().data(), pb.hr.tensor().data());
            assert_eq!(pa.lr.tensor().data(), pb.lr.tensor().data());
        }
        for (pair, rec) in pairs_a.iter().zip(&man_a.records) {
            let (sh, sw) = sources[rec.source_index].hw();
            assert!(rec.crop_y + rec.crop <= sh && rec.crop_x + rec.crop <= sw);
            assert_eq!(pair.hr.hw(), (16, 16));
            assert_eq!(pair.lr.hw(), (4, 4));
        }
        // different base seed changes the manifest
        let (_, man_c) = make_pairs(&sources, &cfg, 5, 16, 100).unwrap();
        assert_ne!(man_a, man_c);

        // n = 0: empty dataset, still a valid manifest
        let (none, man0) = make_pairs(&sources, &cfg, 0, 16, 99).unwrap();
        assert!(none.is_empty());
        assert_eq!(man0.records.len(), 0);
        assert_eq!(man0.crop, 16);

        // crop larger than a source fails
        assert!(make_pairs(&sources, &cfg, 1, 64, 99).is_err());
    }
}
