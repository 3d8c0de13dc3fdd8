//! Image resampling and blurring on [c,h,w] tensors (off-tape; these feed
//! data preparation, degradation, and baselines, not gradients).
//!
//! All samplers use the half-pixel-center convention:
//! src = (dst + 0.5) * scale - 0.5, with clamp-to-edge borders.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{fmath, CoreError, Result};

/// Interpolation kernel for resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeKernel {
    Nearest,
    Bilinear,
    Bicubic,
    /// Box filter over exact source coverage (pixel mixing).
    Area,
}

fn clampi(v: isize, lo: isize, hi: isize) -> usize {
    v.max(lo).min(hi) as usize
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic(x: f64) -> f64 {
    let a = -0.5;
    let x = fmath::abs(x);
    if x < 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * a
    } else {
        0.0
    }
}

/// Resizes [c,h,w] to [c,out_h,out_w] with the given kernel.
pub fn resize(img: &Tensor, out_h: usize, out_w: usize, kernel: ResizeKernel) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(CoreError::InvalidConfig("resize to zero size".into()));
    }
    if out_h == h && out_w == w {
        return Ok(img.clone());
    }
    match kernel {
        ResizeKernel::Nearest => Ok(resize_nearest(img, c, h, w, out_h, out_w)),
        ResizeKernel::Bilinear => Ok(resize_separable(img, c, h, w, out_h, out_w, 1)),
        ResizeKernel::Bicubic => Ok(resize_separable(img, c, h, w, out_h, out_w, 2)),
        ResizeKernel::Area => Ok(resize_area(img, c, h, w, out_h, out_w)),
    }
}

fn resize_nearest(
    img: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut data = vec![0.0; c * out_h * out_w];
    let src = img.data();
    let ys: Vec<usize> = (0..out_h)
        .map(|oy| clampi(fmath::floor((oy as f64 + 0.5) * sy) as isize, 0, h as isize - 1))
        .collect();
    let xs: Vec<usize> = (0..out_w)
        .map(|ox| clampi(fmath::floor((ox as f64 + 0.5) * sx) as isize, 0, w as isize - 1))
        .collect();
    for ch in 0..c {
        for oy in 0..out_h {
            let srow = &src[(ch * h + ys[oy]) * w..(ch * h + ys[oy] + 1) * w];
            let drow = &mut data[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for ox in 0..out_w {
                drow[ox] = srow[xs[ox]];
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], data).expect("resize shape")
}

/// Separable interpolation; `taps_side` = 1 for linear (2 taps), 2 for
/// cubic (4 taps).
fn resize_separable(
    img: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    taps_side: usize,
) -> Tensor {
    let weights_for = |len_in: usize, len_out: usize| -> Vec<(isize, Vec<f64>)> {
        let scale = len_in as f64 / len_out as f64;
        (0..len_out)
            .map(|o| {
                let center = (o as f64 + 0.5) * scale - 0.5;
                let base = fmath::floor(center) as isize - (taps_side as isize - 1);
                let mut ws = Vec::with_capacity(2 * taps_side);
                for tap in 0..2 * taps_side {
                    let pos = base + tap as isize;
                    let d = center - pos as f64;
                    let wv = if taps_side == 1 {
                        let a = fmath::abs(d);
                        if a < 1.0 {
                            1.0 - a
                        } else {
                            0.0
                        }
                    } else {
                        cubic(d)
                    };
                    ws.push(wv);
                }
                // normalize so border clamping keeps flat fields flat
                let sum: f64 = ws.iter().sum();
                for v in ws.iter_mut() {
                    *v /= sum;
                }
                (base, ws)
            })
            .collect()
    };

    let wx = weights_for(w, out_w);
    let wy = weights_for(h, out_h);
    let src = img.data();
    // horizontal pass: [c, h, out_w]
    let mut mid = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let srow = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let drow = &mut mid[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (ox, (base, ws)) in wx.iter().enumerate() {
                let mut acc = 0.0;
                for (ti, &wv) in ws.iter().enumerate() {
                    let sx = clampi(base + ti as isize, 0, w as isize - 1);
                    acc += wv * srow[sx];
                }
                drow[ox] = acc;
            }
        }
    }
    // vertical pass: [c, out_h, out_w]
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (oy, (base, ws)) in wy.iter().enumerate() {
            let drow = &mut out[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for (ti, &wv) in ws.iter().enumerate() {
                let sy = clampi(base + ti as isize, 0, h as isize - 1);
                let srow = &mid[(ch * h + sy) * out_w..(ch * h + sy + 1) * out_w];
                for ox in 0..out_w {
                    drow[ox] += wv * srow[ox];
                }
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("resize shape")
}

fn resize_area(
    img: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Tensor {
    let coverage = |len_in: usize, len_out: usize| -> Vec<(usize, usize, Vec<f64>)> {
        let scale = len_in as f64 / len_out as f64;
        (0..len_out)
            .map(|o| {
                let lo = o as f64 * scale;
                let hi = (o as f64 + 1.0) * scale;
                let first = fmath::floor(lo) as usize;
                let last = (fmath::ceil(hi) as usize).min(len_in) - 1;
                let mut ws = Vec::with_capacity(last - first + 1);
                for p in first..=last {
                    let seg_lo = lo.max(p as f64);
                    let seg_hi = hi.min(p as f64 + 1.0);
                    ws.push((seg_hi - seg_lo).max(0.0));
                }
                let sum: f64 = ws.iter().sum();
                for v in ws.iter_mut() {
                    *v /= sum;
                }
                (first, last, ws)
            })
            .collect()
    };
    let cx = coverage(w, out_w);
    let cy = coverage(h, out_h);
    let src = img.data();
    let mut mid = vec![0.0; c * h * out_w];
    for ch in 0..c {
        for y in 0..h {
            let srow = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
            let drow = &mut mid[(ch * h + y) * out_w..(ch * h + y + 1) * out_w];
            for (ox, (first, last, ws)) in cx.iter().enumerate() {
                let mut acc = 0.0;
                for (p, &wv) in (*first..=*last).zip(ws) {
                    acc += wv * srow[p];
                }
                drow[ox] = acc;
            }
        }
    }
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        for (oy, (first, last, ws)) in cy.iter().enumerate() {
            let drow = &mut out[(ch * out_h + oy) * out_w..(ch * out_h + oy + 1) * out_w];
            for (p, &wv) in (*first..=*last).zip(ws) {
                let srow = &mid[(ch * h + p) * out_w..(ch * h + p + 1) * out_w];
                for ox in 0..out_w {
                    drow[ox] += wv * srow[ox];
                }
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("resize shape")
}

/// Builds a rotated anisotropic Gaussian kernel. `sigma_x`/`sigma_y` are the
/// principal-axis widths, `theta` the rotation in radians. Isotropic blur is
/// the special case sigma_x == sigma_y.
pub fn gaussian_kernel(sigma_x: f64, sigma_y: f64, theta: f64) -> Tensor {
    let smax = sigma_x.max(sigma_y);
    let r = fmath::ceil(3.0 * smax).max(1.0) as usize;
    let size = 2 * r + 1;
    let (ct, st) = (fmath::cos(theta), fmath::sin(theta));
    let (inv2x, inv2y) = (
        1.0 / (2.0 * sigma_x * sigma_x),
        1.0 / (2.0 * sigma_y * sigma_y),
    );
    let mut data = vec![0.0; size * size];
    let mut sum = 0.0;
    for iy in 0..size {
        for ix in 0..size {
            let dx = ix as f64 - r as f64;
            let dy = iy as f64 - r as f64;
            let u = ct * dx + st * dy;
            let v = -st * dx + ct * dy;
            let val = fmath::exp(-(u * u * inv2x + v * v * inv2y));
            data[iy * size + ix] = val;
            sum += val;
        }
    }
    for v in data.iter_mut() {
        *v /= sum;
    }
    Tensor::new(&[size, size], data).expect("kernel shape")
}

/// Convolves each channel with `kernel` (clamp-to-edge borders).
pub fn filter2d(img: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    let (kh, kw) = kernel.dims2()?;
    let (ry, rx) = (kh as isize / 2, kw as isize / 2);
    let src = img.data();
    let kd = kernel.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let sy = clampi(y as isize + ky as isize - ry, 0, h as isize - 1);
                    for kx in 0..kw {
                        let sx = clampi(x as isize + kx as isize - rx, 0, w as isize - 1);
                        acc += kd[ky * kw + kx] * plane[sy * w + sx];
                    }
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Exact integer box downsample by `factor` (both dims must divide).
pub fn downsample_box(img: &Tensor, factor: usize) -> Result<Tensor> {
    let (c, h, w) = img.dims3()?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(CoreError::InvalidConfig(alloc::format!(
            "box downsample by {factor} needs divisible dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let src = img.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let srow = &src[(ch * h + oy * factor + dy) * w..];
                    for dx in 0..factor {
                        acc += srow[ox * factor + dx];
                    }
                }
                out[(ch * oh + oy) * ow + ox] = acc * inv;
            }
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(c: usize, h: usize, w: usize, v: f64) -> Tensor {
        Tensor::full(&[c, h, w], v)
    }

    #[test]
    fn flat_fields_stay_flat() {
        let img = flat(3, 8, 8, 0.37);
        for kern in [
            ResizeKernel::Nearest,
            ResizeKernel::Bilinear,
            ResizeKernel::Bicubic,
            ResizeKernel::Area,
        ] {
            for (oh, ow) in [(16, 16), (4, 4), (5, 11)] {
                let out = resize(&img, oh, ow, kern).unwrap();
                assert_eq!(out.shape(), &[3, oh, ow]);
                for &v in out.data() {
                    assert!((v - 0.37).abs() < 1e-12, "{kern:?} {oh}x{ow}: {v}");
                }
            }
        }
    }

    #[test]
    fn area_preserves_mean_exactly_on_downscale() {
        let mut img = Tensor::zeros(&[1, 6, 6]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = (i % 7) as f64 * 0.1;
        }
        let mean_in: f64 = img.data().iter().sum::<f64>() / 36.0;
        let out = resize(&img, 3, 3, ResizeKernel::Area).unwrap();
        let mean_out: f64 = out.data().iter().sum::<f64>() / 9.0;
        assert!((mean_in - mean_out).abs() < 1e-12);
    }

    #[test]
    fn box_downsample_averages_blocks() {
        let mut img = Tensor::zeros(&[1, 4, 4]);
        img.data_mut().copy_from_slice(&[
            1.0, 1.0, 2.0, 2.0, //
            1.0, 1.0, 2.0, 2.0, //
            3.0, 3.0, 4.0, 4.0, //
            3.0, 3.0, 4.0, 4.0,
        ]);
        let out = downsample_box(&img, 2).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(downsample_box(&img, 3).is_err());
    }

    #[test]
    fn gaussian_kernel_normalized_and_symmetric() {
        let k = gaussian_kernel(1.2, 1.2, 0.0);
        let sum: f64 = k.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        let (kh, kw) = k.dims2().unwrap();
        assert_eq!(kh, kw);
        // isotropic: symmetric under transpose
        for y in 0..kh {
            for x in 0..kw {
                assert!((k.data()[y * kw + x] - k.data()[x * kw + y]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn anisotropic_kernel_rotates() {
        let k0 = gaussian_kernel(2.0, 0.5, 0.0);
        let k90 = gaussian_kernel(2.0, 0.5, core::f64::consts::FRAC_PI_2);
        let (s, _) = k0.dims2().unwrap();
        // rotating by 90 degrees swaps the principal axes
        let mut max_diff = 0.0f64;
        for y in 0..s {
            for x in 0..s {
                let d = (k0.data()[y * s + x] - k90.data()[x * s + y]).abs();
                max_diff = max_diff.max(d);
            }
        }
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn filter2d_identity_kernel() {
        let mut img = Tensor::zeros(&[2, 5, 5]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        let ident = Tensor::new(&[1, 1], alloc::vec![1.0]).unwrap();
        let out = filter2d(&img, &ident).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn blur_reduces_variance() {
        let mut img = Tensor::zeros(&[1, 16, 16]);
        for (i, v) in img.data_mut().iter_mut().enumerate() {
            *v = if (i / 16 + i % 16) % 2 == 0 { 1.0 } else { 0.0 };
        }
        let k = gaussian_kernel(1.5, 1.5, 0.0);
        let out = filter2d(&img, &k).unwrap();
        let var = |t: &Tensor| {
            let m = t.data().iter().sum::<f64>() / t.numel() as f64;
            t.data().iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / t.numel() as f64
        };
        assert!(var(&out) < 0.25 * var(&img));
    }
}
