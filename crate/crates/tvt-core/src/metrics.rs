//! Luma-channel image quality metrics: PSNR and SSIM on the BT.601 Y
//! channel of full-range RGB, plus a reconstruction benchmark runner.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{fmath, CoreError, Result};

/// PSNR values are capped here so identical images stay finite.
pub const PSNR_CAP_DB: f64 = 100.0;

/// SSIM window: 11x11 Gaussian, sigma 1.5.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// BT.601 full-range luma from [3,h,w] RGB in [0,1]: Y = 0.299 R + 0.587 G
/// + 0.114 B.
pub fn to_y(rgb: &Tensor) -> Result<Tensor> {
    let (c, h, w) = rgb.dims3()?;
    if c != 3 {
        return Err(CoreError::shape(alloc::format!(
            "to_y expects 3 channels, got {c}"
        )));
    }
    let d = rgb.data();
    let hw = h * w;
    let mut y = vec![0.0; hw];
    for p in 0..hw {
        y[p] = 0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p];
    }
    Tensor::new(&[h, w], y)
}

fn check_same_rgb(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ca, ha, wa) = a.dims3()?;
    let (cb, hb, wb) = b.dims3()?;
    if ca != 3 || cb != 3 || ha != hb || wa != wb {
        return Err(CoreError::shape(alloc::format!(
            "metric inputs [{ca},{ha},{wa}] vs [{cb},{hb},{wb}]"
        )));
    }
    Ok((ha, wa))
}

/// PSNR on the Y channel, in dB, capped at [`PSNR_CAP_DB`]. Peak signal is
/// 1.0 (full-range unit images).
pub fn psnr_y(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_rgb(a, b)?;
    let ya = to_y(a)?;
    let yb = to_y(b)?;
    let n = ya.numel() as f64;
    let mse: f64 = ya
        .data()
        .iter()
        .zip(yb.data())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let psnr = -10.0 * fmath::log10(mse);
    Ok(psnr.min(PSNR_CAP_DB))
}

/// Normalized 1D Gaussian window of length [`SSIM_WINDOW`].
fn ssim_window_1d() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    let inv = 1.0 / (2.0 * SSIM_SIGMA * SSIM_SIGMA);
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = fmath::exp(-d * d * inv);
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Valid-mode separable Gaussian filter of a [h,w] plane.
fn gauss_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> (Vec<f64>, usize, usize) {
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    // horizontal
    let mut mid = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let out = &mut mid[y * ow..(y + 1) * ow];
        for ox in 0..ow {
            let mut acc = 0.0;
            for (k, &wv) in win.iter().enumerate() {
                acc += wv * row[ox + k];
            }
            out[ox] = acc;
        }
    }
    // vertical
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (k, &wv) in win.iter().enumerate() {
                acc += wv * mid[(oy + k) * ow + ox];
            }
            out[oy * ow + ox] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean SSIM on the Y channel: 11x11 Gaussian window (sigma 1.5),
/// k1 = 0.01, k2 = 0.03, dynamic range 1, valid-mode windows.
pub fn ssim_y(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (h, w) = check_same_rgb(a, b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(CoreError::InvalidConfig(alloc::format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let ya = to_y(a)?;
    let yb = to_y(b)?;
    let win = ssim_window_1d();
    let xa = ya.data();
    let xb = yb.data();
    let sq_a: Vec<f64> = xa.iter().map(|&v| v * v).collect();
    let sq_b: Vec<f64> = xb.iter().map(|&v| v * v).collect();
    let ab: Vec<f64> = xa.iter().zip(xb).map(|(&x, &y)| x * y).collect();

    let (mu_a, oh, ow) = gauss_valid(xa, h, w, &win);
    let (mu_b, _, _) = gauss_valid(xb, h, w, &win);
    let (e_aa, _, _) = gauss_valid(&sq_a, h, w, &win);
    let (e_bb, _, _) = gauss_valid(&sq_b, h, w, &win);
    let (e_ab, _, _) = gauss_valid(&ab, h, w, &win);

    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let mut acc = 0.0;
    for p in 0..oh * ow {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        let va = e_aa[p] - ma * ma;
        let vb = e_bb[p] - mb * mb;
        let cov = e_ab[p] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        acc += num / den;
    }
    Ok(acc / (oh * ow) as f64)
}

/// Per-image reconstruction quality record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconRecord {
    pub index: usize,
    pub psnr_y: f64,
    pub ssim_y: f64,
    pub perceptual: f64,
}

/// Aggregate of a reconstruction benchmark.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconSummary {
    pub count: usize,
    pub mean_psnr_y: f64,
    pub mean_ssim_y: f64,
    pub mean_perceptual: f64,
}

pub fn summarize(records: &[ReconRecord]) -> ReconSummary {
    let n = records.len().max(1) as f64;
    ReconSummary {
        count: records.len(),
        mean_psnr_y: records.iter().map(|r| r.psnr_y).sum::<f64>() / n,
        mean_ssim_y: records.iter().map(|r| r.ssim_y).sum::<f64>() / n,
        mean_perceptual: records.iter().map(|r| r.perceptual).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn rand_img(h: usize, w: usize, tag: &str) -> Tensor {
        let mut s = Stream::derive(88, &["metrics", tag]);
        let data: Vec<f64> = (0..3 * h * w).map(|_| s.uniform()).collect();
        Tensor::new(&[3, h, w], data).unwrap()
    }

    #[test]
    fn luma_of_pure_colors() {
        let mk = |r: f64, g: f64, b: f64| {
            let mut t = Tensor::zeros(&[3, 2, 2]);
            for p in 0..4 {
                t.data_mut()[p] = r;
                t.data_mut()[4 + p] = g;
                t.data_mut()[8 + p] = b;
            }
            t
        };
        let y_red = to_y(&mk(1.0, 0.0, 0.0)).unwrap();
        let y_green = to_y(&mk(0.0, 1.0, 0.0)).unwrap();
        let y_blue = to_y(&mk(0.0, 0.0, 1.0)).unwrap();
        let y_white = to_y(&mk(1.0, 1.0, 1.0)).unwrap();
        assert!((y_red.data()[0] - 0.299).abs() < 1e-12);
        assert!((y_green.data()[0] - 0.587).abs() < 1e-12);
        assert!((y_blue.data()[0] - 0.114).abs() < 1e-12);
        assert!((y_white.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_identical_is_capped() {
        let img = rand_img(16, 16, "p1");
        assert_eq!(psnr_y(&img, &img).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_known_offset() {
        // uniform gray vs gray+delta: Y mse = delta^2 exactly
        let a = Tensor::full(&[3, 8, 8], 0.5);
        let b = Tensor::full(&[3, 8, 8], 0.6);
        let want = -10.0 * (0.1f64 * 0.1).log10();
        let got = psnr_y(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn psnr_shape_mismatch_errors() {
        let a = rand_img(8, 8, "s1");
        let b = rand_img(8, 9, "s2");
        assert!(psnr_y(&a, &b).is_err());
        assert!(ssim_y(&a, &b).is_err());
    }

    #[test]
    fn ssim_self_is_one() {
        let img = rand_img(16, 20, "ss");
        let s = ssim_y(&img, &img).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn ssim_degrades_with_noise() {
        let img = rand_img(24, 24, "sd");
        let mut noisy = img.clone();
        let mut st = Stream::derive(4, &["noise"]);
        for v in noisy.data_mut().iter_mut() {
            *v = (*v + 0.2 * st.normal()).clamp(0.0, 1.0);
        }
        let s = ssim_y(&img, &noisy).unwrap();
        assert!(s < 0.9, "{s}");
        assert!(s > -1.0);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = rand_img(8, 12, "t1");
        assert!(ssim_y(&a, &a).is_err());
    }

    /// Brute-force SSIM oracle: direct per-window weighted statistics from
    /// the 2D Gaussian, no separable shortcuts.
    fn ssim_oracle(a: &Tensor, b: &Tensor) -> f64 {
        let ya = to_y(a).unwrap();
        let yb = to_y(b).unwrap();
        let (h, w) = ya.dims2().unwrap();
        let n = SSIM_WINDOW;
        let r = (n / 2) as f64;
        let mut w2 = vec![0.0; n * n];
        let mut sum = 0.0;
        for y in 0..n {
            for x in 0..n {
                let d2 = (y as f64 - r) * (y as f64 - r) + (x as f64 - r) * (x as f64 - r);
                let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
                w2[y * n + x] = v;
                sum += v;
            }
        }
        for v in w2.iter_mut() {
            *v /= sum;
        }
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let (xa, xb) = (ya.data(), yb.data());
        let mut acc = 0.0;
        let mut count = 0;
        for oy in 0..=(h - n) {
            for ox in 0..=(w - n) {
                let (mut ma, mut mb) = (0.0, 0.0);
                for ky in 0..n {
                    for kx in 0..n {
                        let wv = w2[ky * n + kx];
                        ma += wv * xa[(oy + ky) * w + ox + kx];
                        mb += wv * xb[(oy + ky) * w + ox + kx];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for ky in 0..n {
                    for kx in 0..n {
                        let wv = w2[ky * n + kx];
                        let pa = xa[(oy + ky) * w + ox + kx];
                        let pb = xb[(oy + ky) * w + ox + kx];
                        va += wv * pa * pa;
                        vb += wv * pb * pb;
                        cov += wv * pa * pb;
                    }
                }
                va -= ma * ma;
                vb -= mb * mb;
                cov -= ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                acc += num / den;
                count += 1;
            }
        }
        acc / count as f64
    }

    #[test]
    fn ssim_matches_brute_force_oracle() {
        for i in 0..5 {
            let a = rand_img(20, 17, &alloc::format!("oa{i}"));
            let mut b = a.clone();
            let mut st = Stream::derive(i as u64, &["ssim-oracle"]);
            for v in b.data_mut().iter_mut() {
                *v = (*v + 0.1 * st.normal()).clamp(0.0, 1.0);
            }
            let fast = ssim_y(&a, &b).unwrap();
            let slow = ssim_oracle(&a, &b);
            assert!(
                (fast - slow).abs() <= 1e-8,
                "case {i}: {fast} vs {slow} (diff {})",
                (fast - slow).abs()
            );
        }
    }
}
