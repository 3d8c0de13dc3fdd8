//! Procedural toy images for self-contained training and evaluation runs:
//! smooth per-channel gradients, low-frequency sinusoids, and a few soft
//! random strokes, all drawn from one seeded stream so every image is a
//! pure function of (side, seed).

use alloc::vec::Vec;

use crate::fmath;
use crate::rng::Stream;
use crate::tensor::Tensor;
use crate::vae::ImageTensor;

/// One deterministic synthetic RGB image with values in [0, 1].
pub fn toy_image(side: usize, seed: u64) -> ImageTensor {
    assert!(side > 0, "side must be positive");
    let mut rng = Stream::derive(seed, &["toy-image"]);
    let s = side as f64;

    // per-channel affine gradient: random direction and offset
    let mut grad = [[0.0f64; 3]; 3]; // [channel][gx, gy, bias]
    for g in grad.iter_mut() {
        let theta = rng.range(0.0, core::f64::consts::TAU);
        let mag = rng.range(0.1, 0.4) / s;
        g[0] = mag * fmath::cos(theta);
        g[1] = mag * fmath::sin(theta);
        g[2] = rng.range(0.25, 0.75);
    }

    // a few low-frequency plane waves with per-channel weights
    let n_waves = 2 + rng.below(3);
    let mut waves = Vec::with_capacity(n_waves);
    for _ in 0..n_waves {
        let theta = rng.range(0.0, core::f64::consts::TAU);
        let freq = rng.range(0.5, 3.0) * core::f64::consts::TAU / s;
        let phase = rng.range(0.0, core::f64::consts::TAU);
        let amp = rng.range(0.05, 0.18);
        let weights = [rng.uniform(), rng.uniform(), rng.uniform()];
        waves.push((freq * fmath::cos(theta), freq * fmath::sin(theta), phase, amp, weights));
    }

    // soft capsule strokes: segment + gaussian falloff, alpha-blended color
    let n_strokes = 2 + rng.below(3);
    let mut strokes = Vec::with_capacity(n_strokes);
    for _ in 0..n_strokes {
        let p0 = (rng.range(0.0, s), rng.range(0.0, s));
        let p1 = (rng.range(0.0, s), rng.range(0.0, s));
        let width = rng.range(1.0, s / 8.0);
        let color = [rng.uniform(), rng.uniform(), rng.uniform()];
        let opacity = rng.range(0.4, 0.9);
        strokes.push((p0, p1, width, color, opacity));
    }

    let mut img = Tensor::zeros(&[3, side, side]);
    let data = img.data_mut();
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut px = [0.0f64; 3];
            for (c, p) in px.iter_mut().enumerate() {
                *p = grad[c][0] * fx + grad[c][1] * fy + grad[c][2];
            }
            for &(kx, ky, phase, amp, w) in &waves {
                let v = amp * fmath::sin(kx * fx + ky * fy + phase);
                for (p, &wc) in px.iter_mut().zip(&w) {
                    *p += wc * v;
                }
            }
            for &(p0, p1, width, color, opacity) in &strokes {
                let d = segment_distance(fx, fy, p0, p1);
                let a = opacity * fmath::exp(-0.5 * (d / width) * (d / width));
                for (p, &c) in px.iter_mut().zip(&color) {
                    *p = (1.0 - a) * *p + a * c;
                }
            }
            for (c, &p) in px.iter().enumerate() {
                data[(c * side + y) * side + x] = p.clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(img).expect("toy image is 3-channel by construction")
}

fn segment_distance(x: f64, y: f64, p0: (f64, f64), p1: (f64, f64)) -> f64 {
    let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - p0.0) * dx + (y - p0.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (p0.0 + t * dx, p0.1 + t * dy);
    fmath::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy))
}

/// `count` distinct images with per-index seeds derived from `base_seed`.
pub fn toy_dataset(side: usize, count: usize, base_seed: u64) -> Vec<ImageTensor> {
    (0..count)
        .map(|i| toy_image(side, base_seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)))
        .collect()
}

/// Disjoint train / held-out image sets drawn from independent seed streams.
pub struct ToySplit {
    pub train: Vec<ImageTensor>,
    pub held_out: Vec<ImageTensor>,
}

pub fn toy_split(side: usize, train: usize, held_out: usize, seed: u64) -> ToySplit {
    let train_seed = Stream::derive(seed, &["split", "train"]).below(u32::MAX as usize) as u64;
    let held_seed = Stream::derive(seed, &["split", "held-out"]).below(u32::MAX as usize) as u64;
    ToySplit {
        train: toy_dataset(side, train, train_seed),
        held_out: toy_dataset(side, held_out, held_seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(img: &ImageTensor) -> (f64, f64) {
        let d = img.tensor().data();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d.len() as f64;
        (mean, fmath::sqrt(var))
    }

    #[test]
    fn images_are_deterministic_and_seed_sensitive() {
        let a = toy_image(32, 5);
        let b = toy_image(32, 5);
        assert_eq!(a.tensor().data(), b.tensor().data());
        let c = toy_image(32, 6);
        assert_ne!(a.tensor().data(), c.tensor().data());
    }

    #[test]
    fn images_are_in_range_with_visible_structure() {
        for seed in 0..8 {
            let img = toy_image(64, seed);
            assert_eq!(img.tensor().shape(), &[3, 64, 64]);
            assert!(img.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
            let (_, std) = stats(&img);
            assert!(std > 0.02, "seed {seed}: std {std} too flat");
        }
    }

    #[test]
    fn dataset_images_are_pairwise_distinct() {
        let imgs = toy_dataset(32, 6, 77);
        assert_eq!(imgs.len(), 6);
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                assert_ne!(
                    imgs[i].tensor().data(),
                    imgs[j].tensor().data(),
                    "images {i} and {j} coincide"
                );
            }
        }
    }

    #[test]
    fn split_sets_are_disjoint_and_sized() {
        let split = toy_split(32, 4, 3, 123);
        assert_eq!(split.train.len(), 4);
        assert_eq!(split.held_out.len(), 3);
        for t in &split.train {
            for h in &split.held_out {
                assert_ne!(t.tensor().data(), h.tensor().data());
            }
        }
        // reproducible
        let again = toy_split(32, 4, 3, 123);
        assert_eq!(split.train[0].tensor().data(), again.train[0].tensor().data());
        assert_eq!(split.held_out[2].tensor().data(), again.held_out[2].tensor().data());
    }
}
