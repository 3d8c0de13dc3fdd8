//! Image ingestion: recursive discovery with a stable ordering, decoding
//! to `[3, H, W]` tensors in `[0, 1]`, and PNG export.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::ImageReader;

use tvt_core::tensor::Tensor;

/// File extensions treated as images (case-insensitive).
const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

fn looks_like_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            let e = e.to_ascii_lowercase();
            IMAGE_EXTENSIONS.iter().any(|x| *x == e)
        })
        .unwrap_or(false)
}

/// Walks `root` recursively and returns image paths sorted by their
/// relative path (lexicographic), so a source directory always yields
/// the same ordering. Files without an image extension are skipped with
/// a logged warning; an empty result also warns but is not an error.
pub fn discover_images(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        bail!("image source {} is not a directory", root.display());
    }
    let mut keyed: Vec<(String, PathBuf)> = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries =
            fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))?;
        for entry in entries {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if looks_like_image(&path) {
                let rel = path
                    .strip_prefix(root)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .into_owned();
                keyed.push((rel, path));
            } else {
                log::warn!("skipping non-image file {}", path.display());
            }
        }
    }
    keyed.sort_by(|a, b| a.0.cmp(&b.0));
    if keyed.is_empty() {
        log::warn!("image source {} yielded no images", root.display());
    }
    Ok(keyed.into_iter().map(|(_, p)| p).collect())
}

/// Decodes one image to a `[3, H, W]` tensor with values in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f64; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * h * w + y * w + x] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| anyhow::anyhow!("{e}"))
}

/// Loads every discoverable image under `root`, skipping files that fail
/// to decode (with a warning) rather than aborting the run.
pub fn load_images(root: &Path) -> Result<Vec<Tensor>> {
    let mut out = Vec::new();
    for path in discover_images(root)? {
        match load_image(&path) {
            Ok(t) => out.push(t),
            Err(e) => log::warn!("skipping {}: {e:#}", path.display()),
        }
    }
    Ok(out)
}

/// Writes a `[3, H, W]` tensor as an 8-bit PNG, clamping to `[0, 1]`.
pub fn save_png(path: &Path, image: &Tensor) -> Result<()> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        bail!("expected a [3, H, W] image, got {shape:?}");
    }
    let (h, w) = (shape[1], shape[2]);
    let data = image.data();
    let mut buf = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = data[c * h * w + y * w + x].clamp(0.0, 1.0);
                buf[(y * w + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    image::save_buffer(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
    )
    .with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discovery_is_recursive_sorted_and_warns_on_clutter() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("b/inner")).unwrap();
        let px = Tensor::new(&[3, 2, 2], vec![0.5; 12]).unwrap();
        save_png(&root.join("z.png"), &px).unwrap();
        save_png(&root.join("b/inner/a.png"), &px).unwrap();
        save_png(&root.join("b/c.jpg"), &px).unwrap();
        fs::write(root.join("notes.txt"), "not an image").unwrap();

        let found = discover_images(root).unwrap();
        let rels: Vec<String> = found
            .iter()
            .map(|p| p.strip_prefix(root).unwrap().to_string_lossy().into_owned())
            .collect();
        let mut sorted = rels.clone();
        sorted.sort();
        assert_eq!(rels, sorted);
        assert_eq!(rels.len(), 3);
        assert!(rels[0].starts_with("b"));

        let empty = tempfile::tempdir().unwrap();
        assert!(discover_images(empty.path()).unwrap().is_empty());
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut t = Tensor::zeros(&[3, 4, 5]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (i as f64 * 37.0 % 256.0) / 255.0;
        }
        save_png(&path, &t).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), &[3, 4, 5]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 0.5 / 255.0 + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn undecodable_files_are_skipped_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("fake.png"), b"definitely not a png").unwrap();
        let px = Tensor::new(&[3, 2, 2], vec![0.25; 12]).unwrap();
        save_png(&dir.path().join("real.png"), &px).unwrap();
        let imgs = load_images(dir.path()).unwrap();
        assert_eq!(imgs.len(), 1);
    }
}
