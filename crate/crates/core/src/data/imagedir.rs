//! Labeled image directories: `root/<class>/<file>`.

use std::fs;
use std::path::{Path, PathBuf};

use super::Dataset;
use crate::error::{NiceError, Result};
use crate::tensor::Tensor;

/// Bilinear resize of planar `C×H×W` values with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f64], c: usize, (h, w): (usize, usize), (oh, ow): (usize, usize)) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return src.to_vec();
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(oh, h), taps(ow, w));
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    out
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn decode(file: &Path) -> std::result::Result<image::DynamicImage, String> {
    image::ImageReader::open(file)
        .map_err(|e| e.to_string())
        .and_then(|r| r.with_guessed_format().map_err(|e| e.to_string()))
        .and_then(|r| r.decode().map_err(|e| e.to_string()))
}

/// Planar pixels of a decoded image with 1 (luma) or 3 (RGB) channels, resized and snapped to 8 bits.
fn to_planar(img: &image::DynamicImage, channels: usize, size: (usize, usize)) -> Vec<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<u8> = if channels == 1 { img.to_luma8().into_raw() } else { img.to_rgb8().into_raw() };
    let mut planar = vec![0.0; channels * h * w];
    for (i, &v) in raw.iter().enumerate() {
        planar[(i % channels) * h * w + i / channels] = v as f64 / 255.0;
    }
    resize_bilinear(&planar, channels, (h, w), size)
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) / 255.0)
        .collect()
}

/// One image file as a `C×H×W` tensor, `channels` being 1 or 3.
pub fn load_image(path: impl AsRef<Path>, size: (usize, usize), channels: usize) -> Result<Tensor> {
    let path = path.as_ref();
    if channels != 1 && channels != 3 {
        return Err(NiceError::InvalidArgument(format!("{channels} channels; need 1 or 3")));
    }
    let img = decode(path).map_err(|e| NiceError::format("image", path, e))?;
    Tensor::new(&[channels, size.0, size.1], to_planar(&img, channels, size))
}

/// Loads `root/<class>/*` as 3-channel images resized to `size`.
///
/// Classes are the sorted subdirectory names. Gray files are replicated to
/// three channels. Resized values are snapped to the 8-bit grid so that a
/// lossless round trip reproduces them exactly. Undecodable files are skipped
/// with a warning; a class left without images is an error.
pub fn load_image_dir(root: impl AsRef<Path>, size: (usize, usize)) -> Result<Dataset> {
    let root = root.as_ref();
    if size.0 == 0 || size.1 == 0 {
        return Err(NiceError::InvalidArgument(format!("target size {size:?} is empty")));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(NiceError::format("image directory", root, "no class subdirectories"));
    }
    let mut class_names = Vec::with_capacity(class_dirs.len());
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        class_names.push(dir.file_name().unwrap().to_string_lossy().into_owned());
        let mut count = 0;
        for file in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            let img = match decode(&file) {
                Ok(img) => img,
                Err(e) => {
                    log::warn!("skipping {}: {e}", file.display());
                    continue;
                }
            };
            values.extend(to_planar(&img, 3, size));
            labels.push(label);
            count += 1;
        }
        if count == 0 {
            return Err(NiceError::format(
                "image directory",
                dir,
                "class has no decodable images",
            ));
        }
    }
    let split = root.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
    let images = Tensor::new(&[labels.len(), 3, size.0, size.1], values)?;
    Dataset::new(images, labels, split, class_names)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_constant_resize() {
        let src: Vec<f64> = (0..12).map(|v| v as f64).collect();
        assert_eq!(resize_bilinear(&src, 1, (3, 4), (3, 4)), src);
        let flat = vec![0.25; 2 * 5 * 7];
        for v in resize_bilinear(&flat, 2, (5, 7), (3, 11)) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn downsample_by_two_averages_pairs() {
        // Half-pixel centers land midway between source pixels.
        let src = vec![0.0, 1.0, 2.0, 3.0];
        assert_eq!(resize_bilinear(&src, 1, (1, 4), (1, 2)), vec![0.5, 2.5]);
    }

    #[test]
    fn loads_sorted_classes_and_skips_junk() {
        let dir = tempfile::tempdir().unwrap();
        for (class, shade) in [("b_dark", 10u8), ("a_light", 240u8)] {
            fs::create_dir(dir.path().join(class)).unwrap();
            let img = image::GrayImage::from_pixel(8, 6, image::Luma([shade]));
            img.save(dir.path().join(class).join("0.png")).unwrap();
        }
        fs::write(dir.path().join("a_light").join("junk.png"), b"not a png").unwrap();
        let ds = load_image_dir(dir.path(), (4, 4)).unwrap();
        assert_eq!(ds.class_names, vec!["a_light", "b_dark"]);
        assert_eq!(ds.labels, vec![0, 1]);
        assert_eq!(ds.images.shape(), &[2, 3, 4, 4]);
        assert_eq!(ds.images.values()[0], 240.0 / 255.0);
        assert_eq!(ds.images.values()[48], 10.0 / 255.0);
    }

    #[test]
    fn empty_class_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("only")).unwrap();
        fs::write(dir.path().join("only").join("x.png"), b"garbage").unwrap();
        let err = load_image_dir(dir.path(), (4, 4)).unwrap_err().to_string();
        assert!(err.contains("no decodable images"), "{err}");
    }
}
