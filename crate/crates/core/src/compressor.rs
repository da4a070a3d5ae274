//! Mixed-resolution synthesis and lossless size measurement.
//!
//! Kept pixels come from the source image; the rest come from a copy
//! subsampled by `b×b` block means. The result is stored as 8-bit PNG with a
//! pinned compression level and filter strategy so byte counts are reproducible.

use std::io::Cursor;

use crate::error::{NiceError, Result};
use crate::models::DiscriminatorNet;
use crate::tensor::Tensor;

/// Deflate level and filter heuristic used for every size measurement.
pub const PNG_COMPRESSION: png::Compression = png::Compression::High;
pub const PNG_FILTER: png::Filter = png::Filter::Adaptive;

/// Image assembled from a source and its block-mean background.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedResImage {
    /// `C×H×W` values in `[0, 1]`.
    pub pixels: Tensor,
    pub block: usize,
    pub source_id: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedImage {
    pub bytes: Vec<u8>,
}

impl EncodedImage {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

/// Replaces each `b×b` block of every channel by its mean; shape is unchanged.
///
/// The last two axes are spatial, so both `C×H×W` and `N×C×H×W` work.
pub fn subsample_block_mean(image: &Tensor, b: usize) -> Result<Tensor> {
    let r = image.rank();
    if r < 2 {
        return Err(NiceError::shape("subsample_block_mean", "need at least two axes"));
    }
    let (h, w) = (image.shape()[r - 2], image.shape()[r - 1]);
    if b == 0 || h % b != 0 || w % b != 0 {
        return Err(NiceError::InvalidArgument(format!(
            "block size {b} does not divide {h}x{w}; pad or resize the image first"
        )));
    }
    if b == 1 {
        return Ok(image.clone());
    }
    let planes = image.numel() / (h * w);
    let src = image.values();
    let mut out = vec![0.0; src.len()];
    let inv = 1.0 / (b * b) as f64;
    for p in 0..planes {
        let base = p * h * w;
        for by in (0..h).step_by(b) {
            for bx in (0..w).step_by(b) {
                let first = src[base + by * w + bx];
                let mut acc = 0.0;
                let mut constant = true;
                for y in by..by + b {
                    let row = &src[base + y * w + bx..base + y * w + bx + b];
                    acc += row.iter().sum::<f64>();
                    constant &= row.iter().all(|&v| v == first);
                }
                // Summation can drift by an ulp on constant blocks.
                let mean = if constant { first } else { acc * inv };
                for y in by..by + b {
                    out[base + y * w + bx..base + y * w + bx + b].iter_mut().for_each(|v| *v = mean);
                }
            }
        }
    }
    Tensor::new(image.shape(), out)
}

/// Convex per-pixel blend `x ⊙ ẑ + x_b ⊙ (1 − ẑ)` with `ẑ` broadcast over channels.
///
/// Pixels with `ẑ = 1` (or where source and background coincide) are copied
/// from the source and pixels with `ẑ = 0` from the background, exactly.
pub fn mix(image: &Tensor, zhat: &Tensor, b: usize) -> Result<MixedResImage> {
    let [c, h, w] = image.shape()[..] else {
        return Err(NiceError::shape("mix", format!("expected C×H×W image, got {:?}", image.shape())));
    };
    let zs = zhat.shape();
    if zhat.numel() != h * w || zs.len() < 2 || zs[zs.len() - 2..] != [h, w] {
        return Err(NiceError::shape("mix", format!("mask {:?} does not match {h}x{w}", zhat.shape())));
    }
    if let Some(bad) = zhat.values().iter().find(|z| !(0.0..=1.0).contains(*z)) {
        return Err(NiceError::InvalidArgument(format!("mask value {bad} outside [0, 1]")));
    }
    let background = subsample_block_mean(image, b)?;
    let (x, xb, z) = (image.values(), background.values(), zhat.values());
    let hw = h * w;
    let pixels = Tensor::from_fn(&[c, h, w], |i| {
        let (s, bg, m) = (x[i], xb[i], z[i % hw]);
        if m >= 1.0 || s == bg {
            s
        } else if m <= 0.0 {
            bg
        } else {
            s * m + bg * (1.0 - m)
        }
    });
    Ok(MixedResImage {
        pixels,
        block: b,
        source_id: 0,
    })
}

/// 8-bit quantization: `round(255·v)` with halves away from zero, clamped to `0..=255`.
pub fn quantize(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

/// Interleaves planar `C×H×W` bytes into PNG row order.
fn interleave(planar: &[u8], c: usize, hw: usize) -> Vec<u8> {
    let mut out = vec![0u8; planar.len()];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = planar[ch * hw + p];
        }
    }
    out
}

/// PNG bytes for a `C×H×W` tensor with one (gray) or three (RGB) channels.
pub fn encode_png(pixels: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = pixels.shape()[..] else {
        return Err(NiceError::shape("encode_png", format!("expected C×H×W, got {:?}", pixels.shape())));
    };
    let color = match c {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        _ => return Err(NiceError::shape("encode_png", format!("{c} channels; need 1 or 3"))),
    };
    let data = interleave(&quantize(pixels.values()), c, h * w);
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(PNG_COMPRESSION);
        enc.set_filter(PNG_FILTER);
        let mut writer = enc.write_header().map_err(|e| NiceError::Codec(e.to_string()))?;
        writer.write_image_data(&data).map_err(|e| NiceError::Codec(e.to_string()))?;
        writer.finish().map_err(|e| NiceError::Codec(e.to_string()))?;
    }
    Ok(out)
}

/// Decodes an 8-bit gray or RGB PNG into planar `C×H×W` bytes.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| NiceError::Codec(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| NiceError::Codec("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| NiceError::Codec(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(NiceError::Codec(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let c = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => return Err(NiceError::Codec(format!("unsupported color type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let hw = h * w;
    let data = &buf[..info.buffer_size()];
    let mut planar = vec![0u8; c * hw];
    for p in 0..hw {
        for ch in 0..c {
            planar[ch * hw + p] = data[p * c + ch];
        }
    }
    Ok((c, h, w, planar))
}

pub fn encode_lossless(img: &MixedResImage) -> Result<EncodedImage> {
    Ok(EncodedImage {
        bytes: encode_png(&img.pixels)?,
    })
}

/// PNG size of every image mixed at block size `b`, in input order.
pub fn encoded_sizes(images: &Tensor, zhats: &Tensor, b: usize) -> Result<Vec<usize>> {
    let (n, c, h, w) = images.nchw()?;
    (0..n)
        .map(|i| {
            let x = images.select_first(i)?.reshape(&[c, h, w])?;
            let z = zhats.select_first(i)?.reshape(&[h, w])?;
            Ok(encode_lossless(&mix(&x, &z, b)?)?.len())
        })
        .collect()
}

/// One line of a block-size sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub b: usize,
    pub mean_bytes: f64,
    pub accuracy: f64,
    pub n_images: usize,
    /// Mean PNG size of the 8-bit masks themselves, reported separately.
    pub mask_bytes: f64,
}

/// Mixes, encodes and classifies every image at each block size.
///
/// Classification runs on the decoded PNG pixels, i.e. on what would be stored.
pub fn sweep_block_sizes(
    images: &Tensor,
    labels: &[usize],
    zhats: &Tensor,
    bs: &[usize],
    disc: &DiscriminatorNet,
) -> Result<Vec<SweepRow>> {
    let (n, _, h, w) = images.nchw()?;
    if zhats.shape() != [n, 1, h, w] {
        return Err(NiceError::shape(
            "sweep_block_sizes",
            format!("masks {:?} do not match images {:?}", zhats.shape(), images.shape()),
        ));
    }
    if labels.len() != n {
        return Err(NiceError::shape("sweep_block_sizes", format!("{} labels for {n} images", labels.len())));
    }
    let mut mask_total = 0usize;
    for i in 0..n {
        let m = zhats.select_first(i)?.reshape(&[1, h, w])?;
        mask_total += encode_png(&m)?.len();
    }
    let mask_bytes = mask_total as f64 / n as f64;

    let mut rows = Vec::with_capacity(bs.len());
    for &b in bs {
        let mut total = 0usize;
        let mut decoded = Vec::with_capacity(images.numel());
        for i in 0..n {
            let x = images.select_first(i)?;
            let shape = x.shape()[1..].to_vec();
            let z = zhats.select_first(i)?.reshape(&[h, w])?;
            let mut mixed = mix(&x.reshape(&shape)?, &z, b)?;
            mixed.source_id = i;
            let enc = encode_lossless(&mixed)?;
            total += enc.len();
            let (_, _, _, planar) = decode_png(&enc.bytes)?;
            decoded.extend(planar.iter().map(|&v| v as f64 / 255.0));
        }
        let stored = Tensor::new(images.shape(), decoded)?;
        let preds = disc.predict(&stored, 64)?;
        let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        rows.push(SweepRow {
            b,
            mean_bytes: total as f64 / n as f64,
            accuracy: correct as f64 / n as f64,
            n_images: n,
            mask_bytes,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(c: usize, h: usize, w: usize, v: &[f64]) -> Tensor {
        Tensor::new(&[c, h, w], v.to_vec()).unwrap()
    }

    #[test]
    fn block_mean_examples() {
        let x = img(1, 2, 2, &[0.0, 2.0, 4.0, 6.0]);
        assert_eq!(subsample_block_mean(&x, 1).unwrap(), x);
        assert_eq!(subsample_block_mean(&x, 2).unwrap().values(), &[3.0; 4]);
        let y = Tensor::from_fn(&[2, 4, 4], |i| i as f64);
        let full = subsample_block_mean(&y, 4).unwrap();
        assert!(full.values()[..16].iter().all(|&v| v == 7.5));
        assert!(full.values()[16..].iter().all(|&v| v == 23.5));
        let err = subsample_block_mean(&y, 3).unwrap_err().to_string();
        assert!(err.contains("pad or resize"), "{err}");
    }

    #[test]
    fn mix_examples() {
        let x = img(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let z = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(mix(&x, &z, 2).unwrap().pixels.values(), &[1.0, 2.5, 2.5, 2.5]);
        let ones = Tensor::full(&[2, 2], 1.0);
        assert_eq!(mix(&x, &ones, 2).unwrap().pixels, x);
        let zeros = Tensor::zeros(&[2, 2]);
        assert_eq!(mix(&x, &zeros, 2).unwrap().pixels.values(), &[2.5; 4]);
        assert!(mix(&x, &Tensor::full(&[2, 2], 1.5), 2).is_err());
        assert!(mix(&x, &Tensor::zeros(&[3, 2]), 2).is_err());
    }

    #[test]
    fn png_round_trip_and_entropy_order() {
        let flat = Tensor::full(&[1, 64, 64], 0.5);
        let mut state = 12345u64;
        let noise = Tensor::from_fn(&[1, 64, 64], |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 33) % 256) as f64 / 255.0
        });
        let a = encode_png(&flat).unwrap();
        let b = encode_png(&noise).unwrap();
        assert!(a.len() < b.len());
        let (c, h, w, bytes) = decode_png(&b).unwrap();
        assert_eq!((c, h, w), (1, 64, 64));
        assert_eq!(bytes, quantize(noise.values()));
        assert_eq!(encode_png(&noise).unwrap(), b);
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        assert_eq!(quantize(&[0.5 / 255.0, 1.5 / 255.0, -0.2, 1.3, 1.0]), vec![1, 2, 0, 255, 255]);
    }

    proptest! {
        #[test]
        fn b1_is_bitwise_identity(vals in proptest::collection::vec(0.0f64..1.0, 12), zs in proptest::collection::vec(0.0f64..=1.0, 4)) {
            let x = Tensor::new(&[3, 2, 2], vals).unwrap();
            let z = Tensor::new(&[2, 2], zs).unwrap();
            prop_assert_eq!(mix(&x, &z, 1).unwrap().pixels, x);
        }

        #[test]
        fn mix_is_convex(vals in proptest::collection::vec(0.0f64..1.0, 3 * 16), zs in proptest::collection::vec(0.0f64..=1.0, 16), b in prop_oneof![Just(1usize), Just(2), Just(4)]) {
            let x = Tensor::new(&[3, 4, 4], vals).unwrap();
            let z = Tensor::new(&[4, 4], zs).unwrap();
            let (lo, hi) = x.min_max();
            let m = mix(&x, &z, b).unwrap();
            prop_assert!(m.pixels.values().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }

        #[test]
        fn mix_idempotent_on_block_aligned_binary_masks(vals in proptest::collection::vec(0.0f64..1.0, 2 * 64), blocks in proptest::collection::vec(any::<bool>(), 16)) {
            let x = Tensor::new(&[2, 8, 8], vals).unwrap();
            let z = Tensor::from_fn(&[8, 8], |i| if blocks[(i / 8 / 2) * 4 + (i % 8) / 2] { 1.0 } else { 0.0 });
            let once = mix(&x, &z, 2).unwrap();
            let twice = mix(&once.pixels, &z, 2).unwrap();
            prop_assert_eq!(twice.pixels, once.pixels);
        }
    }
}
