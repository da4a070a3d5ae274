//! Heat-map overlays and side-by-side panels.

use std::fs;
use std::path::Path;

use crate::compressor::encode_png;
use crate::error::{NiceError, Result};
use crate::tensor::Tensor;

fn rgb_planes(image: &Tensor, op: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    match image.shape()[..] {
        [1, h, w] => Ok((h, w, image.values().repeat(3))),
        [3, h, w] => Ok((h, w, image.values().to_vec())),
        _ => Err(NiceError::shape(op, format!("expected 1×H×W or 3×H×W, got {:?}", image.shape()))),
    }
}

/// Blends a blue-to-red heat color over `image` with opacity equal to the map value.
///
/// A zero map returns the image unchanged; a unit map is pure red.
pub fn heat_overlay(image: &Tensor, map: &Tensor) -> Result<Tensor> {
    let (h, w, mut rgb) = rgb_planes(image, "heat_overlay")?;
    if map.numel() != h * w || map.shape()[map.rank().saturating_sub(2)..] != [h, w] {
        return Err(NiceError::shape("heat_overlay", format!("map {:?} for {h}×{w} image", map.shape())));
    }
    let hw = h * w;
    for (p, &m) in map.values().iter().enumerate() {
        let a = m.clamp(0.0, 1.0);
        let heat = [a, 0.0, 1.0 - a];
        for (ch, hc) in heat.iter().enumerate() {
            let v = &mut rgb[ch * hw + p];
            *v = (1.0 - a) * *v + a * hc;
        }
    }
    Tensor::new(&[3, h, w], rgb)
}

/// `[original | overlay | mixed]`, as one `3×H×3W` image.
pub fn render_panel(image: &Tensor, map: &Tensor, mixed: &Tensor) -> Result<Tensor> {
    let (h, w, orig) = rgb_planes(image, "render_panel")?;
    let (mh, mw, mix) = rgb_planes(mixed, "render_panel")?;
    if (mh, mw) != (h, w) {
        return Err(NiceError::shape("render_panel", format!("mixed {mh}×{mw} vs image {h}×{w}")));
    }
    let over = heat_overlay(image, map)?;
    let tiles = [orig.as_slice(), over.values(), mix.as_slice()];
    let mut out = Vec::with_capacity(9 * h * w);
    for ch in 0..3 {
        for y in 0..h {
            for t in tiles {
                out.extend_from_slice(&t[ch * h * w + y * w..ch * h * w + (y + 1) * w]);
            }
        }
    }
    Tensor::new(&[3, h, 3 * w], out)
}

/// Writes a `C×H×W` tensor as an 8-bit PNG.
pub fn save_png(pixels: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_png(pixels)?)?;
    Ok(())
}

pub fn emit_overlay(image: &Tensor, map: &Tensor, mixed: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    save_png(&render_panel(image, map, mixed)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_map_is_identity_and_unit_map_is_red() {
        let img = Tensor::from_fn(&[3, 2, 2], |i| i as f64 / 12.0);
        let zero = Tensor::zeros(&[2, 2]);
        assert_eq!(heat_overlay(&img, &zero).unwrap().values(), img.values());
        let one = Tensor::full(&[1, 2, 2], 1.0);
        let red = heat_overlay(&img, &one).unwrap();
        assert_eq!(red.values(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn panel_tiles_side_by_side() {
        let img = Tensor::full(&[1, 2, 2], 0.2);
        let mixed = Tensor::full(&[1, 2, 2], 0.6);
        let p = render_panel(&img, &Tensor::zeros(&[2, 2]), &mixed).unwrap();
        assert_eq!(p.shape(), &[3, 2, 6]);
        assert_eq!(&p.values()[..6], &[0.2, 0.2, 0.2, 0.2, 0.6, 0.6]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("panel.png");
        emit_overlay(&img, &Tensor::zeros(&[2, 2]), &mixed, &path).unwrap();
        let (c, h, w, _) = crate::compressor::decode_png(&fs::read(path).unwrap()).unwrap();
        assert_eq!((c, h, w), (3, 2, 6));
    }
}
