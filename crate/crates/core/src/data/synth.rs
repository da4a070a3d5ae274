//! Deterministic labeled shapes on a textured background.
//!
//! Each image holds one light, tinted shape over dark noisy clutter. The
//! label is the shape kind.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{save_png, Dataset};
use crate::error::{NiceError, Result};
use crate::tensor::Tensor;

pub const SHAPE_CLASSES: [&str; 4] = ["circle", "cross", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapesSpec {
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for ShapesSpec {
    fn default() -> Self {
        Self {
            size: 64,
            train_per_class: 120,
            test_per_class: 40,
            seed: 0,
        }
    }
}

fn inside(kind: usize, dx: f64, dy: f64, r: f64) -> bool {
    match kind {
        0 => dx * dx + dy * dy <= r * r,
        1 => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        2 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        _ => dy <= 0.7 * r && dy >= -r && dx.abs() <= (dy + r) * 0.6,
    }
}

/// One `3×size×size` image of shape `kind`.
pub fn render_shape(kind: usize, size: usize, rng: &mut impl Rng) -> Tensor {
    let s = size as f64;
    let r = s * rng.random_range(0.16..0.26);
    let margin = r + 2.0;
    let (cx, cy) = (rng.random_range(margin..s - margin), rng.random_range(margin..s - margin));
    let base = rng.random_range(0.12..0.32);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let k = rng.random_range(1.0..4.0) * TAU / s;
            let theta = rng.random_range(0.0..TAU);
            (k * theta.cos(), k * theta.sin(), rng.random_range(0.0..TAU), rng.random_range(0.03..0.08))
        })
        .collect();
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.72..1.0));
    let hw = size * size;
    let mut v = vec![0.0; 3 * hw];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if inside(kind, dx, dy, r) {
                for (ch, t) in tint.iter().enumerate() {
                    v[ch * hw + p] = (t + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
                }
            } else {
                let texture: f64 = waves
                    .iter()
                    .map(|&(kx, ky, ph, a)| a * (kx * x as f64 + ky * y as f64 + ph).sin())
                    .sum();
                for ch in 0..3 {
                    v[ch * hw + p] = (base + texture + rng.random_range(-0.12..0.12)).clamp(0.0, 1.0);
                }
            }
        }
    }
    let q = v.iter().map(|x| (x * 255.0).round() / 255.0).collect();
    Tensor::new(&[3, size, size], q).expect("shape matches")
}

fn render_split(spec: &ShapesSpec, per_class: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, Tensor)> {
    let mut out = Vec::with_capacity(per_class * SHAPE_CLASSES.len());
    for i in 0..per_class * SHAPE_CLASSES.len() {
        let kind = i % SHAPE_CLASSES.len();
        out.push((kind, render_shape(kind, spec.size, rng)));
    }
    out
}

/// In-memory `(train, test)` splits.
pub fn shapes_dataset(spec: &ShapesSpec) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let names: Vec<String> = SHAPE_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut splits = Vec::new();
    for (split, per) in [("train", spec.train_per_class), ("test", spec.test_per_class)] {
        if per == 0 {
            return Err(NiceError::InvalidArgument(format!("{split} split needs at least one image per class")));
        }
        let items = render_split(spec, per, &mut rng);
        let parts: Vec<Tensor> = items
            .iter()
            .map(|(_, t)| t.clone().reshape(&[1, 3, spec.size, spec.size]))
            .collect::<Result<_>>()?;
        let labels = items.iter().map(|(k, _)| *k).collect();
        splits.push(Dataset::new(Tensor::concat_first(&parts)?, labels, split, names.clone())?);
    }
    let test = splits.pop().unwrap();
    Ok((splits.pop().unwrap(), test))
}

/// Writes `root/{train,test}/<class>/<index>.png`.
pub fn write_shapes_dataset(root: impl AsRef<Path>, spec: &ShapesSpec) -> Result<()> {
    let root = root.as_ref();
    let (train, test) = shapes_dataset(spec)?;
    for ds in [&train, &test] {
        for name in &ds.class_names {
            fs::create_dir_all(root.join(&ds.split).join(name))?;
        }
        for i in 0..ds.len() {
            let img = ds.images.select_first(i)?.reshape(&[3, spec.size, spec.size])?;
            let path = root
                .join(&ds.split)
                .join(&ds.class_names[ds.labels[i]])
                .join(format!("{i:05}.png"));
            save_png(&img, path)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::load_image_dir;

    #[test]
    fn deterministic_and_round_trips_through_files() {
        let spec = ShapesSpec {
            size: 16,
            train_per_class: 2,
            test_per_class: 1,
            seed: 3,
        };
        let (a, _) = shapes_dataset(&spec).unwrap();
        let (b, _) = shapes_dataset(&spec).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        write_shapes_dataset(dir.path(), &spec).unwrap();
        let loaded = load_image_dir(dir.path().join("train"), (16, 16)).unwrap();
        assert_eq!(loaded.class_names, SHAPE_CLASSES);
        assert_eq!(loaded.len(), 8);
        // Files are grouped by class on disk, so compare as multisets per class.
        for class in 0..4 {
            let mut mem: Vec<Vec<f64>> = (0..a.len())
                .filter(|&i| a.labels[i] == class)
                .map(|i| a.images.select_first(i).unwrap().into_values())
                .collect();
            let mut disk: Vec<Vec<f64>> = (0..loaded.len())
                .filter(|&i| loaded.labels[i] == class)
                .map(|i| loaded.images.select_first(i).unwrap().into_values())
                .collect();
            mem.sort_by(|x, y| x.partial_cmp(y).unwrap());
            disk.sort_by(|x, y| x.partial_cmp(y).unwrap());
            assert_eq!(mem, disk);
        }
    }

    #[test]
    fn shape_is_brighter_than_clutter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = render_shape(0, 32, &mut rng);
        let (lo, hi) = img.min_max();
        assert!(lo >= 0.0 && hi > 0.7);
    }
}
