//! Datasets, image files and report emission.

mod idx;
mod imagedir;
mod overlay;
mod report;
pub mod synth;

use std::path::PathBuf;

pub use idx::{load_mnist_dir, load_mnist_idx, parse_idx, read_idx, IdxFile, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use imagedir::{load_image, load_image_dir, resize_bilinear};
pub use overlay::{emit_overlay, heat_overlay, render_panel, save_png};
pub use report::{parse_sweep_csv, write_sweep_csv, write_train_csv, SWEEP_HEADER, TRAIN_HEADER};

use crate::error::{NiceError, Result};
use crate::tensor::Tensor;

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "NICE_DATA_DIR";

/// `$NICE_DATA_DIR`, or `data` relative to the working directory.
pub fn default_data_dir() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Labeled images, `N×C×H×W` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: impl Into<String>, class_names: Vec<String>) -> Result<Self> {
        let (n, _, _, _) = images.nchw()?;
        if labels.len() != n {
            return Err(NiceError::shape("dataset", format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(NiceError::LabelOutOfRange {
                label,
                classes: class_names.len(),
            });
        }
        if let Some(v) = images.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(NiceError::InvalidArgument(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            images,
            labels,
            split: split.into(),
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(C, H, W)` of each image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_first(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// The first `n` examples (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Ok(Self {
            images: self.images.slice_first(0, n)?,
            labels: self.labels[..n].to_vec(),
            split: self.split.clone(),
            class_names: self.class_names.clone(),
        })
    }
}

pub(crate) fn digit_class_names() -> Vec<String> {
    (0..10).map(|d| d.to_string()).collect()
}
