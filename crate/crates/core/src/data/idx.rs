//! IDX files as distributed with MNIST.
//!
//! Big-endian: a 4-byte magic `0x0000 08 nd` (unsigned-byte payload, `nd`
//! dimensions), `nd` u32 extents, then the raw bytes.

use std::fs;
use std::path::Path;

use super::{digit_class_names, Dataset};
use crate::error::{NiceError, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend(self.magic.to_be_bytes());
        for d in &self.dims {
            out.extend(d.to_be_bytes());
        }
        out.extend(&self.data);
        out
    }
}

pub fn parse_idx(bytes: &[u8], origin: &Path) -> Result<IdxFile> {
    let bad = |detail: String| NiceError::format("IDX", origin, detail);
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(4 * i..4 * i + 4)
            .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
            .ok_or_else(|| bad(format!("truncated header at word {i}")))
    };
    let magic = word(0)?;
    if magic >> 16 != 0 || (magic >> 8) & 0xff != 0x08 {
        return Err(bad(format!("magic {magic:#010x} is not an unsigned-byte IDX file")));
    }
    let nd = (magic & 0xff) as usize;
    let dims = (1..=nd).map(word).collect::<Result<Vec<_>>>()?;
    let payload: usize = dims.iter().map(|&d| d as usize).product();
    let start = 4 * (nd + 1);
    let data = &bytes[start.min(bytes.len())..];
    if data.len() != payload {
        return Err(bad(format!(
            "payload has {} bytes, dimensions {dims:?} need {payload}",
            data.len()
        )));
    }
    Ok(IdxFile {
        magic,
        dims,
        data: data.to_vec(),
    })
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxFile> {
    let path = path.as_ref();
    parse_idx(&fs::read(path)?, path)
}

/// Images scaled to `byte / 255`, shaped `N×1×rows×cols`.
pub fn load_mnist_idx(image_path: impl AsRef<Path>, label_path: impl AsRef<Path>) -> Result<Dataset> {
    let (image_path, label_path) = (image_path.as_ref(), label_path.as_ref());
    let images = read_idx(image_path)?;
    if images.magic != IDX_IMAGES_MAGIC {
        return Err(NiceError::format(
            "IDX",
            image_path,
            format!("expected image magic {IDX_IMAGES_MAGIC:#010x}, got {:#010x}", images.magic),
        ));
    }
    let labels = read_idx(label_path)?;
    if labels.magic != IDX_LABELS_MAGIC {
        return Err(NiceError::format(
            "IDX",
            label_path,
            format!("expected label magic {IDX_LABELS_MAGIC:#010x}, got {:#010x}", labels.magic),
        ));
    }
    let (n, rows, cols) = (images.dims[0] as usize, images.dims[1] as usize, images.dims[2] as usize);
    if labels.dims[0] as usize != n {
        return Err(NiceError::format(
            "IDX",
            label_path,
            format!("{} labels for {n} images", labels.dims[0]),
        ));
    }
    if let Some(&l) = labels.data.iter().find(|&&l| l > 9) {
        return Err(NiceError::format("IDX", label_path, format!("label byte {l} is not a digit")));
    }
    let pixels = Tensor::new(
        &[n, 1, rows, cols],
        images.data.iter().map(|&b| b as f64 / 255.0).collect(),
    )?;
    let split = image_path
        .file_name()
        .and_then(|f| f.to_str())
        .map(|f| if f.starts_with("t10k") { "test" } else { "train" })
        .unwrap_or("train");
    Dataset::new(
        pixels,
        labels.data.iter().map(|&l| l as usize).collect(),
        split,
        digit_class_names(),
    )
}

/// `(train, test)` from the four standard file names under `dir`.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_mnist_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_mnist_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}
