//! Dataset names and checkpoints turned into loaded objects.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nice_core::data::{default_data_dir, load_image_dir, load_mnist_idx};
use nice_core::models::{build_lenet5_caffe, build_mnist_generator, build_small_generator, build_small_resnet};
use nice_core::tensor::load_checkpoint;
use nice_core::{Dataset, DiscriminatorNet, GeneratorNet, Network};

use crate::config::usage;

const MNIST_FILES: [(&str, &str, &str); 2] = [
    ("train", "train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("test", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
];

/// `mnist` and `shapes` live under the data root; anything else is a path.
pub fn dataset_root(spec: &str) -> PathBuf {
    match spec {
        "mnist" | "shapes" => default_data_dir().join(spec),
        path => PathBuf::from(path),
    }
}

/// Splits `name:split`; the split defaults to `test`.
pub fn split_spec(spec: &str) -> (&str, &str) {
    match spec.rsplit_once(':') {
        Some((name, split @ ("train" | "test"))) => (name, split),
        _ => (spec, "test"),
    }
}

/// One split of a dataset; image directories are resized to `size × size`.
pub fn load_split(spec: &str, split: &str, size: usize) -> Result<Dataset> {
    let root = dataset_root(spec);
    if !root.is_dir() {
        return Err(usage(format!(
            "dataset `{spec}` not found at {} (set NICE_DATA_DIR or pass a directory)",
            root.display()
        )));
    }
    if let Some((_, img, lbl)) = MNIST_FILES.iter().find(|(s, ..)| *s == split) {
        if root.join(img).is_file() {
            return load_mnist_idx(root.join(img), root.join(lbl)).with_context(|| format!("loading {spec} {split}"));
        }
    }
    let dir = root.join(split);
    if dir.is_dir() {
        return load_image_dir(&dir, (size, size)).with_context(|| format!("loading {}", dir.display()));
    }
    Err(usage(format!(
        "{} holds neither IDX files nor a `{split}` image directory",
        root.display()
    )))
}

/// At most `limit` examples, evenly spaced so class-sorted directories keep every class.
pub fn subsample(ds: Dataset, limit: Option<usize>) -> Result<Dataset> {
    let n = ds.len();
    match limit {
        Some(k) if k < n => {
            let idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
            let (images, labels) = ds.batch(&idx)?;
            Ok(Dataset::new(images, labels, ds.split.clone(), ds.class_names.clone())?)
        }
        _ => Ok(ds),
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Architecture name accepted by `--arch`.
pub fn build_discriminator(arch: &str, in_channels: usize, classes: usize, seed: u64) -> Result<DiscriminatorNet> {
    let mut rng = seeded_rng(seed);
    match arch {
        "lenet5" | "lenet5-caffe" => {
            if in_channels != 1 || classes != 10 {
                return Err(usage(format!(
                    "lenet5 needs 1-channel images and 10 classes, dataset has {in_channels} and {classes}"
                )));
            }
            Ok(build_lenet5_caffe(&mut rng))
        }
        "small-resnet" => Ok(build_small_resnet(in_channels, classes, &mut rng)),
        other => Err(usage(format!("unknown architecture `{other}` (expected lenet5 or small-resnet)"))),
    }
}

fn dim(params: &nice_core::ParamSet, path: &str, axis: usize) -> Option<usize> {
    params.get(path).and_then(|t| t.shape().get(axis).copied())
}

/// Rebuilds the discriminator stored in a checkpoint.
pub fn load_discriminator(path: &Path) -> Result<DiscriminatorNet> {
    let params = load_checkpoint(path).with_context(|| format!("loading discriminator {}", path.display()))?;
    let mut net = if params.get("stem.weight").is_some() {
        let c = dim(&params, "stem.weight", 1).unwrap_or(0);
        let classes = dim(&params, "fc.weight", 0).unwrap_or(0);
        build_small_resnet(c, classes, &mut seeded_rng(0))
    } else if params.get("fc2.weight").is_some() {
        build_lenet5_caffe(&mut seeded_rng(0))
    } else {
        return Err(usage(format!("{} is not a discriminator checkpoint", path.display())));
    };
    net.params_mut().load_values(&params).with_context(|| format!("restoring {}", path.display()))?;
    Ok(net)
}

/// Rebuilds the generator stored in a checkpoint.
pub fn load_generator(path: &Path) -> Result<GeneratorNet> {
    let params = load_checkpoint(path).with_context(|| format!("loading generator {}", path.display()))?;
    let mut net = if params.get("conv.weight").is_some() {
        build_mnist_generator()
    } else if params.get("conv3.weight").is_some() && params.get("fc2.weight").is_none() {
        let c = dim(&params, "conv1.weight", 1).unwrap_or(0);
        build_small_generator(c, &mut seeded_rng(0))
    } else {
        return Err(usage(format!("{} is not a generator checkpoint", path.display())));
    };
    net.params_mut().load_values(&params).with_context(|| format!("restoring {}", path.display()))?;
    Ok(net)
}

/// Fresh generator matched to a discriminator.
pub fn generator_for(disc: &DiscriminatorNet, seed: u64) -> GeneratorNet {
    match disc.arch {
        nice_core::models::DiscriminatorArch::Lenet5Caffe => build_mnist_generator(),
        nice_core::models::DiscriminatorArch::SmallResnet { in_channels } => {
            build_small_generator(in_channels, &mut seeded_rng(seed))
        }
    }
}
