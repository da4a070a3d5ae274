//! Mask generators and the classifiers they explain.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{NiceError, Result};
use crate::gates::GateField;
use crate::tensor::{BoundParams, Graph, ParamSet, Tensor, Var};

/// A differentiable model over an NCHW batch.
pub trait Network {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var>;
}

/// Which discriminator parameters a training run may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Every discriminator parameter frozen.
    Fixed,
    /// Only parameters past the finetune boundary are trainable.
    Finetuned,
}

impl FromStr for Regime {
    type Err = NiceError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Regime::Fixed),
            "finetuned" => Ok(Regime::Finetuned),
            other => Err(NiceError::InvalidArgument(format!(
                "unknown regime `{other}` (expected fixed or finetuned)"
            ))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Fixed => "fixed",
            Regime::Finetuned => "finetuned",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorArch {
    /// One 3×3 convolution, 1→1 channel.
    Mnist,
    /// Three conv+pool stages then ×8 nearest upsampling.
    Small { in_channels: usize },
}

impl GeneratorArch {
    pub fn tag(&self) -> &'static str {
        match self {
            GeneratorArch::Mnist => "mnist-gen",
            GeneratorArch::Small { .. } => "small-gen",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorNet {
    pub arch: GeneratorArch,
    params: ParamSet,
}

/// Single linear 3×3 convolution; starts at `log α ≡ 0`.
pub fn build_mnist_generator() -> GeneratorNet {
    let mut params = ParamSet::new();
    params.insert("conv.weight", Tensor::zeros(&[1, 1, 3, 3]));
    params.insert("conv.bias", Tensor::zeros(&[1]));
    GeneratorNet {
        arch: GeneratorArch::Mnist,
        params,
    }
}

pub fn build_small_generator(in_channels: usize, rng: &mut impl Rng) -> GeneratorNet {
    let mut params = ParamSet::new();
    conv_params(&mut params, "conv1", in_channels, 1, 3, rng);
    conv_params(&mut params, "conv2", 1, 1, 3, rng);
    conv_params(&mut params, "conv3", 1, 1, 3, rng);
    GeneratorNet {
        arch: GeneratorArch::Small { in_channels },
        params,
    }
}

impl GeneratorNet {
    /// Gate field for a batch; spatial size matches the input.
    pub fn gate_field(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<GateField> {
        let log_alpha = self.forward(g, p, x)?;
        GateField::new(g, log_alpha)
    }

    /// `log α` for a batch of images without recording gradients.
    pub fn log_alpha(&self, images: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let p = self.params.bind_frozen(&g);
        let x = g.constant(images.clone());
        let v = self.forward(&g, &p, x)?;
        Ok(g.tensor(v))
    }
}

impl Network for GeneratorNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        match self.arch {
            GeneratorArch::Mnist => conv(g, p, "conv", x, 1, 1),
            GeneratorArch::Small { .. } => {
                let shape = g.shape(x);
                if shape.len() != 4 || shape[2] % 8 != 0 || shape[3] % 8 != 0 {
                    return Err(NiceError::shape(
                        "small generator",
                        format!("input {shape:?} must be NCHW with H and W divisible by 8"),
                    ));
                }
                let h = g.maxpool2d(g.relu(conv(g, p, "conv1", x, 1, 1)?), 2)?;
                let h = g.maxpool2d(g.relu(conv(g, p, "conv2", h, 1, 1)?), 2)?;
                let h = g.maxpool2d(conv(g, p, "conv3", h, 1, 1)?, 2)?;
                g.upsample_nearest(h, 8)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscriminatorArch {
    Lenet5Caffe,
    SmallResnet { in_channels: usize },
}

impl DiscriminatorArch {
    pub fn tag(&self) -> &'static str {
        match self {
            DiscriminatorArch::Lenet5Caffe => "lenet5-caffe",
            DiscriminatorArch::SmallResnet { .. } => "small-resnet",
        }
    }
}

#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    pub arch: DiscriminatorArch,
    pub classes: usize,
    params: ParamSet,
    /// Path prefixes that stay trainable in the finetuned regime.
    finetune_boundary: Vec<String>,
}

/// Caffe's LeNet-5: two conv+pool stages, then 800→500→10 dense layers.
pub fn build_lenet5_caffe(rng: &mut impl Rng) -> DiscriminatorNet {
    let mut params = ParamSet::new();
    conv_params(&mut params, "conv1", 1, 20, 5, rng);
    conv_params(&mut params, "conv2", 20, 50, 5, rng);
    dense_params(&mut params, "fc1", 800, 500, rng);
    dense_params(&mut params, "fc2", 500, 10, rng);
    DiscriminatorNet {
        arch: DiscriminatorArch::Lenet5Caffe,
        classes: 10,
        params,
        finetune_boundary: vec!["fc1.".into(), "fc2.".into()],
    }
}

const RESNET_WIDTHS: [usize; 3] = [8, 16, 32];

/// Three stages of two basic residual blocks on a stride-2 stem, global average pooling, one dense head.
pub fn build_small_resnet(in_channels: usize, classes: usize, rng: &mut impl Rng) -> DiscriminatorNet {
    let mut params = ParamSet::new();
    conv_params(&mut params, "stem", in_channels, RESNET_WIDTHS[0], 3, rng);
    let mut cin = RESNET_WIDTHS[0];
    for (s, &width) in RESNET_WIDTHS.iter().enumerate() {
        for b in 0..2 {
            let prefix = format!("stage{}.{b}", s + 1);
            conv_params(&mut params, &format!("{prefix}.conv1"), cin, width, 3, rng);
            conv_params(&mut params, &format!("{prefix}.conv2"), width, width, 3, rng);
            if cin != width {
                conv_params(&mut params, &format!("{prefix}.proj"), cin, width, 1, rng);
            }
            cin = width;
        }
    }
    dense_params(&mut params, "fc", cin, classes, rng);
    DiscriminatorNet {
        arch: DiscriminatorArch::SmallResnet { in_channels },
        classes,
        params,
        finetune_boundary: vec!["stage3.".into(), "fc.".into()],
    }
}

impl DiscriminatorNet {
    pub fn finetune_boundary(&self) -> &[String] {
        &self.finetune_boundary
    }

    pub fn is_past_boundary(&self, path: &str) -> bool {
        self.finetune_boundary.iter().any(|p| path.starts_with(p.as_str()))
    }

    /// Freezes parameters according to `regime`.
    pub fn apply_regime(&mut self, regime: Regime) {
        let boundary = self.finetune_boundary.clone();
        for (path, e) in self.params.iter_mut() {
            e.trainable = match regime {
                Regime::Fixed => false,
                Regime::Finetuned => boundary.iter().any(|p| path.starts_with(p.as_str())),
            };
        }
    }

    /// Activations feeding the classification head.
    pub fn features(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        match self.arch {
            DiscriminatorArch::Lenet5Caffe => {
                let shape = g.shape(x);
                if shape.len() != 4 || shape[1..] != [1, 28, 28] {
                    return Err(NiceError::shape("lenet5-caffe", format!("expected N×1×28×28, got {shape:?}")));
                }
                let h = g.maxpool2d(g.relu(conv(g, p, "conv1", x, 1, 0)?), 2)?;
                g.maxpool2d(g.relu(conv(g, p, "conv2", h, 1, 0)?), 2)
            }
            DiscriminatorArch::SmallResnet { .. } => {
                let mut h = g.relu(conv(g, p, "stem", x, 2, 1)?);
                let mut cin = RESNET_WIDTHS[0];
                for (s, &width) in RESNET_WIDTHS.iter().enumerate() {
                    for b in 0..2 {
                        let stride = if b == 0 && s > 0 { 2 } else { 1 };
                        h = basic_block(g, p, &format!("stage{}.{b}", s + 1), h, stride, cin != width)?;
                        cin = width;
                    }
                }
                Ok(h)
            }
        }
    }

    /// Argmax class for each image, evaluated in chunks of `batch`.
    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<Vec<usize>> {
        predict_classes(self, images, batch)
    }
}

/// Argmax class of any classifier, evaluated without gradients in chunks of `batch`.
pub fn predict_classes(net: &dyn Network, images: &Tensor, batch: usize) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(n);
        let g = Graph::new();
        let p = net.params().bind_frozen(&g);
        let x = g.constant(images.slice_first(start, end)?);
        let logits = net.forward(&g, &p, x)?;
        let v = g.value(logits);
        let classes = v.shape()[1];
        out.extend(v.values().chunks(classes).map(argmax));
    }
    Ok(out)
}

impl Network for DiscriminatorNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward(&self, g: &Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.features(g, p, x)?;
        match self.arch {
            DiscriminatorArch::Lenet5Caffe => {
                let n = g.shape(h)[0];
                let flat = g.reshape(h, &[n, 800])?;
                let h = g.relu(dense(g, p, "fc1", flat)?);
                dense(g, p, "fc2", h)
            }
            DiscriminatorArch::SmallResnet { .. } => {
                let [n, c, hh, ww] = g.shape(h)[..] else { unreachable!("resnet features are NCHW") };
                if hh != ww {
                    return Err(NiceError::shape("small-resnet", format!("non-square feature map {hh}x{ww}")));
                }
                let pooled = g.avgpool2d(h, hh, hh)?;
                let flat = g.reshape(pooled, &[n, c])?;
                dense(g, p, "fc", flat)
            }
        }
    }
}

/// Magnitude of the label logit's input gradient, maximized over channels.
pub fn gradient_saliency(disc: &dyn Network, classes: usize, image: &Tensor, label: usize) -> Result<Tensor> {
    let [c, h, w] = image.shape()[..] else {
        return Err(NiceError::shape("gradient_saliency", format!("expected C×H×W, got {:?}", image.shape())));
    };
    if label >= classes {
        return Err(NiceError::LabelOutOfRange { label, classes });
    }
    let g = Graph::new();
    let p = disc.params().bind_frozen(&g);
    let x = g.leaf(image.clone().reshape(&[1, c, h, w])?);
    let logits = disc.forward(&g, &p, x)?;
    let onehot = g.constant(Tensor::from_fn(&[1, classes], |i| if i == label { 1.0 } else { 0.0 }));
    let picked = g.sum(g.mul(logits, onehot)?);
    g.backward(picked)?;
    let grad = g.grad(x).unwrap_or_else(|| Tensor::zeros(&[1, c, h, w]));
    let gv = grad.values();
    Ok(Tensor::from_fn(&[h, w], |i| {
        (0..c).map(|ch| gv[ch * h * w + i].abs()).fold(0.0, f64::max)
    }))
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn basic_block(g: &Graph, p: &BoundParams, prefix: &str, x: Var, stride: usize, project: bool) -> Result<Var> {
    let h = g.relu(conv(g, p, &format!("{prefix}.conv1"), x, stride, 1)?);
    let h = conv(g, p, &format!("{prefix}.conv2"), h, 1, 1)?;
    let shortcut = if project {
        conv(g, p, &format!("{prefix}.proj"), x, stride, 0)?
    } else {
        x
    };
    Ok(g.relu(g.add(h, shortcut)?))
}

fn conv(g: &Graph, p: &BoundParams, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.conv2d(x, w, Some(b), stride, pad)
}

fn dense(g: &Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    g.dense(x, w, Some(b))
}

/// Uniform fan-in scaling with variance `2 / fan_in`.
fn kaiming(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

fn conv_params(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) {
    ps.insert(format!("{name}.weight"), kaiming(&[cout, cin, k, k], cin * k * k, rng));
    ps.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn dense_params(ps: &mut ParamSet, name: &str, fan_in: usize, out: usize, rng: &mut impl Rng) {
    ps.insert(format!("{name}.weight"), kaiming(&[out, fan_in], fan_in, rng));
    ps.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
}
