//! Discriminator pretraining, generator training and masked evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::compressor::{mix, subsample_block_mean};
use crate::data::Dataset;
use crate::error::{NiceError, Result};
use crate::gates::{deterministic_gate_tensor, sample_gate, uniform_noise, HardConcreteConfig};
use crate::models::{predict_classes, DiscriminatorNet, GeneratorNet, Network, Regime};
use crate::objectives::{capacity_loss, data_loss, smoothness_loss, total_loss};
use crate::tensor::{Graph, ParamSet, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const DEFAULT_BATCH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = NiceError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(NiceError::InvalidArgument(format!("unknown optimizer `{other}` (expected adam or sgd)"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    Constant,
    /// Multiply by `factor` after every `every` epochs.
    Step { factor: f64, every: usize },
    /// Half-cosine from the base rate toward zero over the run.
    Cosine,
}

impl Schedule {
    /// Rate for zero-based `epoch` of a run lasting `epochs`.
    pub fn lr_at(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Step { factor, every } => base * factor.powi((epoch / every.max(1)) as i32),
            Schedule::Cosine => 0.5 * base * (1.0 + (PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

impl FromStr for Schedule {
    type Err = NiceError;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || NiceError::InvalidArgument(format!("bad schedule `{s}` (expected constant, cosine or step(factor,every))"));
        match s.trim() {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            t => {
                let inner = t.strip_prefix("step(").and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
                let (f, e) = inner.split_once(',').ok_or_else(bad)?;
                let factor: f64 = f.trim().parse().map_err(|_| bad())?;
                let every: usize = e.trim().parse().map_err(|_| bad())?;
                if every == 0 || !(factor > 0.0) {
                    return Err(bad());
                }
                Ok(Schedule::Step { factor, every })
            }
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Schedule::Constant => f.write_str("constant"),
            Schedule::Cosine => f.write_str("cosine"),
            Schedule::Step { factor, every } => write!(f, "step({factor},{every})"),
        }
    }
}

/// Adam with per-path moment buffers.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Updates every trainable entry from its accumulated gradient.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (path, e) in params.iter_mut() {
            if !e.trainable {
                continue;
            }
            let grad = e.tensor.grad_or_zeros();
            let (m, v) = self
                .moments
                .entry(path.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (((w, g), m), v) in e.tensor.values_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

pub fn sgd_step(params: &mut ParamSet, lr: f64) {
    for (_, e) in params.iter_mut() {
        if !e.trainable {
            continue;
        }
        let grad = e.tensor.grad_or_zeros();
        for (w, g) in e.tensor.values_mut().iter_mut().zip(grad) {
            *w -= lr * g;
        }
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::default()),
            OptimizerKind::Sgd => Optimizer::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, lr: f64) {
        match self {
            Optimizer::Adam(a) => a.step(params, lr),
            Optimizer::Sgd => sgd_step(params, lr),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda1: f64,
    pub lambda2: f64,
    pub b_train: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub gate: HardConcreteConfig,
}

impl TrainConfig {
    /// 28×28 digits: Adam, step decay, no smoothness term, full-image background.
    pub fn mnist() -> Self {
        Self {
            regime: Regime::Fixed,
            lambda1: 1.0,
            lambda2: 0.0,
            b_train: 28,
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            schedule: Schedule::Step { factor: 0.1, every: 5 },
            epochs: 15,
            batch: DEFAULT_BATCH,
            seed: 0,
            gate: HardConcreteConfig::default(),
        }
    }

    /// 64×64 color images: SGD with cosine decay.
    pub fn small_color() -> Self {
        Self {
            regime: Regime::Finetuned,
            lambda1: 5.0,
            lambda2: 0.01,
            b_train: 64,
            optimizer: OptimizerKind::Sgd,
            lr: 0.001,
            schedule: Schedule::Cosine,
            epochs: 30,
            batch: DEFAULT_BATCH,
            seed: 0,
            gate: HardConcreteConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        let bad = |m: String| Err(NiceError::InvalidArgument(m));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!("loss weights must be nonnegative, got {} and {}", self.lambda1, self.lambda2));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch == 0 || self.b_train == 0 {
            return bad("epochs, batch and b_train must be positive".into());
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule.lr_at(self.lr, epoch, self.epochs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self::mnist()
    }
}

impl PretrainConfig {
    /// LeNet5-caffe on digits.
    pub fn mnist() -> Self {
        Self {
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            schedule: Schedule::Constant,
            epochs: 6,
            batch: DEFAULT_BATCH,
            seed: 0,
        }
    }

    /// The residual net trains slower without normalization layers.
    pub fn small_color() -> Self {
        Self {
            epochs: 25,
            ..Self::mnist()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean training cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    pub test_accuracy: f64,
}

/// One row of a generator training report.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub data_loss: f64,
    pub capacity_loss: f64,
    pub smoothness_loss: f64,
    pub total_loss: f64,
    pub masked_accuracy: f64,
    pub gate_density: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.rows.last()
    }
}

fn epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

fn grad_norms(params: &ParamSet) -> String {
    params
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(k, e)| {
            let n = e.tensor.grad_or_zeros().iter().map(|g| g * g).sum::<f64>().sqrt();
            format!("{k}={n:.3e}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fraction of `predictions` equal to `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / labels.len().max(1) as f64
}

/// Trains every parameter of `disc` on unmasked images with cross-entropy.
pub fn pretrain_discriminator(
    disc: &mut dyn Network,
    train: &Dataset,
    test: &Dataset,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if cfg.epochs == 0 || cfg.batch == 0 || !(cfg.lr > 0.0) {
        return Err(NiceError::InvalidArgument("pretraining needs positive epochs, batch and lr".into()));
    }
    disc.params_mut().set_all_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(cfg.lr, epoch, cfg.epochs);
        let order = epoch_order(train.len(), &mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let (x, y) = train.batch(chunk)?;
            let g = Graph::new();
            let bound = disc.params().bind(&g);
            let input = g.constant(x);
            let logits = disc.forward(&g, &bound, input)?;
            let loss = g.softmax_cross_entropy(logits, &y)?;
            let value = g.item(loss);
            if !value.is_finite() {
                return Err(NiceError::NonFinite {
                    epoch,
                    step,
                    lr,
                    grad_norms: grad_norms(disc.params()),
                });
            }
            g.backward(loss)?;
            let params = disc.params_mut();
            params.zero_grads();
            params.collect_grads(&g, &bound);
            opt.step(params, lr);
            sum += value * chunk.len() as f64;
            count += chunk.len();
        }
        let mean = sum / count as f64;
        log::info!("pretrain epoch {epoch}: loss {mean:.4} lr {lr:.2e}");
        epoch_loss.push(mean);
    }
    disc.params_mut().zero_grads();
    let test_accuracy = accuracy(&predict_classes(disc, &test.images, 256)?, &test.labels);
    log::info!("pretrain test accuracy {test_accuracy:.4}");
    Ok(PretrainReport {
        epoch_loss,
        test_accuracy,
    })
}

/// Test-time masks `ẑ` for a batch of images, `N×1×H×W`.
pub fn test_masks(gen: &GeneratorNet, images: &Tensor, cfg: &HardConcreteConfig) -> Result<Tensor> {
    let n = images.shape()[0];
    let mut parts = Vec::new();
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let la = gen.log_alpha(&images.slice_first(start, end)?)?;
        parts.push(deterministic_gate_tensor(&la, cfg)?);
    }
    Tensor::concat_first(&parts)
}

/// Where the masks for [`evaluate`] come from.
#[derive(Clone, Copy, Debug)]
pub enum MaskSource<'a> {
    /// Images are classified as given.
    None,
    /// Test-time masks from a generator, mixed with a block-mean background.
    Generator(&'a GeneratorNet, HardConcreteConfig),
}

/// Mixed-resolution images for precomputed masks.
pub fn mix_batch(images: &Tensor, zhats: &Tensor, b: usize) -> Result<Tensor> {
    let (n, c, h, w) = images.nchw()?;
    let mut values = Vec::with_capacity(images.numel());
    for i in 0..n {
        let x = images.select_first(i)?.reshape(&[c, h, w])?;
        let z = zhats.select_first(i)?.reshape(&[h, w])?;
        values.extend(mix(&x, &z, b)?.pixels.into_values());
    }
    Tensor::new(images.shape(), values)
}

/// Top-1 accuracy of `disc` on images mixed at block size `b`.
pub fn evaluate(disc: &DiscriminatorNet, images: &Tensor, labels: &[usize], source: MaskSource, b: usize) -> Result<f64> {
    let input = match source {
        MaskSource::None => images.clone(),
        MaskSource::Generator(gen, cfg) => mix_batch(images, &test_masks(gen, images, &cfg)?, b)?,
    };
    Ok(accuracy(&disc.predict(&input, 256)?, labels))
}

/// Trains the generator (and, when finetuned, the discriminator head) on the combined loss.
///
/// Each step draws fresh gate noise, blends each image with its block-mean
/// background at `b_train`, and takes one optimizer step. After every epoch
/// the test-time masks are evaluated on `eval`.
pub fn train_generator(
    gen: &mut GeneratorNet,
    disc: &mut DiscriminatorNet,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    disc.apply_regime(cfg.regime);
    gen.params_mut().set_all_trainable(true);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen_opt = Optimizer::new(cfg.optimizer);
    let mut disc_opt = Optimizer::new(cfg.optimizer);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = epoch_order(train.len(), &mut rng);
        let mut sums = [0.0; 4];
        let mut count = 0usize;
        for (step, chunk) in order.chunks(cfg.batch).enumerate() {
            let (x, y) = train.batch(chunk)?;
            let background = subsample_block_mean(&x, cfg.b_train)?;
            let g = Graph::new();
            let gp = gen.params().bind(&g);
            let dp = disc.params().bind(&g);
            let input = g.constant(x.clone());
            let field = gen.gate_field(&g, &gp, input)?;
            let noise = uniform_noise(&mut rng, &g.shape(field.log_alpha()));
            let z = sample_gate(&g, field, &cfg.gate, &noise)?;
            let ld = data_loss(&g, disc, &dp, &x, Some(&background), z, &y)?;
            let lc = capacity_loss(&g, field, &cfg.gate)?;
            let ls = smoothness_loss(&g, field, &cfg.gate)?;
            let (total, parts) = total_loss(&g, ld, lc, ls, cfg.lambda1, cfg.lambda2)?;
            if !parts.total.is_finite() {
                return Err(NiceError::NonFinite {
                    epoch,
                    step,
                    lr,
                    grad_norms: format!("{} {}", grad_norms(gen.params()), grad_norms(disc.params())),
                });
            }
            g.backward(total)?;
            for (net_params, bound, opt) in [
                (gen.params_mut(), &gp, &mut gen_opt),
                (disc.params_mut(), &dp, &mut disc_opt),
            ] {
                net_params.zero_grads();
                net_params.collect_grads(&g, bound);
                opt.step(net_params, lr);
            }
            let k = chunk.len() as f64;
            for (s, v) in sums.iter_mut().zip([parts.data, parts.capacity, parts.smoothness, parts.total]) {
                *s += v * k;
            }
            count += chunk.len();
        }
        let zhats = test_masks(gen, &eval.images, &cfg.gate)?;
        let mixed = mix_batch(&eval.images, &zhats, cfg.b_train)?;
        let masked_accuracy = accuracy(&disc.predict(&mixed, 256)?, &eval.labels);
        let c = count as f64;
        let row = EpochRecord {
            epoch: epoch + 1,
            data_loss: sums[0] / c,
            capacity_loss: sums[1] / c,
            smoothness_loss: sums[2] / c,
            total_loss: sums[3] / c,
            masked_accuracy,
            gate_density: zhats.mean(),
        };
        log::info!(
            "epoch {}: total {:.4} data {:.4} capacity {:.2} masked acc {:.4} density {:.4}",
            row.epoch,
            row.total_loss,
            row.data_loss,
            row.capacity_loss,
            row.masked_accuracy,
            row.gate_density
        );
        report.rows.push(row);
    }
    gen.params_mut().zero_grads();
    disc.params_mut().zero_grads();
    Ok(report)
}
