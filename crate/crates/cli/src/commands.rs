use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use nice_core::compressor::mix;
use nice_core::data::synth::{write_shapes_dataset, ShapesSpec};
use nice_core::data::{emit_overlay, load_image, save_png, write_sweep_csv, write_train_csv};
use nice_core::models::{gradient_saliency, DiscriminatorArch};
use nice_core::tensor::{content_hash, save_checkpoint};
use nice_core::trainer::{
    evaluate, mix_batch, pretrain_discriminator, test_masks, train_generator, MaskSource, PretrainConfig,
};
use nice_core::{sweep_block_sizes, Dataset, DiscriminatorNet, HardConcreteConfig, Network, Tensor, TrainConfig};

use crate::config::{usage, FileConfig, Preset, SizeList};
use crate::manifest::{Manifest, MANIFEST_NAME};
use crate::resolve::{
    build_discriminator, generator_for, load_discriminator, load_generator, load_split, split_spec, subsample,
};
use crate::{ExplainArgs, OptimArgs, PretrainArgs, SweepArgs, SynthArgs, TrainArgs};

fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(content_hash(&bytes))
}

/// Hashes an input checkpoint and warns when a replayed manifest recorded a different one.
fn hash_input(cfg: &FileConfig, key: &str, path: &Path, manifest: &mut Manifest) -> Result<()> {
    let hash = hash_file(path)?;
    let hash_key = format!("{key}_sha256");
    if let Some(recorded) = cfg.get(&hash_key) {
        if recorded != hash {
            log::warn!("{} hash {hash} differs from the recorded {recorded}", path.display());
        }
    }
    manifest.set(key, path.display());
    manifest.set(&hash_key, hash);
    Ok(())
}

fn side(ds: &Dataset) -> (usize, usize, usize) {
    ds.image_shape()
}

fn check_divides(b: usize, h: usize, w: usize, what: &str) -> Result<()> {
    if b == 0 || h % b != 0 || w % b != 0 {
        return Err(usage(format!("{what} {b} must divide the {h}x{w} image")));
    }
    Ok(())
}

fn check_input(disc: &DiscriminatorNet, ds: &Dataset) -> Result<()> {
    let (c, h, w) = side(ds);
    let want = match disc.arch {
        DiscriminatorArch::Lenet5Caffe => (1, 28, 28),
        DiscriminatorArch::SmallResnet { in_channels } => (in_channels, h, w),
    };
    if (c, h, w) != want {
        return Err(usage(format!(
            "{} expects {}x{}x{} images, dataset has {c}x{h}x{w}",
            disc.arch.tag(),
            want.0,
            want.1,
            want.2
        )));
    }
    if ds.classes() != disc.classes {
        return Err(usage(format!("classifier has {} classes, dataset has {}", disc.classes, ds.classes())));
    }
    Ok(())
}

fn default_size(disc: &DiscriminatorNet) -> usize {
    match disc.arch {
        DiscriminatorArch::Lenet5Caffe => 28,
        DiscriminatorArch::SmallResnet { .. } => 64,
    }
}

fn preset_for(disc: &DiscriminatorNet) -> Preset {
    match disc.arch {
        DiscriminatorArch::Lenet5Caffe => Preset::Mnist,
        DiscriminatorArch::SmallResnet { .. } => Preset::SmallColor,
    }
}

struct Splits {
    train: Dataset,
    test: Dataset,
}

fn load_splits(cfg: &FileConfig, data: crate::DataArgs, fallback_size: usize, manifest: &mut Manifest) -> Result<Splits> {
    let dataset: String = cfg.require(data.dataset, "dataset")?;
    let size = cfg.pick_or(data.size, "size", fallback_size)?;
    let train_limit = cfg.pick(data.train_limit, "train_limit")?;
    let test_limit = cfg.pick(data.test_limit, "test_limit")?;
    let train = subsample(load_split(&dataset, "train", size)?, train_limit)?;
    let test = subsample(load_split(&dataset, "test", size)?, test_limit)?;
    if train.class_names != test.class_names || side(&train) != side(&test) {
        return Err(usage(format!("train and test splits of `{dataset}` disagree on classes or image shape")));
    }
    manifest.set("dataset", &dataset);
    manifest.set("size", size);
    if let Some(n) = train_limit {
        manifest.set("train_limit", n);
    }
    if let Some(n) = test_limit {
        manifest.set("test_limit", n);
    }
    Ok(Splits { train, test })
}

/// Optimizer settings shared by both training commands, layered over a preset.
struct Optim {
    preset: Preset,
    optimizer: nice_core::trainer::OptimizerKind,
    lr: f64,
    schedule: nice_core::trainer::Schedule,
    epochs: usize,
    batch: usize,
    seed: u64,
}

fn resolve_optim(cfg: &FileConfig, a: OptimArgs, default_preset: Preset, pretraining: bool) -> Result<Optim> {
    let preset = cfg.pick_or(a.preset, "preset", default_preset)?;
    let (optimizer, lr, schedule, epochs, batch, seed) = if pretraining {
        let p = preset.pretrain();
        (p.optimizer, p.lr, p.schedule, p.epochs, p.batch, p.seed)
    } else {
        let t = preset.train();
        (t.optimizer, t.lr, t.schedule, t.epochs, t.batch, t.seed)
    };
    Ok(Optim {
        preset,
        optimizer: cfg.pick_or(a.optimizer, "optimizer", optimizer)?,
        lr: cfg.pick_or(a.lr, "lr", lr)?,
        schedule: cfg.pick_or(a.schedule, "schedule", schedule)?,
        epochs: cfg.pick_or(a.epochs, "epochs", epochs)?,
        batch: cfg.pick_or(a.batch, "batch", batch)?,
        seed: cfg.pick_or(a.seed, "seed", seed)?,
    })
}

fn record_optim(m: &mut Manifest, o: &Optim) {
    m.set("preset", o.preset);
    m.set("optimizer", o.optimizer);
    m.set("lr", o.lr);
    m.set("schedule", o.schedule);
    m.set("epochs", o.epochs);
    m.set("batch", o.batch);
    m.set("seed", o.seed);
}

pub fn pretrain(a: PretrainArgs, cfg: &FileConfig) -> Result<()> {
    let mut m = Manifest::new("pretrain");
    let out: PathBuf = cfg.require(a.out, "out")?;
    let splits = load_splits(cfg, a.data, 64, &mut m)?;
    let (c, _, _) = side(&splits.train);
    let arch: String = cfg.pick_or(a.arch, "arch", if c == 1 { "lenet5" } else { "small-resnet" }.to_string())?;
    let default_preset = if arch.starts_with("lenet5") { Preset::Mnist } else { Preset::SmallColor };
    let o = resolve_optim(cfg, a.optim, default_preset, true)?;
    let pc = PretrainConfig {
        optimizer: o.optimizer,
        lr: o.lr,
        schedule: o.schedule,
        epochs: o.epochs,
        batch: o.batch,
        seed: o.seed,
    };
    if pc.epochs == 0 || pc.batch == 0 || !(pc.lr > 0.0 && pc.lr.is_finite()) {
        return Err(usage("epochs, batch and lr must be positive"));
    }
    let mut disc = build_discriminator(&arch, c, splits.train.classes(), o.seed)?;
    check_input(&disc, &splits.train)?;
    let report = pretrain_discriminator(&mut disc, &splits.train, &splits.test, &pc)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let hash = save_checkpoint(disc.params(), out.join("disc.ckpt"))?;
    m.set("arch", disc.arch.tag());
    record_optim(&mut m, &o);
    m.set("out", out.display());
    m.set("out_disc_sha256", &hash);
    m.set("test_accuracy", format!("{:.6}", report.test_accuracy));
    m.write(&out.join(MANIFEST_NAME))?;
    println!("test_accuracy = {:.4}", report.test_accuracy);
    println!("disc_ckpt = {}", out.join("disc.ckpt").display());
    Ok(())
}

pub fn train(a: TrainArgs, cfg: &FileConfig) -> Result<()> {
    let mut m = Manifest::new("train");
    let out: PathBuf = cfg.require(a.out, "out")?;
    let disc_path: PathBuf = cfg.require(a.disc_ckpt, "disc_ckpt")?;
    let regime = cfg.pick(a.regime, "regime")?;
    let lambda1 = cfg.pick(a.lambda1, "lambda1")?;
    let lambda2 = cfg.pick(a.lambda2, "lambda2")?;
    let b_train = cfg.pick(a.b_train, "b_train")?;
    let mut disc = load_discriminator(&disc_path)?;
    hash_input(cfg, "disc_ckpt", &disc_path, &mut m)?;
    let splits = load_splits(cfg, a.data, default_size(&disc), &mut m)?;
    check_input(&disc, &splits.train)?;

    let o = resolve_optim(cfg, a.optim, preset_for(&disc), false)?;
    let base = o.preset.train();
    let tc = TrainConfig {
        regime: regime.unwrap_or(base.regime),
        lambda1: lambda1.unwrap_or(base.lambda1),
        lambda2: lambda2.unwrap_or(base.lambda2),
        b_train: b_train.unwrap_or(base.b_train),
        optimizer: o.optimizer,
        lr: o.lr,
        schedule: o.schedule,
        epochs: o.epochs,
        batch: o.batch,
        seed: o.seed,
        gate: base.gate,
    };
    tc.validate().map_err(|e| usage(e.to_string()))?;
    let (_, h, w) = side(&splits.train);
    check_divides(tc.b_train, h, w, "b_train")?;

    let mut gen = generator_for(&disc, tc.seed);
    let report = train_generator(&mut gen, &mut disc, &splits.train, &splits.test, &tc)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let gen_hash = save_checkpoint(gen.params(), out.join("gen.ckpt"))?;
    let disc_hash = save_checkpoint(disc.params(), out.join("disc.ckpt"))?;
    let csv = File::create(out.join("train.csv")).context("creating train.csv")?;
    write_train_csv(&report.rows, BufWriter::new(csv))?;

    record_optim(&mut m, &o);
    m.set("regime", tc.regime);
    m.set("lambda1", tc.lambda1);
    m.set("lambda2", tc.lambda2);
    m.set("b_train", tc.b_train);
    m.set("out", out.display());
    m.set("out_gen_sha256", gen_hash);
    m.set("out_disc_sha256", disc_hash);
    if let Some(last) = report.last() {
        m.set("gate_density", format!("{:.6}", last.gate_density));
        m.set("masked_accuracy", format!("{:.6}", last.masked_accuracy));
        println!(
            "epoch {}: total_loss {:.4} masked_accuracy {:.4} gate_density {:.4}",
            last.epoch, last.total_loss, last.masked_accuracy, last.gate_density
        );
    }
    m.write(&out.join(MANIFEST_NAME))?;
    Ok(())
}

pub fn explain(a: ExplainArgs, cfg: &FileConfig) -> Result<()> {
    let mut m = Manifest::new("explain");
    let gen_path: PathBuf = cfg.require(a.gen_ckpt, "gen_ckpt")?;
    let disc_path: PathBuf = cfg.require(a.disc_ckpt, "disc_ckpt")?;
    let input: String = cfg.require(a.input, "input")?;
    let out_dir: PathBuf = cfg.require(a.out_dir, "out_dir")?;
    let baseline: String = cfg.pick_or(a.baseline, "baseline", "none".to_string())?;
    if baseline != "none" && baseline != "saliency" {
        return Err(usage(format!("unknown baseline `{baseline}` (expected none or saliency)")));
    }
    let limit: usize = cfg.pick_or(a.limit, "limit", 8)?;
    let gen = load_generator(&gen_path)?;
    let disc = load_discriminator(&disc_path)?;
    hash_input(cfg, "gen_ckpt", &gen_path, &mut m)?;
    hash_input(cfg, "disc_ckpt", &disc_path, &mut m)?;
    let size = cfg.pick_or(a.size, "size", default_size(&disc))?;

    let (images, labels): (Tensor, Option<Vec<usize>>) = if Path::new(&input).is_file() {
        let c = match disc.arch {
            DiscriminatorArch::Lenet5Caffe => 1,
            DiscriminatorArch::SmallResnet { in_channels } => in_channels,
        };
        let img = load_image(&input, (size, size), c)?;
        (img.reshape(&[1, c, size, size])?, None)
    } else {
        let (name, split) = split_spec(&input);
        let ds = subsample(load_split(name, split, size)?, Some(limit))?;
        check_input(&disc, &ds)?;
        (ds.images, Some(ds.labels))
    };
    let (n, c, h, w) = images.nchw()?;
    let b = cfg.pick_or(a.b, "b", h)?;
    check_divides(b, h, w, "b")?;

    let gate = HardConcreteConfig::default();
    let zhats = test_masks(&gen, &images, &gate)?;
    let predicted = disc.predict(&images, 64)?;
    let masked = disc.predict(&mix_batch(&images, &zhats, b)?, 64)?;

    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut rows = String::from("index,label,predicted,masked_predicted,mask_density\n");
    for i in 0..n {
        let img = images.select_first(i)?.reshape(&[c, h, w])?;
        let z = zhats.select_first(i)?.reshape(&[1, h, w])?;
        let mixed = mix(&img, &z, b)?.pixels;
        save_png(&z, out_dir.join(format!("{i:04}_mask.png")))?;
        emit_overlay(&img, &z, &mixed, out_dir.join(format!("{i:04}_panel.png")))?;
        if baseline == "saliency" {
            let target = labels.as_ref().map_or(predicted[i], |l| l[i]);
            let s = gradient_saliency(&disc, disc.classes, &img, target)?;
            let peak = s.values().iter().cloned().fold(0.0, f64::max);
            let norm = s.map(|v| if peak > 0.0 { v / peak } else { 0.0 }).reshape(&[1, h, w])?;
            save_png(&norm, out_dir.join(format!("{i:04}_saliency.png")))?;
        }
        let density = z.values().iter().sum::<f64>() / (h * w) as f64;
        let label = labels.as_ref().map(|l| l[i].to_string()).unwrap_or_default();
        rows.push_str(&format!("{i},{label},{},{},{density:.6}\n", predicted[i], masked[i]));
    }
    fs::write(out_dir.join("predictions.csv"), rows).context("writing predictions.csv")?;

    m.set("input", &input);
    m.set("out_dir", out_dir.display());
    m.set("baseline", &baseline);
    m.set("limit", limit);
    m.set("size", size);
    m.set("b", b);
    m.write(&out_dir.join(MANIFEST_NAME))?;
    println!("explained {n} image(s) into {}", out_dir.display());
    Ok(())
}

fn divisors_up_to(side: usize, cap: usize) -> Vec<usize> {
    (1..=side.min(cap)).filter(|d| side % d == 0).collect()
}

pub fn sweep(a: SweepArgs, cfg: &FileConfig) -> Result<()> {
    let mut m = Manifest::new("sweep");
    let gen_path: PathBuf = cfg.require(a.gen_ckpt, "gen_ckpt")?;
    let disc_path: PathBuf = cfg.require(a.disc_ckpt, "disc_ckpt")?;
    let dataset: String = cfg.require(a.dataset, "dataset")?;
    let out_csv: PathBuf = cfg.require(a.out_csv, "out_csv")?;
    let limit = cfg.pick(a.limit, "limit")?;
    let gen = load_generator(&gen_path)?;
    let disc = load_discriminator(&disc_path)?;
    hash_input(cfg, "gen_ckpt", &gen_path, &mut m)?;
    hash_input(cfg, "disc_ckpt", &disc_path, &mut m)?;
    let size = cfg.pick_or(a.size, "size", default_size(&disc))?;

    let (name, split) = split_spec(&dataset);
    let ds = subsample(load_split(name, split, size)?, limit)?;
    check_input(&disc, &ds)?;
    let (_, h, w) = side(&ds);
    let bs = cfg.pick_or(a.b, "b", SizeList(divisors_up_to(h.min(w), 64)))?;
    for &b in &bs.0 {
        check_divides(b, h, w, "block size")?;
    }

    let gate = HardConcreteConfig::default();
    let zhats = test_masks(&gen, &ds.images, &gate)?;
    let rows = sweep_block_sizes(&ds.images, &ds.labels, &zhats, &bs.0, &disc)?;
    let baseline = evaluate(&disc, &ds.images, &ds.labels, MaskSource::None, 1)?;

    if let Some(parent) = out_csv.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file = File::create(&out_csv).with_context(|| format!("creating {}", out_csv.display()))?;
    write_sweep_csv(&rows, BufWriter::new(file))?;

    let samples_dir = cfg.pick(a.samples_dir, "samples_dir")?;
    if let Some(dir) = &samples_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let (c, h, w) = side(&ds);
        let img = ds.images.select_first(0)?.reshape(&[c, h, w])?;
        let z = zhats.select_first(0)?.reshape(&[1, h, w])?;
        for &b in &bs.0 {
            save_png(&mix(&img, &z, b)?.pixels, dir.join(format!("b{b}.png")))?;
        }
        m.set("samples_dir", dir.display());
    }

    m.set("dataset", &dataset);
    m.set("size", size);
    if let Some(n) = limit {
        m.set("limit", n);
    }
    m.set("b", &bs);
    m.set("out_csv", out_csv.display());
    m.set("out_csv_sha256", hash_file(&out_csv)?);
    m.set("baseline_accuracy", format!("{baseline:.6}"));
    let mut name = out_csv.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.txt");
    m.write(&out_csv.with_file_name(name))?;

    println!("baseline accuracy {baseline:.4}");
    for r in &rows {
        println!("b={:<3} mean_bytes {:>10.1} accuracy {:.4}", r.b, r.mean_bytes, r.accuracy);
    }
    Ok(())
}

pub fn synth_shapes(a: SynthArgs, cfg: &FileConfig) -> Result<()> {
    let mut m = Manifest::new("synth-shapes");
    let out: PathBuf = cfg.require(a.out, "out")?;
    let d = ShapesSpec::default();
    let spec = ShapesSpec {
        size: cfg.pick_or(a.size, "size", d.size)?,
        train_per_class: cfg.pick_or(a.train_per_class, "train_per_class", d.train_per_class)?,
        test_per_class: cfg.pick_or(a.test_per_class, "test_per_class", d.test_per_class)?,
        seed: cfg.pick_or(a.seed, "seed", d.seed)?,
    };
    if spec.size < 8 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(usage("size must be at least 8 and per-class counts positive"));
    }
    write_shapes_dataset(&out, &spec)?;
    m.set("out", out.display());
    m.set("size", spec.size);
    m.set("train_per_class", spec.train_per_class);
    m.set("test_per_class", spec.test_per_class);
    m.set("seed", spec.seed);
    m.write(&out.join(MANIFEST_NAME))?;
    println!("wrote shapes dataset to {}", out.display());
    Ok(())
}
