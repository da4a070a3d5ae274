use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn nice(data_dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nice"))
        .args(args)
        .env("NICE_DATA_DIR", data_dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(data_dir: &Path, args: &[&str]) -> String {
    let out = nice(data_dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn manifest(path: &Path) -> BTreeMap<String, String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn write_idx(path: &Path, magic: u32, dims: &[u32], data: &[u8]) {
    let mut bytes = magic.to_be_bytes().to_vec();
    for d in dims {
        bytes.extend(d.to_be_bytes());
    }
    bytes.extend(data);
    fs::write(path, bytes).unwrap();
}

/// Tiny digit-like set: class `d` is a bright bar at row `2d + 4` on a noisy field.
fn fake_mnist(dir: &Path, n_train: usize, n_test: usize) {
    fs::create_dir_all(dir).unwrap();
    let mut state = 12345u32;
    let mut noise = move || {
        state = state.wrapping_mul(1_103_515_245).wrapping_add(12345);
        (state >> 24) as u8 / 4
    };
    for (prefix, n) in [("train", n_train), ("t10k", n_test)] {
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let d = i % 10;
            labels.push(d as u8);
            for y in 0..28 {
                for _ in 0..28 {
                    pixels.push(if y / 2 == d + 2 { 230 } else { noise() });
                }
            }
        }
        write_idx(&dir.join(format!("{prefix}-images-idx3-ubyte")), 0x803, &[n as u32, 28, 28], &pixels);
        write_idx(&dir.join(format!("{prefix}-labels-idx1-ubyte")), 0x801, &[n as u32], &labels);
    }
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fake_mnist(&dir.path().join("mnist"), 200, 60);
        Self { dir }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).display().to_string()
    }

    fn pretrain(&self, out: &str) {
        ok(self.root(), &["pretrain", "--dataset", "mnist", "--epochs", "3", "--seed", "1", "--out", &self.s(out)]);
    }
}

#[test]
fn missing_dataset_exits_with_usage_error() {
    let fx = Fixture::new();
    let out = nice(fx.root(), &["pretrain", "--dataset", "no-such-set", "--out", &fx.s("x")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not found"));
    let out = nice(fx.root(), &["pretrain", "--out", &fx.s("x")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_regime_and_bad_config_exit_with_usage_error() {
    let fx = Fixture::new();
    let out = nice(fx.root(), &["train", "--regime", "frozen", "--dataset", "mnist"]);
    assert_eq!(out.status.code(), Some(2));
    fs::write(fx.path("bad.cfg"), "regime = frozen\n").unwrap();
    fs::write(fx.path("junk.ckpt"), b"junk").unwrap();
    let out = nice(
        fx.root(),
        &["train", "--config", &fx.s("bad.cfg"), "--dataset", "mnist", "--disc-ckpt", &fx.s("junk.ckpt"), "--out", &fx.s("o")],
    );
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unreadable_checkpoint_is_a_runtime_failure() {
    let fx = Fixture::new();
    fs::write(fx.path("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = nice(fx.root(), &["train", "--dataset", "mnist", "--disc-ckpt", &fx.s("junk.ckpt"), "--out", &fx.s("o")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn pretraining_is_reproducible_from_the_seed() {
    let fx = Fixture::new();
    fx.pretrain("a");
    fx.pretrain("b");
    let (a, b) = (manifest(&fx.path("a/manifest.txt")), manifest(&fx.path("b/manifest.txt")));
    assert_eq!(a["out_disc_sha256"], b["out_disc_sha256"]);
    assert_eq!(a["arch"], "lenet5-caffe");
    assert!(a["test_accuracy"].parse::<f64>().unwrap() > 0.5, "{}", a["test_accuracy"]);
}

#[test]
fn train_precedence_replay_sweep_and_explain() {
    let fx = Fixture::new();
    fx.pretrain("pre");
    let disc = fx.s("pre/disc.ckpt");
    let common = ["train", "--dataset", "mnist", "--disc-ckpt", disc.as_str(), "--epochs", "1", "--train-limit", "64"];
    let run = |extra: &[&str]| {
        let mut args: Vec<&str> = common.to_vec();
        args.extend_from_slice(extra);
        ok(fx.root(), &args);
    };

    // Preset only, then file, then flag over file.
    run(&["--out", &fx.s("t0")]);
    fs::write(fx.path("l10.cfg"), "lambda1 = 10\nlambda2 = 0.5\n").unwrap();
    run(&["--config", &fx.s("l10.cfg"), "--out", &fx.s("t1")]);
    run(&["--config", &fx.s("l10.cfg"), "--lambda1", "30", "--out", &fx.s("t2")]);
    let (m0, m1, m2) = (
        manifest(&fx.path("t0/manifest.txt")),
        manifest(&fx.path("t1/manifest.txt")),
        manifest(&fx.path("t2/manifest.txt")),
    );
    assert_eq!((m0["lambda1"].as_str(), m0["regime"].as_str()), ("1", "fixed"));
    assert_eq!((m1["lambda1"].as_str(), m1["lambda2"].as_str()), ("10", "0.5"));
    assert_eq!((m2["lambda1"].as_str(), m2["lambda2"].as_str()), ("30", "0.5"));

    // The fixed regime leaves the classifier bit-identical.
    assert_eq!(m0["out_disc_sha256"], m0["disc_ckpt_sha256"]);
    let csv = fs::read_to_string(fx.path("t0/train.csv")).unwrap();
    assert!(csv.starts_with("epoch,data_loss,capacity_loss,smoothness_loss,total_loss,masked_accuracy,gate_density\n"));
    assert_eq!(csv.lines().count(), 2);

    // A manifest alone replays the run.
    ok(fx.root(), &["train", "--config", &fx.s("t2/manifest.txt"), "--out", &fx.s("replay")]);
    assert_eq!(fs::read(fx.path("t2/train.csv")).unwrap(), fs::read(fx.path("replay/train.csv")).unwrap());
    assert_eq!(manifest(&fx.path("replay/manifest.txt"))["out_gen_sha256"], m2["out_gen_sha256"]);

    let gen = fx.s("t0/gen.ckpt");
    let out = ok(
        fx.root(),
        &[
            "compress", "--gen-ckpt", &gen, "--disc-ckpt", &disc, "--dataset", "mnist:test", "--b", "1,2,4,7,14,28",
            "--out-csv", &fx.s("sweep/sweep.csv"), "--samples-dir", &fx.s("sweep/samples"),
        ],
    );
    assert!(out.contains("baseline accuracy"));
    let text = fs::read_to_string(fx.path("sweep/sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("b,mean_bytes,accuracy,n_images,mask_bytes"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0] as usize).collect::<Vec<_>>(), vec![1, 2, 4, 7, 14, 28]);
    let sm = manifest(&fx.path("sweep/sweep.manifest.txt"));
    assert_eq!(rows[0][2], sm["baseline_accuracy"].parse::<f64>().unwrap());
    assert!(rows.iter().all(|r| r[3] == 60.0 && r[1] > 0.0));
    for b in [1, 2, 4, 7, 14, 28] {
        assert!(fx.path(&format!("sweep/samples/b{b}.png")).is_file());
    }

    ok(
        fx.root(),
        &[
            "explain", "--gen-ckpt", &gen, "--disc-ckpt", &disc, "--input", "mnist", "--limit", "3",
            "--baseline", "saliency", "--out-dir", &fx.s("explain"),
        ],
    );
    let preds = fs::read_to_string(fx.path("explain/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 4);
    for line in preds.lines().skip(1) {
        let density: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&density));
    }
    for i in 0..3 {
        for kind in ["mask", "panel", "saliency"] {
            assert!(fx.path(&format!("explain/{i:04}_{kind}.png")).is_file(), "{kind} {i}");
        }
    }

    // A single image file goes through the same path.
    let single = fx.s("explain/0000_mask.png");
    ok(fx.root(), &["explain", "--gen-ckpt", &gen, "--disc-ckpt", &disc, "--input", &single, "--out-dir", &fx.s("one")]);
    let one = fs::read_to_string(fx.path("one/predictions.csv")).unwrap();
    assert!(one.lines().nth(1).unwrap().starts_with("0,,"));
}

#[test]
fn color_shapes_pipeline_with_finetuning() {
    let fx = Fixture::new();
    let shapes = fx.s("shapes");
    ok(fx.root(), &["synth-shapes", "--out", &shapes, "--size", "16", "--train-per-class", "6", "--test-per-class", "2"]);
    assert!(fx.path("shapes/train/circle/00000.png").is_file());
    ok(fx.root(), &["pretrain", "--dataset", "shapes", "--size", "16", "--epochs", "2", "--out", &fx.s("pre")]);
    let pm = manifest(&fx.path("pre/manifest.txt"));
    assert_eq!((pm["arch"].as_str(), pm["preset"].as_str()), ("small-resnet", "small-color"));
    ok(
        fx.root(),
        &[
            "train", "--dataset", &shapes, "--size", "16", "--disc-ckpt", &fx.s("pre/disc.ckpt"), "--b-train", "16",
            "--epochs", "1", "--lr", "0.01", "--out", &fx.s("t"),
        ],
    );
    let tm = manifest(&fx.path("t/manifest.txt"));
    assert_eq!(tm["regime"], "finetuned");
    assert_ne!(tm["out_disc_sha256"], tm["disc_ckpt_sha256"]);

    let out = nice(
        fx.root(),
        &[
            "sweep", "--gen-ckpt", &fx.s("t/gen.ckpt"), "--disc-ckpt", &fx.s("t/disc.ckpt"), "--dataset", &shapes,
            "--size", "16", "--b", "3", "--out-csv", &fx.s("s.csv"),
        ],
    );
    assert_eq!(out.status.code(), Some(2), "b=3 does not tile 16x16");
}
