#![allow(dead_code)]

use nice_core::compressor::subsample_block_mean;
use nice_core::gates::{sample_gate, uniform_noise, GateField, HardConcreteConfig};
use nice_core::models::{build_lenet5_caffe, build_mnist_generator, build_small_generator, build_small_resnet, Network, Regime};
use nice_core::objectives::{capacity_loss, data_loss, smoothness_loss, total_loss};
use nice_core::tensor::{Graph, ParamSet, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
pub fn off_zero(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale == 0.0 { 0.0 } else { diff / scale }
}

/// Reduces any output to a scalar through fixed pseudo-random weights.
fn scalarize(g: &Graph, out: Var, weights: &Tensor) -> Var {
    if g.shape(out).is_empty() {
        return out;
    }
    let w = g.constant(weights.clone());
    g.sum(g.mul(out, w).unwrap())
}

/// Largest relative error between backprop and central differences over all inputs.
pub fn check_op(inputs: &[Tensor], f: &dyn Fn(&Graph, &[Var]) -> Var) -> f64 {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&g, &vars);
    let shape = g.shape(out);
    let mut r = rng(0xfeed);
    let weights = if shape.is_empty() { Tensor::scalar(1.0) } else { uniform(&mut r, &shape, -1.0, 1.0) };
    let loss = scalarize(&g, out, &weights);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|x| x.into_values()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |inputs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars);
        g.item(scalarize(&g, out, &weights))
    };
    let mut worst: f64 = 0.0;
    for (i, t) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; t.numel()];
        for (j, n) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[j] -= FD_STEP;
            *n = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[i], &numeric));
    }
    worst
}

/// One named finite-difference case.
pub struct GradCase {
    pub name: &'static str,
    pub error: f64,
}

/// Every graph op on small random instances.
pub fn op_cases() -> Vec<GradCase> {
    let mut r = rng(7);
    let mut cases = Vec::new();
    let mut push = |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&Graph, &[Var]) -> Var| {
        cases.push(GradCase {
            name,
            error: check_op(&inputs, f),
        });
    };
    let a = uniform(&mut r, &[2, 3], -1.0, 1.0);
    let b = uniform(&mut r, &[2, 3], -1.0, 1.0);
    push("add", vec![a.clone(), b.clone()], &|g, v| g.add(v[0], v[1]).unwrap());
    push("sub", vec![a.clone(), b.clone()], &|g, v| g.sub(v[0], v[1]).unwrap());
    push("mul", vec![a.clone(), b.clone()], &|g, v| g.mul(v[0], v[1]).unwrap());
    push("add_scalar", vec![a.clone()], &|g, v| g.add_scalar(v[0], 0.7));
    push("scale", vec![a.clone()], &|g, v| g.scale(v[0], -1.3));
    push("relu", vec![off_zero(&mut r, &[2, 3])], &|g, v| g.relu(v[0]));
    push("sigmoid", vec![uniform(&mut r, &[2, 3], -4.0, 4.0)], &|g, v| g.sigmoid(v[0]));
    push("abs", vec![off_zero(&mut r, &[2, 3])], &|g, v| g.abs(v[0]));
    let c = Tensor::new(&[6], vec![-0.5, -0.2, 0.1, 0.4, 0.8, 1.3]).unwrap();
    push("clamp", vec![c], &|g, v| g.clamp(v[0], 0.0, 1.0));
    push("sum", vec![a.clone()], &|g, v| g.sum(v[0]));
    push("mean", vec![a.clone()], &|g, v| g.mean(v[0]));
    push("reshape", vec![a.clone()], &|g, v| g.reshape(v[0], &[3, 2]).unwrap());
    let x = uniform(&mut r, &[2, 2, 4, 5], -1.0, 1.0);
    let plane = uniform(&mut r, &[2, 1, 4, 5], 0.0, 1.0);
    push("mul_channels", vec![x.clone(), plane], &|g, v| g.mul_channels(v[0], v[1]).unwrap());
    push("crop", vec![x.clone()], &|g, v| g.crop(v[0], (1, 3), (0, 4)).unwrap());
    let w = uniform(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let bias = uniform(&mut r, &[3], -0.5, 0.5);
    push("conv2d", vec![x.clone(), w.clone(), bias.clone()], &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 1, 1).unwrap()
    });
    let x6 = uniform(&mut r, &[1, 2, 6, 6], -1.0, 1.0);
    push("conv2d_stride2", vec![x6.clone(), w, bias], &|g, v| {
        g.conv2d(v[0], v[1], Some(v[2]), 2, 1).unwrap()
    });
    push("avgpool2d", vec![x6.clone()], &|g, v| g.avgpool2d(v[0], 2, 2).unwrap());
    // Distinct values keep every pooling window's argmax well separated.
    let distinct = Tensor::from_fn(&[1, 2, 4, 4], |i| ((i * 7919) % 32) as f64 * 0.1);
    push("maxpool2d", vec![distinct], &|g, v| g.maxpool2d(v[0], 2).unwrap());
    push("upsample_nearest", vec![uniform(&mut r, &[1, 2, 2, 3], -1.0, 1.0)], &|g, v| {
        g.upsample_nearest(v[0], 2).unwrap()
    });
    let dx = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let dw = uniform(&mut r, &[5, 4], -1.0, 1.0);
    let db = uniform(&mut r, &[5], -1.0, 1.0);
    push("dense", vec![dx, dw, db], &|g, v| g.dense(v[0], v[1], Some(v[2])).unwrap());
    let logits = uniform(&mut r, &[4, 5], -2.0, 2.0);
    push("softmax_cross_entropy", vec![logits], &|g, v| {
        g.softmax_cross_entropy(v[0], &[0, 3, 4, 1]).unwrap()
    });
    cases
}

/// Gate, capacity and smoothness paths with respect to `log α` at fixed noise.
pub fn gate_cases() -> Vec<GradCase> {
    let cfg = HardConcreteConfig::default();
    let mut r = rng(11);
    let la = uniform(&mut r, &[2, 1, 4, 5], -2.0, 2.0);
    let noise = uniform_noise(&mut r, &[2, 1, 4, 5]);
    let mut cases = Vec::new();
    // Sampled gates are clamped; keep the check away from the clamp corners.
    let inner = {
        let g = Graph::new();
        let f = GateField::from_tensor(&g, la.clone()).unwrap();
        let z = sample_gate(&g, f, &cfg, &noise).unwrap();
        let zv = g.tensor(z);
        zv.values().iter().all(|&v| v == 0.0 || v == 1.0 || (v > 1e-3 && v < 1.0 - 1e-3))
    };
    assert!(inner, "noise draw lands on a clamp corner");
    cases.push(GradCase {
        name: "hard_concrete_sample",
        error: check_op(&[la.clone()], &|g, v| {
            sample_gate(g, GateField::new(g, v[0]).unwrap(), &cfg, &noise).unwrap()
        }),
    });
    cases.push(GradCase {
        name: "capacity_loss",
        error: check_op(&[la.clone()], &|g, v| capacity_loss(g, GateField::new(g, v[0]).unwrap(), &cfg).unwrap()),
    });
    cases.push(GradCase {
        name: "smoothness_loss",
        error: check_op(&[la], &|g, v| smoothness_loss(g, GateField::new(g, v[0]).unwrap(), &cfg).unwrap()),
    });
    cases
}

/// Combined loss on a fixed batch and noise draw, with gradients for trainable entries.
pub fn combined_loss(
    gen: &dyn Network,
    disc: &dyn Network,
    x: &Tensor,
    labels: &[usize],
    noise: &Tensor,
    b: usize,
    lambdas: (f64, f64),
) -> (f64, Vec<(String, Vec<f64>)>) {
    let cfg = HardConcreteConfig::default();
    let g = Graph::new();
    let gp = gen.params().bind(&g);
    let dp = disc.params().bind(&g);
    let input = g.constant(x.clone());
    let field = GateField::new(&g, gen.forward(&g, &gp, input).unwrap()).unwrap();
    let z = sample_gate(&g, field, &cfg, noise).unwrap();
    let bg = subsample_block_mean(x, b).unwrap();
    let ld = data_loss(&g, disc, &dp, x, Some(&bg), z, labels).unwrap();
    let lc = capacity_loss(&g, field, &cfg).unwrap();
    let ls = smoothness_loss(&g, field, &cfg).unwrap();
    let (total, parts) = total_loss(&g, ld, lc, ls, lambdas.0, lambdas.1).unwrap();
    g.backward(total).unwrap();
    let mut grads = Vec::new();
    for (net, bound) in [(gen.params(), &gp), (disc.params(), &dp)] {
        for path in net.trainable_paths() {
            let v = bound.get(path).unwrap();
            let grad = g.grad(v).map(|t| t.into_values()).unwrap_or_else(|| vec![0.0; net.get(path).unwrap().numel()]);
            grads.push((path.to_string(), grad));
        }
    }
    (parts.total, grads)
}

fn perturbed(params: &ParamSet, path: &str, j: usize, delta: f64) -> ParamSet {
    let mut p = params.clone();
    p.get_mut(path).unwrap().values_mut()[j] += delta;
    p
}

/// Finite-difference check of the combined loss for every trainable entry of both networks.
///
/// `limit` caps the number of coordinates probed per tensor.
pub fn check_combined<G: Network + Clone, D: Network + Clone>(
    gen: &G,
    disc: &D,
    x: &Tensor,
    labels: &[usize],
    noise: &Tensor,
    b: usize,
    lambdas: (f64, f64),
    limit: usize,
) -> f64 {
    let (_, grads) = combined_loss(gen, disc, x, labels, noise, b, lambdas);
    let mut worst: f64 = 0.0;
    for (path, analytic) in grads {
        let in_gen = gen.params().get(&path).is_some() && gen.params().entry(&path).unwrap().trainable;
        let stride = (analytic.len() / limit).max(1);
        let idx: Vec<usize> = (0..analytic.len()).step_by(stride).take(limit).collect();
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &j in &idx {
            let eval = |delta: f64| {
                if in_gen {
                    let mut g2 = gen.clone();
                    *g2.params_mut() = perturbed(gen.params(), &path, j, delta);
                    combined_loss(&g2, disc, x, labels, noise, b, lambdas).0
                } else {
                    let mut d2 = disc.clone();
                    *d2.params_mut() = perturbed(disc.params(), &path, j, delta);
                    combined_loss(gen, &d2, x, labels, noise, b, lambdas).0
                }
            };
            a.push(analytic[j]);
            n.push((eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP));
        }
        worst = worst.max(relative_error(&a, &n));
    }
    worst
}

/// End-to-end cases: the MNIST pair and the small color pair, each under the finetuned regime.
pub fn combined_cases() -> Vec<GradCase> {
    let mut r = rng(5);
    let mut cases = Vec::new();

    let mut gen = build_mnist_generator();
    // Move off the all-zero start so every weight sees a distinct gradient.
    for (_, e) in gen.params_mut().iter_mut() {
        e.tensor = uniform(&mut r, e.tensor.shape(), -0.5, 0.5);
    }
    let mut disc = build_lenet5_caffe(&mut r);
    disc.apply_regime(Regime::Finetuned);
    let x = uniform(&mut r, &[2, 1, 28, 28], 0.0, 1.0);
    let noise = uniform_noise(&mut r, &[2, 1, 28, 28]);
    cases.push(GradCase {
        name: "combined_loss_mnist",
        error: check_combined(&gen, &disc, &x, &[3, 7], &noise, 7, (0.01, 0.05), 6),
    });

    let gen = build_small_generator(3, &mut r);
    let mut disc = build_small_resnet(3, 4, &mut r);
    disc.apply_regime(Regime::Finetuned);
    let x = uniform(&mut r, &[2, 3, 16, 16], 0.0, 1.0);
    let noise = uniform_noise(&mut r, &[2, 1, 16, 16]);
    cases.push(GradCase {
        name: "combined_loss_small",
        error: check_combined(&gen, &disc, &x, &[1, 2], &noise, 4, (0.01, 0.05), 6),
    });
    cases
}
