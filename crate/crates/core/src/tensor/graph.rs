use std::cell::{Ref, RefCell};

use super::kernels::{self, ConvGeom, PoolGeom};
use super::Tensor;
use crate::error::{NiceError, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// NCHW tensor times an N×1×H×W plane broadcast over channels.
    MulChannels(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Crop {
        x: Var,
        rows: (usize, usize),
        cols: (usize, usize),
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations supporting one reverse pass.
///
/// Nodes are recorded in evaluation order, so reverse insertion order is a
/// valid reverse topological order and backward visits each node once.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        #[cfg(debug_assertions)]
        {
            let inputs = op_inputs(&op);
            let inputs_finite = inputs.iter().all(|v| nodes[v.0].value.all_finite());
            debug_assert!(
                inputs.is_empty() || !inputs_finite || value.all_finite(),
                "non-finite output from finite inputs in {op:?}"
            );
        }
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Records a leaf that gradients are not propagated to.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is accumulated by [`Graph::backward`].
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let mut t = self.value(v).clone();
        t.grad = None;
        t
    }

    pub fn item(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(&shape, g.clone()).expect("gradient shape matches value"))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[a.0].value.map(f), nodes[a.0].requires_grad)
        };
        self.push(value, op, rg)
    }

    fn binary(&self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0], &nodes[b.0]);
            if x.value.shape != y.value.shape {
                return Err(NiceError::shape(
                    name,
                    format!("{:?} vs {:?}", x.value.shape, y.value.shape),
                ));
            }
            let values = x.value.values.iter().zip(&y.value.values).map(|(&p, &q)| f(p, q)).collect();
            (
                Tensor::new(&x.value.shape, values)?,
                x.requires_grad || y.requires_grad,
            )
        };
        Ok(self.push(value, op, rg))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Multiplies every channel of an NCHW tensor by a per-image N×1×H×W plane.
    pub fn mul_channels(&self, x: Var, plane: Var) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (xv, mv) = (&nodes[x.0].value, &nodes[plane.0].value);
            let (n, c, h, w) = xv.nchw()?;
            if mv.shape != [n, 1, h, w] {
                return Err(NiceError::shape(
                    "mul_channels",
                    format!("plane {:?} does not match input {:?}", mv.shape, xv.shape),
                ));
            }
            let hw = h * w;
            let mut out = xv.values.clone();
            for i in 0..n {
                let m = &mv.values[i * hw..(i + 1) * hw];
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    out[base..base + hw].iter_mut().zip(m).for_each(|(o, &z)| *o *= z);
                }
            }
            (
                Tensor::new(&xv.shape, out)?,
                nodes[x.0].requires_grad || nodes[plane.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::MulChannels(x, plane), rg))
    }

    pub fn add_scalar(&self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v + s, Op::AddScalar(a))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        self.unary(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Elementwise clamp; the gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    pub fn sum(&self, a: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                Tensor::scalar(nodes[a.0].value.values.iter().sum()),
                nodes[a.0].requires_grad,
            )
        };
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (Tensor::scalar(nodes[a.0].value.mean()), nodes[a.0].requires_grad)
        };
        self.push(value, Op::Mean(a), rg)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].value.clone().reshape(shape)?,
                nodes[a.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Spatial window `rows.0..rows.1` × `cols.0..cols.1` of the last two axes.
    pub fn crop(&self, x: Var, rows: (usize, usize), cols: (usize, usize)) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let r = xv.rank();
            if r < 2 {
                return Err(NiceError::shape("crop", "need at least two axes"));
            }
            let (h, w) = (xv.shape[r - 2], xv.shape[r - 1]);
            if rows.0 >= rows.1 || rows.1 > h || cols.0 >= cols.1 || cols.1 > w {
                return Err(NiceError::shape(
                    "crop",
                    format!("window {rows:?}x{cols:?} outside {h}x{w}"),
                ));
            }
            let planes = xv.numel() / (h * w);
            let (ch, cw) = (rows.1 - rows.0, cols.1 - cols.0);
            let mut out = Vec::with_capacity(planes * ch * cw);
            for p in 0..planes {
                for y in rows.0..rows.1 {
                    let start = (p * h + y) * w;
                    out.extend_from_slice(&xv.values[start + cols.0..start + cols.1]);
                }
            }
            let mut shape = xv.shape.clone();
            shape[r - 2] = ch;
            shape[r - 1] = cw;
            (Tensor::new(&shape, out)?, nodes[x.0].requires_grad)
        };
        Ok(self.push(value, Op::Crop { x, rows, cols }, rg))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (value, geom, rg) = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let geom = ConvGeom::new(&xv.shape, &wv.shape, stride, padding)?;
            let bias = match b {
                Some(b) => {
                    let bv = &nodes[b.0].value;
                    if bv.shape != [geom.cout] {
                        return Err(NiceError::shape(
                            "conv2d",
                            format!("bias {:?} for {} output channels", bv.shape, geom.cout),
                        ));
                    }
                    Some(bv.values.as_slice())
                }
                None => None,
            };
            let out = kernels::conv2d_forward(&xv.values, &wv.values, bias, &geom);
            let rg = nodes[x.0].requires_grad
                || nodes[w.0].requires_grad
                || b.is_some_and(|b| nodes[b.0].requires_grad);
            (Tensor::new(&[geom.n, geom.cout, geom.ho, geom.wo], out)?, geom, rg)
        };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn avgpool2d(&self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (value, geom, rg) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let geom = PoolGeom::new("avgpool2d", &xv.shape, k, stride)?;
            let out = kernels::avgpool_forward(&xv.values, &geom);
            let shape = [xv.shape[0], xv.shape[1], geom.ho, geom.wo];
            (Tensor::new(&shape, out)?, geom, nodes[x.0].requires_grad)
        };
        Ok(self.push(value, Op::AvgPool { x, geom }, rg))
    }

    /// Non-overlapping max pooling with window and stride `k`.
    pub fn maxpool2d(&self, x: Var, k: usize) -> Result<Var> {
        let (value, argmax, rg) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let geom = PoolGeom::new("maxpool2d", &xv.shape, k, k)?;
            if xv.shape[2] % k != 0 || xv.shape[3] % k != 0 {
                return Err(NiceError::shape("maxpool2d", format!("{:?} not divisible by {k}", xv.shape)));
            }
            let (out, argmax) = kernels::maxpool_forward(&xv.values, &geom);
            let shape = [xv.shape[0], xv.shape[1], geom.ho, geom.wo];
            (Tensor::new(&shape, out)?, argmax, nodes[x.0].requires_grad)
        };
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn upsample_nearest(&self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(NiceError::shape("upsample_nearest", "factor must be positive"));
        }
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let (n, c, h, w) = xv.nchw()?;
            let out = kernels::upsample_forward(&xv.values, n * c, h, w, factor);
            (
                Tensor::new(&[n, c, h * factor, w * factor], out)?,
                nodes[x.0].requires_grad,
            )
        };
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    /// Affine map `x·Wᵀ + b` for `x: N×D`, `W: O×D`, `b: O`.
    pub fn dense(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
            let (&[n, d], &[o, wd]) = (&xv.shape[..], &wv.shape[..]) else {
                return Err(NiceError::shape(
                    "dense",
                    format!("expected N×D input and O×D weight, got {:?} and {:?}", xv.shape, wv.shape),
                ));
            };
            if d != wd {
                return Err(NiceError::shape("dense", format!("input width {d} vs weight width {wd}")));
            }
            let bias = match b {
                Some(b) => {
                    let bv = &nodes[b.0].value;
                    if bv.shape != [o] {
                        return Err(NiceError::shape("dense", format!("bias {:?} for {o} outputs", bv.shape)));
                    }
                    Some(bv.values.as_slice())
                }
                None => None,
            };
            let out = kernels::dense_forward(&xv.values, &wv.values, bias, n, d, o);
            let rg = nodes[x.0].requires_grad
                || nodes[w.0].requires_grad
                || b.is_some_and(|b| nodes[b.0].requires_grad);
            (Tensor::new(&[n, o], out)?, rg)
        };
        Ok(self.push(value, Op::Dense { x, w, b }, rg))
    }

    /// Mean negative log-softmax of the true class over the batch.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (value, probs, rg) = {
            let nodes = self.nodes.borrow();
            let lv = &nodes[logits.0].value;
            let [n, c] = lv.shape[..] else {
                return Err(NiceError::shape("softmax_cross_entropy", format!("logits must be N×C, got {:?}", lv.shape)));
            };
            if labels.len() != n {
                return Err(NiceError::shape(
                    "softmax_cross_entropy",
                    format!("{} labels for {n} rows", labels.len()),
                ));
            }
            let mut probs = vec![0.0; n * c];
            let mut loss = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= c {
                    return Err(NiceError::LabelOutOfRange { label, classes: c });
                }
                let row = &lv.values[i * c..(i + 1) * c];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_denom = denom.ln();
                for (p, &v) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *p = (v - max).exp() / denom;
                }
                loss -= row[label] - max - log_denom;
            }
            (Tensor::scalar(loss / n as f64), probs, nodes[logits.0].requires_grad)
        };
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a single-element `root`, replacing any earlier gradients.
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.numel() != 1 {
            return Err(NiceError::shape(
                "backward",
                format!("root must be a scalar, got {:?}", nodes[root.0].value.shape),
            ));
        }
        let mut grads = self.grads.borrow_mut();
        grads.clear();
        grads.resize(nodes.len(), None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            propagate(&nodes, node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[cfg(debug_assertions)]
fn op_inputs(op: &Op) -> Vec<Var> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MulChannels(a, b) => vec![a, b],
        Op::AddScalar(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Abs(a)
        | Op::Clamp(a, _, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a) => vec![a],
        Op::Crop { x, .. } | Op::AvgPool { x, .. } | Op::MaxPool { x, .. } | Op::Upsample { x, .. } => vec![x],
        Op::Conv2d { x, w, b, .. } | Op::Dense { x, w, b } => {
            let mut v = vec![x, w];
            v.extend(b);
            v
        }
        Op::SoftmaxCrossEntropy { logits, .. } => vec![logits],
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, g: impl FnOnce() -> Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let g = g();
    match grads[v.0].as_mut() {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => grads[v.0] = Some(g),
    }
}

fn propagate(nodes: &[Node], node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    let wants = |v: Var| nodes[v.0].requires_grad;
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, a, || dy.to_vec());
            accumulate(nodes, grads, b, || dy.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, a, || dy.to_vec());
            accumulate(nodes, grads, b, || dy.iter().map(|d| -d).collect());
        }
        Op::Mul(a, b) => {
            accumulate(nodes, grads, a, || zip_with(dy, &val(b).values, |d, q| d * q));
            accumulate(nodes, grads, b, || zip_with(dy, &val(a).values, |d, p| d * p));
        }
        Op::MulChannels(x, plane) => {
            let (n, c, h, w) = val(x).nchw().expect("checked in forward");
            let hw = h * w;
            let (xv, mv) = (&val(x).values, &val(plane).values);
            accumulate(nodes, grads, x, || {
                let mut dx = dy.to_vec();
                for i in 0..n {
                    let m = &mv[i * hw..(i + 1) * hw];
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        dx[base..base + hw].iter_mut().zip(m).for_each(|(d, &z)| *d *= z);
                    }
                }
                dx
            });
            accumulate(nodes, grads, plane, || {
                let mut dm = vec![0.0; n * hw];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for p in 0..hw {
                            dm[i * hw + p] += dy[base + p] * xv[base + p];
                        }
                    }
                }
                dm
            });
        }
        Op::AddScalar(a) | Op::Reshape(a) => accumulate(nodes, grads, a, || dy.to_vec()),
        Op::Scale(a, s) => accumulate(nodes, grads, a, || dy.iter().map(|d| d * s).collect()),
        Op::Relu(a) => accumulate(nodes, grads, a, || {
            zip_with(dy, &val(a).values, |d, x| if x > 0.0 { d } else { 0.0 })
        }),
        Op::Sigmoid(a) => accumulate(nodes, grads, a, || {
            zip_with(dy, &node.value.values, |d, y| d * y * (1.0 - y))
        }),
        Op::Abs(a) => accumulate(nodes, grads, a, || {
            zip_with(dy, &val(a).values, |d, x| {
                if x > 0.0 {
                    d
                } else if x < 0.0 {
                    -d
                } else {
                    0.0
                }
            })
        }),
        Op::Clamp(a, lo, hi) => accumulate(nodes, grads, a, || {
            zip_with(dy, &val(a).values, |d, x| if x > lo && x < hi { d } else { 0.0 })
        }),
        Op::Sum(a) => accumulate(nodes, grads, a, || vec![dy[0]; val(a).numel()]),
        Op::Mean(a) => {
            let n = val(a).numel();
            accumulate(nodes, grads, a, || vec![dy[0] / n as f64; n])
        }
        Op::Crop { x, rows, cols } => accumulate(nodes, grads, x, || {
            let xv = val(x);
            let r = xv.rank();
            let (h, w) = (xv.shape[r - 2], xv.shape[r - 1]);
            let planes = xv.numel() / (h * w);
            let cw = cols.1 - cols.0;
            let mut dx = vec![0.0; xv.numel()];
            let mut src = dy.chunks(cw);
            for p in 0..planes {
                for y in rows.0..rows.1 {
                    let start = (p * h + y) * w + cols.0;
                    dx[start..start + cw].copy_from_slice(src.next().expect("crop gradient length"));
                }
            }
            dx
        }),
        Op::Conv2d { x, w, b, geom } => {
            let need = (wants(x), wants(w), b.is_some_and(wants));
            let g = kernels::conv2d_backward(&val(x).values, &val(w).values, dy, &geom, need);
            if let Some(dx) = g.input {
                accumulate(nodes, grads, x, || dx);
            }
            if let Some(dw) = g.weight {
                accumulate(nodes, grads, w, || dw);
            }
            if let (Some(b), Some(db)) = (b, g.bias) {
                accumulate(nodes, grads, b, || db);
            }
        }
        Op::AvgPool { x, geom } => accumulate(nodes, grads, x, || kernels::avgpool_backward(dy, &geom)),
        Op::MaxPool { x, ref argmax } => accumulate(nodes, grads, x, || {
            let mut dx = vec![0.0; val(x).numel()];
            for (d, &idx) in dy.iter().zip(argmax) {
                dx[idx] += d;
            }
            dx
        }),
        Op::Upsample { x, factor } => accumulate(nodes, grads, x, || {
            let (n, c, h, w) = val(x).nchw().expect("checked in forward");
            kernels::upsample_backward(dy, n * c, h, w, factor)
        }),
        Op::Dense { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (n, d, o) = (xv.shape[0], xv.shape[1], wv.shape[0]);
            accumulate(nodes, grads, x, || {
                let mut dx = vec![0.0; n * d];
                kernels::gemm(n, o, d, dy, (o, 1), &wv.values, (d, 1), 0.0, &mut dx, (d, 1));
                dx
            });
            accumulate(nodes, grads, w, || {
                let mut dw = vec![0.0; o * d];
                kernels::gemm(o, n, d, dy, (1, o), &xv.values, (d, 1), 0.0, &mut dw, (d, 1));
                dw
            });
            if let Some(b) = b {
                accumulate(nodes, grads, b, || {
                    let mut db = vec![0.0; o];
                    for row in dy.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    db
                });
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            ref labels,
            ref probs,
        } => accumulate(nodes, grads, logits, || {
            let n = labels.len();
            let c = probs.len() / n;
            let scale = dy[0] / n as f64;
            let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &l) in labels.iter().enumerate() {
                g[i * c + l] -= scale;
            }
            g
        }),
    }
}

fn zip_with(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_scaling_identity() {
        let g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 3, 3]);
        assert!(g.value(y).values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_sum_reduction() {
        let g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = g.constant(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y).values(), &[10.0]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
        assert!(err.to_string().contains("channels"), "{err}");
    }

    #[test]
    fn pooling_examples() {
        let g = Graph::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[0.0, 2.0, 4.0, 6.0]));
        let a = g.avgpool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(a).values(), &[3.0]);
        let m = g.maxpool2d(x, 2).unwrap();
        assert_eq!(g.value(m).values(), &[6.0]);

        let c = g.constant(Tensor::full(&[1, 2, 4, 4], 0.7));
        let pooled = g.avgpool2d(c, 2, 2).unwrap();
        assert!(g.value(pooled).values().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        assert!(g.avgpool2d(c, 3, 3).is_err());
        assert!(g.maxpool2d(c, 3).is_err());
    }

    #[test]
    fn maxpool_tie_goes_to_first_index() {
        let g = Graph::new();
        let x = g.leaf(Tensor::full(&[1, 1, 2, 2], 5.0));
        let m = g.maxpool2d(x, 2).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().values(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_then_pool_is_identity_on_block_constant() {
        let g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let up = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(
            g.value(up).values(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let down = g.avgpool2d(up, 2, 2).unwrap();
        assert_eq!(g.value(down).values(), g.value(x).values());
        let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
        let up1 = g.upsample_nearest(one, 2).unwrap();
        assert_eq!(g.value(up1).values(), &[1.0; 4]);
    }

    #[test]
    fn sigmoid_and_clamp_values() {
        let g = Graph::new();
        let x = g.leaf(t(&[3], &[0.0, 1.5, 0.5]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).values()[0], 0.5);
        let c = g.clamp(x, 0.0, 1.0);
        assert_eq!(g.value(c).values(), &[0.0, 1.0, 0.5]);
        let total = g.sum(c);
        g.backward(total).unwrap();
        // Saturated at both ends, interior passes.
        assert_eq!(g.grad(x).unwrap().values(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn abs_subgradient_is_zero_at_kink() {
        let g = Graph::new();
        let x = g.leaf(t(&[3], &[-2.0, 0.0, 3.0]));
        let a = g.abs(x);
        let s = g.sum(a);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().values(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let g = Graph::new();
        let l = g.leaf(Tensor::full(&[2, 10], 0.3));
        let ce = g.softmax_cross_entropy(l, &[3, 7]).unwrap();
        assert!((g.item(ce) - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(
            g.softmax_cross_entropy(l, &[3, 10]),
            Err(NiceError::LabelOutOfRange { label: 10, classes: 10 })
        ));
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let g = Graph::new();
            let l = g.constant(t(&[1, 3], &[margin, 0.0, 0.0]));
            let ce = g.item(g.softmax_cross_entropy(l, &[0]).unwrap());
            assert!(ce < prev && ce >= 0.0);
            prev = ce;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let p = g.mul(x, c).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().values(), &[3.0, 4.0]);
        assert!(g.grad(c).is_none());
    }
}
