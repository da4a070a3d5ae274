//! Loss terms for mask training and their weighted combination.

use crate::error::{NiceError, Result};
use crate::gates::{expected_gate, expected_l0, GateField, HardConcreteConfig};
use crate::models::Network;
use crate::tensor::{BoundParams, Graph, Tensor, Var};

/// Forward values of one evaluation of the combined loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub data: f64,
    pub capacity: f64,
    pub smoothness: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Builds the classifier input from images and an `N×1×H×W` gate plane.
///
/// Without a background this is the plain product `x ⊙ z`; with one it is the
/// blend `x ⊙ z + x_b ⊙ (1 − z)`, computed as `x_b + (x − x_b) ⊙ z`.
pub fn masked_input(g: &Graph, images: &Tensor, background: Option<&Tensor>, gates: Var) -> Result<Var> {
    let (n, _, h, w) = images.nchw()?;
    let gshape = g.shape(gates);
    if gshape != [n, 1, h, w] {
        return Err(NiceError::shape(
            "masked_input",
            format!("gates {gshape:?} do not match images {:?}", images.shape()),
        ));
    }
    match background {
        None => {
            let x = g.constant(images.clone());
            g.mul_channels(x, gates)
        }
        Some(bg) => {
            if bg.shape() != images.shape() {
                return Err(NiceError::shape(
                    "masked_input",
                    format!("background {:?} vs images {:?}", bg.shape(), images.shape()),
                ));
            }
            let diff = Tensor::new(
                images.shape(),
                images.values().iter().zip(bg.values()).map(|(x, b)| x - b).collect(),
            )?;
            let fg = g.mul_channels(g.constant(diff), gates)?;
            g.add(g.constant(bg.clone()), fg)
        }
    }
}

/// Cross-entropy of the classifier on gated images.
#[allow(clippy::too_many_arguments)]
pub fn data_loss(
    g: &Graph,
    disc: &dyn Network,
    disc_params: &BoundParams,
    images: &Tensor,
    background: Option<&Tensor>,
    gates: Var,
    labels: &[usize],
) -> Result<Var> {
    let input = masked_input(g, images, background, gates)?;
    let logits = disc.forward(g, disc_params, input)?;
    g.softmax_cross_entropy(logits, labels)
}

/// Batch mean of the expected number of open gates.
pub fn capacity_loss(g: &Graph, field: GateField, cfg: &HardConcreteConfig) -> Result<Var> {
    let n = g.shape(field.log_alpha())[0];
    let total = expected_l0(g, field, cfg)?;
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Batch mean of the four-neighbor absolute-difference sum over expected gates.
pub fn smoothness_loss(g: &Graph, field: GateField, cfg: &HardConcreteConfig) -> Result<Var> {
    let y = expected_gate(g, field, cfg)?;
    smoothness_of(g, y)
}

/// Four-neighbor penalty on an `N×1×H×W` field `y`.
///
/// Each pixel `(m, n)` is compared with its up, left, up-left and up-right
/// neighbors; pairs that fall outside the image are skipped.
pub fn smoothness_of(g: &Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y);
    let [n, 1, h, w] = shape[..] else {
        return Err(NiceError::shape("smoothness", format!("expected N×1×H×W, got {shape:?}")));
    };
    // (rows, cols) of the pixel window and of its neighbor window.
    let mut pairs = Vec::new();
    if h > 1 {
        pairs.push(((1, h), (0, w), (0, h - 1), (0, w)));
    }
    if w > 1 {
        pairs.push(((0, h), (1, w), (0, h), (0, w - 1)));
    }
    if h > 1 && w > 1 {
        pairs.push(((1, h), (1, w), (0, h - 1), (0, w - 1)));
        pairs.push(((1, h), (0, w - 1), (0, h - 1), (1, w)));
    }
    let mut total: Option<Var> = None;
    for (pr, pc, nr, nc) in pairs {
        let a = g.crop(y, pr, pc)?;
        let b = g.crop(y, nr, nc)?;
        let term = g.sum(g.abs(g.sub(a, b)?));
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let total = total.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
    Ok(g.scale(total, 1.0 / n as f64))
}

/// `data + λ1·capacity + λ2·smoothness`, with the forward values.
pub fn total_loss(
    g: &Graph,
    data: Var,
    capacity: Var,
    smoothness: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(lambda1 >= 0.0 && lambda2 >= 0.0) {
        return Err(NiceError::InvalidArgument(format!(
            "loss weights must be nonnegative, got {lambda1} and {lambda2}"
        )));
    }
    let with_cap = g.add(data, g.scale(capacity, lambda1))?;
    let total = g.add(with_cap, g.scale(smoothness, lambda2))?;
    let breakdown = LossBreakdown {
        data: g.item(data),
        capacity: g.item(capacity),
        smoothness: g.item(smoothness),
        total: g.item(total),
        lambda1,
        lambda2,
    };
    Ok((total, breakdown))
}
