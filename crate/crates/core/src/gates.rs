//! Hard-concrete stochastic binary gates.
//!
//! A gate field holds one location parameter `log α` per pixel. During
//! training a gate is drawn by stretching a binary-concrete sample to
//! `(γ, ζ)` and clamping to `[0, 1]`, which gives exact zeros and ones while
//! staying differentiable in `log α` through the reparameterized noise. At
//! test time the deterministic estimator replaces the noise by its median.

use rand::Rng;

use crate::error::{NiceError, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Margin keeping uniform noise away from the `ln 0` poles.
pub const NOISE_EPS: f64 = 1e-7;

/// Temperature and stretch interval of the hard-concrete distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HardConcreteConfig {
    pub beta: f64,
    pub gamma: f64,
    pub zeta: f64,
}

impl Default for HardConcreteConfig {
    fn default() -> Self {
        Self {
            beta: 2.0 / 3.0,
            gamma: -0.1,
            zeta: 1.1,
        }
    }
}

impl HardConcreteConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta > 0.0 && self.beta < 1.0 && self.gamma < 0.0 && self.zeta > 1.0;
        if ok && self.beta.is_finite() && self.gamma.is_finite() && self.zeta.is_finite() {
            Ok(())
        } else {
            Err(NiceError::InvalidArgument(format!(
                "hard-concrete config needs 0 < beta < 1, gamma < 0, zeta > 1; got {self:?}"
            )))
        }
    }

    /// Shift `-β ln(-γ/ζ)` applied to `log α` by the nonzero-probability formula.
    pub fn l0_shift(&self) -> f64 {
        -self.beta * (-self.gamma / self.zeta).ln()
    }
}

/// Batch of per-pixel gate parameters, shaped `N×1×H×W`.
///
/// One plane per image; it is broadcast over color channels wherever it
/// multiplies an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateField {
    log_alpha: Var,
}

impl GateField {
    pub fn new(g: &Graph, log_alpha: Var) -> Result<Self> {
        let shape = g.shape(log_alpha);
        if shape.len() != 4 || shape[1] != 1 {
            return Err(NiceError::shape("gate_field", format!("expected N×1×H×W, got {shape:?}")));
        }
        if !g.value(log_alpha).all_finite() {
            return Err(NiceError::InvalidArgument("gate field has non-finite log alpha".into()));
        }
        Ok(Self { log_alpha })
    }

    /// Records a fixed tensor of `log α` values as a differentiable leaf.
    pub fn from_tensor(g: &Graph, log_alpha: Tensor) -> Result<Self> {
        let v = g.leaf(log_alpha);
        Self::new(g, v)
    }

    pub fn log_alpha(&self) -> Var {
        self.log_alpha
    }
}

/// Uniform noise in `(ε, 1-ε)`, one draw per element.
pub fn uniform_noise(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| NOISE_EPS + (1.0 - 2.0 * NOISE_EPS) * rng.random::<f64>())
}

/// Reparameterized gate sample `clamp(σ((ln u − ln(1−u) + log α)/β)(ζ−γ)+γ, 0, 1)`.
pub fn sample_gate(g: &Graph, field: GateField, cfg: &HardConcreteConfig, noise: &Tensor) -> Result<Var> {
    cfg.validate()?;
    let shape = g.shape(field.log_alpha);
    if noise.shape() != shape.as_slice() {
        return Err(NiceError::shape(
            "sample_gate",
            format!("noise {:?} vs gate field {shape:?}", noise.shape()),
        ));
    }
    if let Some(bad) = noise.values().iter().find(|&&u| !(u > 0.0 && u < 1.0)) {
        return Err(NiceError::InvalidArgument(format!(
            "gate noise must lie strictly inside (0, 1), got {bad}"
        )));
    }
    let logistic = g.constant(noise.map(|u| u.ln() - (1.0 - u).ln()));
    let pre = g.add(field.log_alpha, logistic)?;
    stretch_and_clamp(g, g.scale(pre, 1.0 / cfg.beta), cfg)
}

/// Probability that a gate is nonzero, `σ(log α − β ln(−γ/ζ))`; also used as the gate expectation.
pub fn expected_gate(g: &Graph, field: GateField, cfg: &HardConcreteConfig) -> Result<Var> {
    cfg.validate()?;
    Ok(g.sigmoid(g.add_scalar(field.log_alpha, cfg.l0_shift())))
}

/// Test-time estimator `clamp(σ(log α/β)(ζ−γ)+γ, 0, 1)`.
pub fn deterministic_gate(g: &Graph, field: GateField, cfg: &HardConcreteConfig) -> Result<Var> {
    cfg.validate()?;
    stretch_and_clamp(g, g.scale(field.log_alpha, 1.0 / cfg.beta), cfg)
}

/// Expected number of nonzero gates per image, summed over all pixels and the batch.
pub fn expected_l0(g: &Graph, field: GateField, cfg: &HardConcreteConfig) -> Result<Var> {
    let y = expected_gate(g, field, cfg)?;
    Ok(g.sum(y))
}

fn stretch_and_clamp(g: &Graph, logits: Var, cfg: &HardConcreteConfig) -> Result<Var> {
    let s = g.sigmoid(logits);
    let stretched = g.add_scalar(g.scale(s, cfg.zeta - cfg.gamma), cfg.gamma);
    Ok(g.clamp(stretched, 0.0, 1.0))
}

/// Test-time masks for a fixed tensor of `log α`, outside any training graph.
pub fn deterministic_gate_tensor(log_alpha: &Tensor, cfg: &HardConcreteConfig) -> Result<Tensor> {
    let g = Graph::new();
    let field = GateField::new(&g, g.constant(log_alpha.clone()))?;
    let z = deterministic_gate(&g, field, cfg)?;
    Ok(g.tensor(z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn field(g: &Graph, v: &[f64]) -> GateField {
        GateField::from_tensor(g, Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap()).unwrap()
    }

    fn noise(v: &[f64]) -> Tensor {
        Tensor::new(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn defaults_are_valid() {
        let c = HardConcreteConfig::default();
        c.validate().unwrap();
        assert!(c.gamma < 0.0 && c.zeta > 1.0);
        let bad = HardConcreteConfig { gamma: 0.1, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn median_noise_gives_half() {
        let g = Graph::new();
        let f = field(&g, &[0.0]);
        let z = sample_gate(&g, f, &HardConcreteConfig::default(), &noise(&[0.5])).unwrap();
        assert!((g.item(z) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn very_negative_log_alpha_closes_gate() {
        let g = Graph::new();
        let us = [0.011, 0.2, 0.5, 0.8, 0.989];
        let f = field(&g, &[-50.0; 5]);
        let z = sample_gate(&g, f, &HardConcreteConfig::default(), &noise(&us)).unwrap();
        assert!(g.value(z).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_noise_is_rejected() {
        let g = Graph::new();
        let f = field(&g, &[0.0, 0.0]);
        let cfg = HardConcreteConfig::default();
        assert!(sample_gate(&g, f, &cfg, &noise(&[0.0, 0.5])).is_err());
        assert!(sample_gate(&g, f, &cfg, &noise(&[0.5, 1.0])).is_err());
        assert!(sample_gate(&g, f, &cfg, &noise(&[0.5])).is_err());
    }

    #[test]
    fn deterministic_gate_examples() {
        let g = Graph::new();
        let f = field(&g, &[0.0, 10.0, -10.0]);
        let z = deterministic_gate(&g, f, &HardConcreteConfig::default()).unwrap();
        let v = g.value(z);
        assert!((v.values()[0] - 0.5).abs() < 1e-15);
        assert_eq!(v.values()[1], 1.0);
        assert_eq!(v.values()[2], 0.0);
    }

    #[test]
    fn expected_gate_limits_and_monotonicity() {
        let g = Graph::new();
        let f = field(&g, &[-60.0, -1.0, 0.0, 1.0, 60.0]);
        let y = g.tensor(expected_gate(&g, f, &HardConcreteConfig::default()).unwrap());
        let v = y.values();
        assert!(v[0] < 1e-20 && (1.0 - v[4]) < 1e-15);
        assert!(v.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn expected_l0_is_sum_of_expected_gates() {
        let g = Graph::new();
        let f = field(&g, &[-1.5, 0.25, 2.0, 0.0]);
        let cfg = HardConcreteConfig::default();
        let y = g.tensor(expected_gate(&g, f, &cfg).unwrap());
        let l0 = g.item(expected_l0(&g, f, &cfg).unwrap());
        assert_eq!(l0, y.values().iter().sum::<f64>());
    }

    #[test]
    fn samples_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Graph::new();
        let la = Tensor::from_fn(&[2, 1, 8, 8], |i| (i as f64 - 64.0) * 0.2);
        let f = GateField::from_tensor(&g, la).unwrap();
        let u = uniform_noise(&mut rng, &[2, 1, 8, 8]);
        assert!(u.values().iter().all(|&x| x > 0.0 && x < 1.0));
        let z = g.tensor(sample_gate(&g, f, &HardConcreteConfig::default(), &u).unwrap());
        assert!(z.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn field_shape_is_checked() {
        let g = Graph::new();
        assert!(GateField::from_tensor(&g, Tensor::zeros(&[1, 2, 3, 3])).is_err());
        assert!(GateField::from_tensor(&g, Tensor::zeros(&[3, 3])).is_err());
        assert!(GateField::from_tensor(&g, Tensor::full(&[1, 1, 1, 1], f64::NAN)).is_err());
    }
}
