//! Scalar loss functionals of the logits, with their logit gradients.

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::Float;

use super::{argmax_excluding, Logits};

/// A differentiable scalar functional of the logits.
///
/// The hinge variants use the one-sided subgradient convention at the clamp
/// kink: when the margin equals exactly -kappa, the clamp branch wins and the
/// gradient is zero. Ties inside the inner max are broken by lowest class
/// index.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    /// The raw logit of one class.
    Logit { class: usize },
    /// max(max_{i != class} z_i - z_class, -kappa): drives `class` to win.
    HingeTargeted { class: usize, kappa: Float },
    /// max(z_class - max_{i != class} z_i, -kappa): drives `class` to lose.
    HingeUntargeted { class: usize, kappa: Float },
    /// Softmax cross-entropy against a label.
    CrossEntropy { label: usize },
}

impl LossSpec {
    fn check_class(&self, z: &Logits, class: usize) -> Result<()> {
        if z.len() < 2 {
            return Err(Error::Config(format!(
                "loss needs at least 2 classes, got {}",
                z.len()
            )));
        }
        if class >= z.len() {
            return Err(Error::Config(format!(
                "class {class} out of range for {} logits",
                z.len()
            )));
        }
        Ok(())
    }

    pub fn value(&self, z: &Logits) -> Result<Float> {
        match *self {
            LossSpec::Logit { class } => {
                self.check_class(z, class)?;
                Ok(z[class])
            }
            LossSpec::HingeTargeted { class, kappa } => {
                self.check_class(z, class)?;
                let (_, other) = argmax_excluding(z, class);
                Ok((other - z[class]).max(-kappa))
            }
            LossSpec::HingeUntargeted { class, kappa } => {
                self.check_class(z, class)?;
                let (_, other) = argmax_excluding(z, class);
                Ok((z[class] - other).max(-kappa))
            }
            LossSpec::CrossEntropy { label } => {
                self.check_class(z, label)?;
                Ok(log_sum_exp(z) - z[label])
            }
        }
    }

    pub fn grad(&self, z: &Logits) -> Result<Logits> {
        let mut g = Array1::zeros(z.len());
        match *self {
            LossSpec::Logit { class } => {
                self.check_class(z, class)?;
                g[class] = 1.0;
            }
            LossSpec::HingeTargeted { class, kappa } => {
                self.check_class(z, class)?;
                let (idx, other) = argmax_excluding(z, class);
                if other - z[class] > -kappa {
                    g[idx] = 1.0;
                    g[class] = -1.0;
                }
            }
            LossSpec::HingeUntargeted { class, kappa } => {
                self.check_class(z, class)?;
                let (idx, other) = argmax_excluding(z, class);
                if z[class] - other > -kappa {
                    g[class] = 1.0;
                    g[idx] = -1.0;
                }
            }
            LossSpec::CrossEntropy { label } => {
                self.check_class(z, label)?;
                g = softmax(z);
                g[label] -= 1.0;
            }
        }
        Ok(g)
    }
}

pub(crate) fn log_sum_exp(z: &Logits) -> Float {
    let mx = z.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
    mx + z.iter().map(|&v| (v - mx).exp()).sum::<Float>().ln()
}

pub(crate) fn softmax(z: &Logits) -> Logits {
    let mx = z.iter().cloned().fold(Float::NEG_INFINITY, Float::max);
    let mut out = z.mapv(|v| (v - mx).exp());
    let total = out.sum();
    out.mapv_inplace(|v| v / total);
    out
}
