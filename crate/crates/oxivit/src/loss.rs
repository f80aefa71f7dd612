//! Supervision signals: sigmoid BCE over one-hot class targets, MSE over
//! saturation values, their lambda-weighted joint combination, and the
//! prior-adjusted Bal-BCE variant.
//!
//! Classification uses per-class sigmoid BCE rather than softmax
//! cross-entropy. Value targets are regressed as fractions (percent / 100)
//! so the MSE term stays small enough for a near-one lambda to keep
//! classification dominant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Which classification loss feeds the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Bce,
    BalBce,
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossVariant::Bce => write!(f, "bce"),
            LossVariant::BalBce => write!(f, "bal_bce"),
        }
    }
}

/// Joint objective: `lambda * L_cls + (1 - lambda) * L_mse`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointLossConfig {
    /// Weight of the classification term, in [0, 1].
    pub lambda: f64,
    pub variant: LossVariant,
    /// Per-class training counts; required iff `variant == BalBce`.
    #[serde(default)]
    pub class_counts: Option<Vec<usize>>,
}

impl Default for JointLossConfig {
    fn default() -> Self {
        JointLossConfig {
            lambda: 0.99,
            variant: LossVariant::Bce,
            class_counts: None,
        }
    }
}

impl JointLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !self.lambda.is_finite() {
            return Err(Error::config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.variant == LossVariant::BalBce {
            match &self.class_counts {
                None => {
                    return Err(Error::config(
                        "bal_bce requires class_counts".to_string(),
                    ))
                }
                Some(counts) => {
                    if counts.iter().any(|&c| c == 0) {
                        return Err(Error::config(format!(
                            "bal_bce requires strictly positive class counts, got {counts:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// One-hot class target for sigmoid BCE.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTarget {
    one_hot: Vec<f64>,
}

impl ClassTarget {
    pub fn from_class(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::contract(format!(
                "class {class} out of range for {num_classes} classes"
            )));
        }
        let mut one_hot = vec![0.0; num_classes];
        one_hot[class] = 1.0;
        Ok(ClassTarget { one_hot })
    }

    pub fn one_hot(&self) -> &[f64] {
        &self.one_hot
    }

    pub fn class(&self) -> usize {
        self.one_hot
            .iter()
            .position(|&v| v == 1.0)
            .expect("one-hot has a hot entry")
    }
}

/// Regression target: SaO2 percent divided by 100.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueTarget {
    sao2_fraction: f64,
}

impl ValueTarget {
    pub fn from_percent(percent: f64) -> Result<Self> {
        if !(percent > 0.0 && percent <= 100.0) {
            return Err(Error::Domain(format!(
                "sao2 percent must lie in (0, 100], got {percent}"
            )));
        }
        Ok(ValueTarget {
            sao2_fraction: percent / 100.0,
        })
    }

    pub fn fraction(&self) -> f64 {
        self.sao2_fraction
    }
}

fn targets_tensor(targets: &[ClassTarget], num_classes: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(targets.len() * num_classes);
    for t in targets {
        if t.one_hot.len() != num_classes {
            return Err(Error::dim(format!(
                "target with {} classes fed to {num_classes}-class logits",
                t.one_hot.len()
            )));
        }
        data.extend_from_slice(&t.one_hot);
    }
    Tensor::new(vec![targets.len(), num_classes], data)
}

/// Mean over batch x classes of the stable elementwise BCE on logits.
pub fn bce_loss(g: &mut Graph, class_logits: Var, targets: &[ClassTarget]) -> Result<Var> {
    let shape = g.value(class_logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::dim(format!(
            "bce_loss: logits {shape:?} vs {} targets",
            targets.len()
        )));
    }
    let y = g.constant(targets_tensor(targets, shape[1])?);
    let elems = g.bce_with_logits(class_logits, y)?;
    Ok(g.mean_all(elems))
}

/// BCE on prior-adjusted logits `z'_j = z_j + log(pi_j) - log(1 - pi_j)`
/// with `pi_j = n_j / sum(n)`. The adjustment depends only on count ratios.
pub fn bal_bce_loss(
    g: &mut Graph,
    class_logits: Var,
    targets: &[ClassTarget],
    class_counts: &[usize],
) -> Result<Var> {
    let shape = g.value(class_logits).shape().to_vec();
    if shape.len() != 2 || shape[1] != class_counts.len() {
        return Err(Error::dim(format!(
            "bal_bce_loss: logits {shape:?} vs {} class counts",
            class_counts.len()
        )));
    }
    if class_counts.iter().any(|&c| c == 0) {
        return Err(Error::config(format!(
            "bal_bce requires strictly positive class counts, got {class_counts:?}"
        )));
    }
    let total: usize = class_counts.iter().sum();
    let adjust: Vec<f64> = class_counts
        .iter()
        .map(|&n| {
            let pi = n as f64 / total as f64;
            pi.ln() - (1.0 - pi).ln()
        })
        .collect();
    // a uniform two-class prior yields a zero shift; skip the add so the
    // result is bitwise identical to plain BCE
    let adjusted = if adjust.iter().all(|&a| a == 0.0) {
        class_logits
    } else {
        let adj = g.constant(Tensor::from_vec(adjust));
        g.add_bias(class_logits, adj)?
    };
    bce_loss(g, adjusted, targets)
}

/// Mean over the batch of squared prediction error on the value head.
pub fn mse_loss(g: &mut Graph, value_pred: Var, targets: &[ValueTarget]) -> Result<Var> {
    let n = g.value(value_pred).numel();
    if n != targets.len() || g.value(value_pred).rank() != 1 {
        return Err(Error::dim(format!(
            "mse_loss: predictions {:?} vs {} targets",
            g.value(value_pred).shape(),
            targets.len()
        )));
    }
    let y = g.constant(Tensor::from_vec(
        targets.iter().map(|t| t.sao2_fraction).collect(),
    ));
    let diff = g.sub(value_pred, y)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean_all(sq))
}

/// The three scalar nodes of the joint objective. At the lambda endpoints
/// `joint` aliases the surviving term so endpoint losses and gradients are
/// exact, not merely close.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub joint: Var,
    pub classification: Var,
    pub mse: Var,
}

/// `lambda * classification + (1 - lambda) * mse` per the configured variant.
pub fn joint_loss(
    g: &mut Graph,
    class_logits: Var,
    value_pred: Var,
    cls_targets: &[ClassTarget],
    val_targets: &[ValueTarget],
    cfg: &JointLossConfig,
) -> Result<LossNodes> {
    cfg.validate()?;
    let classification = match cfg.variant {
        LossVariant::Bce => bce_loss(g, class_logits, cls_targets)?,
        LossVariant::BalBce => bal_bce_loss(
            g,
            class_logits,
            cls_targets,
            cfg.class_counts.as_ref().expect("validated"),
        )?,
    };
    let mse = mse_loss(g, value_pred, val_targets)?;
    let joint = if cfg.lambda == 1.0 {
        classification
    } else if cfg.lambda == 0.0 {
        mse
    } else {
        let a = g.scale(classification, cfg.lambda);
        let b = g.scale(mse, 1.0 - cfg.lambda);
        g.add(a, b)?
    };
    Ok(LossNodes {
        joint,
        classification,
        mse,
    })
}
