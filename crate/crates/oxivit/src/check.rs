//! Full-model gradient verification: every parameter's tape gradient through
//! the joint loss is compared against central finite differences on a micro
//! model, per lambda.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::stack_images;
use crate::error::Result;
use crate::loss::{joint_loss, ClassTarget, JointLossConfig, ValueTarget};
use crate::tensor::{max_rel_error, Graph, Tensor};
use crate::vit::{bind, forward_on_graph, ViTConfig, ViTParams};

/// The micro architecture used for exhaustive finite differencing.
pub fn micro_config() -> ViTConfig {
    ViTConfig {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        dropout: 0.0,
    }
}

#[derive(Debug, Clone)]
pub struct ModelGradReport {
    pub lambda: f64,
    pub max_rel_err: f64,
    pub worst_tensor: String,
    /// largest absolute gradient entry in the value head (weight + bias)
    pub value_head_grad_max: f64,
    /// largest absolute gradient entry in the class head (weight + bias)
    pub class_head_grad_max: f64,
    pub param_count: usize,
}

fn model_loss(params: &ViTParams, batch: &Tensor, cls: &[ClassTarget], val: &[ValueTarget], lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params);
    let (logits, values) = forward_on_graph(&mut g, &bound, &params.config, batch, false, None)?;
    let cfg = JointLossConfig {
        lambda,
        ..JointLossConfig::default()
    };
    let nodes = joint_loss(&mut g, logits, values, cls, val, &cfg)?;
    g.value(nodes.joint).scalar_value()
}

/// Checks every parameter gradient of the micro model against central finite
/// differences at one lambda.
pub fn model_grad_check(lambda: f64, eps: f64, seed: u64) -> Result<ModelGradReport> {
    let config = micro_config();
    let params = ViTParams::init(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let batch_images: Vec<Tensor> = (0..2)
        .map(|_| {
            let n = config.image_size * config.image_size;
            Tensor::new(
                vec![config.image_size, config.image_size, 1],
                (0..n).map(|_| rng.random::<f64>()).collect(),
            )
            .expect("shape matches")
        })
        .collect();
    let batch = stack_images(&batch_images)?;
    let cls = vec![
        ClassTarget::from_class(0, 3)?,
        ClassTarget::from_class(2, 3)?,
    ];
    let val = vec![
        ValueTarget::from_percent(91.0)?,
        ValueTarget::from_percent(97.5)?,
    ];

    // analytic gradients along the tape
    let mut g = Graph::new();
    let bound = bind(&mut g, &params);
    let (logits, values) = forward_on_graph(&mut g, &bound, &config, &batch, false, None)?;
    let loss_cfg = JointLossConfig {
        lambda,
        ..JointLossConfig::default()
    };
    let nodes = joint_loss(&mut g, logits, values, &cls, &val, &loss_cfg)?;
    g.backward(nodes.joint)?;
    let names: Vec<String> = bound.named_vars().iter().map(|(n, _)| n.clone()).collect();
    let analytic: Vec<Tensor> = bound
        .named_vars()
        .iter()
        .map(|&(_, v)| g.grad_or_zeros(v))
        .collect();

    // numeric gradients by perturbing each coordinate of each tensor
    let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut numeric = Vec::with_capacity(sizes.len());
    for (ti, &size) in sizes.iter().enumerate() {
        let mut grad = Tensor::zeros(params.named_tensors()[ti].1.shape().to_vec());
        for ci in 0..size {
            let mut plus = params.clone();
            plus.named_tensors_mut()[ti].1.data_mut()[ci] += eps;
            let lp = model_loss(&plus, &batch, &cls, &val, lambda)?;
            let mut minus = params.clone();
            minus.named_tensors_mut()[ti].1.data_mut()[ci] -= eps;
            let lm = model_loss(&minus, &batch, &cls, &val, lambda)?;
            grad.data_mut()[ci] = (lp - lm) / (2.0 * eps);
        }
        numeric.push(grad);
    }

    let report = max_rel_error(&analytic, &numeric);
    let grad_max = |prefix: &str| -> f64 {
        names
            .iter()
            .zip(&analytic)
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, t)| t.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max)
    };
    Ok(ModelGradReport {
        lambda,
        max_rel_err: report.max_rel_err,
        worst_tensor: names[report.worst_param].clone(),
        value_head_grad_max: grad_max("head.value."),
        class_head_grad_max: grad_max("head.class."),
        param_count: config.param_count(),
    })
}

/// The standard verification sweep: lambda in {0, 0.5, 1}, eps 1e-4.
pub fn standard_grad_check(seed: u64) -> Result<Vec<ModelGradReport>> {
    [0.0, 0.5, 1.0]
        .iter()
        .map(|&lambda| model_grad_check(lambda, 1e-4, seed))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn micro_model_gradients_verify() {
        for report in standard_grad_check(3).unwrap() {
            assert!(
                report.max_rel_err < 1e-3,
                "lambda {}: {} at {}",
                report.lambda,
                report.max_rel_err,
                report.worst_tensor
            );
        }
    }

    #[test]
    fn head_gradients_vanish_at_endpoints() {
        let at_one = model_grad_check(1.0, 1e-4, 3).unwrap();
        assert_eq!(at_one.value_head_grad_max, 0.0);
        assert!(at_one.class_head_grad_max > 0.0);
        let at_zero = model_grad_check(0.0, 1e-4, 3).unwrap();
        assert_eq!(at_zero.class_head_grad_max, 0.0);
        assert!(at_zero.value_head_grad_max > 0.0);
    }
}
