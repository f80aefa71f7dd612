//! Training loop: slice-level batches, joint loss, global-norm gradient
//! clipping, and Adam with decoupled weight decay.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{derive_rng, LabeledInstance};
use crate::error::{Error, Result};
use crate::loss::{joint_loss, ClassTarget, JointLossConfig, LossVariant, ValueTarget};
use crate::tensor::{Graph, Tensor};
use crate::vit::{bind, forward_on_graph, ViTParams};

fn d_lr() -> f64 {
    3e-4
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_weight_decay() -> f64 {
    0.01
}
fn d_clip_norm() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    /// global gradient-norm ceiling; 0 disables clipping
    #[serde(default = "d_clip_norm")]
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: d_lr(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_weight_decay(),
            clip_norm: d_clip_norm(),
        }
    }
}

/// Adam with decoupled weight decay over the canonical parameter list.
pub struct AdamW {
    cfg: OptimizerConfig,
    step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, params: &ViTParams) -> AdamW {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        AdamW {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update. `grads` must align with
    /// [`ViTParams::named_tensors`] order. Returns the pre-clip global
    /// gradient norm.
    pub fn step(&mut self, params: &mut ViTParams, grads: &[Tensor]) -> Result<f64> {
        let mut named = params.named_tensors_mut();
        if named.len() != grads.len() {
            return Err(Error::contract(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                named.len()
            )));
        }
        let sq_sum: f64 = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum();
        let norm = sq_sum.sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            self.cfg.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (pi, (_, tensor)) in named.iter_mut().enumerate() {
            let data = tensor.data_mut();
            let g = grads[pi].data();
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            for i in 0..data.len() {
                let gi = g[i] * clip;
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= self.cfg.lr * (mhat / (vhat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * data[i]);
            }
        }
        Ok(norm)
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }
}

fn d_epochs() -> usize {
    20
}
fn d_batch() -> usize {
    16
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOptions {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// hard cap on optimizer steps across all epochs
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: JointLossConfig,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: d_epochs(),
            max_steps: None,
            batch_size: d_batch(),
            optimizer: OptimizerConfig::default(),
            loss: JointLossConfig::default(),
            seed: 0,
        }
    }
}

/// One optimizer step's log line.
#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub joint_loss: f64,
    pub bce_loss: f64,
    pub mse_loss: f64,
    pub grad_norm: f64,
}

struct Sample {
    image: Tensor,
    class: usize,
    percent: f64,
}

fn flatten_samples(instances: &[LabeledInstance]) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for inst in instances {
        inst.validate()?;
        for s in &inst.slices {
            out.push(Sample {
                image: s.clone(),
                class: inst.sao2_class.index(),
                percent: inst.sao2_percent,
            });
        }
    }
    if out.is_empty() {
        return Err(Error::contract("training set has no slices".to_string()));
    }
    Ok(out)
}

fn class_counts_of(instances: &[LabeledInstance]) -> Vec<usize> {
    let mut counts = vec![0usize; crate::data::NUM_CLASSES];
    for inst in instances {
        counts[inst.sao2_class.index()] += 1;
    }
    counts
}

/// Trains `params` in place on slice-level batches drawn from `instances`.
/// Deterministic in (params, instances, options). A Bal-BCE loss with no
/// explicit class counts picks them up from the training instances.
pub fn train(
    params: &mut ViTParams,
    instances: &[LabeledInstance],
    opts: &TrainOptions,
) -> Result<Vec<StepLog>> {
    if opts.batch_size == 0 {
        return Err(Error::config("batch_size must be >= 1".to_string()));
    }
    let mut loss_cfg = opts.loss.clone();
    if loss_cfg.variant == LossVariant::BalBce && loss_cfg.class_counts.is_none() {
        loss_cfg.class_counts = Some(class_counts_of(instances));
    }
    loss_cfg.validate()?;
    let samples = flatten_samples(instances)?;
    let num_classes = params.config.num_classes;
    let mut optimizer = AdamW::new(opts.optimizer.clone(), params);
    let mut logs = Vec::new();
    let mut step = 0usize;
    let mut dropout_rng = derive_rng(opts.seed, "dropout", 0);

    'epochs: for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle_rng = derive_rng(opts.seed, "epoch", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(opts.batch_size) {
            if opts.max_steps.is_some_and(|cap| step >= cap) {
                break 'epochs;
            }
            let images: Vec<Tensor> = chunk.iter().map(|&i| samples[i].image.clone()).collect();
            let batch = crate::data::stack_images(&images)?;
            let cls_targets: Vec<ClassTarget> = chunk
                .iter()
                .map(|&i| ClassTarget::from_class(samples[i].class, num_classes))
                .collect::<Result<_>>()?;
            let val_targets: Vec<ValueTarget> = chunk
                .iter()
                .map(|&i| ValueTarget::from_percent(samples[i].percent))
                .collect::<Result<_>>()?;

            let mut g = Graph::new();
            let bound = bind(&mut g, params);
            let (logits, values) = forward_on_graph(
                &mut g,
                &bound,
                &params.config,
                &batch,
                true,
                Some(&mut dropout_rng),
            )?;
            let nodes = joint_loss(&mut g, logits, values, &cls_targets, &val_targets, &loss_cfg)?;
            let joint = g.value(nodes.joint).scalar_value()?;
            let bce = g.value(nodes.classification).scalar_value()?;
            let mse = g.value(nodes.mse).scalar_value()?;
            g.backward(nodes.joint)?;
            let grads: Vec<Tensor> = bound
                .named_vars()
                .iter()
                .map(|&(_, v)| g.grad_or_zeros(v))
                .collect();
            let grad_norm = optimizer.step(params, &grads)?;
            if !joint.is_finite() || !params.all_finite() {
                return Err(Error::Diverged {
                    step,
                    loss: joint,
                    lr: opts.optimizer.lr,
                    grad_norm,
                });
            }
            logs.push(StepLog {
                step,
                epoch,
                joint_loss: joint,
                bce_loss: bce,
                mse_loss: mse,
                grad_norm,
            });
            step += 1;
        }
    }
    Ok(logs)
}

/// Slice-level training accuracy of `params` on `instances`.
pub fn training_accuracy(params: &ViTParams, instances: &[LabeledInstance]) -> Result<f64> {
    let samples = flatten_samples(instances)?;
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    let batch = crate::data::stack_images(&images)?;
    let (logits, _) = crate::vit::forward(params, &batch)?;
    let preds = crate::vit::predict_class(&logits)?;
    let correct = preds
        .iter()
        .zip(&samples)
        .filter(|(&p, s)| p == s.class)
        .count();
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_longtail, SynthSpec};
    use crate::vit::ViTConfig;

    fn micro_config() -> ViTConfig {
        ViTConfig {
            image_size: 16,
            patch_size: 8,
            channels: 1,
            embed_dim: 16,
            depth: 1,
            heads: 2,
            mlp_ratio: 2,
            num_classes: 3,
            dropout: 0.0,
        }
    }

    fn micro_options(steps: usize) -> TrainOptions {
        TrainOptions {
            epochs: usize::MAX / 2,
            max_steps: Some(steps),
            batch_size: 8,
            optimizer: OptimizerConfig {
                lr: 3e-3,
                ..OptimizerConfig::default()
            },
            loss: JointLossConfig::default(),
            seed: 5,
        }
    }

    #[test]
    fn loss_decreases_on_tiny_dataset() {
        let ds = synth_longtail(&SynthSpec {
            counts: [4, 4, 4],
            image_size: 16,
            slices_per_instance: 1,
            seed: 1,
        })
        .unwrap();
        let mut params = ViTParams::init(&micro_config(), 2).unwrap();
        let logs = train(&mut params, &ds.instances, &micro_options(40)).unwrap();
        assert_eq!(logs.len(), 40);
        let head: f64 = logs[..5].iter().map(|l| l.joint_loss).sum::<f64>() / 5.0;
        let tail: f64 = logs[35..].iter().map(|l| l.joint_loss).sum::<f64>() / 5.0;
        assert!(tail < head, "loss did not decrease: {head} -> {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let ds = synth_longtail(&SynthSpec {
            counts: [2, 2, 2],
            image_size: 16,
            slices_per_instance: 1,
            seed: 1,
        })
        .unwrap();
        let run = || {
            let mut params = ViTParams::init(&micro_config(), 2).unwrap();
            let logs = train(&mut params, &ds.instances, &micro_options(10)).unwrap();
            (params, logs)
        };
        let (pa, la) = run();
        let (pb, lb) = run();
        for (x, y) in la.iter().zip(&lb) {
            assert_eq!(x.joint_loss.to_bits(), y.joint_loss.to_bits());
        }
        for ((_, ta), (_, tb)) in pa.named_tensors().iter().zip(pb.named_tensors()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn head_gradients_respect_lambda_endpoints() {
        let ds = synth_longtail(&SynthSpec {
            counts: [2, 2, 2],
            image_size: 16,
            slices_per_instance: 1,
            seed: 1,
        })
        .unwrap();
        let params = ViTParams::init(&micro_config(), 2).unwrap();
        let samples = flatten_samples(&ds.instances).unwrap();
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let batch = crate::data::stack_images(&images).unwrap();
        let cls: Vec<ClassTarget> = samples
            .iter()
            .map(|s| ClassTarget::from_class(s.class, 3).unwrap())
            .collect();
        let val: Vec<ValueTarget> = samples
            .iter()
            .map(|s| ValueTarget::from_percent(s.percent).unwrap())
            .collect();
        let grads_for = |lambda: f64| {
            let mut g = Graph::new();
            let bound = bind(&mut g, &params);
            let (logits, values) =
                forward_on_graph(&mut g, &bound, &params.config, &batch, false, None).unwrap();
            let cfg = JointLossConfig {
                lambda,
                ..JointLossConfig::default()
            };
            let nodes = joint_loss(&mut g, logits, values, &cls, &val, &cfg).unwrap();
            g.backward(nodes.joint).unwrap();
            let mut by_name = std::collections::HashMap::new();
            for &(ref name, v) in bound.named_vars() {
                by_name.insert(name.clone(), g.grad_or_zeros(v));
            }
            by_name
        };
        let at_one = grads_for(1.0);
        assert!(at_one["head.value.weight"].data().iter().all(|&v| v == 0.0));
        assert!(at_one["head.class.weight"].data().iter().any(|&v| v != 0.0));
        let at_zero = grads_for(0.0);
        assert!(at_zero["head.class.weight"].data().iter().all(|&v| v == 0.0));
        assert!(at_zero["head.value.weight"].data().iter().any(|&v| v != 0.0));
        let mid = grads_for(0.5);
        assert!(mid["head.class.weight"].data().iter().any(|&v| v != 0.0));
        assert!(mid["head.value.weight"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn optimizer_keeps_params_finite() {
        let cfg = micro_config();
        let mut params = ViTParams::init(&cfg, 0).unwrap();
        let mut opt = AdamW::new(OptimizerConfig::default(), &params);
        let grads: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::full(t.shape().to_vec(), 0.5))
            .collect();
        for _ in 0..3 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert!(params.all_finite());
    }

    #[test]
    fn clipping_bounds_reported_norm() {
        let cfg = micro_config();
        let mut params = ViTParams::init(&cfg, 0).unwrap();
        let mut opt = AdamW::new(
            OptimizerConfig {
                clip_norm: 1.0,
                ..OptimizerConfig::default()
            },
            &params,
        );
        let grads: Vec<Tensor> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::full(t.shape().to_vec(), 10.0))
            .collect();
        let norm = opt.step(&mut params, &grads).unwrap();
        assert!(norm > 1.0); // reported norm is pre-clip
    }
}
