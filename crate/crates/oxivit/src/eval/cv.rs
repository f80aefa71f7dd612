//! Cross-validation protocol: per fold, balance the training portion only,
//! train from a fold-specific init, and evaluate instance-level on the
//! untouched test fold. The ablation runner repeats the full protocol per
//! (lambda, variant) cell over identical fold assignments.

use rand::Rng;
use serde::Serialize;

use crate::data::{balance_augment, derive_rng, AugmentPolicy, Dataset, LabeledInstance, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::eval::{kfold_split, ConfusionMatrix, MetricsReport};
use crate::loss::LossVariant;
use crate::train::{train, TrainOptions};
use crate::vit::{predict_instance, ViTConfig, ViTParams};

#[derive(Debug, Clone)]
pub struct CvOptions {
    pub model: ViTConfig,
    pub train: TrainOptions,
    pub k: usize,
    pub seed: u64,
    /// balance the training portion of every fold before training
    pub balance: bool,
    pub augment: AugmentPolicy,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    /// population convention (divide by k)
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AggregateMetrics {
    pub accuracy: MeanStd,
    pub macro_sensitivity: MeanStd,
    pub macro_specificity: MeanStd,
}

/// What each fold saw; kept so protocol-hygiene checks can audit splits
/// without re-running training.
#[derive(Debug, Clone)]
pub struct FoldDetail {
    pub fold_id: usize,
    pub test_ids: Vec<String>,
    /// (instance id, source id, is_augmented) of every training instance
    pub train_members: Vec<(String, String, bool)>,
}

#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<MetricsReport>,
    pub aggregate: AggregateMetrics,
    pub details: Vec<FoldDetail>,
}

fn mean_std(values: &[f64]) -> MeanStd {
    // identical folds get an exact zero spread, not rounding dust
    if values.windows(2).all(|w| w[0] == w[1]) {
        return MeanStd {
            mean: values[0],
            std: 0.0,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

pub(crate) fn aggregate(reports: &[MetricsReport]) -> AggregateMetrics {
    AggregateMetrics {
        accuracy: mean_std(&reports.iter().map(|r| r.accuracy).collect::<Vec<_>>()),
        macro_sensitivity: mean_std(
            &reports
                .iter()
                .map(|r| r.macro_sensitivity)
                .collect::<Vec<_>>(),
        ),
        macro_specificity: mean_std(
            &reports
                .iter()
                .map(|r| r.macro_specificity)
                .collect::<Vec<_>>(),
        ),
    }
}

fn sub_seed(seed: u64, tag: &str, k: u64) -> u64 {
    derive_rng(seed, tag, k).random::<u64>()
}

/// Full k-fold protocol with freshly drawn folds.
pub fn run_cv(dataset: &Dataset, opts: &CvOptions) -> Result<CvOutcome> {
    let folds = kfold_split(dataset, opts.k, opts.seed)?;
    run_cv_with_folds(dataset, &folds, opts)
}

/// The protocol over caller-supplied fold assignments (used by the ablation
/// runner to hold folds fixed across cells).
pub fn run_cv_with_folds(
    dataset: &Dataset,
    folds: &[Vec<String>],
    opts: &CvOptions,
) -> Result<CvOutcome> {
    opts.model.validate()?;
    if opts.model.num_classes != NUM_CLASSES {
        return Err(Error::config(format!(
            "cross-validation over SaO2 levels needs num_classes == {NUM_CLASSES}, got {}",
            opts.model.num_classes
        )));
    }
    if dataset.instances.iter().any(|i| i.is_augmented) {
        return Err(Error::contract(
            "cross-validation input must hold originals only; balancing happens per fold"
                .to_string(),
        ));
    }
    let mut reports = Vec::with_capacity(folds.len());
    let mut details = Vec::with_capacity(folds.len());
    for (fold_id, test_ids) in folds.iter().enumerate() {
        let test_set: std::collections::HashSet<&str> =
            test_ids.iter().map(String::as_str).collect();
        let train_instances: Vec<LabeledInstance> = dataset
            .instances
            .iter()
            .filter(|i| !test_set.contains(i.instance_id.as_str()))
            .cloned()
            .collect();
        let train_instances = if opts.balance {
            let train_ds = Dataset::new(train_instances, dataset.provenance)?;
            balance_augment(&train_ds, &opts.augment, sub_seed(opts.seed, "balance", fold_id as u64))?
                .instances
        } else {
            train_instances
        };

        let mut params = ViTParams::init(&opts.model, sub_seed(opts.seed, "init", fold_id as u64))?;
        let mut train_opts = opts.train.clone();
        train_opts.seed = sub_seed(opts.seed, "train", fold_id as u64);
        train(&mut params, &train_instances, &train_opts)
            .map_err(|e| Error::contract(format!("fold {fold_id} training failed: {e}")))?;

        let mut preds = Vec::with_capacity(test_ids.len());
        let mut labels = Vec::with_capacity(test_ids.len());
        for id in test_ids {
            let inst = dataset.get(id).ok_or_else(|| {
                Error::contract(format!("fold {fold_id} references unknown instance {id}"))
            })?;
            let (class, _value) = predict_instance(&params, inst)?;
            preds.push(class);
            labels.push(inst.sao2_class.index());
        }
        let cm = ConfusionMatrix::from_predictions(&preds, &labels, NUM_CLASSES)?;
        reports.push(
            MetricsReport::from_confusion(fold_id, &cm)
                .map_err(|e| Error::contract(format!("fold {fold_id} metrics: {e}")))?,
        );
        details.push(FoldDetail {
            fold_id,
            test_ids: test_ids.clone(),
            train_members: train_instances
                .iter()
                .map(|i| (i.instance_id.clone(), i.source_id.clone(), i.is_augmented))
                .collect(),
        });
    }
    let aggregate = aggregate(&reports);
    Ok(CvOutcome {
        folds: reports,
        aggregate,
        details,
    })
}

/// One (lambda, variant) cell of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub lambda: f64,
    pub variant: LossVariant,
    pub folds: Vec<MetricsReport>,
    pub aggregate: AggregateMetrics,
    pub fold_assignments: Vec<Vec<String>>,
}

/// Runs the full CV protocol for every (variant, lambda) cell over one fixed
/// fold assignment, so cells differ only in the loss.
pub fn run_ablation(
    dataset: &Dataset,
    lambda_grid: &[f64],
    variants: &[LossVariant],
    opts: &CvOptions,
) -> Result<Vec<AblationResult>> {
    if lambda_grid.is_empty() || variants.is_empty() {
        return Err(Error::contract(
            "ablation needs at least one lambda and one variant".to_string(),
        ));
    }
    let folds = kfold_split(dataset, opts.k, opts.seed)?;
    let mut out = Vec::with_capacity(lambda_grid.len() * variants.len());
    for &variant in variants {
        for &lambda in lambda_grid {
            let mut cell = opts.clone();
            cell.train.loss.lambda = lambda;
            cell.train.loss.variant = variant;
            let outcome = run_cv_with_folds(dataset, &folds, &cell)?;
            out.push(AblationResult {
                lambda,
                variant,
                folds: outcome.folds,
                aggregate: outcome.aggregate,
                fold_assignments: folds.clone(),
            });
        }
    }
    Ok(out)
}
