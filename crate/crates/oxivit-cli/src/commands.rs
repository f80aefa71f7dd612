//! Subcommand implementations. Every command archives its resolved config
//! into the output directory and writes deterministic artifacts there.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};

use oxivit::check::standard_grad_check;
use oxivit::ckpt::{load_checkpoint_matching, save_checkpoint, CheckpointMeta};
use oxivit::data::{balance_augment, load_image_folder, save_dataset_folder, synth_longtail, Dataset, SaO2Class, NUM_CLASSES};
use oxivit::eval::{run_ablation, ConfusionMatrix, CvOptions, MetricsReport};
use oxivit::loss::LossVariant;
use oxivit::train::{train, StepLog, TrainOptions};
use oxivit::vit::{predict_instance, ViTParams};

use crate::config::{DataSource, RunConfig};

pub const METRICS_CSV_HEADER: &str = "fold,lambda,variant,accuracy,sensitivity,specificity";
pub const TRAIN_LOG_HEADER: &str = "step,epoch,joint_loss,bce_loss,mse_loss,grad_norm";
/// the published ablation grid
pub const DEFAULT_LAMBDA_GRID: [f64; 8] = [0.8, 0.9, 0.95, 0.96, 0.97, 0.98, 0.99, 1.0];

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let ds = match &cfg.data.source {
        DataSource::Synthetic(spec) => synth_longtail(spec)?,
        DataSource::Folder {
            root,
            manifest,
            target_size,
            volume_stride,
        } => load_image_folder(root, manifest.as_deref(), *target_size, *volume_stride)?,
    };
    Ok(ds)
}

fn train_options(cfg: &RunConfig) -> TrainOptions {
    TrainOptions {
        epochs: cfg.protocol.epochs,
        max_steps: cfg.protocol.max_steps,
        batch_size: cfg.protocol.batch_size,
        optimizer: cfg.optimizer.clone(),
        loss: cfg.loss.clone(),
        seed: cfg.protocol.seed,
    }
}

fn write_atomic(path: &Path, contents: &str) -> anyhow::Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

pub fn cmd_synth(cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.archive()?;
    let DataSource::Synthetic(_) = &cfg.data.source else {
        bail!("synth requires a synthetic data source in the config");
    };
    let ds = load_dataset(cfg)?;
    let dir = cfg.output.join("dataset");
    save_dataset_folder(&ds, &dir)?;
    println!("wrote {} instances to {}", ds.len(), dir.display());
    for class in SaO2Class::ALL {
        println!("  {:<14} {}", class.name(), ds.class_counts[class.index()]);
    }
    Ok(())
}

fn render_train_log(logs: &[StepLog]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for l in logs {
        writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9},{:.9}",
            l.step, l.epoch, l.joint_loss, l.bce_loss, l.mse_loss, l.grad_norm
        )
        .expect("string write");
    }
    out
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> anyhow::Result<()> {
    cfg.archive()?;
    let ds = load_dataset(cfg)?;
    if ds.is_empty() {
        bail!("training dataset is empty");
    }
    let instances = if cfg.data.balance {
        balance_augment(&ds, &cfg.data.augment, cfg.protocol.seed)?.instances
    } else {
        ds.instances
    };

    let (mut params, base_meta) = match resume {
        Some(dir) => {
            let (params, meta) = load_checkpoint_matching(dir, &cfg.model)?;
            (params, meta)
        }
        None => (
            ViTParams::init(&cfg.model, cfg.protocol.seed)?,
            CheckpointMeta::new(0, cfg.protocol.seed),
        ),
    };

    let logs = train(&mut params, &instances, &train_options(cfg))?;
    write_atomic(&cfg.output.join("train_log.csv"), &render_train_log(&logs))?;

    let meta = CheckpointMeta {
        step: base_meta.step + logs.len() as u64,
        ..base_meta
    };
    let ckpt_dir = cfg.output.join("checkpoint");
    save_checkpoint(&params, &meta, &ckpt_dir)?;
    match logs.last() {
        Some(last) => println!(
            "trained {} steps; final joint={:.6} bce={:.6} mse={:.6}; checkpoint at {}",
            logs.len(),
            last.joint_loss,
            last.bce_loss,
            last.mse_loss,
            ckpt_dir.display()
        ),
        None => println!("took 0 steps; checkpoint at {}", ckpt_dir.display()),
    }
    Ok(())
}

fn evaluate_dataset(
    params: &ViTParams,
    ds: &Dataset,
    oracle: bool,
) -> anyhow::Result<MetricsReport> {
    let mut preds = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for inst in &ds.instances {
        let label = inst.sao2_class.index();
        let pred = if oracle {
            label
        } else {
            predict_instance(params, inst)?.0
        };
        preds.push(pred);
        labels.push(label);
    }
    let cm = ConfusionMatrix::from_predictions(&preds, &labels, NUM_CLASSES)?;
    Ok(MetricsReport::from_confusion(0, &cm)?)
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, oracle: bool) -> anyhow::Result<()> {
    cfg.archive()?;
    let ds = load_dataset(cfg)?;
    if ds.is_empty() {
        bail!("evaluation dataset is empty");
    }
    let (params, _meta) = load_checkpoint_matching(checkpoint, &cfg.model)?;
    let report = evaluate_dataset(&params, &ds, oracle)?;
    println!(
        "instances={} accuracy={:.4} macro_sensitivity={:.4} macro_specificity={:.4}",
        ds.len(),
        report.accuracy,
        report.macro_sensitivity,
        report.macro_specificity
    );
    for (class, m) in SaO2Class::ALL.iter().zip(&report.per_class) {
        println!(
            "  {:<14} recall={:.4} specificity={:.4}",
            class.name(),
            m.recall,
            m.specificity
        );
    }
    let path = cfg.output.join("metrics.json");
    write_atomic(&path, &serde_json::to_string_pretty(&report)?)?;
    println!("metrics written to {}", path.display());
    Ok(())
}

pub fn cmd_ablate(cfg: &RunConfig, lambdas: &[f64], variants: &[LossVariant]) -> anyhow::Result<()> {
    cfg.archive()?;
    let ds = load_dataset(cfg)?;
    let opts = CvOptions {
        model: cfg.model.clone(),
        train: train_options(cfg),
        k: cfg.protocol.k,
        seed: cfg.protocol.seed,
        balance: cfg.data.balance,
        augment: cfg.data.augment.clone(),
    };
    let cells = run_ablation(&ds, lambdas, variants, &opts)?;

    let mut csv = String::from(METRICS_CSV_HEADER);
    csv.push('\n');
    for cell in &cells {
        for fold in &cell.folds {
            writeln!(
                csv,
                "{},{},{},{:.6},{:.6},{:.6}",
                fold.fold_id,
                cell.lambda,
                cell.variant,
                fold.accuracy,
                fold.macro_sensitivity,
                fold.macro_specificity
            )
            .expect("string write");
        }
    }
    write_atomic(&cfg.output.join("metrics.csv"), &csv)?;

    // long-format table for the lambda-vs-metric curve
    let mut curve = String::from("lambda,variant,metric,mean,std\n");
    for cell in &cells {
        for (metric, ms) in [
            ("accuracy", cell.aggregate.accuracy),
            ("sensitivity", cell.aggregate.macro_sensitivity),
            ("specificity", cell.aggregate.macro_specificity),
        ] {
            writeln!(
                curve,
                "{},{},{metric},{:.6},{:.6}",
                cell.lambda, cell.variant, ms.mean, ms.std
            )
            .expect("string write");
        }
    }
    write_atomic(&cfg.output.join("lambda_curve.csv"), &curve)?;

    #[derive(serde::Serialize)]
    struct CellSummary<'a> {
        lambda: f64,
        variant: String,
        aggregate: &'a oxivit::eval::AggregateMetrics,
    }
    let summary: Vec<CellSummary> = cells
        .iter()
        .map(|c| CellSummary {
            lambda: c.lambda,
            variant: c.variant.to_string(),
            aggregate: &c.aggregate,
        })
        .collect();
    write_atomic(
        &cfg.output.join("ablation.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;

    for cell in &cells {
        println!(
            "lambda={:<5} variant={:<7} acc={:.4}+-{:.4} sens={:.4}+-{:.4} spec={:.4}+-{:.4}",
            cell.lambda,
            cell.variant.to_string(),
            cell.aggregate.accuracy.mean,
            cell.aggregate.accuracy.std,
            cell.aggregate.macro_sensitivity.mean,
            cell.aggregate.macro_sensitivity.std,
            cell.aggregate.macro_specificity.mean,
            cell.aggregate.macro_specificity.std
        );
    }
    println!("{} result rows written to {}", cells.len(), cfg.output.join("metrics.csv").display());
    Ok(())
}

pub fn cmd_gradcheck(cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.archive()?;
    let reports = standard_grad_check(cfg.protocol.seed)?;
    let mut failure = None;
    for r in &reports {
        println!(
            "lambda={:<4} max_rel_err={:.3e} worst={} value_head_grad_max={:.3e} class_head_grad_max={:.3e}",
            r.lambda, r.max_rel_err, r.worst_tensor, r.value_head_grad_max, r.class_head_grad_max
        );
        if r.max_rel_err >= 1e-3 {
            failure = Some(format!(
                "gradient check failed at lambda {}: {} (tensor {})",
                r.lambda, r.max_rel_err, r.worst_tensor
            ));
        }
        if r.lambda == 1.0 && r.value_head_grad_max != 0.0 {
            failure = Some("value head gradient must be exactly zero at lambda 1".to_string());
        }
        if r.lambda == 0.0 && r.class_head_grad_max != 0.0 {
            failure = Some("class head gradient must be exactly zero at lambda 0".to_string());
        }
    }
    if let Some(msg) = failure {
        bail!(msg);
    }
    println!("all gradients verified ({} parameters)", reports[0].param_count);
    Ok(())
}
