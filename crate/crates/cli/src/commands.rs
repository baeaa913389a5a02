use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde_json::{json, Value};
use spda_core::eval::{self, CaseInput};
use spda_core::gradcheck::{self, CheckOptions};
use spda_core::segnet::{self, Sample};
use spda_core::synth::{self, SynthCase};
use spda_core::{AttentionVariant, Optimizer, RunConfig, SegModel, Tensor};

use crate::{Failure, Predictor};

pub const CHECKPOINT_FILE: &str = "checkpoint.spdk";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const PR_CSV_FILE: &str = "pr_curve.csv";
pub const FROC_CSV_FILE: &str = "froc_curve.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

fn provenance(cfg: &RunConfig) -> Value {
    json!({
        "tool": "spda",
        "tool_version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.seed,
        "config": cfg.to_json(),
    })
}

fn refuse_overwrite(path: &Path, force: bool) -> Result<(), Failure> {
    if path.exists() && !force {
        return Err(Failure::Usage(format!(
            "{} exists (use --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Thread pool capped by `SPDA_THREADS` when set.
fn pool() -> Result<rayon::ThreadPool, Failure> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SPDA_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Failure::Usage(format!(
                "SPDA_THREADS must be a positive integer, got {v:?}"
            ))
        })?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Failure::Runtime(anyhow!(e)))
}

pub fn synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<(), Failure> {
    let sc = cfg.synth_config();
    sc.validate()?;
    let manifest = pool()?.install(|| synth::write_dataset(out, &sc, provenance(cfg), force))?;
    let positives = manifest.cases.iter().filter(|c| c.label).count();
    println!(
        "wrote {} cases ({} with lesions) to {}",
        manifest.cases.len(),
        positives,
        out.display()
    );
    Ok(())
}

pub fn gradcheck(
    cfg: &RunConfig,
    out: Option<&Path>,
    seeds: u64,
    inject_fault: bool,
) -> Result<(), Failure> {
    if seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let opts = CheckOptions {
        flip_sign: inject_fault,
        ..CheckOptions::default()
    };
    let mut runs = Vec::new();
    let mut failed = 0usize;
    println!(
        "{:<6} {:<24} {:>14} {:>8}  status",
        "seed", "operation", "max_rel_error", "entries"
    );
    for seed in cfg.seed..cfg.seed + seeds {
        let reports = gradcheck::default_suite(seed, &opts)?;
        for r in &reports {
            println!(
                "{:<6} {:<24} {:>14.3e} {:>8}  {}",
                seed,
                r.name,
                r.max_rel_error,
                r.entries_checked,
                if r.passed { "ok" } else { "FAIL" }
            );
            failed += !r.passed as usize;
        }
        runs.push(json!({ "seed": seed, "checks": reports }));
    }
    let passed = failed == 0;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
        write_json(
            &dir.join(GRADCHECK_FILE),
            &json!({
                "provenance": provenance(cfg),
                "step": opts.step,
                "tolerance": opts.tolerance,
                "inject_fault": inject_fault,
                "passed": passed,
                "runs": runs,
            }),
        )?;
    }
    if passed {
        println!(
            "all gradient checks passed (tolerance {:.0e})",
            opts.tolerance
        );
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow!(
            "{failed} gradient checks exceeded tolerance {:.0e}",
            opts.tolerance
        )))
    }
}

fn split(cases: &[SynthCase], holdout: usize) -> (&[SynthCase], &[SynthCase]) {
    let cut = cases.len().saturating_sub(holdout);
    cases.split_at(cut)
}

fn load_cases(dataset: &Path) -> Result<Vec<SynthCase>, Failure> {
    let cases = synth::load_dataset(dataset)
        .with_context(|| format!("loading dataset {}", dataset.display()))?;
    if cases.is_empty() {
        return Err(Failure::Runtime(anyhow!(
            "dataset {} has no cases",
            dataset.display()
        )));
    }
    Ok(cases)
}

pub fn train(cfg: &RunConfig, dataset: &Path, out: &Path, force: bool) -> Result<(), Failure> {
    cfg.validate()?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    refuse_overwrite(&ckpt_path, force)?;
    let cases = load_cases(dataset)?;
    let (train_cases, _) = split(&cases, cfg.data.holdout);
    if train_cases.is_empty() {
        return Err(Failure::Usage(format!(
            "holdout {} leaves no training cases out of {}",
            cfg.data.holdout,
            cases.len()
        )));
    }
    let samples: Vec<Sample> = train_cases.iter().map(SynthCase::to_sample).collect();
    let mut model = SegModel::new(cfg.unet(), cfg.seed)?;
    let mut opt = Optimizer::new(&model.params, cfg.rmsprop(), cfg.optim.stiefel_lr);

    fs::create_dir_all(out).map_err(anyhow::Error::from)?;
    let log_path = out.join(TRAIN_LOG_FILE);
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut emit = |v: Value| -> anyhow::Result<()> {
        writeln!(log, "{}", serde_json::to_string(&v)?)?;
        Ok(())
    };
    emit(json!({
        "event": "start",
        "provenance": provenance(cfg),
        "dataset": dataset.display().to_string(),
        "train_cases": samples.len(),
        "parameters": model.params.len(),
    }))?;
    for epoch in 0..cfg.train.epochs {
        match segnet::train_epoch(
            &mut model,
            &mut opt,
            &samples,
            cfg.train.batch_size,
            cfg.seed,
            epoch,
        ) {
            Ok(stats) => {
                println!(
                    "epoch {:>4}  loss {:.6}  grad {:.4e}  stiefel {:.2e}",
                    epoch, stats.mean_loss, stats.mean_grad_norm, stats.max_stiefel_residual
                );
                let mut line = serde_json::to_value(&stats).map_err(anyhow::Error::from)?;
                line["event"] = json!("epoch");
                emit(line)?;
            }
            Err(e) => {
                emit(json!({ "event": "abort", "epoch": epoch, "error": e.to_string() }))?;
                return Err(Failure::Runtime(
                    anyhow::Error::from(e).context("training aborted"),
                ));
            }
        }
    }
    segnet::save_checkpoint(
        &ckpt_path,
        &model,
        provenance(cfg),
        cfg.seed,
        cfg.train.epochs,
    )?;
    emit(json!({ "event": "end", "epochs": cfg.train.epochs, "checkpoint": CHECKPOINT_FILE }))?;
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

fn batch_of_one(volume: &Tensor) -> Tensor {
    let mut shape = vec![1];
    shape.extend_from_slice(volume.shape());
    Tensor::new(shape, volume.data().to_vec()).expect("same element count")
}

pub fn eval(
    cfg: &RunConfig,
    dataset: &Path,
    checkpoint: Option<&Path>,
    predictor: Predictor,
    explicit_variant: Option<AttentionVariant>,
    out: &Path,
    force: bool,
) -> Result<(), Failure> {
    let report_path = out.join(REPORT_FILE);
    refuse_overwrite(&report_path, force)?;
    let opts = cfg.eval_options();
    if opts.threshold_steps < 2 {
        return Err(Failure::Usage("threshold_steps must be at least 2".into()));
    }
    let cases = load_cases(dataset)?;
    let (_, held) = split(&cases, cfg.data.holdout);
    let eval_cases: &[SynthCase] = if cfg.data.holdout == 0 { &cases } else { held };

    let mut checkpoint_info = Value::Null;
    let model = match predictor {
        Predictor::Model => {
            let path = checkpoint.ok_or_else(|| {
                Failure::Usage("--checkpoint is required with the model predictor".into())
            })?;
            let ck = segnet::load_checkpoint(path)
                .with_context(|| format!("reading checkpoint {}", path.display()))?;
            if let Some(v) = explicit_variant {
                if v != ck.header.model.attention.variant {
                    return Err(Failure::Runtime(anyhow!(
                        "incompatible checkpoint: trained with attention {}, requested {v}",
                        ck.header.model.attention.variant
                    )));
                }
            }
            let channels = eval_cases[0].volume.shape()[0];
            if ck.header.model.in_channels != channels {
                return Err(Failure::Runtime(anyhow!(
                    "incompatible checkpoint: model expects {} input channels, dataset has {channels}",
                    ck.header.model.in_channels
                )));
            }
            checkpoint_info = json!({
                "path": path.display().to_string(),
                "tool_version": ck.header.tool_version,
                "seed": ck.header.seed,
                "epoch": ck.header.epoch,
                "model": ck.header.model,
                "run_config": ck.header.run_config,
            });
            Some(ck.into_model().context("incompatible checkpoint")?)
        }
        _ => None,
    };

    let result = pool()?.install(|| -> anyhow::Result<eval::EvalResult> {
        let inputs: Vec<CaseInput> = eval_cases
            .par_iter()
            .map(|c| -> anyhow::Result<CaseInput> {
                let gt: Vec<bool> = c.mask.data().iter().map(|&m| m != 0.0).collect();
                let prob = match (&model, predictor) {
                    (Some(m), _) => m
                        .predict(&batch_of_one(&c.volume))
                        .with_context(|| format!("predicting case {}", c.index))?
                        .into_data(),
                    (None, Predictor::GroundTruth) => gt.iter().map(|&g| g as u8 as f64).collect(),
                    (None, _) => vec![0.0; gt.len()],
                };
                Ok(CaseInput {
                    case_id: c.index,
                    shape: c.shape(),
                    prob,
                    gt,
                    label: c.label,
                    voxel_volume_mm3: c.voxel_volume_mm3,
                })
            })
            .collect::<anyhow::Result<_>>()?;
        Ok(eval::evaluate(&inputs, &opts)?)
    })?;

    fs::create_dir_all(out).map_err(anyhow::Error::from)?;
    let prov = provenance(cfg);
    let predictor_name = match predictor {
        Predictor::Model => "model",
        Predictor::GroundTruth => "ground-truth",
        Predictor::Zero => "zero",
    };
    write_json(
        &report_path,
        &json!({
            "provenance": prov,
            "dataset": dataset.display().to_string(),
            "predictor": predictor_name,
            "checkpoint": checkpoint_info,
            "aggregate": result.aggregate,
            "stratified": result.stratified,
            "options": result.options,
            "cases": result.cases,
        }),
    )?;
    let comment = format!(
        "# provenance: {}\n",
        serde_json::to_string(&prov).map_err(anyhow::Error::from)?
    );
    fs::write(
        out.join(PR_CSV_FILE),
        comment.clone() + &eval::pr_csv(&result.pr_curve),
    )
    .map_err(anyhow::Error::from)?;
    fs::write(
        out.join(FROC_CSV_FILE),
        comment + &eval::froc_csv(&result.froc_curve),
    )
    .map_err(anyhow::Error::from)?;

    let a = &result.aggregate;
    let auc = a.auc_roc.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "cases {}  lesions {}  DSC {:.4}  AP {:.4}  AUC-ROC {}  Sen@{}FP {:.4}",
        a.n_cases, a.n_lesions, a.dsc, a.ap, auc, opts.fp_budget, a.sen_at_fp
    );
    Ok(())
}
