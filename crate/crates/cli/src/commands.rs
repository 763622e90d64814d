//! The five subcommands. Each reads its inputs from the configured paths
//! and writes only under `config.out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use tempseg_core::infer::{infer_sequence, read_predictions, write_predictions, PredictionManifest};
use tempseg_core::report::{evaluate_predictions, run_baseline_report, BaselineReport, MetricsReport};
use tempseg_core::synth::{generate_dataset, read_dataset, write_dataset, DatasetManifest, Sequence};
use tempseg_core::train::{load_checkpoint, read_loss_log, write_loss_log, Trainer, TrainingSet};
use tempseg_core::{Model, Target};

use crate::config::{ConfigError, RunConfig};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const EPOCH_DIR: &str = "checkpoints";
pub const LOSS_LOG: &str = "loss_log.csv";
pub const TIMING_FILE: &str = "timing.json";

fn load_sequences(cfg: &RunConfig) -> Result<Vec<Sequence>> {
    let (_, seqs) = read_dataset(&cfg.dataset)
        .with_context(|| format!("reading dataset {}", cfg.dataset.display()))?;
    Ok(seqs)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| ConfigError(format!("{what} path is required (--{what} or {what}=...)")).into())
}

fn write_timing(out: &Path, command: &str, seconds: f64) -> Result<()> {
    let body = serde_json::json!({ "command": command, "seconds": seconds });
    fs::write(out.join(TIMING_FILE), serde_json::to_vec_pretty(&body)?)
        .with_context(|| format!("writing {}", out.join(TIMING_FILE).display()))
}

pub fn generate(cfg: &RunConfig) -> Result<DatasetManifest> {
    let seqs = generate_dataset(cfg.sequences, cfg.image_size, cfg.frames, cfg.seed)?;
    let manifest = write_dataset(&seqs, &cfg.out)?;
    println!(
        "generated {} sequences x {} frames ({}px) in {}",
        cfg.sequences,
        cfg.frames,
        cfg.image_size,
        cfg.out.display()
    );
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
}

fn save(trainer: &Trainer, dir: &Path) -> tempseg_core::Result<()> {
    trainer.checkpoint().save(dir)?;
    write_loss_log(&dir.join(LOSS_LOG), &trainer.log)
}

/// Trains from scratch, or resumes from `cfg.checkpoint` when set. The loss
/// log of a resumed run continues the one stored with the checkpoint.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let started = Instant::now();
    let set = TrainingSet::new(&load_sequences(cfg)?)?;
    let tcfg = cfg.train();
    let mut trainer = match &cfg.checkpoint {
        Some(ck) => {
            let mut t = Trainer::resume(ck, tcfg, set).with_context(|| format!("resuming from {}", ck.display()))?;
            let log_path = ck.join(LOSS_LOG);
            if log_path.exists() {
                let step = t.step_count();
                t.log = read_loss_log(&log_path)?.into_iter().filter(|r| r.step < step).collect();
            }
            t
        }
        None => Trainer::new(Model::new(cfg.model())?, tcfg, set)?,
    };
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let start = trainer.step_count();
    let epochs_dir = cfg.out.join(EPOCH_DIR);
    trainer.run(|t| {
        let epoch = t.step_count() / t.steps_per_epoch().max(1);
        save(t, &epochs_dir.join(format!("epoch_{epoch:04}")))
    })?;
    let dir = cfg.out.join(CHECKPOINT_DIR);
    save(&trainer, &dir)?;
    write_loss_log(&cfg.out.join(LOSS_LOG), &trainer.log)?;
    let final_loss = trainer.log.last().map(|r| r.loss);
    println!(
        "trained {} -> {} steps ({} target), final loss {}",
        start,
        trainer.step_count(),
        trainer.config.target,
        final_loss.map(|l| format!("{l:.5}")).unwrap_or_else(|| "n/a".into())
    );
    write_timing(&cfg.out, "train", started.elapsed().as_secs_f64())?;
    Ok(TrainOutcome {
        steps: trainer.step_count(),
        final_loss,
        checkpoint: dir,
    })
}

/// The target a checkpoint was trained for.
pub fn checkpoint_target(dir: &Path) -> Result<Target> {
    let path = dir.join("checkpoint.json");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let t = v["config"]["train"]["target"].clone();
    serde_json::from_value(t).with_context(|| format!("{}: no training target recorded", path.display()))
}

pub fn infer(cfg: &RunConfig) -> Result<PredictionManifest> {
    let started = Instant::now();
    let ck = required(&cfg.checkpoint, "checkpoint")?;
    let target = checkpoint_target(ck)?;
    if target != cfg.target {
        return Err(ConfigError(format!("checkpoint was trained for {target}, run asks for {}", cfg.target)).into());
    }
    let (model, _) = load_checkpoint(ck).with_context(|| format!("loading {}", ck.display()))?;
    let seqs = load_sequences(cfg)?;
    let icfg = cfg.inference();
    let preds = seqs
        .iter()
        .map(|s| infer_sequence(&model, &s.frames, target, &icfg))
        .collect::<tempseg_core::Result<Vec<_>>>()?;
    let manifest = write_predictions(&cfg.out, target, &preds)?;
    let admitted: usize = preds
        .iter()
        .map(|p| p.trace.iter().filter(|e| e.kind() == "admitted").count())
        .sum();
    println!(
        "predicted {} sequences ({target}); {admitted} memory admissions",
        preds.len()
    );
    write_timing(&cfg.out, "infer", started.elapsed().as_secs_f64())?;
    Ok(manifest)
}

pub fn eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let started = Instant::now();
    let dir = required(&cfg.predictions, "predictions")?;
    let (manifest, preds) = read_predictions(dir).with_context(|| format!("reading predictions {}", dir.display()))?;
    if manifest.target != cfg.target {
        return Err(ConfigError(format!(
            "predictions are for {}, run asks for {}",
            manifest.target, cfg.target
        ))
        .into());
    }
    let seqs = load_sequences(cfg)?;
    let report = evaluate_predictions(&preds, &seqs, manifest.target, cfg.echo())?;
    report.write(&cfg.out)?;
    let s = &report.summary;
    println!(
        "{} frames ({}): dsc {:.4} mae {:.5} ap50 {:.4} ap75 {:.4} map {:.4}",
        s.frames, report.target, s.mean_dsc, s.mean_mae, s.ap50, s.ap75, s.map
    );
    write_timing(&cfg.out, "eval", started.elapsed().as_secs_f64())?;
    Ok(report)
}

/// Clustering baseline. Uses predicted aorta masks from `cfg.predictions`
/// when given, ground-truth aorta masks otherwise.
pub fn baseline(cfg: &RunConfig) -> Result<BaselineReport> {
    let started = Instant::now();
    let seqs = load_sequences(cfg)?;
    let masks = match &cfg.predictions {
        Some(dir) => {
            let (manifest, preds) = read_predictions(dir)?;
            if manifest.target != Target::Aorta {
                return Err(ConfigError(format!("baseline needs aorta predictions, got {}", manifest.target)).into());
            }
            Some(
                preds
                    .into_iter()
                    .map(|p| p.frames.into_iter().map(|f| f.mask).collect())
                    .collect::<Vec<Vec<_>>>(),
            )
        }
        None => None,
    };
    let report = run_baseline_report(&seqs, masks.as_deref(), cfg.baseline_level, cfg.seed)?;
    report.write(&cfg.out)?;
    let s = &report.summary;
    println!(
        "baseline on {} frames: {} applicable, dsc {:.4} mae {:.5}, centroid within 3px {:.1}%",
        s.frames,
        s.applicable,
        s.mean_dsc,
        s.mean_mae,
        100.0 * s.within_3px
    );
    write_timing(&cfg.out, "baseline", started.elapsed().as_secs_f64())?;
    Ok(report)
}
