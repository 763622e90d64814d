//! Training loop: per-step sampling from `(seed, step)`, Adam, a CSV loss
//! log and resumable checkpoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::io::{Checkpoint, CheckpointMeta};
use crate::losses::{combined_loss, LossConfig, LossValues};
use crate::model::{BranchInput, Model, ModelConfig, ReferenceInput, Target};
use crate::optim::Adam;
use crate::synth::augment::{augment, AugmentParams};
use crate::synth::{FrameSample, Sequence};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const LOSS_LOG_HEADER: [&str; 5] = ["step", "loss", "dice", "bce", "mse"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub target: Target,
    pub epochs: u64,
    /// Overrides `epochs * steps_per_epoch` when set.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossConfig,
    /// Frames between the intermediate reference and the search frame.
    pub interval: usize,
    pub augment: bool,
    pub shadow_probability: f64,
    /// Checkpoint cadence in epochs; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target: Target::Catheter,
            epochs: 10,
            max_steps: None,
            batch_size: 4,
            learning_rate: 1e-3,
            loss: LossConfig::default(),
            interval: 2,
            augment: false,
            shadow_probability: 0.3,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=1.0).contains(&self.shadow_probability) {
            return Err(Error::contract("shadow probability outside [0, 1]"));
        }
        Ok(())
    }
}

/// One logged optimizer step: batch means of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub loss: f64,
    pub dice: f64,
    pub bce: f64,
    pub mse: f64,
}

/// Training frames of one sequence: those showing a catheter.
#[derive(Clone, Debug)]
struct Track {
    frames: Vec<FrameSample>,
}

/// What one optimizer step trains on.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sequence: usize,
    /// Position within the sequence's training frames.
    pub search: usize,
    pub intermediate: usize,
    pub augment: Option<AugmentParams>,
}

/// Per-step sampler over the training frames of several sequences.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    tracks: Vec<Track>,
    image_size: usize,
}

impl TrainingSet {
    pub fn new(sequences: &[Sequence]) -> Result<Self> {
        let tracks: Vec<Track> = sequences
            .iter()
            .map(|s| Track {
                frames: s.training_frames().into_iter().cloned().collect(),
            })
            .filter(|t| !t.frames.is_empty())
            .collect();
        if tracks.is_empty() {
            return Err(Error::contract("no training frames (every frame lacks a catheter)"));
        }
        let image_size = tracks[0].frames[0].image.shape()[0];
        Ok(TrainingSet { tracks, image_size })
    }

    pub fn frame_count(&self) -> usize {
        self.tracks.iter().map(|t| t.frames.len()).sum()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn steps_per_epoch(&self, batch: usize) -> u64 {
        self.frame_count().div_ceil(batch.max(1)) as u64
    }

    /// The batch for `step`, a pure function of `(config.seed, step)`.
    pub fn batch(&self, config: &TrainConfig, step: u64) -> Vec<Sample> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(step);
        (0..config.batch_size)
            .map(|_| {
                let sequence = rng.gen_range(0..self.tracks.len());
                let search = rng.gen_range(0..self.tracks[sequence].frames.len());
                let augment = config
                    .augment
                    .then(|| AugmentParams::sample(&mut rng, self.image_size, config.shadow_probability));
                Sample {
                    sequence,
                    search,
                    intermediate: search.saturating_sub(config.interval),
                    augment,
                }
            })
            .collect()
    }

    fn frame(&self, sequence: usize, pos: usize) -> &FrameSample {
        &self.tracks[sequence].frames[pos]
    }
}

pub fn target_mask(frame: &FrameSample, target: Target) -> &Tensor {
    match target {
        Target::Aorta => &frame.aorta_mask,
        Target::Catheter => &frame.catheter_mask,
    }
}

#[derive(Debug)]
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam<f32>,
    pub config: TrainConfig,
    pub set: TrainingSet,
    pub log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, set: TrainingSet) -> Result<Self> {
        config.validate()?;
        if set.image_size() != model.config.image_size {
            return Err(Error::dim(format!(
                "dataset frames are {}px, model expects {}px",
                set.image_size(),
                model.config.image_size
            )));
        }
        let adam = Adam::new(&model.store, config.learning_rate);
        Ok(Trainer {
            model,
            adam,
            config,
            set,
            log: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`]. The
    /// model configuration comes from the checkpoint.
    pub fn resume(dir: &Path, config: TrainConfig, set: TrainingSet) -> Result<Self> {
        let (model, adam) = load_checkpoint(dir)?;
        let mut t = Trainer::new(model, config, set)?;
        if let Some(adam) = adam {
            t.adam = adam;
            t.adam.lr = t.config.learning_rate;
        }
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.set.steps_per_epoch(self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        self.config
            .max_steps
            .unwrap_or(self.config.epochs * self.steps_per_epoch())
    }

    /// Loss of one sample on `tape`, plus its values.
    fn sample_loss(&self, tape: &mut Tape<f32>, s: &Sample) -> Result<(crate::Var, LossValues)> {
        let target = self.config.target;
        let init = self.set.frame(s.sequence, 0);
        let inter = self.set.frame(s.sequence, s.intermediate);
        let raw = self.set.frame(s.sequence, s.search);
        let augmented;
        let search = match &s.augment {
            Some(p) => {
                augmented = augment(raw, p);
                &augmented
            }
            None => raw,
        };
        let n = self.model.config.image_size;
        let out = self.model.forward(
            tape,
            ReferenceInput {
                branch: BranchInput::Image(&init.image),
                mask: target_mask(init, target),
            },
            ReferenceInput {
                branch: BranchInput::Image(&inter.image),
                mask: target_mask(inter, target),
            },
            BranchInput::Image(&search.image),
            &[],
        )?;
        let truth = tape.constant(target_mask(search, target).reshaped([1, n, n])?);
        let terms = combined_loss(tape, out.prob, truth, &self.config.loss)?;
        Ok((terms.total, terms.values(tape)))
    }

    /// One optimizer step on the batch for the current step index.
    pub fn step(&mut self) -> Result<LogRow> {
        let step = self.adam.step;
        let batch = self.set.batch(&self.config, step);
        let mut tape = Tape::new();
        let mut totals = Vec::with_capacity(batch.len());
        let mut mean = LossValues::default();
        let inv = 1.0 / batch.len() as f64;
        for s in &batch {
            let (total, v) = self.sample_loss(&mut tape, s)?;
            totals.push(total);
            mean.total += v.total * inv;
            mean.dice += v.dice * inv;
            mean.bce += v.bce * inv;
            mean.mse += v.mse * inv;
        }
        if !mean.total.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let sum = totals[1..].iter().try_fold(totals[0], |acc, &t| tape.add(acc, t))?;
        let loss = tape.scale(sum, inv as f32)?;
        tape.backward(loss)?;
        self.model.store.zero_grads();
        self.model.store.accumulate_grads(&tape);
        if self.model.store.iter().any(|(_, t)| t.grad.as_ref().is_some_and(|g| g.iter().any(|x| !x.is_finite()))) {
            return Err(Error::NonFinite { op: "gradient" });
        }
        self.adam.step(&mut self.model.store)?;
        let row = LogRow {
            step,
            loss: mean.total,
            dice: mean.dice,
            bce: mean.bce,
            mse: mean.mse,
        };
        self.log.push(row);
        Ok(row)
    }

    /// Trains until [`Trainer::total_steps`], calling `on_checkpoint` at
    /// every checkpoint boundary (and never for the start state).
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        let every = self.config.checkpoint_every * self.steps_per_epoch();
        while self.adam.step < self.total_steps() {
            self.step()?;
            if every > 0 && self.adam.step.is_multiple_of(every) && self.adam.step < self.total_steps() {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint<f32> {
        let per_epoch = self.steps_per_epoch().max(1);
        Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_FORMAT,
                step: self.adam.step,
                epoch: self.adam.step / per_epoch,
                learning_rate: self.adam.lr,
                params: Vec::new(),
                config: serde_json::json!({
                    "model": self.model.config,
                    "train": self.config,
                }),
            },
            params: self.model.store.clone(),
            adam: Some(self.adam.clone()),
        }
    }
}

/// A model whose parameters come from a checkpoint directory, plus the
/// optimizer state if one was saved.
pub fn load_checkpoint(dir: &Path) -> Result<(Model<f32>, Option<Adam<f32>>)> {
    let ck = Checkpoint::<f32>::load(dir)?;
    let cfg: ModelConfig = serde_json::from_value(ck.meta.config["model"].clone())
        .map_err(|e| Error::parse(dir.join("checkpoint.json"), format!("model config: {e}")))?;
    let mut model = Model::new(cfg)?;
    let loaded = model.store.load_from(&ck.params)?;
    if loaded != model.store.len() || ck.params.len() != model.store.len() {
        return Err(Error::parse(
            dir,
            format!("checkpoint holds {} parameters, model has {}", ck.params.len(), model.store.len()),
        ));
    }
    Ok((model, ck.adam))
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    if rows.is_empty() {
        w.write_record(LOSS_LOG_HEADER).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::parse(path, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate_dataset;

    fn tiny_model() -> Model<f32> {
        let mut cfg = ModelConfig::two_stage();
        cfg.image_size = 32;
        Model::new(cfg).unwrap()
    }

    fn data() -> Vec<Sequence> {
        generate_dataset(2, 32, 5, 7).unwrap()
    }

    fn config() -> TrainConfig {
        TrainConfig {
            max_steps: Some(6),
            batch_size: 2,
            augment: true,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batches_depend_only_on_seed_and_step() {
        let set = TrainingSet::new(&data()).unwrap();
        let c = config();
        assert_eq!(set.batch(&c, 4), set.batch(&c, 4));
        assert_ne!(set.batch(&c, 4), set.batch(&c, 5));
        for s in set.batch(&c, 9) {
            assert!(s.intermediate <= s.search);
            assert!(s.search - s.intermediate <= c.interval);
        }
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(tiny_model(), config(), TrainingSet::new(&data()).unwrap()).unwrap();
        a.run(|_| Ok(())).unwrap();

        let mut b = Trainer::new(tiny_model(), config(), TrainingSet::new(&data()).unwrap()).unwrap();
        for _ in 0..3 {
            b.step().unwrap();
        }
        b.checkpoint().save(dir.path()).unwrap();
        let mut c = Trainer::resume(dir.path(), config(), TrainingSet::new(&data()).unwrap()).unwrap();
        assert_eq!(c.step_count(), 3);
        c.run(|_| Ok(())).unwrap();
        let joined: Vec<LogRow> = b.log.iter().chain(&c.log).copied().collect();
        assert_eq!(a.log, joined);
        for ((n, x), (_, y)) in a.model.store.iter().zip(c.model.store.iter()) {
            assert_eq!(x.data(), y.data(), "{n}");
        }
    }

    #[test]
    fn zero_steps_checkpoint_is_the_initialization() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let cfg = TrainConfig {
            max_steps: Some(0),
            ..config()
        };
        let mut t = Trainer::new(model.clone(), cfg, TrainingSet::new(&data()).unwrap()).unwrap();
        t.run(|_| Ok(())).unwrap();
        t.checkpoint().save(dir.path()).unwrap();
        let (loaded, _) = load_checkpoint(dir.path()).unwrap();
        for ((_, x), (_, y)) in model.store.iter().zip(loaded.store.iter()) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn loss_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("loss.csv");
        let rows = vec![
            LogRow {
                step: 0,
                loss: 1.0 / 3.0,
                dice: 0.1,
                bce: 2e-9,
                mse: 7.0,
            },
            LogRow {
                step: 1,
                loss: 0.5,
                dice: 0.25,
                bce: 0.125,
                mse: 0.0,
            },
        ];
        write_loss_log(&p, &rows).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("step,loss,dice,bce,mse\n"));
        assert_eq!(read_loss_log(&p).unwrap(), rows);
    }

    #[test]
    fn checkpoints_follow_epoch_cadence() {
        let set = TrainingSet::new(&data()).unwrap();
        let per_epoch = set.steps_per_epoch(2);
        let cfg = TrainConfig {
            max_steps: None,
            epochs: 3,
            checkpoint_every: 1,
            augment: false,
            ..config()
        };
        let mut t = Trainer::new(tiny_model(), cfg, set).unwrap();
        let mut seen = Vec::new();
        t.run(|t| {
            seen.push(t.step_count());
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![per_epoch, 2 * per_epoch]);
        assert_eq!(t.step_count(), 3 * per_epoch);
    }
}
