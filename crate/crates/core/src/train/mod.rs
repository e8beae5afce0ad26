//! Optimization loop, checkpoints and evaluation.
//!
//! Every source of randomness in an epoch (shuffling, dropout masks, negative
//! sampling) comes from a ChaCha8 stream keyed by `(seed, epoch)`, so a
//! checkpoint taken at an epoch boundary resumes bitwise identically.

mod checkpoint;
mod eval;
mod metrics;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::error::{DanError, Result};
use crate::mdan::{sample_negatives, PairRef};
use crate::rdan::VqaExample;
use crate::synth::MatchingItem;
use crate::tape::Tape;

pub use checkpoint::{Checkpoint, Model, ModelConfig, ModelKind, FORMAT_VERSION, MAGIC as CHECKPOINT_MAGIC};
pub use eval::{
    dot, embed_all, evaluate_retrieval, evaluate_retrieval_checkpoint, evaluate_vqa,
    evaluate_vqa_checkpoint, mean_vqa_loss, planted_attention_mass, ranks_from_embeddings,
    Direction, JointEmbedder,
};
pub use metrics::{rank_of, retrieval_metrics, RetrievalMetrics};
pub use optim::{clip_gradients, global_norm, sgd_step, OptimizerConfig};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| DanError::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| DanError::io(path, e))
    }

    /// Validation metric of every epoch, in order.
    pub fn val_metrics(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == "val")
            .filter_map(|r| r.metric)
            .collect()
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.split == "train")
            .filter_map(|r| r.loss)
            .collect()
    }
}

/// Receives the training state after every epoch.
pub trait CheckpointSink {
    /// `improved` is true when the epoch set a new best validation metric.
    fn epoch_end(&mut self, checkpoint: &Checkpoint, improved: bool) -> Result<()>;
}

/// Discards every checkpoint.
pub struct NullSink;

impl CheckpointSink for NullSink {
    fn epoch_end(&mut self, _: &Checkpoint, _: bool) -> Result<()> {
        Ok(())
    }
}

/// Keeps the best and the most recent checkpoint in memory.
#[derive(Default)]
pub struct MemorySink {
    pub best: Option<Checkpoint>,
    pub last: Option<Checkpoint>,
}

impl CheckpointSink for MemorySink {
    fn epoch_end(&mut self, checkpoint: &Checkpoint, improved: bool) -> Result<()> {
        if improved {
            self.best = Some(checkpoint.clone());
        }
        self.last = Some(checkpoint.clone());
        Ok(())
    }
}

/// Writes `best.ckpt` and `last.ckpt` into a directory.
pub struct DirSink {
    dir: PathBuf,
}

impl DirSink {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| DanError::io(&dir, e))?;
        Ok(DirSink { dir })
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last_path(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
}

impl CheckpointSink for DirSink {
    fn epoch_end(&mut self, checkpoint: &Checkpoint, improved: bool) -> Result<()> {
        if improved {
            checkpoint.save(&self.best_path())?;
        }
        checkpoint.save(&self.last_path())
    }
}

/// Training and validation data for either task.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Vqa {
        train: &'a [VqaExample],
        val: &'a [VqaExample],
    },
    Matching {
        train: &'a [MatchingItem],
        val: &'a [MatchingItem],
    },
}

impl TrainData<'_> {
    fn train_len(&self) -> usize {
        match self {
            TrainData::Vqa { train, .. } => train.len(),
            TrainData::Matching { train, .. } => train.len(),
        }
    }
}

/// The generator that drives epoch `epoch`.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Contiguous batch ranges over `n` shuffled items. For ranking losses a
/// trailing batch of one is merged into its predecessor, since a negative
/// must come from another item.
fn batch_ranges(n: usize, size: usize, min_batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut ranges: Vec<_> = (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect();
    if ranges.len() > 1 && ranges.last().is_some_and(|r| r.len() < min_batch) {
        let last = ranges.pop().expect("nonempty");
        ranges.last_mut().expect("nonempty").end = last.end;
    }
    ranges
}

/// Validation metric: VQA accuracy for r-DAN, image-to-text R@1 for m-DAN.
fn validation_metric(model: &Model, data: &TrainData<'_>) -> Result<Option<f64>> {
    match (model, data) {
        (Model::Rdan(m), TrainData::Vqa { val, .. }) if !val.is_empty() => {
            evaluate_vqa(m, val).map(Some)
        }
        (Model::Mdan(m), TrainData::Matching { val, .. }) if !val.is_empty() => {
            let metrics = evaluate_retrieval(m, val, Direction::ImageToText, &[1])?;
            Ok(Some(metrics.recall_at[&1]))
        }
        _ => Ok(None),
    }
}

fn check_pairing(model: &Model, data: &TrainData<'_>) -> Result<()> {
    match (model, data) {
        (Model::Rdan(_), TrainData::Vqa { .. }) | (Model::Mdan(_), TrainData::Matching { .. }) => {
            Ok(())
        }
        (Model::Rdan(_), TrainData::Matching { .. }) => Err(DanError::KindMismatch {
            expected: "vqa data",
            found: "matching data".into(),
        }),
        (Model::Mdan(_), TrainData::Vqa { .. }) => Err(DanError::KindMismatch {
            expected: "matching data",
            found: "vqa data".into(),
        }),
    }
}

/// Runs epochs `checkpoint.epoch..optimizer.epochs`, updating the checkpoint
/// in place and handing it to `sink` after every epoch.
pub fn train(checkpoint: &mut Checkpoint, data: TrainData<'_>, sink: &mut dyn CheckpointSink) -> Result<TrainingLog> {
    let cfg = checkpoint.optimizer.clone();
    cfg.validate()?;
    check_pairing(&checkpoint.model, &data)?;
    let n = data.train_len();
    if n == 0 {
        return Err(DanError::EmptyInput("training split"));
    }
    let min_batch = match data {
        TrainData::Vqa { .. } => 1,
        TrainData::Matching { .. } => 2,
    };
    if n < min_batch {
        return Err(DanError::Config("ranking training needs at least two pairs".into()));
    }
    let mut log = TrainingLog::default();

    for epoch in checkpoint.epoch..cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        let ranges = batch_ranges(n, cfg.batch_size.max(min_batch), min_batch);
        for (batch, range) in ranges.iter().enumerate() {
            let idx = &order[range.clone()];
            let mut dropout = (cfg.dropout_rate > 0.0)
                .then(|| Dropout::new(cfg.dropout_rate, ChaCha8Rng::seed_from_u64(rng.random())));
            let mut tape = Tape::new();
            let loss = match (&checkpoint.model, &data) {
                (Model::Rdan(m), TrainData::Vqa { train, .. }) => {
                    let examples: Vec<&VqaExample> = idx.iter().map(|&i| &train[i]).collect();
                    m.batch_loss(&mut tape, &examples, dropout.as_mut())?
                }
                (Model::Mdan(m), TrainData::Matching { train, .. }) => {
                    let pairs: Vec<PairRef<'_>> = idx
                        .iter()
                        .map(|&i| PairRef {
                            regions: &train[i].scene.regions,
                            text: &train[i].caption,
                        })
                        .collect();
                    let quads = sample_negatives(pairs.len(), &mut rng)?;
                    m.batch_loss(&mut tape, &pairs, &quads, dropout.as_mut())?
                }
                _ => unreachable!("pairing checked above"),
            };
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(DanError::Divergence { epoch, batch });
            }
            let mut grads = tape.backward(loss)?.params(&tape);
            if grads.values().any(|g| !g.is_finite()) {
                return Err(DanError::Divergence { epoch, batch });
            }
            clip_gradients(&mut grads, cfg.clip_threshold);
            sgd_step(checkpoint.model.params_mut(), &grads, lr, cfg.momentum, cfg.weight_decay)?;
            if checkpoint.model.params().iter().any(|(_, p)| !p.is_finite()) {
                return Err(DanError::Divergence { epoch, batch });
            }
            loss_sum += value;
        }
        log.records.push(LogRecord {
            epoch,
            split: "train".into(),
            loss: Some(loss_sum / ranges.len() as f64),
            metric: None,
        });
        let metric = validation_metric(&checkpoint.model, &data)?;
        log.records.push(LogRecord {
            epoch,
            split: "val".into(),
            loss: None,
            metric,
        });
        checkpoint.epoch = epoch + 1;
        let improved = match (metric, checkpoint.best_metric) {
            (Some(m), Some(best)) => m > best,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            checkpoint.best_metric = metric.or(checkpoint.best_metric);
        }
        sink.epoch_end(checkpoint, improved)?;
    }
    Ok(log)
}
