//! Mini-batch training, evaluation and pooling comparisons.
//!
//! Each training example draws its own generator from `(seed, epoch, sample)`,
//! so per-example work can run in parallel while the batch gradient is still
//! reduced in a fixed order. Results do not depend on thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitDataset, VideoSample};
use crate::model::{FrameOrder, Model, ModelConfig, ParamGrads, Pooling};
use crate::nn::{Precision, Sgd, SgdConfig};
use crate::parallel::map_indexed;
use crate::relation::{argmax, FrameFeature};
use crate::sampling::SamplingMode;
use crate::{Error, Result};

/// Base seed of the per-sample permutations used by shuffled evaluation.
pub const EVAL_SHUFFLE_SEED: u64 = 0x0005_4ff1_e5ee_d000;

/// SplitMix64 finaliser over a running hash of `parts`.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    #[serde(default)]
    pub frame_order: FrameOrder,
    #[serde(default)]
    pub precision: Precision,
    /// Inverted-dropout rate on `g` outputs; 0 disables it.
    #[serde(default)]
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 1,
            frame_order: FrameOrder::Ordered,
            precision: Precision::F32,
            dropout: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Gathers the frames at `indices` through `fetch`, one call per position.
pub fn gather_frames<F>(indices: &[usize], mut fetch: F) -> Vec<FrameFeature>
where
    F: FnMut(usize) -> FrameFeature,
{
    indices.iter().map(|&i| fetch(i)).collect()
}

fn sampled_frames(
    model: &Model,
    video: &VideoSample,
    mode: SamplingMode,
    order: FrameOrder,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<FrameFeature>> {
    let indices = model.sample_indices(video.len(), mode, rng)?;
    let mut frames = gather_frames(&indices, |i| video.frames[i].clone());
    if order == FrameOrder::Shuffled {
        frames.shuffle(rng);
    }
    Ok(frames)
}

/// Trains `model` in place and returns the per-epoch history.
pub fn train(model: &mut Model, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    dataset.validate(model.classes(), model.feature_dim())?;
    let mut sgd = Sgd::new(
        SgdConfig {
            learning_rate: config.learning_rate,
            momentum: config.momentum,
        },
        config.precision,
    );
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64, 0xe90c]));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let step = sgd.steps();
            let frozen: &Model = model;
            let outcomes = map_indexed(batch.len(), |j| {
                let idx = batch[j];
                let video = &dataset.samples[idx];
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, epoch as u64, idx as u64]));
                let frames =
                    sampled_frames(frozen, video, SamplingMode::Random, config.frame_order, &mut rng)?;
                frozen.example_gradients(&frames, video.label, config.dropout, &mut rng)
            });
            let mut total: ParamGrads = model.zero_grads();
            for (j, outcome) in outcomes.into_iter().enumerate() {
                let outcome = outcome?;
                if !outcome.loss.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        reason: format!("non-finite loss on sample {}", batch[j]),
                    });
                }
                loss_sum += outcome.loss;
                correct += usize::from(argmax(&outcome.logits) == dataset.samples[batch[j]].label);
                total.add_assign(&outcome.grads);
            }
            total.scale(1.0 / batch.len() as f64);
            sgd.step(model.param_slices_mut(), &total.slices())?;
        }
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / dataset.len() as f64,
            accuracy: correct as f64 / dataset.len() as f64,
        });
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: usize,
    pub samples: usize,
    pub top1: f64,
    /// `None` when `C <= 5`, where top-5 is trivially 1.
    pub top5: Option<f64>,
    /// `None` for classes without samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_count: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    fn from_predictions(classes: usize, rows: &[(usize, Vec<f64>)]) -> Self {
        let mut confusion = vec![vec![0usize; classes]; classes];
        let mut top5_hits = 0usize;
        for (label, logits) in rows {
            confusion[*label][argmax(logits)] += 1;
            // Rank of the true class: count of strictly better scores, ties
            // broken toward lower indices as in argmax.
            let score = logits[*label];
            let better = logits
                .iter()
                .enumerate()
                .filter(|&(i, &v)| v > score || (v == score && i < *label))
                .count();
            top5_hits += usize::from(better < 5);
        }
        let samples = rows.len();
        let per_class_count: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| (per_class_count[c] > 0).then(|| row[c] as f64 / per_class_count[c] as f64))
            .collect();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        Self {
            classes,
            samples,
            top1: correct as f64 / samples as f64,
            top5: (classes > 5).then(|| top5_hits as f64 / samples as f64),
            per_class_accuracy,
            per_class_count,
            confusion,
        }
    }

    pub fn correct(&self) -> usize {
        (0..self.classes).map(|c| self.confusion[c][c]).sum()
    }

    /// One JSON record per class followed by a summary record.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for c in 0..self.classes {
            let rec = serde_json::json!({
                "record": "class",
                "class": c,
                "count": self.per_class_count[c],
                "accuracy": self.per_class_accuracy[c],
                "confusion": self.confusion[c],
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        let rec = serde_json::json!({
            "record": "summary",
            "samples": self.samples,
            "classes": self.classes,
            "top1": self.top1,
            "top5": self.top5,
        });
        out.push_str(&rec.to_string());
        out.push('\n');
        out
    }
}

pub fn history_json_lines(history: &[EpochRecord]) -> String {
    history
        .iter()
        .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
        .collect()
}

/// Deterministic-center evaluation. Shuffled order permutes each sample's
/// sampled frames with a generator seeded from [`EVAL_SHUFFLE_SEED`] and the
/// sample index.
pub fn evaluate(model: &Model, dataset: &Dataset, order: FrameOrder) -> Result<EvalReport> {
    let rows = predict_dataset(model, dataset, order)?;
    Ok(EvalReport::from_predictions(model.classes(), &rows))
}

/// `(label, logits)` for every sample, in dataset order.
pub fn predict_dataset(
    model: &Model,
    dataset: &Dataset,
    order: FrameOrder,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    dataset.validate(model.classes(), model.feature_dim())?;
    map_indexed(dataset.len(), |i| {
        let s = &dataset.samples[i];
        let out = model.classify(s, order, mix_seed(&[EVAL_SHUFFLE_SEED, i as u64]))?;
        Ok((s.label, out.logits))
    })
    .into_iter()
    .collect()
}

/// One cell of a pooling comparison grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub pooling: Pooling,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub pooling: Pooling,
    pub frames: usize,
    pub seed: u64,
    pub top1: f64,
}

/// Trains one model per `(cell, seed)` on `split.train` and reports validation
/// top-1. Model init and training share the seed across cells.
pub fn compare_poolings(
    split: &SplitDataset,
    base: &ModelConfig,
    train_config: &TrainConfig,
    cells: &[GridCell],
    seeds: &[u64],
) -> Result<Vec<ComparisonRow>> {
    let mut rows = Vec::with_capacity(cells.len() * seeds.len());
    for cell in cells {
        for &seed in seeds {
            let config = ModelConfig {
                pooling: cell.pooling,
                frames: cell.frames,
                ..*base
            };
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x1417]));
            let mut model = Model::new(config, &mut rng)?;
            let tc = TrainConfig {
                seed,
                ..*train_config
            };
            train(&mut model, &split.train, &tc)?;
            let report = evaluate(&model, &split.val, FrameOrder::Ordered)?;
            rows.push(ComparisonRow {
                pooling: cell.pooling,
                frames: cell.frames,
                seed,
                top1: report.top1,
            });
        }
    }
    Ok(rows)
}

/// Mean top-1 per `(pooling, frames)` in first-seen order.
pub fn summarize_comparison(rows: &[ComparisonRow]) -> Vec<(Pooling, usize, f64)> {
    let mut out: Vec<(Pooling, usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(p, f, _, _)| *p == r.pooling && *f == r.frames) {
            Some(entry) => {
                entry.2 += r.top1;
                entry.3 += 1;
            }
            None => out.push((r.pooling, r.frames, r.top1, 1)),
        }
    }
    out.into_iter().map(|(p, f, s, n)| (p, f, s / n as f64)).collect()
}
