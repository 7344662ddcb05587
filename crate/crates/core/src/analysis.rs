//! Interpretability tools for trained relation models: representative tuple
//! ranking, anchor-based alignment, early recognition, per-class order
//! sensitivity and hidden-vector export.

use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::data::{Dataset, VideoSample};
use crate::model::{FrameOrder, Model};
use crate::parallel::map_indexed;
use crate::relation::{argmax, FrameFeature, FrameTuple, MultiScaleTrn};
use crate::sampling::{binomial, enumerate_tuples, SamplingMode};
use crate::training::{evaluate, EvalReport};
use crate::{Error, Result};

/// Default anchor count for [`align_videos`].
pub const DEFAULT_ANCHORS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedTuple {
    pub scale: usize,
    /// Positions among the `N` sampled frames.
    pub positions: Vec<usize>,
    /// Indices into the original video.
    pub frames: Vec<usize>,
    /// Ranked class score of the scale's relation term on this tuple alone.
    pub response: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ranking {
    pub class: usize,
    pub tuples: Vec<RankedTuple>,
    /// Set when `top_m` exceeded the number of tuples and was clipped.
    pub warning: Option<String>,
}

fn relation_of(model: &Model) -> Result<&MultiScaleTrn> {
    model
        .relation()
        .ok_or_else(|| Error::invalid("analysis requires a temporal-relation model"))
}

/// Center-sampled frame indices and features of a video.
fn center_frames(model: &Model, video: &VideoSample) -> Result<(Vec<usize>, Vec<FrameFeature>)> {
    let mut unused = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let idx = model.sample_indices(video.len(), SamplingMode::Center, &mut unused)?;
    let frames = idx.iter().map(|&i| video.frames[i].clone()).collect();
    Ok((idx, frames))
}

/// Ranks every `d`-tuple of the center-sampled frames by the scale-`d`
/// response for `class` (the model's prediction when `None`). Ties keep
/// lexicographic tuple order.
pub fn representative_tuples_for(
    model: &Model,
    video: &VideoSample,
    d: usize,
    top_m: usize,
    class: Option<usize>,
) -> Result<Ranking> {
    let trn = relation_of(model)?;
    let n = trn.max_scale();
    if d < 2 || d > n {
        return Err(Error::invalid(format!("scale {d} outside [2, {n}]")));
    }
    if video.len() < n {
        return Err(Error::invalid(format!(
            "video has {} frames, ranking needs at least {n}",
            video.len()
        )));
    }
    let (indices, frames) = center_frames(model, video)?;
    let class = match class {
        Some(c) if c >= model.classes() => {
            return Err(Error::invalid(format!("class {c} out of range")));
        }
        Some(c) => c,
        None => argmax(&model.infer(&frames)?.logits),
    };
    let module = trn.module(d).expect("scale checked above");
    let mut ranked: Vec<RankedTuple> = enumerate_tuples(n, d)?
        .into_iter()
        .map(|t: FrameTuple| {
            let response = module.forward(&frames, std::slice::from_ref(&t))?[class];
            Ok(RankedTuple {
                scale: d,
                frames: t.indices().iter().map(|&p| indices[p]).collect(),
                positions: t.indices().to_vec(),
                response,
            })
        })
        .collect::<Result<_>>()?;
    ranked.sort_by(|a, b| {
        b.response
            .total_cmp(&a.response)
            .then_with(|| a.positions.cmp(&b.positions))
    });
    let total = binomial(n, d) as usize;
    let warning = (top_m > total).then(|| {
        format!("requested top {top_m} of {total} tuples at scale {d}; returning all {total}")
    });
    ranked.truncate(top_m.min(total));
    Ok(Ranking {
        class,
        tuples: ranked,
        warning,
    })
}

/// [`representative_tuples_for`] ranked by the model's predicted class.
pub fn representative_tuples(
    model: &Model,
    video: &VideoSample,
    d: usize,
    top_m: usize,
) -> Result<Ranking> {
    representative_tuples_for(model, video, d, top_m, None)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentMap {
    pub class: usize,
    /// Strictly increasing anchor frame indices per video.
    pub anchors: Vec<Vec<usize>>,
    /// Per video, `A - 1` segment rates relative to the first video:
    /// `(a[j+1] - a[j]) / (ref[j+1] - ref[j])`.
    pub warp_rates: Vec<Vec<f64>>,
}

/// Aligns videos of one class by the frames of their top-ranked `A`-tuple.
pub fn align_videos(model: &Model, videos: &[VideoSample], anchors: usize) -> Result<AlignmentMap> {
    if videos.len() < 2 {
        return Err(Error::invalid("alignment needs at least two videos"));
    }
    if anchors < 2 {
        return Err(Error::invalid("alignment needs at least two anchors"));
    }
    let class = videos[0].label;
    if videos.iter().any(|v| v.label != class) {
        return Err(Error::invalid("alignment videos must share one class"));
    }
    if let Some(v) = videos.iter().find(|v| v.len() < anchors) {
        return Err(Error::invalid(format!(
            "video with {} frames is shorter than {anchors} anchors",
            v.len()
        )));
    }
    let anchor_sets = map_indexed(videos.len(), |i| {
        let ranking = representative_tuples_for(model, &videos[i], anchors, 1, Some(class))?;
        Ok(ranking.tuples[0].frames.clone())
    })
    .into_iter()
    .collect::<Result<Vec<Vec<usize>>>>()?;
    if let Some(bad) = anchor_sets.iter().find(|a| a.windows(2).any(|w| w[0] >= w[1])) {
        return Err(Error::invalid(format!(
            "anchors {bad:?} are not strictly increasing; video shorter than N"
        )));
    }
    let reference = &anchor_sets[0];
    let warp_rates = anchor_sets
        .iter()
        .map(|a| {
            (0..anchors - 1)
                .map(|j| (a[j + 1] - a[j]) as f64 / (reference[j + 1] - reference[j]) as f64)
                .collect()
        })
        .collect();
    Ok(AlignmentMap {
        class,
        anchors: anchor_sets,
        warp_rates,
    })
}

/// Evaluates on the leading `ceil(fraction * n)` frames of every video.
pub fn early_recognition_eval(model: &Model, dataset: &Dataset, fraction: f64) -> Result<EvalReport> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let truncated = Dataset::new(
        dataset
            .samples
            .iter()
            .map(|s| {
                let len = (fraction * s.len() as f64).ceil() as usize;
                if len == 0 {
                    return Err(Error::invalid("prefix shorter than one frame"));
                }
                Ok(s.prefix(len))
            })
            .collect::<Result<_>>()?,
    );
    evaluate(model, &truncated, FrameOrder::Ordered)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassDelta {
    pub class: usize,
    pub count: usize,
    pub ordered: f64,
    pub shuffled: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderSensitivity {
    /// Classes with samples, sorted by descending delta then class id.
    pub rows: Vec<ClassDelta>,
    pub ordered_top1: f64,
    pub shuffled_top1: f64,
}

impl OrderSensitivity {
    pub fn gap(&self) -> f64 {
        self.ordered_top1 - self.shuffled_top1
    }
}

/// Per-class ordered minus shuffled accuracy of one model.
pub fn class_order_sensitivity(model: &Model, dataset: &Dataset) -> Result<OrderSensitivity> {
    let ordered = evaluate(model, dataset, FrameOrder::Ordered)?;
    let shuffled = evaluate(model, dataset, FrameOrder::Shuffled)?;
    let mut rows: Vec<ClassDelta> = (0..model.classes())
        .filter_map(|c| {
            let (o, s) = (ordered.per_class_accuracy[c]?, shuffled.per_class_accuracy[c]?);
            Some(ClassDelta {
                class: c,
                count: ordered.per_class_count[c],
                ordered: o,
                shuffled: s,
                delta: o - s,
            })
        })
        .collect();
    rows.sort_by(|a, b| b.delta.total_cmp(&a.delta).then(a.class.cmp(&b.class)));
    Ok(OrderSensitivity {
        rows,
        ordered_top1: ordered.top1,
        shuffled_top1: shuffled.top1,
    })
}

/// Post-sum, pre-`h` hidden vector of the scale-`d` module for every sample,
/// using center sampling and the model's inference tuples.
pub fn export_embeddings(model: &Model, dataset: &Dataset, d: usize) -> Result<Vec<Vec<f64>>> {
    let trn = relation_of(model)?;
    let module = trn
        .module(d)
        .ok_or_else(|| Error::invalid(format!("model has no scale-{d} module")))?;
    let tuples = &model.inference_tuples()[&d];
    dataset.validate(model.classes(), model.feature_dim())?;
    map_indexed(dataset.len(), |i| {
        let (_, frames) = center_frames(model, &dataset.samples[i])?;
        module.hidden_sum(&frames, tuples)
    })
    .into_iter()
    .collect()
}

/// Tab-separated text: a header `index label h0 .. h{H-1}`, then one row per
/// sample with values in `%.8e` (9 significant digits).
pub fn format_embeddings(labels: &[usize], vectors: &[Vec<f64>]) -> String {
    let width = vectors.first().map_or(0, Vec::len);
    let mut out = String::from("index\tlabel");
    for j in 0..width {
        out.push_str(&format!("\th{j}"));
    }
    out.push('\n');
    for (i, (label, v)) in labels.iter().zip(vectors).enumerate() {
        out.push_str(&format!("{i}\t{label}"));
        for x in v {
            out.push_str(&format!("\t{x:.8e}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_embeddings(path: impl AsRef<Path>, labels: &[usize], vectors: &[Vec<f64>]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(format_embeddings(labels, vectors).as_bytes())?;
    Ok(())
}

/// Parses [`format_embeddings`] output back into `(labels, vectors)`.
pub fn parse_embeddings(text: &str) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::invalid("empty embedding file"))?;
    let width = header.split('\t').count().saturating_sub(2);
    let mut labels = Vec::new();
    let mut vectors = Vec::new();
    for (row, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != width + 2 {
            return Err(Error::invalid(format!("row {row} has {} columns", cols.len())));
        }
        let bad = |c: &str| Error::invalid(format!("row {row}: cannot parse {c:?}"));
        labels.push(cols[1].parse().map_err(|_| bad(cols[1]))?);
        vectors.push(
            cols[2..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| bad(c)))
                .collect::<Result<_>>()?,
        );
    }
    Ok((labels, vectors))
}

/// Mean within-class and between-class Euclidean distance over all pairs.
pub fn class_separation(labels: &[usize], vectors: &[Vec<f64>]) -> (f64, f64) {
    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..vectors.len() {
        for j in i + 1..vectors.len() {
            let d = vectors[i]
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if labels[i] == labels[j] {
                within += d;
                nw += 1;
            } else {
                between += d;
                nb += 1;
            }
        }
    }
    (within / nw.max(1) as f64, between / nb.max(1) as f64)
}
