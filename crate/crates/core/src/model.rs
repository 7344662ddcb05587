//! One model type covering the relation network and the two pooling baselines.
//!
//! - [`Pooling::TemporalRelation`]: a [`MultiScaleTrn`] over `N` sampled frames.
//! - [`Pooling::AveragePool`]: the `N` sampled features are averaged and fed to
//!   an MLP head (`D -> H -> H -> C`). The mean is computed per dimension over
//!   sorted values, so it is bit-exactly invariant to frame order.
//! - [`Pooling::SingleFrame`]: the same head applied to one frame.
//!
//! Training draws `k` tuples per scale for every example. At inference a
//! relation model uses the fixed sets from [`inference_tuples`]: all tuples
//! per scale up to a cap, with `tuple_seed` choosing the subset only when a
//! scale exceeds the cap. Predictions are a pure function of the input frames.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::VideoSample;
use crate::nn::{softmax_cross_entropy, Activation, GradientSet, Mlp, Trace};
use crate::relation::{Dropout, FrameFeature, MultiScaleTrn};
use crate::sampling::{
    inference_tuples, sample_tuples_by_scale, segment_sample, SamplingMode, SamplingPlan,
    TuplesByScale,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    TemporalRelation,
    AveragePool,
    SingleFrame,
}

impl Pooling {
    pub fn name(self) -> &'static str {
        match self {
            Pooling::TemporalRelation => "temporal-relation",
            Pooling::AveragePool => "average-pool",
            Pooling::SingleFrame => "single-frame",
        }
    }

    pub(crate) fn code(self) -> u32 {
        match self {
            Pooling::TemporalRelation => 0,
            Pooling::AveragePool => 1,
            Pooling::SingleFrame => 2,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Pooling::TemporalRelation),
            1 => Some(Pooling::AveragePool),
            2 => Some(Pooling::SingleFrame),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FrameOrder {
    #[default]
    Ordered,
    /// Sampled frames are permuted before they reach the relation modules.
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub pooling: Pooling,
    pub feature_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    /// Sampled frames per video (the largest relation scale).
    pub frames: usize,
    /// Tuples per scale at inference.
    pub per_scale: usize,
    pub tuple_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden == 0 || self.classes < 2 {
            return Err(Error::invalid("model needs D >= 1, H >= 1 and C >= 2"));
        }
        let min_frames = if self.pooling == Pooling::SingleFrame { 1 } else { 2 };
        if self.frames < min_frames || self.per_scale == 0 {
            return Err(Error::invalid("model needs N >= 2 and k >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Body {
    Relation(MultiScaleTrn),
    Head(Mlp),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    body: Body,
    tuples: TuplesByScale,
}

/// Scores for one input plus per-scale terms when the model has them.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub logits: Vec<f64>,
    pub per_scale: Vec<(usize, Vec<f64>)>,
}

/// Flat gradient blocks in the order of [`Model::param_slices`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f64>>);

impl ParamGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.0.iter().map(Vec::as_slice).collect()
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for x in self.0.iter_mut().flatten() {
            *x *= factor;
        }
    }
}

/// Loss, scores and gradients of one training example.
#[derive(Debug, Clone)]
pub struct ExampleOutcome {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: ParamGrads,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let body = match config.pooling {
            Pooling::TemporalRelation => Body::Relation(MultiScaleTrn::random(
                config.feature_dim,
                config.hidden,
                config.classes,
                config.frames,
                rng,
            )?),
            Pooling::AveragePool | Pooling::SingleFrame => Body::Head(pooled_head(&config, rng)?),
        };
        Self::from_body(config, body)
    }

    pub fn from_relation(trn: MultiScaleTrn, per_scale: usize, tuple_seed: u64) -> Result<Self> {
        let config = ModelConfig {
            pooling: Pooling::TemporalRelation,
            feature_dim: trn.feature_dim(),
            hidden: trn.hidden(),
            classes: trn.classes(),
            frames: trn.max_scale(),
            per_scale,
            tuple_seed,
        };
        Self::from_body(config, Body::Relation(trn))
    }

    /// Wraps an MLP head as an average-pool (`frames >= 2`) or single-frame model.
    pub fn from_head(pooling: Pooling, head: Mlp, frames: usize) -> Result<Self> {
        if pooling == Pooling::TemporalRelation {
            return Err(Error::invalid("a head model cannot use temporal-relation pooling"));
        }
        let config = ModelConfig {
            pooling,
            feature_dim: head.in_dim(),
            hidden: head.layers()[0].out_dim(),
            classes: head.out_dim(),
            frames,
            per_scale: 1,
            tuple_seed: 0,
        };
        Self::from_body(config, Body::Head(head))
    }

    pub(crate) fn from_body(config: ModelConfig, body: Body) -> Result<Self> {
        config.validate()?;
        let tuples = match &body {
            Body::Relation(trn) => {
                if trn.max_scale() != config.frames
                    || trn.feature_dim() != config.feature_dim
                    || trn.classes() != config.classes
                {
                    return Err(Error::invalid("relation network disagrees with model config"));
                }
                inference_tuples(config.frames, config.tuple_seed)?
            }
            Body::Head(head) => {
                if head.in_dim() != config.feature_dim || head.out_dim() != config.classes {
                    return Err(Error::invalid("head disagrees with model config"));
                }
                TuplesByScale::new()
            }
        };
        Ok(Self {
            config,
            body,
            tuples,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn pooling(&self) -> Pooling {
        self.config.pooling
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    /// Frames consumed per prediction.
    pub fn input_frames(&self) -> usize {
        match self.config.pooling {
            Pooling::SingleFrame => 1,
            _ => self.config.frames,
        }
    }

    pub fn relation(&self) -> Option<&MultiScaleTrn> {
        match &self.body {
            Body::Relation(trn) => Some(trn),
            Body::Head(_) => None,
        }
    }

    pub fn relation_mut(&mut self) -> Option<&mut MultiScaleTrn> {
        match &mut self.body {
            Body::Relation(trn) => Some(trn),
            Body::Head(_) => None,
        }
    }

    pub fn head(&self) -> Option<&Mlp> {
        match &self.body {
            Body::Head(h) => Some(h),
            Body::Relation(_) => None,
        }
    }

    /// Fixed per-scale tuple sets used at inference (empty for head models).
    pub fn inference_tuples(&self) -> &TuplesByScale {
        &self.tuples
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        match &self.body {
            Body::Relation(trn) => trn.param_slices(),
            Body::Head(h) => h.param_slices(),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match &mut self.body {
            Body::Relation(trn) => trn.param_slices_mut(),
            Body::Head(h) => h.param_slices_mut(),
        }
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads(self.param_slices().iter().map(|s| vec![0.0; s.len()]).collect())
    }

    fn check_frames(&self, frames: &[FrameFeature]) -> Result<()> {
        if frames.len() != self.input_frames() {
            return Err(Error::invalid(format!(
                "{} model expects {} frames, got {}",
                self.pooling().name(),
                self.input_frames(),
                frames.len()
            )));
        }
        if frames.iter().any(|f| f.len() != self.config.feature_dim) {
            return Err(Error::invalid(format!(
                "frame dimension differs from D = {}",
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    /// Scores for already-sampled frames using the fixed inference tuples.
    pub fn infer(&self, frames: &[FrameFeature]) -> Result<Inference> {
        self.check_frames(frames)?;
        match &self.body {
            Body::Relation(trn) => {
                let out = trn.forward(frames, &self.tuples)?;
                Ok(Inference {
                    logits: out.logits,
                    per_scale: out.per_scale,
                })
            }
            Body::Head(head) => Ok(Inference {
                logits: head.forward_unchecked(&mean_pool(frames)),
                per_scale: Vec::new(),
            }),
        }
    }

    /// Frame positions this model reads from a video of `n` frames.
    pub fn sample_indices<R: Rng + ?Sized>(
        &self,
        n: usize,
        mode: SamplingMode,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::invalid("cannot sample from an empty video"));
        }
        match self.config.pooling {
            Pooling::SingleFrame => Ok(vec![match mode {
                SamplingMode::Center => n / 2,
                SamplingMode::Random => rng.random_range(0..n),
            }]),
            _ => {
                let plan = SamplingPlan::new(self.config.frames, self.config.per_scale, mode)?;
                Ok(segment_sample(n, &plan, rng)?.indices().to_vec())
            }
        }
    }

    /// Deterministic-center prediction for a whole video. In shuffled order the
    /// sampled frames are permuted with a generator seeded by `shuffle_seed`.
    pub fn classify(
        &self,
        video: &VideoSample,
        order: FrameOrder,
        shuffle_seed: u64,
    ) -> Result<Inference> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let indices = self.sample_indices(video.len(), SamplingMode::Center, &mut unused)?;
        let mut frames: Vec<FrameFeature> =
            indices.iter().map(|&i| video.frames[i].clone()).collect();
        if order == FrameOrder::Shuffled {
            let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
            frames.shuffle(&mut rng);
        }
        self.infer(&frames)
    }

    /// Forward and backward pass of one training example on sampled frames.
    /// Relation models draw fresh tuple sets from `rng`.
    pub fn example_gradients<R: Rng + ?Sized>(
        &self,
        frames: &[FrameFeature],
        label: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<ExampleOutcome> {
        self.check_frames(frames)?;
        match &self.body {
            Body::Relation(trn) => {
                let tuples = sample_tuples_by_scale(frames.len(), self.config.per_scale, rng)?;
                let mut drop = Dropout { rate: dropout, rng };
                let traces =
                    trn.forward_traces(frames, &tuples, (dropout > 0.0).then_some(&mut drop));
                let logits = trn.traces_logits(&traces);
                let (loss, upstream) = softmax_cross_entropy(&logits, label)?;
                let grads = trn.backward_traces(&traces, frames, &tuples, &upstream);
                let blocks = grads
                    .slices()
                    .into_iter()
                    .map(<[f64]>::to_vec)
                    .collect();
                Ok(ExampleOutcome {
                    loss,
                    logits,
                    grads: ParamGrads(blocks),
                })
            }
            Body::Head(head) => {
                let trace: Trace = head.forward_trace_unchecked(&mean_pool(frames));
                let logits = trace.output().to_vec();
                let (loss, upstream) = softmax_cross_entropy(&logits, label)?;
                let mut g = GradientSet::zeros_like(head);
                head.backward_unchecked(&trace, &upstream, &mut g);
                Ok(ExampleOutcome {
                    loss,
                    logits,
                    grads: ParamGrads(g.slices().into_iter().map(<[f64]>::to_vec).collect()),
                })
            }
        }
    }

    /// Applies `f` to every parameter; used by tests and tools that build
    /// degenerate models.
    pub fn map_params(&mut self, mut f: impl FnMut(f64) -> f64) {
        for s in self.param_slices_mut() {
            for v in s {
                *v = f(*v);
            }
        }
    }
}

fn pooled_head<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Mlp> {
    Mlp::random(
        &[config.feature_dim, config.hidden, config.hidden, config.classes],
        &[Activation::Relu, Activation::Relu, Activation::None],
        rng,
    )
}

/// Per-dimension mean over frames, summing sorted values so the result does
/// not depend on frame order.
pub fn mean_pool(frames: &[FrameFeature]) -> Vec<f64> {
    let dim = frames.first().map_or(0, Vec::len);
    let n = frames.len() as f64;
    let mut column = Vec::with_capacity(frames.len());
    (0..dim)
        .map(|j| {
            column.clear();
            column.extend(frames.iter().map(|f| f[j]));
            column.sort_by(f64::total_cmp);
            column.iter().sum::<f64>() / n
        })
        .collect()
}
