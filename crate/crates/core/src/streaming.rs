//! Rolling predictions over a queue of key-frame features.
//!
//! Every `stride`-th incoming frame is a key frame. Its feature is enqueued
//! once; the queue keeps the `N` most recent key frames (strict FIFO) and,
//! once full, every new key frame yields a prediction over the buffered
//! features in arrival order using the model's fixed inference tuples.

use std::collections::VecDeque;

use serde::Serialize;

use crate::model::Model;
use crate::relation::{predict, FrameFeature};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamPrediction {
    /// 1-based count of frames seen when the prediction was made.
    pub frame: u64,
    pub class: usize,
    pub probabilities: Vec<f64>,
    pub logits: Vec<f64>,
    pub per_scale: Vec<(usize, Vec<f64>)>,
    /// 1-based arrival numbers of the buffered key frames, oldest first.
    pub key_frames: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct StreamQueue {
    capacity: usize,
    stride: usize,
    feature_dim: usize,
    buffer: VecDeque<(u64, FrameFeature)>,
    frames_seen: u64,
    enqueued: u64,
}

impl StreamQueue {
    /// Queue sized for `model` with key-frame spacing `stride`.
    pub fn for_model(model: &Model, stride: usize) -> Result<Self> {
        Self::new(model.input_frames(), stride, model.feature_dim())
    }

    pub fn new(capacity: usize, stride: usize, feature_dim: usize) -> Result<Self> {
        if capacity == 0 || stride == 0 || feature_dim == 0 {
            return Err(Error::invalid("queue capacity, stride and D must be positive"));
        }
        Ok(Self {
            capacity,
            stride,
            feature_dim,
            buffer: VecDeque::with_capacity(capacity),
            frames_seen: 0,
            enqueued: 0,
        })
    }

    pub fn frames_seen(&self) -> u64 {
        self.frames_seen
    }

    /// Total key-frame features ever enqueued.
    pub fn enqueued(&self) -> u64 {
        self.enqueued
    }

    pub fn is_warm(&self) -> bool {
        self.buffer.len() == self.capacity
    }

    pub fn buffered(&self) -> impl Iterator<Item = &FrameFeature> {
        self.buffer.iter().map(|(_, f)| f)
    }

    pub fn buffered_arrivals(&self) -> Vec<u64> {
        self.buffer.iter().map(|(i, _)| *i).collect()
    }

    pub fn push(&mut self, model: &Model, feature: FrameFeature) -> Result<Option<StreamPrediction>> {
        if feature.len() != self.feature_dim {
            return Err(Error::invalid(format!(
                "streamed feature has dimension {}, expected {}",
                feature.len(),
                self.feature_dim
            )));
        }
        if model.input_frames() != self.capacity || model.feature_dim() != self.feature_dim {
            return Err(Error::invalid("model does not match the queue shape"));
        }
        self.frames_seen += 1;
        if !self.frames_seen.is_multiple_of(self.stride as u64) {
            return Ok(None);
        }
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back((self.frames_seen, feature));
        self.enqueued += 1;
        if !self.is_warm() {
            return Ok(None);
        }
        let frames: Vec<FrameFeature> = self.buffered().cloned().collect();
        let out = model.infer(&frames)?;
        let (class, probabilities) = predict(&out.logits)?;
        Ok(Some(StreamPrediction {
            frame: self.frames_seen,
            class,
            probabilities,
            logits: out.logits,
            per_scale: out.per_scale,
            key_frames: self.buffered_arrivals(),
        }))
    }
}

/// Replays `frames` through a fresh queue and collects every prediction.
pub fn replay(model: &Model, stride: usize, frames: &[FrameFeature]) -> Result<Vec<StreamPrediction>> {
    let mut queue = StreamQueue::for_model(model, stride)?;
    let mut out = Vec::new();
    for f in frames {
        if let Some(p) = queue.push(model, f.clone())? {
            out.push(p);
        }
    }
    Ok(out)
}
