//! Multi-scale temporal relation networks over sparsely sampled frame features.
//!
//! A video is a sequence of per-frame feature vectors. A relation term of scale
//! `d` concatenates `d` time-ordered frames, maps every such tuple through a
//! small MLP `g`, sums the results and classifies the sum with a linear head
//! `h`. The multi-scale model adds the class scores of every scale `2..=N`.
//!
//! Module map:
//!
//! - [`nn`]: dense layers, MLPs, reverse-mode gradients, softmax cross-entropy, SGD.
//! - [`relation`]: relation terms and their multi-scale sum.
//! - [`sampling`]: segment sampling, tuple subsampling and exhaustive enumeration.
//! - [`data`]: synthetic ordered-motif datasets and the `TRNF` feature file format.
//! - [`model`]: the relation model and the two pooling baselines behind one type.
//! - [`training`]: mini-batch training and evaluation.
//! - [`streaming`]: a key-frame feature queue emitting rolling predictions.
//! - [`analysis`]: representative tuples, alignment, early recognition, order deltas, embeddings.
//! - [`checkpoint`]: the `TRNW` parameter file format.
//!
//! Data-parallel loops (per-sample gradients, evaluation) run on rayon when the
//! `parallel` feature is enabled (the default) and sequentially otherwise. Both
//! paths produce bit-identical results.

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
mod error;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod relation;
pub mod sampling;
pub mod streaming;
pub mod training;

pub use error::{Error, Result};
pub use model::{Model, Pooling};
pub use relation::{FrameFeature, MultiScaleTrn, RelationModule};
