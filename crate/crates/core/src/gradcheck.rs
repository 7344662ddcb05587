//! Central finite-difference check of multi-scale relation gradients.
//!
//! The numerical side only calls forward passes, so it stays independent of
//! the backward implementation it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::relation::{FrameFeature, MultiScaleTrn};
use crate::sampling::sample_tuples_by_scale;
use crate::training::mix_seed;
use crate::Result;

/// Shape of the model under test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GradCheckShape {
    pub feature_dim: usize,
    pub hidden: usize,
    pub classes: usize,
    pub max_scale: usize,
    pub per_scale: usize,
}

impl Default for GradCheckShape {
    /// D=3, H=4, C=2, N=3, k=2.
    fn default() -> Self {
        Self {
            feature_dim: 3,
            hidden: 4,
            classes: 2,
            max_scale: 3,
            per_scale: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub configurations: usize,
    pub entries_checked: usize,
    pub max_relative_error: f64,
    pub step: f64,
}

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true value is
/// ~0 are judged by absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn objective(trn: &MultiScaleTrn, frames: &[FrameFeature], tuples: &crate::sampling::TuplesByScale, upstream: &[f64]) -> f64 {
    let out = trn
        .forward(frames, tuples)
        .expect("shapes fixed by the checker");
    out.logits.iter().zip(upstream).map(|(a, b)| a * b).sum()
}

/// Checks every parameter and frame-feature gradient of `<upstream, logits>`
/// on `configurations` random (model, frames, tuples, upstream) draws.
pub fn check_multiscale(
    shape: GradCheckShape,
    configurations: usize,
    seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let mut max_rel: f64 = 0.0;
    let mut entries = 0usize;
    for c in 0..configurations {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, c as u64]));
        let mut trn = MultiScaleTrn::random(
            shape.feature_dim,
            shape.hidden,
            shape.classes,
            shape.max_scale,
            &mut rng,
        )?;
        // Non-zero biases so ReLU units are not all pinned at the same kink.
        for s in trn.param_slices_mut() {
            for v in s.iter_mut() {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let mut frames: Vec<FrameFeature> = (0..shape.max_scale)
            .map(|_| {
                (0..shape.feature_dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let tuples = sample_tuples_by_scale(shape.max_scale, shape.per_scale, &mut rng)?;
        let upstream: Vec<f64> = (0..shape.classes).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = trn.backward(&frames, &tuples, &upstream)?;
        let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();

        for (b, block) in analytic.iter().enumerate() {
            for (i, &a) in block.iter().enumerate() {
                let original = trn.param_slices()[b][i];
                trn.param_slices_mut()[b][i] = original + step;
                let plus = objective(&trn, &frames, &tuples, &upstream);
                trn.param_slices_mut()[b][i] = original - step;
                let minus = objective(&trn, &frames, &tuples, &upstream);
                trn.param_slices_mut()[b][i] = original;
                let numeric = (plus - minus) / (2.0 * step);
                max_rel = max_rel.max(relative_error(a, numeric));
                entries += 1;
            }
        }
        for f in 0..frames.len() {
            for j in 0..shape.feature_dim {
                let original = frames[f][j];
                frames[f][j] = original + step;
                let plus = objective(&trn, &frames, &tuples, &upstream);
                frames[f][j] = original - step;
                let minus = objective(&trn, &frames, &tuples, &upstream);
                frames[f][j] = original;
                let numeric = (plus - minus) / (2.0 * step);
                max_rel = max_rel.max(relative_error(grads.frames[f][j], numeric));
                entries += 1;
            }
        }
    }
    Ok(GradCheckReport {
        configurations,
        entries_checked: entries,
        max_relative_error: max_rel,
        step,
    })
}
