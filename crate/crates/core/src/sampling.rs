//! Segment-wise frame selection and per-scale tuple subsampling.
//!
//! A video of `n` frames is split into `N` contiguous segments and one frame
//! is taken from each. Relation tuples are then drawn as sorted subsets of the
//! `N` sampled *positions* (`0..N`), so every frame feature is computed once
//! and shared by all tuples that use it.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::relation::FrameTuple;
use crate::{Error, Result};

/// Largest `N` accepted by [`enumerate_tuples`].
pub const MAX_ENUMERATION_FRAMES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Uniform index within each segment, drawn from the caller's generator.
    Random,
    /// Segment midpoint `start + len / 2`.
    Center,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    /// Number of sampled frames, which is also the largest relation scale.
    pub frames: usize,
    /// Tuples drawn per scale below `frames`.
    pub per_scale: usize,
    pub mode: SamplingMode,
}

impl SamplingPlan {
    pub fn new(frames: usize, per_scale: usize, mode: SamplingMode) -> Result<Self> {
        let plan = Self {
            frames,
            per_scale,
            mode,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::invalid("sampling plan needs at least 2 frames"));
        }
        if self.per_scale == 0 {
            return Err(Error::invalid("sampling plan needs k >= 1"));
        }
        Ok(())
    }

    pub fn with_mode(self, mode: SamplingMode) -> Self {
        Self { mode, ..self }
    }
}

/// One frame index per segment, non-decreasing, each in `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameIndexSet {
    indices: Vec<usize>,
}

impl FrameIndexSet {
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// `(start, len)` of segment `i` when `n` frames are split into `segments`
/// parts, the remainder going to the leading segments.
pub fn segment_bounds(n: usize, segments: usize, i: usize) -> (usize, usize) {
    let base = n / segments;
    let rem = n % segments;
    let start = i * base + i.min(rem);
    let len = base + usize::from(i < rem);
    (start, len)
}

pub fn segment_sample<R: Rng + ?Sized>(
    n: usize,
    plan: &SamplingPlan,
    rng: &mut R,
) -> Result<FrameIndexSet> {
    plan.validate()?;
    if n == 0 {
        return Err(Error::invalid("cannot sample from an empty video"));
    }
    let mut indices = Vec::with_capacity(plan.frames);
    for i in 0..plan.frames {
        let (start, len) = segment_bounds(n, plan.frames, i);
        let idx = if len == 0 {
            // n < N: only trailing segments can be empty, so an earlier index exists.
            *indices.last().expect("leading segments are non-empty")
        } else {
            match plan.mode {
                SamplingMode::Center => start + len / 2,
                SamplingMode::Random => start + rng.random_range(0..len),
            }
        };
        indices.push(idx);
    }
    Ok(FrameIndexSet { indices })
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All `C(frames, d)` sorted subsets of `0..frames` in lexicographic order.
pub fn enumerate_tuples(frames: usize, d: usize) -> Result<Vec<FrameTuple>> {
    if frames > MAX_ENUMERATION_FRAMES {
        return Err(Error::CombinatorialLimit {
            n: frames,
            max: MAX_ENUMERATION_FRAMES,
        });
    }
    if d < 2 || d > frames {
        return Err(Error::invalid(format!(
            "scale {d} outside [2, {frames}]"
        )));
    }
    let mut out = Vec::with_capacity(binomial(frames, d) as usize);
    let mut current: Vec<usize> = (0..d).collect();
    loop {
        out.push(FrameTuple::from_sorted(current.clone()));
        // Rightmost position that can still advance.
        let Some(pos) = (0..d).rev().find(|&i| current[i] < frames - d + i) else {
            break;
        };
        current[pos] += 1;
        for j in pos + 1..d {
            current[j] = current[j - 1] + 1;
        }
    }
    Ok(out)
}

/// `min(k, C(frames, d))` distinct sorted `d`-subsets of `0..frames`, uniform
/// without replacement. Exhausts the enumeration (in lexicographic order) when
/// `k >= C(frames, d)`.
pub fn subsample_tuples<R: Rng + ?Sized>(
    frames: usize,
    d: usize,
    k: usize,
    rng: &mut R,
) -> Result<Vec<FrameTuple>> {
    if d < 2 || d > frames {
        return Err(Error::invalid(format!(
            "scale {d} outside [2, {frames}]"
        )));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let total = binomial(frames, d);
    if (k as u128) >= total {
        return enumerate_tuples(frames, d);
    }
    let mut seen = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let mut pick = rand::seq::index::sample(rng, frames, d).into_vec();
        pick.sort_unstable();
        if seen.insert(pick.clone()) {
            out.push(FrameTuple::from_sorted(pick));
        }
    }
    Ok(out)
}

/// Tuple sets keyed by scale.
pub type TuplesByScale = BTreeMap<usize, Vec<FrameTuple>>;

/// Draws tuples for every scale `2..=frames`; the top scale is the full set.
pub fn sample_tuples_by_scale<R: Rng + ?Sized>(
    frames: usize,
    k: usize,
    rng: &mut R,
) -> Result<TuplesByScale> {
    (2..=frames)
        .map(|d| Ok((d, subsample_tuples(frames, d, k, rng)?)))
        .collect()
}

/// Per-scale tuple cap at inference; `C(8, 4)`, so every scale of an
/// `N <= 8` model is enumerated in full.
pub const INFERENCE_TUPLE_CAP: usize = 70;

/// Fixed tuple sets used at inference: every `d`-tuple when `C(N, d)` fits
/// under [`INFERENCE_TUPLE_CAP`], otherwise that many tuples picked by a
/// generator seeded with `seed`. Pure function of its arguments.
pub fn inference_tuples(frames: usize, seed: u64) -> Result<TuplesByScale> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_tuples_by_scale(frames, INFERENCE_TUPLE_CAP, &mut rng)
}

pub fn tuple_count(tuples: &TuplesByScale) -> usize {
    tuples.values().map(Vec::len).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn center(frames: usize) -> SamplingPlan {
        SamplingPlan::new(frames, 3, SamplingMode::Center).unwrap()
    }

    #[test]
    fn one_frame_per_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = segment_sample(8, &center(8), &mut rng).unwrap();
        assert_eq!(s.indices(), &[0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn midpoints_of_two_frame_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = segment_sample(16, &center(8), &mut rng).unwrap();
        assert_eq!(s.indices(), &[1, 3, 5, 7, 9, 11, 13, 15]);
    }

    #[test]
    fn short_video_reuses_earlier_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = segment_sample(3, &center(8), &mut rng).unwrap();
        assert_eq!(s.indices(), &[0, 1, 2, 2, 2, 2, 2, 2]);
        let plan = SamplingPlan::new(8, 3, SamplingMode::Random).unwrap();
        let s = segment_sample(1, &plan, &mut rng).unwrap();
        assert_eq!(s.indices(), &[0; 8]);
    }

    #[test]
    fn empty_video_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(segment_sample(0, &center(8), &mut rng).is_err());
    }

    #[test]
    fn bad_plans_are_rejected() {
        assert!(SamplingPlan::new(1, 3, SamplingMode::Center).is_err());
        assert!(SamplingPlan::new(4, 0, SamplingMode::Center).is_err());
    }

    #[test]
    fn enumerate_small_cases() {
        let t = enumerate_tuples(4, 2).unwrap();
        assert_eq!(t.len(), 6);
        assert_eq!(t[0].indices(), &[0, 1]);
        assert_eq!(t[5].indices(), &[2, 3]);
        assert_eq!(enumerate_tuples(8, 3).unwrap().len(), 56);
        assert_eq!(enumerate_tuples(8, 8).unwrap().len(), 1);
    }

    #[test]
    fn enumerate_limits() {
        assert!(matches!(
            enumerate_tuples(17, 2),
            Err(Error::CombinatorialLimit { n: 17, .. })
        ));
        assert!(enumerate_tuples(4, 5).is_err());
        assert!(enumerate_tuples(4, 1).is_err());
        assert_eq!(enumerate_tuples(16, 8).unwrap().len(), 12870);
    }

    #[test]
    fn full_scale_and_exhaustion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let full = subsample_tuples(8, 8, 3, &mut rng).unwrap();
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].indices(), &[0, 1, 2, 3, 4, 5, 6, 7]);
        let pairs = subsample_tuples(4, 2, 10, &mut rng).unwrap();
        assert_eq!(pairs, enumerate_tuples(4, 2).unwrap());
        assert!(subsample_tuples(4, 5, 1, &mut rng).is_err());
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(8, 3), 56);
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(3, 4), 0);
        assert_eq!(binomial(60, 30), 118264581564861424);
    }

    #[test]
    fn inference_tuples_are_pure() {
        assert_eq!(inference_tuples(8, 11).unwrap(), inference_tuples(8, 11).unwrap());
        // All C(8, d) for d = 2..8: 2^8 - 1 - 8.
        assert_eq!(tuple_count(&inference_tuples(8, 11).unwrap()), 247);
        assert_eq!(inference_tuples(8, 1).unwrap(), inference_tuples(8, 2).unwrap());
        let big = inference_tuples(10, 4).unwrap();
        assert_eq!(big[&5].len(), INFERENCE_TUPLE_CAP);
        assert_ne!(big, inference_tuples(10, 5).unwrap());
    }
}
