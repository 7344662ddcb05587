//! Synthetic ordered-motif datasets and the `TRNF` frame-feature file format.
//!
//! Every class is an ordered list of `L` motif ids. A sample places the `L`
//! motifs as runs of `motif_span` frames at sorted random offsets; leftover
//! frames show a distractor motif (with probability `distractor_rate`) or
//! isotropic noise, and every frame then gets Gaussian noise of scale
//! `noise_sigma`. Feature values are rounded to `f32` so datasets survive the
//! `TRNF` round trip bit-exactly.
//!
//! With `order_sensitive` set, all classes share the motif set `0..L` and
//! differ only in motif order; listed reversal pairs are exact reverses of
//! each other. Without it, class `c` owns motifs `c*L..(c+1)*L` and the motif
//! order is shuffled per sample.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::relation::FrameFeature;
use crate::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"TRNF";
pub const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub frames: Vec<FrameFeature>,
    pub label: usize,
}

impl VideoSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Copy restricted to the leading `len` frames.
    pub fn prefix(&self, len: usize) -> VideoSample {
        VideoSample {
            frames: self.frames[..len.min(self.frames.len())].to_vec(),
            label: self.label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<VideoSample>,
}

impl Dataset {
    pub fn new(samples: Vec<VideoSample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples whose label is in `labels`.
    pub fn filter_labels(&self, labels: &[usize]) -> Dataset {
        Dataset::new(
            self.samples
                .iter()
                .filter(|s| labels.contains(&s.label))
                .cloned()
                .collect(),
        )
    }

    /// Checks labels are in `[0, classes)` and every frame has dimension `dim`.
    pub fn validate(&self, classes: usize, dim: usize) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= classes {
                return Err(Error::invalid(format!(
                    "sample {i} has label {} but the model has {classes} classes",
                    s.label
                )));
            }
            if s.frames.is_empty() {
                return Err(Error::invalid(format!("sample {i} has no frames")));
            }
            if s.frames.iter().any(|f| f.len() != dim) {
                return Err(Error::invalid(format!(
                    "sample {i} has frames of dimension other than {dim}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub motif_count: usize,
    pub feature_dim: usize,
    pub frames_per_video: usize,
    pub motifs_per_class: usize,
    /// Frames covered by each placed motif.
    pub motif_span: usize,
    pub noise_sigma: f64,
    pub distractor_rate: f64,
    #[serde(default)]
    pub reversal_pairs: Vec<(usize, usize)>,
    pub order_sensitive: bool,
}

impl SyntheticSpec {
    /// All classes are orderings of one motif set; classes `(2i, 2i+1)` are reversals.
    pub fn order_critical() -> Self {
        Self {
            classes: 8,
            motif_count: 8,
            feature_dim: 16,
            frames_per_video: 32,
            motifs_per_class: 4,
            motif_span: 6,
            noise_sigma: 0.15,
            distractor_rate: 0.3,
            reversal_pairs: vec![(0, 1), (2, 3), (4, 5), (6, 7)],
            order_sensitive: true,
        }
    }

    /// Classes differ by motif identity; order carries no information.
    pub fn order_free() -> Self {
        Self {
            classes: 8,
            motif_count: 36,
            feature_dim: 16,
            frames_per_video: 32,
            motifs_per_class: 4,
            motif_span: 6,
            noise_sigma: 0.15,
            distractor_rate: 0.3,
            reversal_pairs: Vec::new(),
            order_sensitive: false,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "order-critical" => Some(Self::order_critical()),
            "order-free" => Some(Self::order_free()),
            _ => None,
        }
    }

    /// Motif ids reserved for class sequences; the rest are distractors.
    fn class_motif_count(&self) -> usize {
        if self.order_sensitive {
            self.motifs_per_class
        } else {
            self.classes * self.motifs_per_class
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(format!("synthetic spec: {m}")));
        if self.classes < 2 || self.feature_dim == 0 || self.frames_per_video == 0 {
            return bad("need C >= 2, D >= 1 and n >= 1".into());
        }
        if self.motifs_per_class < 2 || self.motif_span == 0 {
            return bad("need L >= 2 and motif_span >= 1".into());
        }
        if self.motifs_per_class * self.motif_span > self.frames_per_video {
            return bad(format!(
                "L * motif_span = {} exceeds n = {}",
                self.motifs_per_class * self.motif_span,
                self.frames_per_video
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("distractor_rate must lie in [0, 1]".into());
        }
        if self.motif_count < self.class_motif_count() {
            return bad(format!(
                "motif_count {} below the {} motifs classes need",
                self.motif_count,
                self.class_motif_count()
            ));
        }
        if self.distractor_rate > 0.0 && self.motif_count == self.class_motif_count() {
            return bad("distractors requested but no motif ids are left for them".into());
        }
        let mut seen = vec![false; self.classes];
        for &(a, b) in &self.reversal_pairs {
            if !self.order_sensitive {
                return bad("reversal pairs require order_sensitive".into());
            }
            if a >= self.classes || b >= self.classes || a == b {
                return bad(format!("invalid reversal pair ({a}, {b})"));
            }
            if seen[a] || seen[b] {
                return bad(format!("class in more than one reversal pair ({a}, {b})"));
            }
            seen[a] = true;
            seen[b] = true;
        }
        if self.order_sensitive {
            let perms: u128 = (1..=self.motifs_per_class as u128).product();
            if perms < self.classes as u128 {
                return bad(format!(
                    "{} classes but only {perms} motif orders",
                    self.classes
                ));
            }
        }
        Ok(())
    }
}

/// What one frame of a generated sample shows, before noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameContent {
    /// The `slot`-th motif of the class sequence.
    Motif { id: usize, slot: usize },
    Distractor(usize),
    Noise,
}

/// Motif vectors and class sequences fixed by `(spec, seed)`.
#[derive(Debug, Clone)]
pub struct SyntheticGenerator {
    spec: SyntheticSpec,
    motifs: Vec<Vec<f64>>,
    sequences: Vec<Vec<usize>>,
}

impl SyntheticGenerator {
    pub fn new(spec: SyntheticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let motifs = (0..spec.motif_count)
            .map(|_| random_unit(spec.feature_dim, &mut rng))
            .collect();
        let sequences = class_sequences(&spec, &mut rng);
        Ok(Self {
            spec,
            motifs,
            sequences,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn motifs(&self) -> &[Vec<f64>] {
        &self.motifs
    }

    /// Ordered motif ids of every class.
    pub fn class_sequences(&self) -> &[Vec<usize>] {
        &self.sequences
    }

    /// Frame-by-frame content of one sample of `class`.
    pub fn layout<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<FrameContent> {
        let spec = &self.spec;
        let (n, l, span) = (spec.frames_per_video, spec.motifs_per_class, spec.motif_span);
        let mut order = self.sequences[class].clone();
        if !spec.order_sensitive {
            order.shuffle(rng);
        }
        // Stars and bars: L sorted slots among free + L positions.
        let free = n - l * span;
        let mut slots = rand::seq::index::sample(rng, free + l, l).into_vec();
        slots.sort_unstable();
        let mut layout = vec![FrameContent::Noise; n];
        for (j, (&slot, &id)) in slots.iter().zip(&order).enumerate() {
            let start = slot - j + j * span;
            for cell in &mut layout[start..start + span] {
                *cell = FrameContent::Motif { id, slot: j };
            }
        }
        let first_distractor = spec.class_motif_count();
        for cell in &mut layout {
            if *cell == FrameContent::Noise && rng.random::<f64>() < spec.distractor_rate {
                *cell = FrameContent::Distractor(rng.random_range(first_distractor..spec.motif_count));
            }
        }
        layout
    }

    /// Turns a layout into features.
    pub fn render<R: Rng + ?Sized>(&self, layout: &[FrameContent], rng: &mut R) -> Vec<FrameFeature> {
        let dim = self.spec.feature_dim;
        let sigma = self.spec.noise_sigma;
        layout
            .iter()
            .map(|content| {
                let mut v = match *content {
                    FrameContent::Motif { id, .. } | FrameContent::Distractor(id) => {
                        self.motifs[id].clone()
                    }
                    FrameContent::Noise => {
                        let scale = 1.0 / (dim as f64).sqrt();
                        (0..dim).map(|_| scale * normal(rng)).collect()
                    }
                };
                if sigma > 0.0 {
                    for x in &mut v {
                        *x += sigma * normal(rng);
                    }
                }
                v.into_iter().map(|x| x as f32 as f64).collect()
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> VideoSample {
        let layout = self.layout(class, rng);
        VideoSample {
            frames: self.render(&layout, rng),
            label: class,
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn class_sequences<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Vec<Vec<usize>> {
    let l = spec.motifs_per_class;
    if !spec.order_sensitive {
        return (0..spec.classes)
            .map(|c| (c * l..(c + 1) * l).collect())
            .collect();
    }
    let mut used = std::collections::HashSet::new();
    let fresh = |rng: &mut R, used: &mut std::collections::HashSet<Vec<usize>>| loop {
        let mut p: Vec<usize> = (0..l).collect();
        p.shuffle(rng);
        let mut r = p.clone();
        r.reverse();
        if !used.contains(&p) && !used.contains(&r) {
            used.insert(p.clone());
            return p;
        }
    };
    let mut sequences: Vec<Option<Vec<usize>>> = vec![None; spec.classes];
    for &(a, b) in &spec.reversal_pairs {
        let p = fresh(rng, &mut used);
        let mut r = p.clone();
        r.reverse();
        used.insert(r.clone());
        sequences[a] = Some(p);
        sequences[b] = Some(r);
    }
    sequences
        .into_iter()
        .map(|s| s.unwrap_or_else(|| fresh(rng, &mut used)))
        .collect()
}

/// Generates balanced train and validation splits (`count` samples per class
/// each, labels interleaved). Pure function of its arguments.
pub fn generate_dataset(
    spec: &SyntheticSpec,
    seed: u64,
    train_per_class: usize,
    val_per_class: usize,
) -> Result<SplitDataset> {
    let generator = SyntheticGenerator::new(spec.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    let mut split = |per_class: usize| {
        Dataset::new(
            (0..per_class * spec.classes)
                .map(|i| generator.sample(i % spec.classes, &mut rng))
                .collect(),
        )
    };
    let train = split(train_per_class);
    let val = split(val_per_class);
    Ok(SplitDataset { train, val })
}

/// Frame-permuted copy, uniform over permutations for a given seed.
pub fn shuffle_frames(sample: &VideoSample, seed: u64) -> VideoSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = sample.frames.clone();
    frames.shuffle(&mut rng);
    VideoSample {
        frames,
        label: sample.label,
    }
}

pub fn encode_features(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(dataset.samples.len(), "sample count")?.to_le_bytes());
    for s in &dataset.samples {
        let dim = s.feature_dim();
        out.extend_from_slice(&to_u32(s.label, "label")?.to_le_bytes());
        out.extend_from_slice(&to_u32(s.frames.len(), "frame count")?.to_le_bytes());
        out.extend_from_slice(&to_u32(dim, "feature dim")?.to_le_bytes());
        for f in &s.frames {
            if f.len() != dim {
                return Err(Error::invalid("sample mixes frame dimensions"));
            }
            for &v in f {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in u32")))
}

pub fn write_features(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let bytes = encode_features(dataset)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_features(&std::fs::read(path)?)
}

/// Little-endian reader that reports byte offsets on failure.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                offset: self.offset(),
                message: format!(
                    "need {len} bytes for {what}, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.offset();
        let bytes = self.take(count.saturating_mul(4), what)?;
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: start + 4 * i as u64,
                message: format!("non-finite value in {what}"),
            });
        }
        Ok(values)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(found),
                    String::from_utf8_lossy(expected)
                ),
            });
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset(),
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor::new(bytes);
    cur.magic(FEATURE_MAGIC)?;
    let version_at = cur.offset();
    let version = cur.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported version {version}"),
        });
    }
    let count = cur.u32("sample count")? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    let mut dim_seen: Option<usize> = None;
    for i in 0..count {
        let label = cur.u32("label")? as usize;
        let n = cur.u32("frame count")? as usize;
        let dim_at = cur.offset();
        let dim = cur.u32("feature dim")? as usize;
        match dim_seen {
            Some(d) if d != dim => {
                return Err(Error::Format {
                    offset: dim_at,
                    message: format!("sample {i} has dimension {dim}, earlier samples {d}"),
                });
            }
            _ => dim_seen = Some(dim),
        }
        if dim == 0 {
            return Err(Error::Format {
                offset: dim_at,
                message: "zero feature dimension".into(),
            });
        }
        let values = cur.f32s(n.saturating_mul(dim), &format!("sample {i} payload"))?;
        let frames = values.chunks_exact(dim).map(<[f64]>::to_vec).collect();
        samples.push(VideoSample { frames, label });
    }
    cur.finish()?;
    Ok(Dataset::new(samples))
}
