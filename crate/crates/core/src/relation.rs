//! Relation terms and their multi-scale sum.
//!
//! A [`RelationModule`] of scale `d` computes `h(sum over tuples of g(f_i1 ++ ... ++ f_id))`
//! where each tuple lists `d` strictly increasing positions into the sampled
//! frames. `g` is a two-layer ReLU MLP (`d*D -> H -> H`), `h` a single affine
//! layer (`H -> C`). [`MultiScaleTrn`] owns one module per scale `2..=N`, each
//! with its own parameters, and adds their class scores before the softmax.

use rand::Rng;

use crate::nn::{softmax, Activation, GradientSet, Mlp, Trace};
use crate::sampling::TuplesByScale;
use crate::{Error, Result};

/// Feature vector of one frame.
pub type FrameFeature = Vec<f64>;

/// Strictly increasing positions of `d >= 2` frames.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameTuple {
    indices: Vec<usize>,
}

impl FrameTuple {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.len() < 2 {
            return Err(Error::invalid("a frame tuple needs at least 2 frames"));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "tuple indices {indices:?} are not strictly increasing"
            )));
        }
        Ok(Self { indices })
    }

    pub(crate) fn from_sorted(indices: Vec<usize>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn scale(&self) -> usize {
        self.indices.len()
    }

    /// Concatenates the referenced features in index order.
    pub fn gather(&self, frames: &[FrameFeature]) -> Vec<f64> {
        self.indices
            .iter()
            .flat_map(|&i| frames[i].iter().copied())
            .collect()
    }
}

/// Gradients of one relation module.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleGradient {
    pub g: GradientSet,
    pub h: GradientSet,
}

impl ModuleGradient {
    fn zeros_like(m: &RelationModule) -> Self {
        Self {
            g: GradientSet::zeros_like(&m.g),
            h: GradientSet::zeros_like(&m.h),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.g.slices();
        out.extend(self.h.slices());
        out
    }

    pub fn is_zero(&self) -> bool {
        self.g.is_zero() && self.h.is_zero()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct ModuleTrace {
    g_traces: Vec<Trace>,
    masks: Option<Vec<Vec<f64>>>,
    h_trace: Trace,
}

/// Inverted-dropout settings applied to `g` outputs during training.
pub(crate) struct Dropout<'a, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'a mut R,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationModule {
    scale: usize,
    feature_dim: usize,
    g: Mlp,
    h: Mlp,
}

impl RelationModule {
    pub fn random<R: Rng + ?Sized>(
        scale: usize,
        feature_dim: usize,
        hidden: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if scale < 2 {
            return Err(Error::invalid("relation scale must be at least 2"));
        }
        let g = Mlp::random(
            &[scale * feature_dim, hidden, hidden],
            &[Activation::Relu, Activation::Relu],
            rng,
        )?;
        let h = Mlp::random(&[hidden, classes], &[Activation::None], rng)?;
        Self::from_parts(scale, feature_dim, g, h)
    }

    pub fn from_parts(scale: usize, feature_dim: usize, g: Mlp, h: Mlp) -> Result<Self> {
        if scale < 2 || feature_dim == 0 {
            return Err(Error::invalid("relation scale must be >= 2 and D > 0"));
        }
        if g.in_dim() != scale * feature_dim {
            return Err(Error::invalid(format!(
                "g input {} != d*D = {}",
                g.in_dim(),
                scale * feature_dim
            )));
        }
        if g.out_dim() != h.in_dim() {
            return Err(Error::invalid("g output does not feed h"));
        }
        Ok(Self {
            scale,
            feature_dim,
            g,
            h,
        })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden(&self) -> usize {
        self.g.out_dim()
    }

    pub fn classes(&self) -> usize {
        self.h.out_dim()
    }

    pub fn g(&self) -> &Mlp {
        &self.g
    }

    pub fn h(&self) -> &Mlp {
        &self.h
    }

    pub fn g_mut(&mut self) -> &mut Mlp {
        &mut self.g
    }

    pub fn h_mut(&mut self) -> &mut Mlp {
        &mut self.h
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = self.g.param_slices();
        out.extend(self.h.param_slices());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.g.param_slices_mut();
        out.extend(self.h.param_slices_mut());
        out
    }

    fn check(&self, frames: &[FrameFeature], tuples: &[FrameTuple]) -> Result<()> {
        if tuples.is_empty() {
            return Err(Error::invalid(format!(
                "scale-{} relation needs at least one tuple",
                self.scale
            )));
        }
        for t in tuples {
            if t.scale() != self.scale {
                return Err(Error::invalid(format!(
                    "tuple of arity {} passed to scale-{} relation",
                    t.scale(),
                    self.scale
                )));
            }
            if let Some(&bad) = t.indices.iter().find(|&&i| i >= frames.len()) {
                return Err(Error::invalid(format!(
                    "tuple index {bad} out of range for {} frames",
                    frames.len()
                )));
            }
        }
        check_frames(frames, self.feature_dim)
    }

    /// `sum over tuples of g(concat)`: the hidden vector fed to `h`.
    pub fn hidden_sum(&self, frames: &[FrameFeature], tuples: &[FrameTuple]) -> Result<Vec<f64>> {
        self.check(frames, tuples)?;
        Ok(self.hidden_sum_unchecked(frames, tuples))
    }

    fn hidden_sum_unchecked(&self, frames: &[FrameFeature], tuples: &[FrameTuple]) -> Vec<f64> {
        let mut sum = vec![0.0; self.hidden()];
        for t in tuples {
            let out = self.g.forward_unchecked(&t.gather(frames));
            for (s, v) in sum.iter_mut().zip(out) {
                *s += v;
            }
        }
        sum
    }

    /// Class scores of this scale for the given tuple set.
    pub fn forward(&self, frames: &[FrameFeature], tuples: &[FrameTuple]) -> Result<Vec<f64>> {
        self.check(frames, tuples)?;
        Ok(self.forward_unchecked(frames, tuples))
    }

    pub(crate) fn forward_unchecked(
        &self,
        frames: &[FrameFeature],
        tuples: &[FrameTuple],
    ) -> Vec<f64> {
        self.h
            .forward_unchecked(&self.hidden_sum_unchecked(frames, tuples))
    }

    pub(crate) fn forward_trace<R: Rng + ?Sized>(
        &self,
        frames: &[FrameFeature],
        tuples: &[FrameTuple],
        dropout: Option<&mut Dropout<'_, R>>,
    ) -> ModuleTrace {
        let mut sum = vec![0.0; self.hidden()];
        let mut g_traces = Vec::with_capacity(tuples.len());
        let mut masks = dropout.as_ref().map(|_| Vec::with_capacity(tuples.len()));
        let mut dropout = dropout;
        for t in tuples {
            let trace = self.g.forward_trace_unchecked(&t.gather(frames));
            match (&mut dropout, &mut masks) {
                (Some(d), Some(ms)) => {
                    let keep = 1.0 - d.rate;
                    let mask: Vec<f64> = (0..self.hidden())
                        .map(|_| {
                            if d.rng.random::<f64>() < keep {
                                1.0 / keep
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    for ((s, v), m) in sum.iter_mut().zip(trace.output()).zip(&mask) {
                        *s += v * m;
                    }
                    ms.push(mask);
                }
                _ => {
                    for (s, v) in sum.iter_mut().zip(trace.output()) {
                        *s += v;
                    }
                }
            }
            g_traces.push(trace);
        }
        let h_trace = self.h.forward_trace_unchecked(&sum);
        ModuleTrace {
            g_traces,
            masks,
            h_trace,
        }
    }

    pub(crate) fn backward_trace(
        &self,
        trace: &ModuleTrace,
        tuples: &[FrameTuple],
        upstream: &[f64],
        grads: &mut ModuleGradient,
        frame_grads: &mut [Vec<f64>],
    ) {
        let d_sum = self.h.backward_unchecked(&trace.h_trace, upstream, &mut grads.h);
        let dim = self.feature_dim;
        for (i, (t, g_trace)) in tuples.iter().zip(&trace.g_traces).enumerate() {
            let d_out: Vec<f64> = match &trace.masks {
                Some(ms) => d_sum.iter().zip(&ms[i]).map(|(a, m)| a * m).collect(),
                None => d_sum.clone(),
            };
            let d_in = self.g.backward_unchecked(g_trace, &d_out, &mut grads.g);
            for (slot, &frame) in t.indices.iter().enumerate() {
                for (acc, v) in frame_grads[frame]
                    .iter_mut()
                    .zip(&d_in[slot * dim..(slot + 1) * dim])
                {
                    *acc += v;
                }
            }
        }
    }

    pub(crate) fn trace_logits(trace: &ModuleTrace) -> &[f64] {
        trace.h_trace.output()
    }
}

fn check_frames(frames: &[FrameFeature], dim: usize) -> Result<()> {
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.len() != dim) {
        return Err(Error::invalid(format!(
            "frame {i} has dimension {}, expected {dim}",
            f.len()
        )));
    }
    Ok(())
}

/// Combined scores plus the per-scale terms they were summed from.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleOutput {
    pub logits: Vec<f64>,
    /// `(scale, logits)` in ascending scale order.
    pub per_scale: Vec<(usize, Vec<f64>)>,
}

/// Gradients for every module plus the gradient with respect to each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrnGradients {
    pub modules: Vec<ModuleGradient>,
    pub frames: Vec<Vec<f64>>,
}

impl TrnGradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.modules.iter().flat_map(ModuleGradient::slices).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.modules.iter().all(ModuleGradient::is_zero)
            && self.frames.iter().all(|f| f.iter().all(|&v| v == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleTrn {
    feature_dim: usize,
    hidden: usize,
    classes: usize,
    modules: Vec<RelationModule>,
}

impl MultiScaleTrn {
    pub fn random<R: Rng + ?Sized>(
        feature_dim: usize,
        hidden: usize,
        classes: usize,
        max_scale: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if max_scale < 2 {
            return Err(Error::invalid("N must be at least 2"));
        }
        let modules = (2..=max_scale)
            .map(|d| RelationModule::random(d, feature_dim, hidden, classes, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_modules(modules)
    }

    /// Modules must cover scales `2..=N` in order and share `D`, `H` and `C`.
    pub fn from_modules(modules: Vec<RelationModule>) -> Result<Self> {
        let first = modules
            .first()
            .ok_or_else(|| Error::invalid("a multi-scale model needs at least one module"))?;
        let (feature_dim, hidden, classes) = (first.feature_dim, first.hidden(), first.classes());
        for (i, m) in modules.iter().enumerate() {
            if m.scale != i + 2 {
                return Err(Error::invalid(format!(
                    "module {i} has scale {}, expected {}",
                    m.scale,
                    i + 2
                )));
            }
            if m.feature_dim != feature_dim || m.hidden() != hidden || m.classes() != classes {
                return Err(Error::invalid("modules disagree on D, H or C"));
            }
        }
        Ok(Self {
            feature_dim,
            hidden,
            classes,
            modules,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn max_scale(&self) -> usize {
        self.modules.len() + 1
    }

    pub fn modules(&self) -> &[RelationModule] {
        &self.modules
    }

    pub fn modules_mut(&mut self) -> &mut [RelationModule] {
        &mut self.modules
    }

    pub fn module(&self, scale: usize) -> Option<&RelationModule> {
        scale.checked_sub(2).and_then(|i| self.modules.get(i))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.modules
            .iter()
            .flat_map(RelationModule::param_slices)
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.modules
            .iter_mut()
            .flat_map(RelationModule::param_slices_mut)
            .collect()
    }

    fn scale_tuples<'a>(&self, tuples: &'a TuplesByScale, d: usize) -> Result<&'a [FrameTuple]> {
        tuples
            .get(&d)
            .map(Vec::as_slice)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::invalid(format!("no tuples supplied for scale {d}")))
    }

    fn check(&self, frames: &[FrameFeature], tuples: &TuplesByScale) -> Result<()> {
        for m in &self.modules {
            m.check(frames, self.scale_tuples(tuples, m.scale)?)?;
        }
        Ok(())
    }

    pub fn forward(&self, frames: &[FrameFeature], tuples: &TuplesByScale) -> Result<MultiScaleOutput> {
        self.check(frames, tuples)?;
        let per_scale: Vec<(usize, Vec<f64>)> = self
            .modules
            .iter()
            .map(|m| (m.scale, m.forward_unchecked(frames, &tuples[&m.scale])))
            .collect();
        let mut logits = vec![0.0; self.classes];
        for (_, term) in &per_scale {
            for (acc, v) in logits.iter_mut().zip(term) {
                *acc += v;
            }
        }
        Ok(MultiScaleOutput { logits, per_scale })
    }

    /// Reverse-mode gradients of `<upstream, logits>`.
    pub fn backward(
        &self,
        frames: &[FrameFeature],
        tuples: &TuplesByScale,
        upstream: &[f64],
    ) -> Result<TrnGradients> {
        if upstream.len() != self.classes {
            return Err(Error::invalid(format!(
                "upstream length {} != class count {}",
                upstream.len(),
                self.classes
            )));
        }
        self.check(frames, tuples)?;
        let traces = self.forward_traces::<rand_chacha::ChaCha8Rng>(frames, tuples, None);
        Ok(self.backward_traces(&traces, frames, tuples, upstream))
    }

    pub(crate) fn forward_traces<R: Rng + ?Sized>(
        &self,
        frames: &[FrameFeature],
        tuples: &TuplesByScale,
        mut dropout: Option<&mut Dropout<'_, R>>,
    ) -> Vec<ModuleTrace> {
        self.modules
            .iter()
            .map(|m| m.forward_trace(frames, &tuples[&m.scale], dropout.as_deref_mut()))
            .collect()
    }

    pub(crate) fn traces_logits(&self, traces: &[ModuleTrace]) -> Vec<f64> {
        let mut logits = vec![0.0; self.classes];
        for t in traces {
            for (acc, v) in logits.iter_mut().zip(RelationModule::trace_logits(t)) {
                *acc += v;
            }
        }
        logits
    }

    pub(crate) fn backward_traces(
        &self,
        traces: &[ModuleTrace],
        frames: &[FrameFeature],
        tuples: &TuplesByScale,
        upstream: &[f64],
    ) -> TrnGradients {
        let mut frame_grads = vec![vec![0.0; self.feature_dim]; frames.len()];
        let modules = self
            .modules
            .iter()
            .zip(traces)
            .map(|(m, trace)| {
                let mut g = ModuleGradient::zeros_like(m);
                m.backward_trace(trace, &tuples[&m.scale], upstream, &mut g, &mut frame_grads);
                g
            })
            .collect();
        TrnGradients {
            modules,
            frames: frame_grads,
        }
    }
}

/// Argmax (lowest index wins ties) and softmax probabilities.
pub fn predict(logits: &[f64]) -> Result<(usize, Vec<f64>)> {
    if logits.is_empty() {
        return Err(Error::invalid("cannot predict from empty logits"));
    }
    Ok((argmax(logits), softmax(logits)))
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
