//! Run configuration: one TOML file, `--set key=value` overrides, validated
//! before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trn::data::SyntheticSpec;
use trn::model::{FrameOrder, ModelConfig, Pooling};
use trn::nn::Precision;
use trn::sampling::{SamplingMode, SamplingPlan};
use trn::training::TrainConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// `order-critical` or `order-free`; ignored when `spec` is given.
    pub preset: String,
    pub spec: Option<SyntheticSpec>,
    pub train_per_class: usize,
    pub val_per_class: usize,
    /// Existing feature files; when set they replace generation.
    pub train_features: Option<PathBuf>,
    pub val_features: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preset: "order-critical".into(),
            spec: None,
            train_per_class: 500,
            val_per_class: 200,
            train_features: None,
            val_features: None,
        }
    }
}

impl DataConfig {
    pub fn resolved_spec(&self) -> Result<SyntheticSpec, ConfigError> {
        match &self.spec {
            Some(s) => Ok(s.clone()),
            None => SyntheticSpec::preset(&self.preset).ok_or_else(|| {
                ConfigError(format!(
                    "unknown data preset {:?} (expected order-critical or order-free)",
                    self.preset
                ))
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub pooling: Pooling,
    pub hidden: usize,
    /// Sampled frames N (largest relation scale).
    pub frames: usize,
    /// Training tuples per scale k.
    pub per_scale: usize,
    pub tuple_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            pooling: Pooling::TemporalRelation,
            hidden: 64,
            frames: 8,
            per_scale: 3,
            tuple_seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub frame_order: FrameOrder,
    pub precision: Precision,
    pub dropout: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: 10,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            frame_order: t.frame_order,
            precision: t.precision,
            dropout: t.dropout,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Defaults to `<out>/model.trnw`.
    pub checkpoint: Option<PathBuf>,
    pub order: FrameOrder,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            order: FrameOrder::Ordered,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSection {
    pub stride: usize,
    /// Validation videos concatenated into one stream.
    pub videos: usize,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self { stride: 1, videos: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeSection {
    /// Validation videos ranked for representative tuples.
    pub samples: usize,
    pub top_m: usize,
    pub anchors: usize,
    /// Validation videos of one class aligned together.
    pub align_videos: usize,
    pub align_class: usize,
    pub fractions: Vec<f64>,
    pub embed_scale: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self {
            samples: 8,
            top_m: 3,
            anchors: trn::analysis::DEFAULT_ANCHORS,
            align_videos: 4,
            align_class: 0,
            fractions: vec![0.25, 0.5, 1.0],
            embed_scale: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    pub poolings: Vec<Pooling>,
    pub frames: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        Self {
            poolings: vec![Pooling::TemporalRelation, Pooling::AveragePool],
            frames: vec![2, 3, 4, 5, 8],
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSection {
    pub configurations: usize,
    pub step: f64,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self {
            configurations: 100,
            step: trn::gradcheck::DEFAULT_STEP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives data generation, model initialisation and training.
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub stream: StreamSection,
    pub analyze: AnalyzeSection,
    pub compare: CompareSection,
    pub grad_check: GradCheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            stream: StreamSection::default(),
            analyze: AnalyzeSection::default(),
            compare: CompareSection::default(),
            grad_check: GradCheckSection::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let Some((key, value)) = assignment.split_once('=') else {
        return err(format!("override {assignment:?} is not key=value"));
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return err(format!("bad override key {key:?}"));
    }
    let mut cursor = table;
    for part in &path[..path.len() - 1] {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = match entry {
            toml::Value::Table(t) => t,
            _ => return err(format!("override {key:?}: {part:?} is not a table")),
        };
    }
    cursor.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    /// File values, then `--set` overrides, then dedicated flags.
    pub fn load(
        file: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        out: Option<&Path>,
    ) -> Result<Self, ConfigError> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ConfigError(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError(format!("config: {e}")))?;
        if let Some(s) = seed {
            config.seed = s;
        }
        if let Some(o) = out {
            config.out = o.to_path_buf();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let spec = self.data.resolved_spec()?;
        spec.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.model_config(&spec)
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        if self.model.pooling != Pooling::SingleFrame {
            SamplingPlan::new(self.model.frames, self.model.per_scale, SamplingMode::Random)
                .map_err(|e| ConfigError(e.to_string()))?;
        }
        self.train_config()
            .validate()
            .map_err(|e| ConfigError(e.to_string()))?;
        if self.data.train_features.is_none() && self.data.train_per_class == 0 {
            return err("data.train_per_class must be positive");
        }
        if self.data.val_features.is_none() && self.data.val_per_class == 0 {
            return err("data.val_per_class must be positive");
        }
        if self.stream.stride == 0 || self.stream.videos == 0 {
            return err("stream.stride and stream.videos must be positive");
        }
        let a = &self.analyze;
        if a.samples == 0 || a.top_m == 0 || a.align_videos < 2 || a.anchors < 2 {
            return err("analyze needs samples, top_m >= 1, align_videos >= 2 and anchors >= 2");
        }
        if a.align_class >= spec.classes {
            return err(format!("analyze.align_class {} out of range", a.align_class));
        }
        if a.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return err("analyze.fractions must lie in (0, 1]");
        }
        let c = &self.compare;
        if c.poolings.is_empty() || c.frames.is_empty() || c.seeds.is_empty() {
            return err("compare needs at least one pooling, frame count and seed");
        }
        if self.grad_check.configurations == 0 || self.grad_check.step.is_nan() || self.grad_check.step <= 0.0 {
            return err("grad_check needs configurations >= 1 and step > 0");
        }
        Ok(())
    }

    pub fn model_config(&self, spec: &SyntheticSpec) -> ModelConfig {
        ModelConfig {
            pooling: self.model.pooling,
            feature_dim: spec.feature_dim,
            hidden: self.model.hidden,
            classes: spec.classes,
            frames: self.model.frames,
            per_scale: self.model.per_scale,
            tuple_seed: self.model.tuple_seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            seed: self.seed,
            frame_order: t.frame_order,
            precision: t.precision,
            dropout: t.dropout,
        }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.eval
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.out.join("model.trnw"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
