//! Online feature transforms: SpecAugment, CMVN stages, and a registry that
//! resolves transform names declared in the data config into a pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DataConfig;
use crate::features::{utterance_cmvn, FeatureError, FeatureMatrix, Gcmvn};

#[derive(Debug, Error, PartialEq)]
pub enum TransformError {
    #[error("unknown transform `{0}`")]
    UnknownTransform(String),
    #[error("bad parameters for `{name}`: {reason}")]
    BadParams { name: String, reason: String },
    #[error("transform `{0}` is already registered")]
    DuplicateName(String),
    #[error("invalid transform name `{0}` (expected lowercase snake_case)")]
    InvalidName(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Value written into masked cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskFill {
    #[default]
    Zero,
    /// Mean over all cells of the input matrix.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecAugmentConfig {
    pub freq_mask_param: usize,
    pub num_freq_masks: usize,
    pub time_mask_param: usize,
    pub num_time_masks: usize,
    /// Upper bound on a time mask as a fraction of the utterance length.
    #[serde(default = "one")]
    pub time_mask_p: f64,
    #[serde(default)]
    pub fill: MaskFill,
}

fn one() -> f64 {
    1.0
}

impl SpecAugmentConfig {
    /// LibriSpeech basic policy without time warping.
    pub fn lb() -> Self {
        Self {
            freq_mask_param: 27,
            num_freq_masks: 1,
            time_mask_param: 100,
            num_time_masks: 1,
            time_mask_p: 1.0,
            fill: MaskFill::Zero,
        }
    }

    /// LibriSpeech double policy without time warping.
    pub fn ld() -> Self {
        Self { num_freq_masks: 2, num_time_masks: 2, ..Self::lb() }
    }

    pub fn identity() -> Self {
        Self { num_freq_masks: 0, num_time_masks: 0, ..Self::lb() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "lb" => Some(Self::lb()),
            "ld" => Some(Self::ld()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.time_mask_p) {
            return Err(format!("time_mask_p {} outside [0, 1]", self.time_mask_p));
        }
        Ok(())
    }

    /// Largest time-mask width allowed for an utterance of `num_frames`.
    pub fn max_time_width(&self, num_frames: usize) -> usize {
        let cap = (self.time_mask_p * num_frames as f64).floor() as usize;
        self.time_mask_param.min(cap)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAxis {
    Freq,
    Time,
}

/// A mask drawn by [`specaugment_with_masks`]; `width` may be zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mask {
    pub axis: MaskAxis,
    pub start: usize,
    pub width: usize,
}

/// Frequency and time masking (no time warping). Shape is preserved.
pub fn specaugment<R: Rng + ?Sized>(feat: &FeatureMatrix, cfg: &SpecAugmentConfig, rng: &mut R) -> FeatureMatrix {
    specaugment_with_masks(feat, cfg, rng).0
}

/// [`specaugment`] that also reports the masks it drew, in draw order.
pub fn specaugment_with_masks<R: Rng + ?Sized>(
    feat: &FeatureMatrix,
    cfg: &SpecAugmentConfig,
    rng: &mut R,
) -> (FeatureMatrix, Vec<Mask>) {
    let mut out = feat.clone();
    let (frames, bins) = (feat.num_frames(), feat.feature_dim());
    let mut masks = Vec::with_capacity(cfg.num_freq_masks + cfg.num_time_masks);
    if frames == 0 || bins == 0 {
        return (out, masks);
    }
    let fill = match cfg.fill {
        MaskFill::Zero => 0.0,
        MaskFill::Mean => {
            (feat.as_slice().iter().map(|&v| v as f64).sum::<f64>() / feat.as_slice().len() as f64) as f32
        }
    };

    let max_f = cfg.freq_mask_param.min(bins);
    for _ in 0..cfg.num_freq_masks {
        let width = rng.random_range(0..=max_f);
        let start = rng.random_range(0..=bins - width);
        for t in 0..frames {
            for b in start..start + width {
                out.set(t, b, fill);
            }
        }
        masks.push(Mask { axis: MaskAxis::Freq, start, width });
    }

    let max_t = cfg.max_time_width(frames);
    for _ in 0..cfg.num_time_masks {
        let width = rng.random_range(0..=max_t);
        let start = rng.random_range(0..=frames - width);
        let dim = bins;
        out.as_mut_slice()[start * dim..(start + width) * dim].fill(fill);
        masks.push(Mask { axis: MaskAxis::Time, start, width });
    }
    (out, masks)
}

/// A named stage of a pipeline.
pub trait FeatureTransform: Send + Sync + fmt::Debug {
    fn apply(&self, feat: FeatureMatrix, rng: &mut dyn RngCore) -> Result<FeatureMatrix, TransformError>;
}

#[derive(Debug)]
struct UtteranceCmvn;

impl FeatureTransform for UtteranceCmvn {
    fn apply(&self, feat: FeatureMatrix, _: &mut dyn RngCore) -> Result<FeatureMatrix, TransformError> {
        Ok(utterance_cmvn(&feat))
    }
}

#[derive(Debug)]
struct GlobalCmvn(Gcmvn);

impl FeatureTransform for GlobalCmvn {
    fn apply(&self, feat: FeatureMatrix, _: &mut dyn RngCore) -> Result<FeatureMatrix, TransformError> {
        Ok(self.0.apply(&feat)?)
    }
}

#[derive(Debug)]
struct SpecAugment(SpecAugmentConfig);

impl FeatureTransform for SpecAugment {
    fn apply(&self, feat: FeatureMatrix, rng: &mut dyn RngCore) -> Result<FeatureMatrix, TransformError> {
        Ok(specaugment(&feat, &self.0, rng))
    }
}

/// A transform declaration as it appears in the data config.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub name: String,
    /// `Null` when the declaration carries no parameters.
    pub params: serde_yaml::Value,
}

impl TransformSpec {
    pub fn named(name: impl Into<String>) -> Self {
        Self { name: name.into(), params: serde_yaml::Value::Null }
    }

    pub fn with_params(name: impl Into<String>, params: serde_yaml::Value) -> Self {
        Self { name: name.into(), params }
    }
}

/// Builds a transform from its declared parameters and the surrounding config.
pub type TransformFactory =
    Arc<dyn Fn(&serde_yaml::Value, &DataConfig) -> Result<Box<dyn FeatureTransform>, String> + Send + Sync>;

/// Name → factory table. Populate it at startup, then share it read-only.
#[derive(Clone)]
pub struct TransformRegistry {
    factories: BTreeMap<String, TransformFactory>,
}

impl fmt::Debug for TransformRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.factories.keys()).finish()
    }
}

impl Default for TransformRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

fn is_snake_case(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl TransformRegistry {
    pub fn empty() -> Self {
        Self { factories: BTreeMap::new() }
    }

    /// `utterance_cmvn`, `global_cmvn` and `specaugment`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("utterance_cmvn", |params, _| {
            no_params(params)?;
            Ok(Box::new(UtteranceCmvn) as Box<dyn FeatureTransform>)
        })
        .unwrap();
        r.register("global_cmvn", |params, cfg| {
            let stats = if params.is_null() {
                cfg.gcmvn.clone().ok_or("no `gcmvn` statistics in the data config")?
            } else {
                serde_yaml::from_value::<Gcmvn>(params.clone()).map_err(|e| e.to_string())?
            };
            if stats.mean.len() != stats.std.len() {
                return Err("mean and std lengths differ".into());
            }
            Ok(Box::new(GlobalCmvn(stats)) as Box<dyn FeatureTransform>)
        })
        .unwrap();
        r.register("specaugment", |params, _| {
            let cfg = specaugment_params(params)?;
            cfg.validate()?;
            Ok(Box::new(SpecAugment(cfg)) as Box<dyn FeatureTransform>)
        })
        .unwrap();
        r
    }

    pub fn register<F>(&mut self, name: &str, factory: F) -> Result<(), TransformError>
    where
        F: Fn(&serde_yaml::Value, &DataConfig) -> Result<Box<dyn FeatureTransform>, String> + Send + Sync + 'static,
    {
        if !is_snake_case(name) {
            return Err(TransformError::InvalidName(name.to_string()));
        }
        if self.factories.contains_key(name) {
            return Err(TransformError::DuplicateName(name.to_string()));
        }
        self.factories.insert(name.to_string(), Arc::new(factory));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.factories.keys().map(String::as_str)
    }

    pub fn build(&self, spec: &TransformSpec, cfg: &DataConfig) -> Result<Arc<dyn FeatureTransform>, TransformError> {
        let factory =
            self.factories.get(&spec.name).ok_or_else(|| TransformError::UnknownTransform(spec.name.clone()))?;
        factory(&spec.params, cfg)
            .map(Arc::from)
            .map_err(|reason| TransformError::BadParams { name: spec.name.clone(), reason })
    }
}

fn no_params(params: &serde_yaml::Value) -> Result<(), String> {
    match params {
        serde_yaml::Value::Null => Ok(()),
        serde_yaml::Value::Mapping(m) if m.is_empty() => Ok(()),
        _ => Err("takes no parameters".into()),
    }
}

/// Accepts `null` (LB preset), `{preset: lb|ld}` optionally with overrides,
/// or a full explicit parameter map.
fn specaugment_params(params: &serde_yaml::Value) -> Result<SpecAugmentConfig, String> {
    let serde_yaml::Value::Mapping(map) = params else {
        return match params {
            serde_yaml::Value::Null => Ok(SpecAugmentConfig::lb()),
            serde_yaml::Value::String(s) => SpecAugmentConfig::preset(s).ok_or(format!("unknown preset `{s}`")),
            _ => Err("expected a mapping or a preset name".into()),
        };
    };
    let mut map = map.clone();
    let base = match map.remove("preset") {
        None => return serde_yaml::from_value(serde_yaml::Value::Mapping(map)).map_err(|e| e.to_string()),
        Some(serde_yaml::Value::String(s)) => SpecAugmentConfig::preset(&s).ok_or(format!("unknown preset `{s}`"))?,
        Some(_) => return Err("`preset` must be a string".into()),
    };
    let mut merged = match serde_yaml::to_value(&base).map_err(|e| e.to_string())? {
        serde_yaml::Value::Mapping(m) => m,
        _ => unreachable!("struct serializes to a mapping"),
    };
    for (k, v) in map {
        if !merged.contains_key(&k) {
            return Err(format!("unknown key {k:?}"));
        }
        merged.insert(k, v);
    }
    serde_yaml::from_value(serde_yaml::Value::Mapping(merged)).map_err(|e| e.to_string())
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub name: String,
    pub transform: Arc<dyn FeatureTransform>,
}

/// Ordered, immutable list of stages for one split.
#[derive(Clone, Debug)]
pub struct TransformPipeline {
    pub split: String,
    pub stages: Vec<Stage>,
}

impl TransformPipeline {
    pub fn identity(split: &str) -> Self {
        Self { split: split.to_string(), stages: Vec::new() }
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.stages.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Left-to-right composition; all randomness comes from `rng`.
    pub fn apply(&self, feat: FeatureMatrix, rng: &mut dyn RngCore) -> Result<FeatureMatrix, TransformError> {
        self.stages.iter().try_fold(feat, |f, stage| stage.transform.apply(f, rng))
    }

    pub fn apply_seeded(&self, feat: FeatureMatrix, seed: u64) -> Result<FeatureMatrix, TransformError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.apply(feat, &mut rng)
    }
}

/// Resolve the transforms declared for `split` into a pipeline.
pub fn parse_pipeline(
    cfg: &DataConfig,
    split: &str,
    registry: &TransformRegistry,
) -> Result<TransformPipeline, TransformError> {
    let stages = cfg
        .transforms_for_split(split)
        .iter()
        .map(|spec| Ok(Stage { name: spec.name.clone(), transform: registry.build(spec, cfg)? }))
        .collect::<Result<Vec<_>, TransformError>>()?;
    Ok(TransformPipeline { split: split.to_string(), stages })
}

pub fn apply_pipeline(
    p: &TransformPipeline,
    feat: FeatureMatrix,
    rng: &mut dyn RngCore,
) -> Result<FeatureMatrix, TransformError> {
    p.apply(feat, rng)
}
