//! Run configuration: a flat `section.key = value` text file (TOML dotted keys).

use crate::convex::{ConvexConfig, LabelMode, TargetMode, DEFAULT_CONVEX_CLASSES};
use crate::error::{Error, Result};
use crate::transconv::KernelGroupSpec;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Number of semantic classes including background.
    pub classes: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub dilations: Vec<usize>,
    /// Weight of the convex regularization term.
    pub alpha: f64,
    pub detection: bool,
    pub seed: u64,
    /// Score threshold for fusing detections into the semantic map.
    pub fuse_threshold: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            classes: 6,
            widths: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 1],
            dilations: vec![1, 1, 1, 2],
            alpha: 1.0 / 9.0,
            detection: true,
            seed: 0,
            fuse_threshold: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransconvSection {
    /// Shear angles in degrees, used when `shear` is set.
    pub angles: Vec<f64>,
    pub shear: bool,
    pub flip: bool,
    pub rotate: bool,
    /// 0 is the stem convolution; `s ≥ 1` is the second convolution of stage `s`.
    pub stages: Vec<usize>,
}

impl Default for TransconvSection {
    fn default() -> Self {
        TransconvSection {
            angles: KernelGroupSpec::DEFAULT_ANGLES.to_vec(),
            shear: false,
            flip: false,
            rotate: false,
            stages: vec![0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvexSection {
    /// Alias of `model.alpha`; when both are given they must agree.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub classes: Vec<usize>,
    pub target: TargetMode,
    pub label: LabelMode,
}

impl Default for ConvexSection {
    fn default() -> Self {
        ConvexSection {
            alpha: None,
            classes: DEFAULT_CONVEX_CLASSES.to_vec(),
            target: TargetMode::Hull,
            label: LabelMode::Class,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectSection {
    /// Detected classes; empty means the convex classes.
    pub classes: Vec<usize>,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    pub rpn_batch: usize,
    pub roi_batch: usize,
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DetectSection {
    fn default() -> Self {
        DetectSection {
            classes: Vec::new(),
            anchor_scales: vec![8.0, 12.0, 20.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            rpn_batch: 64,
            roi_batch: 32,
            pre_nms_top_n: 200,
            post_nms_top_n: 48,
            score_threshold: 0.05,
            nms_iou: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    Adam,
    Sgd,
}

/// Learning-rate schedule over the whole run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - step / total_steps)^0.9`.
    Poly,
}

impl LrSchedule {
    pub fn rate(self, base: f64, step: usize, total_steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Poly => {
                let t = step as f64 / total_steps.max(1) as f64;
                base * (1.0 - t).max(0.0).powf(0.9)
            }
        }
    }
}

/// What happens to normalization statistics after the start-of-training calibration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormUpdate {
    /// Kept fixed; only the affine scale and shift train.
    Frozen,
    /// Exponential running averages of each step's batch statistics.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerChoice,
    pub schedule: LrSchedule,
    pub norm_stats: NormUpdate,
    /// Worker threads; 0 reads `FRCNN_THREADS` and otherwise uses one.
    pub threads: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 10,
            batch_size: 4,
            learning_rate: 2e-3,
            weight_decay: 1e-4,
            optimizer: OptimizerChoice::Adam,
            schedule: LrSchedule::Poly,
            norm_stats: NormUpdate::Frozen,
            threads: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub transconv: TransconvSection,
    pub convex: ConvexSection,
    pub detect: DetectSection,
    pub train: TrainSection,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut String) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push_str(&format!("{key} = {other}\n")),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn lookup<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let (head, rest) = key.split_once('.').map_or((key, None), |(h, r)| (h, Some(r)));
    match (table.get(head)?, rest) {
        (v, None) => Some(v),
        (toml::Value::Table(t), Some(r)) => lookup(t, r),
        _ => None,
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    match key.split_once('.') {
        None => {
            table.insert(key.to_string(), value);
            Ok(())
        }
        Some((head, rest)) => {
            let entry = table
                .entry(head.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            match entry {
                toml::Value::Table(t) => set_dotted(t, rest, value),
                _ => Err(Error::Config(format!("override {key}: {head} is not a section"))),
            }
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key = value` overrides (dotted keys; values in TOML
    /// syntax, bare words taken as strings).
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            set_dotted(&mut table, key, parse_value(raw))?;
        }
        let model_alpha = lookup(&table, "model.alpha").cloned();
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(a) = cfg.convex.alpha.take() {
            if model_alpha.is_some() && a != cfg.model.alpha {
                return Err(Error::Config(format!(
                    "convex.alpha = {a} conflicts with model.alpha = {}",
                    cfg.model.alpha
                )));
            }
            cfg.model.alpha = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Flat dotted `key = value` lines, sorted by key; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let table = toml::Table::try_from(self).expect("config serializes");
        let mut out = String::new();
        flatten("", &table, &mut out);
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = &self.model;
        if m.classes < 2 || m.classes > 255 {
            return bad(format!("model.classes must be in [2, 255], got {}", m.classes));
        }
        if m.widths.len() != 4 || m.strides.len() != 4 || m.dilations.len() != 4 {
            return bad("model.widths, model.strides and model.dilations need 4 entries".into());
        }
        if m.widths.contains(&0) || m.strides.contains(&0) || m.dilations.contains(&0) {
            return bad("backbone widths, strides and dilations must be positive".into());
        }
        if !(m.alpha >= 0.0) {
            return bad(format!("model.alpha must be non-negative, got {}", m.alpha));
        }
        if !(0.0..=1.0).contains(&m.fuse_threshold) {
            return bad(format!("model.fuse_threshold {} outside [0, 1]", m.fuse_threshold));
        }
        if self.transconv.stages.iter().any(|&s| s > 4) {
            return bad("transconv.stages entries must be in 0..=4".into());
        }
        if self.convex.classes.is_empty() || self.convex.classes.iter().any(|&c| c == 0 || c >= m.classes) {
            return bad(format!("convex.classes must be non-empty foreground classes below {}", m.classes));
        }
        if self.detection_classes().iter().any(|&c| c == 0 || c >= m.classes) {
            return bad("detect.classes must be foreground classes".into());
        }
        let t = &self.train;
        if t.batch_size == 0 || !(t.learning_rate > 0.0) || !(t.weight_decay >= 0.0) {
            return bad("train.batch_size and train.learning_rate must be positive, weight_decay non-negative".into());
        }
        self.kernel_spec()?;
        Ok(())
    }

    pub fn kernel_spec(&self) -> Result<KernelGroupSpec> {
        let t = &self.transconv;
        KernelGroupSpec::from_flags(&t.angles, t.shear, t.flip, t.rotate)
    }

    pub fn convex_config(&self) -> ConvexConfig {
        ConvexConfig {
            classes: self.convex.classes.clone(),
            target: self.convex.target,
            label: self.convex.label,
        }
    }

    pub fn detection_classes(&self) -> Vec<usize> {
        if self.detect.classes.is_empty() {
            self.convex.classes.clone()
        } else {
            self.detect.classes.clone()
        }
    }

    /// Adjusts class-dependent defaults to a label set: `model.classes` and the convex
    /// classes (window, door, shop where present).
    pub fn adapt_to_labels(&mut self, labels: &crate::data::LabelSet) {
        self.model.classes = labels.len();
        let convex = labels.convex_classes();
        if !convex.is_empty() {
            self.convex.classes = convex;
        }
        self.detect.classes.retain(|&c| c < labels.len());
    }

    /// Worker count: `train.threads`, else `FRCNN_THREADS`, else 1.
    pub fn threads(&self) -> usize {
        if self.train.threads > 0 {
            return self.train.threads;
        }
        std::env::var("FRCNN_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or(1)
    }
}
