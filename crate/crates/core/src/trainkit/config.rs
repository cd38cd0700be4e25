use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{DiagReference, LossMode, PositiveRule};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    #[default]
    Gat,
    Gcn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortFiles {
    pub image: PathBuf,
    pub clinical: PathBuf,
    pub labels: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Files(CohortFiles),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

/// Every knob of a training run. Unknown keys are rejected on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub data: DataSource,
    /// Label column to use when the labels file carries several.
    pub label_column: Option<String>,
    pub train_fraction: f64,
    pub standardize: bool,

    /// KNN sizes; `None` picks [`crate::graphs::default_k`].
    pub k_image: Option<usize>,
    pub k_clinical: Option<usize>,

    /// Output width of the image feature encoder.
    pub d_image: usize,
    /// Run clinical features through their own affine+tanh encoder of this
    /// width instead of using them as-is.
    pub d_clinical: Option<usize>,
    pub d_h: usize,
    pub d_c: usize,
    pub backbone_image: Backbone,
    pub backbone_clinical: Backbone,
    pub graph_layers: usize,

    pub beta: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub loss_mode: LossMode,
    pub diag_reference: DiagReference,
    pub positive_rule: PositiveRule,
    pub no_concat: bool,
    pub no_imfes: bool,

    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Seeds per ablation cell; reported metrics are mean ± std over them.
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            label_column: None,
            train_fraction: 0.728,
            standardize: true,
            k_image: None,
            k_clinical: None,
            d_image: 32,
            d_clinical: None,
            d_h: 64,
            d_c: 64,
            backbone_image: Backbone::Gat,
            backbone_clinical: Backbone::Gat,
            graph_layers: 1,
            beta: 0.65,
            delta: 0.5,
            epsilon: 1e-8,
            loss_mode: LossMode::Full,
            diag_reference: DiagReference::Union,
            positive_rule: PositiveRule::SameClass,
            no_concat: false,
            no_imfes: false,
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            epochs: 200,
            seed: 0,
            repeats: 5,
        }
    }
}

fn range_err(field: &str, value: impl std::fmt::Display, expected: &str) -> Error {
    Error::Config(format!("{field} = {value} is out of range; expected {expected}"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(range_err("beta", self.beta, "0 <= beta <= 1"));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(range_err("delta", self.delta, "delta > 0"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(range_err("epsilon", self.epsilon, "epsilon > 0"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(range_err("lr", self.lr, "lr >= 0"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(range_err("train_fraction", self.train_fraction, "0 < fraction < 1"));
        }
        for (name, v) in [("d_image", self.d_image), ("d_h", self.d_h), ("d_c", self.d_c)] {
            if v == 0 {
                return Err(range_err(name, v, "a positive width"));
            }
        }
        if self.d_clinical == Some(0) {
            return Err(range_err("d_clinical", 0, "a positive width"));
        }
        if !(1..=2).contains(&self.graph_layers) {
            return Err(range_err("graph_layers", self.graph_layers, "1 or 2"));
        }
        for (name, k) in [("k_image", self.k_image), ("k_clinical", self.k_clinical)] {
            if k == Some(0) {
                return Err(range_err(name, 0, "k >= 1"));
            }
        }
        if self.epochs == 0 {
            return Err(range_err("epochs", 0, "at least 1"));
        }
        if self.repeats == 0 {
            return Err(range_err("repeats", 0, "at least 1"));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
        }
        Ok(())
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let config: TrainConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    /// Loads a JSON config file. Relative data paths resolve against the
    /// config file's directory and are stored as absolute paths.
    pub fn from_path(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::from_json_str(&text, overrides)?;
        if let DataSource::Files(files) = &mut config.data {
            let base = path.parent().unwrap_or(Path::new("."));
            for p in [&mut files.image, &mut files.clinical, &mut files.labels] {
                if p.is_relative() {
                    let joined = base.join(&*p);
                    *p = std::path::absolute(&joined).unwrap_or(joined);
                }
            }
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as JSON
/// when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot set `{key}`: `{part}` has no parent object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty override key in `{assignment}`")))
}
