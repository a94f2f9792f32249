//! Run configuration: JSON schema, strict parsing (unknown keys are hard
//! errors), and validation.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facet::FacetFormat;
use crate::meta::{BaselineKind, ProjectionOverride};
use crate::optim::AdamConfig;
use crate::synth::SyntheticSpec;

/// Text format selector for facet files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FormatSpec {
    Plain,
    CountedHeader,
    #[default]
    Auto,
}

impl From<FormatSpec> for FacetFormat {
    fn from(f: FormatSpec) -> Self {
        match f {
            FormatSpec::Plain => FacetFormat::Plain,
            FormatSpec::CountedHeader => FacetFormat::CountedHeader,
            FormatSpec::Auto => FacetFormat::Auto,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroPadSpec {
    pub target_dim: usize,
}

fn default_pca_iters() -> usize {
    300
}
fn default_pca_tol() -> f64 {
    1e-10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PcaSpec {
    pub target_dim: usize,
    #[serde(default = "default_pca_iters")]
    pub max_iters: usize,
    #[serde(default = "default_pca_tol")]
    pub tol: f64,
}

/// Per-facet dimension equalization, e.g. `"none"`,
/// `{"zero_pad": {"target_dim": 300}}`, or `{"pca": {"target_dim": 300}}`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EqualizeSpec {
    #[default]
    None,
    ZeroPad(ZeroPadSpec),
    Pca(PcaSpec),
}

/// One facet reference in the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FacetSpec {
    pub name: String,
    pub path: PathBuf,
    #[serde(default)]
    pub format: FormatSpec,
    #[serde(default)]
    pub equalize: EqualizeSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classify,
    Tag,
}

fn default_window() -> usize {
    2
}

/// Task selection: either three dataset paths or a synthetic generator spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub val_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    /// Tagger window half-width k.
    #[serde(default = "default_window")]
    pub window: usize,
}

/// Optional per-group freeze overrides on top of the mode's defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FreezeOverride {
    #[serde(default)]
    pub alphas: Option<bool>,
    #[serde(default)]
    pub projections: Option<bool>,
    #[serde(default)]
    pub biases: Option<bool>,
    #[serde(default)]
    pub attention: Option<bool>,
    #[serde(default)]
    pub head: Option<bool>,
}

/// Trainer hyperparameters. A missing learning rate resolves to the task
/// default (0.001 tagging, 0.0004 classification).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub learning_rate: Option<f64>,
    pub beta_retraction: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub freeze: FreezeOverride,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            learning_rate: None,
            beta_retraction: 0.001,
            plateau_factor: 0.1,
            plateau_patience: 2,
            max_epochs: 100,
            batch_size: 8,
            adam: AdamConfig::default(),
            freeze: FreezeOverride::default(),
        }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub facets: Vec<FacetSpec>,
    pub mode: BaselineKind,
    #[serde(default)]
    pub projection: ProjectionOverride,
    /// Required for dme; derived from the facets otherwise.
    #[serde(default)]
    pub meta_dim: Option<usize>,
    pub task: TaskSpec,
    #[serde(default)]
    pub train: TrainSettings,
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(&path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let has_paths = self.task.train_path.is_some()
            || self.task.val_path.is_some()
            || self.task.test_path.is_some();
        match (&self.task.synthetic, has_paths) {
            (Some(_), true) => {
                return Err(Error::Config(
                    "task specifies both dataset paths and a synthetic generator".into(),
                ))
            }
            (None, false) => {
                return Err(Error::Config(
                    "task needs either train/val/test paths or a synthetic generator".into(),
                ))
            }
            (None, true) => {
                for (label, p) in [
                    ("train_path", &self.task.train_path),
                    ("val_path", &self.task.val_path),
                    ("test_path", &self.task.test_path),
                ] {
                    let Some(p) = p else {
                        return Err(Error::Config(format!("task is missing {label}")));
                    };
                    if !p.exists() {
                        return Err(Error::Config(format!(
                            "{label} {} does not exist",
                            p.display()
                        )));
                    }
                }
                if self.facets.is_empty() {
                    return Err(Error::Config(
                        "file-based tasks require at least one facet entry".into(),
                    ));
                }
            }
            (Some(spec), false) => {
                if !self.facets.is_empty() {
                    return Err(Error::Config(
                        "synthetic tasks generate their own facets; remove the facets list".into(),
                    ));
                }
                let synthetic_tagging = spec.is_tagging();
                let task_tagging = self.task.kind == TaskKind::Tag;
                if synthetic_tagging != task_tagging {
                    return Err(Error::Config(
                        "synthetic generator variant does not match the task kind".into(),
                    ));
                }
            }
        }
        for facet in &self.facets {
            if !facet.path.exists() {
                return Err(Error::Config(format!(
                    "facet {} path {} does not exist",
                    facet.name,
                    facet.path.display()
                )));
            }
        }
        if self.mode == BaselineKind::Dme && self.meta_dim.is_none() {
            return Err(Error::Config("dme mode requires meta_dim".into()));
        }
        Ok(())
    }
}
