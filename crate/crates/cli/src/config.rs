//! JSON run configuration. Command-line flags override the file.

use std::path::Path;

use cate_core::inference::IntervalKind;
use cate_core::pipeline::EstimatorConfig;
use cate_core::simulation::{DgpConfig, Figure3Options};
use cate_core::{CateError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dgp: DgpConfig,
    pub methods: Vec<String>,
    pub estimator: EstimatorConfig,
    pub bootstrap: BootstrapConfig,
    pub clan: ClanConfig,
    pub figure3: Figure3Options,
    pub outcome_col: String,
    pub treatment_col: String,
    pub one_hot: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dgp: DgpConfig::default(),
            methods: vec!["T".into(), "X".into(), "DR".into(), "R".into()],
            estimator: EstimatorConfig::default(),
            bootstrap: BootstrapConfig::default(),
            clan: ClanConfig::default(),
            figure3: Figure3Options::default(),
            outcome_col: "y".into(),
            treatment_col: "d".into(),
            one_hot: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub alpha: f64,
    pub interval: IntervalKind,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 500,
            alpha: 0.05,
            interval: IntervalKind::Normal,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClanConfig {
    pub q: f64,
    pub gamma: f64,
}

impl Default for ClanConfig {
    fn default() -> Self {
        ClanConfig { q: 0.2, gamma: 0.9 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| CateError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text)
            .map_err(|e| CateError::InvalidArgument(format!("config {}: {e}", path.display())))
    }
}
