//! Experiment configuration: a TOML file with flat sections, merged with
//! command-line overrides. Unknown keys are rejected by serde. The fully
//! resolved config (all defaults applied) is written back into every run
//! directory so a run can be reproduced from that file alone.

use fdse_core::data::{DomainSpec, GeneratorConfig};
use fdse_core::error::{FdseError, Result};
use fdse_core::federation::TrainerConfig;
use fdse_core::model::ModelArch;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub trainer: TrainerConfig,
    pub generator: GeneratorConfig,
    /// Domain specs, in client order. Defaults to the 4-domain benchmark.
    pub domains: Vec<DomainSpec>,
    /// Model architecture; omitted = the built-in 2-block default sized to
    /// the generator's class count.
    pub arch: Option<ModelArch>,
    /// Where run artifacts go (flag --out overrides).
    pub out_dir: Option<String>,
    /// Existing dataset directory; when absent the benchmark is generated
    /// in memory from (generator, domains, data_seed).
    pub dataset: Option<String>,
    pub data_seed: u64,
    /// Domain id excluded from federated training and reserved as the
    /// unseen adaptation target.
    pub holdout: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            trainer: TrainerConfig::default(),
            generator: GeneratorConfig::default(),
            domains: DomainSpec::synth_domains_4(),
            arch: None,
            out_dir: None,
            dataset: None,
            data_seed: 0,
            holdout: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let disp = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| FdseError::io(&disp, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| FdseError::Config(format!("{}: {}", disp, e)))?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let disp = path.display().to_string();
        let text = toml::to_string_pretty(self)
            .map_err(|e| FdseError::Config(format!("{}: {}", disp, e)))?;
        std::fs::write(path, text).map_err(|e| FdseError::io(&disp, e))?;
        Ok(())
    }

    /// Architecture to train: explicit, or the default sized to the
    /// generator (or loaded dataset) class count.
    pub fn resolve_arch(&self, num_classes: usize) -> ModelArch {
        match &self.arch {
            Some(a) => a.clone(),
            None => {
                let mut arch = ModelArch::desk_default();
                arch.num_classes = num_classes;
                arch
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.generator.validate()?;
        if self.domains.is_empty() {
            return Err(FdseError::Config("at least one domain is required".into()));
        }
        let channels = self.generator.channels();
        for d in &self.domains {
            d.validate(channels)?;
        }
        if let Some(h) = &self.holdout {
            if !self.domains.iter().any(|d| &d.id == h) {
                return Err(FdseError::Config(format!(
                    "holdout '{}' is not a configured domain (have: {})",
                    h,
                    self.domains.iter().map(|d| d.id.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
        }
        Ok(())
    }
}

/// Resolve an output path against the FDSE_OUT_ROOT environment variable:
/// relative paths are joined under the root when it is set.
pub fn resolve_out(path: &str) -> PathBuf {
    let p = PathBuf::from(path);
    if p.is_relative() {
        if let Ok(root) = std::env::var("FDSE_OUT_ROOT") {
            if !root.is_empty() {
                return PathBuf::from(root).join(p);
            }
        }
    }
    p
}
