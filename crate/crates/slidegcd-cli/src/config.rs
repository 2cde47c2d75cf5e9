//! Run configuration file: the full TrainConfig plus dataset sources and
//! output directory. CLI flags override individual keys.

use crate::error::{CliError, CliResult};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slidegcd::data::{generate_synthetic, Dataset, PatchBag, SyntheticSpec};
use slidegcd::pipeline::TrainConfig;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub synthetic: Option<SyntheticSpec>,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        RunConfigFile {
            train: TrainConfig::default(),
            synthetic: None,
            train_manifest: None,
            test_manifest: None,
            out_dir: None,
        }
    }
}

impl RunConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: RunConfigFile = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(spec) = &self.synthetic {
            spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            if spec.class_count != self.train.classes {
                return Err(CliError::Usage(format!(
                    "synthetic class_count {} != train classes {}",
                    spec.class_count, self.train.classes
                )));
            }
            if spec.patch_dim != self.train.d_patch {
                return Err(CliError::Usage(format!(
                    "synthetic patch_dim {} != train d_patch {}",
                    spec.patch_dim, self.train.d_patch
                )));
            }
        } else if self.train_manifest.is_none() {
            return Err(CliError::Usage(
                "config needs either a synthetic spec or a train_manifest".into(),
            ));
        }
        Ok(())
    }

    /// Training dataset: synthetic spec if present, otherwise manifests
    /// (train split first, then the optional test split).
    pub fn resolve_dataset(&self) -> CliResult<Dataset> {
        if let Some(spec) = &self.synthetic {
            return Ok(generate_synthetic(spec)?);
        }
        let train_manifest = self.train_manifest.as_ref().ok_or_else(|| {
            CliError::Usage("config has no synthetic spec and no train_manifest".into())
        })?;
        let mut bags = slidegcd::data::load_manifest_bags(train_manifest)?;
        let n_train = bags.len();
        let mut test = Vec::new();
        if let Some(tm) = &self.test_manifest {
            let test_bags = slidegcd::data::load_manifest_bags(tm)?;
            test = (n_train..n_train + test_bags.len()).collect();
            bags.extend(test_bags);
        }
        let train = (0..n_train).collect();
        Ok(Dataset::new(bags, self.train.classes, train, Vec::new(), test)?)
    }

    /// Bags for evaluation: explicit manifest flag, else the config's test
    /// source (manifest or synthetic test split).
    pub fn resolve_eval_bags(&self, manifest: Option<&Path>) -> CliResult<Vec<PatchBag>> {
        if let Some(m) = manifest {
            return Ok(slidegcd::data::load_manifest_bags(m)?);
        }
        if let Some(tm) = &self.test_manifest {
            return Ok(slidegcd::data::load_manifest_bags(tm)?);
        }
        if let Some(spec) = &self.synthetic {
            let dataset = generate_synthetic(spec)?;
            let bags = dataset
                .test
                .iter()
                .map(|&i| dataset.bags[i].clone())
                .collect::<Vec<_>>();
            return Ok(bags);
        }
        Err(CliError::Usage("no evaluation data: pass --manifest or configure a test source".into()))
    }
}

/// Stable hash of the effective hyper-parameters, recorded in metrics.json.
pub fn config_hash(train: &TrainConfig) -> String {
    let bytes = serde_json::to_vec(train).expect("TrainConfig serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
