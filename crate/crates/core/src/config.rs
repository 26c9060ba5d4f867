//! Experiment configuration, read from TOML.
//!
//! ```toml
//! output_dir = "out"
//!
//! [dataset]
//! dir = "data"            # omit to generate a synthetic study from [dataset.synth]
//!
//! [dataset.synth]
//! n_days = 10
//!
//! [pipeline]
//! seed = 3
//!
//! [pipeline.stack]
//! kind = "logit"
//! ```
//!
//! Every section is optional; unknown keys are rejected. Relative paths are
//! resolved against the directory holding the configuration file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, ingest_dataset, Dataset, DatasetPaths, IngestOptions, SynthConfig, DEFAULT_AGE, DEFAULT_CAPTURE_S};
use crate::error::{Error, Result};
use crate::evaluation::{PipelineConfig, PretrainMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory with `hr.csv`, `ema.csv`, `traits.csv`, `scales.csv`; synthetic when unset.
    pub dir: Option<PathBuf>,
    pub capture_s: f64,
    pub default_age: u32,
    pub synth: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dir: None,
            capture_s: DEFAULT_CAPTURE_S,
            default_age: DEFAULT_AGE,
            synth: SynthConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn load(&self) -> Result<Dataset> {
        match &self.dir {
            Some(dir) => {
                if !dir.is_dir() {
                    return Err(Error::io(
                        dir,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
                    ));
                }
                let opts = IngestOptions {
                    capture_s: self.capture_s,
                    default_age: self.default_age,
                };
                ingest_dataset(&DatasetPaths::in_dir(dir), opts)
            }
            None => generate_synthetic(&self.synth),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    #[default]
    Pgm,
    Png,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturizeConfig {
    pub image_format: ImageFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    /// Separate dataset used to pretrain base networks when `pipeline.pretrain = "source"`.
    pub source_dataset: Option<DatasetConfig>,
    pub featurize: FeaturizeConfig,
    pub pipeline: PipelineConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            dataset: DatasetConfig::default(),
            source_dataset: None,
            featurize: FeaturizeConfig::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, resolving relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| e.in_stage(format!("config {}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut cfg.output_dir);
        for ds in std::iter::once(&mut cfg.dataset).chain(cfg.source_dataset.as_mut()) {
            if let Some(dir) = ds.dir.as_mut() {
                rebase(base, dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.synth.validate()?;
        if let Some(src) = &self.source_dataset {
            src.synth.validate()?;
        }
        if self.pipeline.pretrain == PretrainMode::Source && self.source_dataset.is_none() {
            return Err(Error::InvalidConfig("pretrain = \"source\" requires a [source_dataset] section".into()));
        }
        self.pipeline.validate()
    }

    /// Replaces every seed: dataset generation, fold planning, network
    /// initialisation, batch shuffling and the random baseline. A synthetic source
    /// dataset gets `seed + 1` so that it differs from the target.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.synth.seed = seed;
        if let Some(src) = self.source_dataset.as_mut() {
            src.synth.seed = seed.wrapping_add(1);
        }
        self.pipeline.set_seed(seed);
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut s = BTreeMap::new();
        if self.dataset.dir.is_none() {
            s.insert("synth".to_string(), self.dataset.synth.seed);
        }
        if let Some(src) = self.source_dataset.as_ref().filter(|d| d.dir.is_none()) {
            s.insert("source_synth".to_string(), src.synth.seed);
        }
        s.insert("folds".to_string(), self.pipeline.seed);
        s.insert("base_training".to_string(), self.pipeline.base.seed);
        s.insert("head_tuning".to_string(), self.pipeline.head.seed);
        s.insert("random_baseline".to_string(), self.pipeline.random_baseline_seed);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
        assert!(ExperimentConfig::from_toml("[pipeline]\nnope = 2").is_err());
        assert!(ExperimentConfig::from_toml("[dataset.synth]\nn_dayz = 2").is_err());
        assert!(ExperimentConfig::from_toml("[pipeline.base.phase1]\nmax_epoch = 2").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.dataset.synth.n_days = 3;
        cfg.pipeline.stack.k = 2;
        cfg.set_seed(99);
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(back.seeds().values().all(|&s| s == 99));
    }

    #[test]
    fn nested_sections_parse() {
        let cfg = ExperimentConfig::from_toml(
            "[dataset.synth]\nn_days = 4\ncoupling_strength = 0.0\n[pipeline]\nseed = 5\n[pipeline.stack]\nkind = \"knn\"\n",
        )
        .unwrap();
        assert_eq!(cfg.dataset.synth.n_days, 4);
        assert_eq!(cfg.pipeline.seed, 5);
        assert_eq!(cfg.pipeline.stack.kind, crate::stacking::MetaKind::Knn);
    }
}
