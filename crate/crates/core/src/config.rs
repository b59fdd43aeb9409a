//! Experiment configuration files and atomic output writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augmentation::{AugmentRanges, AugmentSelection, AugmentationSpec};
use crate::embedding::{DEFAULT_HIDDEN_DIMS, DEFAULT_OUTPUT_DIM};
use crate::error::{Result, VprError};
use crate::evaluation::{DEFAULT_NS, DEFAULT_RADIUS_M};
use crate::rsf::TrainConfig;

/// Writes `bytes` to a temporary sibling of `path` and renames it into place,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| VprError::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Every tunable of a training or evaluation run. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub margin: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub multiplicity: usize,
    pub positive_radius: f64,
    pub negative_radius: f64,
    pub negatives_per_query: usize,
    pub early_stop_patience: usize,
    /// `none`, `appearance`, `viewpoint` or `all`.
    pub augment: String,
    pub allow_flip: bool,
    pub poseless: bool,
    pub seed: u64,
    pub validation: Option<PathBuf>,
    pub radius: f64,
    pub ns: Vec<usize>,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub ranges: AugmentRanges,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            margin: t.margin,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            multiplicity: t.multiplicity,
            positive_radius: t.positive_radius,
            negative_radius: t.negative_radius,
            negatives_per_query: t.negatives_per_query,
            early_stop_patience: t.early_stop_patience,
            augment: AugmentSelection::All.as_str().to_string(),
            allow_flip: false,
            poseless: t.poseless,
            seed: t.seed,
            validation: None,
            radius: DEFAULT_RADIUS_M,
            ns: DEFAULT_NS.to_vec(),
            hidden_dims: DEFAULT_HIDDEN_DIMS.to_vec(),
            output_dim: DEFAULT_OUTPUT_DIM,
            ranges: AugmentRanges::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| VprError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.ranges.validate()?;
        self.selection()?;
        if !(self.radius > 0.0) {
            return Err(VprError::InvalidConfig(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        if self.ns.is_empty() || self.ns.contains(&0) {
            return Err(VprError::InvalidConfig(
                "ns must be non-empty positive integers".into(),
            ));
        }
        if self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(VprError::InvalidConfig(
                "layer widths must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn selection(&self) -> Result<AugmentSelection> {
        self.augment.parse()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            margin: self.margin,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            multiplicity: self.multiplicity,
            positive_radius: self.positive_radius,
            negative_radius: self.negative_radius,
            negatives_per_query: self.negatives_per_query,
            early_stop_patience: self.early_stop_patience,
            poseless: self.poseless,
            eval_radius: self.radius,
            seed: self.seed,
        }
    }

    pub fn augmentation_spec(&self) -> Result<AugmentationSpec> {
        Ok(AugmentationSpec::from_selection(
            self.selection()?,
            self.ranges.clone(),
            self.allow_flip,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig {
            epochs: 4,
            augment: "appearance".into(),
            ..ExperimentConfig::default()
        };
        c.ranges.hue_degrees = 20.0;
        c.validation = Some("val".into());
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::from_toml("epochz = 3").is_err());
        assert!(ExperimentConfig::from_toml("margin = -1.0").is_err());
        assert!(ExperimentConfig::from_toml("augment = \"sideways\"").is_err());
        assert!(ExperimentConfig::from_toml("multiplicity = 0").is_err());
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("f.bin");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
