use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use refset_vpr::config::ExperimentConfig;
use refset_vpr::{Result, VprError};
use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Args, Clone, Debug, Default)]
pub struct EvalArgs {
    /// Ground-truth radius in meters.
    #[arg(long)]
    pub radius: Option<f64>,
    /// Recall cutoffs, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub ns: Option<Vec<usize>>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub margin: Option<f64>,
    /// Augmented queries per reference per epoch.
    #[arg(long, short = 'M')]
    pub multiplicity: Option<usize>,
    #[arg(long)]
    pub positive_radius: Option<f64>,
    #[arg(long)]
    pub negative_radius: Option<f64>,
    #[arg(long)]
    pub negatives_per_query: Option<usize>,
    /// Epochs without validation improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// none, appearance, viewpoint, or all.
    #[arg(long)]
    pub augment: Option<String>,
    #[arg(long)]
    pub allow_flip: bool,
    /// Mine random negatives instead of using reference poses.
    #[arg(long)]
    pub no_poses: bool,
    /// Dataset directory used for model selection.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    /// Hidden layer widths of a new head, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Descriptor dimension of a new head.
    #[arg(long)]
    pub dim: Option<usize>,
    #[command(flatten)]
    pub eval: EvalArgs,
}

impl EvalArgs {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(v) = self.radius {
            c.radius = v;
        }
        if let Some(v) = &self.ns {
            c.ns = v.clone();
        }
    }
}

impl TrainArgs {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {
                $(if let Some(v) = self.$field.clone() { c.$target = v; })*
            };
        }
        set!(
            epochs => epochs,
            learning_rate => learning_rate,
            batch_size => batch_size,
            margin => margin,
            multiplicity => multiplicity,
            positive_radius => positive_radius,
            negative_radius => negative_radius,
            negatives_per_query => negatives_per_query,
            patience => early_stop_patience,
            augment => augment,
            hidden => hidden_dims,
            dim => output_dim
        );
        if self.validation.is_some() {
            c.validation = self.validation.clone();
        }
        c.allow_flip |= self.allow_flip;
        c.poseless |= self.no_poses;
        self.eval.apply(c);
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Applies the keys of a TOML file on top of `value`; file keys win.
pub fn overlay_file<T: Serialize + DeserializeOwned + Clone>(
    value: &T,
    file: Option<&Path>,
) -> Result<T> {
    let Some(path) = file else {
        return Ok(value.clone());
    };
    let text = fs::read_to_string(path)?;
    let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        VprError::InvalidConfig(format!("{}: {e}", path.display()))
    })?;
    let mut base =
        toml::Table::try_from(value).map_err(|e| VprError::InvalidConfig(e.to_string()))?;
    merge(&mut base, overlay);
    base.try_into()
        .map_err(|e: toml::de::Error| VprError::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Defaults, then flags, then the config file.
pub fn resolve(
    file: Option<&Path>,
    apply: impl FnOnce(&mut ExperimentConfig),
) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    apply(&mut config);
    let config = overlay_file(&config, file)?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_overrides_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "epochs = 7\n[ranges]\nhue_degrees = 10.0\n").unwrap();
        let flags = TrainArgs {
            epochs: Some(2),
            margin: Some(0.3),
            ..TrainArgs::default()
        };
        let c = resolve(Some(&path), |c| flags.apply(c)).unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.margin, 0.3);
        assert_eq!(c.ranges.hue_degrees, 10.0);
        assert_eq!(c.ranges.brightness, 0.3);
    }

    #[test]
    fn unknown_file_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "epoch = 7\n").unwrap();
        assert!(resolve(Some(&path), |_| {}).is_err());
    }
}
