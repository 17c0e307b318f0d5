//! Run configuration: one TOML file with nested sections.
//!
//! Every key is optional. Defaults come from the profile (`toy` or `full`)
//! and, for the `[encoder]` section, from the chosen variant; the user's
//! file is merged over them and unknown keys are rejected. The resolved
//! configuration is written into every run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::SynthSpec;
use crate::decoder::{DecoderSpec, SeedDistribution};
use crate::encoder::{EncoderSpec, EncoderVariant};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, Profile};
use crate::training::{AblationGrid, TrainConfig};

/// File name of the resolved configuration inside a run directory.
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// Dataset directory used by `train`, `eval` and `ablate`.
    pub root: PathBuf,
    /// Parameters of `dataset synth`, including the noise model.
    pub synth: SynthSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: Profile,
    /// Points per input cloud.
    pub input_points: usize,
    pub run_dir: PathBuf,
    pub dataset: DatasetSection,
    pub encoder: EncoderSpec,
    pub decoder: DecoderSpec,
    pub train: TrainConfig,
    pub ablation: AblationGrid,
}

impl Config {
    pub fn defaults(profile: Profile, variant: EncoderVariant) -> Self {
        let model = ModelSpec::new(profile, variant);
        let synth = match profile {
            Profile::Toy => SynthSpec::toy(7),
            Profile::Full => SynthSpec::full(7),
        };
        Config {
            profile,
            input_points: model.input_points,
            run_dir: PathBuf::from("runs/default"),
            dataset: DatasetSection {
                root: PathBuf::from("data/synth"),
                synth,
            },
            encoder: model.encoder,
            decoder: model.decoder,
            train: TrainConfig {
                batch_size: profile.batch_size(),
                epochs: profile.epochs(),
                ..TrainConfig::default()
            },
            ablation: AblationGrid {
                encoders: vec![EncoderVariant::Mlp, EncoderVariant::Tmlp],
                seed_distributions: vec![
                    SeedDistribution::Uniform { low: 0.0, high: 1.0 },
                    SeedDistribution::Zero,
                ],
                surfaces: vec![4, 8, 16, 32],
                seeds: vec![1, 2, 3],
            },
        }
    }

    /// Parses a configuration, filling every missing key with the default
    /// for the file's profile (overridable by `profile`) and encoder variant.
    pub fn parse(text: &str, profile: Option<Profile>) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let profile = match profile {
            Some(p) => p,
            None => match user.get("profile") {
                None => Profile::default(),
                Some(v) => v
                    .as_str()
                    .ok_or_else(|| Error::Config("profile must be a string".into()))?
                    .parse()?,
            },
        };
        let variant = match user.get("encoder").and_then(|e| e.get("variant")) {
            None => EncoderVariant::Tmlp,
            Some(v) => v
                .as_str()
                .ok_or_else(|| Error::Config("encoder.variant must be a string".into()))?
                .parse()?,
        };
        let mut user = user;
        sync_dropout(&mut user)?;
        let mut merged = toml::Table::try_from(Self::defaults(profile, variant)).expect("defaults serialize");
        merge(&mut merged, user);
        merged.insert("profile".into(), toml::Value::String(profile.to_string()));
        let config: Config = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, profile).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.dropout_rate != self.train.dropout {
            return Err(Error::Config(format!(
                "encoder.dropout_rate ({}) and train.dropout ({}) disagree",
                self.encoder.dropout_rate, self.train.dropout
            )));
        }
        self.model().validate()?;
        self.train.validate()?;
        self.ablation.validate()?;
        self.dataset.synth.noise.validate()
    }

    pub fn model(&self) -> ModelSpec {
        ModelSpec {
            input_points: self.input_points,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

/// The dropout rate may be given as `train.dropout` or
/// `encoder.dropout_rate`; one setting fills the other.
fn sync_dropout(user: &mut toml::Table) -> Result<()> {
    let get = |t: &toml::Table, section: &str, key: &str| t.get(section).and_then(|s| s.get(key)).cloned();
    let train = get(user, "train", "dropout");
    let encoder = get(user, "encoder", "dropout_rate");
    let (section, key, value) = match (train, encoder) {
        (Some(v), None) => ("encoder", "dropout_rate", v),
        (None, Some(v)) => ("train", "dropout", v),
        _ => return Ok(()),
    };
    match user
        .entry(section)
        .or_insert_with(|| toml::Value::Table(toml::Table::new()))
    {
        toml::Value::Table(t) => {
            t.insert(key.into(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("{section} must be a table"))),
    }
}

/// Recursively overlays `user` onto `base`; tables merge, other values
/// replace. A table naming its variant (`kind = ...`) replaces the default
/// whole, since fields of another variant would not apply.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !u.contains_key("kind") => merge(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
