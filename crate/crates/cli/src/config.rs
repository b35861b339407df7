//! TOML run configuration with `section.key=value` overrides.

use std::path::Path;

use gazerep::adapt::{AdaptConfig, CalibrationProtocol};
use gazerep::corpus::CorpusConfig;
use gazerep::manifest::SplitSpec;
use gazerep::model::ModelConfig;
use gazerep::pseudolabel::NoiseConfig;
use gazerep::trainer::TrainConfig;
use gazerep::Error;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoLabelConfig {
    /// `oracle`, `geometric`, or `external`.
    pub labeler: String,
    /// Eyeball radius used by the geometric labeler.
    pub radius_px: f64,
    pub seed: u64,
    pub noise: NoiseConfig,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        PseudoLabelConfig {
            labeler: "geometric".into(),
            radius_px: 12.0,
            seed: 0,
            noise: NoiseConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub pseudo_label: PseudoLabelConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub calibration: CalibrationProtocol,
    pub split: SplitSpec,
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order, and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, Error> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {}", p.display(), one_line(&e.to_string()))))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(one_line(&e.to_string())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Error> {
        self.corpus.validate()?;
        self.pseudo_label.noise.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    /// First 12 hex digits of the SHA-256 of the resolved TOML.
    pub fn short_hash(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `a.b.c=value`; the value is parsed as a TOML value, falling back to a string.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), Error> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
