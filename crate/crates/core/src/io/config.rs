//! Sectioned TOML run configuration with dotted `key=value` overrides.
//!
//! ```toml
//! [synth]
//! seed = 0
//! [model.backbone]
//! style = "c2f"
//! [pretrain]
//! temperature = 0.1
//! [pretrain.augment]
//! blur_prob = 0.5
//! [finetune]
//! init = "ssl"
//! ```
//!
//! Absent keys take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, ProjectionConfig};
use crate::detector::HeadConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::pretrain::PretrainConfig;

use super::synth::SynthConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub projection: ProjectionConfig,
    pub head: HeadConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.backbone.validate()?;
        self.model.head.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// Full configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Sets every section's seed.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }
}

/// Parses `text`, applies overrides in order and validates. Keys without a
/// dot are looked up in `section`.
pub fn parse_config_str(text: &str, overrides: &[(String, String)], section: &str) -> Result<RunConfig> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
    let mut keys = Vec::new();
    for (k, v) in overrides {
        let key = if k.contains('.') || section.is_empty() { k.clone() } else { format!("{section}.{k}") };
        set_path(&mut table, &key, parse_value(v))?;
        keys.push(key);
    }
    let cfg = RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| {
        let msg = e.message().to_string();
        let key = keys
            .iter()
            .rev()
            .find(|k| k.rsplit('.').next().is_some_and(|leaf| msg.contains(&format!("`{leaf}`"))))
            .cloned()
            .unwrap_or_else(|| "<file>".into());
        Error::config(key, msg)
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)], section: &str) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
        None => String::new(),
    };
    parse_config_str(&text, overrides, section)
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::config(s, "override must have the form key=value"))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::config(s, "empty key"));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// A TOML literal when it parses as one, a bare string otherwise.
fn parse_value(v: &str) -> toml::Value {
    format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let next = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next.as_table_mut().ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn temperature_and_defaults() {
        let c = parse_config_str("[pretrain]\ntemperature = 0.1\n", &[], "pretrain").unwrap();
        assert_eq!(c.pretrain.temperature, 0.1);
        assert_eq!(c.finetune.warmup_epochs, 3);
        assert!(c.to_toml().contains("warmup_epochs = 3"));
    }

    #[test]
    fn constraint_and_unknown_key_errors() {
        match parse_config_str("[pretrain]\ntemperature = -1\n", &[], "") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "pretrain.temperature"),
            other => panic!("{other:?}"),
        }
        assert!(parse_config_str("[pretrain]\ntemprature = 0.1\n", &[], "").is_err());
        match parse_config_str("", &[("bogus".into(), "1".into())], "pretrain") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "pretrain.bogus"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_last_wins() {
        let o = vec![
            parse_override("temperature=0.5").unwrap(),
            parse_override("finetune.init=ssl").unwrap(),
            parse_override("pretrain.augment.crop_scale=[0.5, 1.0]").unwrap(),
            parse_override("pretrain.temperature=0.25").unwrap(),
        ];
        let c = parse_config_str("", &o, "pretrain").unwrap();
        assert_eq!(c.pretrain.temperature, 0.25);
        assert_eq!(c.pretrain.augment.crop_scale, (0.5, 1.0));
        assert_eq!(c.finetune.init, crate::finetune::InitMode::Ssl);
    }

    #[test]
    fn echoed_config_reparses() {
        let c = RunConfig::default();
        assert_eq!(parse_config_str(&c.to_toml(), &[], "").unwrap(), c);
    }
}
