//! Flat `key = value` configuration text.
//!
//! One key per line, `#` comments, values are plain strings parsed on
//! access. The canonical rendering (keys sorted) is what gets hashed and
//! echoed into checkpoints, so identical configurations always hash alike.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FlatConfig {
    entries: BTreeMap<String, String>,
}

impl FlatConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|s| s.as_str())
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::InvalidConfig(format!("missing config key {key:?}")))
    }

    pub fn parse_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse().map_err(|_| {
            Error::InvalidConfig(format!("config key {key:?} has unparsable value {raw:?}"))
        })
    }

    pub fn parse_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(raw) => raw.parse().map_err(|_| {
                Error::InvalidConfig(format!("config key {key:?} has unparsable value {raw:?}"))
            }),
        }
    }

    /// Space-separated list value.
    pub fn parse_list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.require(key)?;
        raw.split_whitespace()
            .map(|v| {
                v.parse().map_err(|_| {
                    Error::InvalidConfig(format!("config key {key:?} has bad element {v:?}"))
                })
            })
            .collect()
    }

    pub fn parse_text(text: &str, source: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                file: source.to_string(),
                line: ln + 1,
                detail: "expected `key = value`".into(),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::Parse {
                    file: source.to_string(),
                    line: ln + 1,
                    detail: format!("bad key {key:?}"),
                });
            }
            entries.insert(key, value.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        Self::parse_text(&text, &path.as_ref().display().to_string())
    }

    /// Canonical text: keys sorted, `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn sha256_hex(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Overlays `other`'s entries on top of this one.
    pub fn merge_over(&mut self, other: &FlatConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }
}

pub fn encoder_config_to_flat(config: &EncoderConfig, flat: &mut FlatConfig) {
    let sizes: Vec<String> = config.codebook_sizes.iter().map(|k| k.to_string()).collect();
    flat.set("codebook_sizes", sizes.join(" "));
    flat.set("d_model", config.d_model);
    flat.set("n_layers", config.n_layers);
    flat.set("n_heads", config.n_heads);
    flat.set("ffn_width", config.ffn_width);
    flat.set("max_positions", config.max_positions);
    flat.set("temperature", config.temperature);
    flat.set("quantizer_dropout", config.quantizer_dropout_prob);
    flat.set("seed", config.seed);
}

pub fn encoder_config_from_flat(flat: &FlatConfig) -> Result<EncoderConfig> {
    let config = EncoderConfig {
        codebook_sizes: flat.parse_list("codebook_sizes")?,
        d_model: flat.parse_value("d_model")?,
        n_layers: flat.parse_value("n_layers")?,
        n_heads: flat.parse_value("n_heads")?,
        ffn_width: flat.parse_value("ffn_width")?,
        max_positions: flat.parse_value("max_positions")?,
        temperature: flat.parse_value("temperature")?,
        quantizer_dropout_prob: flat.parse_value("quantizer_dropout")?,
        seed: flat.parse_value("seed")?,
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_canonical_text() {
        let text = "# comment\nbeta = 2\nalpha = one two\n\n";
        let flat = FlatConfig::parse_text(text, "test").unwrap();
        assert_eq!(flat.get("alpha"), Some("one two"));
        assert_eq!(flat.parse_value::<u32>("beta").unwrap(), 2);
        // Canonical form sorts keys.
        assert_eq!(flat.to_text(), "alpha = one two\nbeta = 2\n");
    }

    #[test]
    fn hash_is_stable_under_reordering() {
        let a = FlatConfig::parse_text("x = 1\ny = 2\n", "a").unwrap();
        let b = FlatConfig::parse_text("y = 2\nx = 1\n", "b").unwrap();
        assert_eq!(a.sha256_hex(), b.sha256_hex());
        let c = FlatConfig::parse_text("x = 1\ny = 3\n", "c").unwrap();
        assert_ne!(a.sha256_hex(), c.sha256_hex());
    }

    #[test]
    fn encoder_config_roundtrip() {
        let config = EncoderConfig::desk_scale(vec![16, 16, 16], 9);
        let mut flat = FlatConfig::new();
        encoder_config_to_flat(&config, &mut flat);
        let back = encoder_config_from_flat(&flat).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn bad_lines_are_rejected() {
        assert!(FlatConfig::parse_text("novalue\n", "t").is_err());
        assert!(FlatConfig::parse_text("two words = 1\n", "t").is_err());
    }
}
