//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Later assignments
//! override earlier ones, which is how command-line overrides are layered on
//! top of a file.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::encoder::{join_channels, parse_channels, EncoderBackend};
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::train::TrainConfig;

pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected key=value, got '{line}'", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::config(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Split `key=value` as given on the command line.
pub fn parse_assignment(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::config(format!("expected key=value, got '{s}'")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected on/off, got '{value}'"))),
    }
}

/// Everything a training run needs besides data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub network: NetworkConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::default();
        cfg.apply(&parse_key_values(&text)?)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, entries: &[(String, String)]) -> Result<()> {
        for (k, v) in entries {
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.train.set(key, value)? {
            return Ok(());
        }
        let net = &mut self.network;
        match key {
            "model.channels" => net.encoder.channels = parse_channels(value)?,
            "model.head_width" => net.head_width = parse(key, value)?,
            "model.residual_blocks" => net.residual_blocks = parse(key, value)?,
            "model.encoder" => net.encoder.backend = value.parse::<EncoderBackend>()?,
            "model.encoder_weights" => net.encoder.weights = Some(PathBuf::from(value)),
            "model.freeze_encoder" => net.encoder.freeze = parse_bool(key, value)?,
            _ => return Err(Error::config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.network.validate()
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e = self.train.entries();
        let net = &self.network;
        e.push(("model.channels".into(), join_channels(net.encoder.channels)));
        e.push(("model.head_width".into(), net.head_width.to_string()));
        e.push(("model.residual_blocks".into(), net.residual_blocks.to_string()));
        e.push(("model.encoder".into(), net.encoder.backend.to_string()));
        if let Some(w) = &net.encoder.weights {
            e.push(("model.encoder_weights".into(), w.display().to_string()));
        }
        e.push(("model.freeze_encoder".into(), net.encoder.freeze.to_string()));
        e
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Network configuration initialised from the training seed.
    pub fn seeded_network(&self) -> NetworkConfig {
        NetworkConfig {
            seed: self.train.seed,
            ..self.network.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;

    #[test]
    fn parses_comments_and_overrides() {
        let text = "# run\nepochs = 3\n\nloss.kind=bce\nepochs=5\nmodel.channels = 8,16,32,64\n";
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_key_values(text).unwrap()).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.train.loss.kind, LossKind::Bce);
        assert_eq!(cfg.network.encoder.channels, [8, 16, 32, 64]);
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("base_lr", "0.02").unwrap();
        cfg.set("loss.delta", "0.45").unwrap();
        cfg.set("model.head_width", "12").unwrap();
        cfg.set("schedule_unit", "iteration").unwrap();
        let mut back = RunConfig::default();
        back.apply(&parse_key_values(&cfg.to_text()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(parse_key_values("epochs 3"), Err(Error::Config(_))));
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nonsense", "1"), Err(Error::Config(_))));
        assert!(matches!(cfg.set("epochs", "many"), Err(Error::Config(_))));
        let entries = vec![("loss.delta".to_string(), "1.5".to_string())];
        assert!(matches!(cfg.apply(&entries), Err(Error::Config(_))));
    }
}
