//! Run configuration: nested sections read from and written to a flat
//! `section.key = value` text file. Values are JSON; bare words are strings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::synthworld::WorldConfig;
use crate::tracker::TrackerParams;
use crate::training::{AcpTrainConfig, PretrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// One of hand_context, no_tracking, random_patch, center_patch.
    pub mode: String,
    pub params: TrackerParams,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig {
            mode: "hand_context".into(),
            params: TrackerParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    /// Crops are taken every `stride` track entries.
    pub stride: usize,
    pub held_out_fraction: f64,
    pub solver: ProbeConfig,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            stride: 2,
            held_out_fraction: 1.0 / 3.0,
            solver: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub tracking: TrackingConfig,
    pub pretrain: PretrainConfig,
    pub probe: ProbeSection,
    pub acp: AcpTrainConfig,
}

impl RunConfig {
    pub fn from_flat(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let pairs = parse_flat(text)?;
        cfg.apply(&pairs)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_flat(&text)
    }

    /// Applies `key = value` overrides in order.
    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let mut tree = serde_json::to_value(&*self).expect("config serializes");
        for (key, raw) in pairs {
            set_path(&mut tree, key, parse_value(raw))?;
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn to_flat(&self) -> String {
        let tree = serde_json::to_value(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &tree, &mut lines);
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// Hex sha256 of the flat form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_flat().as_bytes()))
    }
}

/// Parses `key=value` override syntax.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("override {s:?} has an empty key")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let pair = parse_override(line).map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        out.push(pair);
    }
    Ok(out)
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            *slot = coerce(slot, value);
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split yields at least one part")
}

/// Keeps string-typed fields as strings when the value happens to parse as JSON.
fn coerce(current: &Value, value: Value) -> Value {
    match (current, &value) {
        (Value::String(_), Value::Number(_) | Value::Bool(_)) => Value::String(value.to_string()),
        _ => value,
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<String>) {
    match v {
        Value::Object(map) if !map.is_empty() => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        Value::String(s) => out.push(format!("{prefix} = {s}")),
        other => out.push(format!("{prefix} = {other}")),
    }
}

/// Config tree as JSON, for manifests.
pub fn to_json_map(cfg: &RunConfig) -> Map<String, Value> {
    match serde_json::to_value(cfg).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.pretrain.steps = 17;
        cfg.world.seed = 3;
        cfg.acp.acp.infer_patch_sides = vec![10.0, 20.0];
        let text = cfg.to_flat();
        assert!(text.contains("pretrain.steps = 17\n"));
        assert_eq!(RunConfig::from_flat(&text).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut cfg = RunConfig::default();
        cfg.apply(&[
            parse_override("pretrain.adam.lr=0.001").unwrap(),
            parse_override("pretrain.mode = tcn").unwrap(),
            parse_override("tracking.mode=no_tracking").unwrap(),
            parse_override("world.n_videos=4").unwrap(),
            parse_override("world.n_videos=5").unwrap(),
        ])
        .unwrap();
        assert_eq!(cfg.pretrain.adam.lr, 1e-3);
        assert_eq!(cfg.pretrain.mode, crate::training::PretrainMode::Tcn);
        assert_eq!(cfg.tracking.mode, "no_tracking");
        assert_eq!(cfg.world.n_videos, 5);
    }

    #[test]
    fn bad_keys_and_values_are_errors() {
        let mut cfg = RunConfig::default();
        assert!(cfg.apply(&[("pretrain.nope".into(), "1".into())]).is_err());
        assert!(cfg.apply(&[("pretrain.steps.x".into(), "1".into())]).is_err());
        assert!(cfg.apply(&[("pretrain.steps".into(), "many".into())]).is_err());
        assert!(parse_override("novalue").is_err());
        let err = RunConfig::from_flat("# c\n\nworld.seed = 1\nbroken line\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.probe.stride = 3;
        assert_ne!(a.hash(), b.hash());
    }
}
