//! Run configuration: every training knob plus data, output and probe
//! settings, resolved from built-in defaults, then a TOML file, then
//! `key=value` overrides (later layers win).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::data::SyntheticConfig;
use crate::evaluation::ProbeConfig;
use crate::training::TrainConfig;
use crate::{GlareError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Image directory for pre-training; empty selects the synthetic set.
    pub root: String,
    /// Segmentation folder (`images/` + `masks/`) for probing; empty selects the synthetic set.
    pub probe_root: String,
    /// Probe validation folder; empty holds out every fifth image of `probe_root`.
    pub probe_val_root: String,
    pub synthetic: SyntheticConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Encoder archive to start from; empty uses a seeded random backbone.
    pub checkpoint: String,
    /// Trainer checkpoint to resume; takes precedence over `checkpoint`.
    pub resume: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Run directory; empty means `<run root>/<name>`.
    pub dir: String,
    pub name: String,
    /// Periodic checkpoint interval in steps; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: String::new(),
            name: "run".into(),
            checkpoint_every: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub data: DataConfig,
    pub init: InitConfig,
    pub output: OutputConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            train: TrainConfig::toy(),
            probe: ProbeConfig {
                iters: 300,
                ..ProbeConfig::default()
            },
            output: OutputConfig {
                checkpoint_every: 50,
                ..OutputConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let p = &self.probe;
        if p.batch_size == 0 || p.hidden == 0 || p.n_classes == 0 || p.n_classes > 255 || !(p.lr > 0.0) {
            return Err(GlareError::Config("probe needs positive batch_size, hidden, lr and 1..=255 classes".into()));
        }
        if self.output.name.is_empty() && self.output.dir.is_empty() {
            return Err(GlareError::Config("output.name and output.dir are both empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| GlareError::Config(e.to_string()))
    }

    /// Run directory: `output.dir` if set, else `<root>/<output.name>`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        if self.output.dir.is_empty() {
            root.join(&self.output.name)
        } else {
            PathBuf::from(&self.output.dir)
        }
    }
}

/// Keys that have no default value (absent means "unset").
const OPTIONAL_KEYS: [(&str, Kind); 2] = [("augment.photometric_seed", Kind::Integer), ("regions.tau", Kind::Float)];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Integer,
    Float,
    String,
    Other,
}

fn kind(v: &Value) -> Kind {
    match v {
        Value::Integer(_) => Kind::Integer,
        Value::Float(_) => Kind::Float,
        Value::String(_) => Kind::String,
        _ => Kind::Other,
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn coerce(v: Value, want: Kind) -> Value {
    match (want, v) {
        (Kind::Float, Value::Integer(i)) => Value::Float(i as f64),
        (Kind::String, Value::String(s)) => Value::String(s),
        (Kind::String, other) if !matches!(other, Value::Table(_) | Value::Array(_)) => Value::String(other.to_string()),
        (_, v) => v,
    }
}

fn lookup<'a>(tree: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (last, parents) = path.split_last()?;
    let mut t = tree;
    for p in parents {
        t = t.get(*p)?.as_table()?;
    }
    t.get(*last)
}

fn expected_kind(defaults: &Table, path: &[&str]) -> Option<Kind> {
    let dotted = path.join(".");
    if let Some((_, k)) = OPTIONAL_KEYS.iter().find(|(key, _)| *key == dotted) {
        return Some(*k);
    }
    lookup(defaults, path).map(kind)
}

/// Checks every leaf of `user` against `defaults`, coercing integers written
/// for float fields. Returns the dotted paths that do not exist.
fn check_tree(user: &mut Table, defaults: &Table, prefix: &mut Vec<String>, unknown: &mut Vec<String>) {
    for (key, value) in user.iter_mut() {
        prefix.push(key.clone());
        let path: Vec<&str> = prefix.iter().map(String::as_str).collect();
        match expected_kind(defaults, &path) {
            None => unknown.push(prefix.join(".")),
            Some(Kind::Other) => {
                if let Value::Table(t) = value {
                    check_tree(t, defaults, prefix, unknown);
                }
            }
            Some(k) => *value = coerce(value.clone(), k),
        }
        prefix.pop();
    }
}

fn set_path(tree: &mut Table, path: &[&str], value: Value) -> Result<()> {
    let (last, parents) = path.split_last().ok_or_else(|| GlareError::Config("empty key".into()))?;
    let mut t = tree;
    for p in parents {
        let entry = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = entry
            .as_table_mut()
            .ok_or_else(|| GlareError::Config(format!("`{p}` is not a section")))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

/// Resolves defaults ← `file_text` ← `overrides` (each `key=value`, dotted
/// keys address nested sections). Unknown keys fail with all of them listed.
pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let defaults = Table::try_from(RunConfig::default()).map_err(|e| GlareError::Config(e.to_string()))?;
    let mut user: Table = match file_text {
        Some(text) => toml::from_str(text).map_err(|e| GlareError::Config(e.to_string()))?,
        None => Table::new(),
    };
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| GlareError::Config(format!("override `{o}` is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(GlareError::Config(format!("malformed key `{key}`")));
        }
        set_path(&mut user, &path, parse_value(raw.trim()))?;
    }
    let mut unknown = Vec::new();
    check_tree(&mut user, &defaults, &mut Vec::new(), &mut unknown);
    if !unknown.is_empty() {
        return Err(GlareError::UnknownKey(unknown.join(", ")));
    }
    let cfg: RunConfig = Value::Table(user)
        .try_into()
        .map_err(|e: toml::de::Error| GlareError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_file(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = path.map(std::fs::read_to_string).transpose()?;
    resolve(text.as_deref(), overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = resolve(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let text = RunConfig::toy().to_toml().unwrap();
        assert_eq!(resolve(Some(&text), &[]).unwrap(), RunConfig::toy());
    }

    #[test]
    fn overrides_win_over_file() {
        let cfg = resolve(Some("epochs = 7\n[loss]\nregional = 0.5\n"), &["epochs=1".into(), "loss.regional=0".into()]).unwrap();
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.train.loss.regional, 0.0);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = resolve(Some("bogus = 1\n[loss]\nnope = 2\n"), &["optim.lrr=3".into()]).unwrap_err();
        let GlareError::UnknownKey(keys) = err else { panic!("{err}") };
        assert!(keys.contains("bogus") && keys.contains("loss.nope") && keys.contains("optim.lrr"), "{keys}");
    }

    #[test]
    fn optional_and_string_values() {
        let cfg = resolve(None, &["regions.tau=1".into(), "data.root=/tmp/imgs".into(), "output.name=42".into()]).unwrap();
        assert_eq!(cfg.train.regions.tau, Some(1.0));
        assert_eq!(cfg.data.root, "/tmp/imgs");
        assert_eq!(cfg.output.name, "42");
        assert!(resolve(None, &["epochs".into()]).is_err());
        assert!(resolve(None, &["batch_size=0".into()]).is_err());
    }
}
