//! Flat dotted-key configuration: one `key = value` per line, `#` starts a
//! comment. Keys address leaves of a command's settings tree; every leaf
//! has a default, so an unknown key is always an error.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Number, Value};

use crate::CliError;

/// `(key, raw value, origin)` in the order they were given.
pub type Pairs = Vec<(String, String, String)>;

/// Parses config text. Repeating a key within one file is an error.
pub fn parse_text(text: &str, origin: &str) -> Result<Pairs, CliError> {
    let mut out: Pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let at = format!("{origin}:{}", i + 1);
        let (key, value) = line.split_once('=').ok_or_else(|| CliError::config(format!("{at}: expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::config(format!("{at}: empty key")));
        }
        if out.iter().any(|(k, _, _)| k == key) {
            return Err(CliError::config(format!("{at}: key `{key}` repeated")));
        }
        out.push((key.to_string(), value.trim().to_string(), at));
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<Pairs, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_text(&text, &path.display().to_string())
}

/// Parses `--set key=value` flags.
pub fn parse_overrides(flags: &[String]) -> Result<Pairs, CliError> {
    flags
        .iter()
        .map(|f| {
            let (k, v) = f.split_once('=').ok_or_else(|| CliError::config(format!("override `{f}` is not `key=value`")))?;
            Ok((k.trim().to_string(), v.trim().to_string(), "command line".to_string()))
        })
        .collect()
}

/// Value of `key` among the pairs (the last occurrence wins).
pub fn lookup<'a>(pairs: &'a Pairs, key: &str) -> Option<&'a str> {
    pairs.iter().rev().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str())
}

/// A settings tree rooted at `root` (the command name).
pub struct Tree {
    root: String,
    value: Value,
}

impl Tree {
    pub fn new<S: Serialize>(root: &str, settings: &S) -> Self {
        let value = serde_json::to_value(settings).expect("settings serialise");
        Self { root: root.to_string(), value }
    }

    /// Replaces the leaf at `key`, parsing `raw` as the leaf's type.
    pub fn set(&mut self, key: &str, raw: &str, origin: &str) -> Result<(), CliError> {
        let unknown = || CliError::config(format!("{origin}: unknown key `{key}`"));
        let rest = key.strip_prefix(&self.root).and_then(|r| r.strip_prefix('.')).ok_or_else(unknown)?;
        let mut node = &mut self.value;
        for part in rest.split('.') {
            node = match node {
                Value::Object(map) => map.get_mut(part).ok_or_else(unknown)?,
                Value::Array(items) => part.parse::<usize>().ok().and_then(|i| items.get_mut(i)).ok_or_else(unknown)?,
                _ => return Err(unknown()),
            };
        }
        if matches!(node, Value::Object(_) | Value::Array(_)) {
            return Err(unknown());
        }
        *node = parse_like(node, raw).map_err(|m| CliError::config(format!("{origin}: key `{key}`: {m}")))?;
        Ok(())
    }

    pub fn apply(&mut self, pairs: &Pairs) -> Result<(), CliError> {
        for (k, v, origin) in pairs {
            self.set(k, v, origin)?;
        }
        Ok(())
    }

    pub fn settings<S: DeserializeOwned>(&self) -> Result<S, CliError> {
        serde_json::from_value(self.value.clone()).map_err(|e| CliError::config(format!("invalid {} settings: {e}", self.root)))
    }

    /// Every leaf as `key = value`, in the input format.
    pub fn dump(&self) -> String {
        let mut lines = Vec::new();
        flatten(&self.value, &self.root, &mut lines);
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

fn flatten(v: &Value, prefix: &str, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                flatten(child, &format!("{prefix}.{k}"), out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten(child, &format!("{prefix}.{i}"), out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        Value::Null => out.push((prefix.to_string(), String::new())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn parse_like(existing: &Value, raw: &str) -> Result<Value, String> {
    match existing {
        Value::Bool(_) => match raw {
            "true" | "1" => Ok(Value::Bool(true)),
            "false" | "0" => Ok(Value::Bool(false)),
            _ => Err(format!("expected true or false, got `{raw}`")),
        },
        Value::Number(n) if n.is_u64() => raw.parse::<u64>().map(Value::from).map_err(|_| format!("expected a non-negative integer, got `{raw}`")),
        Value::Number(n) if n.is_i64() => raw.parse::<i64>().map(Value::from).map_err(|_| format!("expected an integer, got `{raw}`")),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .and_then(Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a finite number, got `{raw}`")),
        _ => Ok(Value::String(raw.to_string())),
    }
}
