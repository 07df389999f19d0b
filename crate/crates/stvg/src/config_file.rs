//! TOML run configuration with `key.path=value` overrides.
//!
//! Keys mirror the field names of [`RunConfig`], e.g.
//!
//! ```toml
//! seed = 3
//! [method]
//! query_mode = "target_aware"
//! delta = 0.5
//! [optim]
//! steps = 1500
//! ```
//!
//! Missing keys keep their defaults; unknown keys are rejected.

use std::path::Path;

use stvg_core::config::RunConfig;
use toml::{Table, Value};

use crate::error::{Error, IoContext, Result};

/// Keys that are absent from the serialised defaults because they default to `None`.
const OPTIONAL_KEYS: &[&str] = &["loss.temporal_sigma"];

fn defaults() -> Table {
    match Value::try_from(RunConfig::default()) {
        Ok(Value::Table(t)) => t,
        _ => unreachable!("RunConfig serialises to a table"),
    }
}

fn merge(base: &mut Table, over: Table, prefix: &str) -> Result<()> {
    for (k, v) in over {
        let path = if prefix.is_empty() { k.clone() } else { format!("{}.{}", prefix, k) };
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o, &path)?,
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(k, v);
            }
            (None, _) => return Err(Error::Config(format!("unknown key `{}`", path))),
        }
    }
    Ok(())
}

/// Parse `a.b.c=value`; the value is read as a TOML literal, falling back to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", s)))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("bad key in `{}`", s)));
    }
    let raw = raw.trim();
    let value = match format!("v = {}", raw).parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((path, value))
}

fn nest(path: &[String], value: Value) -> Table {
    let mut t = Table::new();
    match path {
        [last] => {
            t.insert(last.clone(), value);
        }
        [head, rest @ ..] => {
            t.insert(head.clone(), Value::Table(nest(rest, value)));
        }
        [] => {}
    }
    t
}

/// Build a configuration from an optional TOML text and a list of overrides.
pub fn build(text: Option<&str>, overrides: &[String]) -> Result<RunConfig> {
    let mut base = defaults();
    if let Some(text) = text {
        let t: Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        merge(&mut base, t, "")?;
    }
    for o in overrides {
        let (path, v) = parse_override(o)?;
        merge(&mut base, nest(&path, v), "")?;
    }
    let cfg: RunConfig = Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p).at(p)?),
        None => None,
    };
    build(text.as_deref(), overrides)
}

pub fn to_toml(cfg: &RunConfig) -> String {
    toml::to_string_pretty(cfg).expect("RunConfig serialises to TOML")
}
