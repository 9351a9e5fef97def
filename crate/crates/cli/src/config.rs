//! JSON run configuration with strict key checking.

use std::path::Path;

use ptnet_core::model::PtNetConfig;
use ptnet_core::training::TrainPlan;
use ptnet_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Everything a run reads besides its command-line paths.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Named base model; keys under `model` override it.
    pub preset: Option<String>,
    pub model: PtNetConfig,
    pub train: TrainPlan,
}

/// Dotted paths present in `user` but absent from `reference`.
fn unknown_keys(user: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(r)) = (user, reference) else {
        return;
    };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match r.get(k) {
            Some(rv) => unknown_keys(v, rv, &path, out),
            None => out.push(path),
        }
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    /// Parses config text, listing every unknown key at once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        let reference = serde_json::to_value(Self::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&v, &reference, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        if let Some(name) = v.get("preset").and_then(Value::as_str) {
            let mut model = serde_json::to_value(PtNetConfig::preset(name)?)?;
            if let Some(over) = v.get_mut("model").map(Value::take) {
                merge(&mut model, over);
            }
            v["model"] = model;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The file at `path` (defaults otherwise) with the seed override applied.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.train.seed = s;
        }
        Ok(cfg)
    }

    /// Self-contained form: preset expanded into `model`.
    pub fn resolved(&self) -> Self {
        Self {
            preset: None,
            ..self.clone()
        }
    }

    /// Writes the resolved snapshot; loading it back reproduces the run.
    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.resolved())?;
        text.push('\n');
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
