//! Resolution of the run configuration from a config file, `--set`
//! overrides, the `AST_SEED` variable and dedicated flags, in that order.

use std::fs;
use std::path::Path;

use ast_core::config::RunConfig;
use ast_core::{Error, Result};
use serde_json::{Map, Value};

pub const SEED_VAR: &str = "AST_SEED";

/// Sets `value` at the dotted `key`, creating intermediate objects.
pub fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}` does not name a nested field")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    node.as_object_mut()
        .ok_or_else(|| Error::Config(format!("`{key}` does not name a nested field")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses one `key=value` override; the value is JSON when it parses as
/// JSON and a plain string otherwise.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

pub struct Resolver<'a> {
    pub config: Option<&'a Path>,
    pub overrides: &'a [String],
    pub env_seed: Option<String>,
}

impl Resolver<'_> {
    /// Resolves the configuration; `flags` are applied last so they win.
    pub fn resolve(&self, flags: &[(&str, Value)]) -> Result<RunConfig> {
        let mut doc = match self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.to_path_buf(),
                    source: e,
                })?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => Value::Object(Map::new()),
        };
        if !doc.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        for o in self.overrides {
            let (k, v) = parse_override(o)?;
            set_path(&mut doc, &k, v)?;
        }
        if let Some(s) = &self.env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_VAR}={s} is not an unsigned integer")))?;
            set_path(&mut doc, "train.seed", seed.into())?;
            set_path(&mut doc, "data.seed", seed.into())?;
        }
        for (k, v) in flags {
            set_path(&mut doc, k, v.clone())?;
        }
        RunConfig::from_json(&doc.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolver<'a>(overrides: &'a [String], env: Option<&str>) -> Resolver<'a> {
        Resolver {
            config: None,
            overrides,
            env_seed: env.map(str::to_string),
        }
    }

    #[test]
    fn overrides_parse_json_or_string() {
        assert_eq!(parse_override("train.lr=0.5").unwrap().1, Value::from(0.5));
        assert_eq!(parse_override("output_dir=runs/x").unwrap().1, Value::from("runs/x"));
        assert!(parse_override("train.lr").is_err());
    }

    #[test]
    fn flags_beat_environment_beats_overrides() {
        let o = vec!["train.seed=3".to_string()];
        assert_eq!(resolver(&o, None).resolve(&[]).unwrap().train.seed, 3);
        assert_eq!(resolver(&o, Some("5")).resolve(&[]).unwrap().train.seed, 5);
        let cfg = resolver(&o, Some("5")).resolve(&[("train.seed", 9.into())]).unwrap();
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.data.seed, 5);
    }

    #[test]
    fn unknown_override_key_is_named() {
        let o = vec!["train.learning_rate=1".to_string()];
        let err = resolver(&o, None).resolve(&[]).unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn bad_seed_variable_is_rejected() {
        assert!(resolver(&[], Some("seven")).resolve(&[]).is_err());
    }
}
