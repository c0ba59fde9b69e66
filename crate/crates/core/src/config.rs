//! Scenario configuration files (TOML) with `key=value` overrides.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::simulation::ScenarioConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("bad override {0:?}: {1}")]
    Override(String, String),
    #[error(transparent)]
    Invalid(#[from] crate::simulation::SimError),
}

pub fn load_value(path: &Path) -> Result<toml::Table, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    text.parse::<toml::Table>()
        .map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables. The value
/// is read as a TOML literal when it parses as one and as a bare string
/// otherwise, so `seed=7` is an integer and `student.kind=first_match` a
/// string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let bad = |why: &str| ConfigError::Override(spec.to_string(), why.to_string());
    let (key, raw) = spec.split_once('=').ok_or_else(|| bad("expected key=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(bad("empty key segment"));
    }
    let value = parse_literal(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("non-empty");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| bad(&format!("{p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn from_table(table: toml::Table) -> Result<ScenarioConfig, ConfigError> {
    let cfg: ScenarioConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Recursively overlays `top` on `base`. Tables merge key by key; any other
/// value, arrays included, replaces what was there.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Starts from the built-in defaults, overlays `path` if given, applies
/// overrides in order and validates. A nested override such as
/// `population.storage_mb.min=150` keeps the sibling keys it does not name.
pub fn load_scenario(path: Option<&Path>, overrides: &[String]) -> Result<ScenarioConfig, ConfigError> {
    let mut table = toml::Table::try_from(ScenarioConfig::default()).expect("defaults serialize");
    if let Some(p) = path {
        merge(&mut table, load_value(p)?);
    }
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(table)
}

/// SHA-256 over the canonical JSON form of the resolved config.
pub fn config_sha256(cfg: &ScenarioConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

pub fn to_toml(cfg: &ScenarioConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::student::PolicyKind;

    #[test]
    fn partial_nested_override_keeps_siblings() {
        let cfg = load_scenario(None, &["population.storage_mb.min=150".into()]).unwrap();
        assert_eq!(cfg.population.storage_mb.min, 150.0);
        assert_eq!(cfg.population.storage_mb.max, ScenarioConfig::default().population.storage_mb.max);
    }

    #[test]
    fn overrides_are_typed() {
        let cfg = load_scenario(
            None,
            &[
                "seed=7".into(),
                "unreliable_fraction=0".into(),
                "student.kind=first_match".into(),
                "engine.trend.rel_slope_threshold=0.2".into(),
                "sweep.device_counts=[10, 40]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.unreliable_fraction, 0.0);
        assert_eq!(cfg.student.kind, PolicyKind::FirstMatch);
        assert_eq!(cfg.engine.trend.rel_slope_threshold, 0.2);
        assert_eq!(cfg.sweep.device_counts, vec![10, 40]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = load_scenario(None, &["no_such_key=1".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)), "{err}");
    }

    #[test]
    fn invalid_value_is_rejected() {
        let err = load_scenario(None, &["unreliable_fraction=1.5".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)), "{err}");
        assert!(load_scenario(None, &["seed".into()]).is_err());
        assert!(load_scenario(None, &["a..b=1".into()]).is_err());
    }

    #[test]
    fn defaults_survive_toml_round_trip() {
        let cfg = ScenarioConfig::default();
        let text = to_toml(&cfg);
        let back = from_table(text.parse().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(config_sha256(&back), config_sha256(&cfg));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ScenarioConfig::default();
        let b = ScenarioConfig {
            seed: 2,
            ..ScenarioConfig::default()
        };
        assert_ne!(config_sha256(&a), config_sha256(&b));
        assert_eq!(config_sha256(&a).len(), 64);
    }
}
