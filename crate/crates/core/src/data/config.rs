use std::fs;
use std::path::Path;

use crate::error::{Result, ScfmError};
use crate::objectives::TrainConfig;

/// Parses a JSON object into a validated config; absent keys take defaults.
pub fn config_parse(text: &str) -> Result<TrainConfig> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ScfmError::Config(format!("invalid JSON: {e}")))?;
    if !value.is_object() {
        return Err(ScfmError::Config("config must be a JSON object".into()));
    }
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| ScfmError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_load(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ScfmError::io(path, e))?;
    config_parse(&text)
}

/// The full effective config as pretty JSON.
pub fn config_echo(cfg: &TrainConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Regularizer;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = config_parse("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.d_z + cfg.d_eps, cfg.data_dim);
        assert_eq!(cfg.beta, 4.0);
        assert_eq!(cfg.regularizer, Regularizer::BetaVae);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.ema_decay, 0.9999);
    }

    #[test]
    fn single_override() {
        let cfg = config_parse(r#"{"beta": 2.8}"#).unwrap();
        assert_eq!(cfg.beta, 2.8);
        assert_eq!(TrainConfig { beta: 4.0, ..cfg }, TrainConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        match config_parse(r#"{"betaa": 3}"#) {
            Err(ScfmError::Config(m)) => assert!(m.contains("betaa"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_mismatch_and_dim_check() {
        assert!(matches!(config_parse(r#"{"beta": "big"}"#), Err(ScfmError::Config(_))));
        assert!(matches!(config_parse(r#"{"d_z": 2}"#), Err(ScfmError::Config(_))));
        assert!(matches!(config_parse("[1]"), Err(ScfmError::Config(_))));
    }

    #[test]
    fn echo_roundtrips() {
        let cfg = config_parse(r#"{"beta": 2.8, "regularizer": "beta_tcvae", "hidden": [32]}"#).unwrap();
        let again = config_parse(&config_echo(&cfg)).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(config_echo(&again), config_echo(&cfg));
    }

    #[test]
    fn missing_file_is_io() {
        assert!(matches!(config_load("/no/such/config.json"), Err(ScfmError::Io { .. })));
    }
}
