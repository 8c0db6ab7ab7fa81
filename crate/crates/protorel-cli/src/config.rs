//! Flat key-value training configuration files.
//!
//! One `key = value` assignment per line, `#` starts a comment, keys mirror
//! the trainer's config fields. Unset keys take the library defaults; the
//! canonical rendering writes every key back out so logs and checkpoints
//! record the complete effective configuration, not just what the operator
//! typed.

use protorel::data::VocabMode;
use protorel::trainer::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}:{line}: unknown key {key:?}")]
    UnknownKey {
        origin: String,
        line: usize,
        key: String,
    },
    #[error("{origin}:{line}: bad value for {key}: {reason}")]
    BadValue {
        origin: String,
        line: usize,
        key: String,
        reason: String,
    },
    #[error("{origin}:{line}: expected `key = value`")]
    BadSyntax { origin: String, line: usize },
    #[error("bad override {entry:?}: {reason}")]
    BadOverride { entry: String, reason: String },
    #[error("invalid configuration: {reason}")]
    Invalid { reason: String },
}

/// All recognized keys, in canonical render order.
pub const KEYS: [&str; 15] = [
    "n_train",
    "k_train",
    "queries",
    "fast_lr",
    "slow_lr",
    "slow_every",
    "phase_episodes",
    "max_len",
    "word_dim",
    "pos_dim",
    "hidden_dim",
    "window",
    "vocab_mode",
    "seed",
    "fast_reset",
];

fn set_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    fn int(value: &str) -> Result<usize, String> {
        value
            .parse::<usize>()
            .map_err(|e| format!("{value:?} is not a non-negative integer ({e})"))
    }
    fn float(value: &str) -> Result<f64, String> {
        value
            .parse::<f64>()
            .map_err(|e| format!("{value:?} is not a number ({e})"))
    }
    match key {
        "n_train" => cfg.n_train = int(value)?,
        "k_train" => cfg.k_train = int(value)?,
        "queries" => cfg.queries = int(value)?,
        "fast_lr" => cfg.fast_lr = float(value)?,
        "slow_lr" => cfg.slow_lr = float(value)?,
        "slow_every" => cfg.slow_every = int(value)?,
        "phase_episodes" => {
            let parts: Vec<&str> = value.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return Err(format!(
                    "expected three comma-separated counts, got {value:?}"
                ));
            }
            cfg.phase_episodes = (int(parts[0])?, int(parts[1])?, int(parts[2])?);
        }
        "max_len" => cfg.max_len = int(value)?,
        "word_dim" => cfg.word_dim = int(value)?,
        "pos_dim" => cfg.pos_dim = int(value)?,
        "hidden_dim" => cfg.hidden_dim = int(value)?,
        "window" => cfg.window = int(value)?,
        "vocab_mode" => {
            cfg.vocab_mode = match value {
                "word" => VocabMode::Word,
                "char" => VocabMode::Char,
                other => return Err(format!("{other:?} is neither \"word\" nor \"char\"")),
            }
        }
        "seed" => {
            cfg.seed = value
                .parse::<u64>()
                .map_err(|e| format!("{value:?} is not a seed ({e})"))?
        }
        "fast_reset" => {
            cfg.fast_reset = match value {
                "true" => true,
                "false" => false,
                other => return Err(format!("{other:?} is neither \"true\" nor \"false\"")),
            }
        }
        _ => return Err(String::new()), // caller reports UnknownKey
    }
    Ok(())
}

/// Parse a config document on top of the defaults. `origin` names the file
/// in diagnostics.
pub fn parse(text: &str, origin: &str) -> Result<TrainConfig, ConfigError> {
    let mut cfg = TrainConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let stripped = raw.split('#').next().unwrap_or("").trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| ConfigError::BadSyntax {
            origin: origin.to_string(),
            line,
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                origin: origin.to_string(),
                line,
                key: key.to_string(),
            });
        }
        set_key(&mut cfg, key, value).map_err(|reason| ConfigError::BadValue {
            origin: origin.to_string(),
            line,
            key: key.to_string(),
            reason,
        })?;
    }
    Ok(cfg)
}

/// Apply `key=value` command-line overrides on top of a parsed config.
pub fn apply_overrides(cfg: &mut TrainConfig, overrides: &[String]) -> Result<(), ConfigError> {
    for entry in overrides {
        let (key, value) = entry.split_once('=').ok_or_else(|| ConfigError::BadOverride {
            entry: entry.clone(),
            reason: "expected key=value".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(ConfigError::BadOverride {
                entry: entry.clone(),
                reason: format!("unknown key {key:?}"),
            });
        }
        set_key(cfg, key, value).map_err(|reason| ConfigError::BadOverride {
            entry: entry.clone(),
            reason,
        })?;
    }
    Ok(())
}

/// Validate and reject with the library's own reason text.
pub fn validated(cfg: TrainConfig) -> Result<TrainConfig, ConfigError> {
    cfg.validate()
        .map_err(|reason| ConfigError::Invalid { reason })?;
    Ok(cfg)
}

/// Every key with its effective value as text, in canonical order.
pub fn pairs(cfg: &TrainConfig) -> Vec<(&'static str, String)> {
    let (p1, p2, p3) = cfg.phase_episodes;
    vec![
        ("n_train", cfg.n_train.to_string()),
        ("k_train", cfg.k_train.to_string()),
        ("queries", cfg.queries.to_string()),
        ("fast_lr", cfg.fast_lr.to_string()),
        ("slow_lr", cfg.slow_lr.to_string()),
        ("slow_every", cfg.slow_every.to_string()),
        ("phase_episodes", format!("{p1},{p2},{p3}")),
        ("max_len", cfg.max_len.to_string()),
        ("word_dim", cfg.word_dim.to_string()),
        ("pos_dim", cfg.pos_dim.to_string()),
        ("hidden_dim", cfg.hidden_dim.to_string()),
        ("window", cfg.window.to_string()),
        ("vocab_mode", cfg.vocab_mode.to_string()),
        ("seed", cfg.seed.to_string()),
        ("fast_reset", cfg.fast_reset.to_string()),
    ]
}

/// Canonical full rendering; parsing it back reproduces the config exactly.
pub fn render(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    for (key, value) in pairs(cfg) {
        out.push_str(key);
        out.push_str(" = ");
        out.push_str(&value);
        out.push('\n');
    }
    out
}
