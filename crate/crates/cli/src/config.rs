//! `--config` files. A config is a JSON object whose keys are flag names
//! (snake_case or kebab-case). Before parsing, every key the command line
//! does not already set is appended to argv as a flag, which gives the
//! precedence flags > config > environment > built-in defaults.

use std::path::{Path, PathBuf};

use clap::CommandFactory;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Every setting a config file may carry. Unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct RunConfig {
    // paths
    pub input: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub matrix: Option<PathBuf>,
    pub descriptors: Option<PathBuf>,
    pub candidates: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub label_map: Option<PathBuf>,
    pub template: Option<PathBuf>,
    pub example: Option<PathBuf>,
    pub fixtures_dir: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub truth: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    // parameters
    pub min_words: Option<usize>,
    pub max_words: Option<usize>,
    pub english_only: Option<bool>,
    pub seed: Option<u64>,
    pub k_percent: Option<f64>,
    pub threshold: Option<f64>,
    pub unresolved: Option<String>,
    pub k_list: Option<Vec<usize>>,
    pub t_grid: Option<Vec<f64>>,
    pub truth_top: Option<usize>,
    pub cluster_threshold: Option<f32>,
    pub min_size: Option<usize>,
    pub blacklist: Option<Vec<String>>,
    pub no_blacklist: Option<bool>,
    pub model: Option<Vec<String>>,
    pub mode: Option<String>,
    pub endpoint: Option<String>,
    pub wire_format: Option<String>,
    pub max_in_flight: Option<usize>,
    pub max_output_tokens: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub jobs: Option<usize>,
}

#[derive(Debug)]
pub enum ConfigError {
    Unreadable(String),
    Invalid(String),
}

impl ConfigError {
    pub fn is_usage(&self) -> bool {
        matches!(self, ConfigError::Invalid(_))
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Unreadable(m) | ConfigError::Invalid(m) => f.write_str(m),
        }
    }
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            ConfigError::Unreadable(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| ConfigError::Invalid(format!("config {}: {e}", path.display())))
    }

    /// `(long flag name, values)`; an empty value list is a bare switch.
    fn flags(&self) -> Vec<(String, Vec<String>)> {
        let Value::Object(map) = serde_json::to_value(self).expect("config serializes") else {
            unreachable!()
        };
        let mut out = Vec::new();
        for (key, v) in map {
            let flag = key.replace('_', "-");
            let values = match v {
                Value::Null | Value::Bool(false) => continue,
                Value::Bool(true) => Vec::new(),
                Value::Array(items) => items.iter().map(scalar).collect(),
                other => vec![scalar(&other)],
            };
            out.push((flag, values));
        }
        out
    }
}

fn scalar(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Finds `--config <path>` / `--config=<path>` in raw argv.
fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

fn present(argv: &[String], flag: &str) -> bool {
    let long = format!("--{flag}");
    let eq = format!("--{flag}=");
    argv.iter().any(|a| *a == long || a.starts_with(&eq))
}

/// Appends config-file settings to `argv`. Keys that the chosen subcommand
/// does not accept are ignored, so one config can serve several commands.
pub fn inject(argv: Vec<String>) -> Result<Vec<String>, ConfigError> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let config = RunConfig::read(Path::new(&path))?;
    let root = crate::Cli::command();
    let sub = argv
        .iter()
        .skip(1)
        .find_map(|a| root.find_subcommand(a))
        .cloned();
    let accepts = |flag: &str| {
        let has = |c: &clap::Command| c.get_arguments().any(|a| a.get_long() == Some(flag));
        has(&root) || sub.as_ref().is_some_and(has)
    };
    let mut out = argv.clone();
    for (flag, values) in config.flags() {
        if present(&argv, &flag) || !accepts(&flag) {
            continue;
        }
        if values.is_empty() {
            out.push(format!("--{flag}"));
        }
        for v in values {
            out.push(format!("--{flag}"));
            out.push(v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_losslessly() {
        let c = RunConfig {
            corpus: Some("c.jsonl".into()),
            k_percent: Some(1.5),
            k_list: Some(vec![1, 3]),
            blacklist: Some(vec!["Positive".into()]),
            english_only: Some(true),
            ..RunConfig::default()
        };
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"k_percnt": 1}"#).is_err());
    }

    #[test]
    fn flags_expand_lists_and_switches() {
        let c = RunConfig {
            k_list: Some(vec![1, 2]),
            english_only: Some(true),
            no_blacklist: Some(false),
            ..RunConfig::default()
        };
        let f = c.flags();
        assert!(f.contains(&("k-list".into(), vec!["1".into(), "2".into()])));
        assert!(f.contains(&("english-only".into(), vec![])));
        assert!(!f.iter().any(|(k, _)| k == "no-blacklist"));
    }

    #[test]
    fn finds_config_flag() {
        let argv: Vec<String> = ["x", "attribute", "--config=a.json"]
            .map(String::from)
            .to_vec();
        assert_eq!(config_path(&argv).as_deref(), Some("a.json"));
        let argv: Vec<String> = ["x", "--config", "b.json", "synth"]
            .map(String::from)
            .to_vec();
        assert_eq!(config_path(&argv).as_deref(), Some("b.json"));
        assert!(present(&["--seed=3".to_string()], "seed"));
        assert!(!present(&["--seeds".to_string()], "seed"));
    }
}
