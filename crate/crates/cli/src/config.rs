//! Plain-text `key = value` run configuration.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::CliError;

/// Parses one `key = value` pair per line. `#` starts a comment; blank lines
/// are ignored.
pub fn parse(path: &Path, text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |message: String| CliError::Config {
            path: path.to_path_buf(),
            line: Some(i + 1),
            message,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(bad("empty key".into()));
        }
        pairs.push((key.to_string(), value.to_string()));
    }
    Ok(pairs)
}

/// Turns file pairs into long flags for the given subcommand. Switches are
/// emitted only when true.
pub fn to_flags(path: &Path, pairs: &[(String, String)], sub: &clap::Command) -> Result<Vec<String>, CliError> {
    let mut flags = Vec::new();
    for (key, value) in pairs {
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) && key != "config")
            .ok_or_else(|| CliError::Config {
                path: path.to_path_buf(),
                line: None,
                message: format!("unknown key {key:?} for {}", sub.get_name()),
            })?;
        if arg.get_action().takes_values() {
            flags.push(format!("--{key}={value}"));
        } else {
            match value.as_str() {
                "true" => flags.push(format!("--{key}")),
                "false" => {}
                _ => {
                    return Err(CliError::Config {
                        path: path.to_path_buf(),
                        line: None,
                        message: format!("{key} must be true or false, got {value:?}"),
                    })
                }
            }
        }
    }
    Ok(flags)
}

/// Renders resolved arguments in the file format, one key per line.
pub fn render(args: &impl Serialize) -> String {
    let value = serde_json::to_value(args).expect("arguments serialize to JSON");
    let mut out = String::new();
    if let serde_json::Value::Object(map) = value {
        for (key, v) in map {
            let text = match v {
                serde_json::Value::Null => continue,
                serde_json::Value::String(s) => s,
                serde_json::Value::Array(items) => items
                    .iter()
                    .map(|i| i.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                other => other.to_string(),
            };
            out.push_str(&format!("{key} = {text}\n"));
        }
    }
    out
}

/// `dir/stem<suffix>` for a file output.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}
