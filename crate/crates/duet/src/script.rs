//! JSON Lines replay scripts: one `{"response": ..., "tool_calls": [...]}`
//! object per line.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use duet_core::{ScriptEntry, ScriptedBackend, ToolCallSpec};
use serde::Deserialize;
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCall {
    name: String,
    #[serde(default)]
    args: BTreeMap<String, Value>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    response: String,
    #[serde(default)]
    tool_calls: Vec<RawCall>,
}

fn arg_text(value: Value) -> String {
    match value {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

/// Parses script text. Blank lines are skipped; line numbers in errors
/// are 1-based and count blank lines.
pub fn parse_script(text: &str) -> Result<Vec<ScriptEntry>, ScriptError> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawEntry =
            serde_json::from_str(line).map_err(|e| ScriptError::Parse { line: i + 1, message: e.to_string() })?;
        let tool_calls = raw
            .tool_calls
            .into_iter()
            .map(|c| ToolCallSpec { name: c.name, args: c.args.into_iter().map(|(k, v)| (k, arg_text(v))).collect() })
            .collect();
        entries.push(ScriptEntry { index: entries.len(), response: raw.response, tool_calls });
    }
    Ok(entries)
}

pub fn read_script(path: &Path) -> Result<Vec<ScriptEntry>, ScriptError> {
    let text =
        fs::read_to_string(path).map_err(|source| ScriptError::Io { path: path.display().to_string(), source })?;
    parse_script(&text)
}

pub fn load_script(path: &Path) -> Result<ScriptedBackend, ScriptError> {
    read_script(path).map(ScriptedBackend::new)
}

/// Serialises entries back to script text, one line each.
pub fn write_script(entries: &[ScriptEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let mut obj = serde_json::Map::new();
        obj.insert("response".into(), Value::String(e.response.clone()));
        if !e.tool_calls.is_empty() {
            let calls = e.tool_calls.iter().map(|c| serde_json::json!({ "name": c.name, "args": c.args })).collect();
            obj.insert("tool_calls".into(), Value::Array(calls));
        }
        out.push_str(&Value::Object(obj).to_string());
        out.push('\n');
    }
    out
}
