//! Fenced `key: value` blocks, the machine-checkable layout both agents
//! exchange with their backend.
//!
//! ```text
//! ```
//! subject: A yellow duck
//! elements: carousel horse; cotton candy
//! ```
//! ```

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlockError {
    #[error("line {line}: expected `key: value`, got `{text}`")]
    Malformed { line: usize, text: String },
    #[error("block has no entries")]
    Empty,
    #[error("missing key `{0}`")]
    MissingKey(String),
}

/// Ordered key/value pairs parsed from a block.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Block {
    entries: Vec<(String, String)>,
}

impl Block {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: &str, value: impl Into<String>) -> Self {
        self.push(key, value);
        self
    }

    /// Values are flattened onto one line.
    pub fn push(&mut self, key: &str, value: impl Into<String>) {
        let value: String = value.into();
        let flat = value.split_whitespace().collect::<Vec<_>>().join(" ");
        self.entries.push((key.trim().to_ascii_lowercase(), flat));
    }

    /// First value stored under `key`.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str, BlockError> {
        self.get(key).ok_or_else(|| BlockError::MissingKey(key.to_string()))
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    /// Renders the block wrapped in a ``` fence.
    pub fn render(&self) -> String {
        let mut out = String::from("```\n");
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k}: {v}");
        }
        out.push_str("```\n");
        out
    }

    /// Parses the first fenced block in `text`, or the whole text when it
    /// carries no fence. Blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self, BlockError> {
        let lines: Vec<&str> = text.lines().collect();
        let body: Vec<(usize, &str)> = match lines.iter().position(|l| l.trim_start().starts_with("```")) {
            Some(open) => {
                let close = lines[open + 1..]
                    .iter()
                    .position(|l| l.trim_start().starts_with("```"))
                    .map(|p| open + 1 + p)
                    .unwrap_or(lines.len());
                (open + 1..close).map(|i| (i, lines[i])).collect()
            }
            None => lines.iter().copied().enumerate().collect(),
        };
        let mut block = Block::new();
        for (i, line) in body {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(':').ok_or_else(|| BlockError::Malformed {
                line: i + 1,
                text: line.to_string(),
            })?;
            if k.trim().is_empty() {
                return Err(BlockError::Malformed { line: i + 1, text: line.to_string() });
            }
            block.push(k, v.trim());
        }
        if block.entries.is_empty() {
            return Err(BlockError::Empty);
        }
        Ok(block)
    }
}

/// Splits a `;`-separated list value, dropping empty items.
pub fn split_list(value: &str) -> Vec<String> {
    value.split(';').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
}
