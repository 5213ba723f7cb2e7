use serde::{Deserialize, Serialize};

use crate::error::{RapError, Result};

/// Open/close markers that wrap concept names, e.g. `⟨my dog⟩`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Delimiters {
    pub open: String,
    pub close: String,
}

impl Default for Delimiters {
    fn default() -> Self {
        Self {
            open: "⟨".to_string(),
            close: "⟩".to_string(),
        }
    }
}

impl Delimiters {
    pub fn new(open: impl Into<String>, close: impl Into<String>) -> Result<Self> {
        let d = Self {
            open: open.into(),
            close: close.into(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.open.is_empty() || self.close.is_empty() || self.open == self.close {
            return Err(RapError::InvalidInput(
                "delimiters must be a distinct, non-empty open/close pair".into(),
            ));
        }
        if self.open.contains(&self.close) || self.close.contains(&self.open) {
            return Err(RapError::InvalidInput("delimiters must not contain each other".into()));
        }
        Ok(())
    }

    /// Wraps a bare label: `my dog` -> `⟨my dog⟩`.
    pub fn wrap(&self, inner: &str) -> String {
        format!("{}{}{}", self.open, inner, self.close)
    }

    /// A well-formed name is exactly one wrapped, non-empty token.
    pub fn check_name(&self, name: &str) -> Result<()> {
        let inner = name
            .strip_prefix(self.open.as_str())
            .and_then(|s| s.strip_suffix(self.close.as_str()));
        match inner {
            Some(inner) if !inner.is_empty() && !inner.contains(&self.open) && !inner.contains(&self.close) => Ok(()),
            _ => Err(RapError::InvalidInput(format!(
                "concept name {name:?} must be wrapped as {}name{}",
                self.open, self.close
            ))),
        }
    }

    /// All wrapped tokens in `text`, in order, repeats included. Each token keeps
    /// its delimiters. An open marker without a matching close is skipped, and a
    /// later open marker restarts the token.
    pub fn scan<'a>(&self, text: &'a str) -> Vec<&'a str> {
        let mut out = Vec::new();
        let mut pos = 0;
        while let Some(rel) = text[pos..].find(self.open.as_str()) {
            let start = pos + rel;
            let body_start = start + self.open.len();
            let Some(close_rel) = text[body_start..].find(self.close.as_str()) else {
                break;
            };
            let close = body_start + close_rel;
            // A nearer open marker wins: "⟨a ⟨b⟩" yields "⟨b⟩".
            if let Some(reopen) = text[body_start..close].rfind(self.open.as_str()) {
                pos = body_start + reopen;
                continue;
            }
            let end = close + self.close.len();
            if close > body_start {
                out.push(&text[start..end]);
            }
            pos = end;
        }
        out
    }
}
