use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{RapError, Result, Stage};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Blocking JSON-over-HTTP client shared by the remote backends.
#[derive(Debug, Clone)]
pub struct JsonClient {
    agent: ureq::Agent,
    url: String,
    stage: Stage,
}

impl JsonClient {
    pub fn new(url: impl Into<String>, stage: Stage, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            url: url.into(),
            stage,
        }
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, body: &B) -> Result<T> {
        let mut response = self
            .agent
            .post(&self.url)
            .send_json(body)
            .map_err(|e| RapError::backend(self.stage, format!("POST {}: {e}", self.url)))?;
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| RapError::backend(self.stage, format!("reading {}: {e}", self.url)))?;
        serde_json::from_str(&text).map_err(|e| RapError::malformed(self.stage, format!("{}: {e}", self.url)))
    }
}
