use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

/// Record of one command invocation, emitted alongside every result.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: Value,
    pub seed: u64,
    pub started: String,
    pub finished: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub library_version: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            args: std::env::args().collect(),
            config,
            seed,
            started: now(),
            finished: String::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            library_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn finish(&mut self) {
        self.finished = now();
    }
}
