use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

/// Written as `manifest.json` next to every command's outputs. Together with
/// `resolved_config` it is enough to rerun the command.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config_path: Option<String>,
    pub resolved_config: Option<serde_json::Value>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl Manifest {
    pub fn start(command: &str, argv: &[String], config: Option<&Path>) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            config_path: config.map(|p| p.display().to_string()),
            resolved_config: None,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix: now(),
            finished_unix: 0.0,
        }
    }

    pub fn finish(&mut self, dir: &Path) -> std::io::Result<()> {
        self.finished_unix = now();
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        fs::write(dir.join("manifest.json"), text)
    }
}
