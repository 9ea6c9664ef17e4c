use std::path::{Path, PathBuf};

use serde::Serialize;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Written to the output directory before a command does any work.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config_path: Option<PathBuf>,
    pub config_hash: Option<String>,
    /// Fully resolved configuration, when the command has one.
    pub config: Option<serde_json::Value>,
    pub output_dir: PathBuf,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub version: String,
}

impl RunManifest {
    pub fn start(command: &str, output_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            args: std::env::args().collect(),
            config_path: None,
            config_hash: None,
            config: None,
            output_dir: output_dir.to_path_buf(),
            started_at: now(),
            finished_at: None,
            status: "running".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn write(&self) -> std::io::Result<()> {
        std::fs::create_dir_all(&self.output_dir)?;
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(self.output_dir.join(MANIFEST_FILE), text + "\n")
    }

    pub fn finish(&mut self, status: &str) -> std::io::Result<()> {
        self.finished_at = Some(now());
        self.status = status.to_string();
        self.write()
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}
