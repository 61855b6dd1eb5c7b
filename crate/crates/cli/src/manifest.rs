use occtip::Result;
use serde::Serialize;
use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

/// Everything needed to rerun a command: the resolved configuration, the
/// seed, the source revision and the exact command line.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub git_describe: String,
    pub seed: Option<u64>,
    pub config: Value,
    pub start_unix_ms: u128,
    pub end_unix_ms: Option<u128>,
    pub outcome: Option<String>,
    #[serde(skip)]
    path: PathBuf,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// `<output>.manifest.json`
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

impl RunManifest {
    /// Writes the manifest immediately, before any work starts.
    pub fn begin(command: &str, seed: Option<u64>, config: Value, path: PathBuf) -> Result<Self> {
        let m = RunManifest {
            command: command.into(),
            argv: std::env::args().collect(),
            version: env!("CARGO_PKG_VERSION").into(),
            git_describe: git_describe(),
            seed,
            config,
            start_unix_ms: now_ms(),
            end_unix_ms: None,
            outcome: None,
            path,
        };
        m.write()?;
        Ok(m)
    }

    fn write(&self) -> Result<()> {
        std::fs::write(&self.path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn finish(mut self, outcome: &str) -> Result<()> {
        self.end_unix_ms = Some(now_ms());
        self.outcome = Some(outcome.into());
        self.write()
    }
}
