use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use crate::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Output directory plus wall-clock bookkeeping. Everything except
/// `timings.json` is a deterministic function of the configuration.
pub struct OutDir {
    root: PathBuf,
    files: Vec<String>,
    start: Instant,
    phases: Vec<(String, f64)>,
    last: Instant,
}

impl OutDir {
    pub fn create(root: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        let now = Instant::now();
        Ok(Self {
            root,
            files: Vec::new(),
            start: now,
            phases: Vec::new(),
            last: now,
        })
    }

    /// Closes the current timing phase under `name`.
    pub fn phase(&mut self, name: &str) {
        let now = Instant::now();
        self.phases.push((name.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    /// Adds an externally measured duration.
    pub fn record(&mut self, name: &str, seconds: f64) {
        self.phases.push((name.to_string(), seconds));
    }

    pub fn csv<I>(&mut self, name: &str, header: &[String], rows: I) -> Result<(), CliError>
    where
        I: IntoIterator<Item = Vec<f64>>,
    {
        let path = self.root.join(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        w.write_record(header).map_err(|e| io_err(&path, e))?;
        for row in rows {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.root.join(name);
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn json(&mut self, name: &str, value: &Value) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
        self.text(name, &(body + "\n"))
    }

    /// Writes `config.toml`, `manifest.json` and `timings.json`.
    pub fn finish<C: Serialize>(mut self, command: &str, seed: u64, config: &C, summary: Value) -> Result<PathBuf, CliError> {
        self.phase("write");
        let toml = toml::to_string(config).map_err(|e| CliError::Config(e.to_string()))?;
        self.text("config.toml", &toml)?;
        let mut files = self.files.clone();
        files.push("manifest.json".into());
        files.sort();
        let manifest = json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "config": serde_json::to_value(config).map_err(|e| CliError::Config(e.to_string()))?,
            "summary": summary,
            "files": files,
            "replay": format!("jointnorm {command} --config config.toml"),
        });
        self.json("manifest.json", &manifest)?;
        let phases: serde_json::Map<String, Value> = self.phases.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let timings = json!({
            "total_seconds": self.start.elapsed().as_secs_f64(),
            "phases": phases,
        });
        self.json("timings.json", &timings)?;
        Ok(self.root)
    }
}

/// Column names `prefix0, prefix1, …`.
pub fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}
