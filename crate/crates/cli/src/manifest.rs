//! Per-command `manifest.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub const FILE: &str = "manifest.txt";

#[derive(Debug)]
pub struct RunManifest {
    pub command: &'static str,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    started: Instant,
    started_unix: u64,
}

impl RunManifest {
    pub fn start(command: &'static str, seed: u64) -> Self {
        let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        RunManifest { command, seed, config: Vec::new(), inputs: Vec::new(), outputs: Vec::new(), started: Instant::now(), started_unix }
    }

    pub fn config<K: ToString, V: ToString>(&mut self, prefix: &str, pairs: impl IntoIterator<Item = (K, V)>) {
        self.config.extend(pairs.into_iter().map(|(k, v)| (format!("{prefix}{}", k.to_string()), v.to_string())));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "tool_version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "started_unix={}", self.started_unix);
        let _ = writeln!(s, "duration_secs={:.3}", self.started.elapsed().as_secs_f64());
        for (i, p) in self.inputs.iter().enumerate() {
            let _ = writeln!(s, "input.{i}={}", p.display());
        }
        for (i, p) in self.outputs.iter().enumerate() {
            let _ = writeln!(s, "output.{i}={}", p.display());
        }
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        s
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join(FILE), self.render())
    }
}
