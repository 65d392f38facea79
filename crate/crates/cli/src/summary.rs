use std::fmt::Display;
use std::io::Write;
use std::time::Instant;

use sha2::{Digest, Sha256};

/// `key: value` lines printed after a command. Everything but the final
/// timing line depends only on the inputs and the seed.
pub struct RunSummary {
    started: Instant,
    lines: Vec<(String, String)>,
}

impl RunSummary {
    pub fn new(command: &str) -> Self {
        let mut summary = RunSummary {
            started: Instant::now(),
            lines: Vec::new(),
        };
        summary.push("command", command);
        summary
    }

    pub fn push(&mut self, key: &str, value: impl Display) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn digest(&mut self, key: &str, bytes: &[u8]) {
        self.push(key, hex::encode(Sha256::digest(bytes)));
    }

    /// Write errors (a closed pipe, say) are ignored: the outputs are already on disk.
    pub fn print(self) {
        let mut out = std::io::stdout().lock();
        for (key, value) in &self.lines {
            let _ = writeln!(out, "{key}: {value}");
        }
        let _ = writeln!(out, "elapsed_ms: {:.3}", self.started.elapsed().as_secs_f64() * 1e3);
    }
}
