use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::write_json;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMING_FILE: &str = "timing.json";

/// Everything needed to re-run a command. Wall-clock time lives in a
/// separate [`Timing`] file so that reruns produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub wall_clock_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, seed: u64, config: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv,
            seed,
            config,
            artifacts: Vec::new(),
        }
    }

    /// Writes the timing file and then the manifest, last, into `dir`.
    pub fn finish(mut self, dir: &Path, elapsed: std::time::Duration) -> Result<()> {
        write_json(
            &dir.join(TIMING_FILE),
            &Timing {
                wall_clock_seconds: elapsed.as_secs_f64(),
            },
        )?;
        self.artifacts.push(TIMING_FILE.into());
        self.artifacts.push(MANIFEST_FILE.into());
        write_json(&dir.join(MANIFEST_FILE), &self)
    }
}
