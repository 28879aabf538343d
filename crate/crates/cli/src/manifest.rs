use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

pub const MANIFEST_SCHEMA: &str = "run-manifest v1";

/// Everything needed to reproduce a run byte-identically. Written next to
/// the outputs as `manifest.json`; feeding it back through `--config`
/// replays the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub version: String,
    pub command: String,
    pub feeder: Option<PathBuf>,
    pub profiles: Option<PathBuf>,
    pub seed: u64,
    pub radius: f64,
    pub mode: Option<String>,
    pub days: usize,
    pub no_load: bool,
    pub out: PathBuf,
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if m.schema != MANIFEST_SCHEMA {
            anyhow::bail!("unsupported manifest schema {:?} in {}", m.schema, path.display());
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        let path = dir.join("manifest.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
