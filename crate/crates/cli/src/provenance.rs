use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use brainvcs::io::write_atomic;

/// Run record written next to every output. It carries no timestamps or host
/// details so that reruns with identical flags produce identical bytes.
#[derive(Debug, Serialize)]
pub struct Provenance<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config: C,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl<C: Serialize> Provenance<C> {
    pub fn new(command: &'static str, seed: Option<u64>, config: C) -> Self {
        Provenance {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    /// Outputs are recorded relative to the record's own directory, so a tree
    /// written under two different roots carries identical records.
    pub fn write(mut self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            for o in &mut self.outputs {
                if let Ok(rel) = Path::new(o.as_str()).strip_prefix(dir) {
                    *o = rel.display().to_string();
                }
            }
        }
        let mut bytes = serde_json::to_vec_pretty(&self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
    }
}

/// `report.json` → `report.json.provenance.json`.
pub fn sidecar(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".provenance.json");
    output.with_file_name(name)
}
