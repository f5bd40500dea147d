//! Provenance manifests: every command records its effective config and
//! the SHA-256 digests of its inputs and outputs. The `created` timestamp
//! is informational only — rerun-stability is defined over the output
//! files themselves, which the digests witness.

use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use veritrace_core::{Error, Result};

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub created: String,
    pub config: serde_json::Value,
    /// path → `sha256:<hex>`
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("sha256:{:x}", hasher.finalize()))
}

fn digest_map(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
        .collect()
}

/// Writes the manifest JSON beside the outputs it describes.
pub fn write_manifest(
    manifest_path: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let manifest = Manifest {
        command: command.to_string(),
        created: chrono::Utc::now().to_rfc3339(),
        config,
        inputs: digest_map(inputs)?,
        outputs: digest_map(outputs)?,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Argument(format!("manifest serialization: {e}")))?;
    std::fs::write(manifest_path, text + "\n")?;
    Ok(())
}

/// Default manifest path: `<primary output>.manifest.json`.
pub fn default_manifest_path(primary_output: &Path) -> std::path::PathBuf {
    let mut name = primary_output
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    name.push_str(".manifest.json");
    primary_output.with_file_name(name)
}
