//! Run manifests: per-command records of the config hash and the digests of
//! every input and output artifact, written atomically at run end. Reruns
//! with identical inputs must produce identical digest sets even though the
//! wall-clock field differs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use wc4dvar_core::io::fnv1a_hex;

pub const ARTIFACT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub wall_ms: u64,
}

fn digest_file(path: &Path) -> std::io::Result<String> {
    Ok(fnv1a_hex(&std::fs::read(path)?))
}

impl RunManifest {
    pub fn new(command: &str, config_hash: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: format!("{config_hash:016x}"),
            ..Default::default()
        }
    }

    pub fn record_input(&mut self, path: &Path) -> std::io::Result<()> {
        self.inputs
            .insert(file_key(path), digest_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> std::io::Result<()> {
        self.outputs
            .insert(file_key(path), digest_file(path)?);
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n");
        out.push_str(&format!("  \"command\": \"{}\",\n", self.command));
        out.push_str(&format!("  \"config_hash\": \"{}\",\n", self.config_hash));
        out.push_str(&format!("  \"artifact_version\": {ARTIFACT_VERSION},\n"));
        out.push_str(&format!("  \"host\": \"{}-{}\",\n", std::env::consts::OS, std::env::consts::ARCH));
        let map = |m: &BTreeMap<String, String>| {
            let entries: Vec<String> = m
                .iter()
                .map(|(k, v)| format!("\"{k}\": \"{v}\""))
                .collect();
            format!("{{{}}}", entries.join(", "))
        };
        out.push_str(&format!("  \"inputs\": {},\n", map(&self.inputs)));
        out.push_str(&format!("  \"outputs\": {},\n", map(&self.outputs)));
        out.push_str(&format!("  \"wall_ms\": {}\n", self.wall_ms));
        out.push_str("}\n");
        out
    }

    /// Writes `manifest_<command>.json` via a temp file and rename.
    pub fn write_atomic(&self, out_dir: &Path) -> std::io::Result<PathBuf> {
        let final_path = out_dir.join(format!("manifest_{}.json", self.command));
        let tmp_path = out_dir.join(format!(".manifest_{}.tmp", self.command));
        {
            let mut f = std::fs::File::create(&tmp_path)?;
            f.write_all(self.to_json().as_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp_path, &final_path)?;
        Ok(final_path)
    }
}

fn file_key(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
