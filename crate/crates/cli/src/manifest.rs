//! Run manifest: resolved config echo, version, error counts, wall clock,
//! and a digest inventory of every emitted file.
//!
//! Data files are byte-identical across reruns and worker counts; the
//! manifest's `wall_clock_ms` field is the one value that varies between
//! otherwise identical runs.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::SimConfig;

#[derive(Serialize)]
pub struct RunManifest {
    pub artifact: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    pub threads: usize,
    pub wall_clock_ms: u64,
    pub error_counts: BTreeMap<String, usize>,
    pub outputs: BTreeMap<String, String>,
    pub config: SimConfig,
}

pub struct OutputDir {
    root: PathBuf,
    files: BTreeMap<String, String>,
}

impl OutputDir {
    pub fn create(root: &Path) -> std::io::Result<OutputDir> {
        fs::create_dir_all(root)?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: BTreeMap::new(),
        })
    }

    /// Writes one output file and records its digest.
    pub fn write(&mut self, name: &str, contents: &str) -> std::io::Result<()> {
        let path = self.root.join(name);
        let mut f = fs::File::create(&path)?;
        f.write_all(contents.as_bytes())?;
        let mut hasher = Sha256::new();
        hasher.update(contents.as_bytes());
        self.files.insert(name.to_string(), format!("{:x}", hasher.finalize()));
        Ok(())
    }

    /// Emits the manifest itself (not part of its own inventory).
    pub fn finish(
        self,
        config: &SimConfig,
        subcommand: &str,
        error_counts: BTreeMap<String, usize>,
        wall_clock_ms: u64,
    ) -> std::io::Result<()> {
        let manifest = RunManifest {
            artifact: "mvflow".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            seed: config.run.seed,
            threads: config.run.threads,
            wall_clock_ms,
            error_counts,
            outputs: self.files.clone(),
            config: config.clone(),
        };
        let text = toml::to_string_pretty(&manifest)
            .map_err(|e| std::io::Error::other(format!("manifest encode: {e}")))?;
        fs::write(self.root.join("run_manifest.toml"), text)
    }
}
