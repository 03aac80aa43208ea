//! Output directory handling: every artifact is rendered in memory first,
//! then written together with a manifest of content hashes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub command: &'a str,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub files: Vec<FileEntry>,
    pub duration_s: f64,
}

pub fn sha256_hex(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

/// Named artifacts waiting to be written.
#[derive(Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: &str, data: Vec<u8>) {
        self.files.push((name.to_string(), data));
    }

    pub fn render<F>(&mut self, name: &str, f: F) -> io::Result<()>
    where
        F: FnOnce(&mut Vec<u8>) -> io::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.add(name, buf);
        Ok(())
    }

    /// Writes all artifacts and then `manifest.json` into `out`.
    pub fn commit(
        self,
        out: &Path,
        command: &str,
        config: serde_json::Value,
        seed: Option<u64>,
        elapsed: Duration,
    ) -> io::Result<Vec<PathBuf>> {
        fs::create_dir_all(out)?;
        let mut entries = Vec::with_capacity(self.files.len());
        let mut written = Vec::with_capacity(self.files.len() + 1);
        for (name, data) in &self.files {
            let path = out.join(name);
            fs::write(&path, data)?;
            entries.push(FileEntry {
                path: name.clone(),
                bytes: data.len() as u64,
                sha256: sha256_hex(data),
            });
            written.push(path);
        }
        let manifest = RunManifest {
            command,
            config,
            seed,
            files: entries,
            duration_s: elapsed.as_secs_f64(),
        };
        let mut text = serde_json::to_vec_pretty(&manifest).map_err(io::Error::other)?;
        text.push(b'\n');
        let path = out.join("manifest.json");
        fs::write(&path, text)?;
        written.push(path);
        Ok(written)
    }
}
