//! Run manifests: what a command was asked to do and what it will write,
//! recorded before any computation starts.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{code_version, content_hash, sha256_file};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the manifest with this field empty.
    pub id: String,
    pub subcommand: String,
    pub config: serde_json::Value,
    pub inputs: Vec<InputFile>,
    pub seeds: Vec<u64>,
    pub code_version: String,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(
        subcommand: &str,
        config: serde_json::Value,
        inputs: &[PathBuf],
        seeds: Vec<u64>,
        outputs: Vec<String>,
    ) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputFile {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut manifest = Self {
            id: String::new(),
            subcommand: subcommand.into(),
            config,
            inputs,
            seeds,
            code_version: code_version(),
            outputs,
        };
        manifest.id = content_hash(&manifest);
        Ok(manifest)
    }

    /// Writes the manifest as `dir/name`, creating `dir`.
    pub fn write_as(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = dir.join(name);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(Error::io(&path))?;
        Ok(path)
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        self.write_as(dir, MANIFEST_FILE)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: invalid manifest: {e}", path.display())))
    }
}

/// Files under `dir` that no manifest in `manifests` lists (manifests
/// themselves excluded). Paths are relative to `dir`.
pub fn orphans(
    dir: &Path,
    manifests: &[RunManifest],
    manifest_files: &[PathBuf],
) -> Result<Vec<String>> {
    let mut listed: std::collections::BTreeSet<String> = manifests
        .iter()
        .flat_map(|m| m.outputs.iter().cloned())
        .collect();
    for f in manifest_files {
        if let Ok(rel) = f.strip_prefix(dir) {
            listed.insert(rel.to_string_lossy().into_owned());
        }
    }
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(Error::io(&d))? {
            let path = entry.map_err(Error::io(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .into_owned();
                if !listed.contains(&rel) {
                    found.push(rel);
                }
            }
        }
    }
    found.sort();
    Ok(found)
}
