//! Checkpoint directories.
//!
//! ```text
//! <dir>/metadata.json   format version, d, m, k, c, beta, ltd_enabled, seed,
//!                       preset, and per-array {file, len, sha256}
//! <dir>/indices.u64     m*k granule input indices, cell-major, u64 LE
//! <dir>/weights.f64     m*k granule weights aligned with indices, f64 LE
//! <dir>/readout.f64     W, m x c row-major, f64 LE
//! <dir>/mu.f64          LTD centering vector, m values, f64 LE
//! ```
//!
//! Saving is deterministic: the same network always yields the same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use cerebellum_core::{GranuleLayer, Network, NetworkConfig, PurkinjeLayer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;

pub const FORMAT_VERSION: u32 = 1;
pub const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayEntry {
    pub file: String,
    pub len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub format_version: u32,
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub c: usize,
    pub beta: f64,
    pub ltd_enabled: bool,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub indices: ArrayEntry,
    pub weights: ArrayEntry,
    pub readout: ArrayEntry,
    pub mu: ArrayEntry,
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn write_array(
    dir: &Path,
    name: &str,
    bytes: Vec<u8>,
    len: usize,
    written: &mut Vec<PathBuf>,
) -> Result<ArrayEntry> {
    let path = dir.join(name);
    let sha256 = sha256_hex(&bytes);
    fs::write(&path, bytes).map_err(Error::io(&path))?;
    written.push(path);
    Ok(ArrayEntry {
        file: name.into(),
        len,
        sha256,
    })
}

/// Writes `net` into `dir` (created if needed); returns the files written.
pub fn save(net: &Network, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let cfg = net.config();
    let g = net.granule();
    let p = net.purkinje();
    let mut written = Vec::new();
    let indices: Vec<u8> = g
        .indices()
        .iter()
        .flat_map(|&i| (i as u64).to_le_bytes())
        .collect();
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        d: cfg.d,
        m: cfg.m,
        k: cfg.k,
        c: cfg.c,
        beta: p.beta(),
        ltd_enabled: cfg.ltd_enabled,
        seed: cfg.seed,
        preset: cfg.preset.clone(),
        indices: write_array(dir, "indices.u64", indices, g.indices().len(), &mut written)?,
        weights: write_array(
            dir,
            "weights.f64",
            f64_bytes(g.weights()),
            g.weights().len(),
            &mut written,
        )?,
        readout: write_array(
            dir,
            "readout.f64",
            f64_bytes(p.weights()),
            p.weights().len(),
            &mut written,
        )?,
        mu: write_array(dir, "mu.f64", f64_bytes(p.mu()), p.mu().len(), &mut written)?,
    };
    let path = dir.join(METADATA_FILE);
    let mut text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    text.push('\n');
    fs::write(&path, text).map_err(Error::io(&path))?;
    written.push(path);
    Ok(written)
}

fn corrupt(dir: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("checkpoint {}: {msg}", dir.display()))
}

fn read_array(dir: &Path, entry: &ArrayEntry, expected_len: usize) -> Result<Vec<[u8; 8]>> {
    if entry.len != expected_len {
        return Err(corrupt(
            dir,
            format!(
                "{} declares {} values, expected {expected_len}",
                entry.file, entry.len
            ),
        ));
    }
    if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
        return Err(corrupt(
            dir,
            format!("array file name {:?} is not a plain name", entry.file),
        ));
    }
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    if bytes.len() != 8 * expected_len {
        return Err(corrupt(
            dir,
            format!(
                "{} has {} bytes, expected {}",
                entry.file,
                bytes.len(),
                8 * expected_len
            ),
        ));
    }
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(corrupt(dir, format!("{} fails its checksum", entry.file)));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|b| b.try_into().expect("8-byte chunk"))
        .collect())
}

pub fn read_metadata(dir: &Path) -> Result<Metadata> {
    let path = dir.join(METADATA_FILE);
    let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
    let meta: Metadata =
        serde_json::from_str(&text).map_err(|e| corrupt(dir, format!("{METADATA_FILE}: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(corrupt(
            dir,
            format!(
                "format version {} (supported: {FORMAT_VERSION})",
                meta.format_version
            ),
        ));
    }
    Ok(meta)
}

/// Loads and validates a checkpoint. Any inconsistency is a data error.
pub fn load(dir: &Path) -> Result<Network> {
    let meta = read_metadata(dir)?;
    let mk = meta
        .m
        .checked_mul(meta.k)
        .ok_or_else(|| corrupt(dir, "m * k overflows"))?;
    let mc = meta
        .m
        .checked_mul(meta.c)
        .ok_or_else(|| corrupt(dir, "m * c overflows"))?;
    let indices = read_array(dir, &meta.indices, mk)?
        .into_iter()
        .map(|b| {
            u32::try_from(u64::from_le_bytes(b)).map_err(|_| corrupt(dir, "index exceeds u32"))
        })
        .collect::<Result<Vec<u32>>>()?;
    let as_f64 = |v: Vec<[u8; 8]>| v.into_iter().map(f64::from_le_bytes).collect::<Vec<_>>();
    let weights = as_f64(read_array(dir, &meta.weights, mk)?);
    let readout = as_f64(read_array(dir, &meta.readout, mc)?);
    let mu = as_f64(read_array(dir, &meta.mu, meta.m)?);

    let mut cfg = NetworkConfig::new(meta.d, meta.m, meta.k, meta.c)
        .with_seed(meta.seed)
        .with_ltd(meta.ltd_enabled);
    cfg.preset = meta.preset.clone();
    let build = || -> cerebellum_core::Result<Network> {
        let granule = GranuleLayer::from_parts(meta.d, meta.m, meta.k, indices, weights)?;
        let purkinje =
            PurkinjeLayer::from_parts(meta.m, meta.c, readout, mu, meta.beta, meta.ltd_enabled)?;
        Network::from_parts(cfg, granule, purkinje)
    };
    build().map_err(|e| corrupt(dir, e))
}
