//! Dataset files: MNIST IDX and the feature-vector container.
//!
//! Feature container (all little-endian):
//!
//! | offset | size  | field                                  |
//! |--------|-------|----------------------------------------|
//! | 0      | 4     | magic `b"CFV1"`                        |
//! | 4      | 4     | `n: u32` instances                     |
//! | 8      | 4     | `d: u32` dimension                     |
//! | 12     | 1     | `has_labels: u8` (0 or 1)              |
//! | 13     | 1     | `c: u8` classes (0 if no labels)       |
//! | 14     | 4·n·d | `f32` values, row-major                |
//! | …      | n     | `u8` labels, present iff `has_labels`  |
//!
//! Nothing may follow the last field.

use std::fs;
use std::path::{Path, PathBuf};

use cerebellum_core::LabeledDataset;

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const FEATURE_MAGIC: &[u8; 4] = b"CFV1";
pub const MNIST_CLASSES: usize = 10;

/// Environment variable naming the MNIST directory.
pub const DATA_DIR_ENV: &str = "CEREBELLUM_DATA_DIR";

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(path: &'a Path, bytes: &'a [u8]) -> Self {
        Self {
            path,
            bytes,
            pos: 0,
        }
    }

    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(self.fail(
                self.bytes.len(),
                format!(
                    "truncated: {what} needs {len} bytes at offset {}, {} remain",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            )),
        }
    }

    fn u32_be(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.fail(
                self.pos,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

/// Images as `(n, rows*cols, pixels)`; pixels are raw bytes.
pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut r = Reader::new(path, bytes);
    let magic = r.u32_be("magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(r.fail(
            0,
            format!("bad magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let n = r.u32_be("image count")? as usize;
    let rows = r.u32_be("row count")? as usize;
    let cols = r.u32_be("column count")? as usize;
    let d = rows
        .checked_mul(cols)
        .ok_or_else(|| r.fail(8, "image size overflows"))?;
    let total = n
        .checked_mul(d)
        .ok_or_else(|| r.fail(4, "image data size overflows"))?;
    let pixels = r.take(total, "pixel data")?.to_vec();
    r.finish()?;
    Ok((n, d, pixels))
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut r = Reader::new(path, bytes);
    let magic = r.u32_be("magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(r.fail(
            0,
            format!("bad magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = r.u32_be("label count")? as usize;
    let labels = r.take(n, "label data")?.to_vec();
    r.finish()?;
    if let Some(pos) = labels.iter().position(|&l| l as usize >= MNIST_CLASSES) {
        return Err(r.fail(8 + pos, format!("label {} is not a digit", labels[pos])));
    }
    Ok(labels)
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]` by `/255`.
pub fn load_idx(images: &Path, labels: &Path, provenance: &str) -> Result<LabeledDataset> {
    let (n, d, pixels) = parse_idx_images(images, &read(images)?)?;
    let labels_v = parse_idx_labels(labels, &read(labels)?)?;
    if labels_v.len() != n {
        return Err(Error::Parse {
            path: labels.to_path_buf(),
            offset: 4,
            message: format!("{} labels for {n} images", labels_v.len()),
        });
    }
    let inputs = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels_v = labels_v.into_iter().map(u32::from).collect();
    Ok(LabeledDataset::new(
        inputs,
        labels_v,
        d,
        MNIST_CLASSES,
        (0.0, 1.0),
        provenance,
    )?)
}

/// Serializes images and labels as IDX files (for fixtures).
pub fn encode_idx(
    n: usize,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + labels.len());
    for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Which MNIST split to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }

    pub fn provenance(self) -> &'static str {
        match self {
            Split::Train => "mnist-train",
            Split::Test => "mnist-test",
        }
    }
}

/// IDX paths for `split` under `dir`, accepting both the `-idx3-ubyte` and
/// `.idx3-ubyte` spellings.
pub fn mnist_paths(dir: &Path, split: Split) -> Result<(PathBuf, PathBuf)> {
    let p = split.prefix();
    let find = |kind: &str, idx: u8| -> Result<PathBuf> {
        let candidates = [
            format!("{p}-{kind}-idx{idx}-ubyte"),
            format!("{p}-{kind}.idx{idx}-ubyte"),
        ];
        candidates
            .iter()
            .map(|name| dir.join(name))
            .find(|path| path.is_file())
            .ok_or_else(|| Error::Data(format!("no {} in {}", candidates[0], dir.display())))
    };
    Ok((find("images", 3)?, find("labels", 1)?))
}

pub fn load_mnist(dir: &Path, split: Split) -> Result<LabeledDataset> {
    let (images, labels) = mnist_paths(dir, split)?;
    load_idx(&images, &labels, split.provenance())
}

/// Loads a feature container. Bounds are the data's own `(min, max)`.
pub fn load_features(path: &Path) -> Result<LabeledDataset> {
    let bytes = read(path)?;
    let mut r = Reader::new(path, &bytes);
    let magic = r.take(4, "magic")?;
    if magic != FEATURE_MAGIC {
        return Err(r.fail(
            0,
            format!("bad magic {magic:?}, expected {FEATURE_MAGIC:?}"),
        ));
    }
    let n = r.u32_le("instance count")? as usize;
    let d = r.u32_le("dimension")? as usize;
    let flags = r.take(2, "label header")?;
    let (has_labels, c) = (flags[0], flags[1] as usize);
    if has_labels > 1 {
        return Err(r.fail(12, format!("label flag {has_labels} is not 0 or 1")));
    }
    if has_labels == 0 {
        return Err(Error::Data(format!(
            "{}: labels are required but the file has none",
            path.display()
        )));
    }
    if n == 0 || d == 0 {
        return Err(r.fail(4, "empty feature matrix"));
    }
    let len = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| r.fail(4, "feature data size overflows"))?;
    let start = r.pos;
    let raw = r.take(len, "feature data")?;
    let mut inputs = Vec::with_capacity(n * d);
    for (i, b) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if !v.is_finite() {
            return Err(r.fail(start + 4 * i, format!("non-finite feature {v}")));
        }
        inputs.push(v as f64);
    }
    let label_start = r.pos;
    let labels = r.take(n, "labels")?;
    r.finish()?;
    if let Some(pos) = labels.iter().position(|&l| l as usize >= c) {
        return Err(r.fail(
            label_start + pos,
            format!("label {} is not below c = {c}", labels[pos]),
        ));
    }
    let lo = inputs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = inputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(LabeledDataset::new(
        inputs,
        labels.iter().map(|&l| l as u32).collect(),
        d,
        c,
        (lo, hi),
        path.display().to_string(),
    )?)
}

/// Writes a labeled feature container.
pub fn write_features(
    path: &Path,
    n: usize,
    d: usize,
    c: usize,
    values: &[f32],
    labels: &[u8],
) -> Result<()> {
    if values.len() != n * d || labels.len() != n || c > u8::MAX as usize {
        return Err(Error::Data(format!(
            "feature container shape mismatch: n={n} d={d} c={c}, {} values, {} labels",
            values.len(),
            labels.len()
        )));
    }
    let mut out = Vec::with_capacity(14 + 4 * values.len() + n);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.push(1);
    out.push(c as u8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("fixture")
    }

    #[test]
    fn images_round_trip() {
        let (img, _) = encode_idx(
            2,
            2,
            3,
            &[0, 1, 2, 253, 254, 255, 9, 8, 7, 6, 5, 4],
            &[1, 2],
        );
        let (n, d, px) = parse_idx_images(p(), &img).unwrap();
        assert_eq!((n, d), (2, 6));
        assert_eq!(px, vec![0, 1, 2, 253, 254, 255, 9, 8, 7, 6, 5, 4]);
    }

    #[test]
    fn wrong_magic_is_reported_at_byte_zero() {
        let (mut img, _) = encode_idx(1, 1, 1, &[0], &[0]);
        img[3] = 0x02;
        match parse_idx_images(p(), &img) {
            Err(Error::Parse { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_trailing_bytes() {
        let (img, lab) = encode_idx(2, 2, 2, &[7; 8], &[0, 1]);
        assert!(matches!(
            parse_idx_images(p(), &img[..img.len() - 1]),
            Err(Error::Parse { offset: 23, .. })
        ));
        assert!(matches!(
            parse_idx_images(p(), &img[..6]),
            Err(Error::Parse { offset: 6, .. })
        ));
        let mut long = lab.clone();
        long.push(0);
        assert!(matches!(
            parse_idx_labels(p(), &long),
            Err(Error::Parse { offset: 10, .. })
        ));
    }

    #[test]
    fn non_digit_label_is_rejected() {
        let (_, lab) = encode_idx(1, 1, 1, &[0], &[10]);
        assert!(matches!(
            parse_idx_labels(p(), &lab),
            Err(Error::Parse { offset: 8, .. })
        ));
    }
}
