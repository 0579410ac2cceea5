//! Parameter checkpoints: a text manifest plus one little-endian f64 blob.
//!
//! `params.manifest` (UTF-8, LF line endings):
//!
//! ```text
//! xldg-checkpoint 1
//! <name> <shape> <byte_offset> <byte_len>
//! ...
//! ```
//!
//! `<shape>` is the dimensions joined by `x` (e.g. `604x64`). Offsets index
//! into `params.bin`, which is every tensor's data in manifest order, each
//! value encoded as 8 little-endian bytes, with no header or padding.

use std::fs;
use std::path::Path;

use super::Tensor;

pub const MANIFEST_FILE: &str = "params.manifest";
pub const BLOB_FILE: &str = "params.bin";
const MAGIC: &str = "xldg-checkpoint 1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("blob holds {actual} bytes, manifest describes {expected}")]
    BlobSize { expected: usize, actual: usize },
}

pub fn encode_blob(tensors: &[(String, &Tensor)]) -> (String, Vec<u8>) {
    let mut manifest = format!("{MAGIC}\n");
    let mut blob = Vec::new();
    for (name, t) in tensors {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let len = t.len() * 8;
        manifest.push_str(&format!("{name} {} {} {len}\n", shape.join("x"), blob.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    (manifest, blob)
}

pub fn decode_blob(manifest: &str, blob: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(CheckpointError::Manifest {
            line: 1,
            reason: format!("expected '{MAGIC}'"),
        });
    }
    let mut out = Vec::new();
    let mut expected = 0;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let bad = |reason: &str| CheckpointError::Manifest {
            line: line_no,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split(' ').collect();
        let [name, shape, offset, len] = fields[..] else {
            return Err(bad("expected 4 space-separated fields"));
        };
        let shape: Vec<usize> = shape
            .split('x')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| bad("bad shape"))?;
        let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
        let len: usize = len.parse().map_err(|_| bad("bad length"))?;
        if offset + len > blob.len() || !len.is_multiple_of(8) {
            return Err(CheckpointError::BlobSize {
                expected: offset + len,
                actual: blob.len(),
            });
        }
        let data = blob[offset..offset + len]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
        expected = expected.max(offset + len);
        out.push((name.to_string(), t));
    }
    if expected != blob.len() {
        return Err(CheckpointError::BlobSize {
            expected,
            actual: blob.len(),
        });
    }
    Ok(out)
}

pub fn save(dir: &Path, tensors: &[(String, &Tensor)]) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir)?;
    let (manifest, blob) = encode_blob(tensors);
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let manifest = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    decode_blob(&manifest, &blob)
}
