//! On-disk tensor files and content hashing.
//!
//! A tensor named `a/b` lives in `a/b.bin` (little-endian `f32` payload)
//! next to `a/b.json` (name and shape). Saving narrows to `f32`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TensorSidecar {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

/// SHA-256 over a git-style `blob <len>\0` header plus the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash of an ordered list of `(name, hash)` entries.
pub fn combine_hashes<'a>(entries: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut text = String::new();
    for (name, hash) in entries {
        text.push_str(name);
        text.push(' ');
        text.push_str(hash);
        text.push('\n');
    }
    content_hash(text.as_bytes())
}

pub fn encode_f32<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.len() * 4);
    for x in t.data() {
        out.extend_from_slice(&x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

fn paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.bin")), dir.join(format!("{name}.json")))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes the tensor and returns the content hash of its payload.
pub fn save_tensor<T: Scalar>(dir: &Path, name: &str, t: &Tensor<T>) -> Result<String> {
    let (bin, json) = paths(dir, name);
    let payload = encode_f32(t);
    write_bytes(&bin, &payload)?;
    let sidecar = TensorSidecar {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: "f32le".into(),
    };
    write_bytes(&json, serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(content_hash(&payload))
}

/// Reads a tensor, checking its payload against `expected_hash` when given.
pub fn load_tensor<T: Scalar>(dir: &Path, name: &str, expected_hash: Option<&str>) -> Result<Tensor<T>> {
    let (bin, json) = paths(dir, name);
    let sidecar: TensorSidecar = serde_json::from_slice(&read_bytes(&json)?)?;
    if sidecar.name != name || sidecar.dtype != "f32le" {
        return Err(Error::Format {
            path: json,
            msg: format!("sidecar describes `{}` as {}", sidecar.name, sidecar.dtype),
        });
    }
    let payload = read_bytes(&bin)?;
    if let Some(expected) = expected_hash {
        let found = content_hash(&payload);
        if found != expected {
            return Err(Error::HashMismatch {
                what: bin.display().to_string(),
                expected: expected.to_string(),
                found,
            });
        }
    }
    let n: usize = sidecar.shape.iter().product();
    if payload.len() != n * 4 {
        return Err(Error::Format {
            path: bin,
            msg: format!("{} bytes for shape {:?}", payload.len(), sidecar.shape),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(sidecar.shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_git_style() {
        // `printf 'hello' | git hash-object --stdin` uses the same header with SHA-1;
        // here the digest is SHA-256 of "blob 5\0hello".
        let mut h = Sha256::new();
        h.update(b"blob 5\0hello");
        assert_eq!(content_hash(b"hello"), hex::encode(h.finalize()));
    }

    #[test]
    fn save_load_narrows_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f64>::from_f64(&[2, 2], &[0.1, -2.5, 3.0, 1.0 / 3.0]).unwrap();
        let hash = save_tensor(dir.path(), "ns/w", &t).unwrap();
        let back: Tensor<f64> = load_tensor(dir.path(), "ns/w", Some(&hash)).unwrap();
        assert_eq!(back.shape(), &[2, 2]);
        assert!(back.bit_eq(&t.round_to_storage()));
    }

    #[test]
    fn corrupted_payload_fails_hash() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f64>::zeros(&[3]);
        let hash = save_tensor(dir.path(), "w", &t).unwrap();
        std::fs::write(dir.path().join("w.bin"), [1u8; 12]).unwrap();
        let err = load_tensor::<f64>(dir.path(), "w", Some(&hash)).unwrap_err();
        assert!(matches!(err, Error::HashMismatch { .. }));
    }
}
