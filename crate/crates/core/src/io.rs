//! Persistence: atomic file writes, the binary checkpoint format and the
//! output manifest.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! | bytes            | content                                  |
//! |------------------|------------------------------------------|
//! | 0..4             | magic `EGDP`                             |
//! | 4..8             | format version (`u32`)                   |
//! | 8..16            | header length `n` (`u64`)                |
//! | 16..16+n         | header JSON: tensor table and metadata   |
//! | 16+n..           | tensor data, `f64` in header order       |

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EGDP";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            tensors: self
                .tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|source| Error::Json {
            context: "checkpoint header".into(),
            source,
        })?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.len() * 8).sum();
        let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; nothing is materialized until the magic, version
    /// and payload length have been checked.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |offset: usize, reason: String| Error::Checkpoint {
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(corrupt(0, "missing EGDP magic".into()));
        }
        if bytes.len() < PREFIX_LEN {
            return Err(corrupt(bytes.len(), "truncated prefix".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let body = bytes.len() - PREFIX_LEN;
        if hlen > body as u64 {
            return Err(corrupt(8, format!("header length {hlen} exceeds the {body} bytes that follow")));
        }
        let hend = PREFIX_LEN + hlen as usize;
        let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..hend])
            .map_err(|e| corrupt(PREFIX_LEN, format!("header is not valid JSON: {e}")))?;
        let mut expected = 0usize;
        for t in &header.tensors {
            if t.dtype != "f64" {
                return Err(corrupt(PREFIX_LEN, format!("tensor {} has dtype {}", t.name, t.dtype)));
            }
            let n: usize = t.shape.iter().product();
            expected = n
                .checked_mul(8)
                .and_then(|b| expected.checked_add(b))
                .ok_or_else(|| corrupt(PREFIX_LEN, "tensor table overflows".into()))?;
        }
        let payload = bytes.len() - hend;
        if payload != expected {
            return Err(corrupt(hend, format!("payload has {payload} bytes, tensor table needs {expected}")));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut pos = hend;
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let data: Vec<f64> = bytes[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += 8 * n;
            tensors.push((t.name, Tensor::new(t.shape, data)?));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

/// Lists what a command wrote, alongside the resolved configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub files: Vec<String>,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Manifest {
            command: command.into(),
            files: Vec::new(),
            config,
        }
    }

    /// Records `path` relative to `root` (as given when it is outside).
    pub fn add(&mut self, root: &Path, path: &Path) {
        let rel = path.strip_prefix(root).unwrap_or(path);
        let s = rel.to_string_lossy().into_owned();
        if !self.files.contains(&s) {
            self.files.push(s);
        }
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            context: "manifest".into(),
            source,
        })?;
        atomic_write(&path, text.as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        Checkpoint {
            meta: serde_json::json!({"kind": "test", "step": 3}),
            tensors: vec![
                ("a".into(), Tensor::matrix(2, 2, vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()),
                ("b".into(), Tensor::row_vector(vec![std::f64::consts::PI])),
            ],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.meta, c.meta);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(b1, b2);
        }
    }

    #[test]
    fn corruption_is_located() {
        let bytes = sample().encode().unwrap();
        let err = Checkpoint::decode(&bytes[..bytes.len() - 3]).unwrap_err();
        let hend = 16 + u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as u64;
        assert!(matches!(err, Error::Checkpoint { offset, .. } if offset == hend), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::decode(&bad), Err(Error::Checkpoint { offset: 0, .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::decode(&v2), Err(Error::Version { found: 2, expected: 1 })));
        assert!(matches!(Checkpoint::decode(&bytes[..20]), Err(Error::Checkpoint { offset: 8, .. })));
        assert!(Checkpoint::decode(&[]).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.bin");
        atomic_write(&p, b"abc").unwrap();
        atomic_write(&p, b"de").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"de");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }
}
