//! Binary container shared by checkpoints (`GLCK`), gradient packets
//! (`GLGP`), ground-truth archives (`GLGT`) and datasets (`GLDS`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic[4] | u32 version | u32 header_len | header (JSON, UTF-8)
//! repeated until EOF:
//!   u32 name_len | name | u32 ndim | u32 dims[ndim] | f32 data[prod(dims)]
//! ```

use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (this build reads version {VERSION})")]
    Version { found: u32 },
    #[error("file ends inside the header")]
    TruncatedHeader,
    #[error("array `{0}` is truncated or has a corrupt length")]
    CorruptLength(String),
    #[error("header is not valid JSON: {0}")]
    Header(#[from] serde_json::Error),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub header: Vec<u8>,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(magic: [u8; 4], header: Vec<u8>) -> Self {
        Self {
            magic,
            header,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.push(NamedArray {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self
            .arrays
            .iter()
            .map(|a| 8 + a.name.len() + 4 * (a.shape.len() + a.data.len()))
            .sum();
        let mut out = Vec::with_capacity(12 + self.header.len() + payload);
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.header);
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<Self, ContainerError> {
        let mut r = Reader { bytes, pos: 0 };
        let found = r.take(4).ok_or(ContainerError::TruncatedHeader)?;
        if found != magic {
            return Err(ContainerError::BadMagic {
                expected: String::from_utf8_lossy(&magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = r.u32().ok_or(ContainerError::TruncatedHeader)?;
        if version != VERSION {
            return Err(ContainerError::Version { found: version });
        }
        let hlen = r.u32().ok_or(ContainerError::TruncatedHeader)? as usize;
        let header = r
            .take(hlen)
            .ok_or(ContainerError::TruncatedHeader)?
            .to_vec();
        let mut c = Container::new(magic, header);
        while !r.at_end() {
            let mut name = String::from("<unnamed>");
            let arr = (|| {
                let nlen = r.u32()? as usize;
                name = String::from_utf8(r.take(nlen)?.to_vec()).ok()?;
                let ndim = r.u32()? as usize;
                let mut shape = Vec::with_capacity(ndim.min(8));
                for _ in 0..ndim {
                    shape.push(r.u32()? as usize);
                }
                let n = shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))?;
                let raw = r.take(n.checked_mul(4)?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                Some(NamedArray {
                    name: name.clone(),
                    shape,
                    data,
                })
            })();
            match arr {
                Some(a) => c.arrays.push(a),
                None => return Err(ContainerError::CorruptLength(name)),
            }
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<Vec<u8>, ContainerError> {
        let bytes = self.encode();
        write_atomic(path, &bytes)?;
        Ok(bytes)
    }

    pub fn read(path: &Path, magic: [u8; 4]) -> Result<Self, ContainerError> {
        let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
        Self::decode(&bytes, magic)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

pub(crate) fn io_err(path: &Path, source: io::Error) -> ContainerError {
    ContainerError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ContainerError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, ContainerError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new(*b"TEST", br#"{"a":1}"#.to_vec());
        c.push(
            "w",
            vec![2, 3],
            vec![0.0, 1.5, -2.0, 3.25, f32::MIN_POSITIVE, 7.0],
        );
        c.push("b", vec![], vec![42.0]);
        c
    }

    #[test]
    fn magic_and_version_checked() {
        let bytes = sample().encode();
        assert!(matches!(
            Container::decode(&bytes, *b"NOPE"),
            Err(ContainerError::BadMagic { .. })
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            Container::decode(&v2, *b"TEST"),
            Err(ContainerError::Version { found: 2 })
        ));
    }

    #[test]
    fn truncation_names_the_array() {
        let bytes = sample().encode();
        let cut = &bytes[..bytes.len() - 2];
        match Container::decode(cut, *b"TEST") {
            Err(ContainerError::CorruptLength(name)) => assert_eq!(name, "b"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            Container::decode(&bytes[..6], *b"TEST"),
            Err(ContainerError::TruncatedHeader)
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(arrays in proptest::collection::vec(
            ("[a-z.]{1,12}", proptest::collection::vec(any::<f32>(), 0..40)), 0..5)) {
            let mut c = Container::new(*b"PROP", b"{}".to_vec());
            for (name, data) in arrays {
                c.push(name, vec![data.len()], data);
            }
            let bytes = c.encode();
            let back = Container::decode(&bytes, *b"PROP").unwrap();
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
