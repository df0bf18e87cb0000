//! Single-file archive of named arrays.
//!
//! Layout: an 8-byte magic tag, a little-endian u64 with the manifest
//! length, a plain-text manifest (one line per entry: name, element type,
//! dims, payload offset, payload length), then the raw little-endian
//! payloads. The format is deliberately trivial so non-Rust tooling can
//! read it with a few lines of code.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"S3AR0001";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
    I64(ArrayD<i64>),
    Bytes(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::I64(_) => "i64",
            ArrayData::Bytes(_) => "u8",
        }
    }

    fn dims(&self) -> Vec<usize> {
        match self {
            ArrayData::F32(a) => a.shape().to_vec(),
            ArrayData::F64(a) => a.shape().to_vec(),
            ArrayData::I64(a) => a.shape().to_vec(),
            ArrayData::Bytes(b) => vec![b.len()],
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            ArrayData::F32(a) => a.len() * 4,
            ArrayData::F64(a) => a.len() * 8,
            ArrayData::I64(a) => a.len() * 8,
            ArrayData::Bytes(b) => b.len(),
        }
    }

    fn write_payload(&self, w: &mut impl Write) -> std::io::Result<()> {
        match self {
            ArrayData::F32(a) => {
                let mut buf = Vec::with_capacity(a.len() * 4);
                for v in a.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)
            }
            ArrayData::F64(a) => {
                let mut buf = Vec::with_capacity(a.len() * 8);
                for v in a.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)
            }
            ArrayData::I64(a) => {
                let mut buf = Vec::with_capacity(a.len() * 8);
                for v in a.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                w.write_all(&buf)
            }
            ArrayData::Bytes(b) => w.write_all(b),
        }
    }

    fn from_payload(dtype: &str, dims: &[usize], bytes: &[u8], name: &str) -> Result<Self> {
        let n: usize = dims.iter().product();
        let need = match dtype {
            "f32" => n * 4,
            "f64" | "i64" => n * 8,
            "u8" => n,
            other => {
                return Err(Error::Format(format!(
                    "entry '{name}': unknown element type '{other}'"
                )))
            }
        };
        if bytes.len() != need {
            return Err(Error::Format(format!(
                "entry '{name}': payload is {} bytes, expected {need}",
                bytes.len()
            )));
        }
        Ok(match dtype {
            "f32" => {
                let vals: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                ArrayData::F32(ArrayD::from_shape_vec(IxDyn(dims), vals).unwrap())
            }
            "f64" => {
                let vals: Vec<f64> = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                ArrayData::F64(ArrayD::from_shape_vec(IxDyn(dims), vals).unwrap())
            }
            "i64" => {
                let vals: Vec<i64> = bytes
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                ArrayData::I64(ArrayD::from_shape_vec(IxDyn(dims), vals).unwrap())
            }
            "u8" => ArrayData::Bytes(bytes.to_vec()),
            _ => unreachable!(),
        })
    }
}

/// An in-memory archive: ordered named entries.
#[derive(Debug, Default)]
pub struct Archive {
    entries: Vec<(String, ArrayData)>,
    index: HashMap<String, usize>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, data: ArrayData) {
        let name = name.into();
        assert!(
            !name.contains(char::is_whitespace),
            "entry names must not contain whitespace: {name:?}"
        );
        assert!(!self.index.contains_key(&name), "duplicate entry {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, data));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayData> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    fn require(&self, name: &str) -> Result<&ArrayData> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing entry '{name}'")))
    }

    pub fn f32s(&self, name: &str) -> Result<&ArrayD<f32>> {
        match self.require(name)? {
            ArrayData::F32(a) => Ok(a),
            other => Err(Error::Format(format!(
                "entry '{name}' has type {}, expected f32",
                other.dtype()
            ))),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.require(name)? {
            ArrayData::F64(a) => Ok(a),
            other => Err(Error::Format(format!(
                "entry '{name}' has type {}, expected f64",
                other.dtype()
            ))),
        }
    }

    pub fn i64s(&self, name: &str) -> Result<&ArrayD<i64>> {
        match self.require(name)? {
            ArrayData::I64(a) => Ok(a),
            other => Err(Error::Format(format!(
                "entry '{name}' has type {}, expected i64",
                other.dtype()
            ))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.require(name)? {
            ArrayData::Bytes(b) => Ok(b),
            other => Err(Error::Format(format!(
                "entry '{name}' has type {}, expected u8",
                other.dtype()
            ))),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);

        let mut manifest = String::new();
        let mut offset = 0usize;
        for (name, data) in &self.entries {
            let dims = data.dims();
            let dims_s = if dims.is_empty() {
                "-".to_string()
            } else {
                dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            };
            let len = data.byte_len();
            manifest.push_str(&format!("{name} {} {dims_s} {offset} {len}\n", data.dtype()));
            offset += len;
        }

        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(manifest.as_bytes()).map_err(io)?;
        for (_, data) in &self.entries {
            data.write_payload(&mut w).map_err(io)?;
        }
        w.flush().map_err(io)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for archive header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic; not an archive file".into()));
        }
        let mut len_buf = [0u8; 8];
        r.read_exact(&mut len_buf)
            .map_err(|_| Error::Format("truncated manifest length".into()))?;
        let mlen = u64::from_le_bytes(len_buf) as usize;
        let mut mbytes = vec![0u8; mlen];
        r.read_exact(&mut mbytes)
            .map_err(|_| Error::Format("truncated manifest".into()))?;
        let manifest = String::from_utf8(mbytes)
            .map_err(|_| Error::Format("manifest is not valid UTF-8".into()))?;

        let payload_start = 8 + 8 + mlen as u64;
        let mut archive = Archive::new();
        for line in manifest.lines() {
            let parts: Vec<&str> = line.split(' ').collect();
            if parts.len() != 5 {
                return Err(Error::Format(format!("malformed manifest line: {line:?}")));
            }
            let name = parts[0];
            let dtype = parts[1];
            let dims: Vec<usize> = if parts[2] == "-" {
                vec![]
            } else {
                parts[2]
                    .split('x')
                    .map(|d| {
                        d.parse().map_err(|_| {
                            Error::Format(format!("entry '{name}': bad dims '{}'", parts[2]))
                        })
                    })
                    .collect::<Result<_>>()?
            };
            let offset: u64 = parts[3]
                .parse()
                .map_err(|_| Error::Format(format!("entry '{name}': bad offset")))?;
            let nbytes: usize = parts[4]
                .parse()
                .map_err(|_| Error::Format(format!("entry '{name}': bad length")))?;

            r.seek(SeekFrom::Start(payload_start + offset))
                .map_err(|e| Error::io(path, e))?;
            let mut buf = vec![0u8; nbytes];
            r.read_exact(&mut buf).map_err(|_| {
                Error::Format(format!("entry '{name}': truncated payload"))
            })?;
            archive.insert(name.to_string(), ArrayData::from_payload(dtype, &dims, &buf, name)?);
        }
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("s3vae-container-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn round_trip_preserves_bits() {
        let mut a = Archive::new();
        a.insert("x", ArrayData::F32(arr2(&[[1.5f32, -0.25], [3.0, f32::MIN_POSITIVE]]).into_dyn()));
        a.insert("labels", ArrayData::I64(ndarray::arr1(&[3i64, -7, 0]).into_dyn()));
        a.insert("meta", ArrayData::Bytes(b"{\"k\":1}".to_vec()));
        let p = tmpfile("roundtrip.bin");
        a.write(&p).unwrap();
        let b = Archive::read(&p).unwrap();
        assert_eq!(a.f32s("x").unwrap(), b.f32s("x").unwrap());
        assert_eq!(a.i64s("labels").unwrap(), b.i64s("labels").unwrap());
        assert_eq!(a.bytes("meta").unwrap(), b.bytes("meta").unwrap());
        assert_eq!(b.names().collect::<Vec<_>>(), vec!["x", "labels", "meta"]);
    }

    #[test]
    fn truncated_file_names_the_entry() {
        let mut a = Archive::new();
        a.insert("first", ArrayData::F32(ndarray::arr1(&[1.0f32; 8]).into_dyn()));
        a.insert("second", ArrayData::F32(ndarray::arr1(&[2.0f32; 8]).into_dyn()));
        let p = tmpfile("trunc.bin");
        a.write(&p).unwrap();
        let full = std::fs::read(&p).unwrap();
        std::fs::write(&p, &full[..full.len() - 12]).unwrap();
        let err = Archive::read(&p).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("second"), "error should name the entry: {msg}");
    }

    #[test]
    fn type_mismatch_is_reported() {
        let mut a = Archive::new();
        a.insert("x", ArrayData::I64(ndarray::arr1(&[1i64]).into_dyn()));
        let p = tmpfile("types.bin");
        a.write(&p).unwrap();
        let b = Archive::read(&p).unwrap();
        assert!(b.f32s("x").is_err());
        assert!(b.f32s("nope").is_err());
    }
}
