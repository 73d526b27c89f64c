//! Binary containers: teacher feature files and named-tensor archives.
//!
//! Both are little-endian. Values are kept as `f64` in memory and written at
//! the recorded precision, so `f32` data round-trips bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::numcore::{DType, Float, Tensor};

const FEATURE_MAGIC: &[u8; 4] = b"CDMF";
const ARCHIVE_MAGIC: &[u8; 4] = b"CDMC";
const VERSION: u32 = 1;

fn dtype_flag(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 0,
    }
}

fn flag_dtype(f: u8) -> Result<DType> {
    match f {
        1 => Ok(DType::F32),
        0 => Ok(DType::F64),
        _ => Err(Error::Format(format!("unknown precision flag {f}"))),
    }
}

fn put_values(out: &mut Vec<u8>, data: &[f64], dtype: DType) {
    for &v in data {
        match dtype {
            DType::F32 => (v as f32).write_le(out),
            DType::F64 => v.write_le(out),
        }
    }
}

/// Sequential reader over a byte slice with format errors on truncation.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn values(&mut self, n: usize, dtype: DType) -> Result<Vec<f64>> {
        let w = match dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let raw = self.take(n * w)?;
        Ok(raw
            .chunks_exact(w)
            .map(|c| match dtype {
                DType::F32 => f32::read_le(c) as f64,
                DType::F64 => f64::read_le(c),
            })
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("string is not valid UTF-8".into()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Per-sample `[M × D_t]` teacher features.
///
/// Layout: `"CDMF"`, version `u32`, sample count `u64`, `M` `u32`, `D_t` `u32`,
/// precision flag `u8` (1 = f32), then one row-major block per sample. The
/// sidecar `<file>.idx` maps each sample id to its block's byte offset.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub tokens: usize,
    pub width: usize,
    pub dtype: DType,
    ids: Vec<String>,
    blocks: Vec<Tensor<f64>>,
}

const FEATURE_HEADER: usize = 4 + 4 + 8 + 4 + 4 + 1;

/// Sidecar index path for a feature file.
pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

impl FeatureFile {
    pub fn new(tokens: usize, width: usize, dtype: DType) -> Self {
        FeatureFile {
            tokens,
            width,
            dtype,
            ids: Vec::new(),
            blocks: Vec::new(),
        }
    }

    pub fn push<T: Float>(&mut self, id: &str, features: &Tensor<T>) -> Result<()> {
        if features.shape() != [self.tokens, self.width] {
            return Err(Error::shape(
                "feature file",
                format!(
                    "sample {id}: {:?}, expected [{}, {}]",
                    features.shape(),
                    self.tokens,
                    self.width
                ),
            ));
        }
        if id.contains(['\t', '\n']) || self.ids.iter().any(|x| x == id) {
            return Err(Error::Format(format!("invalid or duplicate sample id {id:?}")));
        }
        self.ids.push(id.to_string());
        self.blocks.push(features.cast());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Tensor<f64>> {
        self.ids.iter().position(|x| x == id).map(|i| &self.blocks[i])
    }

    pub fn into_samples(self) -> HashMap<String, Tensor<f64>> {
        self.ids.into_iter().zip(self.blocks).collect()
    }

    fn block_bytes(&self) -> usize {
        self.tokens
            * self.width
            * match self.dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(FEATURE_HEADER + self.len() * self.block_bytes());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.tokens as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.push(dtype_flag(self.dtype));
        let mut index = String::new();
        for (id, b) in self.ids.iter().zip(&self.blocks) {
            index.push_str(&format!("{id}\t{}\n", out.len()));
            put_values(&mut out, b.data(), self.dtype);
        }
        fs::write(path, out)?;
        fs::write(index_path(path), index)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let index = fs::read_to_string(index_path(path))?;
        let mut c = Cursor::new(&bytes);
        if c.take(4)? != FEATURE_MAGIC {
            return Err(Error::Format(format!("{}: not a feature file", path.display())));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported feature file version {version}")));
        }
        let count = c.u64()? as usize;
        let tokens = c.u32()? as usize;
        let width = c.u32()? as usize;
        let dtype = flag_dtype(c.u8()?)?;
        let mut file = FeatureFile::new(tokens, width, dtype);
        let bb = file.block_bytes();
        if bytes.len() != FEATURE_HEADER + count * bb {
            return Err(Error::Format(format!(
                "{}: {} bytes, header promises {count} blocks of {bb}",
                path.display(),
                bytes.len()
            )));
        }
        for (n, line) in index.lines().filter(|l| !l.is_empty()).enumerate() {
            let (id, off) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("index line {}: {line:?}", n + 1)))?;
            let off: usize = off
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("index line {}: bad offset", n + 1)))?;
            if off < FEATURE_HEADER || (off - FEATURE_HEADER) % bb != 0 || off + bb > bytes.len() {
                return Err(Error::Format(format!("index line {}: offset {off} out of range", n + 1)));
            }
            let mut bc = Cursor::new(&bytes[off..off + bb]);
            let data = bc.values(tokens * width, dtype)?;
            file.push(id, &Tensor::new(&[tokens, width], data)?)?;
        }
        if file.len() != count {
            return Err(Error::Format(format!(
                "index lists {} samples, header {count}",
                file.len()
            )));
        }
        Ok(file)
    }
}

/// A named tensor inside an [`Archive`].
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor<f64>,
}

/// Text metadata plus an ordered list of named tensors.
///
/// Layout: `"CDMC"`, version `u32`, metadata (`u32` length + UTF-8
/// `key=value` lines), entry count `u32`, then per entry: name, precision
/// flag, rank `u32`, extents `u64`, values.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<ArchiveEntry>,
}

impl Archive {
    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some((_, v)) => *v = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Format(format!("archive is missing metadata key {key}")))
    }

    pub fn push<T: Float>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push(ArchiveEntry {
            name: name.into(),
            dtype: T::DTYPE,
            tensor: t.cast(),
        });
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor<T: Float>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(|e| e.tensor.cast())
            .ok_or_else(|| Error::Format(format!("archive has no tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut text = String::new();
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format(format!("metadata {k:?} cannot be stored")));
            }
            text.push_str(&format!("{k}={v}\n"));
        }
        put_string(&mut out, &text);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_string(&mut out, &e.name);
            out.push(dtype_flag(e.dtype));
            let shape = e.tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut out, e.tensor.data(), e.dtype);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        if c.take(4)? != ARCHIVE_MAGIC {
            return Err(Error::Format("not a checkpoint archive".into()));
        }
        let version = c.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let mut a = Archive::default();
        for line in c.string()?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("metadata line {line:?}")))?;
            a.meta.push((k.to_string(), v.to_string()));
        }
        let n = c.u32()?;
        for _ in 0..n {
            let name = c.string()?;
            let dtype = flag_dtype(c.u8()?)?;
            let rank = c.u32()? as usize;
            let shape = (0..rank)
                .map(|_| c.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product();
            let data = c.values(numel, dtype)?;
            let tensor = if rank == 0 {
                Tensor::scalar(data[0])
            } else {
                Tensor::new(&shape, data)?
            };
            a.entries.push(ArchiveEntry {
                name,
                dtype,
                tensor,
            });
        }
        if !c.done() {
            return Err(Error::Format("trailing bytes after archive".into()));
        }
        Ok(a)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        drop(f);
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.cdmf");
        let mut f = FeatureFile::new(4, 3, DType::F32);
        let a = Tensor::<f32>::from_fn(&[4, 3], |i| i as f32 * 0.1 - 0.37);
        let b = Tensor::<f32>::from_fn(&[4, 3], |i| (i as f32).sin());
        f.push("a", &a).unwrap();
        f.push("b", &b).unwrap();
        assert!(f.push("a", &a).is_err());
        f.write(&path).unwrap();
        let back = FeatureFile::read(&path).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.get("b").unwrap().cast::<f32>(), b);
    }

    #[test]
    fn truncated_feature_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cdmf");
        let mut f = FeatureFile::new(2, 2, DType::F64);
        f.push("x", &Tensor::<f64>::ones(&[2, 2])).unwrap();
        f.write(&path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, bytes).unwrap();
        assert!(matches!(FeatureFile::read(&path), Err(Error::Format(_))));
    }

    #[test]
    fn archive_round_trip_is_bit_exact() {
        let mut a = Archive::default();
        a.set_meta("step", 12);
        a.set_meta("note", "x y");
        a.push("w", &Tensor::<f32>::from_fn(&[2, 3], |i| 1.0 / (i as f32 + 3.0)));
        a.push("s", &Tensor::<f64>::scalar(std::f64::consts::PI));
        let back = Archive::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.meta("step"), Some("12"));
        let w: Tensor<f32> = back.tensor("w").unwrap();
        assert_eq!(w.data()[1].to_bits(), (1.0f32 / 4.0).to_bits());
    }
}
