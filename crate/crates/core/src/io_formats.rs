//! The `GMTC` tensor container and the small file helpers shared by the
//! dataset and checkpoint layouts.
//!
//! Byte layout (all integers little-endian, no padding):
//!
//! ```text
//! "GMTC"            4 bytes magic
//! version           u8 (currently 1)
//! entry count       u32
//! per entry:
//!   name length     u16, then that many UTF-8 bytes
//!   dtype           u8 (1 = f64, 2 = f32, 3 = u8)
//!   ndim            u8
//!   dims            ndim x u32
//!   payload         product(dims) x dtype size, row-major
//! crc32             u32 over every preceding byte
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GMTC";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F64 = 1,
    F32 = 2,
    U8 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F64),
            2 => Some(DType::F32),
            3 => Some(DType::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F64(_) => DType::F64,
            TensorData::F32(_) => DType::F32,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Widens any payload to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: TensorData) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn f64(name: impl Into<String>, dims: &[usize], values: Vec<f64>) -> Self {
        Self::new(name, dims.iter().map(|&d| d as u32).collect(), TensorData::F64(values))
    }

    pub fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    fn validate(&self) -> Result<()> {
        if self.name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("name of {} bytes is too long", self.name.len())));
        }
        if self.dims.len() > u8::MAX as usize {
            return Err(Error::Format(format!("{} dims exceed the u8 limit", self.dims.len())));
        }
        if self.element_count() != self.data.len() {
            return Err(Error::Format(format!(
                "entry {:?}: dims {:?} hold {} elements but payload has {}",
                self.name,
                self.dims,
                self.element_count(),
                self.data.len()
            )));
        }
        Ok(())
    }
}

pub fn write_container(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut seen = HashSet::new();
    for e in entries {
        e.validate()?;
        if !seen.insert(e.name.as_str()) {
            return Err(Error::DuplicateName(e.name.clone()));
        }
    }
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Format("too many entries".into()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.data.dtype() as u8);
        out.push(e.dims.len() as u8);
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.data {
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(Error::Truncation {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_container(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    if bytes.len() < 4 + 1 + 4 + 4 {
        return Err(Error::Truncation {
            offset: 4,
            needed: 9,
            available: bytes.len() - 4,
        });
    }
    // Checksum first so that no corrupted byte can slip through as data.
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Format(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }

    let mut cur = Cursor { bytes: body, pos: 4 };
    let version = cur.u8()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    let mut seen = HashSet::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Format(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let code = cur.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Format(format!("unknown dtype code {code}")))?;
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        let raw = cur.take(n)?;
        let data = match dtype {
            DType::F64 => TensorData::F64(
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F32 => TensorData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(raw.to_vec()),
        };
        entries.push(Entry { name, dims, data });
    }
    if cur.pos != body.len() {
        return Err(Error::Format(format!(
            "{} unexpected trailing bytes",
            body.len() - cur.pos
        )));
    }
    Ok(entries)
}

/// Looks up an entry by name.
pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name:?}")))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// failed write never leaves a partial file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_container(path: &Path, entries: &[Entry]) -> Result<()> {
    write_atomic(path, &write_container(entries)?)
}

pub fn load_container(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_container(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_container_is_header_plus_checksum() {
        let bytes = write_container(&[]).unwrap();
        assert_eq!(bytes.len(), 4 + 1 + 4 + 4);
        assert_eq!(&bytes[..4], b"GMTC");
        assert!(read_container(&bytes).unwrap().is_empty());
    }

    #[test]
    fn f64_tensor_round_trips_bit_exactly() {
        let e = Entry::f64("t", &[2, 3], (0..6).map(|i| i as f64).collect());
        let bytes = write_container(std::slice::from_ref(&e)).unwrap();
        let back = read_container(&bytes).unwrap();
        assert_eq!(back, vec![e]);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let e = Entry::new("ab", vec![2], TensorData::U8(vec![7, 9]));
        let bytes = write_container(&[e]).unwrap();
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &[1, 0, 0, 0]);
        assert_eq!(&bytes[9..11], &[2, 0]);
        assert_eq!(&bytes[11..13], b"ab");
        assert_eq!(bytes[13], 3);
        assert_eq!(bytes[14], 1);
        assert_eq!(&bytes[15..19], &[2, 0, 0, 0]);
        assert_eq!(&bytes[19..21], &[7, 9]);
    }

    #[test]
    fn duplicate_names_are_rejected_on_write() {
        let e = Entry::f64("x", &[1], vec![1.0]);
        assert!(matches!(
            write_container(&[e.clone(), e]),
            Err(Error::DuplicateName(_))
        ));
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut bytes = write_container(&[Entry::f64("x", &[1], vec![1.0])]).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_container(&bad), Err(Error::Format(_))));
        bytes.truncate(bytes.len() - 3);
        assert!(read_container(&bytes).is_err());
    }

    #[test]
    fn unknown_dtype_is_rejected_even_with_valid_checksum() {
        let mut bytes = write_container(&[Entry::new("a", vec![1], TensorData::U8(vec![1]))]).unwrap();
        bytes.truncate(bytes.len() - 4);
        bytes[12] = 9; // dtype code
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        match read_container(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("dtype")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_are_rejected_even_with_valid_checksum() {
        let mut bytes = write_container(&[]).unwrap();
        bytes.truncate(bytes.len() - 4);
        bytes.push(0);
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(read_container(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.gmtc");
        save_container(&path, &[Entry::f64("x", &[1], vec![2.5])]).unwrap();
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
        assert_eq!(load_container(&path).unwrap()[0].data, TensorData::F64(vec![2.5]));
    }
}
