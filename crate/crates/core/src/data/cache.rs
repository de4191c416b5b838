//! Feature vectors keyed by record, feature kind and variation.
//!
//! On disk each kind is one file: the magic bytes `ISLC`, a `u16` version,
//! the vector dimension (`u32`) and entry count (`u32`), then an index of
//! `(record_id, variation, offset, length)` entries, then the concatenated
//! little-endian `f32` payload. Strings are `u16`-length-prefixed UTF-8;
//! offsets count floats from the start of the payload.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{DataError, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"ISLC";
pub const CACHE_VERSION: u16 = 1;
const FILE_SUFFIX: &str = ".islc";

/// `(record_id, variation)`.
pub type CacheKey = (String, String);

/// Declared dimension of a kind: `style-default` or `cnn-<S>`.
pub fn kind_dim(kind: &str) -> Option<usize> {
    if kind == "style-default" {
        return Some(1920);
    }
    let side: usize = kind.strip_prefix("cnn-")?.parse().ok()?;
    Some(512 * (side / 32) * (side / 32))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureCache {
    tables: BTreeMap<String, BTreeMap<CacheKey, Vec<f32>>>,
}

impl FeatureCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, record_id: &str, kind: &str, variation: &str, vector: Vec<f32>) -> Result<()> {
        let expected = kind_dim(kind).ok_or_else(|| DataError::UnknownKind(kind.to_string()))?;
        if vector.len() != expected {
            return Err(DataError::DimMismatch { kind: kind.to_string(), expected, found: vector.len() });
        }
        self.tables.entry(kind.to_string()).or_default().insert((record_id.to_string(), variation.to_string()), vector);
        Ok(())
    }

    pub fn get(&self, record_id: &str, kind: &str, variation: &str) -> Option<&[f32]> {
        self.tables.get(kind)?.get(&(record_id.to_string(), variation.to_string())).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.tables.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kinds(&self) -> impl Iterator<Item = &str> {
        self.tables.keys().map(String::as_str)
    }

    pub fn file_name(kind: &str) -> String {
        format!("{kind}{FILE_SUFFIX}")
    }

    /// Writes one file per kind into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let mut written = Vec::new();
        for (kind, table) in &self.tables {
            let dim = kind_dim(kind).expect("validated on put");
            let mut buf = Vec::new();
            buf.extend_from_slice(CACHE_MAGIC);
            buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
            buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
            let mut offset = 0u64;
            for ((record, variation), v) in table {
                for s in [record, variation] {
                    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
                    buf.extend_from_slice(s.as_bytes());
                }
                buf.extend_from_slice(&offset.to_le_bytes());
                buf.extend_from_slice(&(v.len() as u32).to_le_bytes());
                offset += v.len() as u64;
            }
            for v in table.values() {
                for x in v {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
            let path = dir.join(Self::file_name(kind));
            std::fs::write(&path, buf)?;
            written.push(path);
        }
        Ok(written)
    }

    /// Reads every cache file in `dir`; a missing directory is an empty cache.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut cache = Self::new();
        if !dir.is_dir() {
            return Ok(cache);
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(FILE_SUFFIX))
            .collect();
        files.sort();
        for path in files {
            let kind = path.file_name().unwrap().to_string_lossy().trim_end_matches(FILE_SUFFIX).to_string();
            let bytes = std::fs::read(&path)?;
            let table = parse(&bytes).map_err(|message| DataError::CacheFormat { path: path.clone(), message })?;
            for ((record, variation), v) in table {
                cache.put(&record, &kind, &variation, v)?;
            }
        }
        Ok(cache)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or("truncated file")?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<Vec<(CacheKey, Vec<f32>)>, String> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CACHE_MAGIC {
        return Err("bad magic".into());
    }
    let version = c.u16()?;
    if version != CACHE_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let _dim = c.u32()?;
    let count = c.u32()? as usize;
    let mut index = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let record = c.string()?;
        let variation = c.string()?;
        let offset = c.u64()? as usize;
        let len = c.u32()? as usize;
        index.push(((record, variation), offset, len));
    }
    let payload = &bytes[c.pos..];
    index
        .into_iter()
        .map(|(key, offset, len)| {
            let start = offset.checked_mul(4).ok_or("bad offset")?;
            let end = start.checked_add(len * 4).filter(|&e| e <= payload.len()).ok_or("truncated payload")?;
            let v = payload[start..end].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            Ok((key, v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_get_and_dims() {
        let mut c = FeatureCache::new();
        let v: Vec<f32> = (0..1920).map(|i| i as f32 * 0.5).collect();
        c.put("r1", "style-default", "none", v.clone()).unwrap();
        assert_eq!(c.get("r1", "style-default", "none"), Some(v.as_slice()));
        assert_eq!(c.get("r2", "style-default", "none"), None);
        assert_eq!(c.get("r1", "style-default", "rotation:90"), None);
        assert!(matches!(c.put("r1", "style-default", "none", vec![0.0; 1921]), Err(DataError::DimMismatch { expected: 1920, .. })));
        assert!(c.put("r1", "cnn-224", "none", vec![0.0; 25_088]).is_ok());
        assert!(matches!(c.put("r1", "gram", "none", vec![]), Err(DataError::UnknownKind(_))));
    }

    #[test]
    fn file_roundtrip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = FeatureCache::new();
        c.put("a", "style-default", "none", vec![1.5; 1920]).unwrap();
        c.put("b", "style-default", "rotation:30", vec![-2.0; 1920]).unwrap();
        c.put("a", "cnn-64", "none", vec![0.25; 2048]).unwrap();
        let files = c.save(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(FeatureCache::load(dir.path()).unwrap(), c);

        let bytes = std::fs::read(&files[1]).unwrap();
        assert_eq!(&bytes[..4], b"ISLC");
        std::fs::write(&files[1], &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(FeatureCache::load(dir.path()), Err(DataError::CacheFormat { .. })));
    }
}
