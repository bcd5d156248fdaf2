//! Bit-exact checkpoint serialization.
//!
//! Layout: magic `SSPK`, format version (u32 LE), entry count (u32 LE), then
//! per entry: name length (u32 LE), UTF-8 name, rank (u32 LE), one u64 LE per
//! extent, and the payload as f64 LE. A trailing FNV-1a 64-bit checksum over
//! all preceding bytes closes the file. Entries are sorted by name so the
//! bytes are a pure function of the name-to-tensor map.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSPK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected SSPK, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unknown format version {0}")]
    UnknownVersion(u32),
    #[error("truncated checkpoint: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("checksum mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("entry name is not valid UTF-8")]
    BadName,
    #[error("entry `{name}` is malformed: {reason}")]
    BadEntry { name: String, reason: String },
    #[error("missing entry `{0}`")]
    MissingEntry(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Serialize named tensors to canonical bytes.
pub fn store(entries: &BTreeMap<String, Tensor>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, tensor) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: self.pos + n - self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parse canonical bytes back into named tensors, verifying the checksum.
pub fn load(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Truncated {
            offset: bytes.len(),
            needed: 8 - bytes.len(),
        });
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(CheckpointError::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnknownVersion(version));
    }
    let count = r.u32()?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel: usize = shape.iter().product();
        let payload = r.take(numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::BadEntry {
            name: name.clone(),
            reason: e.to_string(),
        })?;
        out.insert(name, tensor);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::BadEntry {
            name: "<trailing>".into(),
            reason: format!("{} unparsed bytes after entries", body.len() - r.pos),
        });
    }
    Ok(out)
}

pub fn store_to_file(
    entries: &BTreeMap<String, Tensor>,
    path: &Path,
) -> Result<(), CheckpointError> {
    std::fs::write(path, store(entries)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_from_file(path: &Path) -> Result<BTreeMap<String, Tensor>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load(&bytes)
}

/// Checksum of the canonical serialization of a named-tensor map; the freeze
/// audit compares these.
pub fn freeze_checksum_of(entries: &BTreeMap<String, Tensor>) -> u64 {
    fnv1a64(&store(entries))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(
            "b.weight".to_string(),
            Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.125, 1e-9]).unwrap(),
        );
        m.insert("a.scalar".to_string(), Tensor::scalar(0.1 + 0.2));
        m
    }

    #[test]
    fn empty_map_is_header_count_checksum() {
        let bytes = store(&BTreeMap::new());
        // magic + version + count + checksum
        assert_eq!(bytes.len(), 4 + 4 + 4 + 8);
        assert!(load(&bytes).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = sample_map();
        let loaded = load(&store(&m)).unwrap();
        assert_eq!(loaded.len(), m.len());
        for (k, v) in &m {
            assert!(loaded[k].bit_eq(v), "entry {k}");
        }
    }

    #[test]
    fn store_is_order_independent() {
        // BTreeMap canonicalizes: building in any insert order gives same bytes
        let mut m1 = BTreeMap::new();
        m1.insert("x".to_string(), Tensor::scalar(1.0));
        m1.insert("a".to_string(), Tensor::scalar(2.0));
        let mut m2 = BTreeMap::new();
        m2.insert("a".to_string(), Tensor::scalar(2.0));
        m2.insert("x".to_string(), Tensor::scalar(1.0));
        assert_eq!(store(&m1), store(&m2));
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = store(&sample_map());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            load(&bytes).unwrap_err(),
            CheckpointError::ChecksumMismatch { .. }
        ));
    }

    #[test]
    fn truncation_reported() {
        let bytes = store(&sample_map());
        // cut inside the payload but keep a valid length >= 8 so the
        // checksum-strip path runs first and fails
        let cut = &bytes[..bytes.len() - 9];
        let err = load(cut).unwrap_err();
        assert!(matches!(
            err,
            CheckpointError::ChecksumMismatch { .. } | CheckpointError::Truncated { .. }
        ));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut bytes = store(&BTreeMap::new());
        // bump version field then re-close the checksum
        bytes[4] = 9;
        let body_len = bytes.len() - 8;
        let sum = fnv1a64(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            load(&bytes).unwrap_err(),
            CheckpointError::UnknownVersion(9)
        ));
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = store(&BTreeMap::new());
        bytes[0] = b'X';
        let body_len = bytes.len() - 8;
        let sum = fnv1a64(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&sum.to_le_bytes());
        assert!(matches!(
            load(&bytes).unwrap_err(),
            CheckpointError::BadMagic(_)
        ));
    }

    #[test]
    fn checksum_is_stable_across_store_load_store() {
        let m = sample_map();
        let c1 = freeze_checksum_of(&m);
        let loaded = load(&store(&m)).unwrap();
        let c2 = freeze_checksum_of(&loaded);
        assert_eq!(c1, c2);
    }

    #[test]
    fn single_parameter_bit_changes_checksum() {
        let m = sample_map();
        let mut m2 = m.clone();
        let mut t = m2["a.scalar"].clone();
        let bits = t.data()[0].to_bits() ^ 1;
        t.data_mut()[0] = f64::from_bits(bits);
        m2.insert("a.scalar".to_string(), t);
        assert_ne!(freeze_checksum_of(&m), freeze_checksum_of(&m2));
    }
}
