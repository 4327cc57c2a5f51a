//! Binary container for named tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic [8] | version u32 | fixed_len u32 | fixed bytes | meta_len u32 | meta JSON
//! | count u32 | record*
//! record = payload_len u32 | payload | crc32(payload) u32
//! payload = name_len u16 | name | ndim u8 | dims u32* | f32*
//! ```
//!
//! The fixed block is owner-defined (adapter banks store regime, rank and seed
//! there); the JSON block carries everything else.

use std::fs;
use std::path::Path;

use datadream_autograd::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 8],
    pub version: u32,
    pub fixed: Vec<u8>,
    pub meta: String,
    pub records: Vec<(String, Tensor)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        put_u32(&mut out, self.version);
        put_u32(&mut out, self.fixed.len() as u32);
        out.extend_from_slice(&self.fixed);
        put_u32(&mut out, self.meta.len() as u32);
        out.extend_from_slice(self.meta.as_bytes());
        put_u32(&mut out, self.records.len() as u32);
        for (name, t) in &self.records {
            let mut p = Vec::with_capacity(8 + name.len() + 4 * t.numel());
            p.extend_from_slice(&(name.len() as u16).to_le_bytes());
            p.extend_from_slice(name.as_bytes());
            p.push(t.shape().len() as u8);
            for &d in t.shape() {
                put_u32(&mut p, d as u32);
            }
            for v in t.data() {
                p.extend_from_slice(&v.to_le_bytes());
            }
            put_u32(&mut out, p.len() as u32);
            let crc = crc32fast::hash(&p);
            out.extend_from_slice(&p);
            put_u32(&mut out, crc);
        }
        out
    }

    /// Decodes a container whose magic and version must match.
    pub fn decode(bytes: &[u8], magic: [u8; 8], version: u32) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let head = r.take(8).map_err(|_| Error::integrity("header", "file shorter than magic"))?;
        if head != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(head),
                String::from_utf8_lossy(&magic)
            )));
        }
        let found = r.u32().map_err(|_| Error::integrity("header", "truncated version"))?;
        if found != version {
            return Err(Error::Format(format!("version {found} unsupported (expected {version})")));
        }
        let hdr = |_| Error::integrity("header", "truncated header");
        let fixed_len = r.u32().map_err(hdr)? as usize;
        let fixed = r.take(fixed_len).map_err(hdr)?.to_vec();
        let meta_len = r.u32().map_err(hdr)? as usize;
        let meta = String::from_utf8(r.take(meta_len).map_err(hdr)?.to_vec())
            .map_err(|_| Error::integrity("header", "metadata is not UTF-8"))?;
        let count = r.u32().map_err(hdr)? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            records.push(read_record(&mut r, i)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::integrity("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            magic,
            version,
            fixed,
            meta,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, magic: [u8; 8], version: u32) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, magic, version)
    }
}

fn read_record(r: &mut Reader<'_>, index: usize) -> Result<(String, Tensor)> {
    let fallback = format!("#{index}");
    let len = r
        .u32()
        .map_err(|_| Error::integrity(&fallback, "truncated before record length"))? as usize;
    let start = r.pos;
    // Peek at the name so truncation errors can name the record.
    let name = peek_name(&r.bytes[start..]).unwrap_or(fallback);
    let payload = r
        .take(len)
        .map_err(|_| Error::integrity(&name, "record truncated"))?;
    let crc = r.u32().map_err(|_| Error::integrity(&name, "checksum truncated"))?;
    if crc32fast::hash(payload) != crc {
        return Err(Error::integrity(&name, "checksum mismatch"));
    }
    let mut p = Reader { bytes: payload, pos: 0 };
    let bad = |_| Error::integrity(&name, "malformed payload");
    let name_len = u16::from_le_bytes(p.take(2).map_err(bad)?.try_into().expect("2 bytes")) as usize;
    p.take(name_len).map_err(bad)?;
    let ndim = p.take(1).map_err(bad)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(p.u32().map_err(bad)? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = p.take(n * 4).map_err(bad)?;
    if p.pos != payload.len() {
        return Err(Error::integrity(&name, "payload size does not match shape"));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::integrity(&name, e.to_string()))?;
    Ok((name, t))
}

fn peek_name(bytes: &[u8]) -> Option<String> {
    let len = u16::from_le_bytes(bytes.get(..2)?.try_into().ok()?) as usize;
    let name = bytes.get(2..2 + len)?;
    String::from_utf8(name.to_vec()).ok()
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

struct Short;

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> std::result::Result<&'b [u8], Short> {
        let end = self.pos.checked_add(n).ok_or(Short)?;
        let s = self.bytes.get(self.pos..end).ok_or(Short)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, Short> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: [u8; 8] = *b"TESTCONT";

    fn sample() -> Container {
        Container {
            magic: MAGIC,
            version: 3,
            fixed: vec![1, 2, 3],
            meta: "{\"k\":1}".into(),
            records: vec![
                ("alpha".into(), Tensor::new([2, 2], vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0]).unwrap()),
                ("beta".into(), Tensor::new([3], vec![7.0, 8.0, 9.0]).unwrap()),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        assert_eq!(Container::decode(&c.encode(), MAGIC, 3).unwrap(), c);
    }

    #[test]
    fn truncation_names_record() {
        let bytes = sample().encode();
        match Container::decode(&bytes[..bytes.len() - 6], MAGIC, 3) {
            Err(Error::Integrity { record, .. }) => assert_eq!(record, "beta"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let mut bytes = sample().encode();
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        assert!(matches!(
            Container::decode(&bytes, MAGIC, 3),
            Err(Error::Integrity { record, .. }) if record == "beta"
        ));
    }

    #[test]
    fn version_mismatch_is_format_error() {
        let bytes = sample().encode();
        assert!(matches!(Container::decode(&bytes, MAGIC, 4), Err(Error::Format(_))));
    }
}
