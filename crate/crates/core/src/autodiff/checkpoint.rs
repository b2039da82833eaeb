//! Weight checkpoint container.
//!
//! Layout: a plain-text header, one line per entry, terminated by `end`, then
//! the raw little-endian buffers of every entry concatenated in header order.
//!
//! ```text
//! loma-checkpoint 1
//! precision f32
//! config_hash 3f9a0c1d2b4e5f60
//! entries 2
//! param stage1.block0.ln1.weight 8
//! buffer stage3.block0.bn1.running_mean 128
//! end
//! <binary payload>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Real};

const MAGIC: &str = "loma-checkpoint 1";

/// Whether an entry is trained or merely tracked (e.g. running statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EntryKind {
    Param,
    Buffer,
}

impl EntryKind {
    fn tag(self) -> &'static str {
        match self {
            EntryKind::Param => "param",
            EntryKind::Buffer => "buffer",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config_hash: String,
    pub entries: Vec<Entry<T>>,
}

/// Header fields readable without decoding the payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub precision: Precision,
    pub config_hash: String,
    pub entries: Vec<(String, EntryKind, Vec<usize>)>,
    payload_offset: usize,
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!(
            "{MAGIC}\nprecision {}\nconfig_hash {}\nentries {}\n",
            T::PRECISION.name(),
            self.config_hash,
            self.entries.len()
        );
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(usize::to_string).collect();
            head.push_str(&format!("{} {} {}\n", e.kind.tag(), e.name, dims.join(",")));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for e in &self.entries {
            for &v in &e.data {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = Header::parse(bytes)?;
        if header.precision != T::PRECISION {
            return Err(Error::Checkpoint(format!(
                "stored precision {} does not match requested {}",
                header.precision,
                T::PRECISION
            )));
        }
        let width = T::PRECISION.byte_width();
        let mut off = header.payload_offset;
        let mut entries = Vec::with_capacity(header.entries.len());
        for (name, kind, shape) in header.entries {
            let n: usize = shape.iter().product();
            let end = off + n * width;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("payload truncated inside '{name}'")));
            }
            let data = bytes[off..end].chunks_exact(width).map(T::read_le).collect();
            entries.push(Entry { name, kind, shape, data });
            off = end;
        }
        if off != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after payload", bytes.len() - off)));
        }
        Ok(Checkpoint { config_hash: header.config_hash, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == EntryKind::Param).map(|e| e.data.len()).sum()
    }
}

impl Header {
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut lines = Vec::new();
        let mut start = 0;
        let payload_offset = loop {
            let nl = bytes[start..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("header is not terminated"))?;
            let line = std::str::from_utf8(&bytes[start..start + nl]).map_err(|_| bad("header is not UTF-8"))?;
            start += nl + 1;
            if line == "end" {
                break start;
            }
            lines.push(line.to_string());
        };
        let mut it = lines.into_iter();
        if it.next().as_deref() != Some(MAGIC) {
            return Err(bad("missing magic line"));
        }
        let field = |line: Option<String>, key: &str| -> Result<String> {
            line.and_then(|l| l.strip_prefix(&format!("{key} ")).map(str::to_string))
                .ok_or_else(|| Error::Checkpoint(format!("missing '{key}' line")))
        };
        let precision = Precision::parse(&field(it.next(), "precision")?).ok_or_else(|| bad("unknown precision"))?;
        let config_hash = field(it.next(), "config_hash")?;
        let count: usize = field(it.next(), "entries")?.parse().map_err(|_| bad("bad entry count"))?;
        let mut entries = Vec::with_capacity(count);
        for line in it {
            let mut parts = line.split(' ');
            let kind = match parts.next() {
                Some("param") => EntryKind::Param,
                Some("buffer") => EntryKind::Buffer,
                _ => return Err(Error::Checkpoint(format!("bad entry line '{line}'"))),
            };
            let name = parts.next().ok_or_else(|| bad("entry without name"))?.to_string();
            let dims = parts.next().ok_or_else(|| bad("entry without shape"))?;
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Checkpoint(format!("bad shape '{dims}' for '{name}'")))?;
            entries.push((name, kind, shape));
        }
        if entries.len() != count {
            return Err(Error::Checkpoint(format!("header lists {} entries, expected {count}", entries.len())));
        }
        Ok(Header { precision, config_hash, entries, payload_offset })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(proptest::num::f32::ANY, 1..40),
            split in 1usize..39,
        ) {
            let split = split.min(vals.len());
            let mut entries = vec![Entry { name: "a.weight".into(), kind: EntryKind::Param, shape: vec![split], data: vals[..split].to_vec() }];
            if split < vals.len() {
                entries.push(Entry { name: "a.running_var".into(), kind: EntryKind::Buffer, shape: vec![vals.len() - split], data: vals[split..].to_vec() });
            }
            let ck = Checkpoint { config_hash: "00ff".into(), entries };
            let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(back.entries.len(), ck.entries.len());
            for (x, y) in back.entries.iter().zip(&ck.entries) {
                prop_assert_eq!(&x.name, &y.name);
                prop_assert_eq!(x.kind, y.kind);
                let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let ck = Checkpoint { config_hash: "h".into(), entries: vec![Entry { name: "w".into(), kind: EntryKind::Param, shape: vec![2], data: vec![1.0f64, 2.0] }] };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes).is_err());
        let h = Header::parse(&bytes).unwrap();
        assert_eq!(h.precision, Precision::Double);
        assert_eq!(h.entries[0].2, vec![2]);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let ck = Checkpoint { config_hash: "h".into(), entries: vec![Entry { name: "w".into(), kind: EntryKind::Param, shape: vec![3], data: vec![1.0f32, 2.0, 3.0] }] };
        let bytes = ck.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
