//! Binary container of named arrays, shared by checkpoints and prepared
//! datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       9 bytes   "FEEDRANK1"
//! header_len  u32
//! header      header_len bytes of UTF-8 (a JSON record)
//! count       u32
//! count × entry:
//!   name_len  u32
//!   name      name_len bytes of UTF-8
//!   rank      u32
//!   extents   rank × u64
//!   words     product(extents) × 4 bytes
//! ```
//!
//! Words are raw 32-bit values: IEEE-754 floats for parameters, unsigned
//! integers for index arrays. Readers know which from the entry name.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"FEEDRANK1";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub words: Vec<u32>,
}

impl Entry {
    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, data: &[f32]) -> Self {
        Entry {
            name: name.into(),
            shape,
            words: data.iter().map(|v| v.to_bits()).collect(),
        }
    }

    pub fn from_u32(name: impl Into<String>, data: Vec<u32>) -> Self {
        Entry {
            name: name.into(),
            shape: vec![data.len()],
            words: data,
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.words.iter().map(|&w| f32::from_bits(w)).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub header: String,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(header: String) -> Self {
        Container {
            header,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.header.len() as u32);
        out.extend_from_slice(self.header.as_bytes());
        put_u32(&mut out, self.entries.len() as u32);
        for e in &self.entries {
            put_u32(&mut out, e.name.len() as u32);
            out.extend_from_slice(e.name.as_bytes());
            put_u32(&mut out, e.shape.len() as u32);
            for &x in &e.shape {
                out.extend_from_slice(&(x as u64).to_le_bytes());
            }
            for &w in &e.words {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    /// Parses a container; `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::format(origin, "bad magic (not a FEEDRANK1 container)"));
        }
        let header_len = r.u32()? as usize;
        let header = r.string(header_len)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(Error::format(origin, format!("entry {name:?} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut total: usize = 1;
            for _ in 0..rank {
                let x = r.u64()?;
                let x = usize::try_from(x).map_err(|_| Error::format(origin, "extent overflow"))?;
                total = total
                    .checked_mul(x)
                    .ok_or_else(|| Error::format(origin, "extent overflow"))?;
                shape.push(x);
            }
            let raw = r.take(total.checked_mul(4).ok_or_else(|| Error::format(origin, "extent overflow"))?)?;
            let words = raw
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            entries.push(Entry { name, shape, words });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(
                origin,
                format!("{} trailing bytes after last entry", bytes.len() - r.pos),
            ));
        }
        Ok(Container { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Container::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.origin, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::format(self.origin, "invalid UTF-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn origin() -> &'static Path {
        Path::new("<memory>")
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Container::new("{}".into());
        c.push(Entry::from_f32("w", vec![2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1], origin()).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Container::from_bytes(&extra, origin()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad, origin()).is_err());
        assert_eq!(Container::from_bytes(&bytes, origin()).unwrap(), c);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            header in "[a-z{}\":,0-9 ]{0,40}",
            data in proptest::collection::vec(any::<u32>(), 0..64),
            rows in 1usize..4,
        ) {
            let cols = data.len() / rows;
            let words = data[..rows * cols].to_vec();
            let mut c = Container::new(header);
            c.push(Entry { name: "a.b".into(), shape: vec![rows, cols], words });
            c.push(Entry::from_u32("ids", data.clone()));
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes, origin()).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
