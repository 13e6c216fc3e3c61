//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"PARAALCK"
//! version  u32       currently 1
//! count    u32       number of entries
//! entry*   count times:
//!   name_len u32, name (UTF-8, name_len bytes)
//!   ndim     u32, dims (u64 each, ndim of them)
//!   values   f64 each, product(dims) of them
//! ```
//!
//! Entries appear in parameter-store order. Gradients are not stored.

use std::path::Path;

use super::paramstore::ParamStore;
use super::tensor::numel;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PARAALCK";
pub const VERSION: u32 = 1;

pub fn to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.total_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let values = (0..numel(&shape)).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        store.add(&name, shape, values)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    from_bytes(&std::fs::read(path)?)
}

/// Copies values from `src` into `dst`, matching by name and shape.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameters, checkpoint has {}",
            dst.len(),
            src.len()
        )));
    }
    for id in 0..dst.len() {
        let name = dst.name(id).to_string();
        let sid = src
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let s = src.get(sid);
        let d = dst.get_mut(id);
        if d.shape() != s.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: shape {:?} vs {:?}",
                d.shape(),
                s.shape()
            )));
        }
        d.values.copy_from_slice(&s.values);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trips(vals in prop::collection::vec(-1e6f64..1e6, 1..40), rows in 1usize..4) {
            let mut store = ParamStore::new();
            let cols = vals.len();
            store.add("a", vec![cols], vals.clone()).unwrap();
            store.add("b.weight", vec![rows, cols], vals.iter().cycle().take(rows * cols).copied().collect()).unwrap();
            let back = from_bytes(&to_bytes(&store)).unwrap();
            prop_assert_eq!(back, store);
        }
    }

    #[test]
    fn header_layout() {
        let mut store = ParamStore::new();
        store.add("w", vec![1], vec![1.5]).unwrap();
        let b = to_bytes(&store);
        assert_eq!(&b[..8], MAGIC);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[b.len() - 8..], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 8 + 4 + 4 + 4 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let mut store = ParamStore::new();
        store.add("w", vec![2], vec![1.0, 2.0]).unwrap();
        let mut b = to_bytes(&store);
        assert!(from_bytes(&b[..b.len() - 1]).is_err());
        b[0] = b'X';
        assert!(from_bytes(&b).is_err());
    }
}
