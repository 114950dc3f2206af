//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "GLTCKPT\0"
//! version  u32      currently 1
//! seed     u64      seed of the run that produced the parameters
//! config   u32 length + UTF-8 JSON of the model/training configuration
//! count    u32      number of entries
//! entry*   u32 name length, name bytes, u32 rows, u32 cols,
//!          rows*cols f64 values in row-major order
//! ```

use std::fs;
use std::path::Path;

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GLTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub config_json: String,
    pub entries: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, seed: u64, config_json: impl Into<String>) -> Self {
        Self {
            seed,
            config_json: config_json.into(),
            entries: store
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config_json);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, m) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
            for v in m.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Version("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        let seed = r.u64()?;
        let config_json = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
            entries.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Version("trailing bytes after checkpoint".into()));
        }
        Ok(Self {
            seed,
            config_json,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored values into `store`. Names and shapes must match
    /// exactly.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(Error::Version(format!(
                "checkpoint has {} parameters, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (name, m) in &self.entries {
            let p = store
                .by_name_mut(name)
                .map_err(|_| Error::Version(format!("model has no parameter {name}")))?;
            if p.value.shape() != m.shape() {
                return Err(Error::Version(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    m.shape(),
                    p.value.shape()
                )));
            }
            p.value = m.clone();
        }
        Ok(())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Version("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Version("non UTF-8 string in checkpoint".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(vals in proptest::collection::vec(-1e9f64..1e9, 1..40), seed: u64) {
            let mut store = ParamStore::new();
            store.insert("a.weight", Matrix::from_vec(1, vals.len(), vals.clone()).unwrap()).unwrap();
            store.insert("b", Matrix::column(&vals)).unwrap();
            let ck = Checkpoint::from_store(&store, seed, "{\"x\":1}");
            let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
            prop_assert_eq!(&back, &ck);
            let mut other = store.clone();
            other.zero_values("");
            back.apply_to(&mut other).unwrap();
            prop_assert_eq!(other, store);
        }
    }

    #[test]
    fn rejects_mismatch_and_garbage() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::zeros(2, 2)).unwrap();
        let ck = Checkpoint::from_store(&store, 1, "{}");
        let mut other = ParamStore::new();
        other.insert("w", Matrix::zeros(2, 3)).unwrap();
        assert!(matches!(ck.apply_to(&mut other), Err(Error::Version(_))));
        assert!(matches!(Checkpoint::from_bytes(b"nonsense"), Err(Error::Version(_))));
        let mut bytes = ck.to_bytes();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Version(_))));
    }
}
