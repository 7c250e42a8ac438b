//! Binary container for parameters, optimizer state, and run metadata.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PCRLCKPT"  u32 version
//! u64 n, n bytes of UTF-8 JSON metadata
//! u64 tensor count, then per tensor:
//!   u32 n, n bytes of UTF-8 name, u64 rows, u64 cols, rows*cols f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"PCRLCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

/// Exact position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

fn bad(reason: impl Into<String>) -> Error {
    Error::format("checkpoint", reason)
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self { metadata, tensors: Vec::new() }
    }

    /// Appends every tensor of `store` under `prefix`.
    pub fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for id in store.ids() {
            self.tensors.push((format!("{prefix}{}", store.name(id)), store.get(id).clone()));
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Overwrites every tensor of `store` from entries named `prefix + name`,
    /// checking shapes.
    pub fn fill_store(&self, prefix: &str, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}{}", store.name(id));
            let m = self.tensor(&name).ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {name}")))?;
            if m.shape() != store.get(id).shape() {
                return Err(Error::Shape(format!(
                    "tensor {name}: checkpoint has {:?}, network expects {:?}",
                    m.shape(),
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = m.clone();
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let meta = self.metadata.to_string();
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, m) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(m.rows() as u64).to_le_bytes())?;
            w.write_all(&(m.cols() as u64).to_le_bytes())?;
            let mut buf = Vec::with_capacity(m.len() * 8);
            for x in m.as_slice() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(cur.array()?);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let meta_len = cur.len_u64()?;
        let meta = std::str::from_utf8(cur.take(meta_len)?).map_err(|e| bad(e.to_string()))?;
        let metadata = serde_json::from_str(meta).map_err(|e| bad(e.to_string()))?;
        let count = cur.len_u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let n = u32::from_le_bytes(cur.array()?) as usize;
            let name = std::str::from_utf8(cur.take(n)?).map_err(|e| bad(e.to_string()))?.to_string();
            let rows = cur.len_u64()?;
            let cols = cur.len_u64()?;
            let len = rows.checked_mul(cols).and_then(|l| l.checked_mul(8)).ok_or_else(|| bad("tensor too large"))?;
            let data = cur
                .take(len)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        if cur.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| bad("truncated"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.array()?)).map_err(|_| bad("length overflow"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn round_trip_is_exact() {
        let mut c = Checkpoint::new(serde_json::json!({"config": "Cs32h1", "step": 7}));
        c.tensors.push(("a".into(), Matrix::from_rows(&[&[1.5, -0.0, f64::MIN_POSITIVE]])));
        c.tensors.push(("b.w".into(), Matrix::zeros(0, 3)));
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        assert_eq!(Checkpoint::read_from(buf.as_slice()).unwrap(), c);
        assert!(Checkpoint::read_from(&buf[..buf.len() - 1]).is_err());
        assert!(Checkpoint::read_from(&b"PCRLCKPX"[..]).is_err());
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..13 {
            rng.random::<u32>();
        }
        let state = RngState::capture(&rng);
        let mut resumed = state.restore();
        let a: Vec<u64> = (0..5).map(|_| rng.random()).collect();
        let b: Vec<u64> = (0..5).map(|_| resumed.random()).collect();
        assert_eq!(a, b);
    }
}
