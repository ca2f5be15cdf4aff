//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NBKT" | version u32 | config_len u32 | config text (UTF-8)
//! n_tensors u32 | per tensor: name_len u32, name, rank u32, extents u64…, f32 data
//! ```

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::config::KvDoc;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"NBKT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: KvDoc,
    pub tensors: IndexMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let text_len = read_u32(&mut r)? as usize;
        let text = String::from_utf8(take(&mut r, text_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let config = KvDoc::parse(&text)?;
        let n = read_u32(&mut r)?;
        let mut tensors = IndexMap::new();
        for _ in 0..n {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take(&mut r, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut r, numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn take<'b>(r: &mut &'b [u8], n: usize) -> Result<&'b [u8]> {
    if r.len() < n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    let n = buf.len();
    buf.copy_from_slice(take(r, n)?);
    Ok(())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut config = KvDoc::new();
        config.set("model", "d_model", "64");
        let mut tensors = IndexMap::new();
        tensors.insert("a".into(), Tensor::from_vec(&[2, 3], vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, 1e-30, -7.25]));
        tensors.insert("b.c".into(), Tensor::scalar(0.1));
        Checkpoint { config, tensors }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (name, t) in &c.tensors {
            let u = &back.tensors[name];
            assert_eq!(t.shape(), u.shape());
            let bits = |x: &Tensor| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(t), bits(u));
        }
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"NBKT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    }

    #[test]
    fn corrupt_files_rejected() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.nbkt");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}
