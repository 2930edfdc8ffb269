//! Binary parameter snapshots.
//!
//! Layout (all integers little-endian): magic `VBSG`, `u32` format version,
//! `u32` config length + UTF-8 config echo, `u32` parameter count, then per
//! parameter `u32` name length, name bytes, `u32` rank, `u64` extents and
//! row-major `f64` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParameterSet, Tensor};

pub const MAGIC: &[u8; 4] = b"VBSG";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParameterSet,
}

pub fn encode(config: &str, params: &ParameterSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::data(format!(
                "checkpoint {} truncated at byte {}",
                self.path.display(),
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::data(format!("checkpoint {} holds invalid UTF-8", self.path.display())))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::data(format!("{} is not a checkpoint", path.display())));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            expected: FORMAT_VERSION.to_string(),
            found: version.to_string(),
        });
    }
    let config = r.string()?;
    let count = r.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::data("checkpoint extents overflow"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::data(format!("trailing bytes in checkpoint {}", path.display())));
    }
    Ok(Checkpoint { config, params })
}

pub fn save(path: &Path, config: &str, params: &ParameterSet) -> Result<()> {
    fs::write(path, encode(config, params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Fails unless `loaded` has exactly the names and shapes of `expected`.
pub fn check_compatible(loaded: &ParameterSet, expected: &ParameterSet) -> Result<()> {
    for (name, t) in expected.iter() {
        match loaded.get(name) {
            Ok(l) if l.shape() == t.shape() => {}
            Ok(l) => {
                return Err(Error::config(format!(
                    "checkpoint parameter {name} has shape {:?}, model expects {:?}",
                    l.shape(),
                    t.shape()
                )))
            }
            Err(_) => return Err(Error::config(format!("checkpoint lacks parameter {name}"))),
        }
    }
    if loaded.len() != expected.len() {
        return Err(Error::config(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            expected.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::SeededRng;

    fn sample() -> ParameterSet {
        let mut rng = SeededRng::new(3);
        let mut p = ParameterSet::new();
        p.init_normal("b.weight", &[3, 2], 1.0, &mut rng).unwrap();
        p.init_zeros("a.bias", &[4]).unwrap();
        p.insert("c", Tensor::scalar(-0.0)).unwrap();
        p
    }

    #[test]
    fn bytes_round_trip() {
        let p = sample();
        let bytes = encode("seed = 1\n", &p);
        let ck = decode(&bytes, Path::new("m")).unwrap();
        assert_eq!(ck.config, "seed = 1\n");
        assert_eq!(encode(&ck.config, &ck.params), bytes);
        assert_eq!(&bytes[..4], b"VBSG");
    }

    #[test]
    fn corrupt_inputs_fail_cleanly() {
        let bytes = encode("", &sample());
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(decode(&bytes[..cut], Path::new("t")).is_err());
        }
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(matches!(decode(&v, Path::new("t")), Err(Error::Version { .. })));
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, Path::new("t")).is_err());
    }

    #[test]
    fn compatibility_names_the_mismatch() {
        let p = sample();
        check_compatible(&p, &p).unwrap();
        let mut q = ParameterSet::new();
        q.init_zeros("a.bias", &[5]).unwrap();
        let err = check_compatible(&q, &p).unwrap_err().to_string();
        assert!(err.contains("a.bias") || err.contains("b.weight"), "{err}");
    }
}
