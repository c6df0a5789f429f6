//! Binary container of `(name, shape, values)` triples.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"UDCNCKPT"
//! version u32 = 1
//! count   u32
//! count × { name_len u32, name utf-8, rank u32, dims u64 × rank, values f64-bits × numel }
//! ```
//!
//! Values are stored as raw IEEE-754 bit patterns so a save/load cycle is
//! bit-exact, including signed zeros and NaN payloads.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"UDCNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Params(#[from] super::AutogradError),
}

/// Serializes named tensors into the container format.
pub fn encode<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    out
}

pub fn decode(mut bytes: &[u8]) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 8];
    read_exact(&mut bytes, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut bytes)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = read_u32(&mut bytes)? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(&mut bytes)? as usize;
        if len > bytes.len() {
            return Err(CheckpointError::Malformed("name length".into()));
        }
        let mut name = vec![0u8; len];
        read_exact(&mut bytes, &mut name)?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed("name is not utf-8".into()))?;
        let rank = read_u32(&mut bytes)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(read_u64(&mut bytes)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
            .ok_or_else(|| CheckpointError::Malformed(format!("shape {shape:?} of `{name}`")))?;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f64::from_bits(read_u64(&mut bytes)?));
        }
        entries.push((name, Tensor::new(shape, data)?));
    }
    if !bytes.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", bytes.len())));
    }
    Ok(entries)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf)
        .map_err(|_| CheckpointError::Malformed("unexpected end of data".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Parameter values of `params` in container form.
pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    encode(params.iter().map(|(name, p)| (name, &p.value)))
}

pub fn save(params: &ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode_params(params);
    let io_err = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

/// Loads parameter values saved by [`save`] into an already-shaped set.
pub fn load_into(params: &mut ParamSet, path: &Path) -> Result<(), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    params.load_values(decode(&bytes)?)?;
    Ok(())
}

/// Hex SHA-256 of the encoded parameter values.
pub fn digest(params: &ParamSet) -> String {
    let hash = Sha256::digest(encode_params(params));
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            bits in proptest::collection::vec(any::<u64>(), 1..40),
            name in "[a-z.]{1,12}",
        ) {
            let data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let t = Tensor::vector(data);
            let bytes = encode([(name.as_str(), &t)]);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(&back[0].0, &name);
            let got: Vec<u64> = back[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(got, bits);
            prop_assert_eq!(encode([(back[0].0.as_str(), &back[0].1)]), bytes);
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(
            decode(b"NOTACKPT\x01\0\0\0\0\0\0\0"),
            Err(CheckpointError::BadMagic)
        ));
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode([("w", &t)]);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn save_and_load_params() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut ps = ParamSet::new();
        ps.insert("a.w", Tensor::matrix(2, 3, (0..6).map(f64::from).collect()).unwrap())
            .unwrap();
        ps.insert("a.b", Tensor::vector(vec![-0.0, 1e-300])).unwrap();
        save(&ps, &path).unwrap();

        let mut fresh = ParamSet::new();
        fresh.insert("a.w", Tensor::zeros(&[2, 3])).unwrap();
        fresh.insert("a.b", Tensor::zeros(&[2])).unwrap();
        load_into(&mut fresh, &path).unwrap();
        assert_eq!(digest(&fresh), digest(&ps));
        assert_eq!(fresh.get("a.b").unwrap().data()[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::zeros(&[3])).unwrap();
        let bytes = encode([("w", &Tensor::zeros(&[4]))]);
        assert!(ps.load_values(decode(&bytes).unwrap()).is_err());
    }
}
