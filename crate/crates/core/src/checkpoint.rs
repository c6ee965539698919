//! Binary parameter archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic          8 bytes  "MINTIQA\0"
//! version        u32
//! stage          u8       last completed training stage (0 = untrained)
//! config_len     u64
//! config         config_len bytes of UTF-8 JSON
//! param_count    u64
//! param_count ×  name_len u32, name bytes, ndim u32, ndim × u64 dims, numel × f64
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MINTIQA\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: u8,
    /// Serialized model configuration.
    pub config_json: String,
    pub params: ParamStore,
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, len: usize) -> Result<String, CheckpointError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}

// Guards allocation sizes against corrupt headers.
const MAX_LEN: u64 = 1 << 34;

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[self.stage])?;
        w.write_all(&(self.config_json.len() as u64).to_le_bytes())?;
        w.write_all(self.config_json.as_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut stage = [0u8; 1];
        r.read_exact(&mut stage)?;
        let config_len = read_u64(r)?;
        if config_len > MAX_LEN {
            return Err(CheckpointError::Corrupt("config length".into()));
        }
        let config_json = read_string(r, config_len as usize)?;
        let count = read_u64(r)?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = read_string(r, name_len)?;
            let ndim = read_u32(r)? as usize;
            if ndim == 0 || ndim > 8 {
                return Err(CheckpointError::Corrupt(format!("`{name}` has {ndim} dims")));
            }
            let shape = (0..ndim)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<io::Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
            let numel = match numel {
                Some(n) if n <= MAX_LEN => n as usize,
                _ => return Err(CheckpointError::Corrupt(format!("`{name}` is too large"))),
            };
            let mut bytes = vec![0u8; numel * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                .collect();
            let tensor = Tensor::new(shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            params.insert(name, tensor);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            stage: stage[0],
            config_json,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert(
            "a.w",
            Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap(),
        );
        params.insert("b", Tensor::scalar(f64::MAX));
        Checkpoint {
            stage: 2,
            config_json: r#"{"d_model":16}"#.into(),
            params,
        }
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::read_from(&mut &bytes[..]),
            Err(CheckpointError::BadMagic)
        ));
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(matches!(
            Checkpoint::read_from(&mut &bytes[..]),
            Err(CheckpointError::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn rejects_truncation_and_trailing() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(
            Checkpoint::read_from(&mut &longer[..]),
            Err(CheckpointError::Corrupt(_))
        ));
    }

    #[test]
    fn negative_zero_survives() {
        let back = Checkpoint::read_from(&mut &sample().to_bytes()[..]).unwrap();
        assert_eq!(back.params.get("a.w").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(
            values in prop::collection::vec(any::<u64>(), 1..40),
            stage in 0u8..4,
        ) {
            let data: Vec<f64> = values.iter().map(|&b| f64::from_bits(b)).collect();
            let mut params = ParamStore::new();
            params.insert("p.x", Tensor::new(vec![data.len()], data).unwrap());
            let ck = Checkpoint { stage, config_json: "{}".into(), params };
            let bytes = ck.to_bytes();
            let back = Checkpoint::read_from(&mut &bytes[..]).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
