//! Binary checkpoint: magic, format version, JSON model config, then the flat
//! parameter vector as little-endian f64.

use std::path::Path;

use super::model::{ModelConfig, ToyModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"BABELTOY";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(model: &ToyModel<T>) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&model.config)?;
    let mut out = Vec::with_capacity(28 + config.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_f64_lossy().to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ToyModel<T>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u64()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let count = r.u64()? as usize;
    let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    ToyModel::from_params(config, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save_checkpoint<T: Scalar>(model: &ToyModel<T>, path: &Path) -> Result<()> {
    crate::corpus::write_bytes(path, &encode_checkpoint(model)?)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ToyModel<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn round_trip_is_exact_for_f64() {
        let m = ToyModel::<f64>::init(ModelConfig::default(), &mut rng_from_seed(1)).unwrap();
        let back: ToyModel<f64> = decode_checkpoint(&encode_checkpoint(&m).unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn f32_round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let m = ToyModel::<f32>::init(ModelConfig::default(), &mut rng_from_seed(2)).unwrap();
        save_checkpoint(&m, &p).unwrap();
        assert_eq!(load_checkpoint::<f32>(&p).unwrap(), m);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let m = ToyModel::<f64>::init(ModelConfig::default(), &mut rng_from_seed(1)).unwrap();
        let bytes = encode_checkpoint(&m).unwrap();
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint::<f64>(&bad).is_err());
        let mut bad = bytes;
        bad[8] = 9;
        assert!(decode_checkpoint::<f64>(&bad).is_err());
    }
}
