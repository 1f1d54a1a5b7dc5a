//! Model file layout:
//!
//! ```text
//! "ABOT1"                                 5 bytes
//! layers, heads, d_model, d_ff, vocab, max_seq   u32 little-endian each
//! f32 little-endian arrays, in order:
//!   token_embedding [vocab][d_model]
//!   position_embedding [max_seq][d_model]
//!   per layer: ln1_gain, ln1_bias, wq, wk, wv, wo, ln2_gain, ln2_bias, w1, b1, w2, b2
//!   final_gain, final_bias
//! ```
//! Matrices are `[in][out]` row-major.

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::{ModelConfig, ModelWeights};

pub const MODEL_MAGIC: &[u8; 5] = b"ABOT1";

pub fn write_model<W: Write>(weights: &ModelWeights, mut out: W) -> Result<()> {
    let c = &weights.config;
    out.write_all(MODEL_MAGIC)?;
    for dim in [c.layers, c.heads, c.d_model, c.d_ff, c.vocab, c.max_seq] {
        let dim = u32::try_from(dim).map_err(|_| Error::ModelFormat("dimension exceeds u32".into()))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    let mut buf = Vec::new();
    for array in weights.arrays() {
        buf.clear();
        for v in array {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<ModelWeights> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic).map_err(|_| Error::ModelFormat("truncated header".into()))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let mut dims = [0usize; 6];
    for dim in &mut dims {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(|_| Error::ModelFormat("truncated header".into()))?;
        *dim = u32::from_le_bytes(b) as usize;
    }
    let [layers, heads, d_model, d_ff, vocab, max_seq] = dims;
    let config = ModelConfig { layers, heads, d_model, d_ff, vocab, max_seq };
    let mut weights = ModelWeights::zeros(config)?;

    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let expected = config.param_count() as usize * 4;
    if bytes.len() != expected {
        return Err(Error::ModelFormat(format!("expected {expected} weight bytes, found {}", bytes.len())));
    }
    let mut values = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
    for array in weights.arrays_mut() {
        for v in array.iter_mut() {
            *v = values.next().expect("length checked");
        }
    }
    if !weights.is_finite() {
        return Err(Error::ModelFormat("non-finite weight".into()));
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let weights = ModelWeights::init(ModelConfig::tiny(), 5).unwrap();
        let mut buf = Vec::new();
        write_model(&weights, &mut buf).unwrap();
        assert_eq!(&buf[..5], b"ABOT1");
        assert_eq!(buf.len(), 5 + 24 + 4 * weights.param_count() as usize);
        assert_eq!(read_model(buf.as_slice()).unwrap(), weights);
    }

    #[test]
    fn rejects_corrupt_files() {
        let weights = ModelWeights::init(ModelConfig::tiny(), 5).unwrap();
        let mut buf = Vec::new();
        write_model(&weights, &mut buf).unwrap();
        assert!(read_model(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_model(bad.as_slice()).is_err());
    }
}
