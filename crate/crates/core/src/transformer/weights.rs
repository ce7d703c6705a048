//! Weight file: `STTF` magic, format version, JSON header (config plus tensor
//! directory), little-endian f32 payload, CRC32 of the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tensor_layout, TensorInfo, Transformer, TransformerConfig};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"STTF";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TransformerConfig,
    tensors: Vec<TensorInfo>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptWeights(msg.into())
}

impl Transformer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header { config: self.config, tensors: tensor_layout(&self.config) };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut payload = Vec::with_capacity(self.params.len() * 4);
        for v in &self.params {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut out = Vec::with_capacity(12 + header.len() + payload.len() + 4);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != WEIGHTS_MAGIC {
            return Err(corrupt("missing STTF magic"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != WEIGHTS_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let header_len = word(8) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&e| e + 4 <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| corrupt(format!("bad header: {e}")))?;
        header.config.validate().map_err(|e| corrupt(e.to_string()))?;
        if header.tensors != tensor_layout(&header.config) {
            return Err(corrupt("tensor directory does not match config"));
        }
        let count = header.config.param_count();
        let payload = &bytes[header_end..bytes.len() - 4];
        if payload.len() != count * 4 {
            return Err(corrupt(format!(
                "payload holds {} bytes, config needs {}",
                payload.len(),
                count * 4
            )));
        }
        let stored = word(bytes.len() - 4);
        if crc32fast::hash(payload) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let params = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Transformer::from_params(header.config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Transformer {
        let cfg = TransformerConfig { layers: 1, heads: 2, dim: 8, max_context: 8, vocab_size: 5 };
        Transformer::init_random(cfg, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = model();
        let back = Transformer::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back.config(), m.config());
        let a: Vec<u32> = m.params().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = model().to_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 0x40;
        assert!(matches!(Transformer::from_bytes(&bytes), Err(Error::CorruptWeights(_))));
    }

    #[test]
    fn truncated_or_foreign_files_rejected() {
        let bytes = model().to_bytes();
        assert!(Transformer::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Transformer::from_bytes(b"KATZ0000000000000000").is_err());
        let mut v2 = bytes.clone();
        v2[4] = 9;
        assert!(matches!(Transformer::from_bytes(&v2), Err(Error::CorruptWeights(_))));
    }

    #[test]
    fn mismatched_shape_rejected() {
        let m = model();
        let mut header: Header = Header { config: *m.config(), tensors: tensor_layout(m.config()) };
        header.tensors[0].shape = vec![4, 8];
        let h = serde_json::to_vec(&header).unwrap();
        let mut bytes = m.to_bytes();
        let old_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let tail = bytes.split_off(12 + old_len);
        bytes.truncate(8);
        bytes.extend_from_slice(&(h.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&h);
        bytes.extend_from_slice(&tail);
        assert!(matches!(Transformer::from_bytes(&bytes), Err(Error::CorruptWeights(_))));
    }
}
