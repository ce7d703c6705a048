//! Trigram model file: `KATZ` magic, version, k_threshold, vocabulary, then sorted
//! length-prefixed count tables, the total count, and a CRC32 of everything before it.

use std::path::Path;

use super::{KatzTrigram, NgramCounts};
use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocab};

pub const KATZ_MAGIC: &[u8; 4] = b"KATZ";
pub const KATZ_VERSION: u32 = 1;

const NO_TOKEN: u32 = u32::MAX;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptModel(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.at + N;
        let chunk = self.bytes.get(self.at..end).ok_or_else(|| corrupt("truncated file"))?;
        self.at = end;
        Ok(chunk.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<u32> {
        self.take::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.take::<8>().map(u64::from_le_bytes)
    }

    fn table<const K: usize>(&mut self) -> Result<Vec<([u32; K], u64)>> {
        let len = self.u64()? as usize;
        if len > self.bytes.len() {
            return Err(corrupt("table length exceeds file size"));
        }
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let mut key = [0u32; K];
            for k in &mut key {
                *k = self.u32()?;
            }
            let n = self.u64()?;
            if n == 0 {
                return Err(corrupt("zero count stored"));
            }
            if out.last().is_some_and(|(prev, _)| *prev >= key) {
                return Err(corrupt("table not strictly sorted"));
            }
            out.push((key, n));
        }
        Ok(out)
    }
}

fn opt_token(t: Option<TokenId>) -> u32 {
    t.map_or(NO_TOKEN, |t| t.0)
}

fn read_token(v: u32) -> Option<TokenId> {
    (v != NO_TOKEN).then_some(TokenId(v))
}

impl KatzTrigram {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.counts();
        let mut out = Vec::new();
        out.extend_from_slice(KATZ_MAGIC);
        out.extend_from_slice(&KATZ_VERSION.to_le_bytes());
        out.extend_from_slice(&self.k_threshold().to_le_bytes());
        let vocab = self.vocab();
        out.extend_from_slice(&(vocab.size as u32).to_le_bytes());
        out.extend_from_slice(&opt_token(vocab.bos).to_le_bytes());
        out.extend_from_slice(&opt_token(vocab.eos).to_le_bytes());
        out.extend_from_slice(&(c.trigrams.len() as u64).to_le_bytes());
        for (k, n) in &c.trigrams {
            k.iter().for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
            out.extend_from_slice(&n.to_le_bytes());
        }
        out.extend_from_slice(&(c.bigrams.len() as u64).to_le_bytes());
        for (k, n) in &c.bigrams {
            k.iter().for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
            out.extend_from_slice(&n.to_le_bytes());
        }
        out.extend_from_slice(&(c.unigrams.len() as u64).to_le_bytes());
        for (k, n) in &c.unigrams {
            out.extend_from_slice(&k.to_le_bytes());
            out.extend_from_slice(&n.to_le_bytes());
        }
        out.extend_from_slice(&c.total.to_le_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != KATZ_MAGIC {
            return Err(corrupt("missing KATZ magic"));
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, at: 4 };
        let version = r.u32()?;
        if version != KATZ_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let k = r.u32()?;
        let vocab = Vocab { size: r.u32()? as usize, bos: read_token(r.u32()?), eos: read_token(r.u32()?) };
        let counts = NgramCounts {
            trigrams: r.table::<3>()?.into_iter().collect(),
            bigrams: r.table::<2>()?.into_iter().collect(),
            unigrams: r.table::<1>()?.into_iter().map(|([w], n)| (w, n)).collect(),
            total: r.u64()?,
        };
        if r.at != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        let in_vocab = |t: &u32| (*t as usize) < vocab.size;
        if !counts.trigrams.keys().all(|k| k.iter().all(in_vocab))
            || !counts.bigrams.keys().all(|k| k.iter().all(in_vocab))
            || !counts.unigrams.keys().all(in_vocab)
        {
            return Err(corrupt("token outside vocabulary"));
        }
        KatzTrigram::from_counts(counts, vocab, k).map_err(|e| corrupt(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> KatzTrigram {
        let corpus: Vec<TokenId> = [0u32, 1, 2, 1, 0, 3, 1, 2, 2, 0, 1].iter().map(|&t| TokenId(t)).collect();
        KatzTrigram::train(&corpus, Vocab { size: 4, bos: Some(TokenId(3)), eos: None }, 5).unwrap()
    }

    #[test]
    fn round_trip() {
        let m = model();
        let bytes = m.to_bytes();
        let back = KatzTrigram::from_bytes(&bytes).unwrap();
        assert_eq!(back.counts(), m.counts());
        assert_eq!(back.k_threshold(), m.k_threshold());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = model().to_bytes();
        bytes[20] ^= 1;
        assert!(matches!(KatzTrigram::from_bytes(&bytes), Err(Error::CorruptModel(_))));
        assert!(matches!(KatzTrigram::from_bytes(b"STTF1234"), Err(Error::CorruptModel(_))));
    }
}
