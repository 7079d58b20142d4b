//! Pre-encoded token corpus: a little-endian header `(count, seq_len, vocab, classes)` as u32,
//! then per record `seq_len` u16 token ids followed by one u16 class id.

use std::io::Write;
use std::path::Path;

use super::model::TokenSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenDataset {
    pub seq_len: usize,
    pub vocab: usize,
    pub classes: usize,
    pub records: Vec<TokenSequence>,
}

const HEADER: usize = 16;

impl TokenDataset {
    pub fn new(seq_len: usize, vocab: usize, classes: usize, records: Vec<TokenSequence>) -> Result<Self> {
        let ds = Self { seq_len, vocab, classes, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab > u16::MAX as usize + 1 || self.classes > u16::MAX as usize {
            return Err(Error::InvalidArgument("vocab or class count does not fit in u16 ids".into()));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.tokens.len() != self.seq_len || r.class_id >= self.classes || r.tokens.iter().any(|&t| t >= self.vocab) {
                return Err(Error::InvalidArgument(format!("record {i} does not match (seq_len {}, vocab {}, classes {})", self.seq_len, self.vocab, self.classes)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.records.len() * (self.seq_len + 1) * 2);
        for v in [self.records.len(), self.seq_len, self.vocab, self.classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for r in &self.records {
            for &t in &r.tokens {
                out.extend_from_slice(&(t as u16).to_le_bytes());
            }
            out.extend_from_slice(&(r.class_id as u16).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let corrupt = |msg: String| Error::Corrupt { path: origin.into(), msg };
        if bytes.len() < HEADER {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes")) as usize;
        let (count, seq_len, vocab, classes) = (word(0), word(1), word(2), word(3));
        let rec = (seq_len + 1) * 2;
        let expected = count.checked_mul(rec).and_then(|n| n.checked_add(HEADER));
        if expected != Some(bytes.len()) {
            return Err(corrupt(format!("header announces {count} records of {seq_len} tokens but file has {} bytes", bytes.len())));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
        let records = (0..count)
            .map(|i| {
                let base = HEADER + i * rec;
                TokenSequence { tokens: (0..seq_len).map(|j| u16_at(base + 2 * j)).collect(), class_id: u16_at(base + 2 * seq_len) }
            })
            .collect();
        let ds = Self { seq_len, vocab, classes, records };
        ds.validate().map_err(|e| corrupt(e.to_string()))?;
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Write through a temporary file in the same directory, then rename into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::harness::atomic_write(path, |f| f.write_all(&self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TokenDataset {
        TokenDataset::new(
            3,
            64,
            8,
            vec![TokenSequence { class_id: 7, tokens: vec![0, 63, 5] }, TokenSequence { class_id: 0, tokens: vec![1, 2, 3] }],
        )
        .unwrap()
    }

    #[test]
    fn layout_is_little_endian() {
        let b = sample().to_bytes();
        assert_eq!(&b[..16], &[2, 0, 0, 0, 3, 0, 0, 0, 64, 0, 0, 0, 8, 0, 0, 0]);
        assert_eq!(&b[16..24], &[0, 0, 63, 0, 5, 0, 7, 0]);
        assert_eq!(b.len(), 16 + 2 * 8);
    }

    #[test]
    fn bytes_round_trip() {
        let d = sample();
        assert_eq!(TokenDataset::from_bytes(&d.to_bytes(), "mem").unwrap(), d);
    }

    #[test]
    fn truncation_and_bad_ids_are_corrupt() {
        let b = sample().to_bytes();
        assert!(matches!(TokenDataset::from_bytes(&b[..b.len() - 1], "mem"), Err(Error::Corrupt { .. })));
        let mut bad = b.clone();
        bad[16] = 200;
        assert!(matches!(TokenDataset::from_bytes(&bad, "mem"), Err(Error::Corrupt { .. })));
    }
}
