//! Word-level tokenizer with a fixed, architecture-determined lexicon.
//!
//! Every id `>= NUM_SPECIAL` has a canonical pronounceable spelling (fixed-width
//! consonant-vowel syllables). Words outside the lexicon are hashed into the id
//! range, so arbitrary text still tokenizes. The lexicon depends only on the
//! vocabulary size and never changes after construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const NUM_SPECIAL: usize = 5;

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

pub fn is_special(id: usize) -> bool {
    id < NUM_SPECIAL
}

/// Padded `[batch × seq]` token ids with a 0/1 attention mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub token_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(token_ids: Vec<usize>, attention_mask: Vec<u8>, batch: usize, seq: usize) -> Result<Self> {
        if token_ids.len() != batch * seq || attention_mask.len() != batch * seq {
            return Err(Error::Shape(format!(
                "token batch expects {batch}×{seq} entries, got {} ids and {} mask values",
                token_ids.len(),
                attention_mask.len()
            )));
        }
        if attention_mask.iter().any(|&m| m > 1) {
            return Err(Error::Shape("attention mask must be 0/1".into()));
        }
        if batch == 0 || seq == 0 {
            return Err(Error::Shape("empty token batch".into()));
        }
        for r in 0..batch {
            if attention_mask[r * seq..(r + 1) * seq].iter().all(|&m| m == 0) {
                return Err(Error::Shape(format!("row {r} has no unmasked position")));
            }
        }
        Ok(Self { token_ids, attention_mask, batch, seq })
    }

    pub fn row_ids(&self, r: usize) -> &[usize] {
        &self.token_ids[r * self.seq..(r + 1) * self.seq]
    }

    pub fn row_mask(&self, r: usize) -> &[u8] {
        &self.attention_mask[r * self.seq..(r + 1) * self.seq]
    }

    /// Drops trailing columns beyond `max_len`.
    pub fn truncated(&self, max_len: usize) -> Self {
        if self.seq <= max_len {
            return self.clone();
        }
        let mut ids = Vec::with_capacity(self.batch * max_len);
        let mut mask = Vec::with_capacity(self.batch * max_len);
        for r in 0..self.batch {
            ids.extend_from_slice(&self.row_ids(r)[..max_len]);
            mask.extend_from_slice(&self.row_mask(r)[..max_len]);
        }
        Self { token_ids: ids, attention_mask: mask, batch: self.batch, seq: max_len }
    }

    /// Number of unmasked positions per row.
    pub fn lengths(&self) -> Vec<usize> {
        (0..self.batch)
            .map(|r| self.row_mask(r).iter().filter(|&&m| m == 1).count())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab_size: usize,
    width: usize,
}

impl Tokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size <= NUM_SPECIAL {
            return Err(Error::Config(format!("vocabulary of {vocab_size} leaves no room for words")));
        }
        let syllables = CONSONANTS.len() * VOWELS.len();
        let mut width = 1;
        while syllables.pow(width as u32) < vocab_size {
            width += 1;
        }
        Ok(Self { vocab_size, width })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Canonical spelling of a non-special id.
    pub fn word(&self, id: usize) -> String {
        assert!(!is_special(id) && id < self.vocab_size, "id {id} has no lexicon word");
        let syllables = CONSONANTS.len() * VOWELS.len();
        let mut digits = vec![0usize; self.width];
        let mut rest = id;
        for d in digits.iter_mut().rev() {
            *d = rest % syllables;
            rest /= syllables;
        }
        let mut s = String::with_capacity(2 * self.width);
        for d in digits {
            s.push(CONSONANTS[d / VOWELS.len()] as char);
            s.push(VOWELS[d % VOWELS.len()] as char);
        }
        s
    }

    fn lexicon_id(&self, word: &str) -> Option<usize> {
        let bytes = word.as_bytes();
        if bytes.len() != 2 * self.width {
            return None;
        }
        let syllables = CONSONANTS.len() * VOWELS.len();
        let mut id = 0usize;
        for pair in bytes.chunks(2) {
            let c = CONSONANTS.iter().position(|&x| x == pair[0])?;
            let v = VOWELS.iter().position(|&x| x == pair[1])?;
            id = id * syllables + c * VOWELS.len() + v;
        }
        (!is_special(id) && id < self.vocab_size).then_some(id)
    }

    pub fn token_id(&self, word: &str) -> usize {
        if let Some(id) = self.lexicon_id(word) {
            return id;
        }
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        NUM_SPECIAL + (h % (self.vocab_size - NUM_SPECIAL) as u64) as usize
    }

    pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
    }

    /// `[CLS] w₁ … wₙ [SEP]`, truncated to `max_len` tokens in total.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let budget = max_len.saturating_sub(2);
        let mut ids = vec![CLS];
        ids.extend(Self::words(text).take(budget).map(|w| self.token_id(&w)));
        ids.push(SEP);
        ids
    }

    pub fn batch<S: AsRef<str>>(&self, texts: &[S], max_len: usize) -> Result<TokenBatch> {
        let rows: Vec<Vec<usize>> = texts.iter().map(|t| self.encode(t.as_ref(), max_len)).collect();
        Self::pad(rows)
    }

    /// Right-pads id rows into a batch.
    pub fn pad(rows: Vec<Vec<usize>>) -> Result<TokenBatch> {
        let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
        let batch = rows.len();
        let mut ids = Vec::with_capacity(batch * seq);
        let mut mask = Vec::with_capacity(batch * seq);
        for row in rows {
            let n = row.len();
            ids.extend(row);
            ids.extend(std::iter::repeat(PAD).take(seq - n));
            mask.extend(std::iter::repeat(1u8).take(n));
            mask.extend(std::iter::repeat(0u8).take(seq - n));
        }
        TokenBatch::new(ids, mask, batch, seq)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn lexicon_words_round_trip() {
        let tok = Tokenizer::new(1000).unwrap();
        for id in NUM_SPECIAL..1000 {
            assert_eq!(tok.token_id(&tok.word(id)), id);
        }
    }

    #[test]
    fn encode_adds_specials_and_truncates() {
        let tok = Tokenizer::new(1000).unwrap();
        let ids = tok.encode("Hello, world! again", 4);
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], CLS);
        assert_eq!(ids[3], SEP);
    }

    #[test]
    fn batch_rejects_empty_rows() {
        assert!(TokenBatch::new(vec![1, 0], vec![0, 0], 1, 2).is_err());
        assert!(TokenBatch::new(vec![1, 0], vec![1, 2], 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn ids_stay_in_vocab(text in "\\PC{0,40}") {
            let tok = Tokenizer::new(1000).unwrap();
            for id in tok.encode(&text, 64) {
                prop_assert!(id < 1000);
            }
        }
    }
}
