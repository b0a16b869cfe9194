//! Character vocabulary and text <-> token-id conversion.
//!
//! Tokenization is strictly per Unicode scalar value (no wordpieces, no
//! normalization). Ids 0..2 are reserved for the special tokens and are never
//! produced by the text mapping; regular characters start at id 3.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Id of the classification sentinel prepended to every sequence.
pub const CLS_ID: u32 = 0;
/// Id reserved for padding. Never emitted by [`Vocab::encode`].
pub const PAD_ID: u32 = 1;
/// Id for out-of-vocabulary characters.
pub const UNK_ID: u32 = 2;
/// Number of reserved special ids.
pub const NUM_SPECIALS: u32 = 3;
/// Replacement glyph used when decoding an UNK position.
pub const UNK_GLYPH: char = '\u{FFFD}';

/// A token-id sequence. Position 0 is always [`CLS_ID`]; no padding is
/// stored, the length is explicit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Count of positions i >= 1 where the two sequences differ.
    /// Sequences must have equal length (attacks preserve length).
    pub fn diff_positions(&self, other: &TokenSeq) -> Result<Vec<usize>> {
        if self.len() != other.len() {
            return Err(Error::Shape {
                what: "token sequence comparison".into(),
                expected: format!("{}", self.len()),
                found: format!("{}", other.len()),
            });
        }
        Ok((1..self.len())
            .filter(|&i| self.0[i] != other.0[i])
            .collect())
    }
}

/// Bijection between characters and integer ids, plus the reserved specials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
    id_of: HashMap<char, u32>,
}

impl Vocab {
    /// Builds the vocabulary from a corpus, keeping every character whose
    /// frequency is at least `min_freq`. Characters are ordered by descending
    /// frequency, ties broken by ascending code point, so construction is
    /// deterministic given (corpus, min_freq).
    pub fn build<S: AsRef<str>>(corpus: &[S], min_freq: u64) -> Result<Vocab> {
        if corpus.is_empty() {
            return Err(Error::Config(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        if min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        let mut counts: HashMap<char, u64> = HashMap::new();
        for text in corpus {
            for ch in text.as_ref().chars() {
                *counts.entry(ch).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(char, u64)> =
            counts.into_iter().filter(|&(_, n)| n >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Vocab::from_chars(
            kept.into_iter().map(|(c, _)| c).collect(),
        ))
    }

    /// Builds a vocabulary directly from an ordered character list.
    /// `chars[i]` gets id `i + 3`.
    pub fn from_chars(chars: Vec<char>) -> Vocab {
        let id_of = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32 + NUM_SPECIALS))
            .collect();
        Vocab { chars, id_of }
    }

    /// Total vocabulary size including the three specials.
    pub fn size(&self) -> usize {
        self.chars.len() + NUM_SPECIALS as usize
    }

    /// Characters in id order (id = index + 3).
    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Id for a character, if in-vocabulary.
    pub fn id_of(&self, ch: char) -> Option<u32> {
        self.id_of.get(&ch).copied()
    }

    /// Character for a non-special id.
    pub fn char_of(&self, id: u32) -> Option<char> {
        if id < NUM_SPECIALS {
            return None;
        }
        self.chars.get((id - NUM_SPECIALS) as usize).copied()
    }

    /// Encodes text into `[CLS]` followed by per-character ids, UNK for
    /// out-of-vocabulary characters, truncated to `max_len + 1` total
    /// positions.
    pub fn encode(&self, text: &str, max_len: usize) -> TokenSeq {
        debug_assert!(max_len >= 1, "max_len must be at least 1");
        let mut ids = Vec::with_capacity(text.chars().count().min(max_len) + 1);
        ids.push(CLS_ID);
        for ch in text.chars().take(max_len) {
            ids.push(self.id_of(ch).unwrap_or(UNK_ID));
        }
        TokenSeq(ids)
    }

    /// Decodes a token sequence back to text. CLS and PAD are dropped, UNK
    /// renders as [`UNK_GLYPH`].
    pub fn decode(&self, tokens: &TokenSeq) -> Result<String> {
        let mut out = String::with_capacity(tokens.len());
        for &id in tokens.ids() {
            match id {
                CLS_ID | PAD_ID => {}
                UNK_ID => out.push(UNK_GLYPH),
                _ => match self.char_of(id) {
                    Some(ch) => out.push(ch),
                    None => {
                        return Err(Error::InvalidToken {
                            id,
                            vocab_size: self.size(),
                        });
                    }
                },
            }
        }
        Ok(out)
    }

    /// Serializes the character list, one character per line; line number + 3
    /// is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &ch in &self.chars {
            out.push(ch);
            out.push('\n');
        }
        out
    }

    /// Parses the one-character-per-line format produced by [`Vocab::to_text`].
    pub fn from_text(text: &str) -> Result<Vocab> {
        let mut chars = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut it = line.chars();
            let ch = it
                .next()
                .ok_or_else(|| Error::Data(format!("vocab line {}: empty line", lineno + 1)))?;
            if it.next().is_some() {
                return Err(Error::Data(format!(
                    "vocab line {}: expected exactly one character",
                    lineno + 1
                )));
            }
            chars.push(ch);
        }
        Ok(Vocab::from_chars(chars))
    }

    /// SHA-256 over the character list; used to detect vocab mismatches
    /// between runs.
    pub fn sha256(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for &ch in &self.chars {
            hasher.update((ch as u32).to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
