use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CorpusError;

/// The recognizer's output alphabet.
///
/// Class indices `0..len()` are characters in codepoint order; the CTC blank
/// is the extra class at index `len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<char>", into = "Vec<char>")]
pub struct Charset {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, u32>,
}

impl Charset {
    /// Builds a charset from explicit characters. Rejects duplicates.
    pub fn from_chars(chars: Vec<char>) -> Result<Self, CorpusError> {
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if index.insert(c, i as u32).is_some() {
                return Err(CorpusError::DuplicateChar(c));
            }
        }
        Ok(Charset { chars, index })
    }

    /// Number of characters, excluding the blank.
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    /// Number of output classes (characters plus blank).
    pub fn num_classes(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn blank_index(&self) -> u32 {
        self.chars.len() as u32
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn char_at(&self, index: u32) -> Option<char> {
        self.chars.get(index as usize).copied()
    }

    pub fn index_of(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    /// Maps text to class indices. Characters outside the charset are
    /// returned in the error.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, CorpusError> {
        text.chars()
            .map(|c| self.index_of(c).ok_or(CorpusError::UnknownChar(c)))
            .collect()
    }

    /// Maps text to class indices, dropping characters the charset lacks.
    pub fn encode_lossy(&self, text: &str) -> Vec<u32> {
        text.chars().filter_map(|c| self.index_of(c)).collect()
    }

    /// Inverse of [`Charset::encode`]; the blank and out-of-range indices are skipped.
    pub fn decode(&self, labels: &[u32]) -> String {
        labels.iter().filter_map(|&l| self.char_at(l)).collect()
    }

    /// Hex SHA-256 of the character list, used to tie weights to a charset.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.chars {
            let mut buf = [0u8; 4];
            h.update(c.encode_utf8(&mut buf).as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..16])
    }
}

impl TryFrom<Vec<char>> for Charset {
    type Error = CorpusError;

    fn try_from(chars: Vec<char>) -> Result<Self, Self::Error> {
        Charset::from_chars(chars)
    }
}

impl From<Charset> for Vec<char> {
    fn from(c: Charset) -> Self {
        c.chars
    }
}

/// Collects every distinct character of the transcripts, sorted by codepoint.
pub fn build_charset<S: AsRef<str>>(transcripts: &[S]) -> Result<Charset, CorpusError> {
    let set: BTreeSet<char> = transcripts
        .iter()
        .flat_map(|t| t.as_ref().chars())
        .collect();
    if set.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Charset::from_chars(set.into_iter().collect())
}
