//! Closed word-level vocabulary and tokenization.
//!
//! Tokenization is whitespace splitting over lowercased text. The vocabulary
//! is closed: a word outside it is an error rather than an `<unk>` mapping,
//! which keeps `detokenize(tokenize(text))` an exact round-trip of the
//! normalized text.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GycError, Result};

pub type TokenId = usize;

pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const PAD_TOKEN: &str = "<pad>";
pub const MASK_TOKEN: &str = "<mask>";

/// Reserved ids; every vocabulary places them at the same positions.
pub const BOS_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const PAD_ID: TokenId = 2;
pub const MASK_ID: TokenId = 3;

/// Number of reserved ids at the front of every vocabulary.
pub const NUM_RESERVED: usize = 4;

/// Word-level vocabulary with reserved control ids 0..4.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "VocabularySerde", into = "VocabularySerde")]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabularySerde {
    words: Vec<String>,
}

impl TryFrom<VocabularySerde> for Vocabulary {
    type Error = GycError;
    fn try_from(v: VocabularySerde) -> Result<Self> {
        Vocabulary::from_id_order(v.words)
    }
}

impl From<Vocabulary> for VocabularySerde {
    fn from(v: Vocabulary) -> Self {
        VocabularySerde { words: v.words }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from corpus words. Words are normalized to
    /// lowercase, deduplicated and sorted, so the mapping is a pure function
    /// of the word set.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen: Vec<String> = Vec::new();
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if w.is_empty() {
                continue;
            }
            if w.contains(char::is_whitespace) {
                return Err(GycError::InvalidArgument(format!(
                    "vocabulary word '{w}' contains whitespace"
                )));
            }
            if is_reserved(&w) {
                return Err(GycError::InvalidArgument(format!(
                    "'{w}' collides with a reserved token"
                )));
            }
            seen.push(w);
        }
        seen.sort();
        seen.dedup();
        let mut all = vec![
            BOS_TOKEN.to_string(),
            EOS_TOKEN.to_string(),
            PAD_TOKEN.to_string(),
            MASK_TOKEN.to_string(),
        ];
        all.extend(seen);
        Self::from_id_order(all)
    }

    /// Rebuilds a vocabulary from an id-ordered word list (checkpoint load).
    pub fn from_id_order(words: Vec<String>) -> Result<Self> {
        if words.len() < NUM_RESERVED {
            return Err(GycError::InvalidArgument(
                "vocabulary must contain the reserved tokens".into(),
            ));
        }
        let expected = [BOS_TOKEN, EOS_TOKEN, PAD_TOKEN, MASK_TOKEN];
        for (i, tok) in expected.iter().enumerate() {
            if words[i] != *tok {
                return Err(GycError::InvalidArgument(format!(
                    "reserved token {i} must be '{tok}', found '{}'",
                    words[i]
                )));
            }
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(GycError::InvalidArgument(format!("duplicate word '{w}'")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn bos_id(&self) -> TokenId {
        BOS_ID
    }

    pub fn eos_id(&self) -> TokenId {
        EOS_ID
    }

    pub fn pad_id(&self) -> TokenId {
        PAD_ID
    }

    pub fn mask_id(&self) -> TokenId {
        MASK_ID
    }

    pub fn is_reserved_id(&self, id: TokenId) -> bool {
        id < NUM_RESERVED
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Lowercases, splits on whitespace and maps each word to its id.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let mut ids = Vec::new();
        for word in text.to_lowercase().split_whitespace() {
            match self.id(word) {
                Some(id) => ids.push(id),
                None => return Err(GycError::UnknownWord(word.to_string())),
            }
        }
        if ids.is_empty() {
            return Err(GycError::EmptyInput);
        }
        Ok(TokenSequence { ids })
    }

    /// Joins token words with single spaces. Reserved ids render as their
    /// control strings; sequences produced by sampling never contain them.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.ids
            .iter()
            .map(|&id| self.word(id).unwrap_or("<invalid>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercased, single-spaced form of a text; the tokenizer round-trips this.
pub fn normalize(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_reserved(word: &str) -> bool {
    matches!(word, BOS_TOKEN | EOS_TOKEN | PAD_TOKEN | MASK_TOKEN)
}

/// Non-empty sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(GycError::EmptyInput);
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Errors unless every id is below `vocab_size`.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id >= vocab_size) {
            Some(&id) => Err(GycError::InvalidArgument(format!(
                "token id {id} out of range (vocab size {vocab_size})"
            ))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_vocab() -> Vocabulary {
        Vocabulary::from_words(["the", "food", "is", "great", "awful"]).unwrap()
    }

    #[test]
    fn tokenize_direct_lookup() {
        let v = toy_vocab();
        let seq = v.tokenize("the food is great").unwrap();
        let expected: Vec<TokenId> = ["the", "food", "is", "great"]
            .iter()
            .map(|w| v.id(w).unwrap())
            .collect();
        assert_eq!(seq.ids(), expected.as_slice());
    }

    #[test]
    fn empty_input_is_an_error() {
        let v = toy_vocab();
        assert!(matches!(v.tokenize(""), Err(GycError::EmptyInput)));
        assert!(matches!(v.tokenize("   "), Err(GycError::EmptyInput)));
    }

    #[test]
    fn unknown_word_is_an_error() {
        let v = toy_vocab();
        match v.tokenize("the pizza is great") {
            Err(GycError::UnknownWord(w)) => assert_eq!(w, "pizza"),
            other => panic!("expected unknown word error, got {other:?}"),
        }
    }

    #[test]
    fn round_trip_is_normalized_text() {
        let v = toy_vocab();
        let text = "  The   FOOD is  great ";
        let seq = v.tokenize(text).unwrap();
        assert_eq!(v.detokenize(&seq), normalize(text));
    }

    #[test]
    fn reserved_ids_are_stable() {
        let v = toy_vocab();
        assert_eq!(v.word(v.bos_id()), Some(BOS_TOKEN));
        assert_eq!(v.word(v.eos_id()), Some(EOS_TOKEN));
        assert_eq!(v.word(v.pad_id()), Some(PAD_TOKEN));
        assert_eq!(v.word(v.mask_id()), Some(MASK_TOKEN));
        let ids = [v.bos_id(), v.eos_id(), v.pad_id(), v.mask_id()];
        for (i, a) in ids.iter().enumerate() {
            assert!(*a < v.size());
            for b in &ids[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn id_maps_are_inverse() {
        let v = toy_vocab();
        for id in 0..v.size() {
            let w = v.word(id).unwrap();
            assert_eq!(v.id(w), Some(id));
        }
    }

    #[test]
    fn reserved_collision_rejected() {
        assert!(Vocabulary::from_words(["<bos>", "x"]).is_err());
    }
}
