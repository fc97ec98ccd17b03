//! Whitespace word-level vocabulary with a fixed block of special tokens.
//!
//! Value words map to exactly one token each, so hallucination labels produced
//! at word granularity line up with model positions without any smearing.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;

/// Words of the fixed refusal phrase; they are special tokens so the phrase is
/// detected by exact id match.
pub const REFUSAL_WORDS: [&str; 2] = ["cannot", "answer"];
pub const REFUSAL_IDS: [u32; 2] = [4, 5];

pub const SPECIALS: [&str; 6] = ["<pad>", "<bos>", "<eos>", "<sep>", REFUSAL_WORDS[0], REFUSAL_WORDS[1]];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials first, then every other distinct word in lexicographic order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Vocab {
        let mut words = BTreeSet::new();
        for text in texts {
            for w in text.split_whitespace() {
                if !SPECIALS.contains(&w) {
                    words.insert(w.to_string());
                }
            }
        }
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::TokenOutOfRange { id, size: self.tokens.len() })
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::OutOfVocabulary(w.to_string())))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let words = ids.iter().map(|&id| self.token(id)).collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// One token per line; the line number is the id.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Vocab> {
        let tokens = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::format("vocab file", "missing or reordered special tokens"));
        }
        let vocab = Self::from_tokens(tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(Error::format("vocab file", "duplicate token"));
        }
        Ok(vocab)
    }
}
