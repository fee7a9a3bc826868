//! Grapheme vocabulary and text normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SYMBOLS: &str = " abcdefghijklmnopqrstuvwxyz'.,?!-";

/// Ordered symbol inventory; a symbol's id is its position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self {
            symbols: DEFAULT_SYMBOLS.chars().collect(),
        }
    }
}

impl Vocabulary {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::Config("vocabulary is empty".into()));
        }
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                return Err(Error::Config(format!("duplicate symbol {c:?} in vocabulary")));
            }
        }
        Ok(Self { symbols })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.symbols.iter().position(|&s| s == c)
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        self.symbols.get(id).copied()
    }

    /// Lowercases, maps any whitespace run to a single space, drops
    /// characters outside the vocabulary and trims the ends.
    pub fn normalize(&self, text: &str) -> String {
        let mut out = String::with_capacity(text.len());
        let mut pending_space = false;
        for c in text.chars().flat_map(char::to_lowercase) {
            if c.is_whitespace() {
                pending_space = !out.is_empty();
                continue;
            }
            if self.id(c).is_none() {
                continue;
            }
            if pending_space && self.id(' ').is_some() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        }
        out
    }

    /// Normalized symbols and their ids.
    pub fn encode(&self, text: &str) -> Result<(Vec<char>, Vec<usize>)> {
        let normalized = self.normalize(text);
        if normalized.is_empty() {
            return Err(Error::Empty(format!(
                "text {text:?} has no symbols from the vocabulary"
            )));
        }
        let chars: Vec<char> = normalized.chars().collect();
        let ids = chars
            .iter()
            .map(|&c| self.id(c).expect("normalized text only holds known symbols"))
            .collect();
        Ok((chars, ids))
    }
}
