//! Closed-world tokenizer and vocabulary.
//!
//! Tokens are lowercase, whitespace-split, with punctuation stripped. The
//! vocabulary is built once from the catalog plus every template literal and
//! button label, so page renderings never produce unseen tokens; anything
//! else maps to `<unk>`.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::ShopError;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

/// Lowercase, split on whitespace, strip punctuation. Empty pieces vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|piece| {
            let token: String = piece
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(|c| c.to_lowercase())
                .collect();
            if token.is_empty() {
                None
            } else {
                Some(token)
            }
        })
        .collect()
}

/// Ordered token table; `lookup` is a bijection onto `[0, len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Build from an iterator of raw token strings. Specials come first, the
    /// rest sorted and deduplicated so the mapping is independent of input
    /// order.
    pub fn build<I, T>(raw: I) -> Self
    where
        I: IntoIterator<Item = T>,
        T: AsRef<str>,
    {
        let specials = [PAD, UNK, EOS, SEP];
        let mut set = BTreeSet::new();
        for t in raw {
            let t = t.as_ref();
            if !specials.contains(&t) {
                set.insert(t.to_string());
            }
        }
        let mut tokens: Vec<String> = specials.iter().map(|s| s.to_string()).collect();
        tokens.extend(set);
        Vocabulary { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Token id, or `UNK_ID` for out-of-vocabulary strings.
    pub fn id(&self, token: &str) -> u32 {
        // Specials sit before the sorted tail, so a plain binary search over
        // the tail plus a special check covers everything.
        match token {
            PAD => PAD_ID,
            UNK => UNK_ID,
            EOS => EOS_ID,
            SEP => SEP_ID,
            _ => match self.tokens[4..].binary_search_by(|t| t.as_str().cmp(token)) {
                Ok(i) => (i + 4) as u32,
                Err(_) => UNK_ID,
            },
        }
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ShopError> {
        let mut f = std::fs::File::create(path)?;
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    /// One token per line, line index = id.
    pub fn load(path: &Path) -> Result<Self, ShopError> {
        let f = std::fs::File::open(path)?;
        let tokens: Result<Vec<String>, _> = BufReader::new(f).lines().collect();
        let tokens = tokens?;
        if tokens.len() < 4 || tokens[0] != PAD || tokens[1] != UNK || tokens[2] != EOS || tokens[3] != SEP {
            return Err(ShopError::Format("vocabulary file missing special tokens".into()));
        }
        Ok(Vocabulary { tokens })
    }
}

impl fmt::Display for Vocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vocabulary of {} tokens", self.tokens.len())
    }
}
