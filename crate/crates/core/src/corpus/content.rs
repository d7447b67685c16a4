//! Content-word classification and tokenization.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use super::vocab::SPECIAL_TOKENS;

/// The stoplist shipped with the crate: determiners, pronouns, wh-words,
/// auxiliaries, prepositions and conjunctions.
pub const DEFAULT_STOPLIST: &str = include_str!("../../data/stoplist.txt");

/// Closed-class words that never count as content words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stoplist {
    words: BTreeSet<String>,
}

impl Default for Stoplist {
    fn default() -> Self {
        Self::parse(DEFAULT_STOPLIST)
    }
}

impl Stoplist {
    /// One token per line; blank lines are ignored.
    pub fn parse(text: &str) -> Self {
        let words = text.lines().map(str::trim).filter(|l| !l.is_empty()).map(|l| l.to_lowercase()).collect();
        Self { words }
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: Into<String>>(words: I) -> Self {
        Self { words: words.into_iter().map(Into::into).collect() }
    }

    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// False for stoplisted words, punctuation and special tokens.
pub fn classify_content(token: &str, stoplist: &Stoplist) -> bool {
    if token.is_empty() || SPECIAL_TOKENS.contains(&token) || stoplist.contains(token) {
        return false;
    }
    token.chars().any(char::is_alphanumeric)
}

/// Lowercases, splits punctuation into separate tokens and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
        } else if !ch.is_alphanumeric() && ch != '-' || ch == '-' && cur.is_empty() {
            if !cur.is_empty() {
                out.push(core::mem::take(&mut cur));
            }
            out.push(String::from(ch));
        } else {
            cur.extend(ch.to_lowercase());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}
