use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::content::{classify_content, Stoplist};
use crate::error::{Error, Result};

pub type WordId = u32;

pub const PAD: WordId = 0;
pub const UNK: WordId = 1;
pub const BOS: WordId = 2;
pub const EOS: WordId = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

#[inline]
pub fn is_special(id: WordId) -> bool {
    id <= EOS
}

/// Token/id bijection with per-id content-word flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, WordId>,
    content: Vec<bool>,
}

impl Vocabulary {
    /// Keeps the `max_size - 4` most frequent tokens; equal counts keep
    /// first-occurrence order.
    pub fn build<S: AsRef<str>>(sentences: &[Vec<S>], max_size: usize, stoplist: &Stoplist) -> Result<Self> {
        if max_size <= SPECIAL_TOKENS.len() {
            return Err(Error::VocabCapTooSmall(max_size));
        }
        if sentences.iter().all(|s| s.is_empty()) {
            return Err(Error::EmptyCorpus);
        }
        // token -> (count, first position)
        let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        let mut seen = 0usize;
        for tok in sentences.iter().flatten() {
            let tok = tok.as_ref();
            if SPECIAL_TOKENS.contains(&tok) {
                continue;
            }
            counts.entry(tok).or_insert((0, seen)).0 += 1;
            seen += 1;
        }
        let mut ranked: Vec<(&str, usize, usize)> = counts.into_iter().map(|(t, (c, f))| (t, c, f)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));
        ranked.truncate(max_size - SPECIAL_TOKENS.len());
        let tokens = SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens, stoplist)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, stoplist: &Stoplist) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s) {
            return Err(Error::MissingSpecials);
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as WordId).is_some() {
                return Err(Error::DuplicateToken(t.clone()));
            }
        }
        let content = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| !is_special(i as WordId) && classify_content(t, stoplist))
            .collect();
        Ok(Self { tokens, index, content })
    }

    /// Rebuilds a vocabulary with explicit content flags (as stored in a
    /// checkpoint), independent of any stoplist.
    pub fn with_content_flags(tokens: Vec<String>, content: Vec<bool>) -> Result<Self> {
        if content.len() != tokens.len() {
            return Err(Error::InvalidConfig(alloc::format!(
                "{} content flags for {} tokens",
                content.len(),
                tokens.len()
            )));
        }
        let mut v = Self::from_tokens(tokens, &Stoplist::from_words::<[&str; 0], &str>([]))?;
        v.content = content.into_iter().enumerate().map(|(i, c)| c && !is_special(i as WordId)).collect();
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> WordId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<WordId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: WordId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_content(&self, id: WordId) -> bool {
        self.content.get(id as usize).copied().unwrap_or(false)
    }

    pub fn content_flags(&self) -> &[bool] {
        &self.content
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<WordId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[WordId]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Space-joined tokens, stopping at the first EOS and skipping PAD/BOS.
    pub fn render(&self, ids: &[WordId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == EOS {
                break;
            }
            if id == PAD || id == BOS {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.token(id));
        }
        out
    }
}
