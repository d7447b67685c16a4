use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::content::tokenize;
use super::vocab::{is_special, Vocabulary, WordId, EOS, UNK};
use crate::error::{Error, Result};

/// Sentence cap used for both datasets.
pub const DEFAULT_MAX_LEN: usize = 16;

/// A tokenized source sentence with one or more tokenized targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPair {
    pub source: Vec<String>,
    pub targets: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParaphraseInstance {
    pub source: Vec<WordId>,
    /// Each target ends with EOS.
    pub targets: Vec<Vec<WordId>>,
    /// Sorted content-word ids drawn from every target.
    pub target_bow: Vec<WordId>,
}

impl ParaphraseInstance {
    /// Encodes and truncates a raw pair. Returns `None` when the pair has no
    /// target or no content word on the target side.
    pub fn encode(raw: &RawPair, vocab: &Vocabulary, max_len: usize) -> Option<Self> {
        assert!(max_len >= 2, "max_len must leave room for a token and EOS");
        let mut source = vocab.encode(&raw.source);
        source.truncate(max_len);
        if source.is_empty() || raw.targets.is_empty() {
            return None;
        }
        let targets: Vec<Vec<WordId>> = raw
            .targets
            .iter()
            .map(|t| {
                let mut ids = vocab.encode(t);
                ids.truncate(max_len - 1);
                ids.push(EOS);
                ids
            })
            .collect();
        let bow: BTreeSet<WordId> = targets
            .iter()
            .flatten()
            .copied()
            .filter(|&id| id != UNK && !is_special(id) && vocab.is_content(id))
            .collect();
        if bow.is_empty() {
            return None;
        }
        Some(Self { source, targets, target_bow: bow.into_iter().collect() })
    }
}

/// Encodes every pair, returning the instances and the number skipped.
pub fn encode_pairs(raw: &[RawPair], vocab: &Vocabulary, max_len: usize) -> (Vec<ParaphraseInstance>, usize) {
    let mut out = Vec::with_capacity(raw.len());
    let mut skipped = 0;
    for r in raw {
        match ParaphraseInstance::encode(r, vocab, max_len) {
            Some(i) => out.push(i),
            None => skipped += 1,
        }
    }
    (out, skipped)
}

/// Input file layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// `source TAB target`, one pair per line.
    Quora,
    /// Groups of 5 caption lines separated by a blank line; the first caption is the source.
    Mscoco,
}

impl core::str::FromStr for DataFormat {
    type Err = String;

    fn from_str(s: &str) -> core::result::Result<Self, String> {
        match s {
            "quora" => Ok(Self::Quora),
            "mscoco" => Ok(Self::Mscoco),
            other => Err(alloc::format!("unknown data format {other:?} (expected quora or mscoco)")),
        }
    }
}

pub fn parse_pairs(text: &str, format: DataFormat) -> Result<Vec<RawPair>> {
    match format {
        DataFormat::Quora => parse_quora(text),
        DataFormat::Mscoco => parse_mscoco(text),
    }
}

pub fn parse_quora(text: &str) -> Result<Vec<RawPair>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let (Some(src), Some(tgt), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Malformed { line: line_no, reason: "expected exactly one TAB".to_string() });
        };
        let (source, target) = (tokenize(src), tokenize(tgt));
        if source.is_empty() || target.is_empty() {
            return Err(Error::Malformed { line: line_no, reason: "empty sentence".to_string() });
        }
        out.push(RawPair { source, targets: alloc::vec![target] });
    }
    Ok(out)
}

pub const MSCOCO_GROUP: usize = 5;

pub fn parse_mscoco(text: &str) -> Result<Vec<RawPair>> {
    let mut out = Vec::new();
    let mut group: Vec<Vec<String>> = Vec::new();
    let mut group_start = 1;
    let mut flush = |group: &mut Vec<Vec<String>>, start: usize| -> Result<()> {
        if group.is_empty() {
            return Ok(());
        }
        if group.len() != MSCOCO_GROUP {
            return Err(Error::Malformed {
                line: start,
                reason: alloc::format!("caption group has {} lines, expected {MSCOCO_GROUP}", group.len()),
            });
        }
        let mut captions = core::mem::take(group).into_iter();
        let source = captions.next().unwrap_or_default();
        out.push(RawPair { source, targets: captions.collect() });
        Ok(())
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            flush(&mut group, group_start)?;
            continue;
        }
        if group.is_empty() {
            group_start = i + 1;
        }
        let toks = tokenize(line);
        group.push(toks);
    }
    flush(&mut group, group_start)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::content::Stoplist;
    use alloc::vec;

    fn vocab_for(raw: &[RawPair]) -> Vocabulary {
        let sents: Vec<Vec<String>> =
            raw.iter().flat_map(|r| core::iter::once(r.source.clone()).chain(r.targets.iter().cloned())).collect();
        Vocabulary::build(&sents, 1000, &Stoplist::default()).unwrap()
    }

    #[test]
    fn quora_line_gives_content_bow() {
        let raw = parse_quora("how do i learn english\thow can i improve my english\n").unwrap();
        let v = vocab_for(&raw);
        let inst = ParaphraseInstance::encode(&raw[0], &v, 16).unwrap();
        let bow: Vec<&str> = inst.target_bow.iter().map(|&i| v.token(i)).collect();
        let mut expected = vec!["improve", "english"];
        expected.sort_by_key(|t| v.id(t));
        assert_eq!(bow, expected);
        assert_eq!(*inst.targets[0].last().unwrap(), EOS);
        assert_eq!(inst.targets.len(), 1);
    }

    #[test]
    fn malformed_quora_line_reports_line_number() {
        let err = parse_quora("a b\tc d\nno tab here\n").unwrap_err();
        assert_eq!(err, Error::Malformed { line: 2, reason: "expected exactly one TAB".into() });
    }

    #[test]
    fn mscoco_group_of_five() {
        let text = "a man rides a horse\na person riding a horse\nsomeone on a horse\na man on horseback\na rider and horse\n\n\
                    dog runs\ndog sprints\nhound runs\ndog races\npuppy runs\n";
        let raw = parse_mscoco(text).unwrap();
        assert_eq!(raw.len(), 2);
        assert_eq!(raw[0].targets.len(), 4);
        let v = vocab_for(&raw);
        let inst = ParaphraseInstance::encode(&raw[1], &v, 16).unwrap();
        let bow: BTreeSet<&str> = inst.target_bow.iter().map(|&i| v.token(i)).collect();
        assert_eq!(bow, ["dog", "sprints", "hound", "runs", "races", "puppy"].into_iter().collect());
    }

    #[test]
    fn mscoco_short_group_is_malformed() {
        let err = parse_mscoco("a\nb\nc\nd\ne\n\nf\ng\n").unwrap_err();
        assert!(matches!(err, Error::Malformed { line: 7, .. }));
    }

    #[test]
    fn long_sentences_are_truncated() {
        let long: Vec<String> = (0..20).map(|i| alloc::format!("w{i}")).collect();
        let raw = RawPair { source: long.clone(), targets: vec![long] };
        let v = vocab_for(core::slice::from_ref(&raw));
        let inst = ParaphraseInstance::encode(&raw, &v, 16).unwrap();
        assert_eq!(inst.source.len(), 16);
        assert_eq!(inst.targets[0].len(), 16);
    }

    #[test]
    fn all_stopword_target_is_skipped() {
        let raw = parse_quora("what is love\twhat is it\n").unwrap();
        let v = vocab_for(&raw);
        let (inst, skipped) = encode_pairs(&raw, &v, 16);
        assert!(inst.is_empty());
        assert_eq!(skipped, 1);
    }
}
