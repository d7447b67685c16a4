//! Plain-text data files: sentence pairs, vocabularies, stoplists and
//! neighbor tables.

use std::fs;
use std::io::Write;
use std::path::Path;

use lbow_core::corpus::{parse_pairs, DataFormat, RawPair, Stoplist, Vocabulary};
use lbow_core::realizer::WordNeighbors;

use crate::error::{Error, Result};

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(Error::io(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, text).map_err(Error::io(path))
}

pub fn load_pairs(path: &Path, format: DataFormat) -> Result<Vec<RawPair>> {
    let text = read_text(path)?;
    parse_pairs(&text, format).map_err(|source| Error::Data { path: path.into(), source })
}

/// The stoplist at `path`, or the built-in one.
pub fn load_stoplist(path: Option<&Path>) -> Result<Stoplist> {
    match path {
        Some(p) => Ok(Stoplist::parse(&read_text(p)?)),
        None => Ok(Stoplist::default()),
    }
}

/// Vocabulary file: one token per line, specials first.
pub fn read_vocab(path: &Path, stoplist: &Stoplist) -> Result<Vocabulary> {
    let tokens = read_text(path)?.lines().map(str::to_string).filter(|t| !t.is_empty()).collect();
    Vocabulary::from_tokens(tokens, stoplist).map_err(|source| Error::Data { path: path.into(), source })
}

pub fn vocab_text(vocab: &Vocabulary) -> String {
    let mut s = vocab.tokens().join("\n");
    s.push('\n');
    s
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    write_text(path, &vocab_text(vocab))
}

/// `word  head  rank  neighbor  probability`, one row per entry. Words
/// without neighbors (out of vocabulary) get no rows.
pub fn write_neighbor_table<W: Write>(mut out: W, table: &[WordNeighbors]) -> std::io::Result<()> {
    writeln!(out, "word\thead\trank\tneighbor\tprob")?;
    for entry in table {
        for (h, head) in entry.heads.iter().enumerate() {
            for (r, (w, p)) in head.iter().enumerate() {
                writeln!(out, "{}\t{}\t{}\t{w}\t{p:.6}", entry.word, h + 1, r + 1)?;
            }
        }
    }
    Ok(())
}

/// `word  partner` lines.
pub fn planted_text(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect()
}

pub fn read_planted(path: &Path) -> Result<Vec<(String, String)>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| match l.split_once('\t') {
            Some((a, b)) => Ok((a.to_string(), b.to_string())),
            None => Err(Error::Data {
                path: path.into(),
                source: lbow_core::Error::Malformed { line: i + 1, reason: "expected word<TAB>partner".into() },
            }),
        })
        .collect()
}
