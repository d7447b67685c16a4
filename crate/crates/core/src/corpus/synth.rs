//! Synthetic paraphrase corpus with planted synonym groups.
//!
//! Each instance picks a template family, binds every slot of the family to a
//! synonym group, realizes the source with one form of the family and the
//! target with another (possibly the same) form, drawing every slot word
//! independently from its group. The planted groups are the ground truth for
//! neighbor learning.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::content::{classify_content, Stoplist};
use super::instance::{encode_pairs, ParaphraseInstance, RawPair, DEFAULT_MAX_LEN};
use super::vocab::{Vocabulary, SPECIAL_TOKENS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum SlotKind {
    Adjective,
    Noun,
    Verb,
    Adverb,
}

impl SlotKind {
    fn from_prefix(c: char) -> Option<Self> {
        match c {
            'a' => Some(Self::Adjective),
            'n' => Some(Self::Noun),
            'v' => Some(Self::Verb),
            'r' => Some(Self::Adverb),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynonymGroup {
    pub kind: SlotKind,
    pub words: Vec<String>,
}

/// Surface forms sharing one slot set. Slots are written `{n1}`, `{a1}`,
/// `{v1}`, `{r1}` (noun, adjective, verb, adverb).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateFamily {
    pub forms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub families: Vec<TemplateFamily>,
    pub groups: Vec<SynonymGroup>,
    pub vocab_budget: usize,
    pub count: usize,
    pub seed: u64,
}

const ADJECTIVES: &[&[&str]] = &[
    &["big", "large", "huge"],
    &["small", "tiny", "little"],
    &["fast", "quick", "rapid"],
    &["happy", "glad", "cheerful"],
    &["old", "elderly", "aged"],
    &["smart", "clever", "bright"],
    &["angry", "mad", "furious"],
    &["pretty", "beautiful", "lovely"],
    &["easy", "simple"],
    &["hard", "difficult", "tough"],
    &["rich", "wealthy"],
    &["quiet", "silent"],
];

const NOUNS: &[&[&str]] = &[
    &["dog", "hound", "puppy"],
    &["cat", "kitten"],
    &["car", "automobile", "vehicle"],
    &["house", "home"],
    &["man", "guy", "gentleman"],
    &["woman", "lady"],
    &["child", "kid"],
    &["road", "street"],
    &["city", "town"],
    &["teacher", "instructor"],
    &["doctor", "physician"],
    &["book", "novel"],
    &["picture", "photo", "image"],
    &["boat", "ship"],
    &["shop", "store"],
    &["friend", "pal", "buddy"],
    &["computer", "laptop"],
    &["meal", "dinner"],
    &["garden", "yard"],
    &["river", "stream"],
    &["phone", "telephone"],
];

const VERBS: &[&[&str]] = &[
    &["saw", "watched", "observed"],
    &["bought", "purchased"],
    &["liked", "enjoyed", "loved"],
    &["built", "constructed"],
    &["fixed", "repaired"],
    &["found", "discovered"],
    &["helped", "assisted"],
    &["visited", "toured"],
    &["chose", "picked", "selected"],
    &["painted", "drew"],
    &["cleaned", "washed"],
];

const ADVERBS: &[&[&str]] = &[
    &["quickly", "rapidly", "swiftly"],
    &["slowly", "gradually"],
    &["often", "frequently"],
    &["really", "truly"],
    &["happily", "gladly"],
    &["quietly", "silently"],
];

const FAMILIES: &[&[&str]] = &[
    &["the {a1} {n1} {v1} the {n2} .", "the {n2} was {v1} by the {a1} {n1} .", "a {a1} {n1} {v1} a {n2} ."],
    &[
        "the {n1} {r1} {v1} the {a1} {n2} .",
        "the {a1} {n2} was {r1} {v1} by the {n1} .",
        "the {n1} {v1} the {a1} {n2} {r1} .",
    ],
    &["who {v1} the {a1} {n1} ?", "the {a1} {n1} was {v1} by whom ?"],
    &["the {n1} and the {n2} {v1} the {n3} .", "the {n3} was {v1} by the {n1} and the {n2} ."],
    &["the {n1} {v1} a {a1} {n2} in the {n3} .", "in the {n3} , the {n1} {v1} a {a1} {n2} ."],
];

impl SynthSpec {
    /// The built-in English-like corpus (about 130 vocabulary entries).
    pub fn standard(count: usize, seed: u64) -> Self {
        let mut groups = Vec::new();
        for (kind, table) in [
            (SlotKind::Adjective, ADJECTIVES),
            (SlotKind::Noun, NOUNS),
            (SlotKind::Verb, VERBS),
            (SlotKind::Adverb, ADVERBS),
        ] {
            for words in table {
                groups.push(SynonymGroup { kind, words: words.iter().map(|w| w.to_string()).collect() });
            }
        }
        let families = FAMILIES
            .iter()
            .map(|forms| TemplateFamily { forms: forms.iter().map(|f| f.to_string()).collect() })
            .collect();
        Self { families, groups, vocab_budget: 160, count, seed }
    }
}

/// Generated corpus plus the planted synonym dictionary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SynthCorpus {
    pub pairs: Vec<RawPair>,
    pub vocab: Vocabulary,
    pub instances: Vec<ParaphraseInstance>,
    /// word -> the other members of its synonym group.
    pub neighbor_truth: BTreeMap<String, BTreeSet<String>>,
}

impl SynthCorpus {
    /// The pairs in quora layout (`source TAB target`).
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for p in &self.pairs {
            out.push_str(&p.source.join(" "));
            out.push('\t');
            out.push_str(&p.targets[0].join(" "));
            out.push('\n');
        }
        out
    }

    /// Ordered (word, planted partner) pairs.
    pub fn planted_pairs(&self) -> Vec<(String, String)> {
        self.neighbor_truth
            .iter()
            .flat_map(|(w, ns)| ns.iter().map(move |n| (w.clone(), n.clone())))
            .collect()
    }
}

enum Piece {
    Word(String),
    Slot(SlotKind, usize),
}

fn parse_form(form: &str) -> Result<Vec<Piece>> {
    form.split_whitespace()
        .map(|tok| {
            if let Some(inner) = tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
                let mut chars = inner.chars();
                let kind = chars.next().and_then(SlotKind::from_prefix);
                let num = chars.as_str().parse::<usize>().ok();
                match (kind, num) {
                    (Some(k), Some(n)) => Ok(Piece::Slot(k, n)),
                    _ => Err(Error::InvalidSynthSpec(alloc::format!("bad slot {tok:?}"))),
                }
            } else {
                Ok(Piece::Word(tok.to_string()))
            }
        })
        .collect()
}

fn slots_of(pieces: &[Piece]) -> BTreeSet<(SlotKind, usize)> {
    pieces
        .iter()
        .filter_map(|p| match p {
            Piece::Slot(k, n) => Some((*k, *n)),
            Piece::Word(_) => None,
        })
        .collect()
}

pub fn make_synth_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    if spec.vocab_budget < 30 {
        return Err(Error::InvalidSynthSpec(alloc::format!("vocabulary budget {} is below 30", spec.vocab_budget)));
    }
    if spec.families.is_empty() || spec.families.iter().any(|f| f.forms.is_empty()) {
        return Err(Error::InvalidSynthSpec("every template family needs at least one form".into()));
    }
    if spec.groups.iter().any(|g| g.words.is_empty()) {
        return Err(Error::InvalidSynthSpec("empty synonym group".into()));
    }
    let stoplist = Stoplist::default();

    let mut families: Vec<Vec<Vec<Piece>>> = Vec::new();
    for fam in &spec.families {
        let forms = fam.forms.iter().map(|f| parse_form(f)).collect::<Result<Vec<_>>>()?;
        let slots = slots_of(&forms[0]);
        if forms.iter().any(|f| slots_of(f) != slots) {
            return Err(Error::InvalidSynthSpec("forms of a family must share one slot set".into()));
        }
        for (kind, _) in &slots {
            let available = spec.groups.iter().filter(|g| g.kind == *kind).count();
            let wanted = slots.iter().filter(|(k, _)| k == kind).count();
            if available < wanted {
                return Err(Error::InvalidSynthSpec(alloc::format!("not enough {kind:?} groups for a template")));
            }
        }
        families.push(forms);
    }

    let mut all_tokens: BTreeSet<&str> = BTreeSet::new();
    for g in &spec.groups {
        for w in &g.words {
            if !classify_content(w, &stoplist) {
                return Err(Error::InvalidSynthSpec(alloc::format!("group word {w:?} is not a content word")));
            }
            all_tokens.insert(w);
        }
    }
    for fam in &families {
        for form in fam {
            for p in form {
                if let Piece::Word(w) = p {
                    if classify_content(w, &stoplist) {
                        return Err(Error::InvalidSynthSpec(alloc::format!("template word {w:?} is a content word")));
                    }
                    all_tokens.insert(w);
                }
            }
        }
    }
    let needed = all_tokens.len() + SPECIAL_TOKENS.len();
    if needed > spec.vocab_budget {
        return Err(Error::BudgetTooSmall { needed, budget: spec.vocab_budget });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pairs = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let fam = &families[rng.gen_range(0..families.len())];
        let slots = slots_of(&fam[0]);
        // slot -> (group index, source word index)
        let mut binding: BTreeMap<(SlotKind, usize), usize> = BTreeMap::new();
        for &(kind, n) in &slots {
            let used: BTreeSet<usize> = binding.values().copied().collect();
            let candidates: Vec<usize> =
                (0..spec.groups.len()).filter(|&g| spec.groups[g].kind == kind && !used.contains(&g)).collect();
            let g = *candidates.choose(&mut rng).expect("group availability checked above");
            binding.insert((kind, n), g);
        }
        let src_form = &fam[rng.gen_range(0..fam.len())];
        let tgt_form = &fam[rng.gen_range(0..fam.len())];
        let pick_words = |rng: &mut ChaCha8Rng| -> BTreeMap<(SlotKind, usize), String> {
            binding
                .iter()
                .map(|(&slot, &g)| {
                    let words = &spec.groups[g].words;
                    (slot, words[rng.gen_range(0..words.len())].clone())
                })
                .collect()
        };
        let src_words = pick_words(&mut rng);
        let tgt_words = pick_words(&mut rng);
        let realize = |form: &[Piece], words: &BTreeMap<(SlotKind, usize), String>| -> Vec<String> {
            form.iter()
                .map(|p| match p {
                    Piece::Word(w) => w.clone(),
                    Piece::Slot(k, n) => words[&(*k, *n)].clone(),
                })
                .collect()
        };
        pairs.push(RawPair {
            source: realize(src_form, &src_words),
            targets: alloc::vec![realize(tgt_form, &tgt_words)],
        });
    }

    let sentences: Vec<Vec<String>> =
        pairs.iter().flat_map(|p| core::iter::once(p.source.clone()).chain(p.targets.iter().cloned())).collect();
    let vocab = Vocabulary::build(&sentences, spec.vocab_budget, &stoplist)?;
    let (instances, _) = encode_pairs(&pairs, &vocab, DEFAULT_MAX_LEN);

    let mut neighbor_truth: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for g in &spec.groups {
        for w in &g.words {
            let others = g.words.iter().filter(|o| *o != w).cloned();
            neighbor_truth.entry(w.clone()).or_default().extend(others);
        }
    }
    Ok(SynthCorpus { pairs, vocab, instances, neighbor_truth })
}
