//! Dataset ingestion, vocabulary, content words, batching and the synthetic corpus.

mod batch;
mod content;
mod instance;
mod synth;
mod vocab;

pub use batch::{batches, sequential_batches, Batch, Batches, IdGrid};
pub use content::{classify_content, tokenize, Stoplist, DEFAULT_STOPLIST};
pub use instance::{
    encode_pairs, parse_mscoco, parse_pairs, parse_quora, DataFormat, ParaphraseInstance, RawPair, DEFAULT_MAX_LEN,
    MSCOCO_GROUP,
};
pub use synth::{make_synth_corpus, SlotKind, SynonymGroup, SynthCorpus, SynthSpec, TemplateFamily};
pub use vocab::{is_special, Vocabulary, WordId, BOS, EOS, PAD, SPECIAL_TOKENS, UNK};
