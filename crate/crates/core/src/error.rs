use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocabulary size cap {0} leaves no room beyond the 4 special tokens")]
    VocabCapTooSmall(usize),
    #[error("vocabulary must start with the special tokens <pad> <unk> <s> </s>")]
    MissingSpecials,
    #[error("duplicate vocabulary token {0:?}")]
    DuplicateToken(String),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("synthetic corpus needs {needed} vocabulary entries but the budget is {budget}")]
    BudgetTooSmall { needed: usize, budget: usize },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSynthSpec(String),
    #[error("every source position is padded")]
    AllPadded,
    #[error("target bag of words is empty")]
    EmptyTarget,
    #[error("target bag of words contains special id {0}")]
    SpecialInTarget(u32),
    #[error("bag size k must be at least 1")]
    ZeroBagSize,
    #[error("bag size {k} exceeds the support of the distribution ({support} ids with nonzero mass, {} short)", k - support)]
    BagExceedsSupport { k: usize, support: usize },
    #[error("ordered ids must be distinct and inside the support")]
    InvalidOrder,
    #[error("Plackett-Luce denominator underflow at position {0}")]
    Underflow(usize),
    #[error("variant {0} requires a bag of words")]
    MissingBag(&'static str),
    #[error("id {0} is not in the bag")]
    NotInBag(u32),
    #[error("id {0} is a special token and cannot enter a bag")]
    SpecialInBag(u32),
    #[error("id {id} is outside the vocabulary of size {size}")]
    OutOfVocab { id: u32, size: usize },
    #[error("loss term is not finite")]
    NonFinite,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("vocabulary mismatch: model has {model} entries, data was encoded with {data}")]
    VocabMismatch { model: usize, data: usize },
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("hypothesis list is empty")]
    EmptyHypotheses,
    #[error("{hypotheses} hypotheses but {references} reference sets")]
    LengthMismatch { hypotheses: usize, references: usize },
    #[error("reference set {0} is empty")]
    EmptyReferences(usize),
    #[error("no non-special tokens to score")]
    NothingToScore,
}
