//! TOML run configuration files.
//!
//! ```toml
//! schema_version = 1
//!
//! [model]
//! variant = "lbow_topk"      # seq2seq | seq2seq_attn | lbow_topk | lbow_gumbel | bow_hard | cheating_bow
//! bow_emb = false
//! copy = false
//! emb_dim = 32
//! hidden_dim = 32
//! layers = 1
//! neighbors = 3              # l
//! bag_size = 10              # k
//! weighting = "perturbed"    # base | perturbed
//! sampling = "auto"          # auto | deterministic | gumbel
//!
//! [train]
//! lambda_bow = 1.0
//! learning_rate = 0.001
//! batch_size = 32
//! epochs = 30
//! max_len = 16
//! seed = 1
//! clip_norm = 5.0
//! epoch_eval_size = 64
//! beam_width = 1
//!
//! [paths]
//! data_format = "quora"      # quora | mscoco
//! train = "data/train.tsv"
//! test = "data/test.tsv"
//! vocab = "data/vocab.txt"
//! checkpoint_dir = "runs/ckpt"
//! report_dir = "runs/report"
//! ```

use std::path::Path;

use lbow_core::config::RunConfig;

use crate::error::{Error, Result};
use crate::files;

pub fn parse(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn to_string(config: &RunConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Config(e.to_string()))
}

pub fn load(path: &Path) -> Result<RunConfig> {
    parse(&files::read_text(path)?).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save(path: &Path, config: &RunConfig) -> Result<()> {
    files::write_text(path, &to_string(config)?)
}
