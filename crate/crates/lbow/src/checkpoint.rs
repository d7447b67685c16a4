//! Single-file checkpoint container.
//!
//! Layout: the 8-byte magic `LBOWCKPT`, a format version byte, a little-endian
//! `u64` header length, a JSON header, then every array as raw little-endian
//! `f64` values in the order listed by the header. Arrays are named
//! `param/<name>`, `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use lbow_core::config::RunConfig;
use lbow_core::corpus::Vocabulary;
use lbow_core::graph::ParamStore;
use lbow_core::model::Model;
use lbow_core::tensor::Matrix;
use lbow_core::train::{Adam, EpochReport, RngState, Trainer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LBOWCKPT";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    vocab: Vec<String>,
    content: Vec<bool>,
    epoch: usize,
    rng: RngState,
    adam: AdamHeader,
    history: Vec<EpochReport>,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to evaluate a model or continue training it exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub rng: RngState,
    pub optimizer: Adam,
    pub history: Vec<EpochReport>,
    pub model: Model,
}

impl Checkpoint {
    /// Snapshot of a trainer. `config` should be the run configuration the
    /// trainer was built from.
    pub fn capture(trainer: &Trainer, config: &RunConfig, vocab: &Vocabulary) -> Self {
        let mut config = config.clone();
        config.model = trainer.model.config().clone();
        config.train = trainer.config.clone();
        Self {
            config,
            vocab: vocab.clone(),
            epoch: trainer.epoch,
            rng: trainer.rng_state(),
            optimizer: trainer.optimizer.clone(),
            history: trainer.history.clone(),
            model: trainer.model.clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer::from_parts(self.model, &self.config.train, self.optimizer, self.epoch, self.rng, self.history)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let mut arrays = Vec::new();
        let mut values: Vec<&Matrix> = Vec::new();
        for (prefix, source) in [("param", None), ("adam.m", Some(&self.optimizer.m)), ("adam.v", Some(&self.optimizer.v))] {
            for (id, name, p) in params.iter() {
                let m = match source {
                    None => p,
                    Some(list) => list.get(id.0).ok_or_else(|| Error::Corrupt(format!("optimizer state missing {name}")))?,
                };
                arrays.push(ArrayEntry { name: format!("{prefix}/{name}"), rows: m.rows(), cols: m.cols() });
                values.push(m);
            }
        }
        let a = &self.optimizer;
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            content: self.vocab.content_flags().to_vec(),
            epoch: self.epoch,
            rng: self.rng,
            adam: AdamHeader { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, t: a.t },
            history: self.history.clone(),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = values.iter().map(|m| m.len()).sum();
        let mut out = Vec::with_capacity(17 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for m in values {
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        let rest = &bytes[MAGIC.len()..];
        let (&version, rest) = rest.split_first().ok_or_else(|| Error::Corrupt("truncated header".into()))?;
        if version != VERSION {
            return Err(Error::BadVersion(version));
        }
        if rest.len() < 8 {
            return Err(Error::Corrupt("truncated header".into()));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(Error::Corrupt("truncated header".into()));
        }
        let (json, mut data) = rest.split_at(len);
        let header: Header = serde_json::from_slice(json)?;
        header.config.validate()?;

        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for entry in &header.arrays {
            let n = entry.rows * entry.cols;
            if data.len() < 8 * n {
                return Err(Error::Corrupt(format!("array {} is truncated", entry.name)));
            }
            let (raw, tail) = data.split_at(8 * n);
            data = tail;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let matrix = Matrix::from_vec(entry.rows, entry.cols, values);
            match entry.name.split_once('/') {
                Some(("param", name)) => {
                    params.add(name, matrix);
                }
                Some(("adam.m", _)) => m.push(matrix),
                Some(("adam.v", _)) => v.push(matrix),
                _ => return Err(Error::Corrupt(format!("unknown array {}", entry.name))),
            }
        }
        if !data.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes", data.len())));
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Corrupt("optimizer state does not match the parameters".into()));
        }
        let vocab = Vocabulary::with_content_flags(header.vocab, header.content)?;
        let model = Model::from_params(&header.config.model, vocab.len(), &params)?;
        let a = header.adam;
        let optimizer = Adam { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps, t: a.t, m, v };
        Ok(Self { config: header.config, vocab, epoch: header.epoch, rng: header.rng, optimizer, history: header.history, model })
    }

    /// Writes through a temporary file so an interrupted save never clobbers
    /// the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lbow_core::config::ModelConfig;
    use lbow_core::corpus::{make_synth_corpus, SynthSpec};
    use lbow_core::train::Trainer;

    fn small() -> (Trainer, RunConfig, Vocabulary) {
        let c = make_synth_corpus(&SynthSpec::standard(40, 1)).unwrap();
        let mut config = RunConfig::default();
        config.model = ModelConfig { emb_dim: 6, hidden_dim: 6, bag_size: 3, ..ModelConfig::default() };
        config.train.batch_size = 8;
        let mut t = Trainer::new(&config.model, c.vocab.len(), &config.train).unwrap();
        t.train_epoch(&c.instances).unwrap();
        (t, config, c.vocab)
    }

    #[test]
    fn bytes_round_trip() {
        let (t, config, vocab) = small();
        let ck = Checkpoint::capture(&t, &config, &vocab);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.model.params, t.model.params);
        assert_eq!(back.optimizer, t.optimizer);
        assert_eq!(back.rng, t.rng_state());
        assert_eq!(back.vocab, vocab);
        assert_eq!(back.epoch, 1);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_damaged_files() {
        let (t, config, vocab) = small();
        let bytes = Checkpoint::capture(&t, &config, &vocab).to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(b"NOTACKPT\x01"), Err(Error::BadMagic)));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::BadVersion(2))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Corrupt(_))));
    }
}
