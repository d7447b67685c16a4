//! Optimization (Adam with global-norm clipping), the epoch loop with
//! resumable RNG state, and held-out evaluation.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{batches, sequential_batches, ParaphraseInstance, WordId, EOS};
use crate::error::{Error, Result};
use crate::graph::{Gradients, ParamStore, Tape};
use crate::metrics::{EvalRecord, MetricsReport};
use crate::model::Model;
use crate::planner::{count_modes, MODE_THRESHOLD};
use crate::realizer::{self, BagInput, Strategy};
use crate::sampler::{gumbel_matrix, select_bag, SamplingMode, Weighting};
use crate::tensor::Matrix;

/// Adam with the usual moment decays.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / bc1) / (libm::sqrt(*v / bc2) + self.eps);
            }
        }
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// Position of a ChaCha8 stream, enough to continue it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_bow_loss: Option<f64>,
    pub heldout_loss: Option<f64>,
    pub metrics: Option<MetricsReport>,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    rng: ChaCha8Rng,
    pub history: Vec<EpochReport>,
}

impl Trainer {
    /// Fresh model and optimizer; parameters and the data/noise stream both
    /// derive from `config.seed`.
    pub fn new(model_config: &crate::config::ModelConfig, vocab_size: usize, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(model_config, vocab_size, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        let optimizer = Adam::new(config.learning_rate, &model.params);
        Ok(Self { model, config: config.clone(), optimizer, epoch: 0, rng, history: Vec::new() })
    }

    pub fn from_parts(model: Model, config: &TrainConfig, optimizer: Adam, epoch: usize, rng: RngState, history: Vec<EpochReport>) -> Self {
        Self { model, config: config.clone(), optimizer, epoch, rng: rng.restore(), history }
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    fn check_vocab(&self, data: &[ParaphraseInstance]) -> Result<()> {
        check_vocab(&self.model, data)
    }

    /// One pass over `train`; returns the mean total and bag losses.
    pub fn train_epoch(&mut self, train: &[ParaphraseInstance]) -> Result<(f64, Option<f64>)> {
        self.check_vocab(train)?;
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let gumbel = self.model.variant().uses_bag() && self.model.config().sampling_mode() == SamplingMode::Gumbel;
        let v = self.model.vocab_size();
        let epoch_batches = batches(train, self.config.batch_size, &mut self.rng, true);
        let (mut total, mut bow_total, mut n) = (0.0, 0.0, 0usize);
        for (step, batch) in epoch_batches.enumerate() {
            let noise = gumbel.then(|| gumbel_matrix(batch.size(), v, &mut self.rng));
            let mut tape = Tape::new();
            let diverged = Error::Diverged { epoch: self.epoch + 1, step: step + 1 };
            // A softmax only loses support through numeric blowup.
            let f = match self.model.forward(&mut tape, &batch, noise.as_ref(), self.config.lambda_bow) {
                Err(Error::BagExceedsSupport { .. } | Error::Underflow(_) | Error::NonFinite) => return Err(diverged),
                other => other?,
            };
            let loss = tape.value(f.loss).item();
            if !loss.is_finite() {
                return Err(diverged);
            }
            let mut grads = tape.backward(f.loss, self.model.params.len());
            clip_global_norm(&mut grads, self.config.clip_norm);
            if !grads.all_finite() {
                return Err(diverged);
            }
            self.optimizer.step(&mut self.model.params, &grads);
            total += loss * batch.size() as f64;
            if let Some(b) = f.bow {
                bow_total += tape.value(b).item() * batch.size() as f64;
            }
            n += batch.size();
        }
        self.epoch += 1;
        let bow = self.model.variant().uses_bag().then(|| bow_total / n as f64);
        Ok((total / n as f64, bow))
    }

    /// Trains one epoch and evaluates on up to `epoch_eval_size` held-out instances.
    pub fn run_epoch(&mut self, train: &[ParaphraseInstance], heldout: &[ParaphraseInstance]) -> Result<EpochReport> {
        let (train_loss, train_bow_loss) = self.train_epoch(train)?;
        let take = heldout.len().min(self.config.epoch_eval_size);
        let (heldout_loss, metrics) = if take > 0 {
            let out = evaluate(&self.model, &heldout[..take], self.config.max_len, Strategy::from_width(self.config.beam_width))?;
            (Some(out.loss), Some(out.report))
        } else {
            (None, None)
        };
        let report = EpochReport { epoch: self.epoch, train_loss, train_bow_loss, heldout_loss, metrics };
        self.history.push(report.clone());
        Ok(report)
    }
}

pub fn check_vocab(model: &Model, data: &[ParaphraseInstance]) -> Result<()> {
    let max = data
        .iter()
        .flat_map(|i| i.source.iter().chain(i.targets.iter().flatten()))
        .copied()
        .max()
        .unwrap_or(0);
    if max as usize >= model.vocab_size() {
        return Err(Error::VocabMismatch { model: model.vocab_size(), data: max as usize + 1 });
    }
    Ok(())
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<EvalRecord>,
    /// Mean teacher-forced loss (total objective, deterministic bags).
    pub loss: f64,
}

/// Teacher-forced loss plus decoding of every instance. Bags are the top-k of
/// the planner (the true target bag for `cheating_bow`).
pub fn evaluate(model: &Model, data: &[ParaphraseInstance], max_len: usize, strategy: Strategy) -> Result<Evaluation> {
    let (records, loss_sum) = evaluate_records(model, data, max_len, strategy)?;
    Ok(Evaluation { report: MetricsReport::from_records(&records)?, records, loss: loss_sum / data.len() as f64 })
}

/// Per-instance records and the summed (not averaged) loss; separate chunks
/// can be evaluated independently and concatenated.
pub fn evaluate_records(model: &Model, data: &[ParaphraseInstance], max_len: usize, strategy: Strategy) -> Result<(Vec<EvalRecord>, f64)> {
    check_vocab(model, data)?;
    if data.is_empty() {
        return Err(Error::EmptyHypotheses);
    }
    let mut records = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    let k = model.config().bag_size;
    for batch in sequential_batches(data, 64) {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &batch, None, 1.0)?;
        loss_sum += tape.value(f.loss).item() * batch.size() as f64;

        let mut tape = Tape::new();
        let (enc, plan) = model.plan(&mut tape, &batch.source);
        let (bags, predicted, modes) = match &plan {
            Some(p) => {
                let bags = model.choose_bags(&tape, p, Some(&batch.target_bow), None)?;
                let pi = tape.value(p.pi);
                let predicted = (0..batch.size())
                    .map(|b| select_bag(pi.row(b), k, None, Weighting::Base).map(|s| s.ids))
                    .collect::<Result<Vec<_>>>()?;
                let modes = (0..batch.size()).map(|b| Some(count_modes(&p.neighbor_distributions(&tape, b), MODE_THRESHOLD))).collect();
                (Some(bags), predicted, modes)
            }
            None => (None, alloc::vec![Vec::new(); batch.size()], alloc::vec![None; batch.size()]),
        };
        let input = bags.as_ref().map(|b| BagInput::constant(&mut tape, b));
        let mem = realizer::prepare(&mut tape, model, &enc, input.as_ref())?;
        let out = realizer::generate(&mut tape, model, &mem, max_len, strategy);
        for (j, g) in out.into_iter().enumerate() {
            let inst = &data[batch.indices[j]];
            records.push(EvalRecord {
                hypothesis: g.tokens,
                references: inst.targets.iter().map(|t| strip_eos(t)).collect(),
                bag: bags.as_ref().map(|b| b[j].ids.clone()).unwrap_or_default(),
                predicted_bow: predicted[j].clone(),
                target_bow: inst.target_bow.clone(),
                modes: modes[j],
            });
        }
    }
    Ok((records, loss_sum))
}

fn strip_eos(t: &[WordId]) -> Vec<WordId> {
    t.iter().copied().take_while(|&w| w != EOS).collect()
}
