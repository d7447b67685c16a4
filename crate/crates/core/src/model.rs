//! Parameter layout and the batched training forward pass.
//!
//! Parameters are grouped by name prefix: `enc.` is the encoder, `planner.`
//! the neighbor heads and `dec.` the decoder (word embeddings for decoder
//! inputs and bag words, LSTM, attention, output layers).

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Variant};
use crate::corpus::{Batch, IdGrid, WordId};
use crate::error::{Error, Result};
use crate::graph::{ParamId, ParamStore, Tape, Var};
use crate::nn::{Init, Linear, Lstm, ParamSource};
use crate::planner::{self, EncoderOutput, PlannerOutput};
use crate::realizer::{self, BagInput};
use crate::sampler::{select_bag, straight_through_weights, SampledBag, SamplingMode};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Planner,
    Decoder,
}

#[derive(Clone, Debug)]
pub(crate) struct Net {
    pub enc_emb: ParamId,
    pub enc: Lstm,
    pub heads: Option<Linear>,
    pub dec_emb: ParamId,
    pub dec: Lstm,
    pub init_code: Option<Linear>,
    pub init_bag: Option<Linear>,
    pub init_bias: ParamId,
    pub mem_bag: Option<Linear>,
    pub attn: Option<ParamId>,
    pub combine: Linear,
    pub out: Linear,
    pub gate: Option<Linear>,
}

struct RandomInit(ChaCha8Rng);

impl ParamSource for RandomInit {
    fn take(&mut self, store: &mut ParamStore, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        let value = match init {
            Init::Zeros => Matrix::zeros(rows, cols),
            Init::Uniform(s) => Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| self.0.gen_range(-s..s)).collect()),
            Init::ForgetBias => {
                let mut m = Matrix::zeros(rows, cols);
                let h = cols / 4;
                m.data_mut()[h..2 * h].iter_mut().for_each(|v| *v = 1.0);
                m
            }
        };
        store.add(name, value)
    }
}

/// Moves arrays out of a loaded store, checking names and shapes.
struct FromStore<'a> {
    source: &'a ParamStore,
    error: Option<String>,
}

impl ParamSource for FromStore<'_> {
    fn take(&mut self, store: &mut ParamStore, name: &str, rows: usize, cols: usize, _: Init) -> ParamId {
        let value = match self.source.id(name).map(|id| self.source.get(id)) {
            Some(m) if m.shape() == (rows, cols) => m.clone(),
            Some(m) => {
                self.error.get_or_insert_with(|| format!("{name}: expected {rows}x{cols}, found {}x{}", m.rows(), m.cols()));
                Matrix::zeros(rows, cols)
            }
            None => {
                self.error.get_or_insert_with(|| format!("missing parameter {name}"));
                Matrix::zeros(rows, cols)
            }
        };
        store.add(name, value)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    vocab_size: usize,
    pub params: ParamStore,
    pub(crate) net: Net,
}

impl Model {
    /// Fresh parameters: uniform weights, zero biases, forget-gate bias 1.
    pub fn new(config: &ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut src = RandomInit(ChaCha8Rng::seed_from_u64(seed));
        let mut params = ParamStore::new();
        let net = Self::layout(config, vocab_size, &mut src, &mut params);
        Ok(Self { config: config.clone(), vocab_size, params, net })
    }

    /// Rebuilds a model around stored parameters.
    pub fn from_params(config: &ModelConfig, vocab_size: usize, stored: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut src = FromStore { source: stored, error: None };
        let mut params = ParamStore::new();
        let net = Self::layout(config, vocab_size, &mut src, &mut params);
        if let Some(e) = src.error {
            return Err(Error::InvalidConfig(e));
        }
        if params.len() != stored.len() {
            return Err(Error::InvalidConfig(format!(
                "stored parameters ({}) do not match the layout ({})",
                stored.len(),
                params.len()
            )));
        }
        Ok(Self { config: config.clone(), vocab_size, params, net })
    }

    fn layout(c: &ModelConfig, v: usize, src: &mut dyn ParamSource, s: &mut ParamStore) -> Net {
        let (e, h) = (c.emb_dim, c.hidden_dim);
        let bag = c.variant.uses_bag();
        let enc_emb = src.take(s, "enc.emb", v, e, Init::Uniform(1.0));
        let enc = Lstm::new(src, s, "enc.lstm", e, h, c.layers);
        let heads = bag.then(|| Linear::new(src, s, "planner.heads", h, c.neighbors * v, true));
        let dec_emb = src.take(s, "dec.emb", v, e, Init::Uniform(1.0));
        let dec_in = if c.bow_emb { 2 * e } else { e };
        let dec = Lstm::new(src, s, "dec.lstm", dec_in, h, c.layers);
        let init_code = c.variant.reads_source().then(|| Linear::new(src, s, "dec.init.code", h, h, false));
        let init_bag = bag.then(|| Linear::new(src, s, "dec.init.bag", e, h, false));
        let init_bias = src.take(s, "dec.init.b", 1, h, Init::Zeros);
        let mem_bag = bag.then(|| Linear::new(src, s, "dec.mem.bag", e, h, false));
        let attn = c.variant.uses_attention().then(|| {
            let scale = 1.0 / libm::sqrt(h as f64);
            src.take(s, "dec.attn.w", h, h, Init::Uniform(scale))
        });
        let comb_in = if c.variant.uses_attention() { 2 * h } else { h };
        let combine = Linear::new(src, s, "dec.combine", comb_in, h, true);
        let out = Linear::new(src, s, "dec.out", h, v, true);
        let gate = c.copy.then(|| Linear::new(src, s, "dec.copy.gate", h, 1, true));
        Net { enc_emb, enc, heads, dec_emb, dec, init_code, init_bag, init_bias, mem_bag, attn, combine, out, gate }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        let name = self.params.name(id);
        if name.starts_with("enc.") {
            ParamGroup::Encoder
        } else if name.starts_with("planner.") {
            ParamGroup::Planner
        } else {
            ParamGroup::Decoder
        }
    }

    /// Runs the encoder and, for bag variants, the planner.
    pub fn plan(&self, tape: &mut Tape, source: &IdGrid) -> (EncoderOutput, Option<PlannerOutput>) {
        let enc = planner::encode(tape, self, source);
        let plan = self.config.variant.uses_bag().then(|| planner::neighbor_heads(tape, self, &enc));
        (enc, plan)
    }

    /// Chooses one bag per batch row from the planner's mixture. `noise` is the
    /// frozen Gumbel matrix for gumbel sampling (`None` selects the top k);
    /// cheating bags are the true target bags with unit weights.
    pub fn choose_bags(
        &self,
        tape: &Tape,
        plan: &PlannerOutput,
        target_bow: Option<&[Vec<WordId>]>,
        noise: Option<&Matrix>,
    ) -> Result<Vec<SampledBag>> {
        if self.config.variant == Variant::CheatingBow {
            let bows = target_bow.ok_or(Error::MissingBag(Variant::CheatingBow.name()))?;
            return Ok(bows.iter().map(|bow| cheating_bag(bow)).collect());
        }
        let pi = tape.value(plan.pi);
        let noise = match self.config.sampling_mode() {
            SamplingMode::Gumbel => noise,
            SamplingMode::Deterministic => None,
        };
        (0..plan.batch)
            .map(|b| select_bag(pi.row(b), self.config.bag_size, noise.map(|g| g.row(b)), self.config.weighting))
            .collect()
    }

    /// Differentiable weights for `bags`; constants for cheating bags, and
    /// detached from the planner for `bow_hard`.
    pub fn bag_weights(&self, tape: &mut Tape, plan: &PlannerOutput, bags: &[SampledBag], noise: Option<&Matrix>) -> Var {
        match self.config.variant {
            Variant::CheatingBow => constant_weights(tape, bags),
            v => {
                let pi = if v == Variant::BowHard { tape.detach(plan.pi) } else { plan.pi };
                let noise = match self.config.sampling_mode() {
                    SamplingMode::Gumbel => noise,
                    SamplingMode::Deterministic => None,
                };
                straight_through_weights(tape, pi, bags, noise, self.config.weighting)
            }
        }
    }

    /// Teacher-forced pass over a batch: returns `L_S2S'` (or `L_S2S`), the
    /// bag loss for bag variants, and their weighted sum.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, noise: Option<&Matrix>, lambda_bow: f64) -> Result<BatchForward> {
        let (enc, plan) = self.plan(tape, &batch.source);
        let (bow, bags, bag_input) = match &plan {
            Some(p) => {
                let bow = planner::bow_loss_var(tape, p.pi, &batch.target_bow)?;
                let bags = self.choose_bags(tape, p, Some(&batch.target_bow), noise)?;
                let weights = self.bag_weights(tape, p, &bags, noise);
                let input = BagInput { ids: bags.iter().map(|b| b.ids.clone()).collect(), weights };
                (Some(bow), bags, Some(input))
            }
            None => (None, Vec::new(), None),
        };
        let memory = realizer::prepare(tape, self, &enc, bag_input.as_ref())?;
        let (_, s2s) = realizer::teacher_forced(tape, self, &memory, &batch.target);
        let loss = match bow {
            Some(bow) => {
                let scaled = tape.scale(bow, lambda_bow);
                tape.add(s2s, scaled)
            }
            None => s2s,
        };
        Ok(BatchForward { loss, s2s, bow, bags, enc, plan })
    }
}

pub struct BatchForward {
    pub loss: Var,
    pub s2s: Var,
    pub bow: Option<Var>,
    pub bags: Vec<SampledBag>,
    pub enc: EncoderOutput,
    pub plan: Option<PlannerOutput>,
}

pub(crate) fn cheating_bag(bow: &[u32]) -> SampledBag {
    SampledBag {
        ids: bow.to_vec(),
        weights: alloc::vec![1.0; bow.len()],
        noise: Vec::new(),
        mode: SamplingMode::Deterministic,
    }
}

pub(crate) fn constant_weights(tape: &mut Tape, bags: &[SampledBag]) -> Var {
    let w: Vec<f64> = bags.iter().flat_map(|b| b.weights.iter().copied()).collect();
    tape.constant(Matrix::from_vec(w.len(), 1, w))
}
