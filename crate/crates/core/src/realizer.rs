//! Surface realization: the attention decoder conditioned on the bag, the
//! optional bag-embedding and copy extensions, decoding, bag editing and
//! generation traces.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use crate::corpus::{is_special, IdGrid, WordId, BOS, EOS};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::{constant_weights, Model};
use crate::nn::LstmState;
use crate::planner::EncoderOutput;
use crate::sampler::SampledBag;
use crate::tensor::Matrix;

/// The bag handed to the decoder: ids per batch row and a column of weights,
/// one entry per id in row order.
#[derive(Clone, Debug)]
pub struct BagInput {
    pub ids: Vec<Vec<WordId>>,
    pub weights: Var,
}

impl BagInput {
    /// Bag with fixed (non-differentiable) weights.
    pub fn constant(tape: &mut Tape, bags: &[SampledBag]) -> Self {
        Self { ids: bags.iter().map(|b| b.ids.clone()).collect(), weights: constant_weights(tape, bags) }
    }
}

/// Everything the decoder reads besides its own previous outputs.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    pub batch: usize,
    init: Vec<LstmState>,
    /// `batch * slots` rows: source states first, then projected bag words.
    pub memory: Option<Var>,
    pub slots: usize,
    pub mask: Vec<bool>,
    /// Leading slots of every row that hold source positions.
    pub source_slots: usize,
    pub bag_avg: Option<Var>,
    pub bag_ids: Vec<Vec<WordId>>,
    /// `(row, slot, vocabulary id)` for every bag slot.
    copy: Vec<(u32, u32, u32)>,
}

impl DecoderMemory {
    /// Memory for the given batch rows (repetition allowed), as used by beam search.
    pub fn select(&self, tape: &mut Tape, rows: &[usize]) -> Self {
        let init = self
            .init
            .iter()
            .map(|s| LstmState { h: tape.gather_rows(s.h, rows), c: tape.gather_rows(s.c, rows) })
            .collect();
        let memory = self.memory.map(|m| {
            let idx: Vec<usize> = rows.iter().flat_map(|&r| (0..self.slots).map(move |s| r * self.slots + s)).collect();
            tape.gather_rows(m, &idx)
        });
        let mask = if self.mask.is_empty() {
            Vec::new()
        } else {
            rows.iter().flat_map(|&r| self.mask[r * self.slots..(r + 1) * self.slots].iter().copied()).collect()
        };
        let bag_avg = self.bag_avg.map(|a| tape.gather_rows(a, rows));
        let copy = rows
            .iter()
            .enumerate()
            .flat_map(|(o, &r)| self.copy.iter().filter(move |e| e.0 as usize == r).map(move |e| (o as u32, e.1, e.2)))
            .collect();
        Self {
            batch: rows.len(),
            init,
            memory,
            slots: self.slots,
            mask,
            source_slots: self.source_slots,
            bag_avg,
            bag_ids: rows.iter().map(|&r| self.bag_ids[r].clone()).collect(),
            copy,
        }
    }

    pub fn initial_state(&self) -> Vec<LstmState> {
        self.init.clone()
    }
}

/// `(1/k_b) sum_j w_j * emb(id_j)` per batch row.
pub fn bag_average(tape: &mut Tape, weighted: Var, ids: &[Vec<WordId>]) -> Var {
    let mut entries = Vec::new();
    let mut at = 0u32;
    for (b, row) in ids.iter().enumerate() {
        for _ in row {
            entries.push((b as u32, at, 1.0 / row.len() as f64));
            at += 1;
        }
    }
    tape.row_combine(weighted, ids.len(), entries)
}

/// Builds the decoder's initial state and attention memory.
pub fn prepare(tape: &mut Tape, model: &Model, enc: &EncoderOutput, bag: Option<&BagInput>) -> Result<DecoderMemory> {
    let variant = model.variant();
    let net = &model.net;
    let ps = &model.params;
    let batch = enc.batch;
    if variant.uses_bag() && bag.is_none() {
        return Err(Error::MissingBag(variant.name()));
    }
    let bag = bag.filter(|_| variant.uses_bag());

    let mut init = match net.init_code {
        Some(l) if variant.reads_source() => Some(l.forward(tape, ps, enc.code)),
        _ => None,
    };
    let (mut bag_avg, mut bag_mem) = (None, None);
    if let Some(bag) = bag {
        for &id in bag.ids.iter().flatten() {
            if id as usize >= model.vocab_size() {
                return Err(Error::OutOfVocab { id, size: model.vocab_size() });
            }
        }
        let flat: Vec<usize> = bag.ids.iter().flatten().map(|&i| i as usize).collect();
        let emb = tape.param(ps, net.dec_emb);
        let e = tape.gather_rows(emb, &flat);
        let weighted = tape.mul_col(e, bag.weights);
        let avg = bag_average(tape, weighted, &bag.ids);
        let projected = net.init_bag.expect("bag variant").forward(tape, ps, avg);
        init = Some(match init {
            Some(c) => tape.add(c, projected),
            None => projected,
        });
        bag_avg = Some(avg);
        bag_mem = Some(net.mem_bag.expect("bag variant").forward(tape, ps, weighted));
    }
    let h0 = match init {
        Some(x) => x,
        None => tape.constant(Matrix::zeros(batch, net.dec.hidden())),
    };
    let bias = tape.param(ps, net.init_bias);
    let h0 = tape.add_row(h0, bias);
    let c0 = tape.constant(Matrix::zeros(batch, net.dec.hidden()));
    let init = net.dec.layers.iter().map(|_| LstmState { h: h0, c: c0 }).collect();

    let bag_ids: Vec<Vec<WordId>> = bag.map(|b| b.ids.clone()).unwrap_or_else(|| vec![Vec::new(); batch]);
    let mut memory = None;
    let mut mask = Vec::new();
    let mut copy = Vec::new();
    let source_slots = if variant.reads_source() { enc.steps } else { 0 };
    let bag_slots = bag_ids.iter().map(Vec::len).max().unwrap_or(0);
    let slots = source_slots + bag_slots;
    if variant.uses_attention() {
        let src_rows = enc.steps * batch;
        let stacked = match bag_mem {
            Some(m) if source_slots > 0 => tape.concat_rows(&[enc.states, m]),
            Some(m) => m,
            None => enc.states,
        };
        let offset = if source_slots > 0 { src_rows } else { 0 };
        let mut entries = Vec::new();
        mask = vec![false; batch * slots];
        let mut at = 0;
        for b in 0..batch {
            for t in 0..source_slots {
                if enc.valid(b, t) {
                    entries.push(((b * slots + t) as u32, enc.row(b, t) as u32, 1.0));
                    mask[b * slots + t] = true;
                }
            }
            for (j, &id) in bag_ids[b].iter().enumerate() {
                let slot = source_slots + j;
                entries.push(((b * slots + slot) as u32, (offset + at) as u32, 1.0));
                mask[b * slots + slot] = true;
                copy.push((b as u32, slot as u32, id));
                at += 1;
            }
        }
        memory = Some(tape.row_combine(stacked, batch * slots, entries));
    }
    Ok(DecoderMemory { batch, init, memory, slots, mask, source_slots, bag_avg, bag_ids, copy })
}

/// One decoder step's outputs.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub states: Vec<LstmState>,
    /// `batch x V` log-probabilities.
    pub logp: Var,
    /// `batch x slots` attention weights.
    pub attention: Option<Var>,
}

/// Mixes the vocabulary softmax with attention mass copied onto bag ids:
/// `p_gen * softmax(logits) + (1 - p_gen) * scatter(attention)`.
pub fn copy_distribution(tape: &mut Tape, logits: Var, attention: Var, p_gen: Var, copy: &[(u32, u32, u32)]) -> Var {
    let vocab = tape.value(logits).cols();
    let p_vocab = tape.softmax(logits);
    let copied = tape.scatter_cols(attention, vocab, copy.to_vec());
    let neg = tape.scale(p_gen, -1.0);
    let closed = tape.shift(neg, 1.0);
    let a = tape.mul_col(p_vocab, p_gen);
    let b = tape.mul_col(copied, closed);
    tape.add(a, b)
}

pub fn step(tape: &mut Tape, model: &Model, mem: &DecoderMemory, prev: &[WordId], states: &[LstmState]) -> StepOutput {
    let net = &model.net;
    let ps = &model.params;
    let emb = tape.param(ps, net.dec_emb);
    let ids: Vec<usize> = prev.iter().map(|&i| i as usize).collect();
    let mut x = tape.gather_rows(emb, &ids);
    if model.config().bow_emb {
        let avg = mem.bag_avg.expect("bow_emb needs a bag");
        x = tape.concat_cols(&[x, avg]);
    }
    let states = net.dec.step(tape, ps, x, states);
    let s = states.last().expect("decoder has layers").h;
    let (o, attention) = match (net.attn, mem.memory) {
        (Some(w), Some(memory)) => {
            let w = tape.param(ps, w);
            let q = tape.matmul(s, w);
            let scores = tape.row_dot(q, memory, mem.slots);
            let a = tape.masked_softmax(scores, &mem.mask);
            let ctx = tape.row_mix(a, memory);
            let joined = tape.concat_cols(&[s, ctx]);
            let o = net.combine.forward(tape, ps, joined);
            (tape.tanh(o), Some(a))
        }
        _ => {
            let o = net.combine.forward(tape, ps, s);
            (tape.tanh(o), None)
        }
    };
    let logits = net.out.forward(tape, ps, o);
    let logp = match (net.gate, attention) {
        (Some(gate), Some(a)) => {
            let g = gate.forward(tape, ps, o);
            let p_gen = tape.sigmoid(g);
            let dist = copy_distribution(tape, logits, a, p_gen, &mem.copy);
            tape.log(dist)
        }
        _ => tape.log_softmax(logits),
    };
    StepOutput { states, logp, attention }
}

/// Teacher-forced decoding. Returns the per-step log-probabilities and the
/// cross-entropy averaged over unpadded target tokens.
pub fn teacher_forced(tape: &mut Tape, model: &Model, mem: &DecoderMemory, target: &IdGrid) -> (Vec<Var>, Var) {
    let mut states = mem.initial_state();
    let mut prev = vec![BOS; mem.batch];
    let mut steps = Vec::with_capacity(target.cols);
    let mut picked = Vec::new();
    let mut count = 0usize;
    for t in 0..target.cols {
        let out = step(tape, model, mem, &prev, &states);
        let at: Vec<(u32, u32)> =
            (0..mem.batch).filter(|&b| target.valid(b, t)).map(|b| (b as u32, target.id(b, t))).collect();
        count += at.len();
        let p = tape.pick(out.logp, at);
        let p = tape.sum(p);
        picked.push(p);
        steps.push(out.logp);
        states = out.states;
        prev = (0..mem.batch).map(|b| if target.valid(b, t) { target.id(b, t) } else { EOS }).collect();
    }
    let mut total = picked[0];
    for &p in &picked[1..] {
        total = tape.add(total, p);
    }
    let loss = tape.scale(total, -1.0 / count.max(1) as f64);
    (steps, loss)
}

/// `L_S2S' + lambda * L_BOW`, rejecting non-finite terms.
pub fn total_loss(l_s2s: f64, l_bow: f64, lambda_bow: f64) -> Result<f64> {
    if !(l_s2s.is_finite() && l_bow.is_finite() && lambda_bow.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(l_s2s + lambda_bow * l_bow)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

impl Strategy {
    pub fn from_width(width: usize) -> Self {
        if width <= 1 {
            Strategy::Greedy
        } else {
            Strategy::Beam(width)
        }
    }
}

/// A decoded sentence with the attention rows that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    /// Emitted ids, without the final EOS.
    pub tokens: Vec<WordId>,
    /// Per emitted step, attention over the row's unmasked memory slots
    /// (source positions first, then bag words).
    pub attention: Vec<Vec<f64>>,
    /// How many leading entries of each attention row belong to the source.
    pub source_slots: usize,
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| if v > am { (i, v) } else { (ai, am) }).0
}

fn attention_row(tape: &Tape, mem: &DecoderMemory, a: Option<Var>, b: usize) -> Vec<f64> {
    match a {
        Some(a) => {
            let row = tape.value(a).row(b);
            (0..mem.slots).filter(|&s| mem.mask[b * mem.slots + s]).map(|s| row[s]).collect()
        }
        None => Vec::new(),
    }
}

fn source_count(mem: &DecoderMemory, b: usize) -> usize {
    if mem.memory.is_none() {
        return 0;
    }
    (0..mem.source_slots).filter(|&s| mem.mask[b * mem.slots + s]).count()
}

/// Decodes every row of `mem` for at most `max_len` tokens.
pub fn generate(tape: &mut Tape, model: &Model, mem: &DecoderMemory, max_len: usize, strategy: Strategy) -> Vec<Generated> {
    match strategy {
        Strategy::Greedy => greedy(tape, model, mem, max_len),
        Strategy::Beam(w) => (0..mem.batch)
            .map(|b| {
                let one = mem.select(tape, &[b]);
                beam(tape, model, &one, max_len, w.max(1))
            })
            .collect(),
    }
}

fn greedy(tape: &mut Tape, model: &Model, mem: &DecoderMemory, max_len: usize) -> Vec<Generated> {
    let mut out: Vec<Generated> = (0..mem.batch)
        .map(|b| Generated { tokens: Vec::new(), attention: Vec::new(), source_slots: source_count(mem, b) })
        .collect();
    let mut done = vec![false; mem.batch];
    let mut states = mem.initial_state();
    let mut prev = vec![BOS; mem.batch];
    for _ in 0..max_len {
        let s = step(tape, model, mem, &prev, &states);
        for b in 0..mem.batch {
            if done[b] {
                continue;
            }
            let id = argmax(tape.value(s.logp).row(b)) as WordId;
            if id == EOS {
                done[b] = true;
            } else {
                out[b].tokens.push(id);
                out[b].attention.push(attention_row(tape, mem, s.attention, b));
            }
            prev[b] = id;
        }
        if done.iter().all(|&d| d) {
            break;
        }
        states = s.states;
    }
    out
}

struct Hyp {
    tokens: Vec<WordId>,
    attention: Vec<Vec<f64>>,
    score: f64,
}

/// Beam search over one memory row; hypotheses are ranked by summed
/// log-probability and finalized by score divided by scored tokens.
fn beam(tape: &mut Tape, model: &Model, mem: &DecoderMemory, max_len: usize, width: usize) -> Generated {
    let source_slots = source_count(mem, 0);
    let mut live = vec![Hyp { tokens: Vec::new(), attention: Vec::new(), score: 0.0 }];
    let mut finished: Vec<(f64, Hyp)> = Vec::new();
    let mut row_mem = mem.select(tape, &[0]);
    let mut states = row_mem.initial_state();
    for t in 0..max_len {
        let prev: Vec<WordId> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let s = step(tape, model, &row_mem, &prev, &states);
        let logp = tape.value(s.logp);
        let mut cand: Vec<(f64, usize, WordId)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            for (id, &lp) in logp.row(i).iter().enumerate() {
                cand.push((h.score + lp, i, id as WordId));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::new();
        let mut parents = Vec::new();
        for &(score, i, id) in cand.iter().take(width) {
            let mut attention = live[i].attention.clone();
            let mut tokens = live[i].tokens.clone();
            if id == EOS {
                finished.push((score / (t + 1) as f64, Hyp { tokens, attention, score }));
            } else {
                attention.push(attention_row(tape, &row_mem, s.attention, i));
                tokens.push(id);
                next.push(Hyp { tokens, attention, score });
                parents.push(i);
            }
        }
        if next.is_empty() || finished.len() >= width {
            live = next;
            break;
        }
        states = s.states.iter().map(|st| LstmState { h: tape.gather_rows(st.h, &parents), c: tape.gather_rows(st.c, &parents) }).collect();
        row_mem = mem.select(tape, &vec![0; parents.len()]);
        live = next;
    }
    for h in live {
        let n = h.tokens.len().max(1);
        finished.push((h.score / n as f64, h));
    }
    // Stable: earlier-finalized hypotheses win ties.
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(i, a), (j, b)| a.0.total_cmp(&b.0).then(j.cmp(i)))
        .map(|(_, (_, h))| h)
        .expect("beam keeps at least one hypothesis");
    Generated { tokens: best.tokens, attention: best.attention, source_slots }
}

/// Encodes `source`, builds bags with fixed weights and decodes.
pub fn realize(model: &Model, source: &IdGrid, bags: Option<&[SampledBag]>, max_len: usize, strategy: Strategy) -> Result<Vec<Generated>> {
    let mut tape = Tape::new();
    let enc = crate::planner::encode(&mut tape, model, source);
    let input = bags.map(|b| BagInput::constant(&mut tape, b));
    let mem = prepare(&mut tape, model, &enc, input.as_ref())?;
    Ok(generate(&mut tape, model, &mem, max_len, strategy))
}

/// Removes `remove`, then appends each new id in `add` with the mean surviving
/// weight (or `1/k` when nothing survives).
pub fn edit_bag(bag: &SampledBag, add: &[WordId], remove: &[WordId], vocab_size: usize) -> Result<SampledBag> {
    if let Some(&id) = remove.iter().find(|id| !bag.contains(**id)) {
        return Err(Error::NotInBag(id));
    }
    for &id in add {
        if id as usize >= vocab_size {
            return Err(Error::OutOfVocab { id, size: vocab_size });
        }
        if is_special(id) {
            return Err(Error::SpecialInBag(id));
        }
    }
    let mut ids = Vec::new();
    let mut weights = Vec::new();
    for (&id, &w) in bag.ids.iter().zip(&bag.weights) {
        if !remove.contains(&id) {
            ids.push(id);
            weights.push(w);
        }
    }
    let fill = if weights.is_empty() {
        1.0 / bag.ids.len().max(1) as f64
    } else {
        weights.iter().sum::<f64>() / weights.len() as f64
    };
    for &id in add {
        if !ids.contains(&id) {
            ids.push(id);
            weights.push(fill);
        }
    }
    Ok(SampledBag { ids, weights, noise: bag.noise.clone(), mode: bag.mode })
}

/// One source word's neighbor slots: top entries of each head.
#[derive(Clone, Debug, PartialEq)]
pub struct WordNeighbors {
    pub word: String,
    pub heads: Vec<Vec<(String, f64)>>,
}

/// The three stages of one generation: neighbors, bag, decoded sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub source: Vec<String>,
    pub neighbors: Vec<WordNeighbors>,
    pub bag: Vec<(String, f64)>,
    pub output: Vec<String>,
    /// Whether each output token is a bag word.
    pub from_bag: Vec<bool>,
    /// Per output token: attention over the source positions, then the bag words.
    pub attention: Vec<Vec<f64>>,
    pub source_slots: usize,
}

impl GenerationTrace {
    /// Stable text record, terminated by a blank line:
    ///
    /// ```text
    /// source  w1 w2 ...
    /// neighbors w1  | a:0.4100 b:0.2000 | ...
    /// bag  word:weight ...
    /// output  tok tok* ...      (* marks bag words)
    /// attention 0  src 0.1000 0.2000 | bag 0.7000
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "source\t{}", self.source.join(" "));
        for n in &self.neighbors {
            let _ = write!(s, "neighbors\t{}", n.word);
            for h in &n.heads {
                let cells: Vec<String> = h.iter().map(|(w, p)| format!("{w}:{p:.4}")).collect();
                let _ = write!(s, "\t| {}", cells.join(" "));
            }
            s.push('\n');
        }
        let bag: Vec<String> = self.bag.iter().map(|(w, p)| format!("{w}:{p:.4}")).collect();
        let _ = writeln!(s, "bag\t{}", bag.join(" "));
        let out: Vec<String> =
            self.output.iter().zip(&self.from_bag).map(|(w, &b)| if b { format!("{w}*") } else { w.clone() }).collect();
        let _ = writeln!(s, "output\t{}", out.join(" "));
        for (t, row) in self.attention.iter().enumerate() {
            let cut = self.source_slots.min(row.len());
            let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
            let _ = writeln!(s, "attention\t{t}\tsrc {}\t| bag {}", fmt(&row[..cut]), fmt(&row[cut..]));
        }
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};
    use crate::corpus::Batch;
    use crate::graph::ParamStore;
    use crate::sampler::SamplingMode;

    fn bag(ids: &[u32], w: &[f64]) -> SampledBag {
        SampledBag { ids: ids.to_vec(), weights: w.to_vec(), noise: Vec::new(), mode: SamplingMode::Deterministic }
    }

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig { variant, emb_dim: 6, hidden_dim: 6, neighbors: 2, bag_size: 3, ..ModelConfig::default() }
    }

    fn toy_batch() -> Batch {
        Batch {
            indices: vec![0, 1],
            source: IdGrid::from_rows(&[&[4, 5, 6], &[7, 8]]),
            target: IdGrid::from_rows(&[&[5, 9, EOS], &[10, EOS]]),
            target_bow: vec![vec![5, 9], vec![10]],
        }
    }

    #[test]
    fn total_loss_cases() {
        assert_eq!(total_loss(2.0, 3.0, 1.0).unwrap(), 5.0);
        assert_eq!(total_loss(2.0, 3.0, 0.0).unwrap(), 2.0);
        assert_eq!(total_loss(0.0, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(total_loss(f64::NAN, 0.0, 1.0), Err(Error::NonFinite));
    }

    #[test]
    fn edit_bag_rules() {
        let b = bag(&[4, 5, 6], &[0.2, 0.4, 0.6]);
        assert_eq!(edit_bag(&b, &[], &[], 20).unwrap(), b);
        let e = edit_bag(&b, &[9], &[5], 20).unwrap();
        assert_eq!(e.ids, [4, 6, 9]);
        assert!((e.weights[2] - 0.4).abs() < 1e-12);
        let e = edit_bag(&b, &[11], &[4, 5, 6], 20).unwrap();
        assert_eq!(e.ids, [11]);
        assert!((e.weights[0] - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(edit_bag(&b, &[], &[7], 20), Err(Error::NotInBag(7)));
        assert_eq!(edit_bag(&b, &[EOS], &[], 20), Err(Error::SpecialInBag(EOS)));
        assert_eq!(edit_bag(&b, &[30], &[], 20), Err(Error::OutOfVocab { id: 30, size: 20 }));
        assert_eq!(edit_bag(&b, &[4], &[], 20).unwrap().ids, [4, 5, 6]);
    }

    #[test]
    fn bag_average_is_linear_in_weights() {
        let mut ps = ParamStore::new();
        let emb = ps.add("e", Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let run = |w: Vec<f64>, ids: Vec<Vec<u32>>| {
            let mut tape = Tape::new();
            let e = tape.param(&ps, emb);
            let flat: Vec<usize> = ids.iter().flatten().map(|&i| i as usize).collect();
            let rows = tape.gather_rows(e, &flat);
            let wv = tape.constant(Matrix::from_vec(w.len(), 1, w));
            let weighted = tape.mul_col(rows, wv);
            let a = bag_average(&mut tape, weighted, &ids);
            tape.value(a).clone()
        };
        assert_eq!(run(vec![1.0], vec![vec![1]]).data(), [3.0, 4.0]);
        assert_eq!(run(vec![0.0, 0.0], vec![vec![0, 2]]).data(), [0.0, 0.0]);
        let one = run(vec![0.3, 0.5], vec![vec![0, 2]]);
        let two = run(vec![0.6, 1.0], vec![vec![0, 2]]);
        assert!(one.data().iter().zip(two.data()).all(|(a, b)| (2.0 * a - b).abs() < 1e-12));
    }

    #[test]
    fn copy_distribution_limits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Matrix::row_vector(vec![0.1, 0.7, -0.3, 1.2, 0.0, 0.4]));
        let attn = tape.constant(Matrix::row_vector(vec![0.0, 1.0]));
        let copy = [(0, 0, 4), (0, 1, 5)];
        let open = tape.constant(Matrix::scalar(0.0));
        let d = copy_distribution(&mut tape, logits, attn, open, &copy);
        assert_eq!(tape.value(d).row(0)[5], 1.0);
        let closed = tape.constant(Matrix::scalar(1.0));
        let d = copy_distribution(&mut tape, logits, attn, closed, &copy);
        let sm = crate::graph::softmax_rows(tape.value(logits), None);
        assert_eq!(tape.value(d).data(), sm.data());
        let half = tape.constant(Matrix::scalar(0.37));
        let attn = tape.constant(Matrix::row_vector(vec![0.25, 0.75]));
        let d = copy_distribution(&mut tape, logits, attn, half, &copy);
        assert!((tape.value(d).sum() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn missing_bag_is_an_error() {
        let model = Model::new(&tiny(Variant::LbowTopk), 12, 1).unwrap();
        let mut tape = Tape::new();
        let enc = crate::planner::encode(&mut tape, &model, &toy_batch().source);
        assert_eq!(prepare(&mut tape, &model, &enc, None).err(), Some(Error::MissingBag("lbow_topk")));
    }

    #[test]
    fn bow_emb_widens_decoder_input() {
        let mut c = tiny(Variant::LbowTopk);
        c.bow_emb = true;
        let model = Model::new(&c, 12, 1).unwrap();
        let w = model.params.id("dec.lstm.l0.w").unwrap();
        assert_eq!(model.params.get(w).rows(), 2 * 6 + 6);
        let forward = model.forward(&mut Tape::new(), &toy_batch(), None, 1.0);
        assert!(forward.is_ok());
    }

    #[test]
    fn every_variant_runs_with_finite_loss() {
        for v in Variant::ALL {
            let model = Model::new(&tiny(v), 12, 3).unwrap();
            let mut tape = Tape::new();
            let f = model.forward(&mut tape, &toy_batch(), None, 1.0).unwrap();
            assert!(tape.value(f.loss).item().is_finite(), "{v}");
            assert_eq!(f.bow.is_some(), v.uses_bag());
        }
        let mut c = tiny(Variant::LbowGumbel);
        c.copy = true;
        c.bow_emb = true;
        let model = Model::new(&c, 12, 3).unwrap();
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &toy_batch(), None, 1.0).unwrap();
        assert!(tape.value(f.loss).item().is_finite());
    }

    #[test]
    fn greedy_matches_beam_of_one_and_respects_max_len() {
        for v in [Variant::Seq2seq, Variant::LbowTopk] {
            let mut c = tiny(v);
            c.copy = v.uses_bag();
            let model = Model::new(&c, 12, 5).unwrap();
            let batch = toy_batch();
            let bags = [bag(&[5, 9, 4], &[0.5, 0.3, 0.2]), bag(&[10, 7, 8], &[0.4, 0.4, 0.2])];
            let bags = v.uses_bag().then_some(&bags[..]);
            for max_len in [1, 4, 9] {
                let g = realize(&model, &batch.source, bags, max_len, Strategy::Greedy).unwrap();
                let b = realize(&model, &batch.source, bags, max_len, Strategy::Beam(1)).unwrap();
                for (x, y) in g.iter().zip(&b) {
                    assert_eq!(x.tokens, y.tokens);
                    assert!(x.tokens.len() <= max_len);
                    for row in x.attention.iter().filter(|r| !r.is_empty()) {
                        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    }
                }
                let wide = realize(&model, &batch.source, bags, max_len, Strategy::Beam(3)).unwrap();
                assert!(wide.iter().all(|w| w.tokens.len() <= max_len));
            }
        }
    }

    #[test]
    fn always_eos_decoder_emits_nothing() {
        let mut model = Model::new(&tiny(Variant::Seq2seqAttn), 12, 1).unwrap();
        let b = model.params.id("dec.out.b").unwrap();
        model.params.get_mut(b).data_mut()[EOS as usize] = 1e3;
        let out = realize(&model, &toy_batch().source, None, 8, Strategy::Greedy).unwrap();
        assert!(out.iter().all(|g| g.tokens.is_empty()));
        let out = realize(&model, &toy_batch().source, None, 8, Strategy::Beam(3)).unwrap();
        assert!(out.iter().all(|g| g.tokens.is_empty()));
    }

    #[test]
    fn uniform_logits_give_log_vocab_loss() {
        // Zeroing the output layer makes every step uniform over V = 100.
        let mut model = Model::new(&tiny(Variant::Seq2seqAttn), 100, 1).unwrap();
        for name in ["dec.out.w", "dec.out.b"] {
            let id = model.params.id(name).unwrap();
            model.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let batch = Batch {
            indices: vec![0],
            source: IdGrid::from_rows(&[&[4, 5]]),
            target: IdGrid::from_rows(&[&[6, 7, 8, EOS]]),
            target_bow: vec![vec![6, 7, 8]],
        };
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &batch, None, 1.0).unwrap();
        assert!((tape.value(f.s2s).item() - 4.605170185988092).abs() < 1e-12);
    }

    #[test]
    fn bow_hard_blocks_decoder_gradients() {
        let model = Model::new(&tiny(Variant::BowHard), 12, 2).unwrap();
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &toy_batch(), None, 1.0).unwrap();
        let g = tape.backward(f.s2s, model.params.len());
        for id in model.params.ids() {
            if model.group(id) != crate::model::ParamGroup::Decoder {
                assert!(g.get(id).map_or(true, |m| m.data().iter().all(|&x| x == 0.0)), "{}", model.params.name(id));
            }
        }
        let g = tape.backward(f.bow.unwrap(), model.params.len());
        let heads = model.params.id("planner.heads.w").unwrap();
        assert!(g.get(heads).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn trace_text_is_stable() {
        let t = GenerationTrace {
            source: vec!["big".into(), "dog".into()],
            neighbors: vec![WordNeighbors { word: "big".into(), heads: vec![vec![("large".into(), 0.5)]] }],
            bag: vec![("large".into(), 0.25)],
            output: vec!["a".into(), "large".into()],
            from_bag: vec![false, true],
            attention: vec![vec![0.5, 0.25, 0.25]],
            source_slots: 2,
        };
        assert_eq!(
            t.to_text(),
            "source\tbig dog\nneighbors\tbig\t| large:0.5000\nbag\tlarge:0.2500\noutput\ta large*\n\
             attention\t0\tsrc 0.5000 0.2500\t| bag 0.2500\n\n"
        );
    }
}
