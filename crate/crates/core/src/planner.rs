//! Content planning: encoder, per-position neighbor distributions, their
//! uniform mixture over the vocabulary, the bag-of-words loss and the
//! mode-discovery diagnostic.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{is_special, IdGrid, WordId};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::Model;
use crate::tensor::Matrix;

/// Added to `pi` inside the bag loss logarithm.
pub const BOW_EPS: f64 = 1e-10;

/// Default threshold for counting a neighbor slice as a discovered mode.
pub const MODE_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Top-layer hidden states, time-major: row `t * batch + b`.
    pub states: Var,
    /// Hidden state after the last unpadded position of each row.
    pub code: Var,
    pub batch: usize,
    pub steps: usize,
    /// Batch-major source mask (`b * steps + t`).
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn row(&self, b: usize, t: usize) -> usize {
        t * self.batch + b
    }

    pub fn valid(&self, b: usize, t: usize) -> bool {
        self.mask[b * self.steps + t]
    }

    pub fn length(&self, b: usize) -> usize {
        (0..self.steps).filter(|&t| self.valid(b, t)).count()
    }

    /// Hidden states of the unpadded positions of row `b`.
    pub fn states_of(&self, tape: &Tape, b: usize) -> Matrix {
        let s = tape.value(self.states);
        let rows: Vec<f64> = (0..self.steps).filter(|&t| self.valid(b, t)).flat_map(|t| s.row(self.row(b, t)).to_vec()).collect();
        Matrix::from_vec(rows.len() / s.cols(), s.cols(), rows)
    }
}

/// Runs the encoder LSTM. Padded positions carry the previous state forward,
/// so they never change `code`.
pub fn encode(tape: &mut Tape, model: &Model, source: &IdGrid) -> EncoderOutput {
    let (batch, steps) = (source.rows, source.cols);
    let net = &model.net;
    let emb = tape.param(&model.params, net.enc_emb);
    let mut state = net.enc.zero_state(tape, batch);
    let mut tops = Vec::with_capacity(steps);
    for t in 0..steps {
        let ids: Vec<usize> = (0..batch).map(|b| source.id(b, t) as usize).collect();
        let x = tape.gather_rows(emb, &ids);
        let next = net.enc.step(tape, &model.params, x, &state);
        let live: Vec<bool> = (0..batch).map(|b| source.valid(b, t)).collect();
        state = if live.iter().all(|&l| l) {
            next
        } else {
            next.iter()
                .zip(&state)
                .map(|(n, o)| crate::nn::LstmState {
                    h: tape.blend(n.h, o.h, live.clone()),
                    c: tape.blend(n.c, o.c, live.clone()),
                })
                .collect()
        };
        tops.push(state.last().expect("at least one layer").h);
    }
    let states = tape.concat_rows(&tops);
    let code = *tops.last().expect("source has at least one position");
    EncoderOutput { states, code, batch, steps, mask: source.mask.clone() }
}

#[derive(Clone, Debug)]
pub struct PlannerOutput {
    /// One `positions x V` probability node per neighbor head.
    pub heads: Vec<Var>,
    /// `(batch row, time step)` of every unpadded position, row-major.
    pub positions: Vec<(usize, usize)>,
    /// `batch x V` mixture.
    pub pi: Var,
    pub batch: usize,
}

impl PlannerOutput {
    pub fn neighbor_distributions(&self, tape: &Tape, b: usize) -> NeighborDistributions {
        let rows: Vec<usize> = self.positions.iter().enumerate().filter(|(_, p)| p.0 == b).map(|(n, _)| n).collect();
        let vocab = tape.value(self.heads[0]).cols();
        let mut probs = Vec::with_capacity(rows.len() * self.heads.len() * vocab);
        for &n in &rows {
            for &h in &self.heads {
                probs.extend_from_slice(tape.value(h).row(n));
            }
        }
        NeighborDistributions::new(rows.len(), self.heads.len(), vocab, probs, vec![true; rows.len()])
    }

    pub fn bow_distribution(&self, tape: &Tape, b: usize) -> BowDistribution {
        let count = self.positions.iter().filter(|p| p.0 == b).count() * self.heads.len();
        BowDistribution { pi: tape.value(self.pi).row(b).to_vec(), effective_count: count }
    }
}

/// Uniform mixture of per-position head distributions. `owner[n]` is the batch
/// row of position `n`; every head has one row per position.
pub fn mix_heads(tape: &mut Tape, heads: &[Var], owner: &[usize], batch: usize) -> Var {
    let n = owner.len();
    let l = heads.len();
    let mut counts = vec![0usize; batch];
    owner.iter().for_each(|&b| counts[b] += 1);
    assert!(counts.iter().all(|&c| c > 0), "every batch row needs an unpadded position");
    let stacked = tape.concat_rows(heads);
    let mut entries = Vec::with_capacity(n * l);
    for j in 0..l {
        for (p, &b) in owner.iter().enumerate() {
            entries.push((b as u32, (j * n + p) as u32, 1.0 / (counts[b] * l) as f64));
        }
    }
    tape.row_combine(stacked, batch, entries)
}

/// Applies the `l` softmax heads to every unpadded encoder state and mixes them.
pub fn neighbor_heads(tape: &mut Tape, model: &Model, enc: &EncoderOutput) -> PlannerOutput {
    let heads_layer = model.net.heads.expect("planner heads exist for bag variants");
    let v = model.vocab_size();
    let l = model.config().neighbors;
    let mut positions = Vec::new();
    for b in 0..enc.batch {
        for t in 0..enc.steps {
            if enc.valid(b, t) {
                positions.push((b, t));
            }
        }
    }
    let rows: Vec<usize> = positions.iter().map(|&(b, t)| enc.row(b, t)).collect();
    let x = tape.gather_rows(enc.states, &rows);
    let logits = heads_layer.forward(tape, &model.params, x);
    let heads: Vec<Var> = (0..l)
        .map(|j| {
            let s = tape.slice_cols(logits, j * v, (j + 1) * v);
            tape.softmax(s)
        })
        .collect();
    let owner: Vec<usize> = positions.iter().map(|p| p.0).collect();
    let pi = mix_heads(tape, &heads, &owner, enc.batch);
    PlannerOutput { heads, positions, pi, batch: enc.batch }
}

fn check_target(target: &[WordId]) -> Result<()> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    match target.iter().find(|&&w| is_special(w)) {
        Some(&w) => Err(Error::SpecialInTarget(w)),
        None => Ok(()),
    }
}

/// Mean over the batch of `-sum_{w in target} log(pi[w] + eps)`.
pub fn bow_loss_var(tape: &mut Tape, pi: Var, target_bow: &[Vec<WordId>]) -> Result<Var> {
    target_bow.iter().try_for_each(|t| check_target(t))?;
    let shifted = tape.shift(pi, BOW_EPS);
    let logp = tape.log(shifted);
    let at = target_bow
        .iter()
        .enumerate()
        .flat_map(|(b, t)| t.iter().map(move |&w| (b as u32, w)))
        .collect();
    let picked = tape.pick(logp, at);
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / target_bow.len() as f64))
}

/// Per-position neighbor distributions of one sentence: `positions x l`
/// slices, each a distribution over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborDistributions {
    positions: usize,
    neighbors: usize,
    vocab: usize,
    probs: Vec<f64>,
    valid: Vec<bool>,
}

impl NeighborDistributions {
    pub fn new(positions: usize, neighbors: usize, vocab: usize, probs: Vec<f64>, valid: Vec<bool>) -> Self {
        assert_eq!(probs.len(), positions * neighbors * vocab);
        assert_eq!(valid.len(), positions);
        Self { positions, neighbors, vocab, probs, valid }
    }

    /// Softmax of `logits` laid out as `positions x neighbors x vocab`.
    pub fn from_logits(positions: usize, neighbors: usize, vocab: usize, logits: &[f64], valid: Vec<bool>) -> Self {
        let m = Matrix::from_vec(positions * neighbors, vocab, logits.to_vec());
        let p = crate::graph::softmax_rows(&m, None);
        Self::new(positions, neighbors, vocab, p.into_vec(), valid)
    }

    pub fn positions(&self) -> usize {
        self.positions
    }

    pub fn neighbors(&self) -> usize {
        self.neighbors
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn is_valid(&self, i: usize) -> bool {
        self.valid[i]
    }

    pub fn slice(&self, i: usize, j: usize) -> &[f64] {
        let start = (i * self.neighbors + j) * self.vocab;
        &self.probs[start..start + self.vocab]
    }

    /// Unpadded slices.
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.positions)
            .filter(|&i| self.valid[i])
            .flat_map(move |i| (0..self.neighbors).map(move |j| self.slice(i, j)))
    }

    /// Appends `extra` padded positions with arbitrary slice contents.
    pub fn with_padding(&self, extra: usize, filler: f64) -> Self {
        let mut probs = self.probs.clone();
        probs.extend(core::iter::repeat(filler).take(extra * self.neighbors * self.vocab));
        let mut valid = self.valid.clone();
        valid.extend(core::iter::repeat(false).take(extra));
        Self::new(self.positions + extra, self.neighbors, self.vocab, probs, valid)
    }
}

/// The mixed bag-of-words distribution of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct BowDistribution {
    pub pi: Vec<f64>,
    /// Number of unpadded `(position, neighbor)` slices averaged.
    pub effective_count: usize,
}

/// Average of the unpadded slices.
pub fn mix(nd: &NeighborDistributions) -> Result<BowDistribution> {
    let mut pi = vec![0.0; nd.vocab];
    let mut count = 0;
    for s in nd.slices() {
        pi.iter_mut().zip(s).for_each(|(p, q)| *p += q);
        count += 1;
    }
    if count == 0 {
        return Err(Error::AllPadded);
    }
    pi.iter_mut().for_each(|p| *p /= count as f64);
    Ok(BowDistribution { pi, effective_count: count })
}

/// `-sum_{w in target} log(pi[w] + eps)`. Depends only on the target entries.
pub fn bow_loss(bd: &BowDistribution, target: &[WordId]) -> Result<f64> {
    bow_loss_eps(bd, target, BOW_EPS)
}

pub fn bow_loss_eps(bd: &BowDistribution, target: &[WordId], eps: f64) -> Result<f64> {
    check_target(target)?;
    Ok(-target.iter().map(|&w| libm::log(bd.pi[w as usize] + eps)).sum::<f64>())
}

/// Number of distinct ids that are the argmax of some unpadded slice whose
/// maximum exceeds `threshold`.
pub fn count_modes(nd: &NeighborDistributions, threshold: f64) -> usize {
    let mut modes = BTreeSet::new();
    for s in nd.slices() {
        let (arg, max) = s
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &p)| if p > am { (i, p) } else { (ai, am) });
        if max > threshold {
            modes.insert(arg);
        }
    }
    modes.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_hot(v: usize, at: usize) -> Vec<f64> {
        let mut x = vec![0.0; v];
        x[at] = 1.0;
        x
    }

    #[test]
    fn single_slice_mix_is_identity() {
        let s = vec![0.2, 0.5, 0.3];
        let nd = NeighborDistributions::new(1, 1, 3, s.clone(), vec![true]);
        assert_eq!(mix(&nd).unwrap().pi, s);
    }

    #[test]
    fn two_one_hot_slices_average() {
        let mut probs = one_hot(3, 0);
        probs.extend(one_hot(3, 1));
        let nd = NeighborDistributions::new(2, 1, 3, probs, vec![true, true]);
        let bd = mix(&nd).unwrap();
        assert_eq!(bd.pi, [0.5, 0.5, 0.0]);
        assert_eq!(bd.effective_count, 2);
    }

    #[test]
    fn all_padded_is_an_error() {
        let nd = NeighborDistributions::new(1, 1, 2, vec![0.5, 0.5], vec![false]);
        assert_eq!(mix(&nd), Err(Error::AllPadded));
    }

    #[test]
    fn equal_logits_give_uniform_slices() {
        let nd = NeighborDistributions::from_logits(2, 1, 4, &[0.7; 8], vec![true, true]);
        assert!(nd.slices().flatten().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn bow_loss_closed_forms() {
        let bd = BowDistribution { pi: vec![0.25; 4], effective_count: 1 };
        let l = bow_loss_eps(&bd, &[4 - 4 + 0, 1].map(|x| x + 4).map(|x: u32| x - 4), 0.0);
        // ids 0 and 1 are special; use a vocabulary where targets are 4 and 5 instead.
        assert!(l.is_err());
        let bd = BowDistribution { pi: vec![0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25], effective_count: 1 };
        let l = bow_loss_eps(&bd, &[4, 5], 0.0).unwrap();
        assert!((l - 2.772588722239781).abs() < 1e-12);
        let mut pi = vec![0.0; 6];
        pi[4] = 1.0;
        assert_eq!(bow_loss_eps(&BowDistribution { pi, effective_count: 1 }, &[4], 0.0).unwrap(), 0.0);
        assert_eq!(bow_loss(&bd, &[]), Err(Error::EmptyTarget));
    }

    #[test]
    fn bow_loss_ignores_non_target_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw: Vec<f64> = (0..12).map(|_| rng.gen_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let pi: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let target = [5, 9];
        let before = bow_loss(&BowDistribution { pi: pi.clone(), effective_count: 1 }, &target).unwrap();
        let mut moved = pi.clone();
        let delta = moved[7] * 0.8;
        moved[7] -= delta;
        moved[10] += delta;
        let after = bow_loss(&BowDistribution { pi: moved, effective_count: 1 }, &target).unwrap();
        assert_eq!(before.to_bits(), after.to_bits());
    }

    #[test]
    fn count_modes_examples() {
        let nd = NeighborDistributions::new(1, 1, 100, vec![0.01; 100], vec![true]);
        assert_eq!(count_modes(&nd, MODE_THRESHOLD), 0);
        let nd = NeighborDistributions::new(1, 1, 10, one_hot(10, 7), vec![true]);
        assert_eq!(count_modes(&nd, MODE_THRESHOLD), 1);
        let mut a = vec![0.05; 10];
        a[7] = 0.55;
        let mut b = vec![0.0; 10];
        b[7] = 0.9;
        b[2] = 0.1;
        let probs = [a, b].concat();
        let nd = NeighborDistributions::new(2, 1, 10, probs, vec![true, true]);
        assert_eq!(count_modes(&nd, MODE_THRESHOLD), 1);
    }

    #[test]
    fn bow_loss_gradient_matches_finite_differences() {
        // V = 20, m = 3, l = 2: logits parameter laid out as (m x (l * V)).
        let (v, m, l) = (20, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut ps = ParamStore::new();
        let id = ps.add("logits", Matrix::from_vec(m, l * v, (0..m * l * v).map(|_| rng.gen_range(-2.0..2.0)).collect()));
        let target: Vec<Vec<WordId>> = vec![vec![4, 9, 13, 17]];
        let run = |ps: &ParamStore| {
            let mut tape = Tape::new();
            let x = tape.param(ps, id);
            let heads: Vec<Var> = (0..l)
                .map(|j| {
                    let s = tape.slice_cols(x, j * v, (j + 1) * v);
                    tape.softmax(s)
                })
                .collect();
            let pi = mix_heads(&mut tape, &heads, &[0, 0, 0], 1);
            let loss = bow_loss_var(&mut tape, pi, &target).unwrap();
            let g = tape.backward(loss, ps.len());
            (tape.value(loss).item(), g.get(id).cloned().unwrap())
        };
        let (_, grad) = run(&ps);
        let h = 1e-6;
        for k in 0..m * l * v {
            let orig = ps.get(id).data()[k];
            ps.get_mut(id).data_mut()[k] = orig + h;
            let plus = run(&ps).0;
            ps.get_mut(id).data_mut()[k] = orig - h;
            let minus = run(&ps).0;
            ps.get_mut(id).data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = grad.data()[k];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-8), "{k}: {an} vs {fd}");
        }
    }

    #[test]
    fn bow_loss_gradient_is_zero_off_target() {
        let mut ps = ParamStore::new();
        let id = ps.add("pi", Matrix::row_vector(vec![0.1, 0.1, 0.1, 0.1, 0.2, 0.2, 0.2]));
        let mut tape = Tape::new();
        let pi = tape.param(&ps, id);
        let loss = bow_loss_var(&mut tape, pi, &[vec![4, 6]]).unwrap();
        let g = tape.backward(loss, ps.len());
        let g = g.get(id).unwrap();
        for (i, &d) in g.data().iter().enumerate() {
            assert_eq!(d == 0.0, i != 4 && i != 6, "coordinate {i}");
        }
    }

    proptest! {
        #[test]
        fn mix_is_a_distribution_and_padding_invariant(
            logits in proptest::collection::vec(-5.0f64..5.0, 3 * 2 * 7),
            pad in 1usize..4,
        ) {
            let nd = NeighborDistributions::from_logits(3, 2, 7, &logits, vec![true; 3]);
            let bd = mix(&nd).unwrap();
            prop_assert!((bd.pi.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(bd.pi.iter().all(|&p| p >= 0.0));
            for s in nd.slices() {
                prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            let padded = nd.with_padding(pad, 0.9);
            prop_assert_eq!(mix(&padded).unwrap(), bd);
            prop_assert_eq!(count_modes(&padded, MODE_THRESHOLD), count_modes(&nd, MODE_THRESHOLD));
        }
    }
}
