//! Gumbel top-k subset sampling.
//!
//! Perturbing `log pi` with independent Gumbel(0, 1) noise and keeping the `k`
//! largest entries draws an ordered `k`-subset without replacement, with the
//! sequential (Plackett-Luce) probability computed by [`plackett_luce_prob`].
//! Selection is discrete; gradients reach `pi` only through the bag weights
//! built by [`straight_through_weights`].

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::WordId;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Matrix;

const UNIFORM_CLAMP: f64 = 1e-20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Gumbel,
    Deterministic,
}

/// How the selected words are weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `pi` at the selected ids.
    Base,
    /// `softmax(log pi + g)` at the selected ids.
    Perturbed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledBag {
    /// Distinct ids in selection order.
    pub ids: Vec<WordId>,
    pub weights: Vec<f64>,
    /// Gumbel draws at the selected ids; empty in deterministic mode.
    pub noise: Vec<f64>,
    pub mode: SamplingMode,
}

impl SampledBag {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: WordId) -> bool {
        self.ids.contains(&id)
    }
}

/// `-log(-log U)` with `U` uniform on (0, 1), clamped `1e-20` away from both ends.
pub fn gumbel<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP);
            -libm::log(-libm::log(u))
        })
        .collect()
}

/// Gumbel noise for a whole batch of distributions.
pub fn gumbel_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_vec(rows, cols, gumbel(rows * cols, rng))
}

fn support(pi: &[f64]) -> usize {
    pi.iter().filter(|&&p| p > 0.0).count()
}

/// Draws a bag from `pi`. In gumbel mode `noise` is drawn from `rng`.
pub fn sample_bag<R: Rng + ?Sized>(
    pi: &[f64],
    k: usize,
    mode: SamplingMode,
    weighting: Weighting,
    rng: &mut R,
) -> Result<SampledBag> {
    match mode {
        SamplingMode::Gumbel => {
            let g = gumbel(pi.len(), rng);
            select_bag(pi, k, Some(&g), weighting)
        }
        SamplingMode::Deterministic => select_bag(pi, k, None, weighting),
    }
}

/// Noise-frozen bag selection: a pure function of `pi` and `noise`. `None`
/// is deterministic top-k, identical to an all-zero noise vector except that
/// the returned bag records no noise.
pub fn select_bag(pi: &[f64], k: usize, noise: Option<&[f64]>, weighting: Weighting) -> Result<SampledBag> {
    if k == 0 {
        return Err(Error::ZeroBagSize);
    }
    let support = support(pi);
    if k > support {
        return Err(Error::BagExceedsSupport { k, support });
    }
    if let Some(g) = noise {
        assert_eq!(g.len(), pi.len(), "noise length must match the distribution");
    }
    let score = |i: usize| libm::log(pi[i]) + noise.map_or(0.0, |g| g[i]);
    let mut order: Vec<usize> = (0..pi.len()).filter(|&i| pi[i] > 0.0).collect();
    order.sort_by(|&a, &b| score(b).total_cmp(&score(a)).then(a.cmp(&b)));
    order.truncate(k);

    let weights = match weighting {
        Weighting::Base => order.iter().map(|&i| pi[i]).collect(),
        Weighting::Perturbed => {
            let max = (0..pi.len()).filter(|&i| pi[i] > 0.0).map(score).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..pi.len()).filter(|&i| pi[i] > 0.0).map(|i| libm::exp(score(i) - max)).sum();
            order.iter().map(|&i| libm::exp(score(i) - max) / total).collect()
        }
    };
    Ok(SampledBag {
        ids: order.iter().map(|&i| i as WordId).collect(),
        weights,
        noise: noise.map_or_else(Vec::new, |g| order.iter().map(|&i| g[i]).collect()),
        mode: if noise.is_some() { SamplingMode::Gumbel } else { SamplingMode::Deterministic },
    })
}

/// Probability of drawing `ordered` as the first picks of sequential
/// sampling without replacement from `pi`.
pub fn plackett_luce_prob(pi: &[f64], ordered: &[WordId]) -> Result<f64> {
    let mut used = Vec::with_capacity(ordered.len());
    let mut prob = 1.0;
    let mut removed = 0.0;
    for (t, &id) in ordered.iter().enumerate() {
        let i = id as usize;
        if i >= pi.len() || pi[i] <= 0.0 || used.contains(&i) {
            return Err(Error::InvalidOrder);
        }
        let denom = 1.0 - removed;
        if denom <= f64::EPSILON {
            return Err(Error::Underflow(t));
        }
        prob *= pi[i] / denom;
        removed += pi[i];
        used.push(i);
    }
    Ok(prob)
}

/// Differentiable bag weights for a batch, one row per bag entry (bags in
/// batch order, entries in selection order). `pi` is the `batch x V` mixture
/// node; `noise` is the frozen Gumbel matrix used for the selection (`None`
/// for deterministic bags). Gradients flow into `pi` at the selected ids only
/// for base weighting, and through the full perturbed softmax otherwise.
pub fn straight_through_weights(
    tape: &mut Tape,
    pi: Var,
    bags: &[SampledBag],
    noise: Option<&Matrix>,
    weighting: Weighting,
) -> Var {
    let at: Vec<(u32, u32)> =
        bags.iter().enumerate().flat_map(|(b, bag)| bag.ids.iter().map(move |&id| (b as u32, id))).collect();
    match weighting {
        Weighting::Base => tape.pick(pi, at),
        Weighting::Perturbed => {
            let logp = tape.log(pi);
            let a = match noise {
                Some(g) => {
                    let g = tape.constant(g.clone());
                    tape.add(logp, g)
                }
                None => logp,
            };
            let soft = tape.softmax(a);
            tape.pick(soft, at)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ParamStore;
    use alloc::vec;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_top2() {
        let bag = select_bag(&[0.5, 0.3, 0.2], 2, None, Weighting::Base).unwrap();
        assert_eq!(bag.ids, [0, 1]);
        assert_eq!(bag.weights, [0.5, 0.3]);
        assert!(bag.noise.is_empty());
    }

    #[test]
    fn deterministic_ties_take_lower_id() {
        let bag = select_bag(&[0.25, 0.25, 0.25, 0.25], 2, None, Weighting::Base).unwrap();
        assert_eq!(bag.ids, [0, 1]);
    }

    #[test]
    fn full_support_selects_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let bag = sample_bag(&[0.5, 0.3, 0.0, 0.2], 3, SamplingMode::Gumbel, Weighting::Perturbed, &mut rng).unwrap();
            let mut ids = bag.ids.clone();
            ids.sort();
            assert_eq!(ids, [0, 1, 3]);
        }
    }

    #[test]
    fn oversized_bag_names_the_deficit() {
        let err = select_bag(&[0.5, 0.5, 0.0], 3, None, Weighting::Base).unwrap_err();
        assert_eq!(err, Error::BagExceedsSupport { k: 3, support: 2 });
        assert!(alloc::format!("{err}").contains("1 short"));
    }

    #[test]
    fn plackett_luce_closed_forms() {
        let pi = [0.5, 0.3, 0.2];
        assert!((plackett_luce_prob(&pi, &[0, 1]).unwrap() - 0.30).abs() < 1e-12);
        assert!((plackett_luce_prob(&pi, &[2, 0]).unwrap() - 0.125).abs() < 1e-12);
        assert_eq!(plackett_luce_prob(&pi, &[0, 0]), Err(Error::InvalidOrder));
    }

    #[test]
    fn plackett_luce_sums_to_one_over_ordered_pairs() {
        let pi = [0.1, 0.4, 0.3, 0.2];
        let mut total = 0.0;
        let mut n = 0;
        for a in 0..4u32 {
            for b in 0..4u32 {
                if a != b {
                    total += plackett_luce_prob(&pi, &[a, b]).unwrap();
                    n += 1;
                }
            }
        }
        assert_eq!(n, 12);
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gumbel_is_seeded() {
        let a = gumbel(16, &mut ChaCha8Rng::seed_from_u64(1));
        let b = gumbel(16, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_noise_equals_deterministic_and_perturbed_reduces_to_pi() {
        let pi = [0.1, 0.05, 0.4, 0.25, 0.2];
        let zeros = [0.0; 5];
        let g = select_bag(&pi, 3, Some(&zeros), Weighting::Perturbed).unwrap();
        let d = select_bag(&pi, 3, None, Weighting::Perturbed).unwrap();
        assert_eq!(g.ids, d.ids);
        for (w, &id) in g.weights.iter().zip(&g.ids) {
            assert!((w - pi[id as usize]).abs() < 1e-12);
        }
    }

    #[test]
    fn base_weights_sum_gradient_is_selection_indicator() {
        let mut tape = Tape::new();
        let pi_val = Matrix::row_vector(vec![0.1, 0.4, 0.3, 0.2]);
        // A parameter stands in for pi so the gradient is observable.
        let mut ps = ParamStore::new();
        let id = ps.add("pi", pi_val.clone());
        let pi = tape.param(&ps, id);
        let bag = select_bag(pi_val.data(), 2, None, Weighting::Base).unwrap();
        let w = straight_through_weights(&mut tape, pi, core::slice::from_ref(&bag), None, Weighting::Base);
        let s = tape.sum(w);
        let g = tape.backward(s, ps.len());
        assert_eq!(g.get(id).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn perturbed_weights_match_finite_differences_with_frozen_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Matrix::row_vector((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let noise = gumbel_matrix(1, 6, &mut rng);
        let mut ps = ParamStore::new();
        let id = ps.add("logits", logits);
        let coef = [0.7, -1.3, 0.4];
        let loss = |ps: &ParamStore| -> (f64, Option<Matrix>) {
            let mut tape = Tape::new();
            let l = tape.param(ps, id);
            let pi = tape.softmax(l);
            let bag = select_bag(tape.value(pi).data(), 3, Some(noise.data()), Weighting::Perturbed).unwrap();
            let w = straight_through_weights(&mut tape, pi, core::slice::from_ref(&bag), Some(&noise), Weighting::Perturbed);
            let c = tape.constant(Matrix::from_vec(3, 1, coef.to_vec()));
            let y = tape.mul(w, c);
            let y = tape.sum(y);
            let g = tape.backward(y, ps.len());
            (tape.value(y).item(), g.get(id).cloned())
        };
        let (_, grad) = loss(&ps);
        let grad = grad.unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let orig = ps.get(id).data()[k];
            ps.get_mut(id).data_mut()[k] = orig + h;
            let plus = loss(&ps).0;
            ps.get_mut(id).data_mut()[k] = orig - h;
            let minus = loss(&ps).0;
            ps.get_mut(id).data_mut()[k] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let an = grad.data()[k];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6), "{k}: {an} vs {fd}");
        }
    }

    proptest! {
        #[test]
        fn sampled_ids_are_distinct(raw in proptest::collection::vec(0.0f64..1.0, 2..12), k_frac in 0.0f64..1.0, seed in 0u64..1000) {
            let total: f64 = raw.iter().sum::<f64>() + 1e-3;
            let pi: Vec<f64> = raw.iter().map(|x| (x + 1e-3 / raw.len() as f64) / total).collect();
            let k = 1 + ((pi.len() - 1) as f64 * k_frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bag = sample_bag(&pi, k, SamplingMode::Gumbel, Weighting::Perturbed, &mut rng).unwrap();
            let mut ids = bag.ids.clone();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), k);
            prop_assert_eq!(bag.weights.len(), k);
            prop_assert!(bag.weights.iter().all(|w| w.is_finite() && *w >= 0.0));
        }

        #[test]
        fn frozen_noise_is_pure(raw in proptest::collection::vec(0.01f64..1.0, 3..8), seed in 0u64..1000) {
            let total: f64 = raw.iter().sum();
            let pi: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let g = gumbel(pi.len(), &mut ChaCha8Rng::seed_from_u64(seed));
            let a = select_bag(&pi, 2, Some(&g), Weighting::Base).unwrap();
            let b = select_bag(&pi, 2, Some(&g), Weighting::Base).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
