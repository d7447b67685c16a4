//! Looking inside a trained model: word neighbors, generation traces and bag
//! editing.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::corpus::{IdGrid, Vocabulary, WordId};
use crate::error::{Error, Result};
use crate::graph::Tape;
use crate::model::Model;
use crate::realizer::{self, edit_bag, BagInput, GenerationTrace, Strategy, WordNeighbors};
use crate::sampler::SampledBag;

fn top(row: &[f64], n: usize) -> Vec<(WordId, f64)> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.into_iter().take(n).map(|i| (i as WordId, row[i])).collect()
}

fn require_planner(model: &Model) -> Result<()> {
    if model.variant().uses_bag() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(alloc::format!("variant {} has no planner", model.variant())))
    }
}

/// Top `n` ids of each neighbor head for `word` as a one-token source.
pub fn word_neighbors(model: &Model, word: WordId, n: usize) -> Result<Vec<Vec<(WordId, f64)>>> {
    require_planner(model)?;
    let mut tape = Tape::new();
    let (_, plan) = model.plan(&mut tape, &IdGrid::from_rows(&[&[word]]));
    let plan = plan.expect("bag variant has a planner");
    let nd = plan.neighbor_distributions(&tape, 0);
    Ok((0..nd.neighbors()).map(|j| top(nd.slice(0, j), n)).collect())
}

/// Top `n` ids of the mixed bag distribution for `word` as a one-token source.
pub fn mixture_neighbors(model: &Model, word: WordId, n: usize) -> Result<Vec<(WordId, f64)>> {
    require_planner(model)?;
    let mut tape = Tape::new();
    let (_, plan) = model.plan(&mut tape, &IdGrid::from_rows(&[&[word]]));
    let pi = tape.value(plan.expect("bag variant has a planner").pi);
    Ok(top(pi.row(0), n))
}

/// Neighbor table for `words`; out-of-vocabulary words get no heads.
pub fn dump_neighbors(model: &Model, vocab: &Vocabulary, words: &[&str], top_n: usize) -> Result<Vec<WordNeighbors>> {
    words
        .iter()
        .map(|&w| {
            let heads = match vocab.get(w) {
                Some(id) => word_neighbors(model, id, top_n)?
                    .into_iter()
                    .map(|h| h.into_iter().map(|(i, p)| (vocab.token(i).to_string(), p)).collect())
                    .collect(),
                None => Vec::new(),
            };
            Ok(WordNeighbors { word: w.to_string(), heads })
        })
        .collect()
}

/// The deterministic bag for `source` (top-k, or the given target bag for `cheating_bow`).
pub fn plan_bag(model: &Model, source: &[WordId], target_bow: Option<&[WordId]>) -> Result<SampledBag> {
    require_planner(model)?;
    let mut tape = Tape::new();
    let (_, plan) = model.plan(&mut tape, &IdGrid::from_rows(&[source]));
    let plan = plan.expect("bag variant has a planner");
    let bows = target_bow.map(|t| alloc::vec![t.to_vec()]);
    let mut bags = model.choose_bags(&tape, &plan, bows.as_deref(), None)?;
    Ok(bags.remove(0))
}

/// Full three-stage trace of decoding `source` from `bag` (`None` for
/// variants without a bag).
pub fn trace_with_bag(
    model: &Model,
    vocab: &Vocabulary,
    source: &[WordId],
    bag: Option<&SampledBag>,
    top_n: usize,
    max_len: usize,
) -> Result<GenerationTrace> {
    let neighbors = if model.variant().uses_bag() {
        let words: Vec<String> = source.iter().map(|&i| vocab.token(i).to_string()).collect();
        let refs: Vec<&str> = words.iter().map(String::as_str).collect();
        let mut table = dump_neighbors(model, vocab, &refs, top_n)?;
        // Source words that are <unk> still have neighbors; look them up by id.
        for (entry, &id) in table.iter_mut().zip(source) {
            if entry.heads.is_empty() {
                entry.heads = word_neighbors(model, id, top_n)?
                    .into_iter()
                    .map(|h| h.into_iter().map(|(i, p)| (vocab.token(i).to_string(), p)).collect())
                    .collect();
            }
        }
        table
    } else {
        Vec::new()
    };
    let mut tape = Tape::new();
    let enc = crate::planner::encode(&mut tape, model, &IdGrid::from_rows(&[source]));
    let input = bag.map(|b| BagInput::constant(&mut tape, core::slice::from_ref(b)));
    let mem = realizer::prepare(&mut tape, model, &enc, input.as_ref())?;
    let g = realizer::generate(&mut tape, model, &mem, max_len, Strategy::Greedy).remove(0);
    let bag_ids: &[WordId] = bag.map(|b| b.ids.as_slice()).unwrap_or(&[]);
    Ok(GenerationTrace {
        source: source.iter().map(|&i| vocab.token(i).to_string()).collect(),
        neighbors,
        bag: bag.map(|b| b.ids.iter().zip(&b.weights).map(|(&i, &w)| (vocab.token(i).to_string(), w)).collect()).unwrap_or_default(),
        output: g.tokens.iter().map(|&i| vocab.token(i).to_string()).collect(),
        from_bag: g.tokens.iter().map(|t| bag_ids.contains(t)).collect(),
        attention: g.attention,
        source_slots: g.source_slots,
    })
}

/// Plans a bag deterministically and traces its realization.
pub fn trace(
    model: &Model,
    vocab: &Vocabulary,
    source: &[WordId],
    target_bow: Option<&[WordId]>,
    top_n: usize,
    max_len: usize,
) -> Result<(GenerationTrace, Option<SampledBag>)> {
    let bag = if model.variant().uses_bag() { Some(plan_bag(model, source, target_bow)?) } else { None };
    Ok((trace_with_bag(model, vocab, source, bag.as_ref(), top_n, max_len)?, bag))
}

/// Traces `source`, edits the planned bag and traces again.
pub fn edit_and_generate(
    model: &Model,
    vocab: &Vocabulary,
    source: &[WordId],
    add: &[WordId],
    remove: &[WordId],
    top_n: usize,
    max_len: usize,
) -> Result<(GenerationTrace, GenerationTrace)> {
    require_planner(model)?;
    let (before, bag) = trace(model, vocab, source, None, top_n, max_len)?;
    let edited = edit_bag(&bag.expect("bag variant"), add, remove, model.vocab_size())?;
    let after = trace_with_bag(model, vocab, source, Some(&edited), top_n, max_len)?;
    Ok((before, after))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};
    use crate::corpus::{make_synth_corpus, SynthSpec};

    #[test]
    fn untrained_neighbors_are_near_uniform() {
        let c = make_synth_corpus(&SynthSpec::standard(200, 1)).unwrap();
        let v = c.vocab.len();
        assert!(v >= 100);
        let model = Model::new(&ModelConfig::default(), v, 1).unwrap();
        let id = c.vocab.get("big").unwrap_or(10);
        for head in word_neighbors(&model, id, 3).unwrap() {
            assert!(head[0].1 < 10.0 / v as f64);
        }
    }

    #[test]
    fn traces_are_deterministic_and_consistent() {
        let c = make_synth_corpus(&SynthSpec::standard(50, 2)).unwrap();
        let mc = ModelConfig { emb_dim: 8, hidden_dim: 8, bag_size: 4, ..ModelConfig::default() };
        let model = Model::new(&mc, c.vocab.len(), 3).unwrap();
        let src = &c.instances[0].source;
        let (a, bag) = trace(&model, &c.vocab, src, None, 3, 8).unwrap();
        let (b, _) = trace(&model, &c.vocab, src, None, 3, 8).unwrap();
        assert_eq!(a, b);
        let bag = bag.unwrap();
        for (tok, &flag) in a.output.iter().zip(&a.from_bag) {
            assert_eq!(flag, bag.ids.iter().any(|&i| c.vocab.token(i) == tok));
        }
        for row in &a.attention {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let (x, y) = edit_and_generate(&model, &c.vocab, src, &[], &[], 3, 8).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn oov_words_get_empty_tables_and_seq2seq_has_no_planner() {
        let c = make_synth_corpus(&SynthSpec::standard(50, 2)).unwrap();
        let model = Model::new(&ModelConfig::default(), c.vocab.len(), 3).unwrap();
        let t = dump_neighbors(&model, &c.vocab, &["zzzz"], 3).unwrap();
        assert!(t[0].heads.is_empty());
        let s2s = Model::new(&ModelConfig { variant: Variant::Seq2seq, ..ModelConfig::default() }, c.vocab.len(), 3).unwrap();
        assert!(word_neighbors(&s2s, 5, 3).is_err());
        let cheat = Model::new(&ModelConfig { variant: Variant::CheatingBow, ..ModelConfig::default() }, c.vocab.len(), 3).unwrap();
        assert_eq!(plan_bag(&cheat, &c.instances[0].source, None).err(), Some(Error::MissingBag("cheating_bow")));
    }
}
