//! Opt-in multi-threaded evaluation.
//!
//! Instances are split into chunks aligned to the evaluator's batch size, so
//! every chunk decodes exactly the batches a single-threaded run would and the
//! report is bit-identical.

use lbow_core::corpus::ParaphraseInstance;
use lbow_core::metrics::MetricsReport;
use lbow_core::model::Model;
use lbow_core::realizer::Strategy;
use lbow_core::train::{check_vocab, evaluate_records, Evaluation};

use crate::error::Result;

/// Must match the batch size used inside `evaluate_records`.
const EVAL_BATCH: usize = 64;

pub fn evaluate(model: &Model, data: &[ParaphraseInstance], max_len: usize, strategy: Strategy, threads: usize) -> Result<Evaluation> {
    check_vocab(model, data)?;
    let threads = threads.max(1);
    let batches = data.len().div_ceil(EVAL_BATCH);
    if threads == 1 || batches < 2 {
        return Ok(lbow_core::train::evaluate(model, data, max_len, strategy)?);
    }
    let chunk = batches.div_ceil(threads) * EVAL_BATCH;
    let parts: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = data
            .chunks(chunk)
            .map(|part| s.spawn(move || evaluate_records(model, part, max_len, strategy)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation thread panicked")).collect()
    });
    let mut records = Vec::with_capacity(data.len());
    let mut loss_sum = 0.0;
    for part in parts {
        let (r, l) = part?;
        records.extend(r);
        loss_sum += l;
    }
    Ok(Evaluation { report: MetricsReport::from_records(&records)?, records, loss: loss_sum / data.len() as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use lbow_core::config::ModelConfig;
    use lbow_core::corpus::{make_synth_corpus, SynthSpec};

    #[test]
    fn matches_single_threaded_report() {
        let c = make_synth_corpus(&SynthSpec::standard(150, 4)).unwrap();
        let mc = ModelConfig { emb_dim: 8, hidden_dim: 8, bag_size: 4, ..ModelConfig::default() };
        let model = Model::new(&mc, c.vocab.len(), 2).unwrap();
        let one = evaluate(&model, &c.instances, 8, Strategy::Greedy, 1).unwrap();
        let three = evaluate(&model, &c.instances, 8, Strategy::Greedy, 3).unwrap();
        assert_eq!(one.report, three.report);
        assert_eq!(one.records, three.records);
    }
}
