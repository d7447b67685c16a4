use lbow::checkpoint::Checkpoint;
use lbow::config_file;
use lbow_core::config::{ModelConfig, RunConfig, SamplingChoice, Variant};
use lbow_core::corpus::{make_synth_corpus, SynthCorpus, SynthSpec};
use lbow_core::realizer::Strategy;
use lbow_core::train::{evaluate, Trainer};

fn corpus() -> SynthCorpus {
    make_synth_corpus(&SynthSpec::standard(160, 3)).unwrap()
}

fn config(variant: Variant) -> RunConfig {
    let mut c = RunConfig::default();
    c.model = ModelConfig { variant, emb_dim: 8, hidden_dim: 8, bag_size: 4, ..ModelConfig::default() };
    c.train.batch_size = 16;
    c.train.epoch_eval_size = 8;
    c.train.learning_rate = 5e-3;
    c
}

fn trained(c: &RunConfig, data: &SynthCorpus, epochs: usize) -> Trainer {
    let (train, held) = data.instances.split_at(130);
    let mut t = Trainer::new(&c.model, data.vocab.len(), &c.train).unwrap();
    for _ in 0..epochs {
        t.run_epoch(train, held).unwrap();
    }
    t
}

#[test]
fn saved_checkpoint_evaluates_identically() {
    let data = corpus();
    let c = config(Variant::LbowTopk);
    let t = trained(&c, &data, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    Checkpoint::capture(&t, &c, &data.vocab).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let test = &data.instances[130..];
    let a = evaluate(&t.model, test, 12, Strategy::Greedy).unwrap();
    let b = evaluate(&back.model, test, 12, Strategy::Greedy).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(back.vocab, data.vocab);
    assert_eq!(back.history, t.history);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let data = corpus();
    for variant in [Variant::LbowGumbel, Variant::Seq2seqAttn] {
        let mut c = config(variant);
        c.model.sampling = SamplingChoice::Auto;
        let full = trained(&c, &data, 5);

        let first = trained(&c, &data, 3);
        let bytes = Checkpoint::capture(&first, &c, &data.vocab).to_bytes().unwrap();
        let mut resumed = Checkpoint::from_bytes(&bytes).unwrap().into_trainer();
        let (train, held) = data.instances.split_at(130);
        for _ in 0..2 {
            resumed.run_epoch(train, held).unwrap();
        }
        assert_eq!(resumed.model.params, full.model.params, "{variant}");
        assert_eq!(resumed.optimizer, full.optimizer);
        assert_eq!(resumed.rng_state(), full.rng_state());
        assert_eq!(resumed.history, full.history);
    }
}

#[test]
fn same_seed_is_bit_identical() {
    let data = corpus();
    let c = config(Variant::LbowGumbel);
    let a = trained(&c, &data, 2);
    let b = trained(&c, &data, 2);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history, b.history);
    let mut other = c.clone();
    other.train.seed = 2;
    assert_ne!(trained(&other, &data, 1).model.params, a.model.params);
}

#[test]
fn config_serialization_is_stable() {
    let mut c = config(Variant::BowHard);
    c.paths.train = Some("data/train.tsv".into());
    c.paths.report_dir = Some("runs/r".into());
    c.train.lambda_bow = 0.3;
    for c in [RunConfig::default(), c] {
        let text = config_file::to_string(&c).unwrap();
        let parsed = config_file::parse(&text).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(config_file::to_string(&parsed).unwrap(), text);
    }
}
