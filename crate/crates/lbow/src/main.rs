use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

use lbow::checkpoint::Checkpoint;
use lbow::{config_file, files, parallel, plot, report};
use lbow_core::config::RunConfig;
use lbow_core::corpus::{encode_pairs, make_synth_corpus, tokenize, IdGrid, ParaphraseInstance, RawPair, SynthSpec, Vocabulary, WordId};
use lbow_core::inspect;
use lbow_core::metrics::summary;
use lbow_core::realizer::{self, Strategy};
use lbow_core::train::Trainer;

const CHECKPOINT_FILE: &str = "last.ckpt";

/// Latent bag-of-words paraphrase generation.
#[derive(Parser)]
#[command(name = "lbow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a vocabulary file from the training pairs.
    PrepareData {
        #[command(flatten)]
        run: RunArgs,
        /// Vocabulary size cap, including the 4 special tokens.
        #[arg(long, default_value_t = 20_000)]
        vocab_size: usize,
        /// Move this many shuffled training pairs into a test file (written next to the training file).
        #[arg(long)]
        split_test: Option<usize>,
    },
    /// Write the synthetic corpus, its vocabulary, planted synonyms and a config.
    Synth {
        #[arg(long, default_value_t = 2400)]
        count: usize,
        #[arg(long, default_value_t = 400)]
        test_count: usize,
        #[arg(long, default_value_t = 7)]
        corpus_seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a model, checkpointing after every epoch.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint; flags still override its config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Evaluate a checkpoint on the test pairs.
    Eval {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Paraphrase sentences (arguments, or one per line from --input).
    Generate {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long)]
        input: Option<PathBuf>,
        sentences: Vec<String>,
    },
    /// Print the neighbor table of words.
    Neighbors {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, default_value_t = 5)]
        top_n: usize,
        #[arg(required = true)]
        words: Vec<String>,
    },
    /// Print the neighbors, bag and aligned output for one sentence.
    Trace {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, default_value_t = 5)]
        top_n: usize,
        sentence: String,
    },
    /// Trace a sentence, edit its bag and trace again.
    EditBag {
        #[command(flatten)]
        ck: CheckpointArgs,
        #[arg(long, default_value_t = 5)]
        top_n: usize,
        #[arg(long, value_delimiter = ',')]
        add: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        remove: Vec<String>,
        sentence: String,
    },
    /// Render mode-count and bag precision/recall curves to SVG.
    Plot {
        /// A checkpoint or an epochs.jsonl log.
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn serde_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

/// Flags mirroring every field of the run configuration.
#[derive(Args, Default)]
struct RunArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = serde_enum::<lbow_core::config::Variant>)]
    variant: Option<lbow_core::config::Variant>,
    #[arg(long)]
    bow_emb: Option<bool>,
    #[arg(long)]
    copy: Option<bool>,
    #[arg(long)]
    emb_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Neighbor distributions per source word (l).
    #[arg(long)]
    neighbors: Option<usize>,
    /// Bag size (k).
    #[arg(long)]
    bag_size: Option<usize>,
    #[arg(long, value_parser = serde_enum::<lbow_core::sampler::Weighting>)]
    weighting: Option<lbow_core::sampler::Weighting>,
    #[arg(long, value_parser = serde_enum::<lbow_core::config::SamplingChoice>)]
    sampling: Option<lbow_core::config::SamplingChoice>,
    #[arg(long)]
    lambda_bow: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    epoch_eval_size: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long, value_parser = serde_enum::<lbow_core::corpus::DataFormat>)]
    data_format: Option<lbow_core::corpus::DataFormat>,
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    test: Option<String>,
    #[arg(long)]
    vocab: Option<String>,
    #[arg(long)]
    stoplist: Option<String>,
    #[arg(long)]
    checkpoint_dir: Option<String>,
    #[arg(long)]
    report_dir: Option<String>,
}

macro_rules! overlay {
    ($args:expr, $cfg:expr, [$($flag:ident => $($field:ident).+),* $(,)?]) => {
        $( if let Some(v) = $args.$flag.clone() { $cfg.$($field).+ = v; } )*
    };
}

impl RunArgs {
    fn apply(&self, c: &mut RunConfig) {
        overlay!(self, c, [
            variant => model.variant, bow_emb => model.bow_emb, copy => model.copy,
            emb_dim => model.emb_dim, hidden_dim => model.hidden_dim, layers => model.layers,
            neighbors => model.neighbors, bag_size => model.bag_size,
            weighting => model.weighting, sampling => model.sampling,
            lambda_bow => train.lambda_bow, learning_rate => train.learning_rate,
            batch_size => train.batch_size, epochs => train.epochs, max_len => train.max_len,
            seed => train.seed, clip_norm => train.clip_norm,
            epoch_eval_size => train.epoch_eval_size, beam_width => train.beam_width,
            data_format => paths.data_format,
        ]);
        for (flag, field) in [
            (&self.train, &mut c.paths.train),
            (&self.test, &mut c.paths.test),
            (&self.vocab, &mut c.paths.vocab),
            (&self.stoplist, &mut c.paths.stoplist),
            (&self.checkpoint_dir, &mut c.paths.checkpoint_dir),
            (&self.report_dir, &mut c.paths.report_dir),
        ] {
            if flag.is_some() {
                field.clone_from(flag);
            }
        }
    }

    fn resolve(&self, base: Option<RunConfig>) -> Result<RunConfig> {
        let mut c = match (&self.config, base) {
            (Some(path), _) => config_file::load(path)?,
            (None, Some(b)) => b,
            (None, None) => RunConfig::default(),
        };
        self.apply(&mut c);
        c.validate().map_err(lbow::Error::from)?;
        Ok(c)
    }
}

/// Flags for commands that start from a trained checkpoint. Only the
/// decoding and data fields can be overridden.
#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    test: Option<String>,
    #[arg(long, value_parser = serde_enum::<lbow_core::corpus::DataFormat>)]
    data_format: Option<lbow_core::corpus::DataFormat>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    report_dir: Option<String>,
}

impl CheckpointArgs {
    fn load(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::load(&self.checkpoint)?;
        let c = &mut ck.config;
        overlay!(self, c, [max_len => train.max_len, beam_width => train.beam_width, data_format => paths.data_format]);
        if self.test.is_some() {
            c.paths.test = self.test.clone();
        }
        if self.report_dir.is_some() {
            c.paths.report_dir = self.report_dir.clone();
        }
        c.validate().map_err(lbow::Error::from)?;
        Ok(ck)
    }
}

/// A problem with how the command was invoked (exit code 1).
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Usage(String);

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

fn required<'a>(value: &'a Option<String>, flag: &str) -> Result<&'a Path> {
    match value {
        Some(v) => Ok(Path::new(v)),
        None => usage(format!("--{flag} (or paths.{} in the config file) is required", flag.replace('-', "_"))),
    }
}

fn load_instances(path: &Path, c: &RunConfig, vocab: &Vocabulary) -> Result<Vec<ParaphraseInstance>> {
    let raw = files::load_pairs(path, c.paths.data_format)?;
    let (instances, skipped) = encode_pairs(&raw, vocab, c.train.max_len);
    if skipped > 0 {
        warn!("{}: skipped {skipped} pairs with no content words", path.display());
    }
    if instances.is_empty() {
        return Err(lbow::Error::Data { path: path.into(), source: lbow_core::Error::EmptyCorpus }.into());
    }
    Ok(instances)
}

fn encode_sentence(vocab: &Vocabulary, text: &str) -> Result<Vec<WordId>> {
    let toks = tokenize(text);
    if toks.is_empty() {
        return usage(format!("nothing to encode in {text:?}"));
    }
    Ok(vocab.encode(&toks))
}

fn word_ids(vocab: &Vocabulary, words: &[String]) -> Result<Vec<WordId>> {
    words
        .iter()
        .map(|w| vocab.get(w).map_or_else(|| usage(format!("{w:?} is not in the vocabulary")), Ok))
        .collect()
}

fn prepare_data(run: &RunArgs, vocab_size: usize, split_test: Option<usize>) -> Result<()> {
    let c = run.resolve(None)?;
    let train = required(&c.paths.train, "train")?;
    let vocab_path = required(&c.paths.vocab, "vocab")?;
    let stoplist = files::load_stoplist(c.paths.stoplist.as_deref().map(Path::new))?;
    let mut pairs = files::load_pairs(train, c.paths.data_format)?;
    if let Some(n) = split_test {
        if n >= pairs.len() {
            return usage(format!("--split-test {n} leaves no training pairs ({} in total)", pairs.len()));
        }
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(c.train.seed));
        let test: Vec<RawPair> = pairs.split_off(pairs.len() - n);
        let dir = train.parent().unwrap_or(Path::new("."));
        let write = |name: &str, ps: &[RawPair]| -> Result<PathBuf> {
            let p = dir.join(name);
            files::write_text(&p, &pairs_text(ps, c.paths.data_format))?;
            Ok(p)
        };
        let (a, b) = (write("train.split.txt", &pairs)?, write("test.split.txt", &test)?);
        println!("train\t{}\t{}", a.display(), pairs.len());
        println!("test\t{}\t{}", b.display(), test.len());
    }
    let sentences: Vec<&Vec<String>> = pairs.iter().flat_map(|p| std::iter::once(&p.source).chain(&p.targets)).collect();
    let sentences: Vec<Vec<&str>> = sentences.iter().map(|s| s.iter().map(String::as_str).collect()).collect();
    let vocab = Vocabulary::build(&sentences, vocab_size, &stoplist).map_err(|source| lbow::Error::Data { path: train.into(), source })?;
    files::write_vocab(vocab_path, &vocab)?;
    let (instances, skipped) = encode_pairs(&pairs, &vocab, c.train.max_len);
    println!("vocab\t{}\t{}", vocab_path.display(), vocab.len());
    println!("instances\t{}\tskipped\t{skipped}", instances.len());
    Ok(())
}

fn pairs_text(pairs: &[RawPair], format: lbow_core::corpus::DataFormat) -> String {
    use lbow_core::corpus::DataFormat;
    let mut out = String::new();
    for p in pairs {
        match format {
            DataFormat::Quora => {
                out += &format!("{}\t{}\n", p.source.join(" "), p.targets[0].join(" "));
            }
            DataFormat::Mscoco => {
                for s in std::iter::once(&p.source).chain(&p.targets) {
                    out += &s.join(" ");
                    out.push('\n');
                }
                out.push('\n');
            }
        }
    }
    out
}

fn synth(count: usize, test_count: usize, seed: u64, out_dir: &Path) -> Result<()> {
    if test_count >= count {
        return usage("--test-count must be smaller than --count");
    }
    let corpus = make_synth_corpus(&SynthSpec::standard(count, seed))?;
    let (train, test) = corpus.pairs.split_at(count - test_count);
    let p = |name: &str| out_dir.join(name);
    files::write_text(&p("train.tsv"), &pairs_text(train, lbow_core::corpus::DataFormat::Quora))?;
    files::write_text(&p("test.tsv"), &pairs_text(test, lbow_core::corpus::DataFormat::Quora))?;
    files::write_vocab(&p("vocab.txt"), &corpus.vocab)?;
    files::write_text(&p("planted.tsv"), &files::planted_text(&corpus.planted_pairs()))?;
    let mut c = RunConfig::default();
    let s = |name: &str| Some(p(name).to_string_lossy().into_owned());
    c.paths.train = s("train.tsv");
    c.paths.test = s("test.tsv");
    c.paths.vocab = s("vocab.txt");
    c.paths.checkpoint_dir = s("ckpt");
    c.paths.report_dir = s("report");
    config_file::save(&p("config.toml"), &c)?;
    println!("{}\t{} train, {} test, vocabulary {}", out_dir.display(), train.len(), test.len(), corpus.vocab.len());
    Ok(())
}

fn train(run: &RunArgs, resume: Option<&Path>, threads: usize) -> Result<()> {
    let (mut trainer, c, vocab) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let c = run.resolve(Some(ck.config.clone()))?;
            if c.model != ck.config.model {
                return usage("model settings cannot change when resuming");
            }
            if c.train.seed != ck.config.train.seed {
                return usage("the seed cannot change when resuming");
            }
            let vocab = ck.vocab.clone();
            let mut trainer = ck.into_trainer();
            trainer.config = c.train.clone();
            trainer.optimizer.lr = c.train.learning_rate;
            info!("resuming {} after epoch {}", path.display(), trainer.epoch);
            (trainer, c, vocab)
        }
        None => {
            let c = run.resolve(None)?;
            let vocab_path = required(&c.paths.vocab, "vocab")?;
            let stoplist = files::load_stoplist(c.paths.stoplist.as_deref().map(Path::new))?;
            let vocab = files::read_vocab(vocab_path, &stoplist)?;
            let trainer = Trainer::new(&c.model, vocab.len(), &c.train).map_err(lbow::Error::from)?;
            (trainer, c, vocab)
        }
    };
    let train_data = load_instances(required(&c.paths.train, "train")?, &c, &vocab)?;
    let test_data = match &c.paths.test {
        Some(p) => load_instances(Path::new(p), &c, &vocab)?,
        None => Vec::new(),
    };
    let ck_dir = PathBuf::from(required(&c.paths.checkpoint_dir, "checkpoint-dir")?);
    let ck_path = ck_dir.join(CHECKPOINT_FILE);
    let log_path = c.paths.report_dir.as_ref().map(|d| Path::new(d).join(report::EPOCH_LOG));
    if let Some(log) = &log_path {
        report::write_epochs(log, &trainer.history)?;
    }
    info!("{} training and {} test instances, vocabulary {}", train_data.len(), test_data.len(), vocab.len());

    while trainer.epoch < c.train.epochs {
        let epoch = match trainer.run_epoch(&train_data, &test_data) {
            Ok(e) => e,
            Err(e) => {
                if matches!(e, lbow_core::Error::Diverged { .. }) && ck_path.exists() {
                    warn!("keeping the last good checkpoint {}", ck_path.display());
                }
                return Err(lbow::Error::from(e).into());
            }
        };
        Checkpoint::capture(&trainer, &c, &vocab).save(&ck_path)?;
        if let Some(log) = &log_path {
            report::append_epoch(log, &epoch)?;
        }
        let extra = epoch.metrics.as_ref().map(summary).unwrap_or_default();
        info!("epoch {} loss {:.4} {extra}", epoch.epoch, epoch.train_loss);
    }
    if trainer.epoch == 0 || !ck_path.exists() {
        Checkpoint::capture(&trainer, &c, &vocab).save(&ck_path)?;
    }
    println!("checkpoint\t{}", ck_path.display());
    if !test_data.is_empty() {
        let strategy = Strategy::from_width(c.train.beam_width);
        let ev = parallel::evaluate(&trainer.model, &test_data, c.train.max_len, strategy, threads)?;
        if let Some(dir) = &c.paths.report_dir {
            report::write_metrics(Path::new(dir), &ev.report)?;
        }
        print!("{}", ev.report.to_text());
    }
    Ok(())
}

fn eval(ck: &CheckpointArgs, threads: usize) -> Result<()> {
    let ckpt = ck.load()?;
    let c = &ckpt.config;
    let test = load_instances(required(&c.paths.test, "test")?, c, &ckpt.vocab)?;
    let ev = parallel::evaluate(&ckpt.model, &test, c.train.max_len, Strategy::from_width(c.train.beam_width), threads)?;
    if let Some(dir) = &c.paths.report_dir {
        report::write_metrics(Path::new(dir), &ev.report)?;
    }
    print!("{}", ev.report.to_text());
    Ok(())
}

fn generate(ck: &CheckpointArgs, input: Option<&Path>, sentences: &[String]) -> Result<()> {
    let ckpt = ck.load()?;
    let (model, vocab, c) = (&ckpt.model, &ckpt.vocab, &ckpt.config);
    let mut lines: Vec<String> = sentences.to_vec();
    if let Some(p) = input {
        lines.extend(files::read_text(p)?.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }
    if lines.is_empty() {
        return usage("no sentences given (pass them as arguments or with --input)");
    }
    let strategy = Strategy::from_width(c.train.beam_width);
    for line in &lines {
        let src = encode_sentence(vocab, line)?;
        let bag = if model.variant().uses_bag() { Some(inspect::plan_bag(model, &src, None)?) } else { None };
        let out = realizer::realize(model, &IdGrid::from_rows(&[&src]), bag.as_ref().map(std::slice::from_ref), c.train.max_len, strategy)?;
        println!("{}", vocab.render(&out[0].tokens));
    }
    Ok(())
}

fn neighbors(ck: &CheckpointArgs, top_n: usize, words: &[String]) -> Result<()> {
    let ckpt = ck.load()?;
    let refs: Vec<&str> = words.iter().map(String::as_str).collect();
    let table = inspect::dump_neighbors(&ckpt.model, &ckpt.vocab, &refs, top_n)?;
    for t in table.iter().filter(|t| t.heads.is_empty()) {
        warn!("{:?} is not in the vocabulary", t.word);
    }
    files::write_neighbor_table(std::io::stdout().lock(), &table).context("writing to stdout")?;
    Ok(())
}

fn trace(ck: &CheckpointArgs, top_n: usize, sentence: &str) -> Result<()> {
    let ckpt = ck.load()?;
    let src = encode_sentence(&ckpt.vocab, sentence)?;
    let (t, _) = inspect::trace(&ckpt.model, &ckpt.vocab, &src, None, top_n, ckpt.config.train.max_len)?;
    print!("{}", t.to_text());
    Ok(())
}

fn edit_bag(ck: &CheckpointArgs, top_n: usize, add: &[String], remove: &[String], sentence: &str) -> Result<()> {
    let ckpt = ck.load()?;
    let vocab = &ckpt.vocab;
    let src = encode_sentence(vocab, sentence)?;
    let (add, remove) = (word_ids(vocab, add)?, word_ids(vocab, remove)?);
    let (before, after) = inspect::edit_and_generate(&ckpt.model, vocab, &src, &add, &remove, top_n, ckpt.config.train.max_len)?;
    println!("# before");
    print!("{}", before.to_text());
    println!("# after");
    print!("{}", after.to_text());
    Ok(())
}

fn plot_cmd(history: &Path, out_dir: &Path) -> Result<()> {
    let epochs = if history.extension().is_some_and(|e| e == "jsonl") {
        report::read_epochs(history)?
    } else {
        Checkpoint::load(history)?.history
    };
    let written = plot::render(&epochs, out_dir)?;
    if written.is_empty() {
        warn!("no epochs with held-out metrics; nothing plotted");
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData { run, vocab_size, split_test } => prepare_data(&run, vocab_size, split_test),
        Command::Synth { count, test_count, corpus_seed, out_dir } => synth(count, test_count, corpus_seed, &out_dir),
        Command::Train { run, resume, threads } => train(&run, resume.as_deref(), threads),
        Command::Eval { ck, threads } => eval(&ck, threads),
        Command::Generate { ck, input, sentences } => generate(&ck, input.as_deref(), &sentences),
        Command::Neighbors { ck, top_n, words } => neighbors(&ck, top_n, &words),
        Command::Trace { ck, top_n, sentence } => trace(&ck, top_n, &sentence),
        Command::EditBag { ck, top_n, add, remove, sentence } => edit_bag(&ck, top_n, &add, &remove, &sentence),
        Command::Plot { history, out_dir } => plot_cmd(&history, &out_dir),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return 1;
    }
    match err.downcast_ref::<lbow::Error>() {
        Some(e) if e.is_divergence() => 3,
        Some(lbow::Error::Config(_)) | Some(lbow::Error::Core(lbow_core::Error::InvalidConfig(_))) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
