mod manifest;
mod settings;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use hallumon::corpus::{build_corpus, read_corpus, write_corpus, LabeledSample};
use hallumon::detector::DetectionHead;
use hallumon::eval::{
    generation_metrics, score_with_head, score_with_perplexity, AlwaysRefuse, EvalReport, Greedy, Oracle, Policy,
    MAX_RESPONSE_TOKENS,
};
use hallumon::model::checkpoint::Checkpoint;
use hallumon::model::Model;
use hallumon::probes::{compare_procedures, curve_table, layer_curve};
use hallumon::tokenizer::Vocab;
use hallumon::training::{pretrain_base, train, EpochLog, Mode};
use manifest::RunManifest;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use settings::Settings;

const VOCAB_FILE: &str = "vocab.txt";
const TRAIN_FILE: &str = "train.corpus";
const TEST_FILE: &str = "test.corpus";
const CHECKPOINT_FILE: &str = "model.ckpt";
const LOG_FILE: &str = "train.log";
const REPORT_FILE: &str = "report.txt";

#[derive(Parser, Debug)]
#[command(name = "hallumon", version, about = "Hallucination-aware fine-tuning of a micro transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, env = "HALLUMON_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, env = "HALLUMON_OUT")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus: vocab.txt, train.corpus, test.corpus.
    GenCorpus {
        #[command(flatten)]
        common: Common,
    },
    /// Train a base language model from scratch on a corpus train split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-corpus.
        #[arg(long, env = "HALLUMON_CORPUS")]
        corpus: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune adapters and detection head on a frozen base checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "HALLUMON_CORPUS")]
        corpus: PathBuf,
        /// Base checkpoint written by pretrain.
        #[arg(long, env = "HALLUMON_BASE")]
        base: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// `mid`, `last` or a hidden-layer index (0 = embeddings).
        #[arg(long)]
        detect_layer: Option<String>,
    },
    /// Evaluate a checkpoint on the test split and write report.txt.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "HALLUMON_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "HALLUMON_CORPUS")]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "greedy")]
        policy: PolicyArg,
    },
    /// Per-layer probe curves; with three checkpoints (base, detection-head
    /// tuned, text tuned) also the middle-layer comparison.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "HALLUMON_CORPUS")]
        corpus: PathBuf,
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Greedy generation that streams `token<TAB>p` lines as tokens appear.
    Score {
        #[arg(long, env = "HALLUMON_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "HALLUMON_VOCAB")]
        vocab: PathBuf,
        /// Prompt words; wrapped in `<bos> ... <sep>` unless already present.
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = MAX_RESPONSE_TOKENS)]
        max_new: usize,
        /// Lines with a score above this get a trailing `*` column.
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Optional directory for a manifest.
        #[arg(long, env = "HALLUMON_OUT")]
        out: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ModeArg {
    Joint,
    #[value(name = "ce_only")]
    CeOnly,
    #[value(name = "bce_only")]
    BceOnly,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Joint => Mode::Joint,
            ModeArg::CeOnly => Mode::CeOnly,
            ModeArg::BceOnly => Mode::BceOnly,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum PolicyArg {
    Greedy,
    Oracle,
    Refuse,
}

/// A flag value that parsed but is not acceptable.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<hallumon::Error>() {
            return match e {
                hallumon::Error::Config(_) => 2,
                hallumon::Error::NonFiniteLoss { .. } => 4,
                _ => 3,
            };
        }
    }
    3
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenCorpus { common } => gen_corpus(&common),
        Command::Pretrain { common, corpus, epochs } => pretrain(&common, &corpus, epochs),
        Command::Train { common, corpus, base, mode, lambda, epochs, detect_layer } => {
            fine_tune(&common, &corpus, &base, mode, lambda, epochs, detect_layer.as_deref())
        }
        Command::Eval { common, checkpoint, corpus, policy } => evaluate(&common, &checkpoint, &corpus, policy),
        Command::Probe { common, corpus, checkpoints } => probe(&common, &corpus, &checkpoints),
        Command::Score { checkpoint, vocab, prompt, max_new, threshold, out } => {
            score(&checkpoint, &vocab, &prompt, max_new, threshold, out.as_deref())
        }
    }
}

fn settings(common: &Common) -> anyhow::Result<Settings> {
    let mut s = Settings::load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        s.set_seed(seed);
    }
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(s)
}

fn load_vocab(path: &Path) -> anyhow::Result<Vocab> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Vocab::read(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_split(dir: &Path, name: &str) -> anyhow::Result<Vec<LabeledSample>> {
    let path = dir.join(name);
    let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    read_corpus(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))
}

fn load_checkpoint(path: &Path, vocab: Option<&Vocab>) -> anyhow::Result<Checkpoint> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(v) = vocab {
        if ck.model.config.vocab_size != v.len() {
            return Err(hallumon::Error::ConfigMismatch(format!(
                "{} has vocab_size {} but the corpus vocabulary has {} words",
                path.display(),
                ck.model.config.vocab_size,
                v.len()
            ))
            .into());
        }
    }
    Ok(ck)
}

fn write_log(path: &Path, log: &[EpochLog]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in log {
        writeln!(w, "{}", l.line())?;
    }
    w.flush()?;
    Ok(())
}

fn gen_corpus(common: &Common) -> anyhow::Result<()> {
    let s = settings(common)?;
    let mut m = RunManifest::start("gen-corpus", s.seed());
    m.config("", s.corpus_pairs());
    let corpus = build_corpus(&s.corpus)?;
    let out = &common.out;
    let mut w = BufWriter::new(File::create(out.join(VOCAB_FILE))?);
    corpus.vocab.write(&mut w)?;
    w.flush()?;
    for (name, split) in [(TRAIN_FILE, &corpus.train), (TEST_FILE, &corpus.test)] {
        write_corpus(BufWriter::new(File::create(out.join(name))?), split)?;
    }
    m.outputs = [VOCAB_FILE, TRAIN_FILE, TEST_FILE].iter().map(|f| out.join(f)).collect();
    m.write(out)?;
    println!("vocab {} words, {} train, {} test samples", corpus.vocab.len(), corpus.train.len(), corpus.test.len());
    Ok(())
}

fn pretrain(common: &Common, corpus: &Path, epochs: Option<usize>) -> anyhow::Result<()> {
    let mut s = settings(common)?;
    if let Some(e) = epochs {
        s.pretrain.epochs = e;
    }
    let vocab = load_vocab(&corpus.join(VOCAB_FILE))?;
    let data = load_split(corpus, TRAIN_FILE)?;
    let mut cfg = s.model.clone();
    cfg.vocab_size = vocab.len();
    cfg.keep_lm_head = true;
    let mut m = RunManifest::start("pretrain", s.seed());
    m.config("model.", cfg.to_pairs());
    m.config("pretrain.", s.pretrain.to_pairs());
    m.inputs = vec![corpus.join(VOCAB_FILE), corpus.join(TRAIN_FILE)];

    let model = Model::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(s.seed()))?;
    let trained = pretrain_base(model, &data, &s.pretrain)?;
    for l in &trained.log {
        println!("{}", l.line());
    }
    let out = &common.out;
    Checkpoint { model: trained.model, head: None }.save(&out.join(CHECKPOINT_FILE))?;
    write_log(&out.join(LOG_FILE), &trained.log)?;
    m.outputs = vec![out.join(CHECKPOINT_FILE), out.join(LOG_FILE)];
    m.write(out)?;
    Ok(())
}

fn resolve_layer(spec: &str, n_layers: usize) -> anyhow::Result<usize> {
    let layer = match spec {
        "mid" => n_layers / 2,
        "last" => n_layers,
        _ => spec.parse().map_err(|_| Usage(format!("--detect-layer expects mid, last or an index, got `{spec}`")))?,
    };
    if layer > n_layers {
        bail!(Usage(format!("--detect-layer {layer} exceeds the {n_layers} layers of the checkpoint")));
    }
    Ok(layer)
}

fn fine_tune(
    common: &Common,
    corpus: &Path,
    base: &Path,
    mode: Option<ModeArg>,
    lambda: Option<f64>,
    epochs: Option<usize>,
    detect_layer: Option<&str>,
) -> anyhow::Result<()> {
    let mut s = settings(common)?;
    if let Some(md) = mode {
        s.train.mode = md.into();
    }
    if let Some(l) = lambda {
        s.train.lambda = l;
    }
    if let Some(e) = epochs {
        s.train.epochs = e;
    }
    s.train.validate()?;
    let vocab = load_vocab(&corpus.join(VOCAB_FILE))?;
    let data = load_split(corpus, TRAIN_FILE)?;
    let ck = load_checkpoint(base, Some(&vocab))?;
    let mut model = ck.model;
    if let Some(spec) = detect_layer {
        model.config.detect_layer = resolve_layer(spec, model.config.n_layers)?;
    }
    let mut m = RunManifest::start("train", s.seed());
    m.config("model.", model.config.to_pairs());
    m.config("train.", s.train.to_pairs());
    m.inputs = vec![corpus.join(VOCAB_FILE), corpus.join(TRAIN_FILE), base.to_path_buf()];

    let trained = train(model, ck.head, &data, &s.train)?;
    for l in &trained.log {
        println!("{}", l.line());
    }
    let out = &common.out;
    Checkpoint { model: trained.model, head: trained.head }.save(&out.join(CHECKPOINT_FILE))?;
    write_log(&out.join(LOG_FILE), &trained.log)?;
    m.outputs = vec![out.join(CHECKPOINT_FILE), out.join(LOG_FILE)];
    m.write(out)?;
    Ok(())
}

fn evaluate(common: &Common, checkpoint: &Path, corpus: &Path, policy: PolicyArg) -> anyhow::Result<()> {
    let s = settings(common)?;
    let vocab = load_vocab(&corpus.join(VOCAB_FILE))?;
    let test = load_split(corpus, TEST_FILE)?;
    let ck = load_checkpoint(checkpoint, Some(&vocab))?;
    let model = &ck.model;
    let mut m = RunManifest::start("eval", s.seed());
    m.config("model.", model.config.to_pairs());
    m.config("", [("policy", format!("{policy:?}").to_lowercase())]);
    m.inputs = vec![checkpoint.to_path_buf(), corpus.join(VOCAB_FILE), corpus.join(TEST_FILE)];

    let mut report = EvalReport::default();
    if let Some(head) = &ck.head {
        let set = score_with_head(model, head, &test)?;
        report.token_auroc = Some(set.token_auroc()?);
        report.response_auroc = Some(set.response_auroc()?);
    }
    if model.config.keep_lm_head {
        let set = score_with_perplexity(model, &test)?;
        report.perplexity_token_auroc = Some(set.token_auroc()?);
        report.perplexity_response_auroc = Some(set.response_auroc()?);
    }
    let greedy = Greedy(model);
    let oracle = Oracle(&vocab);
    let p: &dyn Policy = match policy {
        PolicyArg::Greedy => &greedy,
        PolicyArg::Oracle => &oracle,
        PolicyArg::Refuse => &AlwaysRefuse,
    };
    report.generation = generation_metrics(p, &test, &vocab)?;
    report.probe_curve = layer_curve(model, &test, s.seed())?;

    let out = &common.out;
    let mut w = BufWriter::new(File::create(out.join(REPORT_FILE))?);
    report.write(&mut w)?;
    w.flush()?;
    print!("{}", report.table());
    for warning in &report.generation.warnings {
        eprintln!("warning: {warning}");
    }
    m.outputs = vec![out.join(REPORT_FILE)];
    m.write(out)?;
    Ok(())
}

fn probe(common: &Common, corpus: &Path, checkpoints: &[PathBuf]) -> anyhow::Result<()> {
    let s = settings(common)?;
    let vocab = load_vocab(&corpus.join(VOCAB_FILE))?;
    let test = load_split(corpus, TEST_FILE)?;
    let models = checkpoints.iter().map(|p| load_checkpoint(p, Some(&vocab)).map(|c| c.model)).collect::<anyhow::Result<Vec<_>>>()?;
    let mut m = RunManifest::start("probe", s.seed());
    m.inputs = checkpoints.to_vec();
    m.inputs.push(corpus.join(TEST_FILE));
    let out = &common.out;
    for (i, model) in models.iter().enumerate() {
        let table = curve_table(&layer_curve(model, &test, s.seed())?);
        let path = out.join(format!("curve_{i}.tsv"));
        fs::write(&path, &table)?;
        println!("# {}\n{table}", checkpoints[i].display());
        m.outputs.push(path);
    }
    if let [base, det, text] = &models[..] {
        let [a, b, c] = compare_procedures(base, det, text, &test, s.seed())?;
        let table = format!("procedure\tauroc\nbase\t{a:.6}\ndet_head_ft\t{b:.6}\ntext_ft\t{c:.6}\n");
        let path = out.join("comparison.tsv");
        fs::write(&path, &table)?;
        println!("# middle layer {}\n{table}", base.config.mid_layer());
        m.outputs.push(path);
    }
    m.write(out)?;
    Ok(())
}

fn score(checkpoint: &Path, vocab: &Path, prompt: &str, max_new: usize, threshold: f64, out: Option<&Path>) -> anyhow::Result<()> {
    if !(0.0..=1.0).contains(&threshold) {
        bail!(Usage(format!("--threshold must lie in [0, 1], got {threshold}")));
    }
    let vocab_words = load_vocab(vocab)?;
    let ck = load_checkpoint(checkpoint, Some(&vocab_words))?;
    let head: &DetectionHead<f32> = ck.head.as_ref().ok_or(hallumon::Error::NoDetectionHead)?;
    let model = &ck.model;
    let text = if prompt.trim_start().starts_with("<bos>") { prompt.to_string() } else { format!("<bos> {prompt} <sep>") };
    let ids = vocab_words.encode(&text)?;
    let mut m = RunManifest::start("score", 0);
    m.inputs = vec![checkpoint.to_path_buf(), vocab.to_path_buf()];
    m.config("", [("max_new", max_new.to_string()), ("threshold", threshold.to_string())]);

    let layer = model.config.detect_layer;
    let stdout = std::io::stdout();
    let mut io_err = None;
    let mut failure = None;
    model.generate_stream(&ids, max_new, |tok, hs| {
        if io_err.is_some() || failure.is_some() {
            return;
        }
        let t = hs.len - 1;
        let p = match head.detect(hs.at(layer, t)) {
            Ok(p) => p as f64,
            Err(e) => {
                failure = Some(e);
                return;
            }
        };
        let word = vocab_words.token(tok).unwrap_or("<unk>");
        let flag = if p > threshold { "\t*" } else { "" };
        let mut lock = stdout.lock();
        if let Err(e) = writeln!(lock, "{word}\t{p:.6}{flag}").and_then(|_| lock.flush()) {
            io_err = Some(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    if let Some(e) = io_err {
        return Err(e.into());
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        m.write(dir)?;
    }
    Ok(())
}
