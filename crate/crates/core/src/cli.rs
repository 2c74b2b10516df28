//! Commands behind the `signformer` binary.
//!
//! Every command writes line-oriented `key=value` or TSV text to the given
//! writer. Exit codes: 0 success, 1 usage or input error, 2 divergence.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bench::{bench_translate, forward_macs};
use crate::config::{preset, read_synth_spec, RunConfig, PRESETS};
use crate::data::{
    atomic_write, load_checkpoint, read_features, read_vocab, synth_generate, write_features, write_vocab,
    FeatureDataset, SynthSpec, Vocab,
};
use crate::decode::{bleu4, information_density, netscore, rouge_l, DecodeOptions, NetScoreWeights};
use crate::error::{Error, Result};
use crate::gradsuite::{run_suite, SuiteOptions};
use crate::model::{param_count, Signformer};
use crate::tensor::{clear_fault, inject_fault, FaultOp, Tensor};
use crate::train::{translate_all, Trainer};

#[derive(Parser, Debug)]
#[command(name = "signformer", version, about = "Gloss-free sign language translation on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on DIR/train.sgnf with DIR/dev.sgnf for model selection.
    Train(TrainArgs),
    /// Translate every sequence of a feature file.
    Translate(TranslateArgs),
    /// Score translations: BLEU-4, ROUGE-L, density, NetScore, size, MACs.
    Evaluate(EvaluateArgs),
    /// Per-component parameter counts.
    Params(ParamsArgs),
    /// Single-threaded translation latency and analytic MACs.
    Bench(BenchArgs),
    /// Finite-difference check of every op and layer.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

/// Where the run configuration comes from.
#[derive(Args, Debug, Default)]
pub struct ConfigSource {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Shipped preset: feather, feather_cope, mid, mid_cope, full, full_cope.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
    /// Override one key, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigSource {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Directory holding train.sgnf, dev.sgnf and vocab.txt.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for config.conf, metrics.txt and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from OUT/last.sgck.
    #[arg(long)]
    pub resume: bool,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 1.0)]
    pub length_penalty: f64,
    #[arg(long, default_value_t = 60)]
    pub max_len: usize,
}

impl DecodeArgs {
    fn options(&self) -> Result<DecodeOptions> {
        if self.beam == 0 {
            return Err(Error::config("beam", "must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len", "must be at least 1"));
        }
        Ok(DecodeOptions {
            beam: self.beam,
            alpha: self.length_penalty,
            max_len: self.max_len,
            ..DecodeOptions::default()
        })
    }
}

#[derive(Args, Debug)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// Vocabulary for printing words; defaults to vocab.txt beside the
    /// features, else token ids are printed.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    /// References, one line per sequence (`id<TAB>tokens` or `tokens`).
    /// Defaults to the targets stored in the feature file.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Score these translations instead of decoding, same format as refs.
    #[arg(long)]
    pub hyps: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub source: ConfigSource,
    /// Totals for all six presets next to their reference sizes.
    #[arg(long)]
    pub lineup: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Trained weights; otherwise a freshly initialized model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub source: ConfigSource,
    #[arg(long, default_value_t = 64)]
    pub frames: usize,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    /// Untimed runs before measuring; at least 3.
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[command(flatten)]
    pub decode: DecodeArgs,
    /// Seed for the random input frames and initial weights.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Also write the report to this file.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Random shapes tried per primitive op.
    #[arg(long, default_value_t = 3)]
    pub scale: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub h: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Corrupt one backward rule (fixture for testing the checker).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// `key = value` spec file; defaults apply otherwise.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Override one spec key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence { .. } => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Translate(a) => cmd_translate(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::Params(a) => cmd_params(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Gradcheck(a) => cmd_gradcheck(&a, out),
        Command::Synth(a) => cmd_synth(&a, out),
    }
}

/// Runs `f` inside a pool of `threads` workers, or the global pool.
fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match threads {
        None => f(),
        Some(0) => Err(Error::config("threads", "must be at least 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("cannot start {n} threads: {e}")))?
            .install(f),
    }
}

fn existing(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::invalid(format!("missing file {}", path.display())))
    }
}

fn load_model(path: &Path) -> Result<Signformer> {
    let ck = load_checkpoint(&existing(path.to_path_buf())?, None)?;
    Signformer::from_parameters(ck.config, ck.params)
}

fn check_features(model: &Signformer, ds: &FeatureDataset, path: &Path) -> Result<()> {
    let want = model.config().feature_dim;
    if !ds.is_empty() && ds.feature_dim != want {
        return Err(Error::invalid(format!(
            "{}: features have dimension {}, the model expects {want}",
            path.display(),
            ds.feature_dim
        )));
    }
    Ok(())
}

/// Explicit vocabulary, else `vocab.txt` beside the features.
fn find_vocab(explicit: Option<&Path>, features: &Path, model: &Signformer) -> Result<Option<Vocab>> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let p = features.parent().unwrap_or(Path::new(".")).join("vocab.txt");
            if !p.is_file() {
                return Ok(None);
            }
            p
        }
    };
    let vocab = read_vocab(&path)?;
    if vocab.len() != model.config().vocab {
        return Err(Error::invalid(format!(
            "{}: vocabulary has {} entries, the model has {}",
            path.display(),
            vocab.len(),
            model.config().vocab
        )));
    }
    Ok(Some(vocab))
}

fn render(tokens: &[u32], vocab: Option<&Vocab>) -> String {
    match vocab {
        Some(v) => tokens.iter().map(|&t| v.token(t)).collect::<Vec<_>>().join(" "),
        None => tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = a.source.resolve()?;
    let train = read_features(&existing(a.data.join("train.sgnf"))?)?;
    let dev = read_features(&existing(a.data.join("dev.sgnf"))?)?;
    let vocab = read_vocab(&existing(a.data.join("vocab.txt"))?)?;
    if !dev.is_empty() && dev.feature_dim != train.feature_dim {
        return Err(Error::invalid(format!(
            "dev features have dimension {}, train has {}",
            dev.feature_dim, train.feature_dim
        )));
    }
    train.check_vocab(vocab.len())?;
    dev.check_vocab(vocab.len())?;
    // The data decides the embedding and input sizes.
    cfg.model.vocab = vocab.len();
    cfg.model.feature_dim = train.feature_dim;
    cfg.validate()?;

    fs::create_dir_all(&a.out)?;
    atomic_write(&a.out.join("config.conf"), cfg.to_string().as_bytes())?;
    let last = a.out.join("last.sgck");
    let mut trainer = if a.resume && last.is_file() {
        let ck = load_checkpoint(&last, Some(&cfg.model))?;
        writeln!(out, "resume epoch={} step={}", ck.progress.epoch, ck.progress.step)?;
        Trainer::from_checkpoint(ck, cfg.train.clone())?
    } else {
        Trainer::new(Signformer::new(cfg.model.clone(), cfg.train.seed)?, cfg.train.clone())?
    };
    writeln!(
        out,
        "params={} optimizer={} train={} dev={}",
        trainer.model.param_count(),
        trainer.optimizer.kind.as_str(),
        train.len(),
        dev.len()
    )?;
    let metrics_path = a.out.join("metrics.txt");
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(a.resume)
        .truncate(!a.resume)
        .open(&metrics_path)?;

    let mut io_err = None;
    let history = with_threads(a.threads, || {
        trainer.fit(&train, &dev, Some(&a.out), |rec| {
            let res = writeln!(metrics, "{rec}").and_then(|_| metrics.flush());
            if let Err(e) = res {
                io_err.get_or_insert(e);
            }
        })
    })?;
    if let Some(e) = io_err {
        return Err(Error::invalid(format!("cannot write {}: {e}", metrics_path.display())));
    }
    for rec in &history {
        writeln!(out, "{rec}")?;
    }
    let best = trainer.progress.scheduler.best;
    if best.is_finite() {
        writeln!(out, "best_dev_bleu4={best:.4}")?;
    }
    writeln!(out, "steps={} epochs={}", trainer.progress.step, trainer.progress.epoch)?;
    Ok(())
}

pub fn cmd_translate(a: &TranslateArgs, out: &mut dyn Write) -> Result<()> {
    let opts = a.decode.options()?;
    let model = load_model(&a.checkpoint)?;
    let ds = read_features(&existing(a.features.clone())?)?;
    check_features(&model, &ds, &a.features)?;
    let vocab = find_vocab(a.vocab.as_deref(), &a.features, &model)?;
    let hyps = with_threads(a.threads, || translate_all(&model, &ds, &opts))?;
    for (s, h) in ds.sequences.iter().zip(&hyps) {
        writeln!(out, "{}\t{}", s.id, render(h, vocab.as_ref()))?;
    }
    Ok(())
}

/// Reads one token sequence per line; an `id<TAB>` prefix is dropped.
/// Words need a vocabulary, otherwise tokens must be integer ids.
fn read_token_lines(path: &Path, vocab: Option<&Vocab>) -> Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(existing(path.to_path_buf())?)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split_once('\t').map_or(line, |(_, b)| b);
        let toks = match vocab {
            Some(v) => v.encode(body),
            None => body
                .split_whitespace()
                .map(|t| {
                    t.parse::<u32>().map_err(|_| {
                        Error::invalid(format!(
                            "{}: line {}: `{t}` is not a token id (pass --vocab for words)",
                            path.display(),
                            i + 1
                        ))
                    })
                })
                .collect::<Result<_>>()?,
        };
        out.push(toks);
    }
    Ok(out)
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let opts = a.decode.options()?;
    let model = load_model(&a.checkpoint)?;
    let ds = read_features(&existing(a.features.clone())?)?;
    check_features(&model, &ds, &a.features)?;
    let vocab = find_vocab(a.vocab.as_deref(), &a.features, &model)?;
    let refs = match &a.refs {
        Some(p) => read_token_lines(p, vocab.as_ref())?,
        None => ds.sequences.iter().map(|s| s.target.clone()).collect(),
    };
    if refs.len() != ds.len() {
        return Err(Error::invalid(format!("{} references for {} sequences", refs.len(), ds.len())));
    }
    let hyps = match &a.hyps {
        Some(p) => read_token_lines(p, vocab.as_ref())?,
        None => with_threads(a.threads, || translate_all(&model, &ds, &opts))?,
    };
    if hyps.len() != ds.len() {
        return Err(Error::invalid(format!("{} hypotheses for {} sequences", hyps.len(), ds.len())));
    }
    if ds.is_empty() {
        return Err(Error::invalid("nothing to evaluate: the feature file is empty"));
    }
    let bleu = bleu4(&hyps, &refs)?;
    let rouge = rouge_l(&hyps, &refs)?;
    let params = model.param_count();
    let millions = params as f64 / 1e6;
    // Mean teacher-forced cost of producing each hypothesis plus EOS.
    let macs = ds
        .sequences
        .iter()
        .zip(&hyps)
        .map(|(s, h)| forward_macs(model.config(), s.len(), h.len() + 1).total() as f64)
        .sum::<f64>()
        / ds.len() as f64;
    writeln!(out, "bleu4={bleu:.4}")?;
    writeln!(out, "rouge_l={rouge:.4}")?;
    writeln!(out, "info_density={:.4}", information_density(bleu, millions)?)?;
    match netscore(bleu, millions, macs / 1e9, NetScoreWeights::default()) {
        Ok(v) => writeln!(out, "netscore={v:.4}")?,
        Err(_) => writeln!(out, "netscore=undefined")?,
    }
    writeln!(out, "params={params}")?;
    writeln!(out, "macs={}", macs.round() as u64)?;
    Ok(())
}

pub fn cmd_params(a: &ParamsArgs, out: &mut dyn Write) -> Result<()> {
    if a.lineup {
        writeln!(out, "preset\tparams\tmillions\ttarget_millions\tratio")?;
        for p in PRESETS {
            let mut cfg = p.config()?;
            cfg.apply_overrides(&a.source.overrides)?;
            let n = param_count(&cfg.model).total();
            let m = n as f64 / 1e6;
            writeln!(
                out,
                "{}\t{n}\t{m:.3}\t{:.2}\t{:.3}",
                p.label,
                p.target_millions,
                m / p.target_millions
            )?;
        }
        return Ok(());
    }
    let cfg = a.source.resolve()?;
    let breakdown = param_count(&cfg.model);
    writeln!(out, "{breakdown}")?;
    let runtime = Signformer::new(cfg.model, 0)?.param_count();
    writeln!(out, "runtime_total\t{runtime}")?;
    Ok(())
}

pub fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> Result<()> {
    if a.frames == 0 {
        return Err(Error::config("frames", "must be at least 1"));
    }
    if a.warmup < 3 {
        return Err(Error::config("warmup", "at least 3 untimed runs are required"));
    }
    let opts = a.decode.options()?;
    let model = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => Signformer::new(a.source.resolve()?.model, a.seed)?,
    };
    let f = model.config().feature_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let frames = Tensor::from_fn(&[a.frames, f], |_| StandardNormal.sample(&mut rng));
    let report = with_threads(Some(1), || bench_translate(&model, &frames, &opts, a.repeats, a.warmup))?;
    let text = format!("threads=1\n{report}\n");
    out.write_all(text.as_bytes())?;
    if let Some(p) = &a.report {
        atomic_write(p, text.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    let opts = SuiteOptions {
        h: a.h,
        tol: a.tol,
        shapes_per_op: a.scale.max(1),
        seed: a.seed,
        ..SuiteOptions::default()
    };
    if let Some(name) = &a.inject_fault {
        let op = FaultOp::parse(name).ok_or_else(|| Error::config("inject-fault", format!("unknown op `{name}`")))?;
        inject_fault(op);
    }
    let report = run_suite(&opts);
    clear_fault();
    let report = report?;
    writeln!(out, "check\tworst_rel_err\tstatus\tkinks_skipped")?;
    for r in report.per_op() {
        let status = if r.passed { "PASS" } else { "FAIL" };
        writeln!(out, "{}\t{:.3e}\t{status}\t{}", r.name, r.worst, r.kinks_skipped)?;
    }
    if report.passed() {
        writeln!(out, "result=PASS")?;
        return Ok(());
    }
    writeln!(out, "result=FAIL")?;
    let mut failed: Vec<String> = Vec::new();
    for e in report.failures() {
        let line = format!(
            "{} (max relative error {:.3e} in {})",
            e.name,
            e.report.worst(),
            e.worst_input().unwrap_or("?")
        );
        if !failed.contains(&line) {
            failed.push(line);
        }
    }
    Err(Error::invalid(format!("gradient check failed: {}", failed.join("; "))))
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut spec = match &a.spec {
        Some(p) => read_synth_spec(p)?,
        None => SynthSpec::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
        if !spec.set(k.trim(), v.trim())? {
            return Err(Error::config(k.trim(), "unknown spec key"));
        }
    }
    spec.validate()?;
    let splits = synth_generate(&spec)?;
    fs::create_dir_all(&a.out)?;
    for (name, ds) in [("train", &splits.train), ("dev", &splits.dev), ("test", &splits.test)] {
        write_features(&a.out.join(format!("{name}.sgnf")), ds)?;
        writeln!(out, "{name}={}", ds.len())?;
    }
    write_vocab(&a.out.join("vocab.txt"), &splits.vocab)?;
    atomic_write(&a.out.join("spec.conf"), spec.to_string().as_bytes())?;
    writeln!(out, "vocab={}", splits.vocab.len())?;
    Ok(())
}
