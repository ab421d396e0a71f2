//! Command-line front end: `train`, `eval`, `sweep`, `interpolate`, `sample`
//! and `selfcheck`.
//!
//! Every command that writes files also writes `manifest.json`, which echoes
//! the resolved configuration, the corpus and vocabulary hashes, and a SHA-256
//! of each artifact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Fault;
use crate::checkpoint;
use crate::corpus::{build_vocab, generate_synthetic, load_text, CorpusSplit, SplitName, SyntheticSpec, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalConfig, MetricsReport};
use crate::model::VaeModel;
use crate::selfcheck;
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// Where sentences come from: a directory of text files, or the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Directory holding `train.txt` and optionally `dev.txt`, `test.txt`
    /// and `vocab.txt`. The synthetic generator is used when absent.
    pub dir: Option<PathBuf>,
    /// Vocabulary size cap (reserved tokens included) when building from text.
    pub max_vocab: usize,
    pub synthetic: SyntheticSpec,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            dir: None,
            max_vocab: 10_000,
            synthetic: SyntheticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            reason: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        if self.corpus.dir.is_none() {
            self.corpus.synthetic.validate()?;
        }
        Ok(())
    }
}

pub struct Data {
    pub vocab: Vocabulary,
    pub split: CorpusSplit,
}

impl Data {
    pub fn hashes(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("train".into(), self.split.hash(SplitName::Train));
        m.insert("dev".into(), self.split.hash(SplitName::Dev));
        m.insert("test".into(), self.split.hash(SplitName::Test));
        m.insert("vocab".into(), self.vocab.hash());
        m
    }
}

pub fn load_data(cfg: &CorpusConfig) -> Result<Data> {
    let Some(dir) = &cfg.dir else {
        let c = generate_synthetic(&cfg.synthetic)?;
        return Ok(Data {
            vocab: c.vocab,
            split: c.split,
        });
    };
    let read = |name: &str, required: bool| -> Result<Vec<Vec<String>>> {
        let path = dir.join(name);
        if !required && !path.exists() {
            return Ok(Vec::new());
        }
        load_text(&path)
    };
    let train = read("train.txt", true)?;
    let dev = read("dev.txt", false)?;
    let test = read("test.txt", false)?;
    let vocab_path = dir.join("vocab.txt");
    let vocab = if vocab_path.exists() {
        Vocabulary::load(&vocab_path)?
    } else {
        build_vocab(&train, cfg.max_vocab)?
    };
    let encode = |part: &[Vec<String>]| part.iter().map(|s| vocab.encode(s)).collect();
    let split = CorpusSplit {
        train: encode(&train),
        dev: encode(&dev),
        test: encode(&test),
        source: dir.display().to_string(),
    };
    split.validate(vocab.len())?;
    Ok(Data { vocab, split })
}

/// Provenance record written next to every set of artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: RunConfig,
    pub corpus_source: String,
    pub hashes: BTreeMap<String, String>,
    /// SHA-256 of each artifact written by the command.
    pub artifacts: BTreeMap<String, String>,
    pub status: String,
    pub extra: serde_json::Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct OutDir {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl OutDir {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            artifacts: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Contract(e.to_string()))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn manifest(
        mut self,
        command: &str,
        seed: u64,
        config: &RunConfig,
        data: &Data,
        status: &str,
        extra: serde_json::Value,
    ) -> Result<()> {
        let m = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config: config.clone(),
            corpus_source: data.split.source.clone(),
            hashes: data.hashes(),
            artifacts: std::mem::take(&mut self.artifacts),
            status: status.to_string(),
            extra,
        };
        self.write_json("manifest.json", &m)?;
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "fdvae", version, about = "Text VAEs with fraternal-dropout decoder regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Shared {
    /// TOML configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed (overrides the configuration)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory of train.txt/dev.txt/test.txt (overrides the configuration)
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub keep_prob: Option<f64>,
    #[arg(long)]
    pub free_bits: Option<f64>,
    #[arg(long)]
    pub pretrain_epochs: Option<usize>,
    #[arg(long)]
    pub warmup_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints, a per-epoch log and a manifest
    Train {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Evaluate a checkpoint on one split
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train and evaluate one model per alpha
    Sweep {
        #[command(flatten)]
        shared: Shared,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Comma-separated alpha values
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,0.5,1.0,2.0")]
        alphas: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Greedy decodes along a line between two prior samples
    Interpolate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Greedy decodes of prior samples
    Sample {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Gradient, KL and BLEU self-tests
    Selfcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn resolve(shared: &Shared, base: Option<RunConfig>, overrides: Option<&TrainOverrides>) -> Result<RunConfig> {
    let mut cfg = match (&shared.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(base)) => base,
        (None, None) => RunConfig::default(),
    };
    if let Some(dir) = &shared.corpus {
        cfg.corpus.dir = Some(dir.clone());
    }
    if let Some(seed) = shared.seed {
        cfg.train.seed = seed;
    }
    if let Some(o) = overrides {
        let t = &mut cfg.train;
        if let Some(v) = o.epochs {
            t.epochs = v;
        }
        if let Some(v) = o.lr {
            t.lr = v;
        }
        if let Some(v) = o.alpha {
            t.alpha = v;
        }
        if let Some(v) = o.keep_prob {
            t.keep_prob = v;
        }
        if let Some(v) = o.free_bits {
            t.free_bits = v;
        }
        if let Some(v) = o.pretrain_epochs {
            t.pretrain_epochs = v;
        }
        if let Some(v) = o.warmup_steps {
            t.warmup_steps = Some(v);
        }
        if let Some(v) = o.batch_size {
            t.batch_size = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint together with the configuration it was trained under
/// (unless `--config` replaces it) and the matching corpus.
fn open_checkpoint(shared: &Shared, path: &Path) -> Result<(VaeModel, RunConfig, Data)> {
    let (_, header) = checkpoint::load(path)?;
    let stored = serde_json::from_value::<RunConfig>(header.meta.clone()).ok();
    let cfg = resolve(shared, stored, None)?;
    let data = load_data(&cfg.corpus)?;
    let (model, _) = checkpoint::load_for_vocab(path, &data.vocab.hash())?;
    Ok((model, cfg, data))
}

fn log_lines(outcome: &TrainOutcome) -> Result<String> {
    let mut out = String::new();
    for r in &outcome.log {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Contract(e.to_string()))?);
        out.push('\n');
        if Some(r.epoch) == outcome.reset_after_epoch {
            out.push_str(&format!("{{\"event\":\"decoder_reset\",\"after_epoch\":{}}}\n", r.epoch));
        }
    }
    Ok(out)
}

/// Trains under `cfg` and writes the run's artifacts into `out_dir`.
pub fn train_run(cfg: &RunConfig, data: &Data, out_dir: &Path, command: &str) -> Result<TrainOutcome> {
    let outcome = train(&data.split, data.vocab.len(), &cfg.train)?;
    let mut out = OutDir::create(out_dir)?;
    let meta = serde_json::to_value(cfg).map_err(|e| Error::Contract(e.to_string()))?;
    let hash = data.vocab.hash();
    out.write("final.ckpt", &checkpoint::to_bytes(&outcome.model, &hash, meta.clone())?)?;
    out.write("best.ckpt", &checkpoint::to_bytes(&outcome.best, &hash, meta)?)?;
    let mut vocab = data.vocab.tokens().join("\n");
    vocab.push('\n');
    out.write("vocab.txt", vocab.as_bytes())?;
    let log = log_lines(&outcome)?;
    // wall-clock times make the log differ between runs; it is not hashed
    let log_path = out_dir.join("train_log.ndjson");
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    let status = if outcome.diverged.is_some() { "diverged" } else { "ok" };
    let extra = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "steps": outcome.steps,
        "reset_after_epoch": outcome.reset_after_epoch,
        "diverged": outcome.diverged,
    });
    out.manifest(command, cfg.train.seed, cfg, data, status, extra)?;
    Ok(outcome)
}

fn print_epochs(outcome: &TrainOutcome) {
    eprintln!(
        "{:>5} {:>8} {:>10} {:>8} {:>8} {:>6} {:>9} {:>10} {:>9}",
        "epoch", "phase", "recon", "kl_raw", "kl_eff", "beta", "penalty", "total", "dev_nll"
    );
    for r in &outcome.log {
        let phase = match r.phase {
            crate::trainer::Phase::Pretrain => "pretrain",
            crate::trainer::Phase::Vae => "vae",
        };
        let dev = r.dev_nll.map_or("-".to_string(), |v| format!("{v:.3}"));
        eprintln!(
            "{:>5} {:>8} {:>10.4} {:>8.4} {:>8.4} {:>6.3} {:>9.5} {:>10.4} {:>9}",
            r.epoch, phase, r.reconstruction, r.kl_raw, r.kl_effective, r.beta, r.fraternal_penalty, r.total, dev
        );
        if Some(r.epoch) == outcome.reset_after_epoch {
            eprintln!("-- decoder reset after epoch {} --", r.epoch);
        }
    }
}

fn diverged_error(outcome: &TrainOutcome) -> Option<Error> {
    outcome.diverged.map(|d| Error::Diverged {
        epoch: d.epoch,
        step: d.step,
        loss: f64::NAN,
    })
}

fn seed_of(shared: &Shared, cfg: &RunConfig) -> u64 {
    shared.seed.unwrap_or(cfg.train.seed)
}

fn max_len_default(data: &Data, requested: Option<usize>) -> usize {
    requested.unwrap_or_else(|| {
        let longest = data.split.train.iter().map(Vec::len).max().unwrap_or(10);
        2 * longest
    })
}

/// Greedy decodes of `z(t) = (1 - t) z1 + t z2` at `steps` evenly spaced `t`.
pub fn interpolate(model: &VaeModel, steps: usize, max_len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if steps < 2 {
        return Err(Error::config("steps", "must be at least 2"));
    }
    let k = model.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z1: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    let z2: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
    (0..steps)
        .map(|i| {
            let t = i as f64 / (steps - 1) as f64;
            let z: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| (1.0 - t) * a + t * b).collect();
            model.decode_greedy(&z, max_len)
        })
        .collect()
}

pub fn sample(model: &VaeModel, count: usize, max_len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let k = model.latent_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            model.decode_greedy(&z, max_len)
        })
        .collect()
}

fn write_sentences(
    vocab: &Vocabulary,
    sentences: &[Vec<usize>],
    out_dir: Option<&Path>,
    file: &str,
    command: &str,
    seed: u64,
    cfg: &RunConfig,
    data: &Data,
) -> Result<()> {
    let mut text = String::new();
    for s in sentences {
        text.push_str(&vocab.decode(s).join(" "));
        text.push('\n');
    }
    print!("{text}");
    if let Some(dir) = out_dir {
        let mut out = OutDir::create(dir)?;
        out.write(file, text.as_bytes())?;
        out.manifest(command, seed, cfg, data, "ok", serde_json::Value::Null)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut s = format!("{:>6} {}\n", "alpha", MetricsReport::header());
    for r in rows {
        match (&r.report, &r.error) {
            (Some(rep), _) => s.push_str(&format!("{:>6} {}\n", r.alpha, rep.row())),
            (None, Some(e)) => s.push_str(&format!("{:>6} FAILED: {e}\n", r.alpha)),
            (None, None) => s.push_str(&format!("{:>6} FAILED\n", r.alpha)),
        }
    }
    s
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            shared,
            overrides,
            out_dir,
        } => {
            let cfg = resolve(&shared, None, Some(&overrides))?;
            let data = load_data(&cfg.corpus)?;
            let outcome = train_run(&cfg, &data, &out_dir, "train")?;
            print_epochs(&outcome);
            if let Some(e) = diverged_error(&outcome) {
                return Err(e);
            }
            println!("wrote {}", out_dir.display());
            Ok(())
        }
        Command::Eval {
            shared,
            checkpoint,
            split,
            out_dir,
        } => {
            let split: SplitName = split.parse()?;
            let before = fs::read(&checkpoint).map_err(|e| Error::io(&checkpoint, e))?;
            let (model, cfg, data) = open_checkpoint(&shared, &checkpoint)?;
            let seed = seed_of(&shared, &cfg);
            let report = evaluate(&model, data.split.get(split), &cfg.eval, seed)?;
            println!("{}", MetricsReport::header());
            println!("{}", report.row());
            if let Some(dir) = out_dir {
                let mut out = OutDir::create(&dir)?;
                out.write_json("report.json", &report)?;
                let extra = serde_json::json!({
                    "checkpoint_sha256": sha256_hex(&before),
                    "split": split,
                });
                out.manifest("eval", seed, &cfg, &data, "ok", extra)?;
            }
            Ok(())
        }
        Command::Sweep {
            shared,
            overrides,
            alphas,
            out_dir,
        } => {
            let base = resolve(&shared, None, Some(&overrides))?;
            let data = load_data(&base.corpus)?;
            if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0)) {
                return Err(Error::config("alphas", format!("must be >= 0, got {a}")));
            }
            let mut rows = Vec::new();
            for &alpha in &alphas {
                let mut cfg = base.clone();
                cfg.train.alpha = alpha;
                let dir = out_dir.join(format!("alpha_{alpha}"));
                let result = train_run(&cfg, &data, &dir, "sweep").and_then(|o| {
                    match diverged_error(&o) {
                        Some(e) => Err(e),
                        None => evaluate(&o.model, &data.split.test, &cfg.eval, cfg.train.seed),
                    }
                });
                rows.push(match result {
                    Ok(report) => SweepRow {
                        alpha,
                        report: Some(report),
                        error: None,
                    },
                    Err(e) => SweepRow {
                        alpha,
                        report: None,
                        error: Some(e.to_string()),
                    },
                });
            }
            let table = format_sweep(&rows);
            print!("{table}");
            let mut out = OutDir::create(&out_dir)?;
            out.write_json("sweep.json", &rows)?;
            out.write("sweep.txt", table.as_bytes())?;
            let failed = rows.iter().filter(|r| r.report.is_none()).count();
            let status = if failed == 0 { "ok" } else { "partial" };
            out.manifest("sweep", base.train.seed, &base, &data, status, serde_json::json!({ "alphas": alphas }))?;
            Ok(())
        }
        Command::Interpolate {
            shared,
            checkpoint,
            steps,
            max_len,
            out_dir,
        } => {
            let (model, cfg, data) = open_checkpoint(&shared, &checkpoint)?;
            let seed = seed_of(&shared, &cfg);
            let lines = interpolate(&model, steps, max_len_default(&data, max_len), seed)?;
            write_sentences(&data.vocab, &lines, out_dir.as_deref(), "interpolation.txt", "interpolate", seed, &cfg, &data)
        }
        Command::Sample {
            shared,
            checkpoint,
            count,
            max_len,
            out_dir,
        } => {
            let (model, cfg, data) = open_checkpoint(&shared, &checkpoint)?;
            let seed = seed_of(&shared, &cfg);
            let lines = sample(&model, count, max_len_default(&data, max_len), seed)?;
            write_sentences(&data.vocab, &lines, out_dir.as_deref(), "samples.txt", "sample", seed, &cfg, &data)
        }
        Command::Selfcheck { inject_fault } => {
            let fault = inject_fault.then_some(Fault::SigmoidBackward);
            let report = selfcheck::run(fault)?;
            for c in &report.checks {
                let mark = if c.passed { "ok  " } else { "FAIL" };
                println!("{mark} {}: observed {}, expected {}", c.name, c.observed, c.expected);
            }
            if report.passed() {
                Ok(())
            } else {
                Err(Error::Contract(format!(
                    "{} self-check(s) failed",
                    report.checks.iter().filter(|c| !c.passed).count()
                )))
            }
        }
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_kind().code()
        }
    }
}
