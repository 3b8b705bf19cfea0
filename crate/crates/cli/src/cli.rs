//! Command line entry points.

use std::fmt;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use topklm::analysis::{
    curve_csv, default_curve_layers, frequency_weights, summary_csv, CurveRow, EntropyReport,
    ReportOptions,
};
use topklm::model::TopKPolicy;
use topklm::steering::{FilterOrder, GenerationParams, SteeringSite};
use topklm::sweep::{run_sweep, sweep_csv, SweepGrid};
use topklm::training::{mean_loss, synthetic_stories, train, Corpus, RunConfig, RunDir};

use crate::api::{self, GenerateRequest, SteerRequest};
use crate::registry::Registry;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Bad argument combinations found after parsing; reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(name = "topklm", version, about = "Train, analyze, steer and serve TopK language models")]
pub struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Only warnings and errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints, loss.csv and the validation split.
    Train(TrainArgs),
    /// Validation loss and perplexity of checkpoints.
    Eval(EvalArgs),
    /// Neuron entropy reports (cached under <run>/analysis).
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Follow one hidden dimension across checkpoints and layers (JSON).
    Trace(TraceArgs),
    /// Generate text, optionally with one steered neuron.
    Steer(SteerArgs),
    /// Serve the JSON API over a directory of runs.
    Serve(ServeArgs),
    /// Train and evaluate a grid of configurations; prints CSV.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Preset {
    /// D=128, L=6, k=16, two dense top layers.
    Desk,
    /// Desk shape without TopK layers.
    Dense,
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    /// UTF-8 text file to train on. Without it a synthetic story corpus is
    /// generated.
    #[arg(long)]
    pub corpus: Option<PathBuf>,

    /// Size of the synthetic corpus in bytes.
    #[arg(long, default_value_t = 5_000_000)]
    pub synthetic_bytes: usize,

    #[arg(long, default_value_t = 0)]
    pub synthetic_seed: u64,

    /// Trailing share of the corpus held out for validation.
    #[arg(long, default_value_t = 0.01)]
    pub val_fraction: f64,
}

impl CorpusArgs {
    fn load(&self) -> anyhow::Result<Corpus> {
        match &self.corpus {
            Some(path) => Corpus::from_file(path, self.val_fraction)
                .with_context(|| format!("reading corpus {}", path.display())),
            None => {
                log::info!(
                    "no --corpus given; generating {} bytes of synthetic stories",
                    self.synthetic_bytes
                );
                let text = synthetic_stories(self.synthetic_bytes, self.synthetic_seed);
                Ok(Corpus::from_bytes(text.as_bytes(), self.val_fraction)?)
            }
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run configuration (.toml or .json).
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,

    /// Built-in configuration used when --config is absent (default desk).
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,

    /// Output run directory.
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub corpus: CorpusArgs,

    /// Override the number of optimizer steps.
    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub checkpoint_every: Option<usize>,

    #[arg(long)]
    pub seed: Option<u64>,

    /// Replace an existing run in --out.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,

    /// Checkpoint step (default: latest).
    #[arg(long, conflicts_with = "all")]
    pub ckpt: Option<usize>,

    /// Evaluate every checkpoint.
    #[arg(long)]
    pub all: bool,

    /// Text file to evaluate on instead of the run's validation split.
    #[arg(long)]
    pub corpus: Option<PathBuf>,

    /// Window length (default: the training sequence length).
    #[arg(long)]
    pub seq_len: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum AnalyzeCommand {
    /// CSV `layer,neuron,h_token` (nats).
    TokenEntropy(AnalyzeArgs),
    /// CSV `layer,neuron,h_sem,subset_size,subset` (bits).
    SemanticEntropy(AnalyzeArgs),
    /// Per-layer mean and standard deviation of both entropies.
    Summary(AnalyzeArgs),
    /// Per-checkpoint layer means, CSV `step,layer,H_token_mean,H_sem_mean`.
    Curve(CurveArgs),
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub run: PathBuf,

    #[arg(long)]
    pub ckpt: Option<usize>,

    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// H_token from per-occurrence means instead of dividing by corpus length.
    #[arg(long)]
    pub occurrence_mean: bool,

    /// Histogram bins for H_sem.
    #[arg(long, default_value_t = topklm::analysis::DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Args, Debug)]
pub struct CurveArgs {
    #[arg(long)]
    pub run: PathBuf,

    /// Layers to report (default: last TopK layer and last layer).
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("query").required(true).args(["token", "ch"]))]
pub struct TraceArgs {
    #[arg(long)]
    pub run: PathBuf,

    /// Hidden dimension to follow.
    #[arg(long)]
    pub dim: usize,

    /// Query token id.
    #[arg(long)]
    pub token: Option<usize>,

    /// Query token as a single ASCII character.
    #[arg(long = "char")]
    pub ch: Option<char>,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_site(s: &str) -> Result<SteeringSite, String> {
    s.parse::<SteeringSite>().map_err(|e| e.to_string())
}

fn parse_filter_order(s: &str) -> Result<FilterOrder, String> {
    match s {
        "top-k-first" | "topk-topp" => Ok(FilterOrder::TopKThenTopP),
        "top-p-first" | "topp-topk" => Ok(FilterOrder::TopPThenTopK),
        _ => Err(format!("unknown filter order '{s}' (top-k-first or top-p-first)")),
    }
}

#[derive(Args, Debug)]
pub struct SteerArgs {
    #[arg(long)]
    pub run: PathBuf,

    #[arg(long)]
    pub ckpt: Option<usize>,

    #[arg(long, default_value = "Once upon a time,")]
    pub prompt: String,

    /// Layer of the steered neuron (0-based).
    #[arg(long, requires = "neuron")]
    pub layer: Option<usize>,

    /// Steered neuron (0-based).
    #[arg(long, requires = "layer")]
    pub neuron: Option<usize>,

    /// Offset added to the neuron at every position.
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    pub delta: f32,

    /// pre_topk or hidden (default: pre_topk on TopK layers).
    #[arg(long, value_parser = parse_site)]
    pub site: Option<SteeringSite>,

    #[arg(long, default_value_t = 0.7)]
    pub temperature: f32,

    #[arg(long, default_value_t = 0.9)]
    pub top_p: f32,

    #[arg(long, default_value_t = 50)]
    pub top_k: usize,

    #[arg(long, default_value_t = 128)]
    pub max_tokens: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// top-k-first or top-p-first.
    #[arg(long, value_parser = parse_filter_order, default_value = "top-k-first")]
    pub filter_order: FilterOrder,

    /// Print the full response as JSON.
    #[arg(long)]
    pub json: bool,

    /// Instead of one sample, score the steering effect over this many
    /// paired generations.
    #[arg(long, requires = "layer")]
    pub effect_samples: Option<usize>,

    /// Concept tokens for effect scoring, as literal characters (default:
    /// the neuron's selected vocabulary subset).
    #[arg(long, requires = "effect_samples")]
    pub concept: Option<String>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Directory holding run directories.
    #[arg(long, env = "TOPKLM_RUNS", default_value = "runs")]
    pub root: PathBuf,

    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,

    #[arg(long, default_value_t = 8080)]
    pub port: u16,
}

fn parse_axis(s: &str) -> Result<String, String> {
    SweepGrid::default()
        .add_axis(s)
        .map(|_| s.to_string())
        .map_err(|e| e.to_string())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Base configuration (default: desk preset).
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Axis `k=..`, `n_nontopk=..` or `hidden_dim=..` with comma-separated
    /// values; repeat for a cartesian grid.
    #[arg(long, required = true, value_parser = parse_axis)]
    pub grid: Vec<String>,

    #[command(flatten)]
    pub corpus: CorpusArgs,

    /// Optimizer steps per cell.
    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub checkpoint_every: Option<usize>,

    /// Keep each cell's run directory under this root.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Also write the CSV here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    init_logging(cli.verbose, cli.quiet);
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .try_init();
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Steer(a) => cmd_steer(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn base_config(config: Option<&Path>, preset: Option<Preset>) -> anyhow::Result<RunConfig> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::desk(),
    };
    if let Some(Preset::Dense) = preset {
        cfg.policy = TopKPolicy::dense(cfg.model.num_layers, cfg.model.hidden_dim);
    }
    Ok(cfg)
}

fn override_steps(cfg: &mut RunConfig, steps: Option<usize>, every: Option<usize>) {
    if let Some(s) = steps {
        cfg.train.total_steps = s;
        if every.is_none() {
            cfg.train.checkpoint_every = (s / 10).max(1);
        }
    }
    if let Some(e) = every {
        cfg.train.checkpoint_every = e;
    }
}

fn emit(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            topklm::training::write_atomic(p, text.as_bytes())
                .with_context(|| format!("writing {}", p.display()))?;
            log::info!("wrote {}", p.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = base_config(a.config.as_deref(), a.preset)?;
    override_steps(&mut cfg, a.steps, a.checkpoint_every);
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let dir = RunDir::new(&a.out);
    if dir.config_path().exists() {
        if !a.force {
            bail!("{} already holds a run; pass --force to replace it", a.out.display());
        }
        std::fs::remove_dir_all(&a.out)?;
    }
    let corpus = a.corpus.load()?;
    log::info!(
        "training {} steps on {} tokens ({} validation)",
        cfg.train.total_steps,
        corpus.train.len(),
        corpus.val.len()
    );
    let every = (cfg.train.total_steps / 20).max(1);
    let started = std::time::Instant::now();
    let outcome = train(&cfg, &corpus, Some(&dir), |r| {
        if (r.step + 1) % every == 0 {
            log::info!(
                "step {:>6}  loss {:.4}  lr {:.2e}  alpha {:.3}",
                r.step + 1,
                r.loss,
                r.lr,
                r.alpha
            );
        }
    })?;
    let last = outcome.final_checkpoint();
    let val = mean_loss(&outcome.model, &corpus.val, cfg.train.seq_len, last.meta.alpha)?;
    println!(
        "trained {} steps in {:.1}s; val loss {:.4} (ppl {:.3}); {} checkpoints in {}",
        cfg.train.total_steps,
        started.elapsed().as_secs_f64(),
        val,
        val.exp(),
        outcome.checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let dir = RunDir::new(&a.run);
    let cfg = dir
        .config()
        .with_context(|| format!("{} is not a run directory", a.run.display()))?;
    let tokens = match &a.corpus {
        Some(p) => topklm::training::tokenizer::encode(&std::fs::read(p).with_context(|| format!("reading {}", p.display()))?),
        None => dir.val_tokens()?,
    };
    let steps = dir.steps()?;
    let steps: Vec<usize> = if a.all {
        steps
    } else {
        let s = match a.ckpt {
            Some(s) => s,
            None => *steps.last().context("run has no checkpoints")?,
        };
        vec![s]
    };
    let seq_len = a.seq_len.unwrap_or(cfg.train.seq_len);
    let mut out = String::from("step,loss,ppl\n");
    for s in steps {
        let ck = dir.load(s)?;
        let loss = mean_loss(&ck.model()?, &tokens, seq_len, ck.meta.alpha)?;
        out.push_str(&format!("{s},{loss},{}\n", loss.exp()));
    }
    emit(None, &out)
}

fn open_run(path: &Path) -> anyhow::Result<(Registry, String)> {
    let (reg, name) = Registry::for_run_path(path)?;
    reg.run_dir(&name)
        .with_context(|| format!("{} is not a run directory", path.display()))?;
    Ok((reg, name))
}

fn cmd_analyze(cmd: AnalyzeCommand) -> anyhow::Result<()> {
    let a = match cmd {
        AnalyzeCommand::Curve(c) => return cmd_curve(c),
        AnalyzeCommand::TokenEntropy(ref a)
        | AnalyzeCommand::SemanticEntropy(ref a)
        | AnalyzeCommand::Summary(ref a) => a,
    };
    if a.bins == 0 {
        return Err(usage("--bins must be positive"));
    }
    let (reg, name) = open_run(&a.run)?;
    let step = reg.resolve_step(&name, a.ckpt)?;
    let analysis = reg.analyze(&name, step)?;
    let report = if a.occurrence_mean || a.bins != topklm::analysis::DEFAULT_BINS {
        let loaded = reg.model(&name, step)?;
        let probe = reg.probe(&name)?;
        let freqs = frequency_weights(&probe.tokens, loaded.model.config.vocab_size);
        EntropyReport::compute(
            &analysis.stats,
            &loaded.model.params.tok_embeddings,
            &freqs,
            ReportOptions {
                n_bins: a.bins,
                occurrence_mean: a.occurrence_mean,
            },
        )?
    } else {
        analysis.report.clone()
    };
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let text = match cmd {
        AnalyzeCommand::TokenEntropy(_) => {
            let mut s = String::from("layer,neuron,h_token\n");
            for n in &report.neurons {
                s.push_str(&format!("{},{},{}\n", n.layer, n.neuron, fmt(n.h_token)));
            }
            s
        }
        AnalyzeCommand::SemanticEntropy(_) => {
            let mut s = String::from("layer,neuron,h_sem,subset_size,subset\n");
            for n in &report.neurons {
                let ids: Vec<String> = n.subset.iter().map(|t| t.to_string()).collect();
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    n.layer,
                    n.neuron,
                    fmt(n.h_sem),
                    n.subset.len(),
                    ids.join(" ")
                ));
            }
            s
        }
        _ => summary_csv(&report.summary()),
    };
    emit(a.out.as_deref(), &text)
}

fn cmd_curve(c: CurveArgs) -> anyhow::Result<()> {
    let (reg, name) = open_run(&c.run)?;
    let dir = reg.run_dir(&name)?;
    let cfg = dir.config()?;
    let steps = dir.steps()?;
    if steps.len() < 3 {
        bail!("the entropy curve needs at least 3 checkpoints, found {}", steps.len());
    }
    let layers = c
        .layers
        .unwrap_or_else(|| default_curve_layers(cfg.model.num_layers, cfg.policy.n_nontopk));
    if let Some(&l) = layers.iter().find(|&&l| l >= cfg.model.num_layers) {
        return Err(usage(format!("layer {l} out of range")));
    }
    let mut rows = Vec::new();
    for s in steps {
        let a = reg.analyze(&name, s)?;
        for sum in a.report.summary().into_iter().filter(|r| layers.contains(&r.layer)) {
            rows.push(CurveRow {
                step: s,
                layer: sum.layer,
                h_token_mean: sum.h_token_mean,
                h_sem_mean: sum.h_sem_mean,
            });
        }
    }
    emit(c.out.as_deref(), &curve_csv(&rows))
}

fn cmd_trace(a: TraceArgs) -> anyhow::Result<()> {
    let token = match (a.token, a.ch) {
        (Some(t), _) => t,
        (None, Some(c)) if c.is_ascii() => c as usize,
        (None, Some(c)) => return Err(usage(format!("--char {c:?} is not a single byte"))),
        (None, None) => unreachable!("clap requires one of --token/--char"),
    };
    let (reg, name) = open_run(&a.run)?;
    let map = api::trace(&reg, &name, a.dim, token, true)?;
    let mut text = serde_json::to_string_pretty(&map)?;
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

fn cmd_steer(a: SteerArgs) -> anyhow::Result<()> {
    let (reg, name) = open_run(&a.run)?;
    let steering = match (a.layer, a.neuron) {
        (Some(layer), Some(neuron)) => vec![SteerRequest {
            layer,
            neuron,
            delta: a.delta,
            site: a.site,
        }],
        _ => Vec::new(),
    };
    let params = GenerationParams {
        temperature: a.temperature,
        top_p: a.top_p,
        top_k: a.top_k,
        max_tokens: a.max_tokens,
        seed: a.seed,
        filter_order: a.filter_order,
    };
    params.validate().map_err(|e| usage(e.to_string()))?;
    let req = GenerateRequest {
        run: name.clone(),
        ckpt: a.ckpt,
        prompt: a.prompt.clone(),
        steering,
        params,
        seed: None,
    };
    if let Some(n) = a.effect_samples {
        let concept = a.concept.as_ref().map(|s| s.bytes().map(|b| b as usize).collect());
        if concept.is_none() {
            let step = reg.resolve_step(&name, a.ckpt)?;
            reg.analyze(&name, step)?;
        }
        let score = api::effect(&reg, &req, n, concept)?;
        if let Some(w) = &score.warning {
            log::warn!("{w}");
        }
        println!("{}", serde_json::to_string_pretty(&score)?);
        return Ok(());
    }
    let resp = api::generate(&reg, &req)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&resp)?);
    } else {
        println!("{}", resp.text);
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> anyhow::Result<()> {
    if !a.root.is_dir() {
        bail!("registry root {} is not a directory", a.root.display());
    }
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| usage(format!("bad address {}:{}: {e}", a.host, a.port)))?;
    let registry = Arc::new(Registry::new(a.root));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(crate::server::serve(registry, addr))?;
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> anyhow::Result<()> {
    let mut base = base_config(a.config.as_deref(), None)?;
    override_steps(&mut base, a.steps, a.checkpoint_every);
    let mut grid = SweepGrid::default();
    for axis in &a.grid {
        grid.add_axis(axis).map_err(|e| usage(e.to_string()))?;
    }
    let corpus = a.corpus.load()?;
    let cells = grid.cells(&base).len();
    log::info!("sweeping {cells} cells of {} steps each", base.train.total_steps);
    let mut done = 0;
    let results = run_sweep(&base, &grid, &corpus, &corpus.val, a.out.as_deref(), |c| {
        done += 1;
        log::info!(
            "[{done}/{cells}] k={} n_nontopk={} D={}: {}",
            c.k,
            c.n_nontopk,
            c.hidden_dim,
            c.val_ppl.map(|p| format!("ppl {p:.3}")).unwrap_or_else(|| c.status.clone())
        );
    })?;
    let csv = sweep_csv(&results);
    if let Some(p) = &a.csv {
        emit(Some(p), &csv)?;
    }
    emit(None, &csv)
}
