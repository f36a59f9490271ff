//! `agp train | eval | budget | synth`.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 data error
//! (unreadable or inconsistent input, missing checkpoint), 3 gateway error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use agp_core::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError};
use agp_core::optimizer::{self, EvalError, RunState, TrainError};
use agp_core::profile::seed_prompt;
use agp_core::{
    dataset::sample_split, expected_calls, generate_synthetic_world, DatasetBundle, Llm, MockBackend,
    PromptState, RerankMode, SyntheticWorldSpec,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{looks_like_path, AppConfig, BackendKind};
use crate::formats::{load_bundle, write_bundle, LoadError};
use crate::http::{self, HttpBackend, ReqwestTransport};
use crate::parallel::ParallelGateway;
use crate::run_dir::{self, Checkpointer, RunDir, RunDirError};

/// Copy of the resolved configuration kept in every run directory.
pub const CONFIG_COPY: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "agp", version, about = "Optimize a shared user-profile prompt for LLM reranking")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the profile prompt and write a run directory.
    Train(TrainArgs),
    /// Score the eval split in one rerank mode.
    Eval(EvalArgs),
    /// Print the expected number of training calls.
    Budget(BudgetArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct BackendArgs {
    /// Overrides `backend` from the config.
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Concurrent gateway calls.
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Base URL of the chat-completion endpoint (http backend).
    #[arg(long)]
    pub base_url: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config; optional with --resume, where the run's copy is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue the run saved in --run-dir.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub history_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub patience: Option<u32>,
    /// Seed for the per-epoch shuffle.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub no_summarization: bool,
    /// Loss calls see only the ranking metric, not per-item positions.
    #[arg(long)]
    pub no_pbf: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Agp,
    Dir,
    Cot,
    Base,
}

impl From<ModeArg> for RerankMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Agp => RerankMode::Agp,
            ModeArg::Dir => RerankMode::Dir,
            ModeArg::Cot => RerankMode::Cot,
            ModeArg::Base => RerankMode::Base,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// TOML config; defaults to the run directory's copy.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Prompt version for `agp`; defaults to the best checkpoint.
    #[arg(long)]
    pub prompt_version: Option<u32>,
    #[arg(long)]
    pub history_len: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    #[arg(long)]
    pub batch_size: u64,
    #[arg(long)]
    pub n_train: u64,
    #[arg(long, default_value_t = 1)]
    pub epochs: u64,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML world spec; the built-in defaults when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Gateway(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Data(_) => 2,
            CliError::Gateway(_) => 3,
        }
    }
}

fn config_err(e: impl ToString) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err(e: impl ToString) -> CliError {
    CliError::Data(e.to_string())
}

impl From<RunDirError> for CliError {
    fn from(e: RunDirError) -> Self {
        match e {
            RunDirError::NotEmpty(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LoadError> for CliError {
    fn from(e: LoadError) -> Self {
        CliError::Data(e.to_string())
    }
}

/// Either backend behind one type so the pipeline is monomorphized once.
pub enum AnyBackend {
    Mock(MockBackend),
    Http(HttpBackend<ReqwestTransport>),
}

impl ChatBackend for AnyBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        match self {
            AnyBackend::Mock(b) => b.send(request),
            AnyBackend::Http(b) => b.send(request),
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Budget(a) => cmd_budget(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: &Path) -> Result<AppConfig, CliError> {
    AppConfig::load(path).map_err(config_err)
}

fn apply_backend(config: &mut AppConfig, args: &BackendArgs) {
    if let Some(b) = args.backend {
        config.backend = b;
    }
    if let Some(p) = args.parallelism {
        config.train.parallelism = p;
    }
}

pub fn build_gateway(config: &AppConfig, base_url: Option<&str>) -> Result<ParallelGateway<AnyBackend>, CliError> {
    let backend = match config.backend {
        BackendKind::Mock => AnyBackend::Mock(MockBackend::new(config.mock_world())),
        BackendKind::Http => AnyBackend::Http(http::from_env(&config.http, base_url).map_err(config_err)?),
    };
    Ok(ParallelGateway::new(backend, config.train.parallelism))
}

/// The dataset named by the config, with its train/eval split drawn.
pub fn build_bundle(config: &AppConfig) -> Result<DatasetBundle, CliError> {
    let full = match (&config.data, &config.synthetic) {
        (Some(paths), None) => load_bundle(&paths.users, &paths.rankings)?,
        (None, Some(spec)) => generate_synthetic_world(spec).map_err(data_err)?,
        _ => return Err(CliError::Config("give exactly one of [data] or [synthetic]".into())),
    };
    let s = &config.split;
    sample_split(&full, s.n_train, s.n_eval, s.seed, s.allow_overlap).map_err(data_err)
}

fn initial_prompt(config: &AppConfig) -> Result<PromptState, CliError> {
    if looks_like_path(&config.prompt) {
        let path = Path::new(&config.prompt);
        run_dir::read_prompt_file(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    } else {
        seed_prompt(&config.prompt).map_err(config_err)
    }
}

fn resolve_run_dir(flag: Option<PathBuf>, config: Option<&AppConfig>) -> Option<PathBuf> {
    flag.or_else(|| config.and_then(|c| c.run_dir.clone()))
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let run_path = match (&args.run_dir, &args.config) {
        (Some(dir), _) => dir.clone(),
        (None, Some(cfg)) => load_config(cfg)?
            .run_dir
            .ok_or_else(|| CliError::Config("no run directory: pass --run-dir or set run_dir".into()))?,
        (None, None) => return Err(CliError::Config("pass --config or --run-dir".into())),
    };

    let (mut config, dir, state) = if args.resume {
        let dir = RunDir::open(&run_path)?;
        let config_path = args.config.clone().unwrap_or_else(|| run_path.join(CONFIG_COPY));
        let config = load_config(&config_path)?;
        let state = dir.load_state()?;
        (config, dir, Some(state))
    } else {
        let cfg_path = args
            .config
            .as_ref()
            .ok_or_else(|| CliError::Config("a fresh run needs --config".into()))?;
        let mut config = load_config(cfg_path)?;
        let t = &mut config.train;
        if let Some(v) = args.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = args.history_len {
            t.history_len = v;
        }
        if let Some(v) = args.epochs {
            t.max_epochs = v;
        }
        if let Some(v) = args.patience {
            t.patience = v;
        }
        if let Some(v) = args.seed {
            t.seed = v;
        }
        if args.no_summarization {
            t.summarization_enabled = false;
        }
        if args.no_pbf {
            t.pbf_enabled = false;
        }
        apply_backend(&mut config, &args.backend);
        config.validate().map_err(config_err)?;
        let dir = RunDir::create_fresh(&run_path)?;
        (config, dir, None)
    };
    if args.resume {
        apply_backend(&mut config, &args.backend);
        config.validate().map_err(config_err)?;
    }

    let bundle = build_bundle(&config)?;
    let state = match state {
        Some(s) => {
            if s.is_finished() {
                println!("run already finished; nothing to resume");
                print_train_summary(&s);
                return Ok(());
            }
            log::info!("resuming epoch {} at batch {}", s.epoch, s.next_batch);
            s
        }
        None => {
            config.train.validate(bundle.split.train.len()).map_err(|e| match e {
                TrainError::Config(m) => CliError::Config(m),
                other => data_err(other),
            })?;
            let seed = initial_prompt(&config)?;
            let text = toml::to_string(&config).map_err(config_err)?;
            std::fs::write(dir.path().join(CONFIG_COPY), text)
                .map_err(|e| CliError::Data(format!("{}: {e}", dir.path().display())))?;
            let state = RunState::new(config.train.clone(), seed);
            dir.save(&state)?;
            state
        }
    };

    let llm = build_gateway(&config, args.backend.base_url.as_deref())?;
    let mut checkpoints = Checkpointer::new(&dir);
    let result = optimizer::resume(&bundle, state, &llm, &mut checkpoints);
    if let Some(e) = checkpoints.error.take() {
        return Err(e.into());
    }
    match result {
        Ok(state) => {
            dir.save(&state)?;
            print_train_summary(&state);
            println!("run directory: {}", dir.path().display());
            Ok(())
        }
        Err(TrainError::Gateway { source, state }) => {
            dir.save(&state)?;
            Err(CliError::Gateway(format!(
                "{source}\nprogress saved; continue with: agp train --resume --run-dir {}",
                dir.path().display()
            )))
        }
        Err(TrainError::Config(m)) => Err(CliError::Config(m)),
        Err(e @ TrainError::Data(_)) => Err(data_err(e)),
    }
}

fn print_train_summary(state: &RunState) {
    print!("{}", run_dir::epoch_table(&state.metrics));
    let best = state.best_prompt();
    let mut line = format!("best prompt: v{}", best.version);
    if let Some(b) = state.best {
        let _ = write!(line, " (score {:.4}, epoch {})", b.score, b.epoch);
    }
    println!("{line}");
    if let Some(reason) = state.stopped {
        println!("stopped: {}", serde_json::to_string(&reason).unwrap_or_default().trim_matches('"'));
    }
    println!(
        "gateway calls: training {}, validation {}",
        state.training_calls.total(),
        state.validation_calls.total()
    );
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let config_path = match (&args.config, &args.run_dir) {
        (Some(c), _) => c.clone(),
        (None, Some(dir)) => dir.join(CONFIG_COPY),
        (None, None) => return Err(CliError::Config("pass --config or --run-dir".into())),
    };
    let mut config = load_config(&config_path)?;
    apply_backend(&mut config, &args.backend);
    config.validate().map_err(config_err)?;
    let mode = RerankMode::from(args.mode);
    let run_path = resolve_run_dir(args.run_dir.clone(), Some(&config));

    let state = match &run_path {
        Some(p) if p.join(run_dir::STATE_FILE).is_file() => Some(RunDir::open(p)?.load_state()?),
        _ => None,
    };
    let prompt = match (mode, &state) {
        (RerankMode::Agp, None) => {
            let where_ = run_path.as_deref().map(|p| p.display().to_string()).unwrap_or_else(|| "<none>".into());
            return Err(CliError::Data(format!("no checkpoint in run directory {where_}; run agp train first")));
        }
        (RerankMode::Agp, Some(s)) => Some(match args.prompt_version {
            Some(v) => s
                .prompt(v)
                .ok_or_else(|| CliError::Data(format!("prompt version {v} is not in the checkpoint")))?
                .clone(),
            None => s.best_prompt().clone(),
        }),
        _ => None,
    };
    let history_len = args
        .history_len
        .or_else(|| state.as_ref().map(|s| s.config.history_len))
        .unwrap_or(config.train.history_len);

    let bundle = build_bundle(&config)?;
    let llm = build_gateway(&config, args.backend.base_url.as_deref())?;
    let eval = optimizer::evaluate_run(&bundle, prompt.as_ref(), mode, history_len, &llm).map_err(|e| match e {
        EvalError::Gateway(g) => CliError::Gateway(g.to_string()),
        EvalError::MissingPrompt => CliError::Data(e.to_string()),
        other => data_err(other),
    })?;

    print!("{}", eval.report.summary());
    if let Some(p) = &prompt {
        println!("prompt version:    v{}", p.version);
    }
    println!("gateway calls:     {}", llm.ledger().total());
    println!("mean N@10 = {:.4}", eval.report.mean_ndcg_at_k);
    if let Some(path) = run_path {
        let label = match &prompt {
            Some(p) => format!("agp_v{}", p.version),
            None => mode.as_str().to_string(),
        };
        let csv = run_dir::for_reports(&path)?.write_eval(&label, &eval)?;
        println!("report: {}", csv.display());
    }
    Ok(())
}

fn cmd_budget(args: BudgetArgs) -> Result<(), CliError> {
    if args.epochs == 0 {
        return Err(CliError::Config("epochs must be positive".into()));
    }
    let est = expected_calls(args.batch_size, args.n_train).map_err(config_err)?;
    println!("batch_size: {}  n_train: {}", args.batch_size, args.n_train);
    println!("epoch  calls");
    for e in 1..=args.epochs {
        println!("{e:>5}  {}", est.per_epoch);
    }
    println!("total  {}", est.per_epoch * args.epochs);
    if est.approximate {
        println!("note: batch size does not divide n_train; the last short batch is counted as full");
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<(), CliError> {
    let spec = match &args.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<SyntheticWorldSpec>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => SyntheticWorldSpec::default(),
    };
    let bundle = generate_synthetic_world(&spec).map_err(data_err)?;
    let (users, rankings) =
        write_bundle(&bundle, &args.out).map_err(|e| CliError::Data(format!("{}: {e}", args.out.display())))?;
    println!("wrote {} users to {}", bundle.users.len(), users.display());
    println!("wrote {} rankings to {}", bundle.rankings.len(), rankings.display());
    Ok(())
}
