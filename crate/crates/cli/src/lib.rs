//! `promptbo` command line: runs, baselines, resume, reports and the
//! synthetic bound check.
//!
//! Settings come from built-in defaults, then an optional TOML file given by
//! `--config`, then flags. A later source overrides an earlier one field by
//! field.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use promptbo::baselines::BaselineMethod;
use promptbo::diagnostics::{load_runs, win_or_tie_matrix, write_report, LoadedRun, WinOrTie};
use promptbo::domain::RunConfig;
use promptbo::llm::{HttpBackend, HttpConfig, LlmBackend, RecordingBackend, ReplayBackend};
use promptbo::optimizer::{read_log, resume_run, run_method, AblationMode, Method, RunOutcome};
use promptbo::oracle::{
    theorem_bound_check, EvaluatorEndpoint, ExternalEvaluator, Objective, SyntheticInstance, SyntheticSpec, SyntheticWorld,
    TheoremOptions, WorldOptions,
};

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "promptbo", version, about = "Bayesian optimization of system prompts over LLM-elicited features")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run ReElicit or one of its ablations.
    Run(RunArgs),
    /// Run a baseline optimizer with the same budget.
    Baseline(BaselineArgs),
    /// Continue a run from its log after the last completed round.
    Resume(ResumeArgs),
    /// Write a report directory from a directory of run logs.
    Report(ReportArgs),
    /// Print the win-or-tie matrix over run logs matching a glob.
    Compare(CompareArgs),
    /// Check the embedding-error bounds on a synthetic instance.
    TheoremCheck(TheoremArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BackendKind {
    Http,
    Scripted,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ObjectiveKind {
    External,
    Synthetic,
}

fn parse_mode(s: &str) -> Result<AblationMode, String> {
    AblationMode::from_str(s)
}

fn parse_method(s: &str) -> Result<BaselineMethod, String> {
    BaselineMethod::from_str(s)
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Ablation mode: full, no_refinement, no_bo, static_features, independent_extraction [default: full]
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AblationMode>,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    /// ape, opro, promptbreeder or textgrad
    #[arg(long, value_parser = parse_method)]
    method: BaselineMethod,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct ResumeArgs {
    /// Run log to continue; its recorded configuration is used.
    #[arg(long)]
    log: PathBuf,
    /// TOML file; only its [backend] and [objective] tables are read.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    env: EnvArgs,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML file with run settings and optional [backend] / [objective] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the run log (JSONL) here.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    env: EnvArgs,
}

#[allow(non_snake_case)]
#[derive(Debug, Args)]
struct HyperArgs {
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Total evaluation budget N, must equal q*T [default: 30]
    #[arg(long = "N")]
    N: Option<usize>,
    /// Candidates per round q [default: 5]
    #[arg(long = "q")]
    q: Option<usize>,
    /// Evaluated batches T including the seed batch [default: 6]
    #[arg(long = "T")]
    T: Option<usize>,
    /// Feature elicitation rounds per iteration K [default: 5]
    #[arg(long = "K")]
    K: Option<usize>,
    /// Generation plus refinement budget per candidate M [default: 10]
    #[arg(long = "M")]
    M: Option<usize>,
    /// Refinement early-stop tolerance tau [default: 0.1]
    #[arg(long)]
    tau: Option<f64>,
    /// Extraction batch size b [default: 10]
    #[arg(long = "b")]
    b: Option<usize>,
    /// In-context example cap n_max [default: 12]
    #[arg(long = "n_max", alias = "n-max")]
    n_max: Option<usize>,
    /// Evolutionary population cap P_max [default: 20]
    #[arg(long = "P_max", alias = "p-max")]
    P_max: Option<usize>,
    /// Optimizer LLM sampling temperature [default: 0.7]
    #[arg(long)]
    temperature: Option<f64>,
    /// Task description shown to the optimizer LLM [default: empty]
    #[arg(long)]
    task_context: Option<String>,
    /// Completion token cap, 0 for none [default: 4096]
    #[arg(long)]
    max_tokens: Option<u32>,
    /// Concurrent LLM requests [default: 8]
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Largest accepted feature-set size [default: 8]
    #[arg(long)]
    d_max: Option<usize>,
    /// Repeated extractions per round for the stability diagnostic, 0 = off [default: 0]
    #[arg(long)]
    stability_repeats: Option<usize>,
    /// Evaluate a round's prompts concurrently when the evaluator allows it [default: false]
    #[arg(long)]
    parallel_evaluations: Option<bool>,
    /// GP hyperparameter restarts [default: 8]
    #[arg(long)]
    gp_restarts: Option<usize>,
    /// Acquisition optimizer restarts [default: 20]
    #[arg(long)]
    acq_restarts: Option<usize>,
    /// Acquisition raw samples [default: 512]
    #[arg(long)]
    raw_samples: Option<usize>,
    /// Acquisition MC samples during optimization [default: 128]
    #[arg(long)]
    mc_samples: Option<usize>,
}

#[derive(Debug, Args)]
struct EnvArgs {
    /// Optimizer LLM backend [default: scripted]
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    /// Response cache: read by the replay backend, appended to by the http backend.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Model name for the http backend (else OPENAI_MODEL).
    #[arg(long)]
    model: Option<String>,
    /// API base URL for the http backend (else OPENAI_BASE_URL).
    #[arg(long)]
    base_url: Option<String>,
    /// Objective [default: synthetic]
    #[arg(long, value_enum)]
    objective: Option<ObjectiveKind>,
    /// External evaluator command; receives {"prompt": ...} on stdin.
    #[arg(long)]
    evaluator_cmd: Option<String>,
    /// Argument for the evaluator command (repeatable).
    #[arg(long = "evaluator-arg", allow_hyphen_values = true)]
    evaluator_args: Vec<String>,
    /// External evaluator base URL; POST {url}/evaluate.
    #[arg(long)]
    evaluator_url: Option<String>,
    /// Evaluator timeout in seconds [default: 600]
    #[arg(long)]
    evaluator_timeout: Option<f64>,
    /// The evaluator accepts concurrent requests [default: false]
    #[arg(long)]
    evaluator_parallel_safe: Option<bool>,
    /// Synthetic universe size [default: 200]
    #[arg(long)]
    universe_size: Option<usize>,
    /// Synthetic latent dimension [default: 3]
    #[arg(long)]
    d: Option<usize>,
    /// Synthetic instance seed [default: the run seed]
    #[arg(long)]
    instance_seed: Option<u64>,
    /// Scripted generation miss probability [default: 0.5]
    #[arg(long)]
    generation_noise: Option<f64>,
    /// Scripted refinement side-effect probability [default: 0.3]
    #[arg(long)]
    refine_noise: Option<f64>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Directory of *.jsonl run logs.
    #[arg(long)]
    log_dir: PathBuf,
    /// Output directory [default: <log-dir>/report]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip the SVG convergence plot.
    #[arg(long)]
    no_svg: bool,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Glob matching run logs, e.g. 'runs/*.jsonl'.
    #[arg(long)]
    results_glob: String,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct TheoremArgs {
    /// Universe size |X| [default: 200]
    #[arg(long, default_value_t = 200)]
    universe_size: usize,
    /// Latent dimension [default: 3]
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Comma-separated perturbation radii.
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.2")]
    eta: Vec<f64>,
    /// Comma-separated suboptimality slacks.
    #[arg(long, value_delimiter = ',', default_value = "0,0.02")]
    delta: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// RKHS norm bound B.
    #[arg(long, default_value_t = 1.0)]
    norm_bound: f64,
    #[arg(long, default_value_t = 0.3)]
    lengthscale: f64,
    #[arg(long, default_value_t = 4)]
    num_centers: usize,
    #[arg(long, default_value_t = 1)]
    max_in_flight: usize,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BackendSection {
    kind: Option<BackendKind>,
    cache: Option<PathBuf>,
    model: Option<String>,
    base_url: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ObjectiveSection {
    kind: Option<ObjectiveKind>,
    command: Option<String>,
    args: Vec<String>,
    url: Option<String>,
    timeout_secs: Option<f64>,
    parallel_safe: Option<bool>,
    universe_size: Option<usize>,
    d: Option<usize>,
    instance_seed: Option<u64>,
    generation_noise: Option<f64>,
    refine_noise: Option<f64>,
}

#[derive(Debug, Default)]
struct FileConfig {
    run: RunConfig,
    backend: BackendSection,
    objective: ObjectiveSection,
}

fn load_file(path: Option<&Path>) -> CliResult<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("--config {}: {e}", path.display())))?;
    let bad = |e: toml::de::Error| CliError::Usage(format!("--config {}: {e}", path.display()));
    let mut table: toml::Table = text.parse().map_err(bad)?;
    let backend = match table.remove("backend") {
        Some(v) => v.try_into().map_err(bad)?,
        None => BackendSection::default(),
    };
    let objective = match table.remove("objective") {
        Some(v) => v.try_into().map_err(bad)?,
        None => ObjectiveSection::default(),
    };
    let run = toml::Value::Table(table).try_into().map_err(bad)?;
    Ok(FileConfig { run, backend, objective })
}

fn apply_hyper(mut c: RunConfig, h: &HyperArgs) -> RunConfig {
    fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
        if let Some(v) = src {
            *dst = v.clone();
        }
    }
    set(&mut c.seed, &h.seed);
    set(&mut c.n_total, &h.N);
    set(&mut c.q, &h.q);
    set(&mut c.t_batches, &h.T);
    set(&mut c.k_rounds, &h.K);
    set(&mut c.m_budget, &h.M);
    set(&mut c.tau, &h.tau);
    set(&mut c.b, &h.b);
    set(&mut c.n_max, &h.n_max);
    set(&mut c.p_max, &h.P_max);
    set(&mut c.optimizer_temperature, &h.temperature);
    set(&mut c.task_context, &h.task_context);
    if let Some(m) = h.max_tokens {
        c.max_tokens = (m > 0).then_some(m);
    }
    set(&mut c.max_in_flight, &h.max_in_flight);
    set(&mut c.d_max, &h.d_max);
    set(&mut c.stability_repeats, &h.stability_repeats);
    set(&mut c.parallel_evaluations, &h.parallel_evaluations);
    set(&mut c.surrogate.restarts, &h.gp_restarts);
    set(&mut c.acquisition.restarts, &h.acq_restarts);
    set(&mut c.acquisition.raw_samples, &h.raw_samples);
    set(&mut c.acquisition.mc_samples, &h.mc_samples);
    c
}

/// Backend and objective settings after merging file and flags.
struct Environment {
    backend: BackendKind,
    cache: Option<PathBuf>,
    model: Option<String>,
    base_url: Option<String>,
    objective: ObjectiveKind,
    evaluator: Option<EvaluatorEndpoint>,
    evaluator_timeout: Duration,
    evaluator_parallel_safe: bool,
    spec: SyntheticSpec,
    world: WorldOptions,
}

fn resolve_env(file: &FileConfig, e: &EnvArgs, seed: u64) -> CliResult<Environment> {
    let fb = &file.backend;
    let fo = &file.objective;
    let command = e.evaluator_cmd.clone().or_else(|| fo.command.clone());
    let url = e.evaluator_url.clone().or_else(|| fo.url.clone());
    let args = if e.evaluator_args.is_empty() { fo.args.clone() } else { e.evaluator_args.clone() };
    let evaluator = match (command, url) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give either --evaluator-cmd or --evaluator-url, not both".into())),
        (Some(command), None) => Some(EvaluatorEndpoint::Subprocess { command, args }),
        (None, Some(base_url)) => Some(EvaluatorEndpoint::Http { base_url }),
        (None, None) => None,
    };
    let timeout = e.evaluator_timeout.or(fo.timeout_secs).unwrap_or(600.0);
    if !(timeout > 0.0) {
        return Err(CliError::Usage("--evaluator-timeout must be positive".into()));
    }
    let defaults = WorldOptions::default();
    let spec = SyntheticSpec {
        universe_size: e.universe_size.or(fo.universe_size).unwrap_or(SyntheticSpec::default().universe_size),
        d: e.d.or(fo.d).unwrap_or(SyntheticSpec::default().d),
        seed: e.instance_seed.or(fo.instance_seed).unwrap_or(seed),
        ..SyntheticSpec::default()
    };
    Ok(Environment {
        backend: e.backend.or(fb.kind).unwrap_or(BackendKind::Scripted),
        cache: e.cache.clone().or_else(|| fb.cache.clone()),
        model: e.model.clone().or_else(|| fb.model.clone()),
        base_url: e.base_url.clone().or_else(|| fb.base_url.clone()),
        objective: e.objective.or(fo.kind).unwrap_or(ObjectiveKind::Synthetic),
        evaluator,
        evaluator_timeout: Duration::from_secs_f64(timeout),
        evaluator_parallel_safe: e.evaluator_parallel_safe.or(fo.parallel_safe).unwrap_or(false),
        spec,
        world: WorldOptions {
            generation_noise: e.generation_noise.or(fo.generation_noise).unwrap_or(defaults.generation_noise),
            refine_noise: e.refine_noise.or(fo.refine_noise).unwrap_or(defaults.refine_noise),
        },
    })
}

struct Bound {
    backend: Box<dyn LlmBackend>,
    objective: Box<dyn Objective>,
}

fn bind(env: &Environment, seed: u64) -> CliResult<Bound> {
    let needs_instance = env.backend == BackendKind::Scripted || env.objective == ObjectiveKind::Synthetic;
    let instance = if needs_instance {
        Some(SyntheticInstance::build(&env.spec).map_err(|e| CliError::Usage(format!("synthetic instance: {e}")))?)
    } else {
        None
    };
    let backend: Box<dyn LlmBackend> = match env.backend {
        BackendKind::Scripted => {
            let inst = instance.clone().expect("instance built for scripted backend");
            Box::new(SyntheticWorld::new(inst, env.world.clone()).backend(seed))
        }
        BackendKind::Replay => {
            let path = env.cache.as_ref().ok_or_else(|| CliError::Usage("--backend replay needs --cache PATH".into()))?;
            Box::new(ReplayBackend::open(path).map_err(CliError::runtime)?)
        }
        BackendKind::Http => {
            let mut cfg = match HttpConfig::from_env() {
                Ok(c) => c,
                Err(e) => match &env.model {
                    Some(m) => HttpConfig::new(
                        &std::env::var("OPENAI_BASE_URL").unwrap_or_else(|_| "https://api.openai.com".into()),
                        m,
                    ),
                    None => return Err(CliError::Usage(format!("--backend http: {e}; set OPENAI_MODEL or pass --model"))),
                },
            };
            if cfg.api_key.is_none() {
                cfg.api_key = std::env::var("OPENAI_API_KEY").ok().filter(|k| !k.is_empty());
            }
            if let Some(m) = &env.model {
                cfg.model = m.clone();
            }
            if let Some(u) = &env.base_url {
                let key = cfg.api_key.take();
                cfg = HttpConfig { api_key: key, ..HttpConfig::new(u, &cfg.model) };
            }
            let http = HttpBackend::new(cfg);
            match &env.cache {
                Some(p) => Box::new(RecordingBackend::new(http, p).map_err(CliError::runtime)?),
                None => Box::new(http),
            }
        }
    };
    let objective: Box<dyn Objective> = match env.objective {
        ObjectiveKind::Synthetic => Box::new(instance.expect("instance built for synthetic objective")),
        ObjectiveKind::External => {
            let endpoint = env
                .evaluator
                .clone()
                .ok_or_else(|| CliError::Usage("--objective external needs --evaluator-cmd or --evaluator-url".into()))?;
            let mut ev = ExternalEvaluator::new(endpoint, env.evaluator_timeout);
            ev.parallel_safe = env.evaluator_parallel_safe;
            Box::new(ev)
        }
    };
    Ok(Bound { backend, objective })
}

fn print_outcome(o: &RunOutcome, log: Option<&Path>) {
    let summary = json!({
        "method": o.header.label(),
        "seed": o.header.config.seed,
        "best_score": o.best.score(),
        "best_prompt": o.best.prompt.as_str(),
        "evaluations": o.evaluations(),
        "best_so_far": o.best_so_far(),
        "log": log.map(|p| p.display().to_string()),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
}

fn start(method: Method, common: &CommonArgs) -> CliResult<()> {
    let file = load_file(common.config.as_deref())?;
    let config = apply_hyper(file.run.clone(), &common.hyper);
    config
        .validate()
        .map_err(|e| CliError::Usage(format!("{e}")))?;
    let env = resolve_env(&file, &common.env, config.seed)?;
    let bound = bind(&env, config.seed)?;
    let outcome = run_method(method, &config, bound.objective.as_ref(), bound.backend.as_ref(), common.log.as_deref())
        .map_err(CliError::runtime)?;
    print_outcome(&outcome, common.log.as_deref());
    Ok(())
}

fn resume(args: &ResumeArgs) -> CliResult<()> {
    let (header, _) = read_log(&args.log).map_err(|e| CliError::Runtime(format!("{}: {e}", args.log.display())))?;
    let file = load_file(args.config.as_deref())?;
    let config = header.config.clone();
    let env = resolve_env(&file, &args.env, config.seed)?;
    let bound = bind(&env, config.seed)?;
    let outcome = resume_run(&args.log, &config, bound.objective.as_ref(), bound.backend.as_ref()).map_err(CliError::runtime)?;
    print_outcome(&outcome, Some(&args.log));
    Ok(())
}

fn report(args: &ReportArgs) -> CliResult<()> {
    let runs = load_runs(&args.log_dir).map_err(|e| CliError::Runtime(format!("{}: {e}", args.log_dir.display())))?;
    let out = args.out.clone().unwrap_or_else(|| args.log_dir.join("report"));
    let summary = write_report(&runs, &out, !args.no_svg).map_err(CliError::runtime)?;
    if let Some(e) = &summary.win_or_tie_error {
        log::warn!("win-or-tie matrix skipped: {e}");
    }
    println!("wrote {} files for {} runs to {}", summary.files.len(), runs.len(), out.display());
    Ok(())
}

fn format_matrix(w: &WinOrTie) -> String {
    let width = w.methods.iter().map(String::len).max().unwrap_or(6).max(6);
    let mut s = format!("{:width$}", "");
    for m in &w.methods {
        s.push_str(&format!("  {m:>width$}"));
    }
    s.push_str(&format!("  {:>width$}\n", "mean"));
    for (i, m) in w.methods.iter().enumerate() {
        s.push_str(&format!("{m:width$}"));
        for c in w.cells[i].iter().chain(std::iter::once(&w.row_mean[i])) {
            match c {
                Some(v) => s.push_str(&format!("  {v:>width$.3}")),
                None => s.push_str(&format!("  {:>width$}", "-")),
            }
        }
        s.push('\n');
    }
    s
}

fn compare(args: &CompareArgs) -> CliResult<()> {
    let paths = glob::glob(&args.results_glob).map_err(|e| CliError::Usage(format!("--results-glob: {e}")))?;
    let mut results = Vec::new();
    for p in paths {
        let p = p.map_err(CliError::runtime)?;
        let run = LoadedRun::read(&p).map_err(CliError::runtime)?;
        match run.result() {
            Some(r) => results.push(r),
            None => log::warn!("{} has no completed round; skipped", p.display()),
        }
    }
    if results.is_empty() {
        return Err(CliError::Runtime(format!("no completed runs match {}", args.results_glob)));
    }
    let w = win_or_tie_matrix(&results).map_err(CliError::runtime)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&w).expect("matrix serializes"));
    } else {
        print!("{}", format_matrix(&w));
        println!("({} task-seed pairs)", w.pairs);
    }
    Ok(())
}

fn theorem(args: &TheoremArgs) -> CliResult<()> {
    if args.eta.iter().any(|e| !(*e >= 0.0)) || args.eta.is_empty() {
        return Err(CliError::Usage("--eta values must be non-negative".into()));
    }
    if args.max_in_flight < 1 {
        return Err(CliError::Usage("--max-in-flight must be at least 1".into()));
    }
    let spec = SyntheticSpec {
        universe_size: args.universe_size,
        d: args.d,
        num_centers: args.num_centers,
        norm_bound: args.norm_bound,
        lengthscale: args.lengthscale,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let inst = SyntheticInstance::build(&spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let options = TheoremOptions {
        eta_grid: args.eta.clone(),
        deltas: args.delta.clone(),
        trials: args.trials,
        seed: args.seed,
        max_in_flight: args.max_in_flight,
    };
    let r = theorem_bound_check(&inst, &options);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
    } else {
        println!("|X| = {}, d = {}, B = {}, trials = {}, deltas = {:?}", r.universe_size, r.d, r.norm_bound, r.trials, r.deltas);
        for s in &r.per_eta {
            println!(
                "eta {:<5} trials {:>4}  lemma violations {}  theorem violations {}  worst slack {:.3e} / {:.3e}  max L {:.3}",
                s.eta, s.trials, s.lemma_violations, s.theorem_violations, s.worst_lemma_slack, s.worst_theorem_slack, s.max_lipschitz
            );
        }
        println!("violations: {}", r.violations());
    }
    if r.violations() > 0 {
        return Err(CliError::Runtime(format!("{} bound violations", r.violations())));
    }
    Ok(())
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 success, 1 usage error, 2 runtime failure.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    let result = match &cli.command {
        Command::Run(a) => start(Method::ReElicit(a.mode.unwrap_or(AblationMode::Full)), &a.common),
        Command::Baseline(a) => start(Method::Baseline(a.method), &a.common),
        Command::Resume(a) => resume(a),
        Command::Report(a) => report(a),
        Command::Compare(a) => compare(a),
        Command::TheoremCheck(a) => theorem(a),
    };
    match result {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}\n\nRun `promptbo --help` for usage.");
            1
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}
