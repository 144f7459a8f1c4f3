//! The optimization loop: initial dataset, elicit/fit/acquire/realize rounds,
//! ablation modes, baselines' outer loop, event log and resume.

pub mod log;

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub use self::log::{parse_log, read_log, without_timestamps, EventKind, LogError, LogHeader, RunLog, RunLogEvent};
use crate::acquisition::{optimize_batch, OptimizeOptions};
use crate::baselines::{baseline_step, BaselineError, BaselineMethod};
use crate::diagnostics::extraction_stability;
use crate::domain::{
    best_of, DomainError, EmbeddingMatrix, EvaluatedPrompt, FeatureSet, FeatureVector, History, Prompt, RunConfig,
};
use crate::elicitation::{elicit, extract_features, ElicitError, MAX_ATTEMPTS};
use crate::llm::{ask, extract_json, CallSite, JsonShape, LlmBackend, LlmError, Parsed};
use crate::oracle::{Objective, ObjectiveError, ScoreCache};
use crate::par::par_map;
use crate::realization::{realize_target, RealizeContext, RealizeError};
use crate::streams::{derive_stream, derive_u64};
use crate::surrogate::{fit_gp, FitOptions, SurrogateError};
use crate::templates::{render, TemplateError, TemplateId};

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Elicit(#[from] ElicitError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error("evaluation failed: {0}")]
    Evaluator(#[from] ObjectiveError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("log was written with config digest {logged}, current config has {current}")]
    ConfigMismatch { logged: String, current: String },
    #[error("log does not describe a known method: {0}")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoRefinement,
    NoBo,
    StaticFeatures,
    IndependentExtraction,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [
        AblationMode::Full,
        AblationMode::NoRefinement,
        AblationMode::NoBo,
        AblationMode::StaticFeatures,
        AblationMode::IndependentExtraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::NoRefinement => "no_refinement",
            AblationMode::NoBo => "no_bo",
            AblationMode::StaticFeatures => "static_features",
            AblationMode::IndependentExtraction => "independent_extraction",
        }
    }
}

impl FromStr for AblationMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mode `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    ReElicit(AblationMode),
    Baseline(BaselineMethod),
}

impl Method {
    fn header(self, config: &RunConfig) -> LogHeader {
        match self {
            Method::ReElicit(m) => LogHeader::new("reelicit", Some(m.name()), config),
            Method::Baseline(b) => LogHeader::new(b.name(), None, config),
        }
    }

    fn from_header(h: &LogHeader) -> Result<Self, OptimizerError> {
        let unknown = || OptimizerError::UnknownMethod(format!("{} {:?}", h.method, h.mode));
        if h.method == "reelicit" {
            let mode = h.mode.as_deref().ok_or_else(unknown)?;
            Ok(Method::ReElicit(mode.parse().map_err(|_| unknown())?))
        } else {
            Ok(Method::Baseline(h.method.parse().map_err(|_| unknown())?))
        }
    }

    pub fn label(self) -> String {
        match self {
            Method::ReElicit(AblationMode::Full) => "reelicit".into(),
            Method::ReElicit(m) => format!("reelicit_{}", m.name()),
            Method::Baseline(b) => b.name().into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub best: EvaluatedPrompt,
    pub history: History,
    pub header: LogHeader,
    pub events: Vec<RunLogEvent>,
}

impl RunOutcome {
    /// Best score after each round, rounds 0..T.
    pub fn best_so_far(&self) -> Vec<f64> {
        round_complete_scores(&self.events)
    }

    pub fn evaluations(&self) -> usize {
        self.events.iter().filter(|e| e.event_kind == EventKind::Evaluation).count()
    }
}

/// Best-so-far trace read from the `round_complete` diagnostics of a log.
pub fn round_complete_scores(events: &[RunLogEvent]) -> Vec<f64> {
    events
        .iter()
        .filter(|e| is_round_complete(e))
        .filter_map(|e| e.payload["best_score"].as_f64())
        .collect()
}

fn is_round_complete(e: &RunLogEvent) -> bool {
    e.event_kind == EventKind::Diagnostic && e.payload["kind"] == "round_complete"
}

/// Reads a JSON array of exactly `q` prompt strings; other counts re-ask.
pub(crate) fn ask_prompt_list(
    backend: &dyn LlmBackend,
    text: String,
    q: usize,
    site: CallSite,
    config: &RunConfig,
) -> Result<Vec<Prompt>, LlmError> {
    let req = site.request(text, config.optimizer_temperature, config.max_tokens)?;
    ask(backend, &req, &site, MAX_ATTEMPTS, |out, _| {
        let v = match extract_json(out, JsonShape::ArrayOfStrings) {
            Ok(v) => v,
            Err(e) => return Parsed::Retry(e),
        };
        let prompts: Vec<Prompt> = v
            .as_array()
            .expect("shape checked")
            .iter()
            .filter_map(|s| Prompt::new(s.as_str().expect("shape checked").trim()).ok())
            .collect();
        if prompts.len() == q {
            Parsed::Done(prompts)
        } else {
            Parsed::Retry(LlmError::MalformedOutput(format!("expected {q} prompts, got {}", prompts.len())))
        }
    })
}

fn feature_set_json(fs: &FeatureSet) -> Value {
    serde_json::to_value(fs).expect("feature set serializes")
}

struct Runner<'a> {
    config: &'a RunConfig,
    backend: &'a dyn LlmBackend,
    scores: ScoreCache<&'a dyn Objective>,
    log: RunLog,
    history: History,
    method: Method,
    incumbent: Option<FeatureSet>,
    /// Running embedding reused by the static-features mode.
    static_embedding: Option<EmbeddingMatrix>,
}

impl<'a> Runner<'a> {
    fn evaluate(&mut self, round: usize, prompts: Vec<Prompt>) -> Result<(), OptimizerError> {
        let parallel = self.config.parallel_evaluations && self.scores.objective().parallel_safe();
        let results = if parallel {
            par_map(&prompts, self.config.max_in_flight, |_, p| self.scores.evaluate(p))
        } else {
            prompts.iter().map(|p| self.scores.evaluate(p)).collect()
        };
        for (slot, (p, r)) in prompts.into_iter().zip(results).enumerate() {
            let s = r?;
            let duplicate = self.history.evaluated().any(|e| e.prompt == p);
            let mut payload = json!({
                "slot": slot,
                "prompt_digest": p.digest(),
                "prompt_text": p.as_str(),
                "score": s.score,
                "round": round,
                "duplicate": duplicate,
            });
            if let Some(raw) = s.clamped_from {
                payload["clamped_from"] = json!(raw);
            }
            self.log.append(EventKind::Evaluation, round, payload)?;
            if let Some(raw) = s.clamped_from {
                self.log.append(
                    EventKind::Diagnostic,
                    round,
                    json!({"kind": "score_clamped", "prompt_digest": p.digest(), "raw": raw, "score": s.score}),
                )?;
            }
            self.history.push(EvaluatedPrompt::new(p, s.score)?, round);
        }
        Ok(())
    }

    fn complete_round(&mut self, round: usize) -> Result<(), OptimizerError> {
        let best = best_of(&self.history)?;
        let payload = json!({
            "kind": "round_complete",
            "best_score": best.score(),
            "best_digest": best.prompt.digest(),
            "history_len": self.history.len(),
        });
        self.log.append(EventKind::Diagnostic, round, payload)?;
        Ok(())
    }

    fn initial_round(&mut self) -> Result<(), OptimizerError> {
        let prompts = generate_initial_prompts(self.backend, self.config)?;
        let texts: Vec<&str> = prompts.iter().map(Prompt::as_str).collect();
        self.log.append(EventKind::D0Generated, 0, json!({"prompts": texts}))?;
        self.evaluate(0, prompts)?;
        self.complete_round(0)
    }

    fn baseline_round(&mut self, method: BaselineMethod, round: usize) -> Result<(), OptimizerError> {
        let step = baseline_step(method, &self.history, self.config, self.backend, round)?;
        let texts: Vec<&str> = step.prompts.iter().map(Prompt::as_str).collect();
        self.log.append(
            EventKind::BaselineStep,
            round,
            json!({"method": method.name(), "candidates": texts, "details": step.details}),
        )?;
        self.evaluate(round, step.prompts)?;
        self.complete_round(round)
    }

    fn select_features(&mut self, mode: AblationMode, round: usize) -> Result<(FeatureSet, EmbeddingMatrix), OptimizerError> {
        let config = self.config;
        if mode == AblationMode::StaticFeatures && round > 1 {
            let fs = self.incumbent.clone().expect("round 1 selected a feature set");
            let mut z = self.static_embedding.take().expect("round 1 stored its embedding");
            let new: Vec<Prompt> = self.history.prompts()[z.len()..].to_vec();
            let extra = extract_features(self.backend, &new, &fs, config.b, config, CallSite::new("extract_features", round, 0, 0))?;
            z.append(extra)?;
            self.log.append(
                EventKind::FeatureSetSelected,
                round,
                json!({"fresh": false, "reused_from_round": 1, "feature_set": feature_set_json(&fs), "embedding": z, "extracted": new.len()}),
            )?;
            self.static_embedding = Some(z.clone());
            return Ok((fs, z));
        }
        let b = if mode == AblationMode::IndependentExtraction { 1 } else { config.b };
        let incumbent = if round > 1 { self.incumbent.clone() } else { None };
        let result = elicit(self.backend, &self.history, incumbent.as_ref(), config, round, b)?;
        for o in &result.outcomes {
            let payload = match &o.result {
                Ok(c) => json!({
                    "slot": o.slot,
                    "is_incumbent": o.is_incumbent,
                    "feature_set": feature_set_json(&c.feature_set),
                    "cv_mse": c.cv.gp_mse,
                    "mean_baseline_mse": c.cv.mean_baseline_mse,
                    "folds": c.cv.folds,
                }),
                Err(e) => json!({"slot": o.slot, "is_incumbent": o.is_incumbent, "error": e.to_string()}),
            };
            if o.is_incumbent {
                self.log.append(EventKind::IncumbentRescored, round, payload.clone())?;
            }
            self.log.append(EventKind::ElicitationCandidate, round, payload)?;
        }
        let chosen = result.selected().clone();
        self.log.append(
            EventKind::FeatureSetSelected,
            round,
            json!({
                "fresh": true,
                "slot": result.outcomes[result.selected].slot,
                "is_incumbent": chosen.is_incumbent,
                "feature_set": feature_set_json(&chosen.feature_set),
                "cv_mse": chosen.cv.gp_mse,
                "embedding": chosen.embedding,
            }),
        )?;
        self.incumbent = Some(chosen.feature_set.clone());
        if mode == AblationMode::StaticFeatures {
            self.static_embedding = Some(chosen.embedding.clone());
        }
        Ok((chosen.feature_set, chosen.embedding))
    }

    fn reelicit_round(&mut self, mode: AblationMode, round: usize) -> Result<(), OptimizerError> {
        let config = self.config;
        let (fs, z) = self.select_features(mode, round)?;
        if config.stability_repeats >= 2 {
            let prompts = self.history.prompts();
            let r = extraction_stability(self.backend, &prompts, &fs, config.stability_repeats, config, round)?;
            self.log.append(
                EventKind::Diagnostic,
                round,
                json!({
                    "kind": "extraction_stability",
                    "repeats": r.repeats,
                    "mean_std": r.mean_std,
                    "frac_above_005": r.frac_above_005,
                    "frac_above_010": r.frac_above_010,
                    "stds": r.stds,
                }),
            )?;
        }
        let y = self.history.scores();
        let x = z.to_matrix::<f64>();
        let d = fs.dim();

        let targets: Vec<Vec<f64>> = if mode == AblationMode::NoBo {
            let mut rng = derive_stream(config.seed, "no_bo_targets", round as u64, 0);
            (0..config.q).map(|_| (0..d).map(|_| rng.random::<f64>()).collect()).collect()
        } else {
            let fit = FitOptions {
                restarts: config.surrogate.restarts,
                steps: config.surrogate.steps,
                seed: derive_u64(config.seed, "gp_final", round as u64, 0),
                ..FitOptions::default()
            };
            let gp = fit_gp(&x, &y, &fit)?;
            let p = gp.params();
            self.log.append(
                EventKind::GpFitted,
                round,
                json!({
                    "n": gp.n_train(),
                    "d": d,
                    "lengthscales": p.lengthscales,
                    "signal_variance": p.signal_variance,
                    "noise_variance": p.noise_variance,
                    "log_marginal_likelihood": gp.log_marginal_likelihood(),
                }),
            )?;
            let acq = &config.acquisition;
            let opts = OptimizeOptions {
                restarts: acq.restarts,
                raw_samples: acq.raw_samples,
                mc_samples: acq.mc_samples,
                final_mc_samples: acq.final_mc_samples,
                max_iters: acq.max_iters,
                seed: derive_u64(config.seed, "acquisition", round as u64, 0),
            };
            optimize_batch(&gp, config.q, &opts).to_rows()
        };
        let source = if mode == AblationMode::NoBo { "uniform" } else { "acquisition" };
        self.log.append(EventKind::TargetsSelected, round, json!({"source": source, "targets": targets}))?;

        let refine = mode != AblationMode::NoRefinement;
        let history = &self.history;
        let backend = self.backend;
        let results = par_map(&targets, config.max_in_flight, |j, t| -> Result<_, RealizeError> {
            let ctx = RealizeContext {
                backend,
                feature_set: &fs,
                history,
                embedding: &z,
                config,
                round,
                slot: j,
            };
            realize_target(&ctx, &FeatureVector::clamped(t.clone()), refine)
        });
        let fallback = best_of(&self.history)?.prompt.clone();
        let mut prompts = Vec::with_capacity(config.q);
        for (j, (t, r)) in targets.iter().zip(results).enumerate() {
            let payload = match r {
                Ok(real) => {
                    let p = real.result.prompt;
                    let payload = json!({
                        "slot": j,
                        "target": t,
                        "prompt_digest": p.digest(),
                        "prompt_text": p.as_str(),
                        "extracted": real.result.features,
                        "initial_distances": real.initial_distances,
                        "initial_gap": real.initial_gap,
                        "final_gap": real.final_gap,
                        "steps": real.steps,
                        "fallback": false,
                    });
                    prompts.push(p);
                    payload
                }
                Err(e) => {
                    ::log::warn!("realization of target {j} failed, using the incumbent best: {e}");
                    prompts.push(fallback.clone());
                    json!({
                        "slot": j,
                        "target": t,
                        "prompt_digest": fallback.digest(),
                        "prompt_text": fallback.as_str(),
                        "fallback": true,
                        "error": e.to_string(),
                    })
                }
            };
            self.log.append(EventKind::Realization, round, payload)?;
        }
        self.evaluate(round, prompts)?;
        self.complete_round(round)
    }

    fn run_from(mut self, start: usize) -> Result<RunOutcome, OptimizerError> {
        for round in start..self.config.t_batches {
            if round == 0 {
                self.initial_round()?;
                continue;
            }
            match self.method {
                Method::ReElicit(mode) => self.reelicit_round(mode, round)?,
                Method::Baseline(b) => self.baseline_round(b, round)?,
            }
        }
        let best = best_of(&self.history)?.clone();
        Ok(RunOutcome {
            best,
            history: self.history,
            header: self.log.header().clone(),
            events: self.log.into_events(),
        })
    }
}

/// Asks for `q` diverse initial prompts.
pub fn generate_initial_prompts(backend: &dyn LlmBackend, config: &RunConfig) -> Result<Vec<Prompt>, OptimizerError> {
    let q = config.q.to_string();
    let text = render(TemplateId::D0, &[("task_context", &config.task_context), ("q", &q)])?;
    Ok(ask_prompt_list(backend, text, config.q, CallSite::new("d0", 0, 0, 0), config)?)
}

/// `D0`: generates and sequentially evaluates `q` initial prompts.
pub fn generate_initial_dataset(
    config: &RunConfig,
    objective: &dyn Objective,
    backend: &dyn LlmBackend,
) -> Result<History, OptimizerError> {
    config.validate()?;
    let mut r = Runner {
        config,
        backend,
        scores: ScoreCache::new(objective),
        log: RunLog::in_memory(Method::ReElicit(AblationMode::Full).header(config)),
        history: History::new(),
        method: Method::ReElicit(AblationMode::Full),
        incumbent: None,
        static_embedding: None,
    };
    r.initial_round()?;
    Ok(r.history)
}

/// Runs `method` from scratch. With `log_path` the log is also written to
/// disk as it grows.
pub fn run_method(
    method: Method,
    config: &RunConfig,
    objective: &dyn Objective,
    backend: &dyn LlmBackend,
    log_path: Option<&Path>,
) -> Result<RunOutcome, OptimizerError> {
    config.validate()?;
    let header = method.header(config);
    let log = match log_path {
        Some(p) => RunLog::create(p, header)?,
        None => RunLog::in_memory(header),
    };
    let runner = Runner {
        config,
        backend,
        scores: ScoreCache::new(objective),
        log,
        history: History::new(),
        method,
        incumbent: None,
        static_embedding: None,
    };
    runner.run_from(0)
}

pub fn run_reelicit(
    config: &RunConfig,
    objective: &dyn Objective,
    backend: &dyn LlmBackend,
    mode: AblationMode,
    log_path: Option<&Path>,
) -> Result<RunOutcome, OptimizerError> {
    run_method(Method::ReElicit(mode), config, objective, backend, log_path)
}

/// Continues the run recorded at `log_path` after its last complete round.
/// Scores already in the log are reused rather than re-evaluated.
pub fn resume_run(
    log_path: &Path,
    config: &RunConfig,
    objective: &dyn Objective,
    backend: &dyn LlmBackend,
) -> Result<RunOutcome, OptimizerError> {
    config.validate()?;
    let (header, events) = read_log(log_path)?;
    let current = config.digest();
    if header.config_digest != current {
        return Err(OptimizerError::ConfigMismatch {
            logged: header.config_digest,
            current,
        });
    }
    let method = Method::from_header(&header)?;
    let scores = ScoreCache::new(objective);
    for e in events.iter().filter(|e| e.event_kind == EventKind::Evaluation) {
        if let (Some(text), Some(score)) = (e.payload["prompt_text"].as_str(), e.payload["score"].as_f64()) {
            if let Ok(p) = Prompt::new(text) {
                scores.seed_score(&p, score);
            }
        }
    }
    let keep = events.iter().rposition(is_round_complete).map_or(0, |i| i + 1);
    let kept: Vec<RunLogEvent> = events[..keep].to_vec();
    let next_round = kept.iter().rev().find(|e| is_round_complete(e)).map_or(0, |e| e.round + 1);

    let mut history = History::new();
    let mut incumbent = None;
    let mut static_embedding = None;
    for e in &kept {
        match e.event_kind {
            EventKind::Evaluation => {
                let text = e.payload["prompt_text"].as_str().unwrap_or_default();
                let score = e.payload["score"].as_f64().unwrap_or(f64::NAN);
                let corrupt = |m: String| LogError::LogCorrupt {
                    line: e.sequence_no as usize + 2,
                    message: m,
                };
                let p = Prompt::new(text).map_err(|err| corrupt(err.to_string()))?;
                history.push(EvaluatedPrompt::new(p, score).map_err(|err| corrupt(err.to_string()))?, e.round);
            }
            EventKind::FeatureSetSelected => {
                incumbent = serde_json::from_value::<FeatureSet>(e.payload["feature_set"].clone()).ok();
                static_embedding = serde_json::from_value::<EmbeddingMatrix>(e.payload["embedding"].clone()).ok();
            }
            _ => {}
        }
    }
    if !matches!(method, Method::ReElicit(AblationMode::StaticFeatures)) {
        static_embedding = None;
    }
    if keep < events.len() {
        ::log::info!("discarding {} events of an incomplete round", events.len() - keep);
    }
    let log = RunLog::rewrite(log_path, header, kept)?;
    let runner = Runner {
        config,
        backend,
        scores,
        log,
        history,
        method,
        incumbent,
        static_embedding,
    };
    runner.run_from(next_round)
}
