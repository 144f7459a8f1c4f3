//! Aggregate-only baselines: history-free sampling, score-sorted history
//! prompting, population evolution, and critique-then-improve.

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::domain::{
    best_of, sort_ascending, stratified_subsample, DomainError, EvaluatedPrompt, History, Prompt, RunConfig,
};
use crate::elicitation::MAX_ATTEMPTS;
use crate::llm::{ask, clean_text_output, extract_json, CallSite, JsonShape, LlmBackend, LlmError, Parsed};
use crate::optimizer::{run_method, Method, OptimizerError, RunOutcome};
use crate::oracle::Objective;
use crate::par::par_map;
use crate::streams::derive_stream;
use crate::templates::{format_score, format_scored_history, render, TemplateError, TemplateId, MUTATION_INSTRUCTIONS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaselineMethod {
    Ape,
    Opro,
    PromptBreeder,
    TextGrad,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [
        BaselineMethod::Ape,
        BaselineMethod::Opro,
        BaselineMethod::PromptBreeder,
        BaselineMethod::TextGrad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Ape => "ape",
            BaselineMethod::Opro => "opro",
            BaselineMethod::PromptBreeder => "promptbreeder",
            BaselineMethod::TextGrad => "textgrad",
        }
    }
}

impl FromStr for BaselineMethod {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown baseline `{s}`"))
    }
}

/// One round's candidates and what produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineStep {
    pub prompts: Vec<Prompt>,
    pub details: Value,
}

fn parse_prompts(out: &str) -> Result<Vec<Prompt>, LlmError> {
    let v = extract_json(out, JsonShape::ArrayOfStrings)?;
    Ok(v.as_array()
        .expect("shape checked")
        .iter()
        .filter_map(|s| Prompt::new(s.as_str().expect("shape checked").trim()).ok())
        .collect())
}

/// Asks for `q` prompts. Wrong counts are re-asked twice; after that a long
/// list is truncated and a short one is topped up from further single calls.
fn ask_for_prompts(
    backend: &dyn LlmBackend,
    text: String,
    q: usize,
    site: CallSite,
    config: &RunConfig,
) -> Result<(Vec<Prompt>, Value), BaselineError> {
    let req = site.request(text, config.optimizer_temperature, config.max_tokens)?;
    let mut longest: Vec<Prompt> = Vec::new();
    let first = ask(backend, &req, &site, MAX_ATTEMPTS, |out, _| match parse_prompts(out) {
        Ok(ps) if ps.len() == q => Parsed::Done(ps),
        Ok(ps) => {
            let got = ps.len();
            if got > longest.len() {
                longest = ps;
            }
            Parsed::Retry(LlmError::MalformedOutput(format!("expected {q} prompts, got {got}")))
        }
        Err(e) => Parsed::Retry(e),
    });
    match first {
        Ok(ps) => Ok((ps, json!({"count_repair": Value::Null}))),
        Err(e) if longest.is_empty() => Err(e.into()),
        Err(_) if longest.len() > q => {
            log::warn!("truncating {} prompts to {q}", longest.len());
            let n = longest.len();
            longest.truncate(q);
            Ok((longest, json!({"count_repair": "truncated", "received": n})))
        }
        Err(_) => {
            let received = longest.len();
            let mut step = 1;
            while longest.len() < q && step <= q {
                let s = CallSite { step, ..site };
                let r = s.request(req.user_text.clone(), config.optimizer_temperature, config.max_tokens)?;
                if let Ok(resp) = backend.complete(&r.reindexed(s.index(0))) {
                    if let Ok(ps) = parse_prompts(&resp.text) {
                        longest.extend(ps.into_iter().take(1));
                    }
                }
                step += 1;
            }
            if longest.len() < q {
                return Err(LlmError::MalformedOutput(format!("could not collect {q} prompts")).into());
            }
            log::warn!("padded {received} prompts to {q} by re-sampling");
            Ok((longest, json!({"count_repair": "padded", "received": received})))
        }
    }
}

pub fn render_ape(config: &RunConfig) -> Result<String, TemplateError> {
    render(TemplateId::Ape, &[("task_context", &config.task_context), ("q", &config.q.to_string())])
}

fn subsample(history: &History, config: &RunConfig, tag: &str, round: usize) -> Vec<EvaluatedPrompt> {
    let mut rng = derive_stream(config.seed, tag, round as u64, 0);
    sort_ascending(stratified_subsample(history, config.n_max, &mut rng))
}

/// OPRO request for `round`, with the subsample it shows.
pub fn render_opro(history: &History, config: &RunConfig, round: usize) -> Result<(String, Vec<EvaluatedPrompt>), BaselineError> {
    if history.is_empty() {
        return Err(DomainError::EmptyHistory.into());
    }
    let shown = subsample(history, config, "opro_subsample", round);
    let text = render(
        TemplateId::Opro,
        &[
            ("task_context", &config.task_context),
            ("history_text", &format_scored_history(&shown)),
            ("q", &config.q.to_string()),
        ],
    )?;
    Ok((text, shown))
}

/// TextGrad request for `round`: subsample trajectory plus the global best.
pub fn render_textgrad(
    history: &History,
    config: &RunConfig,
    round: usize,
) -> Result<(String, Vec<EvaluatedPrompt>, EvaluatedPrompt), BaselineError> {
    let best = best_of(history)?.clone();
    let shown = subsample(history, config, "textgrad_subsample", round);
    let text = render(
        TemplateId::TextGrad,
        &[
            ("task_context", &config.task_context),
            ("history_text", &format_scored_history(&shown)),
            ("best_score", &format_score(best.score())),
            ("best_prompt", best.prompt.as_str()),
            ("q", &config.q.to_string()),
        ],
    )?;
    Ok((text, shown, best))
}

/// Top-`P_max` population, best first; ties keep history order.
pub fn population(history: &History, p_max: usize) -> Vec<EvaluatedPrompt> {
    let mut pop = history.evaluated_vec();
    pop.sort_by(|a, b| b.score().total_cmp(&a.score()));
    pop.truncate(p_max);
    pop
}

#[derive(Debug, Clone, PartialEq)]
pub enum Offspring {
    Mutation { parent: usize, operator: usize },
    Recombination { parents: (usize, usize) },
}

/// Offspring plan: `q − 1` mutations then one recombination.
pub fn breeding_plan(population_size: usize, q: usize, seed: u64, round: usize) -> Vec<Offspring> {
    assert!(population_size >= 1);
    let mut rng = derive_stream(seed, "promptbreeder", round as u64, 0);
    let mut plan = Vec::with_capacity(q);
    for _ in 0..q.saturating_sub(1) {
        plan.push(Offspring::Mutation {
            parent: rng.random_range(0..population_size),
            operator: rng.random_range(0..MUTATION_INSTRUCTIONS.len()),
        });
    }
    let parents = if population_size >= 2 {
        let a = rng.random_range(0..population_size);
        let mut b = rng.random_range(0..population_size - 1);
        if b >= a {
            b += 1;
        }
        (a, b)
    } else {
        log::warn!("population of one: recombination uses the same parent twice");
        (0, 0)
    };
    plan.push(Offspring::Recombination { parents });
    plan
}

pub fn render_offspring(pop: &[EvaluatedPrompt], o: &Offspring, config: &RunConfig) -> Result<String, TemplateError> {
    match o {
        Offspring::Mutation { parent, operator } => render(
            TemplateId::PbMutation,
            &[
                ("task_context", &config.task_context),
                ("instruction", MUTATION_INSTRUCTIONS[*operator].1),
                ("parent_prompt", pop[*parent].prompt.as_str()),
            ],
        ),
        Offspring::Recombination { parents: (a, b) } => render(
            TemplateId::PbRecombination,
            &[
                ("task_context", &config.task_context),
                ("parent1", pop[*a].prompt.as_str()),
                ("parent2", pop[*b].prompt.as_str()),
            ],
        ),
    }
}

fn ask_single(backend: &dyn LlmBackend, text: String, site: CallSite, config: &RunConfig) -> Result<Prompt, LlmError> {
    let req = site.request(text, config.optimizer_temperature, config.max_tokens)?;
    ask(backend, &req, &site, MAX_ATTEMPTS, |out, _| match clean_text_output(out).map(Prompt::new) {
        Some(Ok(p)) => Parsed::Done(p),
        _ => Parsed::Retry(LlmError::MalformedOutput("empty prompt text".into())),
    })
}

fn digests(entries: &[EvaluatedPrompt]) -> Vec<String> {
    entries.iter().map(|e| e.prompt.digest()).collect()
}

/// Candidates for one round of `method`.
pub fn baseline_step(
    method: BaselineMethod,
    history: &History,
    config: &RunConfig,
    backend: &dyn LlmBackend,
    round: usize,
) -> Result<BaselineStep, BaselineError> {
    let q = config.q;
    match method {
        BaselineMethod::Ape => {
            let (prompts, repair) = ask_for_prompts(backend, render_ape(config)?, q, CallSite::new("ape", round, 0, 0), config)?;
            Ok(BaselineStep { prompts, details: repair })
        }
        BaselineMethod::Opro => {
            let (text, shown) = render_opro(history, config, round)?;
            let (prompts, repair) = ask_for_prompts(backend, text, q, CallSite::new("opro", round, 0, 0), config)?;
            Ok(BaselineStep {
                prompts,
                details: json!({"shown": digests(&shown), "repair": repair}),
            })
        }
        BaselineMethod::TextGrad => {
            let (text, shown, best) = render_textgrad(history, config, round)?;
            let (prompts, repair) = ask_for_prompts(backend, text, q, CallSite::new("textgrad", round, 0, 0), config)?;
            Ok(BaselineStep {
                prompts,
                details: json!({"shown": digests(&shown), "best_digest": best.prompt.digest(), "repair": repair}),
            })
        }
        BaselineMethod::PromptBreeder => {
            if history.is_empty() {
                return Err(DomainError::EmptyHistory.into());
            }
            let pop = population(history, config.p_max);
            let plan = breeding_plan(pop.len(), q, config.seed, round);
            let results = par_map(&plan, config.max_in_flight, |j, o| -> Result<Prompt, BaselineError> {
                let text = render_offspring(&pop, o, config)?;
                let tag = match o {
                    Offspring::Mutation { .. } => "pb_mutation",
                    Offspring::Recombination { .. } => "pb_recombination",
                };
                Ok(ask_single(backend, text, CallSite::new(tag, round, j, 0), config)?)
            });
            let mut prompts = Vec::with_capacity(q);
            for r in results {
                prompts.push(r?);
            }
            let details: Vec<Value> = plan
                .iter()
                .map(|o| match o {
                    Offspring::Mutation { parent, operator } => json!({
                        "kind": "mutation",
                        "operator": MUTATION_INSTRUCTIONS[*operator].0,
                        "parent": pop[*parent].prompt.digest(),
                    }),
                    Offspring::Recombination { parents: (a, b) } => json!({
                        "kind": "recombination",
                        "parents": [pop[*a].prompt.digest(), pop[*b].prompt.digest()],
                    }),
                })
                .collect();
            Ok(BaselineStep {
                prompts,
                details: json!({"population_size": pop.len(), "offspring": details}),
            })
        }
    }
}

/// Full baseline run with the shared initial dataset, budget and log.
pub fn run_baseline(
    method: BaselineMethod,
    config: &RunConfig,
    objective: &dyn Objective,
    backend: &dyn LlmBackend,
    log_path: Option<&Path>,
) -> Result<RunOutcome, OptimizerError> {
    run_method(Method::Baseline(method), config, objective, backend, log_path)
}
