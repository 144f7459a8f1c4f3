//! Turning target feature vectors into prompts: parallel initial generation
//! followed by sequential feature-gap refinement.

use serde::Serialize;
use thiserror::Error;

use crate::domain::{
    stratified_subsample_indices, EmbeddingMatrix, EvaluatedPrompt, FeatureSet, FeatureVector, History, Prompt,
    RunConfig,
};
use crate::elicitation::{extract_features, ElicitError, MAX_ATTEMPTS};
use crate::llm::{ask, clean_text_output, CallSite, LlmBackend, LlmError, Parsed};
use crate::par::par_map;
use crate::streams::derive_stream;
use crate::templates::{
    format_feature_list, format_feature_values, format_tiered_examples, render, render_block, TemplateError,
    TemplateId,
};

/// Step offset of refinement extraction calls, keeping them apart from the
/// initial-generation extractions at the same slot.
pub const REFINE_STEP_OFFSET: usize = 500;

/// Gaps that round to zero at two decimals are left out of the gap list.
pub const ZERO_GAP: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RealizeError {
    #[error("all {0} initial generations failed; last error: {1}")]
    AllGenerationsFailed(usize, Box<ElicitError>),
    #[error("target has {found} coordinates, feature set has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapEntry {
    pub feature_name: String,
    pub definition: String,
    pub target: f64,
    pub current: f64,
    pub gap: f64,
    pub direction: Direction,
}

/// Gap entries sorted by `|gap|` descending (stable on ties), zero gaps
/// omitted.
pub fn gap_entries(target: &FeatureVector, current: &FeatureVector, feature_set: &FeatureSet) -> Vec<GapEntry> {
    let mut out: Vec<GapEntry> = feature_set
        .features()
        .iter()
        .zip(target.values().iter().zip(current.values()))
        .filter_map(|(f, (&t, &c))| {
            let gap = t - c;
            (gap.abs() >= ZERO_GAP).then(|| GapEntry {
                feature_name: f.name.clone(),
                definition: f.description.clone(),
                target: t,
                current: c,
                gap,
                direction: if gap > 0.0 { Direction::Increase } else { Direction::Decrease },
            })
        })
        .collect();
    out.sort_by(|a, b| b.gap.abs().total_cmp(&a.gap.abs()));
    out
}

/// JSON array in the indented layout of the refinement template, numbers at
/// two decimals.
pub fn format_gap_list(entries: &[GapEntry]) -> String {
    let js = |s: &str| serde_json::to_string(s).expect("string serializes");
    let items: Vec<String> = entries
        .iter()
        .map(|e| {
            let dir = match e.direction {
                Direction::Increase => "increase",
                Direction::Decrease => "decrease",
            };
            format!(
                "  {{\n    \"feature_name\": {},\n    \"definition\": {},\n    \"target\": {:.2},\n    \"current\": {:.2},\n    \"gap\": {:.2},\n    \"direction\": \"{dir}\"\n  }}",
                js(&e.feature_name),
                js(&e.definition),
                e.target,
                e.current,
                e.gap
            )
        })
        .collect();
    format!("[\n{}\n]", items.join(",\n"))
}

/// Budget split between initial generation and refinement.
pub fn split_budget(m: usize) -> (usize, usize) {
    let init = (m / 2).max(1);
    (init, m.saturating_sub(init))
}

/// Everything a realization needs besides the target.
#[derive(Clone, Copy)]
pub struct RealizeContext<'a> {
    pub backend: &'a dyn LlmBackend,
    pub feature_set: &'a FeatureSet,
    pub history: &'a History,
    /// Embedding of `history`, row-aligned.
    pub embedding: &'a EmbeddingMatrix,
    pub config: &'a RunConfig,
    pub round: usize,
    /// Target index within the batch.
    pub slot: usize,
}

impl RealizeContext<'_> {
    fn examples(&self, stream_index: usize) -> String {
        let mut rng = derive_stream(
            self.config.seed,
            "realize_subsample",
            self.round as u64,
            (self.slot * 1000 + stream_index) as u64,
        );
        let idx = stratified_subsample_indices(&self.history.scores(), self.config.n_max, &mut rng);
        let entries: Vec<EvaluatedPrompt> = idx.iter().map(|&i| self.history.entries()[i].evaluated.clone()).collect();
        let vectors: Vec<FeatureVector> = idx.iter().map(|&i| self.embedding.rows()[i].clone()).collect();
        format_tiered_examples(&entries, Some((self.feature_set, &vectors)))
    }

    fn rate(&self, prompt: &Prompt, step: usize) -> Result<FeatureVector, ElicitError> {
        let z = extract_features(
            self.backend,
            std::slice::from_ref(prompt),
            self.feature_set,
            1,
            self.config,
            CallSite::new("extract_realization", self.round, self.slot, step),
        )?;
        Ok(z.rows()[0].clone())
    }

    fn generate_text(&self, site: CallSite, text: String) -> Result<Prompt, ElicitError> {
        let req = site.request(text, self.config.optimizer_temperature, self.config.max_tokens)?;
        ask(self.backend, &req, &site, MAX_ATTEMPTS, |out, _| {
            match clean_text_output(out).map(Prompt::new) {
                Some(Ok(p)) => Parsed::Done(p),
                _ => Parsed::Retry(LlmError::MalformedOutput("empty prompt text".into()).into()),
            }
        })
    }
}

pub fn render_initial_generation(
    ctx: &RealizeContext<'_>,
    target: &FeatureVector,
    examples_text: &str,
) -> Result<String, TemplateError> {
    render(
        TemplateId::InitialGeneration,
        &[
            ("task_context", &ctx.config.task_context),
            ("features", &format_feature_list(ctx.feature_set.features())),
            ("examples_text", examples_text),
            ("target_text", &format_feature_values(ctx.feature_set, target)),
        ],
    )
}

pub fn render_refine(
    ctx: &RealizeContext<'_>,
    current: &Prompt,
    gaps: &[GapEntry],
    examples_text: &str,
) -> Result<String, TemplateError> {
    let block = render_block(TemplateId::RefineReference, &[("examples_text", examples_text)])?;
    render(
        TemplateId::Refine,
        &[
            ("task_context", &ctx.config.task_context),
            ("reference_block", &block),
            ("text", current.as_str()),
            ("gap_text", &format_gap_list(gaps)),
        ],
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Realized {
    pub prompt: Prompt,
    pub features: FeatureVector,
}

/// Generates `m_init` candidates concurrently, each seeing its own subsample,
/// and keeps the one closest to `target`. Failed candidates are dropped.
pub fn initial_generate(
    ctx: &RealizeContext<'_>,
    target: &FeatureVector,
    m_init: usize,
) -> Result<(Realized, Vec<f64>), RealizeError> {
    assert!(m_init >= 1, "m_init must be at least 1");
    check_dim(ctx, target)?;
    let ps: Vec<usize> = (0..m_init).collect();
    let results = par_map(&ps, ctx.config.max_in_flight, |_, &p| -> Result<Realized, ElicitError> {
        let text = render_initial_generation(ctx, target, &ctx.examples(p))?;
        let prompt = ctx.generate_text(CallSite::new("generate", ctx.round, ctx.slot, p), text)?;
        let features = ctx.rate(&prompt, p)?;
        Ok(Realized { prompt, features })
    });
    let mut best: Option<(f64, Realized)> = None;
    let mut distances = Vec::new();
    let mut last_err = None;
    for r in results {
        match r {
            Ok(c) => {
                let d = target.l2_distance(&c.features);
                distances.push(d);
                if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                    best = Some((d, c));
                }
            }
            Err(e) => {
                log::warn!("initial generation candidate failed: {e}");
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((_, c)) => Ok((c, distances)),
        None => Err(RealizeError::AllGenerationsFailed(
            m_init,
            Box::new(last_err.expect("some candidate failed")),
        )),
    }
}

fn check_dim(ctx: &RealizeContext<'_>, target: &FeatureVector) -> Result<(), RealizeError> {
    if target.dim() != ctx.feature_set.dim() {
        return Err(RealizeError::DimensionMismatch {
            expected: ctx.feature_set.dim(),
            found: target.dim(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefineStep {
    pub step: usize,
    pub accepted: bool,
    /// Gap of the revision, absent when the call or its extraction failed.
    pub candidate_gap: Option<f64>,
    pub best_gap: f64,
}

/// Sequentially revises `best` toward `target`, accepting only strict gap
/// reductions and stopping once the gap is within `tau`.
pub fn feature_guided_refine(
    ctx: &RealizeContext<'_>,
    best: Realized,
    target: &FeatureVector,
    m_refine: usize,
    tau: f64,
) -> Result<(Realized, Vec<RefineStep>), RealizeError> {
    check_dim(ctx, target)?;
    let mut best = best;
    let mut best_gap = target.l2_distance(&best.features);
    let mut steps = Vec::new();
    for i in 0..m_refine {
        if best_gap <= tau {
            break;
        }
        let gaps = gap_entries(target, &best.features, ctx.feature_set);
        let text = render_refine(ctx, &best.prompt, &gaps, &ctx.examples(REFINE_STEP_OFFSET + i))?;
        let revised = ctx
            .generate_text(CallSite::new("refine", ctx.round, ctx.slot, i), text)
            .and_then(|prompt| {
                let features = ctx.rate(&prompt, REFINE_STEP_OFFSET + i)?;
                Ok(Realized { prompt, features })
            });
        let mut step = RefineStep {
            step: i,
            accepted: false,
            candidate_gap: None,
            best_gap,
        };
        match revised {
            Ok(r) => {
                let g = target.l2_distance(&r.features);
                step.candidate_gap = Some(g);
                if g < best_gap {
                    best = r;
                    best_gap = g;
                    step.accepted = true;
                    step.best_gap = g;
                }
            }
            Err(e) => log::warn!("refinement step {i} discarded: {e}"),
        }
        steps.push(step);
    }
    Ok((best, steps))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Realization {
    pub result: Realized,
    pub initial_distances: Vec<f64>,
    pub initial_gap: f64,
    pub final_gap: f64,
    pub steps: Vec<RefineStep>,
}

/// Full realization of one target with budget `M`; `refine = false` skips the
/// refinement phase.
pub fn realize_target(ctx: &RealizeContext<'_>, target: &FeatureVector, refine: bool) -> Result<Realization, RealizeError> {
    let (m_init, m_refine) = split_budget(ctx.config.m_budget);
    let (init, initial_distances) = initial_generate(ctx, target, m_init)?;
    let initial_gap = target.l2_distance(&init.features);
    let (result, steps) = if refine {
        feature_guided_refine(ctx, init, target, m_refine, ctx.config.tau)?
    } else {
        (init, Vec::new())
    };
    let final_gap = target.l2_distance(&result.features);
    Ok(Realization {
        result,
        initial_distances,
        initial_gap,
        final_gap,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::FeatureDefinition;
    use crate::llm::{ScriptContext, ScriptedBackend};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn fs3() -> FeatureSet {
        FeatureSet::new(vec![
            FeatureDefinition::new("a", "first"),
            FeatureDefinition::new("b", "second"),
            FeatureDefinition::new("c", "third"),
        ])
        .unwrap()
    }

    fn fv(v: &[f64]) -> FeatureVector {
        FeatureVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn gap_list_order_and_omission() {
        let g = gap_entries(&fv(&[0.9, 0.2, 0.5]), &fv(&[0.3, 0.25, 0.5]), &fs3());
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].feature_name, "a");
        assert!((g[0].gap - 0.6).abs() < 1e-12);
        assert_eq!(g[0].direction, Direction::Increase);
        assert_eq!(g[1].feature_name, "b");
        assert_eq!(g[1].direction, Direction::Decrease);
        let text = format_gap_list(&g);
        assert!(text.contains("\"gap\": 0.60"));
        assert!(text.contains("\"gap\": -0.05"));
        assert!(text.contains("\"direction\": \"decrease\""));
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<&String> = parsed[0].as_object().unwrap().keys().collect();
        let mut want = vec!["current", "definition", "direction", "feature_name", "gap", "target"];
        want.sort();
        assert_eq!(keys, want);
    }

    #[test]
    fn budget_split() {
        assert_eq!(split_budget(10), (5, 5));
        assert_eq!(split_budget(1), (1, 0));
        assert_eq!(split_budget(3), (1, 2));
    }

    fn history_and_embedding() -> (History, EmbeddingMatrix) {
        let h: History = (0..6)
            .map(|i| (EvaluatedPrompt::new(Prompt::new(format!("prompt {i}")).unwrap(), i as f64 / 6.0).unwrap(), 0))
            .collect();
        let z = EmbeddingMatrix::from_f64_rows((0..6).map(|i| vec![i as f64 / 6.0, 0.5, 0.1]).collect()).unwrap();
        (h, z)
    }

    /// Extraction rates a prompt "v=<x>" as (x, 0.2, 0.5).
    fn rate_rule(ctx: &mut ScriptContext<'_>) -> Result<String, LlmError> {
        let t = &ctx.request.user_text;
        let body = t.split("--- Text Object ID: \"0\" ---\n").nth(1).unwrap().split("\n\n").next().unwrap();
        let x: f64 = body.trim().trim_start_matches("v=").parse().unwrap_or(0.0);
        Ok(format!("{{\"0\": {{\"a\": {x}, \"b\": 0.2, \"c\": 0.5}}}}"))
    }

    #[test]
    fn picks_closest_initial_candidate() {
        let b = ScriptedBackend::new(0)
            .with_rule("generate", |ctx| {
                let p = (ctx.request.call_index / 10) % 1000;
                Ok(["v=0.5", "v=0.8", "v=0.6"][p as usize].into())
            })
            .with_rule("extract_realization", rate_rule);
        let (h, z) = history_and_embedding();
        let cfg = RunConfig::default();
        let fs = fs3();
        let ctx = RealizeContext {
            backend: &b,
            feature_set: &fs,
            history: &h,
            embedding: &z,
            config: &cfg,
            round: 1,
            slot: 0,
        };
        let target = fv(&[0.9, 0.2, 0.5]);
        let (r, d) = initial_generate(&ctx, &target, 3).unwrap();
        assert_eq!(r.prompt.as_str(), "v=0.8");
        assert_eq!(d.len(), 3);
        let text = render_initial_generation(&ctx, &target, &ctx.examples(0)).unwrap();
        assert!(text.contains(r#"Target feature vector:
{"a": 0.90, "b": 0.20, "c": 0.50}"#));
        assert!(text.contains("| Features: {\"a\":"));
    }

    #[test]
    fn refinement_accepts_only_improvements_and_stops_early() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c2 = calls.clone();
        let b = ScriptedBackend::new(0)
            .with_rule("generate", |_| Ok("v=0.3".into()))
            .with_rule("refine", move |ctx| {
                c2.fetch_add(1, Ordering::SeqCst);
                let i = (ctx.request.call_index / 10) % 1000;
                Ok(["v=0.1", "v=0.6", "v=0.5", "v=0.85", "v=0.9"][i as usize].into())
            })
            .with_rule("extract_realization", rate_rule);
        let (h, z) = history_and_embedding();
        let cfg = RunConfig {
            m_budget: 10,
            ..RunConfig::default()
        };
        let fs = fs3();
        let ctx = RealizeContext {
            backend: &b,
            feature_set: &fs,
            history: &h,
            embedding: &z,
            config: &cfg,
            round: 1,
            slot: 2,
        };
        let out = realize_target(&ctx, &fv(&[0.9, 0.2, 0.5]), true).unwrap();
        // 0.1 rejected, 0.6 accepted, 0.5 rejected, 0.85 within tau: stop.
        assert_eq!(out.result.prompt.as_str(), "v=0.85");
        assert_eq!(calls.load(Ordering::SeqCst), 4);
        let acc: Vec<bool> = out.steps.iter().map(|s| s.accepted).collect();
        assert_eq!(acc, vec![false, true, false, true]);
        let trace: Vec<f64> = out.steps.iter().map(|s| s.best_gap).collect();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(out.final_gap <= out.initial_gap);
    }

    #[test]
    fn within_tolerance_needs_no_refinement() {
        let b = ScriptedBackend::new(0)
            .with_rule("generate", |_| Ok("v=0.82".into()))
            .with_rule("extract_realization", rate_rule);
        let (h, z) = history_and_embedding();
        let cfg = RunConfig::default();
        let fs = fs3();
        let ctx = RealizeContext {
            backend: &b,
            feature_set: &fs,
            history: &h,
            embedding: &z,
            config: &cfg,
            round: 1,
            slot: 0,
        };
        let out = realize_target(&ctx, &fv(&[0.9, 0.2, 0.5]), true).unwrap();
        assert!(out.steps.is_empty());
    }

    #[test]
    fn all_failures_reported() {
        let b = ScriptedBackend::new(0).with_rule("generate", |_| Ok("   ".into()));
        let (h, z) = history_and_embedding();
        let cfg = RunConfig::default();
        let fs = fs3();
        let ctx = RealizeContext {
            backend: &b,
            feature_set: &fs,
            history: &h,
            embedding: &z,
            config: &cfg,
            round: 1,
            slot: 0,
        };
        let err = initial_generate(&ctx, &fv(&[0.9, 0.2, 0.5]), 2).unwrap_err();
        assert!(matches!(err, RealizeError::AllGenerationsFailed(2, _)));
    }
}
