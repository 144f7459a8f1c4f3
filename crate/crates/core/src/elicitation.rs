//! Feature elicitation: define candidate feature sets from scored history,
//! extract embeddings without scores, and select by cross-validation.

use rand::seq::SliceRandom;
use serde_json::Value;
use thiserror::Error;

use crate::domain::{
    stratified_subsample, DomainError, EmbeddingMatrix, FeatureDefinition, FeatureSet, FeatureVector, History,
    Prompt, RunConfig,
};
use crate::llm::{ask, extract_json, CallSite, JsonShape, LlmBackend, LlmError, Parsed};
use crate::par::par_map;
use crate::streams::derive_stream;
use crate::surrogate::{gp_cv_mse, CvPolicy, CvResult, FitOptions, SurrogateError};
use crate::templates::{
    format_feature_list, format_text_objects, format_tiered_examples, render, render_block, TemplateError,
    TemplateId,
};

/// Calls per request when the output cannot be parsed: the first plus two
/// re-issues.
pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ElicitError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("feature set has {found} features, more than the cap of {cap}")]
    TooManyFeatures { found: usize, cap: usize },
    #[error("ratings missing after re-ask: {0}")]
    MissingRatings(String),
    #[error("history is too small for cross-validation ({0} entries)")]
    TooFewForCv(usize),
    #[error("every elicitation candidate failed; last error: {0}")]
    AllCandidatesFailed(Box<ElicitError>),
}

fn parse_feature_set(text: &str, d_max: usize) -> Result<FeatureSet, ElicitError> {
    let v = extract_json(text, JsonShape::ArrayOfObjects)?;
    let mut features = Vec::new();
    for item in v.as_array().expect("shape checked") {
        let name = item.get("name").and_then(Value::as_str);
        let desc = item.get("description").and_then(Value::as_str);
        match (name, desc) {
            (Some(n), Some(d)) => features.push(FeatureDefinition::new(n.trim(), d.trim())),
            _ => {
                return Err(LlmError::MalformedOutput("feature entry lacks name or description".into()).into());
            }
        }
    }
    let set = FeatureSet::new(features)?;
    if set.dim() > d_max {
        return Err(ElicitError::TooManyFeatures {
            found: set.dim(),
            cap: d_max,
        });
    }
    Ok(set)
}

/// Renders the feature-definition request. The incumbent's features are
/// shuffled with `rng` before listing.
pub fn render_define_features<R: rand::Rng>(
    history: &History,
    incumbent: Option<&FeatureSet>,
    config: &RunConfig,
    rng: &mut R,
) -> Result<String, ElicitError> {
    let sample = stratified_subsample(history, config.n_max, rng);
    let examples = format_tiered_examples(&sample, None);
    let block = match incumbent {
        Some(fs) => {
            let mut shuffled: Vec<&FeatureDefinition> = fs.features().iter().collect();
            shuffled.shuffle(rng);
            render_block(
                TemplateId::DefineFeaturesIncumbent,
                &[("features", &format_feature_list(shuffled))],
            )?
        }
        None => String::new(),
    };
    let n = sample.len().to_string();
    Ok(render(
        TemplateId::DefineFeatures,
        &[
            ("task_context", &config.task_context),
            ("incumbent_block", &block),
            ("n", &n),
            ("examples_text", &examples),
        ],
    )?)
}

/// Asks for a new feature set. This is the only elicitation call that shows
/// scores to the model.
pub fn define_features(
    backend: &dyn LlmBackend,
    history: &History,
    incumbent: Option<&FeatureSet>,
    config: &RunConfig,
    site: CallSite,
) -> Result<FeatureSet, ElicitError> {
    if history.is_empty() {
        return Err(DomainError::EmptyHistory.into());
    }
    let mut rng = derive_stream(config.seed, "define_features_ctx", site.round as u64, site.slot as u64);
    let text = render_define_features(history, incumbent, config, &mut rng)?;
    let req = site.request(text, config.optimizer_temperature, config.max_tokens)?;
    ask(backend, &req, &site, MAX_ATTEMPTS, |out, _| match parse_feature_set(out, config.d_max) {
        Ok(fs) => Parsed::Done(fs),
        Err(e) => Parsed::Retry(e),
    })
}

pub fn render_extract_features<S: AsRef<str>>(
    texts: &[S],
    feature_set: &FeatureSet,
    config: &RunConfig,
) -> Result<String, ElicitError> {
    Ok(render(
        TemplateId::ExtractFeatures,
        &[
            ("task_context", &config.task_context),
            ("features", &format_feature_list(feature_set.features())),
            ("text_objects", &format_text_objects(texts)),
        ],
    )?)
}

enum BatchParse {
    Complete(Vec<FeatureVector>),
    Missing(String),
}

fn parse_ratings(text: &str, n: usize, feature_set: &FeatureSet) -> Result<BatchParse, LlmError> {
    let v = extract_json(text, JsonShape::Object)?;
    let obj = v.as_object().expect("shape checked");
    let mut rows = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for id in 0..n {
        let key = id.to_string();
        let Some(entry) = obj.get(&key).and_then(Value::as_object) else {
            missing.push(format!("id {key}"));
            continue;
        };
        let mut values = Vec::with_capacity(feature_set.dim());
        for name in feature_set.names() {
            match entry.get(name).and_then(Value::as_f64) {
                Some(x) => values.push(x),
                None => missing.push(format!("id {key} feature {name}")),
            }
        }
        rows.push(FeatureVector::clamped(values));
    }
    if missing.is_empty() {
        Ok(BatchParse::Complete(rows))
    } else {
        Ok(BatchParse::Missing(missing.join(", ")))
    }
}

/// Number of extraction calls for `n` prompts at batch size `b`.
pub fn extraction_calls(n: usize, b: usize) -> usize {
    n.div_ceil(b)
}

/// Rates prompts on a feature set in batches of `b`. Scores are not an input.
/// `site.step` is the first step index; batch `j` uses step `site.step + j`.
pub fn extract_features(
    backend: &dyn LlmBackend,
    prompts: &[Prompt],
    feature_set: &FeatureSet,
    b: usize,
    config: &RunConfig,
    site: CallSite,
) -> Result<EmbeddingMatrix, ElicitError> {
    assert!(b >= 1, "extraction batch size must be at least 1");
    if prompts.is_empty() {
        return Ok(EmbeddingMatrix::new(Vec::new())?);
    }
    let batches: Vec<&[Prompt]> = prompts.chunks(b).collect();
    let results = par_map(&batches, config.max_in_flight, |j, batch| {
        let texts: Vec<&str> = batch.iter().map(Prompt::as_str).collect();
        let text = render_extract_features(&texts, feature_set, config)?;
        let batch_site = CallSite {
            step: site.step + j,
            ..site
        };
        let req = batch_site.request(text, config.optimizer_temperature, config.max_tokens)?;
        let mut missing_reasks = 0;
        ask(backend, &req, &batch_site, MAX_ATTEMPTS, |out, _| {
            match parse_ratings(out, batch.len(), feature_set) {
                Ok(BatchParse::Complete(rows)) => Parsed::Done(rows),
                Ok(BatchParse::Missing(what)) => {
                    missing_reasks += 1;
                    if missing_reasks > 1 {
                        Parsed::Fail(ElicitError::MissingRatings(what))
                    } else {
                        Parsed::Retry(ElicitError::MissingRatings(what))
                    }
                }
                Err(e) => Parsed::Retry(e.into()),
            }
        })
    });
    let mut rows = Vec::with_capacity(prompts.len());
    for r in results {
        rows.extend(r?);
    }
    Ok(EmbeddingMatrix::new(rows)?)
}

pub fn fit_options(config: &RunConfig, round: usize, slot: usize) -> FitOptions {
    FitOptions {
        restarts: config.surrogate.restarts,
        steps: config.surrogate.steps,
        seed: crate::streams::derive_u64(config.seed, "gp_fit", round as u64, slot as u64),
        ..FitOptions::default()
    }
}

/// Cross-validated GP error of an embedding against the scores.
pub fn cross_validate(z: &EmbeddingMatrix, y: &[f64], options: &FitOptions) -> Result<CvResult<f64>, ElicitError> {
    if z.len() < 3 {
        return Err(ElicitError::TooFewForCv(z.len()));
    }
    Ok(gp_cv_mse(&z.to_matrix::<f64>(), y, CvPolicy::Auto, options)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub feature_set: FeatureSet,
    pub embedding: EmbeddingMatrix,
    pub cv: CvResult<f64>,
    pub is_incumbent: bool,
}

/// Index of the lowest-MSE candidate; ties prefer the incumbent, then the
/// lowest index.
pub fn select_feature_set(candidates: &[Candidate]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let cb = &candidates[b];
                if c.cv.gp_mse < cb.cv.gp_mse || (c.cv.gp_mse == cb.cv.gp_mse && c.is_incumbent && !cb.is_incumbent) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    best
}

/// One candidate slot of an elicitation phase.
#[derive(Debug, Clone)]
pub struct SlotOutcome {
    pub slot: usize,
    pub is_incumbent: bool,
    pub result: Result<Candidate, ElicitError>,
}

#[derive(Debug, Clone)]
pub struct ElicitationResult {
    pub outcomes: Vec<SlotOutcome>,
    /// Index into `outcomes` of the selected candidate.
    pub selected: usize,
}

impl ElicitationResult {
    pub fn selected(&self) -> &Candidate {
        self.outcomes[self.selected].result.as_ref().expect("selected slot succeeded")
    }
}

fn extract_candidate(
    backend: &dyn LlmBackend,
    history: &History,
    feature_set: FeatureSet,
    b: usize,
    config: &RunConfig,
    round: usize,
    slot: usize,
) -> Result<(FeatureSet, EmbeddingMatrix), ElicitError> {
    let embedding = extract_features(
        backend,
        &history.prompts(),
        &feature_set,
        b,
        config,
        CallSite::new("extract_features", round, slot, 0),
    )?;
    Ok((feature_set, embedding))
}

fn embedding_key(z: &EmbeddingMatrix) -> Vec<u64> {
    let mut key = vec![z.dim() as u64];
    key.extend(z.rows().iter().flat_map(|r| r.values().iter().map(|v| v.to_bits())));
    key
}

/// Full elicitation phase for one round: `K` fresh candidates (slots
/// `0..K`) plus, when given, the incumbent re-extracted on the current
/// history (slot `K`). Failed candidates are reported and skipped.
///
/// CV fits in a round share one seed, so candidates whose embeddings agree
/// exactly are cross-validated once.
pub fn elicit(
    backend: &dyn LlmBackend,
    history: &History,
    incumbent: Option<&FeatureSet>,
    config: &RunConfig,
    round: usize,
    b: usize,
) -> Result<ElicitationResult, ElicitError> {
    let k = config.k_rounds;
    let mut slots: Vec<(usize, Option<FeatureSet>)> = (0..k).map(|s| (s, None)).collect();
    if let Some(fs) = incumbent {
        slots.push((k, Some(fs.clone())));
    }
    let extracted = par_map(&slots, config.max_in_flight, |_, (slot, inc)| match inc {
        Some(fs) => extract_candidate(backend, history, fs.clone(), b, config, round, *slot),
        None => define_features(
            backend,
            history,
            incumbent,
            config,
            CallSite::new("define_features", round, *slot, 0),
        )
        .and_then(|fs| extract_candidate(backend, history, fs, b, config, round, *slot)),
    });

    let mut unique: Vec<Vec<u64>> = Vec::new();
    let mut unique_z: Vec<&EmbeddingMatrix> = Vec::new();
    let mut which: Vec<Option<usize>> = Vec::with_capacity(extracted.len());
    for r in &extracted {
        which.push(r.as_ref().ok().map(|(_, z)| {
            let key = embedding_key(z);
            match unique.iter().position(|u| *u == key) {
                Some(i) => i,
                None => {
                    unique.push(key);
                    unique_z.push(z);
                    unique.len() - 1
                }
            }
        }));
    }
    let y = history.scores();
    let opts = fit_options(config, round, 0);
    let cvs = par_map(&unique_z, config.max_in_flight, |_, z| cross_validate(z, &y, &opts));

    let outcomes: Vec<SlotOutcome> = slots
        .iter()
        .zip(extracted)
        .zip(which)
        .map(|(((slot, inc), r), w)| {
            let result = r.and_then(|(feature_set, embedding)| {
                let cv = cvs[w.expect("extracted")].clone()?;
                Ok(Candidate {
                    feature_set,
                    embedding,
                    cv,
                    is_incumbent: inc.is_some(),
                })
            });
            SlotOutcome {
                slot: *slot,
                is_incumbent: inc.is_some(),
                result,
            }
        })
        .collect();
    let ok: Vec<(usize, &Candidate)> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(i, o)| o.result.as_ref().ok().map(|c| (i, c)))
        .collect();
    if ok.is_empty() {
        let last = outcomes
            .iter()
            .rev()
            .find_map(|o| o.result.as_ref().err().cloned())
            .expect("at least one slot");
        return Err(ElicitError::AllCandidatesFailed(Box::new(last)));
    }
    let cands: Vec<Candidate> = ok.iter().map(|(_, c)| (*c).clone()).collect();
    let pick = select_feature_set(&cands).expect("non-empty");
    let selected = ok[pick].0;
    Ok(ElicitationResult { outcomes, selected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::EvaluatedPrompt;
    use crate::llm::ScriptedBackend;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn history(n: usize) -> History {
        (0..n)
            .map(|i| {
                let p = Prompt::new(format!("You are assistant variant {}.", "abcdefghijklmnopqrstuvwxyz".chars().nth(i % 26).unwrap())).unwrap();
                (EvaluatedPrompt::new(p, (i as f64 * 0.137 + 0.0413) % 1.0).unwrap(), 0)
            })
            .collect()
    }

    fn config() -> RunConfig {
        RunConfig {
            task_context: "Solve grade-school math word problems.".into(),
            ..RunConfig::default()
        }
    }

    fn fs(names: &[&str]) -> FeatureSet {
        FeatureSet::new(names.iter().map(|n| FeatureDefinition::new(*n, format!("{n} description"))).collect()).unwrap()
    }

    /// Rates every listed text object with a value derived from its length.
    fn rating_rule(ctx: &mut crate::llm::ScriptContext<'_>) -> Result<String, LlmError> {
        let text = &ctx.request.user_text;
        let features: Vec<&str> = text
            .split("Features to rate:\n")
            .nth(1)
            .unwrap()
            .split("\n\n")
            .next()
            .unwrap()
            .lines()
            .map(|l| l.trim_start_matches("- ").split(':').next().unwrap())
            .collect();
        let mut out = serde_json::Map::new();
        for (i, chunk) in text.split("--- Text Object ID: \"").skip(1).enumerate() {
            let body = chunk.split("---\n").nth(1).unwrap_or("");
            let mut row = serde_json::Map::new();
            for (k, f) in features.iter().enumerate() {
                row.insert(f.to_string(), Value::from(((body.len() + 3 * k) % 10) as f64 / 9.0 + if k == 0 && i == 0 { 0.3 } else { 0.0 }));
            }
            out.insert(i.to_string(), Value::Object(row));
        }
        Ok(Value::Object(out).to_string())
    }

    #[test]
    fn parses_two_features() {
        let b = ScriptedBackend::new(7).with_rule("define_features", |_| {
            Ok("Observations...\n[{\"name\": \"clarity\", \"description\": \"0 vague, 1 clear\"}, {\"name\": \"steps\", \"description\": \"d\"}]".into())
        });
        let out = define_features(&b, &history(6), None, &config(), CallSite::new("define_features", 1, 0, 0)).unwrap();
        assert_eq!(out.dim(), 2);
        assert_eq!(out.names().collect::<Vec<_>>(), vec!["clarity", "steps"]);
    }

    #[test]
    fn incumbent_descriptions_are_rendered() {
        let inc = fs(&["alpha", "beta", "gamma"]);
        let mut rng = derive_stream(1, "x", 0, 0);
        let text = render_define_features(&history(6), Some(&inc), &config(), &mut rng).unwrap();
        for n in ["alpha", "beta", "gamma"] {
            assert!(text.contains(&format!("- {n}: {n} description")));
        }
        assert!(text.contains("The following features are currently in use"));
        let plain = render_define_features(&history(6), None, &config(), &mut rng).unwrap();
        assert!(!plain.contains("currently in use"));
        assert!(plain.contains("Here are 6 text objects"));
    }

    #[test]
    fn duplicate_names_trigger_retry() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c2 = calls.clone();
        let b = ScriptedBackend::new(7).with_rule("define_features", move |ctx| {
            c2.fetch_add(1, Ordering::SeqCst);
            if ctx.request.call_index % 10 == 0 {
                Ok("[{\"name\": \"clarity\", \"description\": \"a\"}, {\"name\": \"clarity\", \"description\": \"b\"}]".into())
            } else {
                Ok("[{\"name\": \"clarity\", \"description\": \"a\"}]".into())
            }
        });
        let out = define_features(&b, &history(4), None, &config(), CallSite::new("define_features", 1, 0, 0)).unwrap();
        assert_eq!(out.dim(), 1);
        assert_eq!(calls.load(Ordering::SeqCst), 2);

        let always_dup = ScriptedBackend::new(7).with_rule("define_features", |_| {
            Ok("[{\"name\": \"c\", \"description\": \"a\"}, {\"name\": \"c\", \"description\": \"b\"}]".into())
        });
        let err = define_features(&always_dup, &history(4), None, &config(), CallSite::new("define_features", 1, 0, 0)).unwrap_err();
        assert!(matches!(err, ElicitError::Domain(DomainError::DuplicateFeatureName(_))));
    }

    #[test]
    fn rejects_oversized_sets() {
        let b = ScriptedBackend::new(7).with_rule("define_features", |_| {
            let items: Vec<String> = (0..9).map(|i| format!("{{\"name\": \"f{i}\", \"description\": \"d\"}}")).collect();
            Ok(format!("[{}]", items.join(",")))
        });
        let err = define_features(&b, &history(4), None, &config(), CallSite::new("define_features", 1, 0, 0)).unwrap_err();
        assert!(matches!(err, ElicitError::TooManyFeatures { found: 9, cap: 8 }));
    }

    #[test]
    fn extraction_uses_ceil_batches_and_clamps() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c2 = calls.clone();
        let b = ScriptedBackend::new(1).with_rule("extract_features", move |ctx| {
            c2.fetch_add(1, Ordering::SeqCst);
            rating_rule(ctx)
        });
        let h = history(25);
        let z = extract_features(&b, &h.prompts(), &fs(&["f", "g"]), 10, &config(), CallSite::new("extract_features", 1, 0, 0)).unwrap();
        assert_eq!(calls.load(Ordering::SeqCst), 3);
        assert_eq!(extraction_calls(25, 10), 3);
        assert_eq!((z.len(), z.dim()), (25, 2));
        assert!(z.rows().iter().all(|r| r.values().iter().all(|v| (0.0..=1.0).contains(v))));
        // Value 1.3 clamps to 1.0.
        let over = ScriptedBackend::new(1).with_rule("extract_features", |_| Ok("{\"0\": {\"f\": 1.3}}".into()));
        let z = extract_features(&over, &h.prompts()[..1], &fs(&["f"]), 1, &config(), CallSite::new("extract_features", 1, 0, 0)).unwrap();
        assert_eq!(z.rows()[0].values(), &[1.0]);
    }

    #[test]
    fn extraction_is_repeatable() {
        let b = ScriptedBackend::new(1).with_rule("extract_features", rating_rule);
        let h = history(12);
        let site = CallSite::new("extract_features", 2, 1, 0);
        let a = extract_features(&b, &h.prompts(), &fs(&["f"]), 5, &config(), site).unwrap();
        let c = extract_features(&b, &h.prompts(), &fs(&["f"]), 5, &config(), site).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn missing_ratings_are_reasked_once() {
        let calls = Arc::new(AtomicUsize::new(0));
        let c2 = calls.clone();
        let b = ScriptedBackend::new(1).with_rule("extract_features", move |_| {
            c2.fetch_add(1, Ordering::SeqCst);
            Ok("{\"0\": {\"f\": 0.5}}".into())
        });
        let h = history(2);
        let err = extract_features(&b, &h.prompts(), &fs(&["f"]), 2, &config(), CallSite::new("extract_features", 1, 0, 0)).unwrap_err();
        assert!(matches!(err, ElicitError::MissingRatings(_)));
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn extraction_prompt_never_contains_scores() {
        let h = history(12);
        let text = render_extract_features(&h.prompts(), &fs(&["f"]), &config()).unwrap();
        for s in h.scores() {
            let digits = format!("{s:.3}");
            assert!(!text.contains(&digits), "score {digits} leaked");
            assert!(!text.contains(&digits[2..]), "score digits {} leaked", &digits[2..]);
        }
    }

    fn cand(mse: f64, inc: bool) -> Candidate {
        Candidate {
            feature_set: fs(&["f"]),
            embedding: EmbeddingMatrix::new(vec![]).unwrap(),
            cv: CvResult {
                gp_mse: mse,
                mean_baseline_mse: 0.1,
                folds: 3,
            },
            is_incumbent: inc,
        }
    }

    #[test]
    fn selection_rules() {
        assert_eq!(select_feature_set(&[cand(0.04, false), cand(0.02, false), cand(0.03, false)]), Some(1));
        assert_eq!(select_feature_set(&[cand(0.02, false), cand(0.02, true)]), Some(1));
        assert_eq!(select_feature_set(&[cand(0.02, false), cand(0.02, false)]), Some(0));
        assert_eq!(select_feature_set(&[cand(0.5, false)]), Some(0));
        assert_eq!(select_feature_set(&[]), None);
    }

    #[test]
    fn elicit_skips_failed_slots() {
        let b = ScriptedBackend::new(3)
            .with_rule("define_features", |ctx| {
                if (ctx.request.call_index / 10_000) % 100 == 1 {
                    Ok("no json".into())
                } else {
                    Ok("[{\"name\": \"f\", \"description\": \"d\"}]".into())
                }
            })
            .with_rule("extract_features", rating_rule);
        let cfg = RunConfig {
            k_rounds: 3,
            surrogate: crate::domain::SurrogateSettings { restarts: 1, steps: 20 },
            ..config()
        };
        let r = elicit(&b, &history(6), None, &cfg, 1, cfg.b).unwrap();
        assert_eq!(r.outcomes.len(), 3);
        assert!(r.outcomes[1].result.is_err());
        assert!(r.outcomes[r.selected].result.is_ok());
        let with_inc = elicit(&b, &history(6), Some(&fs(&["f"])), &cfg, 2, cfg.b).unwrap();
        assert_eq!(with_inc.outcomes.len(), 4);
        assert!(with_inc.outcomes[3].is_incumbent);
        let min = with_inc
            .outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().ok())
            .map(|c| c.cv.gp_mse)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(with_inc.selected().cv.gp_mse, min);
    }
}
