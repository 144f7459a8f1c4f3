//! A scripted optimizer LLM living in the cue-phrase world.
//!
//! Responders read the rendered templates the same way a model would: they
//! find the feature list, texts, targets and gaps in the request text and
//! answer with cue-controlled prompts. Extraction reports exact cue coverage.

use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::{json, Map, Value};

use super::synthetic::compose;
use super::{SyntheticInstance, CUE_LEVELS};
use crate::domain::Prompt;
use crate::llm::{extract_json, JsonShape, LlmError, ScriptContext, ScriptedBackend};
use crate::streams::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct WorldOptions {
    /// Probability that a generated prompt misses its target by one cue in a
    /// random family.
    pub generation_noise: f64,
    /// Probability that a refinement also disturbs another family.
    pub refine_noise: f64,
}

impl Default for WorldOptions {
    fn default() -> Self {
        Self {
            generation_noise: 0.5,
            refine_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub instance: Arc<SyntheticInstance>,
    pub options: WorldOptions,
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let s = text.find(start)? + start.len();
    let rest = &text[s..];
    let e = rest.find(end).unwrap_or(rest.len());
    Some(&rest[..e])
}

fn malformed(what: &str) -> LlmError {
    LlmError::MalformedOutput(format!("world responder could not read {what}"))
}

fn requested_count(text: &str) -> Result<usize, LlmError> {
    let lower = text.to_ascii_lowercase();
    for (i, m) in lower.match_indices("exactly ") {
        let digits: String = lower[i + m.len()..].chars().take_while(char::is_ascii_digit).collect();
        if let Ok(q) = digits.parse() {
            return Ok(q);
        }
    }
    Err(malformed("count"))
}

fn feature_names(block: &str) -> Vec<String> {
    block
        .lines()
        .filter_map(|l| l.strip_prefix("- "))
        .filter_map(|l| l.split(':').next())
        .map(|s| s.trim().to_string())
        .collect()
}

fn text_objects(block: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut i = 0;
    loop {
        let head = format!("--- Text Object ID: \"{i}\" ---\n");
        let Some(start) = block.find(&head) else { break };
        let body = &block[start + head.len()..];
        let next = format!("\n\n--- Text Object ID: \"{}\" ---\n", i + 1);
        let end = body.find(&next).unwrap_or(body.len());
        out.push(&body[..end]);
        i += 1;
    }
    out
}

impl SyntheticWorld {
    pub fn new(instance: SyntheticInstance, options: WorldOptions) -> Self {
        Self {
            instance: Arc::new(instance),
            options,
        }
    }

    fn levels(&self, text: &str) -> Vec<usize> {
        self.instance
            .embed_text(text)
            .iter()
            .map(|v| (v * CUE_LEVELS as f64).round() as usize)
            .collect()
    }

    fn family_index(&self, name: &str) -> Option<usize> {
        self.instance.families.iter().position(|f| f.name == name)
    }

    fn random_prompt(&self, rng: &mut StreamRng) -> Prompt {
        let levels: Vec<usize> = (0..self.instance.dim()).map(|_| rng.random_range(0..=CUE_LEVELS)).collect();
        compose(&self.instance.families, &levels, rng)
    }

    fn nudge(&self, levels: &mut [usize], rng: &mut StreamRng) {
        let i = rng.random_range(0..levels.len());
        if levels[i] == 0 {
            levels[i] = 1;
        } else if levels[i] == CUE_LEVELS || rng.random_bool(0.5) {
            levels[i] -= 1;
        } else {
            levels[i] += 1;
        }
    }

    /// A variant of `parent` with one or two families moved by one cue.
    fn perturb(&self, parent: &str, rng: &mut StreamRng) -> Prompt {
        let mut levels = self.levels(parent);
        self.nudge(&mut levels, rng);
        if rng.random_bool(0.5) {
            self.nudge(&mut levels, rng);
        }
        compose(&self.instance.families, &levels, rng)
    }

    fn prompt_array(prompts: Vec<Prompt>) -> String {
        let texts: Vec<Value> = prompts.into_iter().map(|p| Value::String(p.as_str().to_string())).collect();
        Value::Array(texts).to_string()
    }

    fn rate(&self, text: &str) -> Result<String, LlmError> {
        let names = feature_names(between(text, "Features to rate:\n", "\n\nText objects to rate:").ok_or_else(|| malformed("features"))?);
        let objects = text_objects(between(text, "Text objects to rate:\n", "\n\nRate each text object on each feature.").ok_or_else(|| malformed("text objects"))?);
        let mut out = Map::new();
        for (i, body) in objects.iter().enumerate() {
            let z = self.instance.embed_text(body);
            let mut row = Map::new();
            for n in &names {
                let v = self.family_index(n).map_or(0.5, |f| z[f]);
                row.insert(n.clone(), json!(v));
            }
            out.insert(i.to_string(), Value::Object(row));
        }
        Ok(Value::Object(out).to_string())
    }

    fn generate(&self, text: &str, rng: &mut StreamRng) -> Result<String, LlmError> {
        let target_block = text.split("Target feature vector:\n").nth(1).ok_or_else(|| malformed("target"))?;
        let target = extract_json(target_block, JsonShape::Object)?;
        let mut levels = vec![0usize; self.instance.dim()];
        for (name, v) in target.as_object().expect("object") {
            if let (Some(f), Some(x)) = (self.family_index(name), v.as_f64()) {
                levels[f] = (x.clamp(0.0, 1.0) * CUE_LEVELS as f64).round() as usize;
            }
        }
        if rng.random_bool(self.options.generation_noise) {
            self.nudge(&mut levels, rng);
        }
        Ok(compose(&self.instance.families, &levels, rng).as_str().to_string())
    }

    fn refine(&self, text: &str, rng: &mut StreamRng) -> Result<String, LlmError> {
        let current = between(text, "Current system prompt:\n", "\n\nFeature gap analysis").ok_or_else(|| malformed("current prompt"))?;
        let gaps_block = text.split("largest first):\n").nth(1).ok_or_else(|| malformed("gaps"))?;
        let gaps = extract_json(gaps_block, JsonShape::ArrayOfObjects)?;
        let mut out = current.to_string();
        if let Some(first) = gaps.as_array().and_then(|a| a.first()) {
            let name = first.get("feature_name").and_then(Value::as_str).unwrap_or("");
            let increase = first.get("direction").and_then(Value::as_str) == Some("increase");
            if let Some(f) = self.family_index(name) {
                out = self.step_family(&out, f, increase, rng);
            }
        }
        if rng.random_bool(self.options.refine_noise) {
            let f = rng.random_range(0..self.instance.dim());
            let up = rng.random_bool(0.5);
            out = self.step_family(&out, f, up, rng);
        }
        Ok(out)
    }

    /// Adds or removes one cue phrase of family `f` in place.
    fn step_family(&self, text: &str, f: usize, increase: bool, rng: &mut StreamRng) -> String {
        let fam = &self.instance.families[f];
        let (present, absent): (Vec<&String>, Vec<&String>) = fam.phrases.iter().partition(|p| text.contains(p.as_str()));
        if increase {
            match absent.choose(rng) {
                Some(p) if text.contains('\n') => format!("{text} {p}"),
                Some(p) => format!("{text}\n{p}"),
                None => text.to_string(),
            }
        } else {
            match present.choose(rng) {
                Some(p) => {
                    let t = text.replacen(p.as_str(), "", 1);
                    let t = t.replace("  ", " ").replace("\n ", "\n");
                    t.trim_end().to_string()
                }
                None => text.to_string(),
            }
        }
    }

    fn recombine(&self, text: &str, rng: &mut StreamRng) -> Result<String, LlmError> {
        let p1 = between(text, "Parent prompt 1:\n", "\n\nParent prompt 2:\n").ok_or_else(|| malformed("parent 1"))?;
        let p2 = between(text, "Parent prompt 2:\n", "\n\nCreate a new system prompt").ok_or_else(|| malformed("parent 2"))?;
        let (a, b) = (self.levels(p1), self.levels(p2));
        let levels: Vec<usize> = a.iter().zip(&b).map(|(x, y)| if rng.random_bool(0.5) { *x } else { *y }).collect();
        Ok(compose(&self.instance.families, &levels, rng).as_str().to_string())
    }

    /// Scripted backend answering every tag used by the optimizer and the
    /// baselines.
    pub fn backend(&self, seed: u64) -> ScriptedBackend {
        let define = {
            let w = self.clone();
            move |_: &mut ScriptContext<'_>| {
                let defs: Vec<Value> = w
                    .instance
                    .families
                    .iter()
                    .map(|f| json!({"name": f.name, "description": f.description}))
                    .collect();
                Ok(format!(
                    "Observations: top prompts differ from bottom ones in their cue phrases.\n{}",
                    serde_json::to_string_pretty(&defs).expect("serializes")
                ))
            }
        };
        let fresh = {
            let w = self.clone();
            move |ctx: &mut ScriptContext<'_>| {
                let q = requested_count(&ctx.request.user_text)?;
                Ok(Self::prompt_array((0..q).map(|_| w.random_prompt(&mut ctx.rng)).collect()))
            }
        };
        let improve_best = |start: &'static str, end: &'static str| {
            let w = self.clone();
            move |ctx: &mut ScriptContext<'_>| {
                let text = &ctx.request.user_text;
                let q = requested_count(text)?;
                let best = between(text, start, end).ok_or_else(|| malformed("best prompt"))?;
                // OPRO lists the best entry last; TextGrad prefixes its score.
                let best = match best.split_once("):\n") {
                    Some((_, b)) if start.starts_with("Current best") => b,
                    _ => best.rsplit(" ---\n").next().unwrap_or(best),
                };
                Ok(Self::prompt_array((0..q).map(|_| w.perturb(best, &mut ctx.rng)).collect()))
            }
        };
        let rate = {
            let w = self.clone();
            move |ctx: &mut ScriptContext<'_>| w.rate(&ctx.request.user_text)
        };
        let w1 = self.clone();
        let w2 = self.clone();
        let w3 = self.clone();
        let w4 = self.clone();
        ScriptedBackend::new(seed)
            .with_rule("define_features", define)
            .with_rule("extract_features", rate.clone())
            .with_rule("extract_realization", rate.clone())
            .with_rule("extract_stability", rate)
            .with_rule("generate", move |ctx| w1.generate(&ctx.request.user_text, &mut ctx.rng))
            .with_rule("refine", move |ctx| w2.refine(&ctx.request.user_text, &mut ctx.rng))
            .with_rule("d0", fresh.clone())
            .with_rule("ape", fresh)
            .with_rule("opro", improve_best("sorted from worst to best:\n\n", "\n\nAnalyze what makes"))
            .with_rule("textgrad", improve_best("Current best prompt (score: ", "\n\nStep 1:"))
            .with_rule("pb_mutation", move |ctx| {
                let parent = between(&ctx.request.user_text, "Original system prompt:\n", "\n\nOutput ONLY the modified")
                    .ok_or_else(|| malformed("parent"))?
                    .to_string();
                Ok(w3.perturb(&parent, &mut ctx.rng).as_str().to_string())
            })
            .with_rule("pb_recombination", move |ctx| w4.recombine(&ctx.request.user_text, &mut ctx.rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{EmbeddingMatrix, RunConfig};
    use crate::elicitation::extract_features;
    use crate::llm::CallSite;
    use crate::oracle::SyntheticSpec;

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(
            SyntheticInstance::build(&SyntheticSpec {
                universe_size: 50,
                d: 3,
                ..SyntheticSpec::default()
            })
            .unwrap(),
            WorldOptions::default(),
        )
    }

    #[test]
    fn extraction_reports_exact_coverage() {
        let w = world();
        let b = w.backend(0);
        let prompts: Vec<Prompt> = w.instance.universe[..12].to_vec();
        let z = extract_features(&b, &prompts, &w.instance.feature_set(), 5, &RunConfig::default(), CallSite::new("extract_features", 1, 0, 0)).unwrap();
        let want = EmbeddingMatrix::from_f64_rows(prompts.iter().map(|p| w.instance.oracle_embed(p)).collect()).unwrap();
        assert_eq!(z, want);
    }

    #[test]
    fn step_family_moves_one_cue() {
        let w = world();
        let mut rng = crate::streams::derive_stream(0, "t", 0, 0);
        let p = compose(&w.instance.families, &[2, 0, 5], &mut rng);
        let up = w.step_family(p.as_str(), 1, true, &mut rng);
        assert_eq!(w.levels(&up), vec![2, 1, 5]);
        let down = w.step_family(&up, 2, false, &mut rng);
        assert_eq!(w.levels(&down), vec![2, 1, 4]);
        let same = w.step_family(&down, 1, true, &mut rng);
        assert_eq!(w.levels(&same), vec![2, 2, 4]);
    }

    #[test]
    fn counts_are_read() {
        assert_eq!(requested_count("Then generate exactly 7 new system prompts").unwrap(), 7);
        assert_eq!(requested_count("Generate exactly 5 diverse system prompts").unwrap(), 5);
    }
}
