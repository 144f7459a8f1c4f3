//! Prompt templates and the small formatters that fill them.
//!
//! Template text lives in `templates/*.txt`. Placeholders are `{snake_case}`
//! names; substitution is a single pass, so braces inside inserted values
//! (prompt texts, JSON) are never re-expanded.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::domain::{EvaluatedPrompt, FeatureSet, FeatureVector};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template:?} references unknown placeholder `{name}`")]
    MissingValue { template: TemplateId, name: String },
    #[error("value `{name}` is not used by template {template:?}")]
    UnusedValue { template: TemplateId, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    DefineFeatures,
    DefineFeaturesIncumbent,
    ExtractFeatures,
    InitialGeneration,
    Refine,
    RefineReference,
    Ape,
    Opro,
    PbMutation,
    PbRecombination,
    TextGrad,
    D0,
}

impl TemplateId {
    pub const ALL: [TemplateId; 12] = [
        TemplateId::DefineFeatures,
        TemplateId::DefineFeaturesIncumbent,
        TemplateId::ExtractFeatures,
        TemplateId::InitialGeneration,
        TemplateId::Refine,
        TemplateId::RefineReference,
        TemplateId::Ape,
        TemplateId::Opro,
        TemplateId::PbMutation,
        TemplateId::PbRecombination,
        TemplateId::TextGrad,
        TemplateId::D0,
    ];

    pub fn source(self) -> &'static str {
        match self {
            TemplateId::DefineFeatures => include_str!("../templates/define_features.txt"),
            TemplateId::DefineFeaturesIncumbent => {
                include_str!("../templates/define_features_incumbent.txt")
            }
            TemplateId::ExtractFeatures => include_str!("../templates/extract_features.txt"),
            TemplateId::InitialGeneration => include_str!("../templates/initial_generation.txt"),
            TemplateId::Refine => include_str!("../templates/refine.txt"),
            TemplateId::RefineReference => include_str!("../templates/refine_reference.txt"),
            TemplateId::Ape => include_str!("../templates/ape.txt"),
            TemplateId::Opro => include_str!("../templates/opro.txt"),
            TemplateId::PbMutation => include_str!("../templates/pb_mutation.txt"),
            TemplateId::PbRecombination => include_str!("../templates/pb_recombination.txt"),
            TemplateId::TextGrad => include_str!("../templates/textgrad.txt"),
            TemplateId::D0 => include_str!("../templates/d0.txt"),
        }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(self) -> Vec<&'static str> {
        let mut out = Vec::new();
        for piece in parse(self.source()) {
            if let Piece::Var(name) = piece {
                if !out.contains(&name) {
                    out.push(name);
                }
            }
        }
        out
    }
}

enum Piece<'a> {
    Lit(&'a str),
    Var(&'a str),
}

fn is_name_byte(b: u8) -> bool {
    b.is_ascii_lowercase() || b == b'_'
}

fn parse(src: &str) -> Vec<Piece<'_>> {
    let bytes = src.as_bytes();
    let mut pieces = Vec::new();
    let mut lit_start = 0;
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (is_name_byte(bytes[j]) || (j > i + 1 && bytes[j].is_ascii_digit())) {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' {
                if lit_start < i {
                    pieces.push(Piece::Lit(&src[lit_start..i]));
                }
                pieces.push(Piece::Var(&src[i + 1..j]));
                i = j + 1;
                lit_start = i;
                continue;
            }
        }
        i += 1;
    }
    if lit_start < src.len() {
        pieces.push(Piece::Lit(&src[lit_start..]));
    }
    pieces
}

/// Renders a template. Every placeholder must be supplied and every supplied
/// value must be used.
pub fn render(id: TemplateId, values: &[(&str, &str)]) -> Result<String, TemplateError> {
    let map: HashMap<&str, &str> = values.iter().copied().collect();
    let src = id.source().trim_end();
    let mut out = String::with_capacity(src.len() + 256);
    let mut used = Vec::new();
    for piece in parse(src) {
        match piece {
            Piece::Lit(s) => out.push_str(s),
            Piece::Var(name) => {
                let v = map.get(name).ok_or_else(|| TemplateError::MissingValue {
                    template: id,
                    name: name.to_string(),
                })?;
                out.push_str(v);
                used.push(name);
            }
        }
    }
    if let Some((name, _)) = values.iter().find(|(n, _)| !used.contains(n)) {
        return Err(TemplateError::UnusedValue {
            template: id,
            name: name.to_string(),
        });
    }
    Ok(out)
}

/// Renders an optional block template with the trailing blank line that
/// separates it from the text that follows.
pub fn render_block(id: TemplateId, values: &[(&str, &str)]) -> Result<String, TemplateError> {
    Ok(format!("{}\n\n", render(id, values)?))
}

/// The three evolutionary mutation operators, as `(name, instruction)`.
pub const MUTATION_INSTRUCTIONS: [(&str, &str); 3] = [
    (
        "rewrite_clearer",
        "Rewrite the following system prompt to be clearer and more precise. Keep the core instructions but improve clarity.",
    ),
    (
        "explicit_reasoning",
        "Modify the following system prompt to make reasoning steps more explicit. Add instructions for step-by-step thinking.",
    ),
    (
        "concise_constraints",
        "Make the following system prompt more concise. Remove redundancy while preserving all important constraints.",
    ),
];

pub fn format_score(score: f64) -> String {
    format!("{score:.3}")
}

/// Feature bullets, one `- name: description` line per feature.
pub fn format_feature_list<'a>(features: impl IntoIterator<Item = &'a crate::domain::FeatureDefinition>) -> String {
    features
        .into_iter()
        .map(|f| format!("- {}: {}", f.name, f.description))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn format_text_objects<S: AsRef<str>>(texts: &[S]) -> String {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("--- Text Object ID: \"{i}\" ---\n{}", t.as_ref()))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Score-annotated history block, entries in the given order.
pub fn format_scored_history(entries: &[EvaluatedPrompt]) -> String {
    entries
        .iter()
        .map(|e| format!("--- Prompt (Score: {}) ---\n{}", format_score(e.score()), e.prompt))
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// `{"name": 0.85, …}` with two decimals, in feature order.
pub fn format_feature_values(feature_set: &FeatureSet, values: &FeatureVector) -> String {
    let mut s = String::from("{");
    for (i, (name, v)) in feature_set.names().zip(values.values()).enumerate() {
        if i > 0 {
            s.push_str(", ");
        }
        let key = serde_json::to_string(name).expect("string serializes");
        let _ = write!(s, "{key}: {v:.2}");
    }
    s.push('}');
    s
}

fn median(scores: &[f64]) -> f64 {
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Examples sorted by score descending, labeled `[TOP]` at or above the
/// subsample median and `[BOTTOM]` below it. Feature values are shown when
/// `features` is supplied (one vector per entry).
pub fn format_tiered_examples(
    entries: &[EvaluatedPrompt],
    features: Option<(&FeatureSet, &[FeatureVector])>,
) -> String {
    if entries.is_empty() {
        return String::new();
    }
    let scores: Vec<f64> = entries.iter().map(EvaluatedPrompt::score).collect();
    let med = median(&scores);
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
        .into_iter()
        .map(|i| {
            let e = &entries[i];
            let tier = if e.score() >= med { "TOP" } else { "BOTTOM" };
            let mut head = format!("[{tier}] Score: {}", format_score(e.score()));
            if let Some((fs, vectors)) = features {
                let _ = write!(head, " | Features: {}", format_feature_values(fs, &vectors[i]));
            }
            format!("{head}\n{}", e.prompt)
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}
