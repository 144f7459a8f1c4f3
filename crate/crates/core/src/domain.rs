//! Core data types and history utilities.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::streams::digest_hex;
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("prompt text is empty after trimming")]
    EmptyPrompt,
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("history is empty")]
    EmptyHistory,
    #[error("feature set is empty")]
    EmptyFeatureSet,
    #[error("feature name is empty")]
    EmptyFeatureName,
    #[error("duplicate feature name `{0}`")]
    DuplicateFeatureName(String),
    #[error("feature value {0} is outside [0, 1]")]
    ValueOutOfRange(f64),
    #[error("embedding rows have inconsistent lengths")]
    Ragged,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// A complete system prompt.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Prompt(String);

impl Prompt {
    pub fn new(text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyPrompt);
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Hex SHA-256 of the prompt bytes.
    pub fn digest(&self) -> String {
        digest_hex(self.0.as_bytes())
    }
}

impl TryFrom<String> for Prompt {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Prompt> for String {
    fn from(p: Prompt) -> Self {
        p.0
    }
}

impl AsRef<str> for Prompt {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for Prompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedPrompt {
    pub prompt: Prompt,
    score: f64,
}

impl EvaluatedPrompt {
    pub fn new(prompt: Prompt, score: f64) -> Result<Self, DomainError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(DomainError::ScoreOutOfRange(score));
        }
        Ok(Self { prompt, score })
    }

    pub fn score(&self) -> f64 {
        self.score
    }
}

/// Clamps an evaluator score into `[0, 1]`. The second element is set when
/// clamping changed the value (NaN maps to 0).
pub fn clamp_score(raw: f64) -> (f64, Option<f64>) {
    if raw.is_nan() {
        return (0.0, Some(raw));
    }
    let clamped = raw.clamp(0.0, 1.0);
    if clamped == raw {
        (raw, None)
    } else {
        (clamped, Some(raw))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub evaluated: EvaluatedPrompt,
    pub round: usize,
}

/// Append-only optimization history `D_t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    entries: Vec<HistoryEntry>,
}

impl History {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, evaluated: EvaluatedPrompt, round: usize) {
        self.entries.push(HistoryEntry { evaluated, round });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[HistoryEntry] {
        &self.entries
    }

    pub fn evaluated(&self) -> impl Iterator<Item = &EvaluatedPrompt> {
        self.entries.iter().map(|e| &e.evaluated)
    }

    pub fn evaluated_vec(&self) -> Vec<EvaluatedPrompt> {
        self.evaluated().cloned().collect()
    }

    pub fn prompts(&self) -> Vec<Prompt> {
        self.evaluated().map(|e| e.prompt.clone()).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.evaluated().map(EvaluatedPrompt::score).collect()
    }

    /// Number of entries logged for `round`.
    pub fn round_len(&self, round: usize) -> usize {
        self.entries.iter().filter(|e| e.round == round).count()
    }
}

impl FromIterator<(EvaluatedPrompt, usize)> for History {
    fn from_iter<I: IntoIterator<Item = (EvaluatedPrompt, usize)>>(iter: I) -> Self {
        let mut h = History::new();
        for (e, r) in iter {
            h.push(e, r);
        }
        h
    }
}

/// Entry with maximal score, earliest insertion winning ties.
pub fn best_of(history: &History) -> Result<&EvaluatedPrompt, DomainError> {
    best_index(&history.scores())
        .map(|i| &history.entries()[i].evaluated)
        .ok_or(DomainError::EmptyHistory)
}

/// Index of the maximal score, earliest index winning ties.
pub fn best_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some(b) if scores[b] >= s => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Stratified in-context subsample of history indices.
///
/// Under the cap every index is returned. Otherwise `max(1, n_max / 4)`
/// highest-scored and as many lowest-scored entries are kept, and the
/// remaining slots are filled uniformly without replacement from the middle
/// band. The result is in insertion order.
pub fn stratified_subsample_indices<R: Rng + ?Sized>(
    scores: &[f64],
    n_max: usize,
    rng: &mut R,
) -> Vec<usize> {
    assert!(n_max >= 3, "n_max must be at least 3");
    let n = scores.len();
    if n <= n_max {
        return (0..n).collect();
    }
    let quota = (n_max / 4).max(1);
    let mut by_score: Vec<usize> = (0..n).collect();
    // Descending by score; stable sort keeps insertion order among ties.
    by_score.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let top = &by_score[..quota];
    let mut ascending: Vec<usize> = (0..n).collect();
    ascending.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let top_set: HashSet<usize> = top.iter().copied().collect();
    let bottom: Vec<usize> = ascending
        .iter()
        .copied()
        .filter(|i| !top_set.contains(i))
        .take(quota)
        .collect();
    let taken: HashSet<usize> = top.iter().chain(&bottom).copied().collect();
    let middle: Vec<usize> = (0..n).filter(|i| !taken.contains(i)).collect();
    let fill = (n_max - top.len() - bottom.len()).min(middle.len());
    let mut chosen: Vec<usize> = top.iter().chain(&bottom).copied().collect();
    chosen.extend(sample(rng, middle.len(), fill).into_iter().map(|k| middle[k]));
    chosen.sort_unstable();
    chosen
}

pub fn stratified_subsample<R: Rng + ?Sized>(
    history: &History,
    n_max: usize,
    rng: &mut R,
) -> Vec<EvaluatedPrompt> {
    let entries = history.entries();
    stratified_subsample_indices(&history.scores(), n_max, rng)
        .into_iter()
        .map(|i| entries[i].evaluated.clone())
        .collect()
}

/// Stable ascending sort by score (best last).
pub fn sort_ascending(mut entries: Vec<EvaluatedPrompt>) -> Vec<EvaluatedPrompt> {
    entries.sort_by(|a, b| a.score.total_cmp(&b.score));
    entries
}

fn default_temperature() -> f64 {
    0.7
}

/// Run hyperparameters. Serialized field names follow the conventional
/// symbols (`N`, `q`, `T`, …) so config files read like the parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Total evaluation budget including the seed batch.
    #[serde(rename = "N")]
    pub n_total: usize,
    /// Candidates per round.
    pub q: usize,
    /// Total evaluated batches, counting the seed batch as round 0.
    #[serde(rename = "T")]
    pub t_batches: usize,
    /// Feature elicitation rounds per iteration.
    #[serde(rename = "K")]
    pub k_rounds: usize,
    /// Generation plus refinement budget per candidate.
    #[serde(rename = "M")]
    pub m_budget: usize,
    /// l2 tolerance for early-stopping refinement.
    pub tau: f64,
    /// Extraction batch size.
    pub b: usize,
    /// In-context example cap.
    pub n_max: usize,
    /// Population cap for the evolutionary baseline.
    #[serde(rename = "P_max")]
    pub p_max: usize,
    pub seed: u64,
    #[serde(default = "default_temperature")]
    pub optimizer_temperature: f64,
    pub task_context: String,
    pub max_tokens: Option<u32>,
    pub max_in_flight: usize,
    /// Largest accepted feature-set dimensionality.
    pub d_max: usize,
    pub surrogate: SurrogateSettings,
    pub acquisition: AcquisitionSettings,
    /// Repeated extractions per round for the stability diagnostic (0 = off).
    pub stability_repeats: usize,
    pub parallel_evaluations: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSettings {
    pub restarts: usize,
    pub steps: usize,
}

impl Default for SurrogateSettings {
    fn default() -> Self {
        Self {
            restarts: 8,
            steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSettings {
    pub restarts: usize,
    pub raw_samples: usize,
    pub mc_samples: usize,
    pub final_mc_samples: usize,
    pub max_iters: usize,
}

impl Default for AcquisitionSettings {
    fn default() -> Self {
        Self {
            restarts: 20,
            raw_samples: 512,
            mc_samples: 128,
            final_mc_samples: 1024,
            max_iters: 100,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n_total: 30,
            q: 5,
            t_batches: 6,
            k_rounds: 5,
            m_budget: 10,
            tau: 0.1,
            b: 10,
            n_max: 12,
            p_max: 20,
            seed: 0,
            optimizer_temperature: default_temperature(),
            task_context: String::new(),
            max_tokens: Some(4096),
            max_in_flight: 8,
            d_max: 8,
            surrogate: SurrogateSettings::default(),
            acquisition: AcquisitionSettings::default(),
            stability_repeats: 0,
            parallel_evaluations: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |m: String| Err(DomainError::InvalidConfig(m));
        if self.q < 1 {
            return bad("q must be at least 1".into());
        }
        if self.t_batches < 2 {
            return bad("T must be at least 2".into());
        }
        if self.n_total != self.q * self.t_batches {
            return bad(format!(
                "N = {} must equal q * T = {}",
                self.n_total,
                self.q * self.t_batches
            ));
        }
        if self.k_rounds < 1 {
            return bad("K must be at least 1".into());
        }
        if self.m_budget < 1 {
            return bad("M must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return bad("tau must be positive".into());
        }
        if self.b < 1 {
            return bad("b must be at least 1".into());
        }
        if self.n_max < 3 {
            return bad("n_max must be at least 3".into());
        }
        if self.p_max < 1 {
            return bad("P_max must be at least 1".into());
        }
        if self.max_in_flight < 1 {
            return bad("max_in_flight must be at least 1".into());
        }
        if self.d_max < 1 {
            return bad("d_max must be at least 1".into());
        }
        if !(self.optimizer_temperature >= 0.0) {
            return bad("optimizer_temperature must be non-negative".into());
        }
        let acq = &self.acquisition;
        if acq.mc_samples < 64 || acq.final_mc_samples < 64 {
            return bad("acquisition MC sample counts must be at least 64".into());
        }
        if acq.raw_samples < 1 || acq.restarts < 1 {
            return bad("acquisition needs at least one raw sample and restart".into());
        }
        if self.surrogate.restarts < 1 {
            return bad("surrogate restarts must be at least 1".into());
        }
        if self.stability_repeats == 1 || self.stability_repeats >= 100 {
            return bad("stability_repeats must be 0 (off) or between 2 and 99".into());
        }
        Ok(())
    }

    /// Digest over the canonical JSON form; guards resume against config drift.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        digest_hex(value.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDefinition {
    pub name: String,
    pub description: String,
}

impl FeatureDefinition {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            description: description.into(),
        }
    }
}

/// Ordered feature definitions defining an embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureDefinition>", into = "Vec<FeatureDefinition>")]
pub struct FeatureSet {
    features: Vec<FeatureDefinition>,
}

impl FeatureSet {
    pub fn new(features: Vec<FeatureDefinition>) -> Result<Self, DomainError> {
        if features.is_empty() {
            return Err(DomainError::EmptyFeatureSet);
        }
        let mut seen = HashSet::new();
        for f in &features {
            if f.name.trim().is_empty() {
                return Err(DomainError::EmptyFeatureName);
            }
            if !seen.insert(f.name.as_str()) {
                return Err(DomainError::DuplicateFeatureName(f.name.clone()));
            }
        }
        Ok(Self { features })
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[FeatureDefinition] {
        &self.features
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }
}

impl TryFrom<Vec<FeatureDefinition>> for FeatureSet {
    type Error = DomainError;

    fn try_from(value: Vec<FeatureDefinition>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<FeatureSet> for Vec<FeatureDefinition> {
    fn from(s: FeatureSet) -> Self {
        s.features
    }
}

/// Point in `[0, 1]^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self, DomainError> {
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DomainError::ValueOutOfRange(bad));
        }
        Ok(Self(values))
    }

    /// Clamps each component into `[0, 1]`; NaN becomes 0.
    pub fn clamped(values: Vec<f64>) -> Self {
        Self(
            values
                .into_iter()
                .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn l2_distance(&self, other: &FeatureVector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "feature vector dimension mismatch");
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = DomainError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(v: FeatureVector) -> Self {
        v.0
    }
}

/// Rectangular stack of feature vectors aligned with a prompt list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FeatureVector>", into = "Vec<FeatureVector>")]
pub struct EmbeddingMatrix {
    rows: Vec<FeatureVector>,
}

impl EmbeddingMatrix {
    pub fn new(rows: Vec<FeatureVector>) -> Result<Self, DomainError> {
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.dim() != first.dim()) {
                return Err(DomainError::Ragged);
            }
        }
        Ok(Self { rows })
    }

    pub fn from_f64_rows(rows: Vec<Vec<f64>>) -> Result<Self, DomainError> {
        Self::new(
            rows.into_iter()
                .map(FeatureVector::new)
                .collect::<Result<_, _>>()?,
        )
    }

    pub fn rows(&self) -> &[FeatureVector] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, FeatureVector::dim)
    }

    pub fn to_matrix<S: Scalar>(&self) -> Matrix<S> {
        let rows: Vec<&[f64]> = self.rows.iter().map(FeatureVector::values).collect();
        if rows.is_empty() {
            return Matrix::zeros(0, 0);
        }
        Matrix::from_f64_rows(&rows).expect("embedding is rectangular")
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    pub fn append(&mut self, other: EmbeddingMatrix) -> Result<(), DomainError> {
        if !self.rows.is_empty() && !other.rows.is_empty() && self.dim() != other.dim() {
            return Err(DomainError::Ragged);
        }
        self.rows.extend(other.rows);
        Ok(())
    }
}

impl TryFrom<Vec<FeatureVector>> for EmbeddingMatrix {
    type Error = DomainError;

    fn try_from(value: Vec<FeatureVector>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<EmbeddingMatrix> for Vec<FeatureVector> {
    fn from(m: EmbeddingMatrix) -> Self {
        m.rows
    }
}
