//! Analysis over finished runs: representation similarity, extraction
//! stability, gap/improvement association and win-or-tie comparisons.

mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::domain::{EmbeddingMatrix, FeatureSet, Prompt, RunConfig};
use crate::elicitation::{extract_features, ElicitError};
use crate::linalg::Matrix;
use crate::llm::{CallSite, LlmBackend};
use crate::optimizer::{EventKind, RunLogEvent};
use crate::Scalar;

pub use report::{load_runs, write_report, LoadedRun, ReportError, ReportSummary};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DiagnosticsError {
    #[error("centered Gram matrix is zero")]
    DegenerateRepresentation,
    #[error("representations have {0} and {1} rows")]
    RowMismatch(usize, usize),
    #[error("need at least two rows, got {0}")]
    TooFewRows(usize),
    #[error("paired samples have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("results grid mismatch: {0}")]
    GridMismatch(String),
}

fn centered_gram<S: Scalar>(z: &Matrix<S>) -> Matrix<S> {
    let k = z.matmul(&z.transpose());
    let n = k.nrows();
    let nf = S::from_usize_lossy(n);
    let row_means: Vec<S> = (0..n).map(|i| k.row(i).iter().copied().sum::<S>() / nf).collect();
    let grand = row_means.iter().copied().sum::<S>() / nf;
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            // K is symmetric so column means equal row means.
            out[(i, j)] = k[(i, j)] - row_means[i] - row_means[j] + grand;
        }
    }
    out
}

/// Linear CKA between two representations of the same `n` items.
pub fn linear_cka<S: Scalar>(z: &Matrix<S>, z2: &Matrix<S>) -> Result<S, DiagnosticsError> {
    if z.nrows() != z2.nrows() {
        return Err(DiagnosticsError::RowMismatch(z.nrows(), z2.nrows()));
    }
    if z.nrows() < 2 {
        return Err(DiagnosticsError::TooFewRows(z.nrows()));
    }
    let a = centered_gram(z);
    let b = centered_gram(z2);
    let na = a.frobenius_norm();
    let nb = b.frobenius_norm();
    // Relative to the raw Gram scale, so rounding noise is not mistaken for signal.
    let eps = S::epsilon() * S::lit(64.0);
    let scale_a = z.frobenius_norm().powi(2).max(S::min_positive_value());
    let scale_b = z2.frobenius_norm().powi(2).max(S::min_positive_value());
    if na <= eps * scale_a || nb <= eps * scale_b {
        return Err(DiagnosticsError::DegenerateRepresentation);
    }
    let v = a.frobenius_dot(&b) / (na * nb);
    Ok(v.max(S::zero()).min(S::one()))
}

/// Sample standard deviation (ddof 1). `NaN` for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

pub const STABILITY_THRESHOLDS: [f64; 2] = [0.05, 0.1];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    pub repeats: usize,
    /// Per prompt, per feature.
    pub stds: Vec<Vec<f64>>,
    pub mean_std: f64,
    /// Fraction of cells whose std exceeds 0.05.
    pub frac_above_005: f64,
    /// Fraction of cells whose std exceeds 0.1.
    pub frac_above_010: f64,
}

impl StabilityReport {
    pub fn from_extractions(runs: &[EmbeddingMatrix]) -> Self {
        assert!(runs.len() >= 2, "stability needs at least two extractions");
        let n = runs[0].len();
        let d = runs[0].dim();
        let stds: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..d)
                    .map(|k| sample_std(&runs.iter().map(|z| z.rows()[i].values()[k]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        let cells: Vec<f64> = stds.iter().flatten().copied().collect();
        let frac = |t: f64| {
            if cells.is_empty() {
                0.0
            } else {
                cells.iter().filter(|s| **s > t).count() as f64 / cells.len() as f64
            }
        };
        Self {
            repeats: runs.len(),
            mean_std: if cells.is_empty() { 0.0 } else { cells.iter().sum::<f64>() / cells.len() as f64 },
            frac_above_005: frac(STABILITY_THRESHOLDS[0]),
            frac_above_010: frac(STABILITY_THRESHOLDS[1]),
            stds,
        }
    }
}

/// Re-extracts `feature_set` on `prompts` `repeats` times, each under its own
/// call site so sampling backends see independent requests.
pub fn extraction_stability(
    backend: &dyn LlmBackend,
    prompts: &[Prompt],
    feature_set: &FeatureSet,
    repeats: usize,
    config: &RunConfig,
    round: usize,
) -> Result<StabilityReport, ElicitError> {
    assert!(repeats >= 2, "extraction stability needs repeats >= 2");
    let runs = (0..repeats)
        .map(|r| extract_features(backend, prompts, feature_set, config.b, config, CallSite::new("extract_stability", round, r, 0)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(StabilityReport::from_extractions(&runs))
}

/// Average ranks, 1-based.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation with average ranks for ties; `None` when either
/// side is constant or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    if x.len() < 2 {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Upper edges of the final-gap bins; the last bin is open.
pub const GAP_BIN_EDGES: [f64; 3] = [0.1, 0.25, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapPair {
    pub round: usize,
    pub slot: usize,
    pub final_gap: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapBin {
    pub lower: f64,
    pub upper: Option<f64>,
    pub count: usize,
    pub improved: usize,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapAssociation {
    pub pairs: Vec<GapPair>,
    pub bins: Vec<GapBin>,
    /// Rank correlation between final gap and improvement.
    pub spearman: Option<f64>,
}

impl GapAssociation {
    pub fn from_pairs(pairs: Vec<GapPair>) -> Self {
        let mut bins = Vec::new();
        let mut lower = 0.0;
        for i in 0..=GAP_BIN_EDGES.len() {
            let upper = GAP_BIN_EDGES.get(i).copied();
            let members: Vec<&GapPair> = pairs
                .iter()
                .filter(|p| p.final_gap >= lower && upper.is_none_or(|u| p.final_gap < u))
                .collect();
            let improved = members.iter().filter(|p| p.improved).count();
            bins.push(GapBin {
                lower,
                upper,
                count: members.len(),
                improved,
                rate: (!members.is_empty()).then(|| improved as f64 / members.len() as f64),
            });
            lower = upper.unwrap_or(lower);
        }
        let gaps: Vec<f64> = pairs.iter().map(|p| p.final_gap).collect();
        let imp: Vec<f64> = pairs.iter().map(|p| f64::from(u8::from(p.improved))).collect();
        let spearman = if pairs.len() >= 2 { spearman(&gaps, &imp) } else { None };
        Self { pairs, bins, spearman }
    }
}

/// Pairs each realized candidate's final gap with whether its evaluation beat
/// the best score recorded before its round. Fallback realizations carry no
/// gap and are skipped.
pub fn gap_improvement_association(events: &[RunLogEvent]) -> GapAssociation {
    let mut scores: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut best_before: BTreeMap<usize, f64> = BTreeMap::new();
    let mut running = f64::NEG_INFINITY;
    let mut current_round = None;
    for e in events.iter().filter(|e| e.event_kind == EventKind::Evaluation) {
        if current_round != Some(e.round) {
            best_before.insert(e.round, running);
            current_round = Some(e.round);
        }
        let (Some(slot), Some(score)) = (e.payload["slot"].as_u64(), e.payload["score"].as_f64()) else {
            continue;
        };
        scores.insert((e.round, slot as usize), score);
        running = running.max(score);
    }
    let mut pairs = Vec::new();
    for e in events.iter().filter(|e| e.event_kind == EventKind::Realization) {
        let (Some(slot), Some(gap)) = (e.payload["slot"].as_u64(), e.payload["final_gap"].as_f64()) else {
            continue;
        };
        let slot = slot as usize;
        let (Some(score), Some(prior)) = (scores.get(&(e.round, slot)), best_before.get(&e.round)) else {
            continue;
        };
        pairs.push(GapPair {
            round: e.round,
            slot,
            final_gap: gap,
            improved: score > prior,
        });
    }
    GapAssociation::from_pairs(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CkaRow {
    pub from_round: usize,
    pub to_round: usize,
    pub shared: usize,
    pub cka: Option<f64>,
}

fn selected_embeddings(events: &[RunLogEvent]) -> Vec<(usize, EmbeddingMatrix)> {
    events
        .iter()
        .filter(|e| e.event_kind == EventKind::FeatureSetSelected)
        .filter_map(|e| Some((e.round, serde_json::from_value(e.payload["embedding"].clone()).ok()?)))
        .collect()
}

/// CKA between consecutive rounds' selected embeddings, compared on every
/// prompt of the earlier history (a prefix of the later one).
pub fn adjacent_cka(events: &[RunLogEvent]) -> Vec<CkaRow> {
    let z = selected_embeddings(events);
    z.windows(2)
        .map(|w| {
            let (r0, a) = &w[0];
            let (r1, b) = &w[1];
            let n = a.len().min(b.len());
            let idx: Vec<usize> = (0..n).collect();
            let cka = if a.dim() == 0 || b.dim() == 0 {
                None
            } else {
                linear_cka(&a.select(&idx).to_matrix::<f64>(), &b.select(&idx).to_matrix::<f64>()).ok()
            };
            CkaRow {
                from_round: *r0,
                to_round: *r1,
                shared: n,
                cka,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub method: String,
    pub task: String,
    pub seed: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WinOrTie {
    pub methods: Vec<String>,
    /// `cells[r][c]`: fraction of (task, seed) pairs where method `r` scores at
    /// least as well as method `c`. Diagonal is `None`.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Mean over off-diagonal cells; `None` with a single method.
    pub row_mean: Vec<Option<f64>>,
    pub pairs: usize,
}

impl WinOrTie {
    pub fn cell(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.methods.iter().position(|m| m == row)?;
        let c = self.methods.iter().position(|m| m == col)?;
        self.cells[r][c]
    }
}

/// Methods appear in first-seen order.
pub fn win_or_tie_matrix(results: &[RunResult]) -> Result<WinOrTie, DiagnosticsError> {
    let mut methods: Vec<String> = Vec::new();
    let mut grid: BTreeMap<&str, BTreeMap<(&str, u64), f64>> = BTreeMap::new();
    for r in results {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        if grid.entry(&r.method).or_default().insert((&r.task, r.seed), r.score).is_some() {
            return Err(DiagnosticsError::GridMismatch(format!(
                "duplicate result for {} on task {:?} seed {}",
                r.method, r.task, r.seed
            )));
        }
    }
    let keys: Vec<BTreeSet<(&str, u64)>> = methods.iter().map(|m| grid[m.as_str()].keys().copied().collect()).collect();
    if let Some(first) = keys.first() {
        for (m, k) in methods.iter().zip(&keys) {
            if k != first {
                return Err(DiagnosticsError::GridMismatch(format!(
                    "{m} covers {} (task, seed) pairs that differ from {}",
                    k.len(),
                    methods[0]
                )));
            }
        }
    }
    let pairs: Vec<(&str, u64)> = keys.first().map(|k| k.iter().copied().collect()).unwrap_or_default();
    let m = methods.len();
    let mut cells = vec![vec![None; m]; m];
    for r in 0..m {
        for c in 0..m {
            if r == c || pairs.is_empty() {
                continue;
            }
            let (gr, gc) = (&grid[methods[r].as_str()], &grid[methods[c].as_str()]);
            let wins = pairs.iter().filter(|k| gr[*k] >= gc[*k]).count();
            cells[r][c] = Some(wins as f64 / pairs.len() as f64);
        }
    }
    let row_mean = cells
        .iter()
        .map(|row| {
            let v: Vec<f64> = row.iter().flatten().copied().collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    Ok(WinOrTie {
        methods,
        cells,
        row_mean,
        pairs: pairs.len(),
    })
}

/// Two-sided 95% standard normal quantile.
const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedDelta {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Mean of `a[i] − b[i]` with a normal-approximation 95% interval.
pub fn paired_delta(a: &[f64], b: &[f64]) -> Result<PairedDelta, DiagnosticsError> {
    if a.len() != b.len() {
        return Err(DiagnosticsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(DiagnosticsError::TooFewRows(a.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let std_err = sample_std(&d) / (d.len() as f64).sqrt();
    Ok(PairedDelta {
        n: d.len(),
        mean,
        std_err,
        ci_low: mean - Z_95 * std_err,
        ci_high: mean + Z_95 * std_err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedBackend;
    use serde_json::json;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cka_self_and_degenerate() {
        let z = m(&[&[0.1, 0.9], &[0.4, 0.2], &[0.8, 0.5]]);
        assert!((linear_cka(&z, &z).unwrap() - 1.0).abs() < 1e-12);
        let flat = m(&[&[0.3], &[0.3], &[0.3]]);
        assert_eq!(linear_cka(&z, &flat), Err(DiagnosticsError::DegenerateRepresentation));
        assert_eq!(linear_cka(&z, &m(&[&[1.0], &[2.0]])), Err(DiagnosticsError::RowMismatch(3, 2)));
    }

    #[test]
    fn cka_two_rows_by_hand() {
        // Centered Grams: HKH = [[.25,-.25],[-.25,.25]], HLH = [[.5,-.5],[-.5,.5]]
        // so the value is exactly 1.
        let a = m(&[&[0.0], &[1.0]]);
        let b = m(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!((linear_cka(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cka_in_f32() {
        let z = Matrix::<f32>::from_rows(&[[0.1f32, 0.9], [0.4, 0.2], [0.8, 0.5]]).unwrap();
        assert!((linear_cka(&z, &z).unwrap() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn sample_std_ddof1() {
        assert!((sample_std(&[0.4, 0.5, 0.6]) - 0.1).abs() < 1e-12);
        assert!(sample_std(&[1.0]).is_nan());
    }

    #[test]
    fn deterministic_extraction_is_stable() {
        let b = ScriptedBackend::new(0).with_rule("extract_stability", |ctx| {
            let n = ctx.request.user_text.matches("--- Text Object ID").count();
            let obj: serde_json::Map<String, serde_json::Value> = (0..n).map(|i| (i.to_string(), json!({"f": 0.5}))).collect();
            Ok(serde_json::Value::Object(obj).to_string())
        });
        let fs = FeatureSet::new(vec![crate::domain::FeatureDefinition::new("f", "anything")]).unwrap();
        let prompts: Vec<Prompt> = (0..4).map(|i| Prompt::new(format!("p{i}")).unwrap()).collect();
        let r = extraction_stability(&b, &prompts, &fs, 3, &RunConfig::default(), 1).unwrap();
        assert!(r.stds.iter().flatten().all(|s| *s == 0.0));
        assert_eq!((r.frac_above_005, r.frac_above_010), (0.0, 0.0));
    }

    #[test]
    fn stability_fractions() {
        let runs: Vec<EmbeddingMatrix> = [[0.4, 0.5], [0.5, 0.5], [0.6, 0.58]]
            .iter()
            .map(|r| EmbeddingMatrix::from_f64_rows(vec![vec![r[0]], vec![r[1]]]).unwrap())
            .collect();
        let s = StabilityReport::from_extractions(&runs);
        assert!((s.stds[0][0] - 0.1).abs() < 1e-12);
        assert_eq!(s.frac_above_005, 0.5);
        assert_eq!(s.frac_above_010, 0.0);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    fn ev(seq: u64, kind: EventKind, round: usize, payload: serde_json::Value) -> RunLogEvent {
        RunLogEvent {
            sequence_no: seq,
            event_kind: kind,
            round,
            payload,
            timestamp: String::new(),
        }
    }

    #[test]
    fn association_uses_best_before_round() {
        let events = vec![
            ev(0, EventKind::Evaluation, 0, json!({"slot": 0, "score": 0.5})),
            ev(1, EventKind::Realization, 1, json!({"slot": 0, "final_gap": 0.05})),
            ev(2, EventKind::Realization, 1, json!({"slot": 1, "final_gap": 0.6})),
            ev(3, EventKind::Realization, 1, json!({"slot": 2, "fallback": true})),
            ev(4, EventKind::Evaluation, 1, json!({"slot": 0, "score": 0.7})),
            ev(5, EventKind::Evaluation, 1, json!({"slot": 1, "score": 0.6})),
            ev(6, EventKind::Evaluation, 1, json!({"slot": 2, "score": 0.5})),
        ];
        let a = gap_improvement_association(&events);
        assert_eq!(a.pairs.len(), 2);
        assert!(a.pairs.iter().all(|p| p.improved));
        assert_eq!(a.bins[0].rate, Some(1.0));
        assert_eq!(a.bins[1].rate, None);
        assert_eq!(a.spearman, None);
        assert!(gap_improvement_association(&[]).pairs.is_empty());
    }

    fn res(method: &str, seed: u64, score: f64) -> RunResult {
        RunResult {
            method: method.into(),
            task: "t".into(),
            seed,
            score,
        }
    }

    #[test]
    fn win_or_tie_rules() {
        let w = win_or_tie_matrix(&[res("a", 0, 0.5), res("b", 0, 0.5), res("a", 1, 0.9), res("b", 1, 0.1)]).unwrap();
        assert_eq!(w.cell("a", "b"), Some(1.0));
        assert_eq!(w.cell("b", "a"), Some(0.5));
        assert_eq!(w.cells[0][0], None);
        assert_eq!(w.row_mean, vec![Some(1.0), Some(0.5)]);
        let bad = win_or_tie_matrix(&[res("a", 0, 0.5), res("b", 1, 0.5)]);
        assert!(matches!(bad, Err(DiagnosticsError::GridMismatch(_))));
    }

    #[test]
    fn paired_delta_interval() {
        let d = paired_delta(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(d.mean, 2.0);
        assert!((d.std_err - 1.0 / 3f64.sqrt()).abs() < 1e-12);
        assert!(d.ci_low < 2.0 && d.ci_high > 2.0);
        assert!(paired_delta(&[1.0], &[1.0, 2.0]).is_err());
    }
}
