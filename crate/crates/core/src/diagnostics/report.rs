//! Report directory emission from a set of run logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::{adjacent_cka, gap_improvement_association, paired_delta, win_or_tie_matrix, GapAssociation, RunResult, WinOrTie};
use crate::optimizer::{read_log, round_complete_scores, EventKind, LogError, LogHeader, RunLogEvent};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Log { path: PathBuf, source: LogError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("no run logs found")]
    NoRuns,
}

#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub path: PathBuf,
    pub header: LogHeader,
    pub events: Vec<RunLogEvent>,
}

impl LoadedRun {
    pub fn read(path: &Path) -> Result<Self, ReportError> {
        let (header, events) = read_log(path).map_err(|source| ReportError::Log {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(Self {
            path: path.to_path_buf(),
            header,
            events,
        })
    }

    pub fn label(&self) -> String {
        self.header.label()
    }

    pub fn seed(&self) -> u64 {
        self.header.config.seed
    }

    pub fn task(&self) -> &str {
        &self.header.config.task_context
    }

    pub fn trace(&self) -> Vec<f64> {
        round_complete_scores(&self.events)
    }

    pub fn final_best(&self) -> Option<f64> {
        self.trace().last().copied()
    }

    pub fn result(&self) -> Option<RunResult> {
        Some(RunResult {
            method: self.label(),
            task: self.task().to_string(),
            seed: self.seed(),
            score: self.final_best()?,
        })
    }
}

/// Every `*.jsonl` file directly under `dir`, in file-name order.
pub fn load_runs(dir: &Path) -> Result<Vec<LoadedRun>, ReportError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    paths.iter().map(|p| LoadedRun::read(p)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportSummary {
    pub runs: Vec<Value>,
    pub methods: BTreeMap<String, Value>,
    pub win_or_tie: Option<WinOrTie>,
    pub win_or_tie_error: Option<String>,
    pub paired_deltas: Vec<Value>,
    pub gap_association: BTreeMap<String, GapAssociation>,
    pub files: Vec<String>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn labels_in_order(runs: &[LoadedRun]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in runs {
        let l = r.label();
        if !out.contains(&l) {
            out.push(l);
        }
    }
    out
}

/// Mean best-so-far per method, over runs that reached each round.
fn mean_traces(runs: &[LoadedRun]) -> Vec<(String, Vec<f64>)> {
    labels_in_order(runs)
        .into_iter()
        .map(|label| {
            let traces: Vec<Vec<f64>> = runs.iter().filter(|r| r.label() == label).map(LoadedRun::trace).collect();
            let len = traces.iter().map(Vec::len).max().unwrap_or(0);
            let mean_trace = (0..len)
                .filter_map(|t| mean(&traces.iter().filter_map(|tr| tr.get(t).copied()).collect::<Vec<_>>()))
                .collect();
            (label, mean_trace)
        })
        .collect()
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn convergence_svg(traces: &[(String, Vec<f64>)]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let rounds = traces.iter().map(|(_, t)| t.len()).max().unwrap_or(1).max(2) - 1;
    let all: Vec<f64> = traces.iter().flat_map(|(_, t)| t.iter().copied()).collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min).min(1.0);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1e-9);
    let x = |t: usize| pad + (w - 2.0 * pad) * t as f64 / rounds as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{b}" stroke="black"/>"#,
        b = h - pad,
        r = w - pad
    );
    for t in 0..=rounds {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#, x(t), h - pad + 16.0);
    }
    for v in [lo, (lo + hi) / 2.0, hi] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, pad - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">round</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">mean best-so-far</text>"#, w / 2.0, pad / 2.0);
    for (i, (label, trace)) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = trace.iter().enumerate().map(|(t, v)| format!("{:.1},{:.1}", x(t), y(*v))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            w - pad - 120.0,
            pad + 16.0 * (i as f64 + 1.0),
            label.replace('&', "&amp;").replace('<', "&lt;")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes summary.json, convergence.csv, win_or_tie.csv, stability.csv,
/// cka.csv and, when `svg` is set, convergence.svg into `out_dir`.
pub fn write_report(runs: &[LoadedRun], out_dir: &Path, svg: bool) -> Result<ReportSummary, ReportError> {
    if runs.is_empty() {
        return Err(ReportError::NoRuns);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();

    let mut conv = csv::Writer::from_path(out_dir.join("convergence.csv"))?;
    conv.write_record(["method", "task", "seed", "round", "best_so_far", "file"])?;
    for r in runs {
        for (t, v) in r.trace().iter().enumerate() {
            conv.write_record([
                r.label(),
                r.task().to_string(),
                r.seed().to_string(),
                t.to_string(),
                v.to_string(),
                r.path.display().to_string(),
            ])?;
        }
    }
    conv.flush()?;
    files.push("convergence.csv".to_string());

    let results: Vec<RunResult> = runs.iter().filter_map(LoadedRun::result).collect();
    let (win_or_tie, win_or_tie_error) = match win_or_tie_matrix(&results) {
        Ok(w) => (Some(w), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let mut wt = csv::Writer::from_path(out_dir.join("win_or_tie.csv"))?;
    if let Some(w) = &win_or_tie {
        let mut head = vec!["method".to_string()];
        head.extend(w.methods.iter().cloned());
        head.push("mean".into());
        wt.write_record(&head)?;
        for (i, m) in w.methods.iter().enumerate() {
            let mut row = vec![m.clone()];
            row.extend(w.cells[i].iter().map(|c| opt(*c)));
            row.push(opt(w.row_mean[i]));
            wt.write_record(&row)?;
        }
    }
    wt.flush()?;
    files.push("win_or_tie.csv".to_string());

    let mut st = csv::Writer::from_path(out_dir.join("stability.csv"))?;
    st.write_record(["method", "seed", "round", "repeats", "mean_std", "frac_above_0.05", "frac_above_0.1"])?;
    for r in runs {
        for e in r
            .events
            .iter()
            .filter(|e| e.event_kind == EventKind::Diagnostic && e.payload["kind"] == "extraction_stability")
        {
            let p = &e.payload;
            st.write_record([
                r.label(),
                r.seed().to_string(),
                e.round.to_string(),
                p["repeats"].to_string(),
                p["mean_std"].to_string(),
                p["frac_above_005"].to_string(),
                p["frac_above_010"].to_string(),
            ])?;
        }
    }
    st.flush()?;
    files.push("stability.csv".to_string());

    let mut ck = csv::Writer::from_path(out_dir.join("cka.csv"))?;
    ck.write_record(["method", "seed", "from_round", "to_round", "shared", "cka"])?;
    for r in runs {
        for row in adjacent_cka(&r.events) {
            ck.write_record([
                r.label(),
                r.seed().to_string(),
                row.from_round.to_string(),
                row.to_round.to_string(),
                row.shared.to_string(),
                opt(row.cka),
            ])?;
        }
    }
    ck.flush()?;
    files.push("cka.csv".to_string());

    let traces = mean_traces(runs);
    if svg {
        std::fs::write(out_dir.join("convergence.svg"), convergence_svg(&traces))?;
        files.push("convergence.svg".to_string());
    }

    let mut methods = BTreeMap::new();
    for (label, trace) in &traces {
        let finals: Vec<f64> = results.iter().filter(|r| &r.method == label).map(|r| r.score).collect();
        methods.insert(
            label.clone(),
            json!({"runs": finals.len(), "mean_final_best": mean(&finals), "mean_trace": trace}),
        );
    }

    // Paired deltas of the full method against every other method on shared (task, seed) pairs.
    let mut paired_deltas = Vec::new();
    let by_key: BTreeMap<(&str, &str, u64), f64> = results.iter().map(|r| ((r.method.as_str(), r.task.as_str(), r.seed), r.score)).collect();
    if let Some(reference) = labels_in_order(runs).into_iter().find(|l| l == "reelicit") {
        for other in labels_in_order(runs).into_iter().filter(|l| *l != reference) {
            let (a, b): (Vec<f64>, Vec<f64>) = results
                .iter()
                .filter(|r| r.method == reference)
                .filter_map(|r| Some((r.score, *by_key.get(&(other.as_str(), r.task.as_str(), r.seed))?)))
                .unzip();
            let delta = paired_delta(&a, &b).ok();
            paired_deltas.push(json!({"method": reference, "versus": other, "pairs": a.len(), "delta": delta}));
        }
    }

    let mut gap_association = BTreeMap::new();
    for label in labels_in_order(runs) {
        let pairs: Vec<_> = runs
            .iter()
            .filter(|r| r.label() == label)
            .flat_map(|r| gap_improvement_association(&r.events).pairs)
            .collect();
        if !pairs.is_empty() {
            gap_association.insert(label, GapAssociation::from_pairs(pairs));
        }
    }

    let run_rows = runs
        .iter()
        .map(|r| {
            json!({
                "file": r.path.display().to_string(),
                "method": r.label(),
                "seed": r.seed(),
                "config_digest": r.header.config_digest,
                "final_best": r.final_best(),
                "evaluations": r.events.iter().filter(|e| e.event_kind == EventKind::Evaluation).count(),
                "rounds_completed": r.trace().len(),
            })
        })
        .collect();
    files.push("summary.json".to_string());
    let summary = ReportSummary {
        runs: run_rows,
        methods,
        win_or_tie,
        win_or_tie_error,
        paired_deltas,
        gap_association,
        files,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}
