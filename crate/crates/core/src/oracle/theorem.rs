//! Empirical check of the embedding-error bounds on a synthetic instance.
//!
//! Each trial perturbs every oracle embedding by a vector of norm at most η,
//! builds the oracle-weight surrogate on the perturbed embedding, and checks
//! the pointwise bound `|f − f̄| ≤ B·L̂·η` and the suboptimality bound
//! `f(x*) − f(x_t) ≤ δ + 2·B·L̂·η` for every δ-optimal `x_t` under `f̄`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::SyntheticInstance;
use crate::par::par_map;
use crate::streams::derive_stream;

/// Absolute slack allowed for floating-point rounding.
pub const BOUND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremOptions {
    pub eta_grid: Vec<f64>,
    pub deltas: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub max_in_flight: usize,
}

impl Default for TheoremOptions {
    fn default() -> Self {
        Self {
            eta_grid: vec![0.0, 0.05, 0.1, 0.2],
            deltas: vec![0.0, 0.02],
            trials: 200,
            seed: 0,
            max_in_flight: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaSummary {
    pub eta: f64,
    pub trials: usize,
    pub lemma_violations: usize,
    pub theorem_violations: usize,
    /// Smallest `B·L̂·η − sup|f − f̄|` seen.
    pub worst_lemma_slack: f64,
    /// Smallest `δ + 2·B·L̂·η − (f(x*) − f(x_t))` seen.
    pub worst_theorem_slack: f64,
    pub max_lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub universe_size: usize,
    pub d: usize,
    pub norm_bound: f64,
    pub trials: usize,
    pub deltas: Vec<f64>,
    pub per_eta: Vec<EtaSummary>,
    pub lemma_violations: usize,
    pub theorem_violations: usize,
}

impl TheoremReport {
    pub fn violations(&self) -> usize {
        self.lemma_violations + self.theorem_violations
    }
}

struct Trial {
    eta_index: usize,
    lemma_violation: bool,
    theorem_violations: usize,
    lemma_slack: f64,
    theorem_slack: f64,
    lipschitz: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest `‖φ(z) − φ(z')‖ / ‖z − z'‖` over distinct pairs of `points`.
pub fn empirical_lipschitz(inst: &SyntheticInstance, points: &[Vec<f64>]) -> f64 {
    let diag: Vec<f64> = points.iter().map(|z| inst.kernel(z, z)).collect();
    let mut best = 0.0f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let r = dist(&points[i], &points[j]);
            if r < 1e-12 {
                continue;
            }
            let feat = (diag[i] + diag[j] - 2.0 * inst.kernel(&points[i], &points[j])).max(0.0).sqrt();
            best = best.max(feat / r);
        }
    }
    best
}

fn run_trial(inst: &SyntheticInstance, options: &TheoremOptions, trial: usize) -> Trial {
    let eta_index = trial % options.eta_grid.len();
    let eta = options.eta_grid[eta_index];
    let d = inst.dim();
    let mut rng = derive_stream(options.seed, "theorem_perturb", trial as u64, 0);
    let base: Vec<Vec<f64>> = inst.universe.iter().map(|p| inst.oracle_embed(p)).collect();
    let perturbed: Vec<Vec<f64>> = base
        .iter()
        .map(|z| {
            let mut u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
            let radius = eta * (1.0 - rng.random::<f64>() * 0.5);
            for x in &mut u {
                *x *= radius / n;
            }
            z.iter().zip(&u).map(|(a, b)| a + b).collect()
        })
        .collect();
    let f: Vec<f64> = base.iter().map(|z| inst.raw_value(z)).collect();
    let fbar: Vec<f64> = perturbed.iter().map(|z| inst.raw_value(z)).collect();
    let mut all = base.clone();
    all.extend(perturbed.iter().cloned());
    let lipschitz = empirical_lipschitz(inst, &all);
    let radius = inst.norm_bound * lipschitz * eta;

    let sup = f.iter().zip(&fbar).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let lemma_slack = radius - sup;
    let f_star = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let fbar_star = fbar.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut theorem_violations = 0;
    let mut theorem_slack = f64::INFINITY;
    for &delta in &options.deltas {
        for (i, &fb) in fbar.iter().enumerate() {
            if fb >= fbar_star - delta {
                let slack = delta + 2.0 * radius - (f_star - f[i]);
                theorem_slack = theorem_slack.min(slack);
                if slack < -BOUND_TOLERANCE {
                    theorem_violations += 1;
                }
            }
        }
    }
    Trial {
        eta_index,
        lemma_violation: lemma_slack < -BOUND_TOLERANCE,
        theorem_violations,
        lemma_slack,
        theorem_slack,
        lipschitz,
    }
}

/// Runs `trials` trials cycling through the η grid.
pub fn theorem_bound_check(inst: &SyntheticInstance, options: &TheoremOptions) -> TheoremReport {
    assert!(!options.eta_grid.is_empty(), "eta grid must be non-empty");
    assert!(options.eta_grid.iter().all(|e| *e >= 0.0), "eta must be non-negative");
    let ids: Vec<usize> = (0..options.trials).collect();
    let trials = par_map(&ids, options.max_in_flight, |_, &t| run_trial(inst, options, t));
    let mut per_eta: Vec<EtaSummary> = options
        .eta_grid
        .iter()
        .map(|&eta| EtaSummary {
            eta,
            trials: 0,
            lemma_violations: 0,
            theorem_violations: 0,
            worst_lemma_slack: f64::INFINITY,
            worst_theorem_slack: f64::INFINITY,
            max_lipschitz: 0.0,
        })
        .collect();
    for t in &trials {
        let s = &mut per_eta[t.eta_index];
        s.trials += 1;
        s.lemma_violations += usize::from(t.lemma_violation);
        s.theorem_violations += t.theorem_violations;
        s.worst_lemma_slack = s.worst_lemma_slack.min(t.lemma_slack);
        s.worst_theorem_slack = s.worst_theorem_slack.min(t.theorem_slack);
        s.max_lipschitz = s.max_lipschitz.max(t.lipschitz);
    }
    TheoremReport {
        universe_size: inst.universe.len(),
        d: inst.dim(),
        norm_bound: inst.norm_bound,
        trials: options.trials,
        deltas: options.deltas.clone(),
        lemma_violations: per_eta.iter().map(|s| s.lemma_violations).sum(),
        theorem_violations: per_eta.iter().map(|s| s.theorem_violations).sum(),
        per_eta,
    }
}
