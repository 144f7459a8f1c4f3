//! Synthetic objective over a cue-phrase world.
//!
//! Each latent coordinate is the fraction of one family's cue phrases present
//! in the text. The objective is a finite Matérn 5/2 kernel expansion over
//! that latent space, rescaled to [0, 1] over the instance universe.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Objective, ObjectiveError};
use crate::domain::{DomainError, FeatureDefinition, FeatureSet, Prompt};
use crate::streams::derive_stream;
use crate::surrogate::matern52_corr;

/// Cue phrases per family; latent coordinates take `CUE_LEVELS + 1` values.
pub const CUE_LEVELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueFamily {
    pub name: String,
    pub description: String,
    pub phrases: Vec<String>,
}

impl CueFamily {
    /// Fraction of this family's phrases that occur in `text`.
    pub fn coverage(&self, text: &str) -> f64 {
        let hits = self.phrases.iter().filter(|p| text.contains(p.as_str())).count();
        hits as f64 / self.phrases.len() as f64
    }
}

const OPENERS: [&str; 4] = [
    "You are a helpful assistant.",
    "You are an expert problem solver.",
    "You are a careful assistant.",
    "You are a patient tutor.",
];

const FAMILIES: [(&str, &str, [&str; CUE_LEVELS]); 6] = [
    (
        "step_guidance",
        "How explicitly the prompt asks for step-by-step working. 0: no guidance on steps; 1: insists on explicit, numbered intermediate steps.",
        [
            "Work through the problem one step at a time.",
            "Write out every intermediate calculation.",
            "Number each step of your reasoning.",
            "State what each step accomplishes before moving on.",
            "Do not skip steps, even easy ones.",
        ],
    ),
    (
        "verification",
        "How strongly the prompt requires checking work. 0: no checking; 1: demands re-checking calculations and the final answer.",
        [
            "Double-check each calculation before continuing.",
            "Verify the final answer by substituting it back.",
            "Re-read the question to confirm what is asked.",
            "Check units and magnitudes for plausibility.",
            "If a result looks wrong, recompute it.",
        ],
    ),
    (
        "answer_format",
        "How precisely the prompt constrains the final answer format. 0: unconstrained; 1: a strict, machine-readable final line.",
        [
            "End with a line of the form 'Answer: <number>'.",
            "Give the final answer as a single number.",
            "Put the final answer on its own line.",
            "Do not add text after the final answer.",
            "Omit units from the final numeric answer.",
        ],
    ),
    (
        "conciseness",
        "How much the prompt pushes for brevity. 0: no brevity constraints; 1: strongly demands terse output.",
        [
            "Keep explanations brief.",
            "Avoid restating the problem.",
            "Use short sentences.",
            "Skip pleasantries and filler.",
            "Prefer equations over prose.",
        ],
    ),
    (
        "decomposition",
        "How much the prompt asks to break the problem into parts first. 0: no decomposition; 1: full inventory of givens, unknowns and sub-problems.",
        [
            "Identify the quantities given in the problem.",
            "List what is unknown before computing.",
            "Translate the words into equations.",
            "Solve sub-problems separately.",
            "Combine partial results at the end.",
        ],
    ),
    (
        "caution",
        "How much the prompt warns about common traps. 0: no warnings; 1: explicit warnings about several error sources.",
        [
            "Watch out for trick wording.",
            "Be careful with percentages and rates.",
            "Pay attention to the order of operations.",
            "Distinguish totals from per-item amounts.",
            "Do not round until the final step.",
        ],
    ),
];

/// Largest latent dimensionality the cue world supports.
pub const MAX_DIM: usize = FAMILIES.len();

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub universe_size: usize,
    pub d: usize,
    pub num_centers: usize,
    /// RKHS norm of the objective.
    pub norm_bound: f64,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            universe_size: 200,
            d: 3,
            num_centers: 4,
            norm_bound: 1.0,
            lengthscale: 0.3,
            signal_variance: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticInstance {
    pub families: Vec<CueFamily>,
    pub universe: Vec<Prompt>,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub norm_bound: f64,
    pub raw_min: f64,
    pub raw_max: f64,
}

fn latent_kernel(a: &[f64], b: &[f64], lengthscale: f64, signal_variance: f64) -> f64 {
    let r2: f64 = a.iter().zip(b).map(|(x, y)| ((x - y) / lengthscale).powi(2)).sum();
    signal_variance * matern52_corr(r2.sqrt())
}

/// Builds a prompt with `levels[i]` phrases from family `i`, in shuffled
/// order after a random opener.
pub fn compose<R: Rng + ?Sized>(families: &[CueFamily], levels: &[usize], rng: &mut R) -> Prompt {
    let mut phrases: Vec<&str> = Vec::new();
    for (fam, &k) in families.iter().zip(levels) {
        let mut idx: Vec<usize> = (0..fam.phrases.len()).collect();
        idx.shuffle(rng);
        phrases.extend(idx[..k.min(idx.len())].iter().map(|&i| fam.phrases[i].as_str()));
    }
    phrases.shuffle(rng);
    let opener = OPENERS.choose(rng).expect("non-empty");
    let text = if phrases.is_empty() {
        opener.to_string()
    } else {
        format!("{opener}\n{}", phrases.join(" "))
    };
    Prompt::new(text).expect("opener is non-empty")
}

impl SyntheticInstance {
    pub fn build(spec: &SyntheticSpec) -> Result<Self, DomainError> {
        if spec.universe_size < 10 {
            return Err(DomainError::InvalidConfig("universe_size must be at least 10".into()));
        }
        if spec.d == 0 || spec.d > MAX_DIM {
            return Err(DomainError::InvalidConfig(format!("d must be in 1..={MAX_DIM}")));
        }
        if spec.num_centers == 0 || !(spec.norm_bound > 0.0) || !(spec.lengthscale > 0.0) || !(spec.signal_variance > 0.0) {
            return Err(DomainError::InvalidConfig("centers, B, lengthscale and variance must be positive".into()));
        }
        let families: Vec<CueFamily> = FAMILIES[..spec.d]
            .iter()
            .map(|(n, desc, ph)| CueFamily {
                name: n.to_string(),
                description: phrase_description(desc, ph),
                phrases: ph.iter().map(|s| s.to_string()).collect(),
            })
            .collect();

        let mut rng = derive_stream(spec.seed, "synthetic_universe", 0, 0);
        let lattice = (CUE_LEVELS + 1).pow(spec.d as u32);
        let mut universe = Vec::with_capacity(spec.universe_size);
        let mut seen = HashSet::new();
        // Cover every latent lattice point once when the universe is big enough.
        if spec.universe_size >= lattice {
            for code in 0..lattice {
                let levels = decode_levels(code, spec.d);
                let p = compose(&families, &levels, &mut rng);
                if seen.insert(p.as_str().to_string()) {
                    universe.push(p);
                }
            }
        }
        let mut attempts = 0;
        while universe.len() < spec.universe_size {
            attempts += 1;
            if attempts > 1000 * spec.universe_size {
                return Err(DomainError::InvalidConfig("could not generate enough distinct prompts".into()));
            }
            let levels: Vec<usize> = (0..spec.d).map(|_| rng.random_range(0..=CUE_LEVELS)).collect();
            let p = compose(&families, &levels, &mut rng);
            if seen.insert(p.as_str().to_string()) {
                universe.push(p);
            }
        }

        let mut rng = derive_stream(spec.seed, "synthetic_expansion", 0, 0);
        let centers: Vec<Vec<f64>> = (0..spec.num_centers)
            .map(|_| (0..spec.d).map(|_| rng.random::<f64>()).collect())
            .collect();
        let mut weights: Vec<f64> = (0..spec.num_centers).map(|_| rng.sample(StandardNormal)).collect();
        let mut inst = Self {
            families,
            universe,
            lengthscale: spec.lengthscale,
            signal_variance: spec.signal_variance,
            centers,
            weights: weights.clone(),
            norm_bound: spec.norm_bound,
            raw_min: 0.0,
            raw_max: 1.0,
        };
        let norm = inst.rkhs_norm();
        if norm < 1e-12 {
            weights = vec![0.0; spec.num_centers];
            weights[0] = 1.0;
            inst.weights = weights;
        }
        let scale = spec.norm_bound / inst.rkhs_norm();
        for w in &mut inst.weights {
            *w *= scale;
        }
        inst.set_range_from_universe();
        Ok(inst)
    }

    /// Assembles an instance from explicit parts without rescaling weights.
    pub fn from_parts(
        families: Vec<CueFamily>,
        universe: Vec<Prompt>,
        lengthscale: f64,
        signal_variance: f64,
        centers: Vec<Vec<f64>>,
        weights: Vec<f64>,
    ) -> Self {
        let mut inst = Self {
            families,
            universe,
            lengthscale,
            signal_variance,
            centers,
            weights,
            norm_bound: 0.0,
            raw_min: 0.0,
            raw_max: 1.0,
        };
        inst.norm_bound = inst.rkhs_norm();
        inst.set_range_from_universe();
        inst
    }

    fn set_range_from_universe(&mut self) {
        let raws: Vec<f64> = self.universe.iter().map(|p| self.raw_value(&self.oracle_embed(p))).collect();
        self.raw_min = raws.iter().copied().fold(f64::INFINITY, f64::min);
        self.raw_max = raws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !raws.is_empty() && self.raw_max - self.raw_min < 1e-12 {
            self.raw_max = self.raw_min + 1.0;
        }
    }

    pub fn dim(&self) -> usize {
        self.families.len()
    }

    /// `sqrt(αᵀ K_cc α)`.
    pub fn rkhs_norm(&self) -> f64 {
        let mut s = 0.0;
        for (i, ci) in self.centers.iter().enumerate() {
            for (j, cj) in self.centers.iter().enumerate() {
                s += self.weights[i] * self.weights[j] * self.kernel(ci, cj);
            }
        }
        s.max(0.0).sqrt()
    }

    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        latent_kernel(a, b, self.lengthscale, self.signal_variance)
    }

    /// Latent coordinates of a text: cue coverage per family.
    pub fn oracle_embed(&self, prompt: &Prompt) -> Vec<f64> {
        self.embed_text(prompt.as_str())
    }

    pub fn embed_text(&self, text: &str) -> Vec<f64> {
        self.families.iter().map(|f| f.coverage(text)).collect()
    }

    /// Kernel expansion at a latent point.
    pub fn raw_value(&self, z: &[f64]) -> f64 {
        self.centers.iter().zip(&self.weights).map(|(c, w)| w * self.kernel(z, c)).sum()
    }

    /// Affinely rescaled objective, clamped to [0, 1].
    pub fn score(&self, prompt: &Prompt) -> f64 {
        let raw = self.raw_value(&self.oracle_embed(prompt));
        ((raw - self.raw_min) / (self.raw_max - self.raw_min)).clamp(0.0, 1.0)
    }

    /// The true cue features, as an LLM would be asked to define them.
    pub fn feature_set(&self) -> FeatureSet {
        FeatureSet::new(
            self.families
                .iter()
                .map(|f| FeatureDefinition::new(f.name.clone(), f.description.clone()))
                .collect(),
        )
        .expect("family names are distinct")
    }

    /// Best score reachable by any cue combination.
    pub fn best_lattice_score(&self) -> f64 {
        let lattice = (CUE_LEVELS + 1).pow(self.dim() as u32);
        (0..lattice)
            .map(|code| {
                let z: Vec<f64> = decode_levels(code, self.dim()).iter().map(|&l| l as f64 / CUE_LEVELS as f64).collect();
                ((self.raw_value(&z) - self.raw_min) / (self.raw_max - self.raw_min)).clamp(0.0, 1.0)
            })
            .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("instance serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn phrase_description(desc: &str, phrases: &[&str]) -> String {
    let quoted: Vec<String> = phrases.iter().map(|p| format!("\"{p}\"")).collect();
    format!("{desc} Value is the fraction of these cues present: {}.", quoted.join(", "))
}

fn decode_levels(mut code: usize, d: usize) -> Vec<usize> {
    let mut levels = Vec::with_capacity(d);
    for _ in 0..d {
        levels.push(code % (CUE_LEVELS + 1));
        code /= CUE_LEVELS + 1;
    }
    levels
}

impl Objective for SyntheticInstance {
    fn evaluate(&self, prompt: &Prompt) -> Result<f64, ObjectiveError> {
        Ok(self.score(prompt))
    }

    fn parallel_safe(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        format!("synthetic(d={}, |X|={}, B={})", self.dim(), self.universe.len(), self.norm_bound)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(d: usize, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            universe_size: 50,
            d,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn norm_is_rescaled_exactly() {
        let inst = SyntheticInstance::build(&spec(3, 1)).unwrap();
        assert!((inst.rkhs_norm() - 1.0).abs() < 1e-9);
        let inst = SyntheticInstance::build(&SyntheticSpec {
            norm_bound: 2.5,
            ..spec(2, 4)
        })
        .unwrap();
        assert!((inst.rkhs_norm() - 2.5).abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_shaped() {
        let a = SyntheticInstance::build(&spec(3, 9)).unwrap();
        let b = SyntheticInstance::build(&spec(3, 9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.universe.len(), 50);
        assert!(a.universe.iter().all(|p| a.oracle_embed(p).len() == 3));
        let back = SyntheticInstance::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn peak_at_single_center() {
        let base = SyntheticInstance::build(&spec(2, 0)).unwrap();
        let inst = SyntheticInstance::from_parts(
            base.families.clone(),
            base.universe.clone(),
            0.3,
            1.7,
            vec![vec![0.4, 0.6]],
            vec![1.0],
        );
        assert!((inst.raw_value(&[0.4, 0.6]) - 1.7).abs() < 1e-15);
        assert!(inst.raw_value(&[0.2, 0.6]) < 1.7);
    }

    #[test]
    fn equal_cues_score_equal() {
        let inst = SyntheticInstance::build(&spec(2, 3)).unwrap();
        let f = &inst.families;
        let a = Prompt::new(format!("You are a helpful assistant.\n{} {}", f[0].phrases[0], f[1].phrases[2])).unwrap();
        let b = Prompt::new(format!("You are a patient tutor.\n{} {}", f[1].phrases[2], f[0].phrases[0])).unwrap();
        assert_eq!(inst.oracle_embed(&a), vec![0.2, 0.2]);
        assert_eq!(inst.score(&a), inst.score(&b));
    }

    #[test]
    fn universe_scores_match_recomputation() {
        let inst = SyntheticInstance::build(&spec(3, 5)).unwrap();
        let raws: Vec<f64> = inst
            .universe
            .iter()
            .map(|p| {
                let z: Vec<f64> = inst
                    .families
                    .iter()
                    .map(|f| f.phrases.iter().filter(|ph| p.as_str().contains(ph.as_str())).count() as f64 / 5.0)
                    .collect();
                let mut s = 0.0;
                for (c, w) in inst.centers.iter().zip(&inst.weights) {
                    let r = z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / inst.lengthscale;
                    let k = (1.0 + 5f64.sqrt() * r + 5.0 * r * r / 3.0) * (-(5f64.sqrt()) * r).exp();
                    s += w * inst.signal_variance * k;
                }
                s
            })
            .collect();
        let lo = raws.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (p, r) in inst.universe.iter().zip(&raws) {
            assert!((inst.score(p) - (r - lo) / (hi - lo)).abs() < 1e-12);
        }
        let scores: Vec<f64> = inst.universe.iter().map(|p| inst.score(p)).collect();
        assert_eq!(scores.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(scores.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }

    #[test]
    fn large_universe_covers_lattice() {
        let inst = SyntheticInstance::build(&SyntheticSpec {
            universe_size: 216,
            d: 3,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let mut codes = HashSet::new();
        for p in &inst.universe {
            let z = inst.oracle_embed(p);
            codes.insert(z.iter().map(|v| (v * 5.0).round() as usize).collect::<Vec<_>>());
        }
        assert_eq!(codes.len(), 216);
        assert!((inst.best_lattice_score() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_small_universe() {
        assert!(SyntheticInstance::build(&SyntheticSpec {
            universe_size: 9,
            ..SyntheticSpec::default()
        })
        .is_err());
    }
}
