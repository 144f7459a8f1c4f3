//! Objective backends: external evaluators, the synthetic cue-phrase world,
//! and the embedding-error bound checker.

mod external;
mod synthetic;
mod theorem;
mod world;

use std::collections::HashMap;
use std::sync::Mutex;

use thiserror::Error;

pub use external::{ExternalEvaluator, EvaluatorEndpoint};
pub use synthetic::{CueFamily, SyntheticInstance, SyntheticSpec, CUE_LEVELS};
pub use theorem::{theorem_bound_check, EtaSummary, TheoremOptions, TheoremReport};
pub use world::{SyntheticWorld, WorldOptions};

use crate::domain::{clamp_score, Prompt};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("evaluator failed: {0}")]
    Evaluator(String),
    #[error("evaluator timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("malformed evaluator response: {0}")]
    Malformed(String),
}

/// A black-box scalar objective over prompts. Implementations expose nothing
/// but the score.
pub trait Objective: Send + Sync {
    /// Raw score; callers clamp to [0, 1].
    fn evaluate(&self, prompt: &Prompt) -> Result<f64, ObjectiveError>;

    /// Whether concurrent `evaluate` calls are safe.
    fn parallel_safe(&self) -> bool {
        false
    }

    fn describe(&self) -> String;
}

impl<O: Objective + ?Sized> Objective for &O {
    fn evaluate(&self, prompt: &Prompt) -> Result<f64, ObjectiveError> {
        (**self).evaluate(prompt)
    }
    fn parallel_safe(&self) -> bool {
        (**self).parallel_safe()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<O: Objective + ?Sized> Objective for Box<O> {
    fn evaluate(&self, prompt: &Prompt) -> Result<f64, ObjectiveError> {
        (**self).evaluate(prompt)
    }
    fn parallel_safe(&self) -> bool {
        (**self).parallel_safe()
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub score: f64,
    /// The out-of-range value before clamping, if any.
    pub clamped_from: Option<f64>,
    pub cached: bool,
}

/// Clamping, memoizing front end for an objective, keyed by prompt digest.
pub struct ScoreCache<O> {
    objective: O,
    memo: Mutex<HashMap<String, (f64, Option<f64>)>>,
}

impl<O: Objective> ScoreCache<O> {
    pub fn new(objective: O) -> Self {
        Self {
            objective,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn objective(&self) -> &O {
        &self.objective
    }

    /// Records a known score, e.g. one replayed from a log.
    pub fn seed_score(&self, prompt: &Prompt, score: f64) {
        self.memo.lock().expect("memo lock").insert(prompt.digest(), (score, None));
    }

    pub fn evaluate(&self, prompt: &Prompt) -> Result<Scored, ObjectiveError> {
        let key = prompt.digest();
        if let Some(&(score, clamped_from)) = self.memo.lock().expect("memo lock").get(&key) {
            return Ok(Scored {
                score,
                clamped_from,
                cached: true,
            });
        }
        let raw = self.objective.evaluate(prompt)?;
        if !raw.is_finite() {
            return Err(ObjectiveError::Malformed(format!("non-finite score {raw}")));
        }
        let (score, clamped_from) = clamp_score(raw);
        if let Some(r) = clamped_from {
            log::warn!("score {r} clamped to {score}");
        }
        self.memo.lock().expect("memo lock").insert(key, (score, clamped_from));
        Ok(Scored {
            score,
            clamped_from,
            cached: false,
        })
    }

    pub fn len(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct Fixed(f64, AtomicUsize);

    impl Objective for Fixed {
        fn evaluate(&self, _: &Prompt) -> Result<f64, ObjectiveError> {
            self.1.fetch_add(1, Ordering::SeqCst);
            Ok(self.0)
        }
        fn describe(&self) -> String {
            "fixed".into()
        }
    }

    #[test]
    fn clamps_and_memoizes() {
        let c = ScoreCache::new(Fixed(1.7, AtomicUsize::new(0)));
        let p = Prompt::new("p").unwrap();
        let a = c.evaluate(&p).unwrap();
        assert_eq!((a.score, a.clamped_from, a.cached), (1.0, Some(1.7), false));
        let b = c.evaluate(&p).unwrap();
        assert!(b.cached);
        assert_eq!(c.objective().1.load(Ordering::SeqCst), 1);
    }
}
