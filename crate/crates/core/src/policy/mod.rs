//! Query-selection policies.
//!
//! A policy scores every unevaluated candidate; the deployed policy takes
//! the argmax and training rollouts sample from the softmax of the scores.

mod checkpoint;
mod deepsets;
mod kernel;
mod metabo;
mod random;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::diffmath::{ParamVars, ParameterVector, Tape, Var};
use crate::error::{Error, Result};
use crate::tasks::TaskDataset;

pub use checkpoint::{Checkpoint, Model, PolicyKind, CHECKPOINT_VERSION};
pub use deepsets::DeepSetsPolicy;
pub use kernel::{score_candidates, DeepKernelPolicy};
pub use metabo::MetaBoPolicy;
pub use random::RandomPolicy;

/// Softmax over the unevaluated candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub support: Vec<usize>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ActionDistribution {
    pub fn new(support: Vec<usize>, logits: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::contract("action distribution needs a nonempty support"));
        }
        if support.len() != logits.len() {
            return Err(Error::contract(format!(
                "{} candidates but {} logits",
                support.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|l| l.is_nan()) {
            return Err(Error::Numerical("NaN logit".into()));
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        let probabilities = w.iter().map(|x| x / z).collect();
        Ok(ActionDistribution {
            support,
            logits,
            probabilities,
        })
    }

    /// Probability of candidate `index`; zero outside the support.
    pub fn probability(&self, index: usize) -> f64 {
        self.support
            .iter()
            .position(|&s| s == index)
            .map_or(0.0, |p| self.probabilities[p])
    }

    pub fn log_probability_at(&self, position: usize) -> f64 {
        let m = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + self.logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        self.logits[position] - lse
    }
}

/// Position in the support of the largest logit; ties go to the lowest
/// candidate index.
pub fn select_position(dist: &ActionDistribution) -> usize {
    let mut best = 0;
    for p in 1..dist.support.len() {
        let (l, lb) = (dist.logits[p], dist.logits[best]);
        if l > lb || (l == lb && dist.support[p] < dist.support[best]) {
            best = p;
        }
    }
    best
}

pub fn select_deterministic(dist: &ActionDistribution) -> usize {
    dist.support[select_position(dist)]
}

/// Draws a position in the support; returns it with its log-probability.
pub fn sample_position<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> Result<(usize, f64)> {
    let sampler = WeightedIndex::new(&dist.probabilities)
        .map_err(|e| Error::Numerical(format!("cannot sample action: {e}")))?;
    let p = sampler.sample(rng);
    Ok((p, dist.log_probability_at(p)))
}

pub fn sample_stochastic<R: Rng + ?Sized>(dist: &ActionDistribution, rng: &mut R) -> Result<(usize, f64)> {
    let (p, lp) = sample_position(dist, rng)?;
    Ok((dist.support[p], lp))
}

/// Candidates of a task not in `evaluated`, ascending.
pub fn unevaluated(n: usize, evaluated: &[usize]) -> Vec<usize> {
    let mut taken = vec![false; n];
    for &i in evaluated {
        if i < n {
            taken[i] = true;
        }
    }
    (0..n).filter(|&i| !taken[i]).collect()
}

/// A deployable policy.
pub trait Policy: Send + Sync {
    fn label(&self) -> String;

    /// Greedy BO run of `queries` steps from `initial`; returns the chosen
    /// candidates in order.
    fn run_greedy(
        &self,
        task: &TaskDataset,
        initial: &[usize],
        queries: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<usize>>;
}

/// Per-episode scorer created on a tape.
pub trait StepScorer {
    /// Logits (`1 x |support|`) for the ascending unevaluated `support`.
    fn logits(&mut self, tape: &mut Tape, evaluated: &[usize], support: &[usize]) -> Result<Var>;

    /// Records that `support[position]` from the last `logits` call was chosen.
    fn commit(&mut self, _position: usize) -> Result<()> {
        Ok(())
    }

    /// Non-differentiable state carried between steps, such as MI's `xi`.
    fn state(&self) -> Vec<f64> {
        Vec::new()
    }

    /// Overwrites the carried state with a value from [`StepScorer::state`].
    fn restore(&mut self, _state: &[f64]) -> Result<()> {
        Ok(())
    }
}

/// A policy whose logits are differentiable in its parameter vector.
pub trait DifferentiablePolicy: Send + Sync + Clone {
    fn label(&self) -> String;

    fn params(&self) -> &ParameterVector;

    fn with_params(&self, params: ParameterVector) -> Result<Self>;

    fn scorer<'a>(
        &'a self,
        tape: &mut Tape,
        params: &ParamVars,
        task: &'a TaskDataset,
    ) -> Result<Box<dyn StepScorer + 'a>>;
}

pub fn check_start(task: &TaskDataset, initial: &[usize], queries: usize) -> Result<()> {
    let mut seen = vec![false; task.len()];
    for &i in initial {
        if i >= task.len() || seen[i] {
            return Err(Error::contract(format!(
                "invalid initial point {i} for a task of {} candidates",
                task.len()
            )));
        }
        seen[i] = true;
    }
    if initial.len() + queries > task.len() {
        return Err(Error::contract(format!(
            "{} initial points plus {queries} queries exceed {} candidates",
            initial.len(),
            task.len()
        )));
    }
    Ok(())
}

/// Greedy run of a differentiable policy on a frozen tape.
pub fn greedy_run<P: DifferentiablePolicy>(
    policy: &P,
    task: &TaskDataset,
    initial: &[usize],
    queries: usize,
) -> Result<Vec<usize>> {
    check_start(task, initial, queries)?;
    let mut tape = Tape::new();
    let pv = tape.bind_frozen(policy.params())?;
    let mut scorer = policy.scorer(&mut tape, &pv, task)?;
    let mut evaluated = initial.to_vec();
    let mut actions = Vec::with_capacity(queries);
    for _ in 0..queries {
        let support = unevaluated(task.len(), &evaluated);
        let logits = scorer.logits(&mut tape, &evaluated, &support)?;
        let dist = ActionDistribution::new(support, tape.value(logits).as_slice().to_vec())?;
        let p = select_position(&dist);
        scorer.commit(p)?;
        evaluated.push(dist.support[p]);
        actions.push(dist.support[p]);
    }
    Ok(actions)
}

macro_rules! greedy_policy {
    ($t:ty) => {
        impl $crate::policy::Policy for $t {
            fn label(&self) -> String {
                $crate::policy::DifferentiablePolicy::label(self)
            }

            fn run_greedy(
                &self,
                task: &$crate::tasks::TaskDataset,
                initial: &[usize],
                queries: usize,
                _rng: &mut dyn rand::RngCore,
            ) -> $crate::error::Result<Vec<usize>> {
                $crate::policy::greedy_run(self, task, initial, queries)
            }
        }
    };
}
pub(crate) use greedy_policy;
