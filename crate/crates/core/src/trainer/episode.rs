//! Sampled and replayed episodes.

use rand::seq::index::sample;
use rand::Rng;

use super::{discounted_returns, gap};
use crate::diffmath::{Tape, Var};
use crate::error::{Error, Result};
use crate::diffmath::ParamVars;
use crate::policy::{check_start, sample_position, unevaluated, ActionDistribution, DifferentiablePolicy};
use crate::tasks::TaskDataset;

/// One stochastic BO run recorded for REINFORCE.
pub struct Episode {
    pub task_id: String,
    pub initial_set: Vec<usize>,
    pub actions: Vec<usize>,
    /// Values of the log-probabilities of the sampled actions.
    pub log_probs: Vec<f64>,
    /// Gap after each query.
    pub gaps: Vec<f64>,
    pub returns: Vec<f64>,
    /// Total softmax mass over the support at each step.
    pub probability_sums: Vec<f64>,
    /// Support size at each step.
    pub support_sizes: Vec<usize>,
    /// Scorer state before each step; see [`crate::policy::StepScorer::state`].
    pub states: Vec<Vec<f64>>,
    tape: Tape,
    log_prob_vars: Vec<Var>,
}

impl Episode {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn log_prob_vars(&self) -> &[Var] {
        &self.log_prob_vars
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Log-probabilities of an episode run along a fixed action sequence.
pub struct Replay {
    pub tape: Tape,
    pub log_probs: Vec<Var>,
    /// Scorer state before each step.
    pub states: Vec<Vec<f64>>,
}

enum Chooser<'r, R: Rng + ?Sized> {
    Sample(&'r mut R),
    Forced(&'r [usize]),
}

struct Trace {
    actions: Vec<usize>,
    log_prob_vars: Vec<Var>,
    probability_sums: Vec<f64>,
    support_sizes: Vec<usize>,
    states: Vec<Vec<f64>>,
}

fn run<P: DifferentiablePolicy, R: Rng + ?Sized>(
    policy: &P,
    tape: &mut Tape,
    pv: &ParamVars,
    task: &TaskDataset,
    initial: &[usize],
    steps: usize,
    mut chooser: Chooser<'_, R>,
    pinned: Option<&[Vec<f64>]>,
) -> Result<Trace> {
    if pinned.is_some_and(|p| p.len() != steps) {
        return Err(Error::contract("one pinned state per step required"));
    }
    let mut scorer = policy.scorer(tape, pv, task)?;
    let mut evaluated = initial.to_vec();
    let mut trace = Trace {
        actions: Vec::with_capacity(steps),
        log_prob_vars: Vec::with_capacity(steps),
        probability_sums: Vec::with_capacity(steps),
        support_sizes: Vec::with_capacity(steps),
        states: Vec::with_capacity(steps),
    };
    for t in 0..steps {
        if let Some(p) = pinned {
            scorer.restore(&p[t])?;
        }
        trace.states.push(scorer.state());
        let support = unevaluated(task.len(), &evaluated);
        let logits = scorer.logits(tape, &evaluated, &support)?;
        let dist = ActionDistribution::new(support, tape.value(logits).as_slice().to_vec())?;
        let position = match &mut chooser {
            Chooser::Sample(rng) => sample_position(&dist, *rng)?.0,
            Chooser::Forced(actions) => {
                let a = actions[t];
                dist.support.iter().position(|&s| s == a).ok_or_else(|| {
                    Error::contract(format!("forced action {a} is not an unevaluated candidate"))
                })?
            }
        };
        let lse = tape.logsumexp(logits)?;
        let picked = tape.gather(logits, &[position])?;
        let lp = tape.sub(picked, lse)?;
        scorer.commit(position)?;
        let action = dist.support[position];
        evaluated.push(action);
        trace.actions.push(action);
        trace.log_prob_vars.push(lp);
        trace.probability_sums.push(dist.probabilities.iter().sum());
        trace.support_sizes.push(dist.support.len());
    }
    Ok(trace)
}

/// Stochastic rollout from a given initial set.
pub fn rollout_from<P: DifferentiablePolicy, R: Rng + ?Sized>(
    policy: &P,
    task: &TaskDataset,
    initial: &[usize],
    queries: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Episode> {
    check_start(task, initial, queries)?;
    let mut tape = Tape::new();
    let pv = tape.bind(policy.params())?;
    let trace = run(policy, &mut tape, &pv, task, initial, queries, Chooser::Sample(rng), None)?;
    let mut gaps = Vec::with_capacity(queries);
    let mut evaluated = initial.to_vec();
    for &a in &trace.actions {
        evaluated.push(a);
        gaps.push(gap(task, &evaluated)?);
    }
    let returns = discounted_returns(&gaps, gamma);
    let log_probs = trace
        .log_prob_vars
        .iter()
        .map(|&v| tape.scalar(v))
        .collect::<Result<_>>()?;
    Ok(Episode {
        task_id: task.task_id.clone(),
        initial_set: initial.to_vec(),
        actions: trace.actions,
        log_probs,
        gaps,
        returns,
        probability_sums: trace.probability_sums,
        support_sizes: trace.support_sizes,
        states: trace.states,
        tape,
        log_prob_vars: trace.log_prob_vars,
    })
}

/// Rollout with `initial_points` initial candidates drawn uniformly without
/// replacement from `rng`.
pub fn rollout<P: DifferentiablePolicy, R: Rng + ?Sized>(
    policy: &P,
    task: &TaskDataset,
    initial_points: usize,
    queries: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<Episode> {
    if task.len() <= initial_points + queries {
        return Err(Error::contract(format!(
            "task {} has {} candidates; needs more than {} initial points plus {} queries",
            task.task_id,
            task.len(),
            initial_points,
            queries
        )));
    }
    let initial = sample(rng, task.len(), initial_points).into_vec();
    rollout_from(policy, task, &initial, queries, gamma, rng)
}

/// Rebuilds the log-probabilities of `actions` on a fresh tape with the
/// policy parameters bound as leaves.
pub fn replay<P: DifferentiablePolicy>(
    policy: &P,
    task: &TaskDataset,
    initial: &[usize],
    actions: &[usize],
) -> Result<Replay> {
    let mut tape = Tape::new();
    let pv = tape.bind(policy.params())?;
    check_start(task, initial, actions.len())?;
    let trace = run::<P, rand_chacha::ChaCha8Rng>(
        policy,
        &mut tape,
        &pv,
        task,
        initial,
        actions.len(),
        Chooser::Forced(actions),
        None,
    )?;
    Ok(Replay {
        tape,
        log_probs: trace.log_prob_vars,
        states: trace.states,
    })
}

/// Like [`replay`] on a caller-owned tape with already bound parameters.
/// With `states`, the scorer state is reset to `states[t]` before step `t`
/// instead of evolving from the replayed choices.
pub fn replay_on<P: DifferentiablePolicy>(
    policy: &P,
    tape: &mut Tape,
    pv: &ParamVars,
    task: &TaskDataset,
    initial: &[usize],
    actions: &[usize],
    states: Option<&[Vec<f64>]>,
) -> Result<Vec<Var>> {
    check_start(task, initial, actions.len())?;
    let trace = run::<P, rand_chacha::ChaCha8Rng>(
        policy,
        tape,
        pv,
        task,
        initial,
        actions.len(),
        Chooser::Forced(actions),
        states,
    )?;
    Ok(trace.log_prob_vars)
}
