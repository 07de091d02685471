//! REINFORCE surrogate `(1/B) sum_e sum_t (G_t - b_t) log p_t` with the
//! per-timestep batch-mean baseline `b_t`.

use rayon::prelude::*;

use super::episode::{replay_on, Episode};
use crate::diffmath::{ParamVars, ParameterVector, Program, Tape, Var};
use crate::error::{Error, Result};
use crate::policy::DifferentiablePolicy;
use crate::tasks::TaskDataset;

/// Per-episode, per-step weights `(G_t - b_t) / B`. Returns and baseline are
/// data, so the weights carry no gradient. A batch of one uses `b_t = 0`.
pub fn reinforce_weights(returns: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = returns.len() as f64;
    let horizon = returns.iter().map(Vec::len).max().unwrap_or(0);
    let baseline: Vec<f64> = (0..horizon)
        .map(|t| {
            if returns.len() == 1 {
                return 0.0;
            }
            let present: Vec<f64> = returns.iter().filter_map(|r| r.get(t).copied()).collect();
            present.iter().sum::<f64>() / present.len() as f64
        })
        .collect();
    returns
        .iter()
        .map(|r| r.iter().zip(&baseline).map(|(g, bt)| (g - bt) / b).collect())
        .collect()
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    pub gradient: ParameterVector,
}

/// Surrogate loss and its gradient over a batch of recorded episodes. The
/// per-episode gradients are summed in batch order.
pub fn reinforce_loss(batch: &[Episode]) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::contract("reinforce loss needs a nonempty batch"));
    }
    let returns: Vec<Vec<f64>> = batch.iter().map(|e| e.returns.clone()).collect();
    let weights = reinforce_weights(&returns);
    let parts: Vec<(f64, ParameterVector)> = batch
        .par_iter()
        .zip(&weights)
        .map(|(ep, w)| {
            let terms: Vec<(Var, f64)> = ep.log_prob_vars().iter().copied().zip(w.iter().copied()).collect();
            let value = ep.log_probs.iter().zip(w).map(|(lp, wt)| lp * wt).sum::<f64>();
            Ok((value, ep.tape().gradient_weighted(&terms)?))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut value, mut gradient) = iter.next().expect("nonempty batch");
    for (v, g) in iter {
        value += v;
        gradient.axpy(1.0, &g)?;
    }
    Ok(LossOutput { value, gradient })
}

/// One fixed episode of a surrogate: actions replayed from `initial`, each
/// log-probability weighted by `weights[t]`. `states` pins the scorer state
/// per step, so stop-gradient quantities such as MI's `xi` stay constant
/// when the program is re-evaluated at other parameters.
#[derive(Clone, Debug)]
pub struct SurrogateTerm<'a> {
    pub task: &'a TaskDataset,
    pub initial: Vec<usize>,
    pub actions: Vec<usize>,
    pub weights: Vec<f64>,
    pub states: Option<Vec<Vec<f64>>>,
}

/// `sum_e sum_t w_et log p_t` at fixed actions as a re-evaluable program,
/// for checking REINFORCE gradients by finite differences.
pub struct SurrogateProgram<'a, P> {
    pub policy: &'a P,
    pub terms: Vec<SurrogateTerm<'a>>,
}

impl<'a, P: DifferentiablePolicy> SurrogateProgram<'a, P> {
    /// The surrogate that [`reinforce_loss`] differentiates for `batch`.
    pub fn from_batch(policy: &'a P, tasks: &[&'a TaskDataset], batch: &[Episode]) -> Result<Self> {
        if tasks.len() != batch.len() {
            return Err(Error::contract("one task per episode required"));
        }
        let returns: Vec<Vec<f64>> = batch.iter().map(|e| e.returns.clone()).collect();
        let weights = reinforce_weights(&returns);
        let terms = tasks
            .iter()
            .zip(batch)
            .zip(weights)
            .map(|((task, ep), weights)| SurrogateTerm {
                task,
                initial: ep.initial_set.clone(),
                actions: ep.actions.clone(),
                weights,
                states: Some(ep.states.clone()),
            })
            .collect();
        Ok(SurrogateProgram { policy, terms })
    }
}

impl<P: DifferentiablePolicy> Program for SurrogateProgram<'_, P> {
    fn build(&self, tape: &mut Tape, params: &ParamVars) -> Result<Var> {
        let mut total = tape.constant_scalar(0.0)?;
        for term in &self.terms {
            let lps = replay_on(
                self.policy,
                tape,
                params,
                term.task,
                &term.initial,
                &term.actions,
                term.states.as_deref(),
            )?;
            for (lp, &w) in lps.into_iter().zip(&term.weights) {
                let weighted = tape.scale(lp, w)?;
                total = tape.add(total, weighted)?;
            }
        }
        Ok(total)
    }
}
