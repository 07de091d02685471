//! Marginal-likelihood pretraining of kernel parameters.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Adam;
use crate::deepkernel::{KernelParams, LOG_ALPHA, LOG_BETA};
use crate::diffmath::ParameterVector;
use crate::error::{Error, Result};
use crate::gp::{log_marginal_likelihood, log_marginal_likelihood_grad};
use crate::seeding::stream_rng;
use crate::tasks::TaskDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Tasks per step.
    pub task_batch: usize,
    /// Candidates per task per step; larger tasks are subsampled.
    pub max_points: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 500,
            learning_rate: 1e-2,
            task_batch: 8,
            max_points: 256,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task_batch == 0 || self.max_points == 0 {
            return Err(Error::Config("task_batch and max_points must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: KernelParams,
    pub optimizer: Adam,
    /// Mini-batch per-point negative log marginal likelihood at each step,
    /// before the update.
    pub step_nll: Vec<f64>,
}

fn subset(task: &TaskDataset, max_points: usize, stream: &[u64], seed: u64) -> Vec<usize> {
    if task.len() <= max_points {
        return (0..task.len()).collect();
    }
    let mut idx = sample(&mut stream_rng(seed, stream), task.len(), max_points).into_vec();
    idx.sort_unstable();
    idx
}

/// Sum of log marginal likelihoods over `(task, subset)` pairs and its
/// gradient, summed in order.
pub fn pretrain_objective(
    items: &[(&TaskDataset, Vec<usize>)],
    params: &KernelParams,
) -> Result<(f64, ParameterVector)> {
    if items.is_empty() {
        return Err(Error::contract("pretraining needs at least one task"));
    }
    let parts: Vec<(f64, ParameterVector)> = items
        .par_iter()
        .map(|(task, idx)| {
            log_marginal_likelihood_grad(task, idx, params).map_err(|e| e.in_task(&task.task_id))
        })
        .collect::<Result<_>>()?;
    let mut iter = parts.into_iter();
    let (mut value, mut grad) = iter.next().expect("nonempty");
    for (v, g) in iter {
        value += v;
        grad.axpy(1.0, &g)?;
    }
    Ok((value, grad))
}

/// Per-point negative log marginal likelihood over all tasks, each
/// subsampled to at most `max_points` with a fixed stream of `seed`.
pub fn training_nll(tasks: &[TaskDataset], params: &KernelParams, max_points: usize, seed: u64) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::contract("pretraining needs at least one task"));
    }
    let parts: Vec<(f64, usize)> = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let idx = subset(task, max_points, &[0x4e11, i as u64], seed);
            let lml = log_marginal_likelihood(task, &idx, params).map_err(|e| e.in_task(&task.task_id))?;
            Ok((lml, idx.len()))
        })
        .collect::<Result<_>>()?;
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let points: usize = parts.iter().map(|p| p.1).sum();
    Ok(-total / points as f64)
}

/// Starting point with `alpha` set to the mean per-task response variance
/// and `beta` to a hundredth of it, so ascent does not spend its first
/// steps rescaling the amplitude.
pub fn data_scaled_start(tasks: &[TaskDataset], params: &KernelParams) -> Result<KernelParams> {
    if tasks.is_empty() {
        return Err(Error::contract("pretraining needs at least one task"));
    }
    let var: f64 = tasks
        .iter()
        .map(|t| {
            let m = t.responses.iter().sum::<f64>() / t.len() as f64;
            t.responses.iter().map(|y| (y - m).powi(2)).sum::<f64>() / t.len() as f64
        })
        .sum::<f64>()
        / tasks.len() as f64;
    let mut out = params.clone();
    if var > 0.0 && var.is_finite() {
        out.set_log(LOG_ALPHA, var.ln())?;
        out.set_log(LOG_BETA, (1e-2 * var).ln())?;
    }
    Ok(out)
}

/// Adam ascent on the task-summed log marginal likelihood, normalized per
/// point.
pub fn pretrain(tasks: &[TaskDataset], params: &KernelParams, config: &PretrainConfig) -> Result<PretrainOutcome> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::contract("pretraining needs at least one task"));
    }
    let mut current = params.clone();
    let mut optimizer = Adam::new(config.learning_rate, current.params.len());
    let mut step_nll = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut rng = stream_rng(config.seed, &[0x9e7a, step as u64]);
        let k = config.task_batch.min(tasks.len());
        let mut chosen = sample(&mut rng, tasks.len(), k).into_vec();
        chosen.sort_unstable();
        let items: Vec<(&TaskDataset, Vec<usize>)> = chosen
            .iter()
            .map(|&i| {
                let t = &tasks[i];
                (t, subset(t, config.max_points, &[0x5b, step as u64, i as u64], config.seed))
            })
            .collect();
        let points: usize = items.iter().map(|(_, s)| s.len()).sum();
        let (lml, mut grad) = pretrain_objective(&items, &current)?;
        step_nll.push(-lml / points as f64);
        grad.scale(-1.0 / points as f64);
        optimizer.step(&mut current.params, &grad)?;
    }
    Ok(PretrainOutcome {
        params: current,
        optimizer,
        step_nll,
    })
}
