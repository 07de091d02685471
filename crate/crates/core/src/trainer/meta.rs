//! Meta-training loop with best-validation early stopping.

use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{reinforce_loss, rollout, Adam, Episode, TrainConfig};
use crate::error::{Error, Result};
use crate::policy::{DifferentiablePolicy, Policy};
use crate::seeding::stream_rng;
use crate::stats::mean;
use crate::tasks::{evaluate_gaps, EvalConfig, TaskDataset};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub epoch: usize,
    /// Surrogate REINFORCE loss of the epoch's batch.
    pub train_loss: f64,
    /// Mean gap over the batch's sampled episodes.
    pub train_gap: f64,
    /// Mean greedy cumulative gap on the validation tasks after the update.
    pub validation_gap: f64,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<P> {
    /// Parameters with the lowest validation gap (epoch 0 included).
    pub best: P,
    pub best_epoch: usize,
    pub best_validation_gap: f64,
    pub initial_validation_gap: f64,
    pub log: Vec<LogEntry>,
    /// Optimizer after the last update; `None` when no epoch ran.
    pub optimizer: Option<Adam>,
}

/// Mean greedy cumulative gap over `tasks` from fixed initial points.
pub fn validation_gap(
    policy: &dyn Policy,
    tasks: &[TaskDataset],
    initial: &[Vec<usize>],
    queries: usize,
    seed: u64,
) -> Result<f64> {
    let config = EvalConfig {
        queries,
        repeats: 1,
        seed,
    };
    let gaps = evaluate_gaps(tasks, initial, policy, &config)?;
    Ok(mean(&gaps.iter().map(|g| mean(g)).collect::<Vec<_>>()))
}

pub fn meta_train<P>(
    policy: &P,
    train: &[TaskDataset],
    validation: &[TaskDataset],
    validation_initial: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<TrainOutcome<P>>
where
    P: DifferentiablePolicy + Policy,
{
    config.validate()?;
    if train.is_empty() || validation.is_empty() {
        return Err(Error::contract("meta-training needs training and validation tasks"));
    }
    for t in train {
        if t.len() <= config.initial_points + config.queries {
            return Err(Error::contract(format!(
                "training task {} has {} candidates; needs more than {}",
                t.task_id,
                t.len(),
                config.initial_points + config.queries
            )));
        }
    }
    let start = Instant::now();
    let initial_gap = validation_gap(policy, validation, validation_initial, config.queries, config.seed)?;
    let mut current = policy.clone();
    let mut best = policy.clone();
    let mut best_gap = initial_gap;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut optimizer: Option<Adam> = None;
    let mut log = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut step = || -> Result<LogEntry> {
            let mut picker = stream_rng(config.seed, &[0x3e9, epoch as u64]);
            let picks: Vec<usize> = (0..config.batch_episodes)
                .map(|_| picker.gen_range(0..train.len()))
                .collect();
            let batch: Vec<Episode> = picks
                .par_iter()
                .enumerate()
                .map(|(b, &ti)| {
                    let mut rng = stream_rng(config.seed, &[0x3ea, epoch as u64, b as u64]);
                    let task = &train[ti];
                    rollout(&current, task, config.initial_points, config.queries, config.gamma, &mut rng)
                        .map_err(|e| e.in_task(&task.task_id))
                })
                .collect::<Result<_>>()?;
            let loss = reinforce_loss(&batch)?;
            let train_gap = mean(&batch.iter().map(|e| mean(&e.gaps)).collect::<Vec<_>>());
            drop(batch);
            let opt = optimizer.get_or_insert_with(|| Adam::new(config.learning_rate, current.params().len()));
            let mut params = current.params().clone();
            opt.step(&mut params, &loss.gradient)?;
            current = current.with_params(params)?;
            let validation_gap =
                validation_gap(&current, validation, validation_initial, config.queries, config.seed)?;
            Ok(LogEntry {
                epoch,
                train_loss: loss.value,
                train_gap,
                validation_gap,
                wall_time: start.elapsed().as_secs_f64(),
            })
        };
        let entry = step().map_err(|e| e.in_epoch(epoch))?;
        if entry.validation_gap < best_gap {
            best_gap = entry.validation_gap;
            best = current.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
        }
        log.push(entry);
        if config.patience > 0 && since_best >= config.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_validation_gap: best_gap,
        initial_validation_gap: initial_gap,
        log,
        optimizer,
    })
}
