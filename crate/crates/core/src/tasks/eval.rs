//! Cumulative-gap evaluation of greedy BO runs.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TaskDataset;
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::seeding::stream_rng;
use crate::stats::{mean, std_error};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub queries: usize,
    /// Independent runs per task; only policy-side randomness changes.
    pub repeats: usize,
    pub seed: u64,
}

impl EvalConfig {
    pub fn new(queries: usize) -> Self {
        EvalConfig {
            queries,
            repeats: 1,
            seed: 0,
        }
    }
}

/// Gap after each query: `max y - max y over initial + first t actions`.
pub fn gap_sequence(task: &TaskDataset, initial: &[usize], actions: &[usize]) -> Result<Vec<f64>> {
    let top = task.max_response();
    let mut best = initial
        .iter()
        .map(|&i| task.responses[i])
        .fold(f64::NEG_INFINITY, f64::max);
    actions
        .iter()
        .map(|&a| {
            let y = *task
                .responses
                .get(a)
                .ok_or_else(|| Error::contract(format!("action {a} out of range")))?;
            best = best.max(y);
            Ok(top - best)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCurve {
    pub label: String,
    /// Mean gap over tasks after query `t = 1..=T`.
    pub mean_gap: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n_tasks: usize,
    /// Mean over tasks and timesteps of the gaps.
    pub r_hat: f64,
    pub r_hat_stderr: f64,
    /// Per-task cumulative average, averaged over repeats.
    pub per_task_r_hat: Vec<f64>,
    pub task_ids: Vec<String>,
}

impl GapCurve {
    /// Builds the curve from per-task gap rows (each averaged over repeats).
    pub fn from_gaps(label: impl Into<String>, task_ids: Vec<String>, gaps: &[Vec<f64>]) -> Result<Self> {
        let t = gaps.first().map_or(0, Vec::len);
        if gaps.iter().any(|g| g.len() != t) {
            return Err(Error::contract("gap rows of unequal length"));
        }
        let column = |j: usize| gaps.iter().map(|g| g[j]).collect::<Vec<_>>();
        let mean_gap = (0..t).map(|j| mean(&column(j))).collect();
        let stderr = (0..t).map(|j| std_error(&column(j))).collect();
        let per_task_r_hat: Vec<f64> = gaps.iter().map(|g| mean(g)).collect();
        Ok(GapCurve {
            label: label.into(),
            mean_gap,
            stderr,
            n_tasks: gaps.len(),
            r_hat: mean(&per_task_r_hat),
            r_hat_stderr: std_error(&per_task_r_hat),
            per_task_r_hat,
            task_ids,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["t", "mean_gap", "stderr", "n_tasks"]).map_err(csv_err)?;
        for (i, (m, s)) in self.mean_gap.iter().zip(&self.stderr).enumerate() {
            w.write_record([
                (i + 1).to_string(),
                m.to_string(),
                s.to_string(),
                self.n_tasks.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.write_record([
            "R_hat".to_string(),
            self.r_hat.to_string(),
            self.r_hat_stderr.to_string(),
            self.n_tasks.to_string(),
        ])
        .map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Greedy run of every task from its fixed initial points, repeated
/// `config.repeats` times; returns one averaged gap row per task.
pub fn evaluate_gaps(
    tasks: &[TaskDataset],
    initial: &[Vec<usize>],
    policy: &dyn Policy,
    config: &EvalConfig,
) -> Result<Vec<Vec<f64>>> {
    if tasks.len() != initial.len() {
        return Err(Error::contract("one initial set per task required"));
    }
    if config.repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    tasks
        .par_iter()
        .zip(initial)
        .enumerate()
        .map(|(i, (task, init))| {
            let mut acc = vec![0.0; config.queries];
            for r in 0..config.repeats {
                let mut rng = stream_rng(config.seed, &[0xe7a1, r as u64, i as u64]);
                let actions = policy
                    .run_greedy(task, init, config.queries, &mut rng)
                    .map_err(|e| e.in_task(&task.task_id))?;
                let gaps = gap_sequence(task, init, &actions).map_err(|e| e.in_task(&task.task_id))?;
                for (a, g) in acc.iter_mut().zip(gaps) {
                    *a += g;
                }
            }
            Ok(acc.into_iter().map(|a| a / config.repeats as f64).collect())
        })
        .collect()
}

pub fn evaluate(
    tasks: &[TaskDataset],
    initial: &[Vec<usize>],
    policy: &dyn Policy,
    config: &EvalConfig,
) -> Result<GapCurve> {
    let gaps = evaluate_gaps(tasks, initial, policy, config)?;
    let ids = tasks.iter().map(|t| t.task_id.clone()).collect();
    GapCurve::from_gaps(policy.label(), ids, &gaps)
}
