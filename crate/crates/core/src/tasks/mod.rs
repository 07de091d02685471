//! Optimization tasks, suites with train/validation/test splits, synthetic
//! task families, the on-disk task format and cumulative-gap evaluation.

mod eval;
mod io;
mod synthetic;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::diffmath::Matrix;
use crate::error::{Error, Result};
use crate::seeding::stream_rng;

pub use eval::{evaluate, evaluate_gaps, gap_sequence, EvalConfig, GapCurve};
pub use io::{load_suite, load_task, save_suite, save_task, Counts, Manifest, TaskFile, MANIFEST};
pub use synthetic::{generate_synthetic_suite, Family, GeneratorSpec};

/// One black-box optimization task over a fixed candidate set.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: String,
    /// `N x J` candidate features.
    pub features: Matrix,
    /// Hidden response of every candidate.
    pub responses: Vec<f64>,
    pub meta: Option<serde_json::Value>,
}

impl TaskDataset {
    pub fn new(task_id: impl Into<String>, features: Matrix, responses: Vec<f64>) -> Result<Self> {
        let task = TaskDataset {
            task_id: task_id.into(),
            features,
            responses,
            meta: None,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if n < 2 {
            return Err(Error::contract(format!(
                "task {} needs at least 2 candidates, has {n}",
                self.task_id
            )));
        }
        if self.responses.len() != n {
            return Err(Error::contract(format!(
                "task {}: {n} feature rows but {} responses",
                self.task_id,
                self.responses.len()
            )));
        }
        for i in 0..n {
            if let Some(j) = self.features.row(i).iter().position(|x| !x.is_finite()) {
                return Err(Error::contract(format!(
                    "task {}: non-finite feature at row {i}, column {j}",
                    self.task_id
                )));
            }
        }
        if let Some(i) = self.responses.iter().position(|y| !y.is_finite()) {
            return Err(Error::contract(format!(
                "task {}: non-finite response at row {i}",
                self.task_id
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn max_response(&self) -> f64 {
        self.responses.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the best candidate (lowest index on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &y) in self.responses.iter().enumerate() {
            if y > self.responses[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Validation => 2,
            Split::Test => 3,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Train, validation and test tasks sharing one feature space.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub train: Vec<TaskDataset>,
    pub validation: Vec<TaskDataset>,
    pub test: Vec<TaskDataset>,
    pub seed: u64,
    pub provenance: serde_json::Value,
}

impl TaskSuite {
    pub fn split(&self, split: Split) -> &[TaskDataset] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn all_tasks(&self) -> impl Iterator<Item = (Split, &TaskDataset)> {
        Split::ALL
            .into_iter()
            .flat_map(move |s| self.split(s).iter().map(move |t| (s, t)))
    }

    /// Feature dimension shared by every task (`None` for an empty suite).
    pub fn dim(&self) -> Option<usize> {
        self.all_tasks().next().map(|(_, t)| t.dim())
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut first: Option<&TaskDataset> = None;
        for (_, task) in self.all_tasks() {
            task.validate()?;
            if !ids.insert(task.task_id.as_str()) {
                return Err(Error::contract(format!(
                    "task id {} appears more than once",
                    task.task_id
                )));
            }
            match first {
                None => first = Some(task),
                Some(f) if f.dim() != task.dim() => {
                    return Err(Error::contract(format!(
                        "feature dimension mismatch: task {} has {} features, task {} has {}",
                        f.task_id,
                        f.dim(),
                        task.task_id,
                        task.dim()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Fixed initial evaluated points, one list per task of the split,
    /// determined by the suite seed alone.
    pub fn fixed_initial_points(&self, split: Split, count: usize) -> Result<Vec<Vec<usize>>> {
        initial_points_for(self.split(split), self.seed, split, count)
    }
}

pub fn initial_points_for(
    tasks: &[TaskDataset],
    seed: u64,
    split: Split,
    count: usize,
) -> Result<Vec<Vec<usize>>> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, task)| {
            if count >= task.len() {
                return Err(Error::contract(format!(
                    "task {} has {} candidates, cannot draw {count} initial points",
                    task.task_id,
                    task.len()
                )));
            }
            let mut rng = stream_rng(seed, &[0x1417, split.stream_id(), i as u64]);
            Ok(sample(&mut rng, task.len(), count).into_vec())
        })
        .collect()
}
