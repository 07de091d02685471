use rand::seq::SliceRandom;

use super::{check_start, unevaluated, Policy};
use crate::error::Result;
use crate::tasks::TaskDataset;

/// Picks an unevaluated candidate uniformly at random.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn label(&self) -> String {
        "random".into()
    }

    fn run_greedy(
        &self,
        task: &TaskDataset,
        initial: &[usize],
        queries: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Vec<usize>> {
        check_start(task, initial, queries)?;
        let mut rest = unevaluated(task.len(), initial);
        rest.shuffle(rng);
        rest.truncate(queries);
        Ok(rest)
    }
}
