//! Episodic REINFORCE meta-training, marginal-likelihood pretraining and the
//! Adam optimizer.

mod adam;
mod episode;
mod meta;
mod pretrain;
mod reinforce;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tasks::TaskDataset;

pub use adam::Adam;
pub use episode::{replay, replay_on, rollout, rollout_from, Episode, Replay};
pub use meta::{meta_train, validation_gap, LogEntry, TrainOutcome};
pub use pretrain::{
    data_scaled_start, pretrain, pretrain_objective, training_nll, PretrainConfig, PretrainOutcome,
};
pub use reinforce::{reinforce_loss, reinforce_weights, LossOutput, SurrogateProgram};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub gamma: f64,
    pub queries: usize,
    pub initial_points: usize,
    pub batch_episodes: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            queries: 10,
            initial_points: 1,
            batch_episodes: 16,
            learning_rate: 1e-3,
            max_epochs: 1000,
            patience: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must be in (0, 1], got {}", self.gamma)));
        }
        if self.queries == 0 {
            return Err(Error::Config("queries must be >= 1".into()));
        }
        if self.batch_episodes == 0 {
            return Err(Error::Config("batch_episodes must be >= 1".into()));
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

/// `max y - max y over evaluated`.
pub fn gap(task: &TaskDataset, evaluated: &[usize]) -> Result<f64> {
    if evaluated.is_empty() {
        return Err(Error::contract("gap needs at least one evaluated point"));
    }
    let mut best = f64::NEG_INFINITY;
    for &i in evaluated {
        let y = *task
            .responses
            .get(i)
            .ok_or_else(|| Error::contract(format!("index {i} out of range")))?;
        best = best.max(y);
    }
    Ok(task.max_response() - best)
}

/// `G_t = gaps[t] + gamma * G_{t+1}` with `G_{T+1} = 0`.
pub fn discounted_returns(gaps: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; gaps.len()];
    let mut acc = 0.0;
    for (o, g) in out.iter_mut().zip(gaps).rev() {
        acc = g + gamma * acc;
        *o = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Matrix;

    #[test]
    fn gap_examples() {
        let m = Matrix::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let t = TaskDataset::new("t", m, vec![0.0, 5.0, 3.0]).unwrap();
        assert_eq!(gap(&t, &[1]).unwrap(), 0.0);
        assert_eq!(gap(&t, &[0]).unwrap(), 5.0);
        assert_eq!(gap(&t, &[0, 2]).unwrap(), 2.0);
        assert!(gap(&t, &[]).is_err());
    }

    #[test]
    fn returns_examples() {
        assert_eq!(discounted_returns(&[3.0, 2.0, 1.0], 1.0), vec![6.0, 3.0, 1.0]);
        assert_eq!(discounted_returns(&[1.0, 1.0, 1.0], 0.5), vec![1.75, 1.5, 1.0]);
        assert_eq!(discounted_returns(&[0.0; 4], 0.9), vec![0.0; 4]);
        assert!(discounted_returns(&[], 0.9).is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { gamma: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { queries: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_episodes: 0, ..Default::default() }.validate().is_err());
    }
}
