//! Deep-kernel GP policy: embed, GP posterior, acquisition.

use serde::{Deserialize, Serialize};

use super::{greedy_policy, DifferentiablePolicy, StepScorer};
use crate::acquisition::{acquisition_var, AcquisitionConfig, AcquisitionKind, MiState};
use crate::deepkernel::{KernelParams, KernelVars};
use crate::diffmath::{ParamVars, ParameterVector, Tape, Var};
use crate::error::{Error, Result};
use crate::gp::posterior_vars;
use crate::tasks::TaskDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepKernelPolicy {
    pub name: String,
    pub kernel: KernelParams,
    pub acquisition: AcquisitionConfig,
}

impl DeepKernelPolicy {
    pub fn new(name: impl Into<String>, kernel: KernelParams, acquisition: AcquisitionConfig) -> Self {
        DeepKernelPolicy {
            name: name.into(),
            kernel,
            acquisition,
        }
    }
}

struct KernelScorer<'a> {
    task: &'a TaskDataset,
    acquisition: AcquisitionConfig,
    kernel: KernelVars<'a>,
    embedded: Var,
    state: MiState,
    last_variance: Vec<f64>,
}

impl StepScorer for KernelScorer<'_> {
    fn logits(&mut self, tape: &mut Tape, evaluated: &[usize], support: &[usize]) -> Result<Var> {
        if support.is_empty() {
            return Err(Error::contract("every candidate is already evaluated"));
        }
        let e = if evaluated.is_empty() {
            None
        } else {
            Some(tape.select_rows(self.embedded, evaluated)?)
        };
        let q = tape.select_rows(self.embedded, support)?;
        let y: Vec<f64> = evaluated.iter().map(|&i| self.task.responses[i]).collect();
        let post = posterior_vars(tape, &self.kernel, e, &y, q)?;
        let best = y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let best = if best.is_finite() { best } else { 0.0 };
        self.last_variance = tape.value(post.variance).as_slice().to_vec();
        acquisition_var(tape, &self.acquisition, &post, &self.state, best)
    }

    fn commit(&mut self, position: usize) -> Result<()> {
        if self.acquisition.kind == AcquisitionKind::Mi {
            let v = *self
                .last_variance
                .get(position)
                .ok_or_else(|| Error::contract("commit before scoring"))?;
            self.state = self.state.advance(v)?;
        }
        Ok(())
    }

    fn state(&self) -> Vec<f64> {
        vec![self.state.xi()]
    }

    fn restore(&mut self, state: &[f64]) -> Result<()> {
        match state {
            [xi] => {
                self.state = MiState::from_xi(*xi)?;
                Ok(())
            }
            _ => Err(Error::contract("kernel scorer state is a single xi value")),
        }
    }
}

impl DifferentiablePolicy for DeepKernelPolicy {
    fn label(&self) -> String {
        format!("{}-{}", self.name, self.acquisition.kind)
    }

    fn params(&self) -> &ParameterVector {
        &self.kernel.params
    }

    fn with_params(&self, params: ParameterVector) -> Result<Self> {
        Ok(DeepKernelPolicy {
            kernel: self.kernel.with_params(params)?,
            ..self.clone()
        })
    }

    fn scorer<'a>(
        &'a self,
        tape: &mut Tape,
        params: &ParamVars,
        task: &'a TaskDataset,
    ) -> Result<Box<dyn StepScorer + 'a>> {
        if task.dim() != self.kernel.input_dim() {
            return Err(Error::contract(format!(
                "task {} has {} features, kernel expects {}",
                task.task_id,
                task.dim(),
                self.kernel.input_dim()
            )));
        }
        let kernel = KernelVars::new(tape, &self.kernel.mlp, params)?;
        let x = tape.constant(task.features.clone())?;
        let embedded = kernel.embed(tape, x)?;
        Ok(Box::new(KernelScorer {
            task,
            acquisition: self.acquisition,
            kernel,
            embedded,
            state: MiState::new(),
            last_variance: Vec::new(),
        }))
    }
}

greedy_policy!(DeepKernelPolicy);

/// Acquisition value of every unevaluated candidate (ascending index) given
/// the evaluated indices and the MI state.
pub fn score_candidates(
    task: &TaskDataset,
    evaluated: &[usize],
    kernel: &KernelParams,
    acquisition: &AcquisitionConfig,
    state: &MiState,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let support = super::unevaluated(task.len(), evaluated);
    let mut tape = Tape::new();
    let pv = tape.bind_frozen(&kernel.params)?;
    let kv = KernelVars::new(&mut tape, &kernel.mlp, &pv)?;
    let x = tape.constant(task.features.clone())?;
    let embedded = kv.embed(&mut tape, x)?;
    let mut scorer = KernelScorer {
        task,
        acquisition: *acquisition,
        kernel: kv,
        embedded,
        state: *state,
        last_variance: Vec::new(),
    };
    let logits = scorer.logits(&mut tape, evaluated, &support)?;
    let values = tape.value(logits).as_slice().to_vec();
    Ok((support, values))
}
