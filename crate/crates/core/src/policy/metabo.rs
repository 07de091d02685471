//! MetaBO-style policy: a network over `[mean, variance, x]` from a frozen
//! plain-RBF GP.
//!
//! The mean and variance are divided by the GP's prior standard deviation
//! and prior variance before entering the network, so the inputs are on a
//! unit scale whatever the response scale is.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{greedy_policy, DifferentiablePolicy, StepScorer};
use crate::deepkernel::{KernelParams, KernelVars, MlpSpec};
use crate::diffmath::{Layout, ParamVars, ParameterVector, Tape, Var};
use crate::error::{Error, Result};
use crate::gp::posterior_vars;
use crate::tasks::TaskDataset;

pub const HEAD_PREFIX: &str = "head";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaBoPolicy {
    /// Frozen GP kernel; expected to use the identity embedding.
    pub gp: KernelParams,
    pub head: MlpSpec,
    pub params: ParameterVector,
}

impl MetaBoPolicy {
    pub fn from_spec<R: Rng + ?Sized>(gp: KernelParams, head: MlpSpec, rng: &mut R) -> Result<Self> {
        if head.input_dim != gp.input_dim() + 2 || head.output_dim() != 1 {
            return Err(Error::contract(format!(
                "head must map {} inputs to 1 output",
                gp.input_dim() + 2
            )));
        }
        let mut params = ParameterVector::zeros(head.extend_layout(HEAD_PREFIX, Layout::builder()).build());
        head.initialize(HEAD_PREFIX, &mut params, rng)?;
        Ok(MetaBoPolicy { gp, head, params })
    }

    /// Four-layer head with 32 hidden units.
    pub fn new<R: Rng + ?Sized>(gp: KernelParams, rng: &mut R) -> Result<Self> {
        let head = MlpSpec {
            input_dim: gp.input_dim() + 2,
            layer_widths: vec![32, 32, 32, 1],
        };
        Self::from_spec(gp, head, rng)
    }
}

struct MetaBoScorer<'a> {
    policy: &'a MetaBoPolicy,
    task: &'a TaskDataset,
    params: ParamVars,
    kernel: KernelVars<'a>,
    /// Raw features, fed to the head.
    x: Var,
    /// GP embedding of the features.
    embedded: Var,
}

impl StepScorer for MetaBoScorer<'_> {
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
        let alpha = self.policy.gp.alpha();
        let mean = tape.scale(post.mean, 1.0 / alpha.sqrt())?;
        let var = tape.scale(post.variance, 1.0 / alpha)?;
        let mean = tape.transpose(mean)?;
        let var = tape.transpose(var)?;
        let stats = tape.concat_cols(mean, var)?;
        let xq = tape.select_rows(self.x, support)?;
        let input = tape.concat_cols(stats, xq)?;
        let out = self.policy.head.forward(HEAD_PREFIX, tape, &self.params, input)?;
        tape.transpose(out)
    }
}

impl DifferentiablePolicy for MetaBoPolicy {
    fn label(&self) -> String {
        "metabo".into()
    }

    fn params(&self) -> &ParameterVector {
        &self.params
    }

    fn with_params(&self, params: ParameterVector) -> Result<Self> {
        if params.layout() != self.params.layout() {
            return Err(Error::contract("parameter layout does not match the policy"));
        }
        Ok(MetaBoPolicy {
            params,
            ..self.clone()
        })
    }

    fn scorer<'a>(
        &'a self,
        tape: &mut Tape,
        params: &ParamVars,
        task: &'a TaskDataset,
    ) -> Result<Box<dyn StepScorer + 'a>> {
        if task.dim() != self.gp.input_dim() {
            return Err(Error::contract(format!(
                "task {} has {} features, policy expects {}",
                task.task_id,
                task.dim(),
                self.gp.input_dim()
            )));
        }
        let gp_vars = tape.bind_frozen(&self.gp.params)?;
        let kernel = KernelVars::new(tape, &self.gp.mlp, &gp_vars)?;
        let xc = tape.constant(task.features.clone())?;
        let embedded = kernel.embed(tape, xc)?;
        Ok(Box::new(MetaBoScorer {
            policy: self,
            task,
            params: params.clone(),
            kernel,
            x: xc,
            embedded,
        }))
    }
}

greedy_policy!(MetaBoPolicy);
