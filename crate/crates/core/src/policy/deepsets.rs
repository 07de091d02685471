//! Deep-sets RL policy: `z = g(mean_n f(x_n))` over the evaluated set and
//! `logit_n = h([x_n, z])`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{greedy_policy, DifferentiablePolicy, StepScorer};
use crate::deepkernel::MlpSpec;
use crate::diffmath::{Layout, Matrix, ParamVars, ParameterVector, Tape, Var};
use crate::error::{Error, Result};
use crate::tasks::TaskDataset;

pub const F_PREFIX: &str = "f";
pub const G_PREFIX: &str = "g";
pub const H_PREFIX: &str = "h";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeepSetsPolicy {
    pub f: MlpSpec,
    pub g: MlpSpec,
    pub h: MlpSpec,
    pub params: ParameterVector,
}

impl DeepSetsPolicy {
    pub fn architecture(input_dim: usize, hidden: usize) -> (MlpSpec, MlpSpec, MlpSpec) {
        let f = MlpSpec {
            input_dim,
            layer_widths: vec![hidden; 3],
        };
        let g = MlpSpec {
            input_dim: hidden,
            layer_widths: vec![hidden; 3],
        };
        let h = MlpSpec {
            input_dim: input_dim + hidden,
            layer_widths: vec![hidden, hidden, hidden, 1],
        };
        (f, g, h)
    }

    pub fn from_specs<R: Rng + ?Sized>(f: MlpSpec, g: MlpSpec, h: MlpSpec, rng: &mut R) -> Result<Self> {
        if g.input_dim != f.output_dim()
            || h.input_dim != f.input_dim + g.output_dim()
            || h.output_dim() != 1
        {
            return Err(Error::contract("inconsistent deep-sets layer shapes"));
        }
        let mut b = Layout::builder();
        b = f.extend_layout(F_PREFIX, b);
        b = g.extend_layout(G_PREFIX, b);
        b = h.extend_layout(H_PREFIX, b);
        let mut params = ParameterVector::zeros(b.build());
        f.initialize(F_PREFIX, &mut params, rng)?;
        g.initialize(G_PREFIX, &mut params, rng)?;
        h.initialize(H_PREFIX, &mut params, rng)?;
        Ok(DeepSetsPolicy { f, g, h, params })
    }

    /// Default shape: three 32-unit layers for `f` and `g`, four for `h`.
    pub fn new<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Result<Self> {
        let (f, g, h) = Self::architecture(input_dim, 32);
        Self::from_specs(f, g, h, rng)
    }

    /// Set representation `z` (`1 x d`) on a tape from the `f` outputs of
    /// the evaluated rows.
    fn set_representation(
        &self,
        tape: &mut Tape,
        params: &ParamVars,
        f_all: Var,
        evaluated: &[usize],
    ) -> Result<Var> {
        let pooled = if evaluated.is_empty() {
            tape.constant(Matrix::zeros(1, self.f.output_dim()))?
        } else {
            let mut rows = evaluated.to_vec();
            rows.sort_unstable();
            let fe = tape.select_rows(f_all, &rows)?;
            tape.mean_rows(fe)?
        };
        self.g.forward(G_PREFIX, tape, params, pooled)
    }
}

struct DeepSetsScorer<'a> {
    policy: &'a DeepSetsPolicy,
    params: ParamVars,
    x: Var,
    f_all: Var,
}

impl StepScorer for DeepSetsScorer<'_> {
    fn logits(&mut self, tape: &mut Tape, evaluated: &[usize], support: &[usize]) -> Result<Var> {
        if support.is_empty() {
            return Err(Error::contract("every candidate is already evaluated"));
        }
        let z = self
            .policy
            .set_representation(tape, &self.params, self.f_all, evaluated)?;
        let xs = tape.select_rows(self.x, support)?;
        let zs = tape.tile_rows(z, support.len())?;
        let input = tape.concat_cols(xs, zs)?;
        let out = self.policy.h.forward(H_PREFIX, tape, &self.params, input)?;
        tape.transpose(out)
    }
}

impl DifferentiablePolicy for DeepSetsPolicy {
    fn label(&self) -> String {
        "rl".into()
    }

    fn params(&self) -> &ParameterVector {
        &self.params
    }

    fn with_params(&self, params: ParameterVector) -> Result<Self> {
        if params.layout() != self.params.layout() {
            return Err(Error::contract("parameter layout does not match the policy"));
        }
        Ok(DeepSetsPolicy {
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
        let x = tape.constant(task.features.clone())?;
        let f_all = self.f.forward(F_PREFIX, tape, params, x)?;
        Ok(Box::new(DeepSetsScorer {
            policy: self,
            params: params.clone(),
            x,
            f_all,
        }))
    }
}

greedy_policy!(DeepSetsPolicy);
