//! Exact zero-mean GP posterior and log marginal likelihood.
//!
//! For evaluated embeddings `E` with responses `y` and a query embedding
//! `q`, with `C = K(E, E) + beta I = L L^T`:
//!
//! - mean `mu = k^T C^{-1} y`
//! - variance `sigma^2 = alpha - k^T C^{-1} k`, floored at [`VARIANCE_FLOOR`]
//!
//! The variance is that of the latent function (no `beta` term).

use std::f64::consts::PI;

use crate::deepkernel::{KernelParams, KernelVars};
use crate::diffmath::{Matrix, ParameterVector, Tape, Var};
use crate::error::{Error, Result};
use crate::tasks::TaskDataset;

pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Evaluated candidates of one task, in evaluation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvaluatedSet {
    indices: Vec<usize>,
    x_values: Vec<Vec<f64>>,
    y_values: Vec<f64>,
}

impl EvaluatedSet {
    pub fn new(indices: Vec<usize>, x_values: Vec<Vec<f64>>, y_values: Vec<f64>) -> Result<Self> {
        if indices.len() != x_values.len() || indices.len() != y_values.len() {
            return Err(Error::contract(format!(
                "evaluated set sizes differ: {} indices, {} features, {} responses",
                indices.len(),
                x_values.len(),
                y_values.len()
            )));
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("evaluated indices must be unique"));
        }
        Ok(EvaluatedSet {
            indices,
            x_values,
            y_values,
        })
    }

    pub fn from_task(task: &TaskDataset, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= task.len()) {
            return Err(Error::contract(format!(
                "candidate {bad} out of range for task with {} candidates",
                task.len()
            )));
        }
        Self::new(
            indices.to_vec(),
            indices.iter().map(|&i| task.features.row(i).to_vec()).collect(),
            indices.iter().map(|&i| task.responses[i]).collect(),
        )
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn x_values(&self) -> &[Vec<f64>] {
        &self.x_values
    }

    pub fn y_values(&self) -> &[f64] {
        &self.y_values
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.contains(&index)
    }

    pub fn best(&self) -> Option<f64> {
        self.y_values.iter().cloned().reduce(f64::max)
    }
}

/// Predictive mean and latent variance per queried candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorStats {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Posterior rows (`1 x m`) on a tape.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mean: Var,
    pub variance: Var,
}

/// Posterior at the embedded queries `query` (m x d) given embedded
/// evaluated points `evaluated` (t x d, `None` when nothing is evaluated)
/// and their responses.
pub fn posterior_vars(
    tape: &mut Tape,
    kernel: &KernelVars<'_>,
    evaluated: Option<Var>,
    y: &[f64],
    query: Var,
) -> Result<PosteriorVars> {
    let m = tape.value(query).rows();
    let zeros = tape.constant(Matrix::zeros(1, m))?;
    let Some(e) = evaluated else {
        if !y.is_empty() {
            return Err(Error::contract("responses given without evaluated points"));
        }
        let prior = tape.shift_by(zeros, kernel.alpha)?;
        let variance = tape.clamp_min(prior, VARIANCE_FLOOR)?;
        return Ok(PosteriorVars {
            mean: zeros,
            variance,
        });
    };
    if tape.value(e).rows() != y.len() {
        return Err(Error::contract("one response per evaluated point required"));
    }
    let k = kernel.cross(tape, e, e)?;
    let c = tape.add_diag(k, kernel.beta)?;
    let l = tape.cholesky(c)?;
    let kq = kernel.cross(tape, e, query)?;
    let v = tape.trisolve(l, kq)?;
    let yv = tape.constant(Matrix::column(y.to_vec()))?;
    let w = tape.trisolve(l, yv)?;
    let wt = tape.transpose(w)?;
    let mean = tape.matmul(wt, v)?;
    let v2 = tape.mul(v, v)?;
    let explained = tape.column_sums(v2)?;
    let reduction = tape.neg(explained)?;
    let raw = tape.shift_by(reduction, kernel.alpha)?;
    let variance = tape.clamp_min(raw, VARIANCE_FLOOR)?;
    Ok(PosteriorVars { mean, variance })
}

/// Posterior at every row of `queries`.
pub fn posterior_many(
    queries: &Matrix,
    evaluated: &EvaluatedSet,
    params: &KernelParams,
) -> Result<PosteriorStats> {
    let mut tape = Tape::new();
    let pv = tape.bind_frozen(&params.params)?;
    let kv = KernelVars::new(&mut tape, &params.mlp, &pv)?;
    let qx = tape.constant(queries.clone())?;
    let q = kv.embed(&mut tape, qx)?;
    let e = if evaluated.is_empty() {
        None
    } else {
        let ex = tape.constant(Matrix::from_rows(evaluated.x_values())?)?;
        Some(kv.embed(&mut tape, ex)?)
    };
    let post = posterior_vars(&mut tape, &kv, e, evaluated.y_values(), q)?;
    Ok(PosteriorStats {
        mean: tape.value(post.mean).as_slice().to_vec(),
        variance: tape.value(post.variance).as_slice().to_vec(),
    })
}

/// Posterior at a single query point.
pub fn posterior(query: &[f64], evaluated: &EvaluatedSet, params: &KernelParams) -> Result<PosteriorStats> {
    posterior_many(&Matrix::row_vector(query.to_vec()), evaluated, params)
}

/// `log N(y | 0, K + beta I)` for embedded rows `emb` (n x d).
pub fn log_marginal_likelihood_var(
    tape: &mut Tape,
    kernel: &KernelVars<'_>,
    emb: Var,
    y: &[f64],
) -> Result<Var> {
    let n = y.len();
    if n == 0 || tape.value(emb).rows() != n {
        return Err(Error::contract(
            "marginal likelihood needs one response per (nonempty) point",
        ));
    }
    let k = kernel.cross(tape, emb, emb)?;
    let c = tape.add_diag(k, kernel.beta)?;
    let l = tape.cholesky(c)?;
    let yv = tape.constant(Matrix::column(y.to_vec()))?;
    let w = tape.trisolve(l, yv)?;
    let w2 = tape.mul(w, w)?;
    let quad = tape.sum(w2)?;
    let half_quad = tape.scale(quad, -0.5)?;
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let ld = tape.gather(l, &diag)?;
    let log_ld = tape.log(ld)?;
    let half_logdet = tape.sum(log_ld)?;
    let lml = tape.sub(half_quad, half_logdet)?;
    tape.shift(lml, -0.5 * n as f64 * (2.0 * PI).ln())
}

fn lml_tape(
    task: &TaskDataset,
    subset: &[usize],
    params: &KernelParams,
    trainable: bool,
) -> Result<(Tape, Var)> {
    if subset.is_empty() {
        return Err(Error::contract("marginal likelihood needs a nonempty subset"));
    }
    let ev = EvaluatedSet::from_task(task, subset)?;
    let mut tape = Tape::new();
    let pv = if trainable {
        tape.bind(&params.params)?
    } else {
        tape.bind_frozen(&params.params)?
    };
    let kv = KernelVars::new(&mut tape, &params.mlp, &pv)?;
    let x = tape.constant(Matrix::from_rows(ev.x_values())?)?;
    let e = kv.embed(&mut tape, x)?;
    let out = log_marginal_likelihood_var(&mut tape, &kv, e, ev.y_values())?;
    Ok((tape, out))
}

pub fn log_marginal_likelihood(
    task: &TaskDataset,
    subset: &[usize],
    params: &KernelParams,
) -> Result<f64> {
    let (tape, out) = lml_tape(task, subset, params, false)?;
    tape.scalar(out)
}

/// Log marginal likelihood and its gradient with respect to all kernel
/// parameters.
pub fn log_marginal_likelihood_grad(
    task: &TaskDataset,
    subset: &[usize],
    params: &KernelParams,
) -> Result<(f64, ParameterVector)> {
    let (tape, out) = lml_tape(task, subset, params, true)?;
    Ok((tape.scalar(out)?, tape.gradient(out)?))
}
