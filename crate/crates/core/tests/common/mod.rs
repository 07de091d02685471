//! Reference implementations shared by the integration tests. They use
//! plain loops and dense inverses, never the crate's tape.

#![allow(dead_code)]

use deepacq::deepkernel::{KernelParams, MlpSpec};
use deepacq::diffmath::{Matrix, ParameterVector};
use deepacq::seeding::stream_rng;
use deepacq::tasks::TaskDataset;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

pub fn random_task(id: &str, n: usize, dim: usize, seed: u64) -> TaskDataset {
    let mut rng = stream_rng(seed, &[1]);
    let x: Vec<f64> = (0..n * dim).map(|_| rng.gen::<f64>()).collect();
    let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TaskDataset::new(id, Matrix::from_vec(n, dim, x).unwrap(), y).unwrap()
}

pub fn small_kernel(dim: usize, seed: u64) -> KernelParams {
    let mlp = MlpSpec {
        input_dim: dim,
        layer_widths: vec![5, 3],
    };
    KernelParams::new(mlp, &mut stream_rng(seed, &[2])).unwrap()
}

/// `x W + b` per layer with ReLU between layers.
pub fn mlp_forward(spec: &MlpSpec, prefix: &str, params: &ParameterVector, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let layers = spec.layer_widths.len();
    for (i, &width) in spec.layer_widths.iter().enumerate() {
        let w = params.get(&MlpSpec::weight_name(prefix, i)).unwrap();
        let b = params.get(&MlpSpec::bias_name(prefix, i)).unwrap();
        let fan_in = h.len();
        let mut out = b.to_vec();
        for (j, o) in out.iter_mut().enumerate() {
            for k in 0..fan_in {
                *o += h[k] * w[k * width + j];
            }
        }
        if i + 1 < layers {
            out.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = out;
    }
    h
}

pub fn embed(kernel: &KernelParams, x: &[f64]) -> Vec<f64> {
    mlp_forward(&kernel.mlp, "embed", &kernel.params, x)
}

pub fn rbf(kernel: &KernelParams, a: &[f64], b: &[f64]) -> f64 {
    let (ea, eb) = (embed(kernel, a), embed(kernel, b));
    let d: f64 = ea.iter().zip(&eb).map(|(p, q)| (p - q).powi(2)).sum();
    kernel.alpha() * (-d / (2.0 * kernel.eta())).exp()
}

/// Posterior mean and latent variance by explicit inversion of `K + beta I`.
pub fn dense_posterior(kernel: &KernelParams, xs: &[Vec<f64>], ys: &[f64], q: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, kernel.alpha());
    }
    let k = DMatrix::from_fn(n, n, |i, j| rbf(kernel, &xs[i], &xs[j]) + if i == j { kernel.beta() } else { 0.0 });
    let inv = k.try_inverse().unwrap();
    let kq = DVector::from_fn(n, |i, _| rbf(kernel, &xs[i], q));
    let y = DVector::from_column_slice(ys);
    let mean = (kq.transpose() * &inv * y)[0];
    let var = rbf(kernel, q, q) - (kq.transpose() * &inv * &kq)[0];
    (mean, var.max(1e-12))
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}
