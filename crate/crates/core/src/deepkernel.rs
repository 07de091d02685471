//! Neural-feature RBF kernel `k(x, x') = alpha * exp(-|g(x) - g(x')|^2 / (2 eta))`.
//!
//! The kernel itself is noise-free. Observation noise `beta` is added once to
//! the Gram matrix of evaluated points by the [`gp`](crate::gp) module.
//! `alpha`, `beta`, `eta` are stored as logs so positivity holds for any
//! parameter value.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Layout, LayoutBuilder, Matrix, ParamVars, ParameterVector, Tape, Var};
use crate::error::{Error, Result};

pub const LOG_ALPHA: &str = "log_alpha";
pub const LOG_BETA: &str = "log_beta";
pub const LOG_ETA: &str = "log_eta";
pub const EMBED_PREFIX: &str = "embed";

pub const FORMAT_VERSION: u32 = 1;

/// Feed-forward network shape: affine layers of the given widths with ReLU
/// between them and a linear last layer. No layers means the identity map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub layer_widths: Vec<usize>,
}

impl MlpSpec {
    /// Four layers of 32 units.
    pub fn default_for(input_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            layer_widths: vec![32; 4],
        }
    }

    pub fn identity(input_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            layer_widths: Vec::new(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layer_widths.last().copied().unwrap_or(self.input_dim)
    }

    fn layer_dims(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut fan_in = self.input_dim;
        self.layer_widths.iter().enumerate().map(move |(i, &w)| {
            let dims = (i, fan_in, w);
            fan_in = w;
            dims
        })
    }

    pub fn weight_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.weight")
    }

    pub fn bias_name(prefix: &str, layer: usize) -> String {
        format!("{prefix}.{layer}.bias")
    }

    pub fn extend_layout(&self, prefix: &str, mut builder: LayoutBuilder) -> LayoutBuilder {
        for (i, fan_in, fan_out) in self.layer_dims() {
            builder = builder
                .push(Self::weight_name(prefix, i), fan_in, fan_out)
                .push(Self::bias_name(prefix, i), 1, fan_out);
        }
        builder
    }

    /// Glorot-uniform weights, zero biases.
    pub fn initialize<R: Rng + ?Sized>(
        &self,
        prefix: &str,
        params: &mut ParameterVector,
        rng: &mut R,
    ) -> Result<()> {
        for (i, fan_in, fan_out) in self.layer_dims() {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = params.get_mut(&Self::weight_name(prefix, i))?;
            for x in w.iter_mut() {
                *x = rng.gen_range(-limit..=limit);
            }
            params
                .get_mut(&Self::bias_name(prefix, i))?
                .iter_mut()
                .for_each(|b| *b = 0.0);
        }
        Ok(())
    }

    /// Applies the network row-wise to `x` (n x input_dim).
    pub fn forward(&self, prefix: &str, tape: &mut Tape, params: &ParamVars, x: Var) -> Result<Var> {
        let (_, cols) = tape.value(x).shape();
        if cols != self.input_dim {
            return Err(Error::contract(format!(
                "network expects {} input features, got {cols}",
                self.input_dim
            )));
        }
        let last = self.layer_widths.len().saturating_sub(1);
        let mut h = x;
        for (i, _, _) in self.layer_dims() {
            let w = params.get(&Self::weight_name(prefix, i))?;
            let b = params.get(&Self::bias_name(prefix, i))?;
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }
}

/// Trainable kernel parameters: embedding network plus log-amplitude,
/// log-noise and log-lengthscale-squared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub format_version: u32,
    pub mlp: MlpSpec,
    pub params: ParameterVector,
}

impl KernelParams {
    pub fn layout(mlp: &MlpSpec) -> std::sync::Arc<Layout> {
        mlp.extend_layout(EMBED_PREFIX, Layout::builder())
            .push(LOG_ALPHA, 1, 1)
            .push(LOG_BETA, 1, 1)
            .push(LOG_ETA, 1, 1)
            .build()
    }

    /// Fresh parameters: random embedding, `alpha = 1`, `beta = 1e-2`,
    /// `eta = 1`.
    pub fn new<R: Rng + ?Sized>(mlp: MlpSpec, rng: &mut R) -> Result<Self> {
        let mut params = ParameterVector::zeros(Self::layout(&mlp));
        mlp.initialize(EMBED_PREFIX, &mut params, rng)?;
        params.set(LOG_ALPHA, &[0.0])?;
        params.set(LOG_BETA, &[(1e-2f64).ln()])?;
        params.set(LOG_ETA, &[0.0])?;
        Ok(KernelParams {
            format_version: FORMAT_VERSION,
            mlp,
            params,
        })
    }

    pub fn from_parts(mlp: MlpSpec, params: ParameterVector) -> Result<Self> {
        if *params.layout().as_ref() != *Self::layout(&mlp) {
            return Err(Error::contract("parameter layout does not match network spec"));
        }
        Ok(KernelParams {
            format_version: FORMAT_VERSION,
            mlp,
            params,
        })
    }

    pub fn with_params(&self, params: ParameterVector) -> Result<Self> {
        Self::from_parts(self.mlp.clone(), params)
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim
    }

    pub fn alpha(&self) -> f64 {
        self.log_value(LOG_ALPHA).exp()
    }

    pub fn beta(&self) -> f64 {
        self.log_value(LOG_BETA).exp()
    }

    pub fn eta(&self) -> f64 {
        self.log_value(LOG_ETA).exp()
    }

    fn log_value(&self, name: &str) -> f64 {
        self.params.scalar(name).expect("kernel layout always has log scalars")
    }

    pub fn set_log(&mut self, name: &str, value: f64) -> Result<()> {
        self.params.set(name, &[value])
    }

    /// `g(x; theta)` for one feature vector.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = self.embed_rows(&Matrix::row_vector(x.to_vec()))?;
        Ok(m.into_vec())
    }

    /// Row-wise embedding of a feature matrix.
    pub fn embed_rows(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let pv = tape.bind_frozen(&self.params)?;
        let xv = tape.constant(x.clone())?;
        let e = self.mlp.forward(EMBED_PREFIX, &mut tape, &pv, xv)?;
        Ok(tape.value(e).clone())
    }

    /// Noise-free kernel value between two feature vectors.
    pub fn kernel(&self, x: &[f64], x_prime: &[f64]) -> Result<f64> {
        let a = self.embed(x)?;
        let b = self.embed(x_prime)?;
        Ok(rbf_value(self.alpha(), self.eta(), squared_distance(&a, &b)))
    }

    /// Noise-free Gram matrix `K[i][j] = kernel(points[i], points[j])`.
    pub fn gram<R: AsRef<[f64]>>(&self, points: &[R]) -> Result<Matrix> {
        if points.is_empty() {
            return Err(Error::contract("gram needs at least one point"));
        }
        let x = Matrix::from_rows(points)?;
        let mut tape = Tape::new();
        let pv = tape.bind_frozen(&self.params)?;
        let kv = KernelVars::new(&mut tape, &self.mlp, &pv)?;
        let xv = tape.constant(x)?;
        let e = kv.embed(&mut tape, xv)?;
        let k = kv.cross(&mut tape, e, e)?;
        Ok(tape.value(k).clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let kp: KernelParams = serde_json::from_str(&text).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if kp.format_version != FORMAT_VERSION {
            return Err(Error::Load {
                path: path.to_path_buf(),
                message: format!("unsupported format version {}", kp.format_version),
            });
        }
        Self::from_parts(kp.mlp, kp.params)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn rbf_value(alpha: f64, eta: f64, sqdist: f64) -> f64 {
    alpha * (-sqdist / (2.0 * eta)).exp()
}

/// Kernel parameters lifted onto a tape.
#[derive(Clone, Debug)]
pub struct KernelVars<'s> {
    mlp: &'s MlpSpec,
    params: ParamVars,
    pub alpha: Var,
    pub beta: Var,
    /// `-1 / (2 eta)`
    neg_half_inv_eta: Var,
}

impl<'s> KernelVars<'s> {
    pub fn new(tape: &mut Tape, mlp: &'s MlpSpec, params: &ParamVars) -> Result<Self> {
        let alpha = tape.exp(params.get(LOG_ALPHA)?)?;
        let beta = tape.exp(params.get(LOG_BETA)?)?;
        let neg_log_eta = tape.neg(params.get(LOG_ETA)?)?;
        let inv_eta = tape.exp(neg_log_eta)?;
        let neg_half_inv_eta = tape.scale(inv_eta, -0.5)?;
        Ok(KernelVars {
            mlp,
            params: params.clone(),
            alpha,
            beta,
            neg_half_inv_eta,
        })
    }

    pub fn embed(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.mlp.forward(EMBED_PREFIX, tape, &self.params, x)
    }

    /// Kernel matrix between embedded rows of `a` and `b`.
    pub fn cross(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let d = tape.sqdist(a, b)?;
        let s = tape.scale_by(d, self.neg_half_inv_eta)?;
        let e = tape.exp(s)?;
        tape.scale_by(e, self.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::finite_difference_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(widths: Vec<usize>, dim: usize, seed: u64) -> KernelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        KernelParams::new(
            MlpSpec {
                input_dim: dim,
                layer_widths: widths,
            },
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn default_init_values() {
        let kp = params(vec![32; 4], 5, 0);
        assert_eq!(kp.alpha(), 1.0);
        assert!((kp.beta() - 1e-2).abs() < 1e-15);
        assert_eq!(kp.eta(), 1.0);
        assert_eq!(kp.mlp.output_dim(), 32);
        let w = kp.params.get("embed.0.weight").unwrap();
        let limit = (6.0f64 / 37.0).sqrt();
        assert!(w.iter().all(|x| x.abs() <= limit));
        assert!(kp.params.get("embed.3.bias").unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_network_embeds_to_zero() {
        let mut kp = params(vec![4, 3], 2, 1);
        kp.params.values_mut().iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(kp.embed(&[0.3, -2.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer_embeds_to_input() {
        let mut kp = params(vec![3], 3, 2);
        kp.params
            .set("embed.0.weight", Matrix::identity(3).as_slice())
            .unwrap();
        assert_eq!(kp.embed(&[0.5, 1.0, 2.0]).unwrap(), vec![0.5, 1.0, 2.0]);
    }

    #[test]
    fn embedding_is_deterministic() {
        let kp = params(vec![32; 4], 6, 3);
        let x = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        assert_eq!(kp.embed(&x).unwrap(), kp.embed(&x).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_contract_error() {
        let kp = params(vec![4], 3, 4);
        assert!(matches!(kp.embed(&[1.0, 2.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn kernel_special_values() {
        let mut kp = params(Vec::new(), 1, 5);
        kp.set_log(LOG_ALPHA, 0.7f64.ln()).unwrap();
        kp.set_log(LOG_ETA, 0.3f64.ln()).unwrap();
        assert_eq!(kp.kernel(&[0.4], &[0.4]).unwrap(), 0.7);
        // |x - x'|^2 = 2 eta ln 2
        let d = (2.0 * 0.3 * 2f64.ln()).sqrt();
        assert!((kp.kernel(&[0.0], &[d]).unwrap() - 0.35).abs() < 1e-15);
        assert_eq!(kp.kernel(&[0.0], &[1e3]).unwrap(), 0.0);
    }

    #[test]
    fn gram_small_cases() {
        let kp = params(vec![8, 4], 2, 6);
        let one = kp.gram(&[[0.1, 0.2]]).unwrap();
        assert_eq!(one.as_slice(), &[kp.alpha()]);
        let two = kp.gram(&[[0.1, 0.2], [0.1, 0.2]]).unwrap();
        assert_eq!(two.as_slice(), &[kp.alpha(); 4]);
        assert!(kp.gram::<[f64; 2]>(&[]).is_err());
    }

    #[test]
    fn gram_matches_pairwise_kernel_loop() {
        let kp = params(vec![8, 8, 4], 3, 7);
        let pts = [[0.1, 0.9, -0.4], [1.2, 0.3, 0.0], [-0.5, 0.5, 2.0]];
        let g = kp.gram(&pts).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let k = kp.kernel(&pts[i], &pts[j]).unwrap();
                assert!((g[(i, j)] - k).abs() <= 1e-14 * k.abs().max(1.0));
            }
        }
    }

    #[test]
    fn kernel_is_symmetric_and_bounded() {
        let kp = params(vec![16, 8], 4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for _ in 0..50 {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let kab = kp.kernel(&a, &b).unwrap();
            assert_eq!(kab, kp.kernel(&b, &a).unwrap());
            assert!(kab > 0.0 && kab <= kp.alpha());
        }
    }

    #[test]
    fn gram_plus_noise_is_positive_definite_with_duplicates() {
        let kp = params(vec![8, 4], 2, 9);
        let pts = [[0.1, 0.2], [0.1, 0.2], [0.3, 0.1], [0.1, 0.2]];
        let mut g = kp.gram(&pts).unwrap();
        for i in 0..4 {
            g[(i, i)] += kp.beta();
        }
        assert!(g.cholesky_raw(0.0).is_some());
    }

    #[test]
    fn kernel_gradient_passes_fd_check() {
        let kp = params(vec![6, 5, 4], 3, 10);
        let mlp = kp.mlp.clone();
        let x = Matrix::from_rows(&[[0.2, -0.7, 1.1], [0.9, 0.4, -0.3]]).unwrap();
        let program = move |tape: &mut Tape, p: &ParamVars| -> Result<Var> {
            let kv = KernelVars::new(tape, &mlp, p)?;
            let xa = tape.constant(Matrix::row_vector(x.row(0).to_vec()))?;
            let xb = tape.constant(Matrix::row_vector(x.row(1).to_vec()))?;
            let ea = kv.embed(tape, xa)?;
            let eb = kv.embed(tape, xb)?;
            let k = kv.cross(tape, ea, eb)?;
            // scaled down so roundoff at translation-invariant coordinates
            // (exactly zero gradient) stays under the check's 1e-8 floor
            let s = tape.sum(k)?;
            tape.scale(s, 1e-4)
        };
        let report = finite_difference_check(&program, &kp.params, 1e-5, 1e-6).unwrap();
        assert!(report.passed, "worst: {:?}", report.worst());
    }

    #[test]
    fn save_load_round_trip() {
        let kp = params(vec![5, 3], 2, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kernel.json");
        kp.save(&path).unwrap();
        assert_eq!(KernelParams::load(&path).unwrap(), kp);
    }
}
