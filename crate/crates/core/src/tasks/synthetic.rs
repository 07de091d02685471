//! Synthetic task families sharing one hidden feature map.
//!
//! Every suite draws a random two-layer `tanh` network `h: [0,1]^J -> R^E`.
//! Tasks differ only in their candidates and in the response drawn on top
//! of `h`, so they are related without being identical.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{TaskDataset, TaskSuite};
use crate::deepkernel::squared_distance;
use crate::diffmath::Matrix;
use crate::error::{Error, Result};
use crate::seeding::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Response is a GP sample (RBF over the hidden embedding) plus noise.
    GpDraw,
    /// Response is minus the embedded distance to a hidden target.
    NearestTarget,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::GpDraw => "gp-draw",
            Family::NearestTarget => "nearest-target",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp-draw" => Ok(Family::GpDraw),
            "nearest-target" => Ok(Family::NearestTarget),
            other => Err(Error::Config(format!("unknown task family `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub family: Family,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    /// Candidates per task.
    pub n_candidates: usize,
    /// Feature dimension `J`.
    pub dim: usize,
    pub hidden_width: usize,
    /// Output dimension of the hidden map.
    pub embed_dim: usize,
    /// Gain of the first hidden layer; larger values make `h` more nonlinear.
    pub hidden_gain: f64,
    /// RBF lengthscale in embedding space (gp-draw).
    pub lengthscale: f64,
    /// Observation-noise variance added to the unit-scale GP draw (gp-draw).
    pub noise: f64,
    /// Every response is multiplied by this factor.
    pub response_scale: f64,
    /// Nearest-target targets are drawn around this many suite-level
    /// centers; 0 draws them uniformly like the candidates.
    pub target_clusters: usize,
    /// Per-coordinate standard deviation of a target around its center.
    pub target_spread: f64,
    /// Subtract each task's mean response, so the zero prior mean is not
    /// optimistic about unexplored candidates.
    pub center_responses: bool,
}

impl GeneratorSpec {
    pub fn new(family: Family) -> Self {
        GeneratorSpec {
            family,
            n_train: 40,
            n_validation: 10,
            n_test: 20,
            n_candidates: 100,
            dim: 16,
            hidden_width: 32,
            embed_dim: 2,
            hidden_gain: 3.0,
            lengthscale: 0.5,
            noise: 1e-3,
            response_scale: 1.0,
            target_clusters: 3,
            target_spread: 0.05,
            center_responses: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_train + self.n_validation + self.n_test == 0 {
            return bad("generator spec has no tasks".into());
        }
        if self.n_candidates < 2 {
            return bad(format!("need at least 2 candidates per task, got {}", self.n_candidates));
        }
        if self.dim == 0 || self.hidden_width == 0 || self.embed_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        for (name, v) in [
            ("hidden_gain", self.hidden_gain),
            ("lengthscale", self.lengthscale),
            ("response_scale", self.response_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("noise", self.noise), ("target_spread", self.target_spread)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Random two-layer `tanh` map fixed per suite.
struct HiddenMap {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
}

impl HiddenMap {
    fn sample<R: Rng>(spec: &GeneratorSpec, rng: &mut R) -> Self {
        let (j, h, e) = (spec.dim, spec.hidden_width, spec.embed_dim);
        let mut normal = |scale: f64| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        };
        let w1 = (0..j * h).map(|_| normal(spec.hidden_gain / (j as f64).sqrt())).collect();
        let b1 = (0..h).map(|_| normal(0.5)).collect();
        let w2 = (0..h * e).map(|_| normal(1.0 / (h as f64).sqrt())).collect();
        HiddenMap {
            w1: Matrix::from_vec(j, h, w1).expect("shape"),
            b1,
            w2: Matrix::from_vec(h, e, w2).expect("shape"),
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let centered = Matrix::row_vector(x.iter().map(|v| v - 0.5).collect());
        let hidden = centered
            .matmul(&self.w1)
            .zip_map(&Matrix::row_vector(self.b1.clone()), |a, b| (a + b).tanh());
        hidden.matmul(&self.w2).into_vec()
    }
}

fn uniform_points<R: Rng>(n: usize, dim: usize, rng: &mut R) -> Matrix {
    let data = (0..n * dim).map(|_| rng.gen::<f64>()).collect();
    Matrix::from_vec(n, dim, data).expect("shape")
}

fn gp_draw<R: Rng>(spec: &GeneratorSpec, emb: &[Vec<f64>], rng: &mut R) -> Result<Vec<f64>> {
    let n = emb.len();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = squared_distance(&emb[i], &emb[j]);
            k.as_mut_slice()[i * n + j] = (-d / (2.0 * spec.lengthscale.powi(2))).exp();
        }
        k.as_mut_slice()[i * n + i] += spec.noise;
    }
    let l = k.cholesky()?;
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok((0..n)
        .map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum::<f64>() * spec.response_scale)
        .collect())
}

fn draw_target<R: Rng>(spec: &GeneratorSpec, centers: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    if centers.is_empty() {
        return (0..spec.dim).map(|_| rng.gen::<f64>()).collect();
    }
    let c = &centers[rng.gen_range(0..centers.len())];
    c.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + spec.target_spread * z
        })
        .collect()
}

fn make_task<R: Rng>(
    spec: &GeneratorSpec,
    map: &HiddenMap,
    centers: &[Vec<f64>],
    id: String,
    rng: &mut R,
) -> Result<TaskDataset> {
    let features = uniform_points(spec.n_candidates, spec.dim, rng);
    let emb: Vec<Vec<f64>> = (0..spec.n_candidates).map(|i| map.apply(features.row(i))).collect();
    let (responses, meta) = match spec.family {
        Family::GpDraw => (gp_draw(spec, &emb, rng)?, serde_json::json!({})),
        Family::NearestTarget => {
            let target = draw_target(spec, centers, rng);
            let t_emb = map.apply(&target);
            let y = emb
                .iter()
                .map(|e| -squared_distance(e, &t_emb).sqrt() * spec.response_scale)
                .collect();
            (y, serde_json::json!({ "target": target }))
        }
    };
    let mut responses: Vec<f64> = responses;
    if spec.center_responses {
        let mean = responses.iter().sum::<f64>() / responses.len() as f64;
        responses.iter_mut().for_each(|y| *y -= mean);
    }
    let mut task = TaskDataset::new(id, features, responses)?;
    task.meta = Some(meta);
    Ok(task)
}

/// Generates a suite; identical `(spec, seed)` give identical suites.
pub fn generate_synthetic_suite(spec: &GeneratorSpec, seed: u64) -> Result<TaskSuite> {
    spec.validate()?;
    let map = HiddenMap::sample(spec, &mut stream_rng(seed, &[0x6e6e]));
    let mut center_rng = stream_rng(seed, &[0xc3]);
    let centers: Vec<Vec<f64>> = (0..spec.target_clusters)
        .map(|_| (0..spec.dim).map(|_| center_rng.gen::<f64>()).collect())
        .collect();
    let split = |name: &str, stream: u64, count: usize| -> Result<Vec<TaskDataset>> {
        (0..count)
            .map(|i| {
                let mut rng = stream_rng(seed, &[0x7a5c, stream, i as u64]);
                make_task(spec, &map, &centers, format!("{name}-{i:03}"), &mut rng)
            })
            .collect()
    };
    let suite = TaskSuite {
        train: split("train", 1, spec.n_train)?,
        validation: split("validation", 2, spec.n_validation)?,
        test: split("test", 3, spec.n_test)?,
        seed,
        provenance: serde_json::json!({ "generator": spec }),
    };
    suite.validate()?;
    Ok(suite)
}
