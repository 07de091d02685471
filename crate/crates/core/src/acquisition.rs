//! Differentiable acquisition functions over GP posterior moments.
//!
//! - MI: `mu + sqrt(nu) (sqrt(sigma^2 + xi) - sqrt(xi))`, where `xi` is the
//!   running sum of the variances of the points already selected in the
//!   episode.
//! - EI: `(mu - y*) Phi(z) + sigma phi(z)` with `z = (mu - y*) / sigma`.
//! - UCB: `mu + sqrt(nu) sigma`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffmath::{std_normal_cdf, std_normal_pdf, Tape, Var};
use crate::error::{Error, Result};
use crate::gp::PosteriorVars;

/// `ln 2 / 1e-6`.
pub const DEFAULT_NU: f64 = std::f64::consts::LN_2 / 1e-6;

/// Below this standard deviation EI falls back to `max(mu - y*, 0)`.
pub const EI_SIGMA_THRESHOLD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionKind {
    Mi,
    Ei,
    Ucb,
}

impl fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AcquisitionKind::Mi => "mi",
            AcquisitionKind::Ei => "ei",
            AcquisitionKind::Ucb => "ucb",
        })
    }
}

impl FromStr for AcquisitionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mi" => Ok(AcquisitionKind::Mi),
            "ei" => Ok(AcquisitionKind::Ei),
            "ucb" => Ok(AcquisitionKind::Ucb),
            other => Err(Error::Config(format!("unknown acquisition `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionConfig {
    pub kind: AcquisitionKind,
    pub nu: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            kind: AcquisitionKind::Mi,
            nu: DEFAULT_NU,
        }
    }
}

impl AcquisitionConfig {
    pub fn new(kind: AcquisitionKind, nu: f64) -> Result<Self> {
        if !(nu >= 0.0) || !nu.is_finite() {
            return Err(Error::Config(format!("nu must be finite and >= 0, got {nu}")));
        }
        Ok(AcquisitionConfig { kind, nu })
    }
}

/// Accumulated variance of the queries selected so far in an episode.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MiState {
    xi: f64,
}

impl MiState {
    pub fn new() -> Self {
        MiState { xi: 0.0 }
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn from_xi(xi: f64) -> Result<MiState> {
        if !(xi >= 0.0 && xi.is_finite()) {
            return Err(Error::contract(format!("xi must be finite and >= 0, got {xi}")));
        }
        Ok(MiState { xi })
    }

    pub fn advance(&self, selected_variance: f64) -> Result<MiState> {
        if !(selected_variance >= 0.0) {
            return Err(Error::contract(format!(
                "selected variance must be >= 0, got {selected_variance}"
            )));
        }
        Ok(MiState {
            xi: self.xi + selected_variance,
        })
    }
}

pub fn mi_value(mean: f64, variance: f64, state: &MiState, nu: f64) -> f64 {
    let xi = state.xi;
    mean + nu.sqrt() * ((variance + xi).sqrt() - xi.sqrt())
}

pub fn ei_value(mean: f64, variance: f64, best_so_far: f64) -> f64 {
    let sigma = variance.max(0.0).sqrt();
    let improvement = mean - best_so_far;
    if sigma < EI_SIGMA_THRESHOLD {
        return improvement.max(0.0);
    }
    let z = improvement / sigma;
    (improvement * std_normal_cdf(z) + sigma * std_normal_pdf(z)).max(0.0)
}

pub fn ucb_value(mean: f64, variance: f64, nu: f64) -> f64 {
    mean + nu.sqrt() * variance.sqrt()
}

/// Acquisition values on a tape, shaped like the posterior rows. `xi` enters
/// as a constant; `best_so_far` is only read by EI.
pub fn acquisition_var(
    tape: &mut Tape,
    config: &AcquisitionConfig,
    posterior: &PosteriorVars,
    state: &MiState,
    best_so_far: f64,
) -> Result<Var> {
    let PosteriorVars { mean, variance } = *posterior;
    match config.kind {
        AcquisitionKind::Mi => {
            let xi = state.xi;
            let shifted = tape.shift(variance, xi)?;
            let root = tape.sqrt(shifted)?;
            let gain = tape.shift(root, -xi.sqrt())?;
            let bonus = tape.scale(gain, config.nu.sqrt())?;
            tape.add(mean, bonus)
        }
        AcquisitionKind::Ucb => {
            let sigma = tape.sqrt(variance)?;
            let bonus = tape.scale(sigma, config.nu.sqrt())?;
            tape.add(mean, bonus)
        }
        AcquisitionKind::Ei => {
            if tape
                .value(variance)
                .as_slice()
                .iter()
                .any(|&v| v.sqrt() < EI_SIGMA_THRESHOLD)
            {
                return Err(Error::contract(
                    "EI on a tape needs floored variances above the degenerate threshold",
                ));
            }
            let sigma = tape.sqrt(variance)?;
            let improvement = tape.shift(mean, -best_so_far)?;
            let z = tape.div(improvement, sigma)?;
            let cdf = tape.norm_cdf(z)?;
            let pdf = tape.norm_pdf(z)?;
            let a = tape.mul(improvement, cdf)?;
            let b = tape.mul(sigma, pdf)?;
            tape.add(a, b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{finite_difference_check, Layout, Matrix, ParamVars, ParameterVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mi_unit_values() {
        let s = MiState::new().advance(1.0).unwrap();
        assert_eq!(mi_value(1.0, 3.0, &s, 4.0), 3.0);
        assert_eq!(mi_value(0.4, 0.0, &s, 4.0), 0.4);
        assert_eq!(mi_value(0.4, 2.0, &s, 0.0), 0.4);
    }

    #[test]
    fn mi_state_accumulates() {
        let s = MiState::new().advance(0.5).unwrap();
        assert_eq!(s.xi(), 0.5);
        assert_eq!(s.advance(0.0).unwrap().xi(), 0.5);
        let mut s = MiState::new();
        for v in [1.0, 2.0, 3.0] {
            let next = s.advance(v).unwrap();
            assert!(next.xi() >= s.xi());
            s = next;
        }
        assert_eq!(s.xi(), 6.0);
        assert!(MiState::new().advance(-1e-3).is_err());
    }

    #[test]
    fn ei_unit_values() {
        let at_best = ei_value(0.3, 1.0, 0.3);
        assert!((at_best - 1.0 / (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-9);
        assert!((at_best - 0.398942).abs() < 1e-6);
        assert_eq!(ei_value(1.7, 0.0, 1.0), 1.7 - 1.0);
        assert_eq!(ei_value(0.3, 0.0, 1.0), 0.0);
    }

    #[test]
    fn ei_small_sigma_limit() {
        for d in [-0.7, -0.1, 0.0, 0.2, 0.7] {
            let ei = ei_value(d, 1e-12, 0.0);
            assert!((ei - d.max(0.0)).abs() <= 1e-4);
        }
    }

    #[test]
    fn ucb_unit_values() {
        assert_eq!(ucb_value(1.0, 4.0, 1.0), 3.0);
        assert_eq!(ucb_value(1.0, 4.0, 0.0), 1.0);
        assert_eq!(ucb_value(1.0, 0.0, 9.0), 1.0);
    }

    #[test]
    fn mi_with_zero_xi_equals_ucb() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let mu = rng.gen_range(-5.0..5.0);
            let var = rng.gen_range(0.0..4.0);
            let nu = rng.gen_range(0.0..10.0);
            assert!((mi_value(mu, var, &MiState::new(), nu) - ucb_value(mu, var, nu)).abs() <= 1e-12);
        }
    }

    #[test]
    fn monotone_in_mean_and_variance() {
        let s = MiState::new().advance(0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..500 {
            let mu = rng.gen_range(-3.0..3.0);
            let var = rng.gen_range(0.0..3.0);
            let (dm, dv) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            assert!(mi_value(mu + dm, var, &s, 2.0) >= mi_value(mu, var, &s, 2.0));
            assert!(mi_value(mu, var + dv, &s, 2.0) >= mi_value(mu, var, &s, 2.0));
            assert!(ucb_value(mu + dm, var, 2.0) >= ucb_value(mu, var, 2.0));
            assert!(ucb_value(mu, var + dv, 2.0) >= ucb_value(mu, var, 2.0));
            assert!(ei_value(mu + dm, var, 0.5) >= ei_value(mu, var, 0.5));
            assert!(ei_value(mu, var + dv, 0.5) >= ei_value(mu, var, 0.5) - 1e-15);
            assert!(ei_value(mu, var, 0.5) >= 0.0);
        }
    }

    fn moments_program(
        config: AcquisitionConfig,
        state: MiState,
        best: f64,
    ) -> impl Fn(&mut Tape, &ParamVars) -> Result<Var> {
        move |tape: &mut Tape, p: &ParamVars| {
            let post = PosteriorVars {
                mean: p.get("mean")?,
                variance: p.get("variance")?,
            };
            let a = acquisition_var(tape, &config, &post, &state, best)?;
            let w = tape.constant(Matrix::row_vector(vec![0.7, -1.3, 0.4]))?;
            let aw = tape.mul(a, w)?;
            tape.sum(aw)
        }
    }

    #[test]
    fn tape_values_match_scalar_functions_and_gradients_check() {
        let layout = Layout::builder().push("mean", 1, 3).push("variance", 1, 3).build();
        let point =
            ParameterVector::from_values(layout, vec![0.2, -0.5, 1.1, 0.3, 1.7, 0.05]).unwrap();
        let state = MiState::new().advance(0.6).unwrap();
        for kind in [AcquisitionKind::Mi, AcquisitionKind::Ei, AcquisitionKind::Ucb] {
            let config = AcquisitionConfig::new(kind, 2.5).unwrap();
            let program = moments_program(config, state, 0.4);
            let value = crate::diffmath::evaluate(&program, &point).unwrap();
            let (m, v) = (point.get("mean").unwrap(), point.get("variance").unwrap());
            let expected: f64 = [0.7, -1.3, 0.4]
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    w * match kind {
                        AcquisitionKind::Mi => mi_value(m[i], v[i], &state, 2.5),
                        AcquisitionKind::Ei => ei_value(m[i], v[i], 0.4),
                        AcquisitionKind::Ucb => ucb_value(m[i], v[i], 2.5),
                    }
                })
                .sum();
            assert!((value - expected).abs() < 1e-12, "{kind}");
            let report = finite_difference_check(&program, &point, 1e-5, 1e-6).unwrap();
            assert!(report.passed, "{kind}: {:?}", report.worst());
        }
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("MI".parse::<AcquisitionKind>().unwrap(), AcquisitionKind::Mi);
        assert!("pi".parse::<AcquisitionKind>().is_err());
        assert!((DEFAULT_NU - 693_147.180_559_945_3).abs() < 1e-6);
    }
}
