//! Summary statistics and the paired sign test.

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation over `sqrt(n)`);
/// 0 for fewer than two values.
pub fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    let ln_choose = |j: usize| {
        libm::lgamma(n as f64 + 1.0) - libm::lgamma(j as f64 + 1.0) - libm::lgamma((n - j) as f64 + 1.0)
    };
    (k..=n).map(|j| (ln_choose(j) + ln_half_n).exp()).sum::<f64>().min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs where the first value is strictly lower.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided p-value for "first is lower than second"; ties dropped.
    pub p_value: f64,
}

/// Paired one-sided sign test of `a < b`.
pub fn sign_test(a: &[f64], b: &[f64]) -> SignTest {
    assert_eq!(a.len(), b.len(), "sign test needs paired samples");
    let wins = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let losses = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let ties = a.len() - wins - losses;
    SignTest {
        wins,
        losses,
        ties,
        p_value: binomial_upper_tail(wins, wins + losses),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tail_values() {
        assert_eq!(binomial_upper_tail(0, 5), 1.0);
        assert!((binomial_upper_tail(5, 5) - 1.0 / 32.0).abs() < 1e-15);
        assert!((binomial_upper_tail(4, 5) - 6.0 / 32.0).abs() < 1e-14);
        // 15 of 20: sum_{j>=15} C(20, j) / 2^20 = 21700 / 1048576
        assert!((binomial_upper_tail(15, 20) - 21700.0 / 1048576.0).abs() < 1e-12);
        assert_eq!(binomial_upper_tail(3, 2), 0.0);
    }

    #[test]
    fn sign_test_counts() {
        let t = sign_test(&[1.0, 2.0, 3.0, 4.0], &[2.0, 2.0, 4.0, 1.0]);
        assert_eq!((t.wins, t.losses, t.ties), (2, 1, 1));
        assert!((t.p_value - 0.5).abs() < 1e-12);
        assert_eq!(sign_test(&[], &[]).p_value, 1.0);
    }

    #[test]
    fn mean_and_stderr() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert!((std_error(&[1.0, 2.0, 3.0]) - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(std_error(&[4.0]), 0.0);
    }
}
