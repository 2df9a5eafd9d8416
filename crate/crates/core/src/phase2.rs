//! Phase II: wild-bootstrap test of the inferred direction.
//!
//! With the h-matrix of the held-out triple fixed, each bootstrap draw uses
//! normalized exponential multipliers `ζ_i = m ξ_i / Σ ξ_j` and computes
//!
//! ```text
//! T_b = Σ_{i≠j} (ζ_i ζ_j - 1) h_ij / (2 m (m-1))
//! ```
//!
//! The threshold `F·τ_α` is the `k`-th smallest of `{F·T_b}` with
//! `k = ⌈(1-α) B⌉`, and the test rejects when `F·d_hat > F·τ_α`.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::estimator::{h_matrix, u_statistic, Direction, HMatrix, SampleTriple};
use crate::kernels::KernelParams;
use crate::rng::{purpose, substream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestConfig {
    pub alpha: f64,
    pub bootstraps: usize,
    pub seed: u64,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self { alpha: 0.05, bootstraps: 500, seed: 0 }
    }
}

impl TestConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AmdError::Input(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.bootstraps == 0 {
            return Err(AmdError::Input("need at least one bootstrap draw".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    #[serde(rename = "F")]
    pub direction: Direction,
    pub statistic: f64,
    pub tau: f64,
    pub reject: bool,
    pub p_value: f64,
    pub bootstrap_stats: Vec<f64>,
    /// Set only by the two-sided variant when both one-sided tests fire.
    pub double_rejection: bool,
}

/// `ζ_i = m ξ_i / Σ ξ_j` with `ξ_i = -ln(1 - u_i)` exponential.
pub fn bootstrap_weights<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Result<Array1<f64>> {
    if m < 2 {
        return Err(AmdError::Input(format!("bootstrap weights need m >= 2, got {m}")));
    }
    for _ in 0..2 {
        let xi: Array1<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        if let Ok(z) = normalize_weights(xi) {
            return Ok(z);
        }
    }
    Err(AmdError::Numeric("exponential draws summed to zero twice".into()))
}

/// Rescale nonnegative draws so they sum to their count.
pub fn normalize_weights(xi: Array1<f64>) -> Result<Array1<f64>> {
    let total: f64 = xi.sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(AmdError::Numeric(format!("weight total {total} cannot be normalized")));
    }
    let m = xi.len() as f64;
    Ok(xi.mapv(|v| m * v / total))
}

/// `Σ_{i≠j} (ζ_i ζ_j - 1) h_ij / (2 m (m-1))`.
pub fn bootstrap_statistic(h: &HMatrix, zeta: &Array1<f64>) -> Result<f64> {
    let m = h.m();
    if zeta.len() != m {
        return Err(AmdError::Dimension(format!("{} weights for an {m}x{m} h-matrix", zeta.len())));
    }
    let hv = h.values();
    let mut s = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            s += (zeta[i] * zeta[j] - 1.0) * hv[[i, j]];
        }
    }
    Ok(s / (m * (m - 1)) as f64)
}

/// `k = ⌈(1-α) B⌉`, clamped to `[1, B]`. A tiny tolerance keeps values such
/// as `0.95 · 100` from rounding up to the next integer.
pub fn quantile_rank(alpha: f64, b: usize) -> usize {
    let k = ((1.0 - alpha) * b as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(b)
}

/// `τ_α` such that `F·τ_α` is the `k`-th smallest of `{F·T_b}`.
pub fn threshold(stats: &[f64], direction: Direction, alpha: f64) -> Result<f64> {
    if stats.is_empty() {
        return Err(AmdError::Input("no bootstrap statistics".into()));
    }
    let s = direction.sign();
    let mut oriented: Vec<f64> = stats.iter().map(|t| s * t).collect();
    oriented.sort_by(f64::total_cmp);
    let k = quantile_rank(alpha, stats.len());
    Ok(s * oriented[k - 1])
}

/// `(1 + #{F·T_b >= F·d_hat}) / (B + 1)`.
pub fn p_value(stats: &[f64], direction: Direction, statistic: f64) -> f64 {
    let s = direction.sign();
    let exceed = stats.iter().filter(|t| s * **t >= s * statistic).count();
    (1 + exceed) as f64 / (stats.len() + 1) as f64
}

/// `B` bootstrap statistics; draw `b` uses the substream `(seed, BOOTSTRAP, b)`.
pub fn bootstrap_distribution(h: &HMatrix, cfg: &TestConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    (0..cfg.bootstraps)
        .map(|b| {
            let mut rng = substream(cfg.seed, &[purpose::BOOTSTRAP, b as u64]);
            let zeta = bootstrap_weights(h.m(), &mut rng)?;
            bootstrap_statistic(h, &zeta)
        })
        .collect()
}

/// One-sided test of `F·d > 0` on a precomputed h-matrix.
pub fn test_h_matrix(h: &HMatrix, direction: Direction, cfg: &TestConfig) -> Result<TestOutcome> {
    let stats = bootstrap_distribution(h, cfg)?;
    let statistic = u_statistic(h);
    let tau = threshold(&stats, direction, cfg.alpha)?;
    let s = direction.sign();
    Ok(TestOutcome {
        direction,
        statistic,
        tau,
        reject: s * statistic > s * tau,
        p_value: p_value(&stats, direction, statistic),
        bootstrap_stats: stats,
        double_rejection: false,
    })
}

/// Test the direction inferred in Phase I on the held-out triple. The caller
/// is responsible for keeping `test_triple` disjoint from the training data.
pub fn run_phase2(test_triple: &SampleTriple, params: &KernelParams, direction: Direction, cfg: &TestConfig) -> Result<TestOutcome> {
    cfg.validate()?;
    let h = h_matrix(test_triple, params)?;
    test_h_matrix(&h, direction, cfg)
}

/// Test a prespecified direction; identical mechanics to [`run_phase2`].
pub fn run_oriented(test_triple: &SampleTriple, params: &KernelParams, fixed: Direction, cfg: &TestConfig) -> Result<TestOutcome> {
    run_phase2(test_triple, params, fixed, cfg)
}

/// Both directions at level `α/2` on one set of bootstrap draws.
///
/// The reported direction is the one that rejects; with no rejection it is
/// the one with the smaller one-sided p-value (`+` on ties). The p-value is
/// `min(1, 2 · min(p₊, p₋))`.
pub fn run_amd_b(test_triple: &SampleTriple, params: &KernelParams, cfg: &TestConfig) -> Result<TestOutcome> {
    cfg.validate()?;
    let h = h_matrix(test_triple, params)?;
    two_sided_h_matrix(&h, cfg)
}

pub fn two_sided_h_matrix(h: &HMatrix, cfg: &TestConfig) -> Result<TestOutcome> {
    let stats = bootstrap_distribution(h, cfg)?;
    let statistic = u_statistic(h);
    let half = cfg.alpha / 2.0;
    let tau_plus = threshold(&stats, Direction::Plus, half)?;
    let tau_minus = threshold(&stats, Direction::Minus, half)?;
    let rej_plus = statistic > tau_plus;
    let rej_minus = -statistic > -tau_minus;
    let p_plus = p_value(&stats, Direction::Plus, statistic);
    let p_minus = p_value(&stats, Direction::Minus, statistic);

    let direction = match (rej_plus, rej_minus) {
        (true, false) => Direction::Plus,
        (false, true) => Direction::Minus,
        (true, true) => {
            if (statistic - tau_plus).abs() >= (statistic - tau_minus).abs() {
                Direction::Plus
            } else {
                Direction::Minus
            }
        }
        (false, false) => {
            if p_plus <= p_minus {
                Direction::Plus
            } else {
                Direction::Minus
            }
        }
    };
    let tau = match direction {
        Direction::Plus => tau_plus,
        Direction::Minus => tau_minus,
    };
    Ok(TestOutcome {
        direction,
        statistic,
        tau,
        reject: rej_plus || rej_minus,
        p_value: (2.0 * p_plus.min(p_minus)).min(1.0),
        bootstrap_stats: stats,
        double_rejection: rej_plus && rej_minus,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::GaussianParams;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array, Array2};
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn gauss(s: f64) -> KernelParams {
        KernelParams::Gaussian(GaussianParams::from_bandwidth(s).unwrap())
    }

    fn random_h(m: usize, seed: u64) -> HMatrix {
        let mut rng = substream(seed, &[0]);
        let a = Array2::from_shape_fn((m, m), |_| rng.random_range(-1.0..1.0));
        HMatrix::from_matrix(&a + &a.t()).unwrap()
    }

    #[test]
    fn normalized_weights() {
        assert_eq!(normalize_weights(array![2.0, 2.0, 2.0]).unwrap(), array![1.0, 1.0, 1.0]);
        assert_eq!(normalize_weights(array![1.0, 3.0]).unwrap(), array![0.5, 1.5]);
        assert!(normalize_weights(array![0.0, 0.0]).is_err());
        let mut rng = substream(3, &[1]);
        for m in 2..30 {
            let z = bootstrap_weights(m, &mut rng).unwrap();
            assert!(z.iter().all(|v| *v >= 0.0));
            assert_abs_diff_eq!(z.sum(), m as f64, epsilon = 1e-10);
        }
        assert!(bootstrap_weights(1, &mut rng).is_err());
    }

    #[test]
    fn bootstrap_statistic_examples() {
        let h = random_h(7, 1);
        assert_abs_diff_eq!(bootstrap_statistic(&h, &Array1::ones(7)).unwrap(), 0.0, epsilon = 1e-16);
        let zero = HMatrix::from_matrix(Array2::zeros((4, 4))).unwrap();
        assert_eq!(bootstrap_statistic(&zero, &array![0.1, 2.0, 0.4, 1.5]).unwrap(), 0.0);
        let h2 = HMatrix::from_matrix(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_abs_diff_eq!(bootstrap_statistic(&h2, &array![0.5, 1.5]).unwrap(), -0.125, epsilon = 1e-15);
        assert!(bootstrap_statistic(&h2, &array![1.0]).is_err());
    }

    #[test]
    fn threshold_order_statistics() {
        let stats: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(threshold(&stats, Direction::Plus, 0.05).unwrap(), 95.0);
        assert_eq!(threshold(&stats, Direction::Minus, 0.05).unwrap(), 6.0);
        assert_eq!(threshold(&[0.3; 17], Direction::Plus, 0.1).unwrap(), 0.3);
        assert_eq!(quantile_rank(0.05, 300), 285);
        assert_eq!(quantile_rank(0.999, 10), 1);
    }

    #[test]
    fn equal_candidates_never_reject() {
        let mut rng = substream(4, &[0]);
        let z = Array::from_shape_fn((10, 2), |_| rng.random_range(-1.0..1.0));
        let x = Array::from_shape_fn((10, 2), |_| rng.random_range(-1.0..1.0));
        let t = SampleTriple::new(z, x.clone(), x).unwrap();
        let cfg = TestConfig { bootstraps: 50, ..TestConfig::default() };
        let out = run_phase2(&t, &gauss(1.0), Direction::Plus, &cfg).unwrap();
        assert_eq!(out.statistic, 0.0);
        assert!(out.bootstrap_stats.iter().all(|v| *v == 0.0));
        assert_eq!(out.tau, 0.0);
        assert!(!out.reject);
        assert_eq!(out.p_value, 1.0);
        let b = run_amd_b(&t, &gauss(1.0), &cfg).unwrap();
        assert!(!b.reject);
    }

    #[test]
    fn invalid_test_config() {
        let h = random_h(5, 2);
        assert!(test_h_matrix(&h, Direction::Plus, &TestConfig { alpha: 1.0, ..TestConfig::default() }).is_err());
        assert!(test_h_matrix(&h, Direction::Plus, &TestConfig { bootstraps: 0, ..TestConfig::default() }).is_err());
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let h = random_h(12, 5);
        let cfg = TestConfig { bootstraps: 64, seed: 11, ..TestConfig::default() };
        assert_eq!(test_h_matrix(&h, Direction::Minus, &cfg).unwrap(), test_h_matrix(&h, Direction::Minus, &cfg).unwrap());
    }

    #[test]
    fn amd_b_rejection_implies_one_sided_rejection() {
        for seed in 0..200 {
            let mut h = random_h(8, seed);
            // shift the statistic off zero
            h = HMatrix::from_matrix(h.values() + 0.3 * ((seed % 3) as f64 - 1.0)).unwrap();
            let cfg = TestConfig { bootstraps: 99, seed, alpha: 0.1 };
            let b = two_sided_h_matrix(&h, &cfg).unwrap();
            if b.reject {
                let one = test_h_matrix(&h, b.direction, &cfg).unwrap();
                assert!(one.reject, "seed {seed}");
                assert!(b.direction.sign() * b.tau >= b.direction.sign() * one.tau);
            }
        }
    }

    proptest! {
        #[test]
        fn quantile_monotone_in_alpha(seed in 0u64..1000, a1 in 0.01f64..0.5, gap in 0.0f64..0.4) {
            let mut rng = substream(seed, &[7]);
            let stats: Vec<f64> = (0..57).map(|_| rng.random_range(-1.0..1.0)).collect();
            for dir in [Direction::Plus, Direction::Minus] {
                let t1 = dir.sign() * threshold(&stats, dir, a1).unwrap();
                let t2 = dir.sign() * threshold(&stats, dir, a1 + gap).unwrap();
                prop_assert!(t1 >= t2);
            }
        }

        #[test]
        fn decision_scale_invariant(seed in 0u64..1000, c in 0.1f64..10.0) {
            let h = random_h(9, seed);
            let hc = HMatrix::from_matrix(h.values() * c).unwrap();
            let cfg = TestConfig { bootstraps: 40, seed, alpha: 0.05 };
            for dir in [Direction::Plus, Direction::Minus] {
                let a = test_h_matrix(&h, dir, &cfg).unwrap();
                let b = test_h_matrix(&hc, dir, &cfg).unwrap();
                prop_assert_eq!(a.reject, b.reject);
                prop_assert_eq!(a.p_value, b.p_value);
                prop_assert!((b.statistic - c * a.statistic).abs() < 1e-12);
                prop_assert!((b.tau - c * a.tau).abs() < 1e-12);
            }
        }

        #[test]
        fn reject_agrees_with_p_value(seed in 0u64..2000) {
            let h = random_h(6, seed);
            let cfg = TestConfig { bootstraps: 39, seed, alpha: 0.1 };
            let out = test_h_matrix(&h, Direction::Plus, &cfg).unwrap();
            let b = cfg.bootstraps;
            let k = quantile_rank(cfg.alpha, b);
            prop_assert!(out.p_value > 0.0 && out.p_value <= 1.0);
            if out.reject {
                prop_assert!(out.p_value <= (b + 1 - k + 1) as f64 / (b + 1) as f64);
            }
        }
    }
}
