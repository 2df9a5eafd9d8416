//! Benchmark distributions and closed-form population values.
//!
//! The anchor of the mixture benchmark is `U = ν P + (1 - ν) Q`. Because the
//! kernel mean embedding is linear in the distribution,
//!
//! ```text
//! d^k(U, P, Q) = (ν - 1/2) · |mu_P - mu_Q|²_H
//! ```
//!
//! so `P` is closer for `ν > 1/2`, `Q` for `ν < 1/2`, and the two are
//! equally close at `ν = 1/2` for every kernel.

use ndarray::{Array1, Array2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::estimator::{Direction, DiscreteDistribution};
use crate::kernels::GaussianParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DistributionSpec {
    IsotropicGaussian { mean: Vec<f64>, stdev: f64 },
    IsotropicLaplace { location: Vec<f64>, scale: f64 },
    Discrete(DiscreteDistribution),
}

impl DistributionSpec {
    pub fn gaussian(mean: Vec<f64>, stdev: f64) -> Result<Self> {
        let spec = DistributionSpec::IsotropicGaussian { mean, stdev };
        spec.validate()?;
        Ok(spec)
    }

    pub fn laplace(location: Vec<f64>, scale: f64) -> Result<Self> {
        let spec = DistributionSpec::IsotropicLaplace { location, scale };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::IsotropicGaussian { mean, .. } => mean.len(),
            DistributionSpec::IsotropicLaplace { location, .. } => location.len(),
            DistributionSpec::Discrete(d) => d.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (centre, scale) = match self {
            DistributionSpec::IsotropicGaussian { mean, stdev } => (mean, *stdev),
            DistributionSpec::IsotropicLaplace { location, scale } => (location, *scale),
            DistributionSpec::Discrete(_) => return Ok(()),
        };
        if centre.is_empty() {
            return Err(AmdError::Input("distribution has dimension 0".into()));
        }
        if centre.iter().any(|v| !v.is_finite()) {
            return Err(AmdError::Input("distribution centre must be finite".into()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(AmdError::Input(format!("scale must be positive, got {scale}")));
        }
        Ok(())
    }

    fn sample_row<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64], picker: Option<&WeightedIndex<f64>>) {
        match self {
            DistributionSpec::IsotropicGaussian { mean, stdev } => {
                for (o, mu) in out.iter_mut().zip(mean) {
                    let n: f64 = rng.sample(StandardNormal);
                    *o = mu + stdev * n;
                }
            }
            DistributionSpec::IsotropicLaplace { location, scale } => {
                for (o, mu) in out.iter_mut().zip(location) {
                    // inverse CDF on u in (-1/2, 1/2)
                    let u: f64 = rng.random::<f64>() - 0.5;
                    *o = mu - scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
                }
            }
            DistributionSpec::Discrete(d) => {
                let idx = picker.expect("discrete sampler").sample(rng);
                for (o, v) in out.iter_mut().zip(d.support().row(idx)) {
                    *o = *v;
                }
            }
        }
    }

    fn picker(&self) -> Option<WeightedIndex<f64>> {
        match self {
            DistributionSpec::Discrete(d) => {
                Some(WeightedIndex::new(d.weights().iter().copied()).expect("validated weights"))
            }
            _ => None,
        }
    }

    /// `m` i.i.d. rows.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Array2<f64> {
        let d = self.dim();
        let picker = self.picker();
        let mut out = Array2::zeros((m, d));
        for mut row in out.rows_mut() {
            self.sample_row(rng, row.as_slice_mut().expect("standard layout"), picker.as_ref());
        }
        out
    }
}

/// `U = ν P + (1 - ν) Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub p: DistributionSpec,
    pub q: DistributionSpec,
    pub nu: f64,
}

impl MixtureSpec {
    pub fn new(p: DistributionSpec, q: DistributionSpec, nu: f64) -> Result<Self> {
        p.validate()?;
        q.validate()?;
        if p.dim() != q.dim() {
            return Err(AmdError::Dimension(format!("P has dim {}, Q has dim {}", p.dim(), q.dim())));
        }
        if !(0.0..=1.0).contains(&nu) {
            return Err(AmdError::Input(format!("mixture weight must lie in [0, 1], got {nu}")));
        }
        Ok(Self { p, q, nu })
    }

    pub fn dim(&self) -> usize {
        self.p.dim()
    }

    /// `m` rows of the mixture: each row comes from `P` with probability `ν`,
    /// else from `Q`. At `ν ∈ {0, 1}` no component draws are spent, so the
    /// output matches sampling the surviving component directly.
    pub fn sample<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Array2<f64> {
        if self.nu >= 1.0 {
            return self.p.sample(m, rng);
        }
        if self.nu <= 0.0 {
            return self.q.sample(m, rng);
        }
        let (pp, pq) = (self.p.picker(), self.q.picker());
        let mut out = Array2::zeros((m, self.dim()));
        for mut row in out.rows_mut() {
            let slot = row.as_slice_mut().expect("standard layout");
            if rng.random::<f64>() < self.nu {
                self.p.sample_row(rng, slot, pp.as_ref());
            } else {
                self.q.sample_row(rng, slot, pq.as_ref());
            }
        }
        out
    }

    /// Sign of the population `d^k` for any characteristic kernel, `None` at
    /// `ν = 1/2` or when `P = Q`.
    pub fn true_direction(&self) -> Option<Direction> {
        if self.p == self.q || self.nu == 0.5 {
            None
        } else if self.nu > 0.5 {
            Some(Direction::Plus)
        } else {
            Some(Direction::Minus)
        }
    }
}

/// `E exp(-|a-b|²/(2σ²))` for `a ~ N(mu_a, s_a² I)`, `b ~ N(mu_b, s_b² I)`
/// independent.
fn gaussian_expectation(sigma2: f64, mu_a: &[f64], s_a: f64, mu_b: &[f64], s_b: f64) -> f64 {
    let d = mu_a.len() as f64;
    let total = sigma2 + s_a * s_a + s_b * s_b;
    let dist2: f64 = mu_a.iter().zip(mu_b).map(|(a, b)| (a - b) * (a - b)).sum();
    (sigma2 / total).powf(d / 2.0) * (-dist2 / (2.0 * total)).exp()
}

/// Population `d^k(U, P, Q)` for the Gaussian kernel and a mixture of two
/// isotropic Gaussians, from the expansion
/// `E k(z,x) - E k(z,y) - E k(x,x')/2 + E k(y,y')/2`.
pub fn closed_form_dk(kernel: &GaussianParams, mix: &MixtureSpec) -> Result<f64> {
    let (
        DistributionSpec::IsotropicGaussian { mean: mp, stdev: sp },
        DistributionSpec::IsotropicGaussian { mean: mq, stdev: sq },
    ) = (&mix.p, &mix.q)
    else {
        return Err(AmdError::Unsupported("closed form needs isotropic Gaussian P and Q".into()));
    };
    let s2 = kernel.bandwidth().powi(2);
    let kpp = gaussian_expectation(s2, mp, *sp, mp, *sp);
    let kqq = gaussian_expectation(s2, mq, *sq, mq, *sq);
    let kpq = gaussian_expectation(s2, mp, *sp, mq, *sq);
    let nu = mix.nu;
    let e_zx = nu * kpp + (1.0 - nu) * kpq;
    let e_zy = nu * kpq + (1.0 - nu) * kqq;
    Ok(e_zx - e_zy - 0.5 * kpp + 0.5 * kqq)
}

/// `P = N(0, I_d)`, `Q = N(shift · e_1, I_d)`.
pub fn gaussian_mean_shift(d: usize, shift: f64) -> Result<(DistributionSpec, DistributionSpec)> {
    if d == 0 {
        return Err(AmdError::Input("dimension must be positive".into()));
    }
    let mut mq = vec![0.0; d];
    mq[0] = shift;
    Ok((DistributionSpec::gaussian(vec![0.0; d], 1.0)?, DistributionSpec::gaussian(mq, 1.0)?))
}

/// `P = Laplace(0, 1/√2)` per coordinate (unit variance), `Q = N(0, I_d)`:
/// same first two moments, different shape.
pub fn laplace_vs_gaussian(d: usize) -> Result<(DistributionSpec, DistributionSpec)> {
    Ok((
        DistributionSpec::laplace(vec![0.0; d], std::f64::consts::FRAC_1_SQRT_2)?,
        DistributionSpec::gaussian(vec![0.0; d], 1.0)?,
    ))
}

/// Row-wise mean, for quick sanity checks on generated data.
pub fn column_means(a: &Array2<f64>) -> Array1<f64> {
    a.mean_axis(ndarray::Axis(0)).unwrap_or_else(|| Array1::zeros(a.ncols()))
}
