//! The U-statistic estimator of `d^k(U, P, Q)` and its relatives.
//!
//! With `w_i = (z_i, x_i, y_i)` the estimator is a second-order U-statistic
//!
//! ```text
//! d_hat = sum_{i != j} h(w_i, w_j) / (2 m (m-1))
//! h_ij  = k(z_i,x_j) + k(z_j,x_i) - k(z_i,y_j) - k(z_j,y_i) - k(x_i,x_j) + k(y_i,y_j)
//! ```
//!
//! Summing the six terms over `i != j` collapses them into four off-diagonal
//! block sums, which is how the gradient is assembled:
//!
//! ```text
//! 2 m (m-1) d_hat = 2 S(Z,X) - 2 S(Z,Y) - S(X,X) + S(Y,Y)
//! ```

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::kernels::{gram_block, weighted_blocks_value_and_gradient, KernelParams, PairPattern, ParamGradient, WeightedBlock};

/// Anchor sample `z` and candidate samples `x`, `y`, all `m × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleTriple {
    z: Array2<f64>,
    x: Array2<f64>,
    y: Array2<f64>,
}

impl SampleTriple {
    pub fn new(z: Array2<f64>, x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        let (m, d) = z.dim();
        if x.dim() != (m, d) || y.dim() != (m, d) {
            return Err(AmdError::Dimension(format!(
                "sample shapes differ: Z {:?}, X {:?}, Y {:?}",
                z.dim(),
                x.dim(),
                y.dim()
            )));
        }
        if m < 2 {
            return Err(AmdError::Input(format!("need at least 2 rows per sample, got {m}")));
        }
        if d < 1 {
            return Err(AmdError::Input("samples have no columns".into()));
        }
        if z.iter().chain(x.iter()).chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(AmdError::Input("samples contain non-finite values".into()));
        }
        Ok(Self { z, x, y })
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn y(&self) -> ArrayView2<'_, f64> {
        self.y.view()
    }

    pub fn m(&self) -> usize {
        self.z.nrows()
    }

    pub fn d(&self) -> usize {
        self.z.ncols()
    }

    /// The triple with the roles of `X` and `Y` exchanged.
    pub fn swapped(&self) -> Self {
        Self { z: self.z.clone(), x: self.y.clone(), y: self.x.clone() }
    }

    pub fn into_parts(self) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        (self.z, self.x, self.y)
    }
}

/// Symmetric `m × m` matrix of `h_ij`; the diagonal is zero and unused.
#[derive(Debug, Clone, PartialEq)]
pub struct HMatrix {
    values: Array2<f64>,
}

impl HMatrix {
    /// Wrap a precomputed matrix. The matrix must be square with `m >= 2`;
    /// the diagonal is ignored.
    pub fn from_matrix(mut values: Array2<f64>) -> Result<Self> {
        let (r, c) = values.dim();
        if r != c || r < 2 {
            return Err(AmdError::Dimension(format!("h-matrix must be square with m >= 2, got {r}x{c}")));
        }
        for i in 0..r {
            values[[i, i]] = 0.0;
        }
        Ok(Self { values })
    }

    pub fn m(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    /// Mean of `h_ij` over all ordered pairs `i != j`.
    pub fn offdiag_mean(&self) -> f64 {
        let m = self.m();
        2.0 * upper_sum(&self.values) / (m * (m - 1)) as f64
    }

    /// `(1/(m-1)) sum_{j != i} h_ij` for every row.
    pub fn row_means(&self) -> Array1<f64> {
        let m = self.m();
        self.values
            .rows()
            .into_iter()
            .map(|r| r.iter().sum::<f64>() / (m - 1) as f64)
            .collect()
    }
}

/// `sum_{i<j} a_ij`, row by row, left to right.
fn upper_sum(a: &Array2<f64>) -> f64 {
    let m = a.nrows();
    let mut s = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            s += a[[i, j]];
        }
    }
    s
}

fn check_kernel(t: &SampleTriple, params: &KernelParams) -> Result<()> {
    match params.input_dim() {
        Some(k) if k != t.d() => Err(AmdError::Dimension(format!("kernel expects dim {k}, samples have {}", t.d()))),
        _ => Ok(()),
    }
}

/// Assemble the h-matrix from the four distinct kernel blocks.
pub fn h_matrix(t: &SampleTriple, params: &KernelParams) -> Result<HMatrix> {
    check_kernel(t, params)?;
    let kzx = gram_block(params, t.z(), t.x())?;
    let kzy = gram_block(params, t.z(), t.y())?;
    let kxx = gram_block(params, t.x(), t.x())?;
    let kyy = gram_block(params, t.y(), t.y())?;
    let m = t.m();
    // Grouped so that X == Y cancels exactly.
    let h = Array2::from_shape_fn((m, m), |(i, j)| {
        if i == j {
            0.0
        } else {
            (kzx[[i, j]] - kzy[[i, j]]) + (kzx[[j, i]] - kzy[[j, i]]) + (kyy[[i, j]] - kxx[[i, j]])
        }
    });
    Ok(HMatrix { values: h })
}

/// `d_hat = sum_{i<j} h_ij / (m (m-1))`.
pub fn u_statistic(h: &HMatrix) -> f64 {
    let m = h.m();
    upper_sum(&h.values) / (m * (m - 1)) as f64
}

/// `d_hat` and its exact gradient with respect to the kernel parameters.
pub fn statistic_and_gradient(t: &SampleTriple, params: &KernelParams) -> Result<(f64, ParamGradient)> {
    check_kernel(t, params)?;
    let m = t.m();
    let c = 1.0 / (2.0 * (m * (m - 1)) as f64);
    let sets = [t.z(), t.x(), t.y()];
    let blocks = [
        WeightedBlock { a: 0, b: 1, pattern: PairPattern::OffDiagonal(2.0 * c) },
        WeightedBlock { a: 0, b: 2, pattern: PairPattern::OffDiagonal(-2.0 * c) },
        WeightedBlock { a: 1, b: 1, pattern: PairPattern::OffDiagonal(-c) },
        WeightedBlock { a: 2, b: 2, pattern: PairPattern::OffDiagonal(c) },
    ];
    weighted_blocks_value_and_gradient(params, &sets, &blocks)
}

/// A hypothesis direction: `Plus` means `P` is closer to the anchor
/// (`d > 0`), `Minus` means `Q` is (`d < 0`). The same type names the two
/// optimization branches and the inferred `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Plus,
    Minus,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Plus => 1.0,
            Direction::Minus => -1.0,
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Direction::Plus => 1,
            Direction::Minus => -1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::Plus => Direction::Minus,
            Direction::Minus => Direction::Plus,
        }
    }

    /// `Plus` for `v >= 0`.
    pub fn of(v: f64) -> Self {
        if v >= 0.0 {
            Direction::Plus
        } else {
            Direction::Minus
        }
    }
}

impl Serialize for Direction {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Direction {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match i8::deserialize(d)? {
            1 => Ok(Direction::Plus),
            -1 => Ok(Direction::Minus),
            v => Err(serde::de::Error::custom(format!("direction must be +1 or -1, got {v}"))),
        }
    }
}

/// Optimization branch; branch `Plus` maximizes `d_hat - λ d_hat(aug)²`,
/// branch `Minus` maximizes `-d_hat - λ d_hat(aug)²`.
pub type Branch = Direction;

/// Maximize-form branch objective and its gradient.
///
/// The augmented triple only enters through `λ d_hat(aug)²`; at `λ = 0` it
/// is not evaluated at all.
pub fn branch_objective_and_gradient(
    t: &SampleTriple,
    aug: &SampleTriple,
    lambda: f64,
    branch: Branch,
    params: &KernelParams,
) -> Result<(f64, ParamGradient)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(AmdError::Input(format!("lambda must be finite and nonnegative, got {lambda}")));
    }
    if aug.d() != t.d() {
        return Err(AmdError::Dimension("augmented triple has a different dimension".into()));
    }
    let s = branch.sign();
    let (dm, gm) = statistic_and_gradient(t, params)?;
    let mut value = s * dm;
    let mut grad = gm.scaled(s);
    if lambda > 0.0 {
        let (da, ga) = statistic_and_gradient(aug, params)?;
        value -= lambda * da * da;
        grad.add_scaled(&ga, -2.0 * lambda * da);
    }
    finite_or_err(value, grad)
}

/// Objective of the squared-statistic ablation, `d_hat² - λ d_hat(aug)²`.
pub fn squared_objective_and_gradient(
    t: &SampleTriple,
    aug: Option<&SampleTriple>,
    lambda: f64,
    params: &KernelParams,
) -> Result<(f64, ParamGradient)> {
    let (dm, gm) = statistic_and_gradient(t, params)?;
    let mut value = dm * dm;
    let mut grad = gm.scaled(2.0 * dm);
    if let (Some(aug), true) = (aug, lambda > 0.0) {
        let (da, ga) = statistic_and_gradient(aug, params)?;
        value -= lambda * da * da;
        grad.add_scaled(&ga, -2.0 * lambda * da);
    }
    finite_or_err(value, grad)
}

fn finite_or_err(value: f64, grad: ParamGradient) -> Result<(f64, ParamGradient)> {
    if !value.is_finite() || !grad.is_finite() {
        return Err(AmdError::Numeric("non-finite objective".into()));
    }
    Ok((value, grad))
}

/// Plug-in estimate of the asymptotic variance `4 (E[h1(w)²] - E[h]²)`,
/// where `h1(w) = E_{w'} h(w, w')`. Clamped at zero.
///
/// This is the variance of `√m · mean_{i≠j} h_ij`, i.e. of `√m · 2 d_hat`.
pub fn variance_estimate(h: &HMatrix) -> f64 {
    let m = h.m();
    let r = h.row_means();
    let mean_sq = r.iter().map(|v| v * v).sum::<f64>() / m as f64;
    let mean = h.offdiag_mean();
    (4.0 * (mean_sq - mean * mean)).max(0.0)
}

/// `√m · 2 d_hat / σ_hat`, asymptotically standard normal when `d = 0` and
/// `h` is non-degenerate. `None` when the variance estimate is zero.
pub fn standardized_statistic(h: &HMatrix) -> Option<f64> {
    let var = variance_estimate(h);
    if var <= 0.0 {
        return None;
    }
    Some((h.m() as f64).sqrt() * 2.0 * u_statistic(h) / var.sqrt())
}

/// Finitely supported distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteDistribution {
    support: Array2<f64>,
    weights: Array1<f64>,
}

impl DiscreteDistribution {
    pub fn new(support: Array2<f64>, weights: Array1<f64>) -> Result<Self> {
        if support.nrows() != weights.len() || weights.is_empty() {
            return Err(AmdError::Dimension(format!(
                "{} support points but {} weights",
                support.nrows(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(AmdError::Input("weights must be finite and nonnegative".into()));
        }
        let total = weights.sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(AmdError::Input(format!("weights sum to {total}, not 1")));
        }
        if support.iter().any(|v| !v.is_finite()) {
            return Err(AmdError::Input("support contains non-finite values".into()));
        }
        Ok(Self { support, weights })
    }

    pub fn point_mass(point: Array1<f64>) -> Self {
        let d = point.len();
        Self { support: point.into_shape_with_order((1, d)).expect("row"), weights: Array1::ones(1) }
    }

    pub fn support(&self) -> ArrayView2<'_, f64> {
        self.support.view()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.support.ncols()
    }
}

/// `E k(a, b)` for independent `a ~ A`, `b ~ B`.
pub(crate) fn expected_kernel(params: &KernelParams, a: &DiscreteDistribution, b: &DiscreteDistribution) -> Result<f64> {
    let k = gram_block(params, a.support(), b.support())?;
    Ok(a.weights.dot(&k.dot(&b.weights)))
}

/// Exact population value
/// `d^k = E k(z,x) - E k(z,y) - E k(x,x')/2 + E k(y,y')/2`.
pub fn population_dk_discrete(
    params: &KernelParams,
    u: &DiscreteDistribution,
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
) -> Result<f64> {
    if u.dim() != p.dim() || u.dim() != q.dim() {
        return Err(AmdError::Dimension("distributions have different dimensions".into()));
    }
    let zx = expected_kernel(params, u, p)?;
    let zy = expected_kernel(params, u, q)?;
    let xx = expected_kernel(params, p, p)?;
    let yy = expected_kernel(params, q, q)?;
    Ok(zx - zy - 0.5 * xx + 0.5 * yy)
}

/// Anchor-based maximum discrepancy over a finite kernel set:
/// `max_k |d^k(U, P, Q)|`.
pub fn anchor_discrepancy_discrete(
    kernels: &[KernelParams],
    u: &DiscreteDistribution,
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
) -> Result<f64> {
    kernels
        .iter()
        .map(|k| population_dk_discrete(k, u, p, q).map(f64::abs))
        .try_fold(0.0f64, |acc, v| v.map(|v| acc.max(v)))
}
