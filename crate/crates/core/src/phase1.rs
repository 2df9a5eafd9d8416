//! Phase I: learn a kernel for each hypothesis direction and infer `F`.
//!
//! Both branches start from the same median-heuristic kernel. Every epoch
//! draws one augmented triple (shared by the two branches) whose candidate
//! samples are identically distributed 50/50 blends of `X` and `Y`, so its
//! statistic has expectation zero; its square is the regularizer. Branch
//! `+` ascends `d_hat - λ d_hat(aug)²`, branch `-` ascends
//! `-d_hat - λ d_hat(aug)²`. The final kernel is whichever branch reaches
//! the larger `|d_hat|` on the training triple, and its branch is `F`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::estimator::{
    branch_objective_and_gradient, h_matrix, squared_objective_and_gradient, u_statistic, Branch, SampleTriple,
};
use crate::kernels::{init_deep_kernel, median_heuristic, KernelFamily, KernelParams, ParamGradient};
use crate::rng::{purpose, substream};

pub use crate::estimator::Direction;

/// Phase-I variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Two branches with the augmentation regularizer.
    #[serde(rename = "AMD")]
    Amd,
    /// Two branches, no augmentation (`λ = 0`).
    #[serde(rename = "AMD-NA")]
    NoAugmentation,
    /// One branch ascending `d_hat² - λ d_hat(aug)²`.
    #[serde(rename = "AMD-SQ")]
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    PlainGradient,
    AdaptiveMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Config {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub mode: Mode,
    pub kernel_family: KernelFamily,
    pub optimizer: Optimizer,
    /// Hidden and output widths of the deep kernel's feature network.
    pub network_widths: Vec<usize>,
    pub seed: u64,
}

impl Phase1Config {
    pub fn gaussian() -> Self {
        Self {
            epochs: 200,
            learning_rate: 0.05,
            lambda: 1.0,
            mode: Mode::Amd,
            kernel_family: KernelFamily::Gaussian,
            optimizer: Optimizer::PlainGradient,
            network_widths: vec![32, 32],
            seed: 0,
        }
    }

    pub fn deep() -> Self {
        Self {
            learning_rate: 0.001,
            kernel_family: KernelFamily::Deep,
            optimizer: Optimizer::AdaptiveMoments,
            ..Self::gaussian()
        }
    }

    pub fn for_family(family: KernelFamily) -> Self {
        match family {
            KernelFamily::Gaussian => Self::gaussian(),
            KernelFamily::Deep => Self::deep(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(AmdError::Input("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(AmdError::Input(format!("learning rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(AmdError::Input(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if self.kernel_family == KernelFamily::Deep && (self.network_widths.is_empty() || self.network_widths.contains(&0))
        {
            return Err(AmdError::Input(format!("invalid network widths {:?}", self.network_widths)));
        }
        Ok(())
    }

    fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::NoAugmentation => 0.0,
            _ => self.lambda,
        }
    }

    fn uses_augmentation(&self) -> bool {
        self.mode != Mode::NoAugmentation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase1Result {
    pub selected: KernelParams,
    #[serde(rename = "F")]
    pub direction: Direction,
    pub d_plus: f64,
    pub d_minus: f64,
    pub loss_history_plus: Vec<f64>,
    pub loss_history_minus: Vec<f64>,
    pub tie_broken: bool,
}

/// Draw rows of `a` uniformly with replacement.
fn resample_rows<R: Rng + ?Sized>(a: &Array2<f64>, rng: &mut R) -> Array2<f64> {
    let m = a.nrows();
    let mut out = Array2::zeros(a.raw_dim());
    for mut row in out.rows_mut() {
        row.assign(&a.row(rng.random_range(0..m)));
    }
    out
}

/// Rows `0.5 x + 0.5 y` with `x`, `y` drawn with replacement from `X`, `Y`.
fn blend_rows<R: Rng + ?Sized>(x: &Array2<f64>, y: &Array2<f64>, rng: &mut R) -> Array2<f64> {
    let m = x.nrows();
    let mut out = Array2::zeros(x.raw_dim());
    for mut row in out.rows_mut() {
        let i = rng.random_range(0..m);
        let j = rng.random_range(0..m);
        row.assign(&(&x.row(i) * 0.5 + &y.row(j) * 0.5));
    }
    out
}

/// Augmented triple: `Z` resampled with replacement, and two independent
/// samples of 50/50 blends of `X` and `Y` rows.
pub fn generate_augmented<R: Rng + ?Sized>(t: &SampleTriple, rng: &mut R) -> SampleTriple {
    let z = t.z().to_owned();
    let x = t.x().to_owned();
    let y = t.y().to_owned();
    let z_aug = resample_rows(&z, rng);
    let x_aug = blend_rows(&x, &y, rng);
    let y_aug = blend_rows(&x, &y, rng);
    SampleTriple::new(z_aug, x_aug, y_aug).expect("augmented triple inherits a valid shape")
}

/// Augmented triple of epoch `epoch`, from its own substream.
fn augmented_for_epoch(t: &SampleTriple, seed: u64, epoch: usize) -> SampleTriple {
    generate_augmented(t, &mut substream(seed, &[purpose::AUGMENT, epoch as u64]))
}

/// Gradient-ascent state over the flat parameter vector.
enum Ascent {
    Plain { lr: f64 },
    Adam { lr: f64, m: Vec<f64>, v: Vec<f64>, t: i32 },
}

impl Ascent {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(kind: Optimizer, lr: f64, n: usize) -> Self {
        match kind {
            Optimizer::PlainGradient => Ascent::Plain { lr },
            Optimizer::AdaptiveMoments => Ascent::Adam { lr, m: vec![0.0; n], v: vec![0.0; n], t: 0 },
        }
    }

    fn step(&mut self, theta: &mut [f64], grad: &ParamGradient) {
        match self {
            Ascent::Plain { lr } => {
                for (p, g) in theta.iter_mut().zip(&grad.values) {
                    *p += *lr * g;
                }
            }
            Ascent::Adam { lr, m, v, t } => {
                *t += 1;
                let c1 = 1.0 - Self::BETA1.powi(*t);
                let c2 = 1.0 - Self::BETA2.powi(*t);
                for i in 0..theta.len() {
                    let g = grad.values[i];
                    m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g;
                    v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g * g;
                    theta[i] += *lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                }
            }
        }
    }
}

/// Kernel both branches start from: the median-heuristic Gaussian, or a
/// freshly initialized deep kernel built around it.
pub fn initial_kernel(t: &SampleTriple, cfg: &Phase1Config) -> Result<KernelParams> {
    match cfg.kernel_family {
        KernelFamily::Gaussian => Ok(KernelParams::Gaussian(median_heuristic(t.z(), t.x(), t.y())?)),
        KernelFamily::Deep => {
            let mut rng = substream(cfg.seed, &[purpose::INIT]);
            Ok(KernelParams::Deep(init_deep_kernel(t.z(), t.x(), t.y(), &cfg.network_widths, &mut rng)?))
        }
    }
}

/// Parameters and per-epoch objective values of one optimization run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub params: KernelParams,
    pub losses: Vec<f64>,
}

fn ascend<F>(cfg: &Phase1Config, init: &KernelParams, mut objective: F) -> Result<Trajectory>
where
    F: FnMut(usize, &KernelParams) -> Result<(f64, ParamGradient)>,
{
    let mut theta = init.to_flat();
    let mut params = init.clone();
    let mut opt = Ascent::new(cfg.optimizer, cfg.learning_rate, theta.len());
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (value, grad) = objective(epoch, &params)
            .map_err(|e| AmdError::Numeric(format!("epoch {epoch}: {e}")))?;
        losses.push(value);
        opt.step(&mut theta, &grad);
        params = params
            .with_flat(&theta)
            .map_err(|e| AmdError::Numeric(format!("epoch {epoch}: {e}")))?;
    }
    Ok(Trajectory { params, losses })
}

/// Run one branch for `cfg.epochs` ascent steps from `init`.
///
/// Augmented samples for epoch `t` come from the substream
/// `(cfg.seed, AUGMENT, t)`, so separate calls for the two branches see the
/// same augmentation.
pub fn optimize_branch(t: &SampleTriple, cfg: &Phase1Config, branch: Branch, init: &KernelParams) -> Result<Trajectory> {
    cfg.validate()?;
    if init.family() != cfg.kernel_family {
        return Err(AmdError::Input("initial kernel does not match the configured family".into()));
    }
    if cfg.mode == Mode::Squared {
        return optimize_squared(t, cfg, init);
    }
    let lambda = cfg.effective_lambda();
    let use_aug = cfg.uses_augmentation();
    ascend(cfg, init, |epoch, params| {
        if use_aug {
            let aug = augmented_for_epoch(t, cfg.seed, epoch);
            branch_objective_and_gradient(t, &aug, lambda, branch, params)
        } else {
            branch_objective_and_gradient(t, t, 0.0, branch, params)
        }
    })
}

/// Single-run ascent on `d_hat² - λ d_hat(aug)²`.
pub fn optimize_squared(t: &SampleTriple, cfg: &Phase1Config, init: &KernelParams) -> Result<Trajectory> {
    cfg.validate()?;
    let lambda = cfg.lambda;
    ascend(cfg, init, |epoch, params| {
        if lambda > 0.0 {
            let aug = augmented_for_epoch(t, cfg.seed, epoch);
            squared_objective_and_gradient(t, Some(&aug), lambda, params)
        } else {
            squared_objective_and_gradient(t, None, 0.0, params)
        }
    })
}

/// Learn the kernel and infer the direction on the training triple.
pub fn run_phase1(t: &SampleTriple, cfg: &Phase1Config) -> Result<Phase1Result> {
    cfg.validate()?;
    let init = initial_kernel(t, cfg)?;
    if cfg.mode == Mode::Squared {
        let traj = optimize_squared(t, cfg, &init)?;
        let d = u_statistic(&h_matrix(t, &traj.params)?);
        return Ok(Phase1Result {
            selected: traj.params,
            direction: Direction::of(d),
            d_plus: d,
            d_minus: d,
            loss_history_plus: traj.losses.clone(),
            loss_history_minus: traj.losses,
            tie_broken: d == 0.0,
        });
    }
    let plus = optimize_branch(t, cfg, Branch::Plus, &init)?;
    let minus = optimize_branch(t, cfg, Branch::Minus, &init)?;
    let d_plus = u_statistic(&h_matrix(t, &plus.params)?);
    let d_minus = u_statistic(&h_matrix(t, &minus.params)?);
    if !d_plus.is_finite() || !d_minus.is_finite() {
        return Err(AmdError::Numeric("non-finite statistic after training".into()));
    }
    let tie_broken = d_plus.abs() == d_minus.abs();
    let (direction, selected) = if d_plus.abs() >= d_minus.abs() {
        (Direction::Plus, plus.params)
    } else {
        (Direction::Minus, minus.params)
    };
    Ok(Phase1Result {
        selected,
        direction,
        d_plus,
        d_minus,
        loss_history_plus: plus.losses,
        loss_history_minus: minus.losses,
        tie_broken,
    })
}
