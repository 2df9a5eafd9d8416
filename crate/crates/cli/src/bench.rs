use std::path::PathBuf;

use amd_core::harness::{
    beta_curve, beta_table, lambda_sweep, lambda_table, power_curve, rate_table, type1_calibration, ExperimentConfig,
    Method,
};
use amd_core::synthetics::{gaussian_mean_shift, laplace_vs_gaussian};
use amd_core::{Phase1Config, TestConfig};
use clap::{Args, ValueEnum};

use crate::test_cmd::KernelArg;
use crate::{config_error, emit, Failure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    /// Rejection rate per method and mixture weight.
    Power,
    /// Rejection rate per method at nu = 0.5.
    Type1,
    /// Probability of learning the true direction, per sample size.
    Beta,
    /// AMD rejection rate per regularization weight.
    Lambda,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairArg {
    /// P = N(0, I), Q = N(shift · e1, I).
    GaussianShift,
    /// P = Laplace(0, 1/sqrt 2) per coordinate, Q = N(0, I).
    LaplaceGaussian,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(value_enum)]
    kind: BenchKind,
    #[arg(long, value_enum, default_value_t = PairArg::GaussianShift)]
    pair: PairArg,
    #[arg(long, default_value_t = 2)]
    dim: usize,
    /// Mean shift of Q along the first axis (gaussian-shift only).
    #[arg(long, default_value_t = 1.0)]
    shift: f64,
    /// Mixture weights [default: 0,0.1,...,1 for power; 0.3 for beta; 0.1 for lambda].
    #[arg(long, value_delimiter = ',')]
    nu: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    m: usize,
    #[arg(long, value_delimiter = ',', default_value = "20,50,100,200")]
    m_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0.000001,0.001,1,10")]
    lambda_grid: Vec<f64>,
    #[arg(long, default_value_t = 300)]
    reps: usize,
    /// Methods to compare (power and type1).
    #[arg(long, value_delimiter = ',', default_value = "AMD,AMD-B,MMD-H:+,MMD-H:-")]
    methods: Vec<String>,
    #[arg(long, value_enum, default_value_t = KernelArg::Gaussian)]
    kernel: KernelArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 500)]
    bootstraps: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Table path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn default_nu(kind: BenchKind) -> Vec<f64> {
    match kind {
        BenchKind::Power => (0..=10).map(|i| i as f64 / 10.0).collect(),
        BenchKind::Type1 => vec![0.5],
        BenchKind::Beta => vec![0.3],
        BenchKind::Lambda => vec![0.1],
    }
}

fn config(args: &BenchArgs) -> Result<ExperimentConfig, Failure> {
    let (p, q) = match args.pair {
        PairArg::GaussianShift => gaussian_mean_shift(args.dim, args.shift),
        PairArg::LaplaceGaussian => laplace_vs_gaussian(args.dim),
    }
    .map_err(config_error)?;
    let methods = args
        .methods
        .iter()
        .map(|s| s.parse::<Method>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_error)?;
    let defaults = Phase1Config::for_family(args.kernel.into());
    let phase1 = Phase1Config {
        epochs: args.epochs.unwrap_or(defaults.epochs),
        learning_rate: args.lr.unwrap_or(defaults.learning_rate),
        lambda: args.lambda.unwrap_or(defaults.lambda),
        ..defaults
    };
    let cfg = ExperimentConfig {
        p,
        q,
        nu_grid: args.nu.clone().unwrap_or_else(|| default_nu(args.kind)),
        m: args.m,
        reps: args.reps,
        phase1,
        test: TestConfig { alpha: args.alpha, bootstraps: args.bootstraps, seed: 0 },
        methods,
        master_seed: args.seed,
        workers: args.workers,
    };
    cfg.validate().map_err(config_error)?;
    Ok(cfg)
}

pub fn run(args: BenchArgs) -> Result<(), Failure> {
    let cfg = config(&args)?;
    let table = match args.kind {
        BenchKind::Power => rate_table(&power_curve(&cfg)?),
        BenchKind::Type1 => rate_table(&type1_calibration(&cfg)?),
        BenchKind::Beta => beta_table(&beta_curve(&cfg, &args.m_grid)?),
        BenchKind::Lambda => lambda_table(&lambda_sweep(&cfg, &args.lambda_grid)?),
    };
    emit(args.out.as_deref(), &table.to_csv())
}
