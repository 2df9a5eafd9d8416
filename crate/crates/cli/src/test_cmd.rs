use std::path::{Path, PathBuf};
use std::time::Instant;

use amd_core::estimator::Direction;
use amd_core::kernels::{KernelFamily, KernelParams};
use amd_core::phase1::{initial_kernel, optimize_branch, run_phase1, Mode};
use amd_core::phase2::{run_amd_b, run_oriented, run_phase2};
use amd_core::rng::{derive_seed, purpose, substream};
use amd_core::{AmdError, Phase1Config, SampleTriple, TestConfig};
use clap::{Args, ValueEnum};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::input::read_matrix;
use crate::{config_error, emit, worker_pool, Failure};

pub const RESULT_VERSION: &str = "1";

/// Smallest number of rows allowed in either half after splitting.
pub const MIN_ROWS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMode {
    Amd,
    AmdB,
    AmdNa,
    AmdSq,
    /// Fixed alternative: P is closer to the anchor.
    OrientedP,
    /// Fixed alternative: Q is closer to the anchor.
    OrientedQ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KernelArg {
    Gaussian,
    Deep,
}

impl From<KernelArg> for KernelFamily {
    fn from(k: KernelArg) -> Self {
        match k {
            KernelArg::Gaussian => KernelFamily::Gaussian,
            KernelArg::Deep => KernelFamily::Deep,
        }
    }
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// Anchor sample Z (split into train/test halves).
    #[arg(long, value_name = "CSV")]
    anchor: Option<PathBuf>,
    /// Candidate sample X drawn from P.
    #[arg(long, value_name = "CSV")]
    p: Option<PathBuf>,
    /// Candidate sample Y drawn from Q.
    #[arg(long, value_name = "CSV")]
    q: Option<PathBuf>,
    #[arg(long, value_name = "CSV", conflicts_with_all = ["anchor", "p", "q", "train_frac"])]
    train_anchor: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    train_p: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    train_q: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    test_anchor: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    test_p: Option<PathBuf>,
    #[arg(long, value_name = "CSV")]
    test_q: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TestMode::Amd)]
    mode: TestMode,
    #[arg(long, value_enum, default_value_t = KernelArg::Gaussian)]
    kernel: KernelArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 500)]
    bootstraps: usize,
    /// Phase-I epochs [default: 200].
    #[arg(long)]
    epochs: Option<usize>,
    /// Phase-I step size [default: 0.05 gaussian, 0.001 deep].
    #[arg(long)]
    lr: Option<f64>,
    /// Weight of the augmentation regularizer [default: 1].
    #[arg(long)]
    lambda: Option<f64>,
    /// Feature-network widths of the deep kernel [default: 32,32].
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    /// Fraction of rows used for Phase I.
    #[arg(long)]
    train_frac: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Result document path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Record wall-clock timings (makes the document run-dependent).
    #[arg(long)]
    timings: bool,
}

#[derive(Debug, Serialize)]
struct KernelSummary {
    family: KernelFamily,
    bandwidths: Vec<f64>,
    epsilon: Option<f64>,
    network_dims: Option<Vec<usize>>,
}

impl KernelSummary {
    fn of(params: &KernelParams) -> Self {
        match params {
            KernelParams::Gaussian(g) => Self {
                family: KernelFamily::Gaussian,
                bandwidths: vec![g.bandwidth()],
                epsilon: None,
                network_dims: None,
            },
            KernelParams::Deep(d) => Self {
                family: KernelFamily::Deep,
                bandwidths: vec![d.bw_feature(), d.bw_raw()],
                epsilon: Some(d.epsilon()),
                network_dims: Some(d.network.dims()),
            },
        }
    }
}

#[derive(Debug, Serialize)]
struct Timings {
    phase1_seconds: f64,
    phase2_seconds: f64,
}

#[derive(Debug, Serialize)]
struct Inputs {
    anchor: Option<PathBuf>,
    p: Option<PathBuf>,
    q: Option<PathBuf>,
    train_anchor: Option<PathBuf>,
    train_p: Option<PathBuf>,
    train_q: Option<PathBuf>,
    test_anchor: Option<PathBuf>,
    test_p: Option<PathBuf>,
    test_q: Option<PathBuf>,
    train_frac: Option<f64>,
    train_rows: usize,
    test_rows: usize,
}

#[derive(Debug, Serialize)]
struct EffectiveConfig {
    mode: TestMode,
    inputs: Inputs,
    phase1: Phase1Config,
    test: TestConfig,
}

#[derive(Debug, Serialize)]
struct ResultDocument {
    version: &'static str,
    mode: TestMode,
    kernel: KernelSummary,
    #[serde(rename = "F")]
    direction: Direction,
    statistic: f64,
    tau: f64,
    alpha: f64,
    bootstraps: usize,
    p_value: f64,
    reject: bool,
    tie_broken: bool,
    seed: u64,
    timings: Option<Timings>,
    config: EffectiveConfig,
}

fn phase1_config(args: &TestArgs) -> Phase1Config {
    let defaults = Phase1Config::for_family(args.kernel.into());
    let mode = match args.mode {
        TestMode::AmdNa => Mode::NoAugmentation,
        TestMode::AmdSq => Mode::Squared,
        _ => Mode::Amd,
    };
    Phase1Config {
        epochs: args.epochs.unwrap_or(defaults.epochs),
        learning_rate: args.lr.unwrap_or(defaults.learning_rate),
        lambda: args.lambda.unwrap_or(defaults.lambda),
        network_widths: args.widths.clone().unwrap_or(defaults.network_widths.clone()),
        mode,
        seed: derive_seed(args.seed, &[purpose::PHASE1]),
        ..defaults
    }
}

fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    path.as_deref().ok_or_else(|| Failure::usage(format!("missing {flag}")))
}

fn explicit_split(args: &TestArgs) -> bool {
    [&args.train_anchor, &args.train_p, &args.train_q, &args.test_anchor, &args.test_p, &args.test_q]
        .iter()
        .any(|p| p.is_some())
}

fn check_rows(label: &str, n: usize) -> Result<(), Failure> {
    if n < MIN_ROWS {
        return Err(AmdError::Input(format!("{label} half has {n} rows; at least {MIN_ROWS} are required")).into());
    }
    Ok(())
}

/// Shuffle rows with one seeded permutation shared by Z, X and Y, then cut at
/// `round(frac · n)`.
fn split(z: Array2<f64>, x: Array2<f64>, y: Array2<f64>, frac: f64, seed: u64) -> Result<(SampleTriple, SampleTriple), Failure> {
    let n = z.nrows();
    if x.nrows() != n || y.nrows() != n {
        return Err(AmdError::Dimension(format!(
            "anchor, p and q must have equal row counts, got {n}, {} and {}",
            x.nrows(),
            y.nrows()
        ))
        .into());
    }
    let n_train = (frac * n as f64).round() as usize;
    check_rows("training", n_train)?;
    check_rows("test", n - n_train)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, &[purpose::SPLIT]));
    let (tr, te) = order.split_at(n_train);
    let pick = |a: &Array2<f64>, idx: &[usize]| a.select(Axis(0), idx);
    let train = SampleTriple::new(pick(&z, tr), pick(&x, tr), pick(&y, tr))?;
    let test = SampleTriple::new(pick(&z, te), pick(&x, te), pick(&y, te))?;
    Ok((train, test))
}

fn load(args: &TestArgs, frac: f64) -> Result<(SampleTriple, SampleTriple), Failure> {
    if explicit_split(args) {
        let read = |p: &Option<PathBuf>, flag: &str| -> Result<Array2<f64>, Failure> {
            Ok(read_matrix(require(p, flag)?)?)
        };
        let train = SampleTriple::new(
            read(&args.train_anchor, "--train-anchor")?,
            read(&args.train_p, "--train-p")?,
            read(&args.train_q, "--train-q")?,
        )?;
        let test = SampleTriple::new(
            read(&args.test_anchor, "--test-anchor")?,
            read(&args.test_p, "--test-p")?,
            read(&args.test_q, "--test-q")?,
        )?;
        check_rows("training", train.m())?;
        check_rows("test", test.m())?;
        if train.d() != test.d() {
            return Err(AmdError::Dimension(format!(
                "training data has {} columns but test data has {}",
                train.d(),
                test.d()
            ))
            .into());
        }
        return Ok((train, test));
    }
    let z = read_matrix(require(&args.anchor, "--anchor")?)?;
    let x = read_matrix(require(&args.p, "--p")?)?;
    let y = read_matrix(require(&args.q, "--q")?)?;
    split(z, x, y, frac, args.seed)
}

struct Fitted {
    kernel: KernelParams,
    direction: Direction,
    tie_broken: bool,
}

fn fit(train: &SampleTriple, mode: TestMode, cfg: &Phase1Config) -> Result<Fitted, Failure> {
    let oriented = match mode {
        TestMode::OrientedP => Some(Direction::Plus),
        TestMode::OrientedQ => Some(Direction::Minus),
        _ => None,
    };
    if let Some(fixed) = oriented {
        let init = initial_kernel(train, cfg)?;
        let traj = optimize_branch(train, cfg, fixed, &init)?;
        return Ok(Fitted { kernel: traj.params, direction: fixed, tie_broken: false });
    }
    let r = run_phase1(train, cfg)?;
    Ok(Fitted { kernel: r.selected, direction: r.direction, tie_broken: r.tie_broken })
}

pub fn run(args: TestArgs) -> Result<(), Failure> {
    let phase1 = phase1_config(&args);
    phase1.validate().map_err(config_error)?;
    let test = TestConfig { alpha: args.alpha, bootstraps: args.bootstraps, seed: derive_seed(args.seed, &[purpose::PHASE2]) };
    test.validate().map_err(config_error)?;
    let frac = if explicit_split(&args) { None } else { Some(args.train_frac.unwrap_or(0.5)) };
    if let Some(f) = frac {
        if !(f > 0.0 && f < 1.0) {
            return Err(Failure::usage(format!("--train-frac must lie in (0, 1), got {f}")));
        }
    }
    let pool = worker_pool(args.workers)?;

    let (train, test_triple) = load(&args, frac.unwrap_or(0.5))?;
    let start = Instant::now();
    let fitted = pool.install(|| fit(&train, args.mode, &phase1))?;
    let phase1_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let outcome = pool.install(|| match args.mode {
        TestMode::AmdB => run_amd_b(&test_triple, &fitted.kernel, &test),
        TestMode::OrientedP | TestMode::OrientedQ => run_oriented(&test_triple, &fitted.kernel, fitted.direction, &test),
        _ => run_phase2(&test_triple, &fitted.kernel, fitted.direction, &test),
    })?;
    let phase2_seconds = start.elapsed().as_secs_f64();

    let doc = ResultDocument {
        version: RESULT_VERSION,
        mode: args.mode,
        kernel: KernelSummary::of(&fitted.kernel),
        direction: outcome.direction,
        statistic: outcome.statistic,
        tau: outcome.tau,
        alpha: test.alpha,
        bootstraps: test.bootstraps,
        p_value: outcome.p_value,
        reject: outcome.reject,
        tie_broken: fitted.tie_broken,
        seed: args.seed,
        timings: args.timings.then_some(Timings { phase1_seconds, phase2_seconds }),
        config: EffectiveConfig {
            mode: args.mode,
            inputs: Inputs {
                anchor: args.anchor.clone(),
                p: args.p.clone(),
                q: args.q.clone(),
                train_anchor: args.train_anchor.clone(),
                train_p: args.train_p.clone(),
                train_q: args.train_q.clone(),
                test_anchor: args.test_anchor.clone(),
                test_p: args.test_p.clone(),
                test_q: args.test_q.clone(),
                train_frac: frac,
                train_rows: train.m(),
                test_rows: test_triple.m(),
            },
            phase1,
            test,
        },
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| Failure { code: 3, message: e.to_string() })?;
    text.push('\n');
    emit(args.out.as_deref(), &text)
}
