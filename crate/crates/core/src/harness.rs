//! Monte Carlo experiments on the mixture benchmark.
//!
//! A trial draws `2m` rows from each of `U = νP + (1-ν)Q`, `P` and `Q`; the
//! first `m` rows of each feed Phase I (or the median heuristic), the last
//! `m` rows feed Phase II. Data and algorithm randomness come from substreams
//! keyed by `(master_seed, purpose, ν, m, rep)`, so every method sees the
//! same data in a given repetition and results do not depend on how trials
//! are scheduled across workers.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{AmdError, Result};
use crate::estimator::{h_matrix, Direction, SampleTriple};
use crate::kernels::{median_heuristic, KernelParams};
use crate::phase1::{run_phase1, Mode, Phase1Config, Phase1Result};
use crate::phase2::{test_h_matrix, two_sided_h_matrix, TestConfig, TestOutcome};
use crate::rng::{derive_seed, purpose, substream};
use crate::synthetics::{DistributionSpec, MixtureSpec};
use crate::table::Table;

/// Fraction of failed trials above which an experiment is reported as failed.
pub const MAX_FAILURE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "AMD")]
    Amd,
    #[serde(rename = "AMD-B")]
    AmdB,
    #[serde(rename = "AMD-NA")]
    AmdNa,
    #[serde(rename = "AMD-SQ")]
    AmdSq,
    /// Median-heuristic kernel, fixed alternative `d > 0`.
    #[serde(rename = "MMD-H:+")]
    MmdHPlus,
    /// Median-heuristic kernel, fixed alternative `d < 0`.
    #[serde(rename = "MMD-H:-")]
    MmdHMinus,
    /// Learned direction with the median-heuristic kernel in Phase II; the
    /// learned-hypothesis counterpart of the two `MMD-H` tests.
    #[serde(rename = "AMD-MH")]
    AmdMh,
}

impl Method {
    pub const ALL: [Method; 7] =
        [Method::Amd, Method::AmdB, Method::AmdNa, Method::AmdSq, Method::MmdHPlus, Method::MmdHMinus, Method::AmdMh];

    pub fn name(self) -> &'static str {
        match self {
            Method::Amd => "AMD",
            Method::AmdB => "AMD-B",
            Method::AmdNa => "AMD-NA",
            Method::AmdSq => "AMD-SQ",
            Method::MmdHPlus => "MMD-H:+",
            Method::MmdHMinus => "MMD-H:-",
            Method::AmdMh => "AMD-MH",
        }
    }

    /// Phase-I mode this method trains with, if it trains at all.
    fn phase1_mode(self) -> Option<Mode> {
        match self {
            Method::Amd | Method::AmdB | Method::AmdMh => Some(Mode::Amd),
            Method::AmdNa => Some(Mode::NoAugmentation),
            Method::AmdSq => Some(Mode::Squared),
            Method::MmdHPlus | Method::MmdHMinus => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = AmdError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| AmdError::Input(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub p: DistributionSpec,
    pub q: DistributionSpec,
    pub nu_grid: Vec<f64>,
    pub m: usize,
    pub reps: usize,
    pub phase1: Phase1Config,
    pub test: TestConfig,
    pub methods: Vec<Method>,
    pub master_seed: u64,
    pub workers: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(AmdError::Input("reps must be at least 1".into()));
        }
        if self.m < 2 {
            return Err(AmdError::Input(format!("m must be at least 2, got {}", self.m)));
        }
        if self.workers == 0 {
            return Err(AmdError::Input("workers must be at least 1".into()));
        }
        if self.nu_grid.is_empty() {
            return Err(AmdError::Input("nu grid is empty".into()));
        }
        for &nu in &self.nu_grid {
            MixtureSpec::new(self.p.clone(), self.q.clone(), nu)?;
        }
        self.phase1.validate()?;
        self.test.validate()
    }

    fn mixture(&self, nu: f64) -> Result<MixtureSpec> {
        MixtureSpec::new(self.p.clone(), self.q.clone(), nu)
    }

    fn keys(&self, nu: f64, m: usize, rep: usize) -> [u64; 3] {
        [nu.to_bits(), m as u64, rep as u64]
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| AmdError::Input(format!("cannot start worker pool: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: Method,
    pub nu: f64,
    pub m: usize,
    pub rep: usize,
    #[serde(rename = "F")]
    pub direction: Option<Direction>,
    pub reject: bool,
    pub p_value: f64,
    pub statistic: f64,
    pub tau: f64,
    pub wall_time: f64,
    pub error: Option<String>,
}

impl TrialRecord {
    /// Equality on everything except `wall_time`.
    pub fn same_outcome(&self, other: &TrialRecord) -> bool {
        TrialRecord { wall_time: 0.0, ..self.clone() } == TrialRecord { wall_time: 0.0, ..other.clone() }
    }
}

/// Training and test triples of one repetition.
pub fn draw_split(cfg: &ExperimentConfig, nu: f64, m: usize, rep: usize) -> Result<(SampleTriple, SampleTriple)> {
    let mix = cfg.mixture(nu)?;
    let k = cfg.keys(nu, m, rep);
    let mut rng = substream(cfg.master_seed, &[purpose::DATA, k[0], k[1], k[2]]);
    let z = mix.sample(2 * m, &mut rng);
    let x = cfg.p.sample(2 * m, &mut rng);
    let y = cfg.q.sample(2 * m, &mut rng);
    let half = |a: &Array2<f64>, first: bool| {
        if first {
            a.slice(s![..m, ..]).to_owned()
        } else {
            a.slice(s![m.., ..]).to_owned()
        }
    };
    let train = SampleTriple::new(half(&z, true), half(&x, true), half(&y, true))?;
    let test = SampleTriple::new(half(&z, false), half(&x, false), half(&y, false))?;
    Ok((train, test))
}

fn phase1_config(cfg: &ExperimentConfig, mode: Mode, nu: f64, m: usize, rep: usize) -> Phase1Config {
    let k = cfg.keys(nu, m, rep);
    Phase1Config { mode, seed: derive_seed(cfg.master_seed, &[purpose::PHASE1, k[0], k[1], k[2]]), ..cfg.phase1.clone() }
}

fn test_config(cfg: &ExperimentConfig, nu: f64, m: usize, rep: usize) -> TestConfig {
    let k = cfg.keys(nu, m, rep);
    TestConfig { seed: derive_seed(cfg.master_seed, &[purpose::PHASE2, k[0], k[1], k[2]]), ..cfg.test }
}

/// Runs every requested method on one repetition, sharing Phase-I fits and
/// h-matrices between methods that use the same ones.
struct TrialGroup<'a> {
    cfg: &'a ExperimentConfig,
    nu: f64,
    rep: usize,
    train: SampleTriple,
    test: SampleTriple,
    phase1: HashMap<Mode, std::result::Result<Phase1Result, AmdError>>,
    median: Option<std::result::Result<KernelParams, AmdError>>,
}

impl<'a> TrialGroup<'a> {
    fn new(cfg: &'a ExperimentConfig, nu: f64, rep: usize) -> Result<Self> {
        let (train, test) = draw_split(cfg, nu, cfg.m, rep)?;
        Ok(Self { cfg, nu, rep, train, test, phase1: HashMap::new(), median: None })
    }

    fn phase1(&mut self, mode: Mode) -> Result<Phase1Result> {
        let (cfg, train, nu, rep) = (self.cfg, &self.train, self.nu, self.rep);
        self.phase1
            .entry(mode)
            .or_insert_with(|| run_phase1(train, &phase1_config(cfg, mode, nu, cfg.m, rep)))
            .clone()
    }

    fn median_kernel(&mut self) -> Result<KernelParams> {
        let train = &self.train;
        self.median
            .get_or_insert_with(|| median_heuristic(train.z(), train.x(), train.y()).map(KernelParams::Gaussian))
            .clone()
    }

    fn outcome(&mut self, method: Method) -> Result<TestOutcome> {
        let tcfg = test_config(self.cfg, self.nu, self.cfg.m, self.rep);
        match method {
            Method::MmdHPlus | Method::MmdHMinus => {
                let dir = if method == Method::MmdHPlus { Direction::Plus } else { Direction::Minus };
                let k = self.median_kernel()?;
                test_h_matrix(&h_matrix(&self.test, &k)?, dir, &tcfg)
            }
            Method::AmdMh => {
                let dir = self.phase1(Mode::Amd)?.direction;
                let k = self.median_kernel()?;
                test_h_matrix(&h_matrix(&self.test, &k)?, dir, &tcfg)
            }
            Method::AmdB => {
                let r = self.phase1(Mode::Amd)?;
                two_sided_h_matrix(&h_matrix(&self.test, &r.selected)?, &tcfg)
            }
            Method::Amd | Method::AmdNa | Method::AmdSq => {
                let r = self.phase1(method.phase1_mode().expect("trained method"))?;
                test_h_matrix(&h_matrix(&self.test, &r.selected)?, r.direction, &tcfg)
            }
        }
    }

    fn record(&mut self, method: Method) -> TrialRecord {
        let start = Instant::now();
        let res = self.outcome(method);
        let wall_time = start.elapsed().as_secs_f64();
        let base = TrialRecord {
            method,
            nu: self.nu,
            m: self.cfg.m,
            rep: self.rep,
            direction: None,
            reject: false,
            p_value: f64::NAN,
            statistic: f64::NAN,
            tau: f64::NAN,
            wall_time,
            error: None,
        };
        match res {
            Ok(o) => TrialRecord {
                direction: Some(o.direction),
                reject: o.reject,
                p_value: o.p_value,
                statistic: o.statistic,
                tau: o.tau,
                ..base
            },
            Err(e) => TrialRecord { error: Some(e.to_string()), ..base },
        }
    }
}

fn failed_record(cfg: &ExperimentConfig, method: Method, nu: f64, rep: usize, e: &AmdError) -> TrialRecord {
    TrialRecord {
        method,
        nu,
        m: cfg.m,
        rep,
        direction: None,
        reject: false,
        p_value: f64::NAN,
        statistic: f64::NAN,
        tau: f64::NAN,
        wall_time: 0.0,
        error: Some(e.to_string()),
    }
}

/// All `methods` on repetition `rep` at mixture weight `nu`.
pub fn run_trials(cfg: &ExperimentConfig, methods: &[Method], nu: f64, rep: usize) -> Vec<TrialRecord> {
    match TrialGroup::new(cfg, nu, rep) {
        Ok(mut g) => methods.iter().map(|&m| g.record(m)).collect(),
        Err(e) => methods.iter().map(|&m| failed_record(cfg, m, nu, rep, &e)).collect(),
    }
}

/// One method end to end on one repetition.
pub fn run_trial(cfg: &ExperimentConfig, method: Method, nu: f64, rep: usize) -> TrialRecord {
    run_trials(cfg, &[method], nu, rep).pop().expect("one record")
}

/// Every `(ν, rep)` group for `cfg.methods`, in grid order.
pub fn run_grid(cfg: &ExperimentConfig) -> Result<Vec<TrialRecord>> {
    cfg.validate()?;
    let units: Vec<(f64, usize)> =
        cfg.nu_grid.iter().flat_map(|&nu| (0..cfg.reps).map(move |r| (nu, r))).collect();
    let records: Vec<Vec<TrialRecord>> =
        cfg.pool()?.install(|| units.par_iter().map(|&(nu, rep)| run_trials(cfg, &cfg.methods, nu, rep)).collect());
    Ok(records.into_iter().flatten().collect())
}

/// Rejection-rate summary for one `(method, ν)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub method: Method,
    pub nu: f64,
    pub reps: usize,
    pub failures: usize,
    pub rejection_rate: f64,
    pub stderr: f64,
    pub mean_p_value: f64,
}

/// `√(r (1 - r) / n)`.
pub fn binomial_stderr(rate: f64, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    (rate * (1.0 - rate) / n as f64).sqrt()
}

fn summarize<'r>(method: Method, nu: f64, records: impl Iterator<Item = &'r TrialRecord>) -> RateRow {
    let (mut n, mut failures, mut rejects, mut p_sum) = (0usize, 0usize, 0usize, 0.0);
    for r in records {
        if r.error.is_some() {
            failures += 1;
            continue;
        }
        n += 1;
        rejects += usize::from(r.reject);
        p_sum += r.p_value;
    }
    let rate = if n > 0 { rejects as f64 / n as f64 } else { f64::NAN };
    RateRow {
        method,
        nu,
        reps: n,
        failures,
        rejection_rate: rate,
        stderr: binomial_stderr(rate, n),
        mean_p_value: if n > 0 { p_sum / n as f64 } else { f64::NAN },
    }
}

fn check_failures(records: &[TrialRecord]) -> Result<()> {
    let failed = records.iter().filter(|r| r.error.is_some()).count();
    if records.is_empty() || (failed as f64) <= MAX_FAILURE_FRACTION * records.len() as f64 {
        return Ok(());
    }
    let first = records.iter().find_map(|r| r.error.clone()).unwrap_or_default();
    Err(AmdError::Numeric(format!("{failed} of {} trials failed; first error: {first}", records.len())))
}

/// Rejection rate, its binomial standard error and the mean p-value per
/// `(method, ν)`.
pub fn power_curve(cfg: &ExperimentConfig) -> Result<Vec<RateRow>> {
    let records = run_grid(cfg)?;
    check_failures(&records)?;
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        for &nu in &cfg.nu_grid {
            rows.push(summarize(method, nu, records.iter().filter(|r| r.method == method && r.nu == nu)));
        }
    }
    Ok(rows)
}

/// [`power_curve`] restricted to `ν = 1/2`, where no direction holds.
pub fn type1_calibration(cfg: &ExperimentConfig) -> Result<Vec<RateRow>> {
    let at_half = ExperimentConfig { nu_grid: vec![0.5], ..cfg.clone() };
    power_curve(&at_half)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaRow {
    pub nu: f64,
    pub m: usize,
    pub reps: usize,
    pub failures: usize,
    pub beta: f64,
    pub stderr: f64,
}

/// Fraction of repetitions whose Phase-I direction matches the true sign of
/// `d`, per `(ν, m)`. Only the training half of each split is used.
pub fn beta_curve(cfg: &ExperimentConfig, m_grid: &[usize]) -> Result<Vec<BetaRow>> {
    cfg.validate()?;
    if m_grid.is_empty() || m_grid.iter().any(|&m| m < 2) {
        return Err(AmdError::Input(format!("invalid sample-size grid {m_grid:?}")));
    }
    let mut truths = Vec::with_capacity(cfg.nu_grid.len());
    for &nu in &cfg.nu_grid {
        let truth = cfg
            .mixture(nu)?
            .true_direction()
            .ok_or_else(|| AmdError::Input(format!("no true direction at nu = {nu}: beta is undefined")))?;
        truths.push(truth);
    }
    let units: Vec<(usize, usize, usize)> = (0..cfg.nu_grid.len())
        .flat_map(|i| m_grid.iter().flat_map(move |&m| (0..cfg.reps).map(move |r| (i, m, r))))
        .collect();
    let mode = cfg.phase1.mode;
    let outcomes: Vec<std::result::Result<Direction, AmdError>> = cfg.pool()?.install(|| {
        units
            .par_iter()
            .map(|&(i, m, rep)| {
                let nu = cfg.nu_grid[i];
                let (train, _) = draw_split(cfg, nu, m, rep)?;
                run_phase1(&train, &phase1_config(cfg, mode, nu, m, rep)).map(|r| r.direction)
            })
            .collect()
    });
    let failed = outcomes.iter().filter(|o| o.is_err()).count();
    if failed as f64 > MAX_FAILURE_FRACTION * outcomes.len() as f64 {
        return Err(AmdError::Numeric(format!("{failed} of {} Phase-I runs failed", outcomes.len())));
    }
    let mut rows = Vec::new();
    for (i, &nu) in cfg.nu_grid.iter().enumerate() {
        for &m in m_grid {
            let (mut n, mut hits, mut failures) = (0usize, 0usize, 0usize);
            for ((ui, um, _), o) in units.iter().zip(&outcomes) {
                if *ui != i || *um != m {
                    continue;
                }
                match o {
                    Ok(d) => {
                        n += 1;
                        hits += usize::from(*d == truths[i]);
                    }
                    Err(_) => failures += 1,
                }
            }
            let beta = if n > 0 { hits as f64 / n as f64 } else { f64::NAN };
            rows.push(BetaRow { nu, m, reps: n, failures, beta, stderr: binomial_stderr(beta, n) });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaRow {
    pub lambda: f64,
    pub nu: f64,
    pub reps: usize,
    pub failures: usize,
    pub rejection_rate: f64,
    pub stderr: f64,
    pub mean_p_value: f64,
}

/// AMD rejection rate per regularization weight. Every `λ` reuses the same
/// data and seeds, so differences reflect `λ` alone.
pub fn lambda_sweep(cfg: &ExperimentConfig, lambda_grid: &[f64]) -> Result<Vec<LambdaRow>> {
    if lambda_grid.is_empty() || lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(AmdError::Input(format!("invalid lambda grid {lambda_grid:?}")));
    }
    if cfg.nu_grid.contains(&0.5) {
        return Err(AmdError::Input("lambda sweep needs nu != 0.5".into()));
    }
    let mut rows = Vec::new();
    for &lambda in lambda_grid {
        let c = ExperimentConfig {
            methods: vec![Method::Amd],
            phase1: Phase1Config { lambda, ..cfg.phase1.clone() },
            ..cfg.clone()
        };
        for r in power_curve(&c)? {
            rows.push(LambdaRow {
                lambda,
                nu: r.nu,
                reps: r.reps,
                failures: r.failures,
                rejection_rate: r.rejection_rate,
                stderr: r.stderr,
                mean_p_value: r.mean_p_value,
            });
        }
    }
    Ok(rows)
}

pub fn rate_table(rows: &[RateRow]) -> Table {
    let mut t = Table::new(vec!["method", "nu", "reps", "failures", "rejection_rate", "stderr", "mean_p_value"]);
    for r in rows {
        t.push(vec![
            r.method.name().into(),
            r.nu.into(),
            r.reps.into(),
            r.failures.into(),
            r.rejection_rate.into(),
            r.stderr.into(),
            r.mean_p_value.into(),
        ]);
    }
    t
}

pub fn beta_table(rows: &[BetaRow]) -> Table {
    let mut t = Table::new(vec!["nu", "m", "reps", "failures", "beta", "stderr"]);
    for r in rows {
        t.push(vec![r.nu.into(), r.m.into(), r.reps.into(), r.failures.into(), r.beta.into(), r.stderr.into()]);
    }
    t
}

pub fn lambda_table(rows: &[LambdaRow]) -> Table {
    let mut t = Table::new(vec!["lambda", "nu", "reps", "failures", "rejection_rate", "stderr", "mean_p_value"]);
    for r in rows {
        t.push(vec![
            r.lambda.into(),
            r.nu.into(),
            r.reps.into(),
            r.failures.into(),
            r.rejection_rate.into(),
            r.stderr.into(),
            r.mean_p_value.into(),
        ]);
    }
    t
}
