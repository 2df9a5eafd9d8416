use amd_core::estimator::{h_matrix, u_statistic};
use amd_core::harness::{run_trial, ExperimentConfig};
use amd_core::phase1::{run_phase1, Mode};
use amd_core::phase2::run_phase2;
use amd_core::rng::substream;
use amd_core::synthetics::{closed_form_dk, column_means, gaussian_mean_shift, laplace_vs_gaussian, MixtureSpec};
use amd_core::{Direction, GaussianParams, KernelParams, Method, Phase1Config, SampleTriple, TestConfig};

fn triple(mix: &MixtureSpec, m: usize, seed: u64) -> SampleTriple {
    let mut rng = substream(seed, &[]);
    SampleTriple::new(mix.sample(m, &mut rng), mix.p.sample(m, &mut rng), mix.q.sample(m, &mut rng)).unwrap()
}

#[test]
fn closed_form_sign_matches_true_direction() {
    let (p, q) = gaussian_mean_shift(3, 1.2).unwrap();
    let k = GaussianParams::from_bandwidth(1.3).unwrap();
    for nu in [0.0, 0.2, 0.45, 0.55, 0.9, 1.0] {
        let mix = MixtureSpec::new(p.clone(), q.clone(), nu).unwrap();
        let d = closed_form_dk(&k, &mix).unwrap();
        assert_eq!(mix.true_direction(), Some(Direction::of(d)));
    }
    let half = MixtureSpec::new(p, q, 0.5).unwrap();
    assert!(closed_form_dk(&k, &half).unwrap().abs() < 1e-15);
    assert_eq!(half.true_direction(), None);
}

#[test]
fn estimator_is_unbiased_for_laplace_pair() {
    // No closed form here; compare two independent Monte Carlo means at
    // different sample sizes instead.
    let (p, q) = laplace_vs_gaussian(2).unwrap();
    let mix = MixtureSpec::new(p, q, 0.2).unwrap();
    let k = KernelParams::Gaussian(GaussianParams::from_bandwidth(1.0).unwrap());
    let mean_sd = |m: usize, n: u64, key: u64| {
        let v: Vec<f64> = (0..n).map(|s| u_statistic(&h_matrix(&triple(&mix, m, key * 10_000 + s), &k).unwrap())).collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        (mean, sd / (n as f64).sqrt())
    };
    let (a, sa) = mean_sd(5, 3000, 1);
    let (b, sb) = mean_sd(40, 400, 2);
    assert!((a - b).abs() < 4.0 * sa.hypot(sb), "{a} vs {b}");
}

#[test]
fn laplace_pair_has_matched_moments() {
    let (p, q) = laplace_vs_gaussian(3).unwrap();
    let mut rng = substream(5, &[]);
    for spec in [p, q] {
        let s = spec.sample(20_000, &mut rng);
        let mean = column_means(&s);
        let var = s.mapv(|v| v * v).mean().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 0.03));
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }
}

#[test]
fn well_separated_direction_is_learned() {
    let (p, q) = gaussian_mean_shift(2, 3.0).unwrap();
    let mix = MixtureSpec::new(p, q, 1.0).unwrap();
    let cfg = Phase1Config { epochs: 30, mode: Mode::Amd, ..Phase1Config::gaussian() };
    let hits = (0..100)
        .filter(|&s| run_phase1(&triple(&mix, 30, s), &Phase1Config { seed: s, ..cfg.clone() }).unwrap().direction == Direction::Plus)
        .count();
    assert!(hits >= 95, "{hits}/100");
}

#[test]
fn identical_candidates_give_unit_p_value() {
    let (p, q) = gaussian_mean_shift(2, 1.0).unwrap();
    let mix = MixtureSpec::new(p, q, 0.3).unwrap();
    let t = triple(&mix, 25, 9);
    let same = SampleTriple::new(t.z().to_owned(), t.x().to_owned(), t.x().to_owned()).unwrap();
    let k = KernelParams::Gaussian(GaussianParams::from_bandwidth(0.8).unwrap());
    for dir in [Direction::Plus, Direction::Minus] {
        let out = run_phase2(&same, &k, dir, &TestConfig::default()).unwrap();
        assert_eq!(out.statistic, 0.0);
        assert!(!out.reject);
        assert_eq!(out.p_value, 1.0);
    }
}

#[test]
fn separated_anchor_equal_to_q_is_detected() {
    let (p, q) = gaussian_mean_shift(2, 1.0).unwrap();
    let cfg = ExperimentConfig {
        p,
        q,
        nu_grid: vec![0.0],
        m: 100,
        reps: 1,
        phase1: Phase1Config::gaussian(),
        test: TestConfig { bootstraps: 300, ..TestConfig::default() },
        methods: vec![Method::Amd],
        master_seed: 17,
        workers: 1,
    };
    let hits = (0..10)
        .filter(|&rep| {
            let r = run_trial(&cfg, Method::Amd, 0.0, rep);
            r.reject && r.direction == Some(Direction::Minus)
        })
        .count();
    assert!(hits >= 8, "{hits}/10");
}
