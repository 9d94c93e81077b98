use fpglmm::data::{summarize, write_matches, Binning, Statistic};
use fpglmm::model::QualityScheme;
use fpglmm::prc::PrcQuery;
use fpglmm::simgen::{
    run_coverage, simulate_dataset, true_prc, write_truth, CoverageConfig, MinutiaAssignment, Preset, QualityAssignment, SimConfig,
};
use fpglmm::{Error, Tau};

fn flat_config(f: usize, l: usize, seed: u64) -> SimConfig {
    // Every predictor equals 2 beta0 when theta0 = beta0 and the label
    // increments vanish, so each of the four rates is m^2 e^{2 beta0}.
    let beta0 = 0.5 * 1e-3f64.ln();
    SimConfig {
        scheme: QualityScheme::Categorical { qmax: 3 },
        tau_true: Tau::new(vec![beta0, 0.0, 0.0], beta0, -40.0),
        f,
        l,
        quality: QualityAssignment::UniformLabels { qmax: 3 },
        minutiae: MinutiaAssignment::Fixed(30),
        seed,
    }
}

#[test]
fn mean_count_matches_the_model() {
    let sim = simulate_dataset(&flat_config(142, 1, 3)).unwrap();
    let ys: Vec<f64> = sim.data.pairs().iter().map(|p| p.y).collect();
    assert!(ys.len() >= 10_000);
    let n = ys.len() as f64;
    let mean = ys.iter().sum::<f64>() / n;
    let se = (ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    assert!((mean - 3.6).abs() <= 3.0 * se, "{mean} +- {se}");
    // Standardised means of independent datasets are standard normal.
    let z: Vec<f64> = (0..40u64)
        .map(|seed| {
            let d = simulate_dataset(&flat_config(142, 1, 100 + seed)).unwrap().data;
            let n = d.len() as f64;
            (d.total_matches() / n - 3.6) / (3.6 / n).sqrt()
        })
        .collect();
    let zbar = z.iter().sum::<f64>() / 40.0;
    assert!(zbar.abs() <= 3.0 / 40f64.sqrt(), "mean z {zbar}");
}

#[test]
fn seeds_fix_the_dataset() {
    let render = |seed| {
        let cfg = Preset::Db2Continuous.config(8, 2, seed);
        let sim = simulate_dataset(&cfg).unwrap();
        let mut data = Vec::new();
        write_matches(&mut data, &sim.data, &[]).unwrap();
        let mut truth = Vec::new();
        write_truth(&mut truth, &cfg, &sim, &[]).unwrap();
        (data, truth)
    };
    assert_eq!(render(5), render(5));
    assert_ne!(render(5).0, render(6).0);
}

#[test]
fn truth_file_lists_parameters_effects_and_counts() {
    let cfg = Preset::Db1Categorical.config(4, 2, 8);
    let sim = simulate_dataset(&cfg).unwrap();
    let mut buf = Vec::new();
    write_truth(&mut buf, &cfg, &sim, &["note".into()]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().filter(|l| !l.starts_with('#')).skip(1).map(|l| l.split(',').collect()).collect();
    let kinds = |k: &str| rows.iter().filter(|r| r[0] == k).count();
    assert_eq!(kinds("tau"), 5);
    assert_eq!(kinds("b"), 4);
    assert_eq!(kinds("count"), 4 * sim.data.len());
    let beta0: f64 = rows.iter().find(|r| r[1] == "beta0").unwrap()[2].parse().unwrap();
    assert_eq!(beta0, cfg.tau_true.fixed.beta0);
    let total: u64 = rows.iter().filter(|r| r[0] == "count").map(|r| r[2].parse::<u64>().unwrap()).sum();
    assert_eq!(total as f64, sim.data.total_matches());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = flat_config(1, 2, 0);
    assert!(matches!(simulate_dataset(&cfg), Err(Error::Config(_))));
    cfg.f = 4;
    cfg.quality = QualityAssignment::Table(vec![1.0; 3]);
    assert!(matches!(simulate_dataset(&cfg), Err(Error::Config(_))));
}

#[test]
fn quality_patterns_of_the_summaries() {
    for preset in [Preset::Db1Categorical, Preset::Db2Categorical] {
        let sim = simulate_dataset(&preset.config(60, 4, 12)).unwrap();
        let QualityScheme::Categorical { qmax } = preset.scheme() else { unreachable!() };
        let binning = Binning::Labels { qmax };
        let y = summarize(&sim.data, Statistic::Matches, binning).unwrap();
        let ratio = summarize(&sim.data, Statistic::MatchRatio, binning).unwrap();
        let n = qmax as usize;
        for k in 0..n - 1 {
            assert!(y.cells[k + 1][k + 1].unwrap().mean > y.cells[k][k].unwrap().mean, "{}: Y diagonal", preset.name());
            assert!(ratio.cells[k + 1][k + 1].unwrap().mean < ratio.cells[k][k].unwrap().mean, "{}: ratio diagonal", preset.name());
        }
    }
}

fn small_coverage(seed: u64) -> CoverageConfig {
    let mut cfg = CoverageConfig::new(Preset::Db1Continuous.config(20, 3, seed), 2);
    cfg.h = 300;
    cfg.r = 60;
    cfg.mc_draws = 2_000;
    cfg.truth_mc_draws = 50_000;
    cfg.queries = vec![PrcQuery { w: 8, m1: 30, m2: 30, q1: 0.4, q2: 0.6 }];
    cfg
}

#[test]
fn two_run_coverage_is_a_pair_of_trials() {
    let cfg = small_coverage(31);
    let a = run_coverage(&cfg).unwrap();
    assert_eq!(a.quantities.len(), 5);
    assert_eq!(a.outcomes.len() + a.failures.len(), 2);
    for q in &a.quantities {
        if q.evaluated == 2 {
            assert!([0.0, 0.5, 1.0].contains(&q.fraction()), "{}", q.name);
        }
    }
    let b = run_coverage(&cfg).unwrap();
    assert_eq!(a.quantities, b.quantities);
    let mut csv = Vec::new();
    a.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 6);
    let mut one = cfg.clone();
    one.runs = 1;
    assert!(run_coverage(&one).is_err());
}

#[test]
fn true_prc_is_stable_across_seeds() {
    let cfg = small_coverage(1);
    for q in &cfg.queries {
        let (a, sa) = true_prc(&cfg, q, 100).unwrap();
        let (b, sb) = true_prc(&cfg, q, 200).unwrap();
        assert!((a - b).abs() <= 3.0 * (sa * sa + sb * sb).sqrt(), "{a} +- {sa} vs {b} +- {sb}");
    }
}

#[test]
fn held_coordinates_are_left_out_of_the_tally() {
    let mut cfg = small_coverage(44);
    cfg.hold_at_truth = vec![false, false, true, false];
    let report = run_coverage(&cfg).unwrap();
    assert_eq!(report.quantities[2].evaluated, 0);
    for o in &report.outcomes {
        assert_eq!(o.tau_hat[2], cfg.sim.tau_true.fixed.beta0);
        assert_eq!(o.proposal_sd[2], 0.0);
    }
    assert!(report.mean_parameter_coverage(4).is_finite());
}
