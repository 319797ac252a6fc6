mod common;

use hmm_order::bench::{bench_target, run_bench, write_reports, BenchKind, BenchSpec, GAUSS_MIX_SPACING};
use hmm_order::gibbs::{run_gibbs, GibbsConfig};
use hmm_order::harness::{build_params, run_experiment, run_rep, write_table, ExperimentSpec, HarnessConfig, TransitionKind};
use hmm_order::hmm::{log_likelihood, simulate, HmmParams};
use hmm_order::impfn::Tail;
use hmm_order::ncest::{EstimatorConfig, Method};
use hmm_order::prior::{mixture_log_likelihood, PriorSpec};
use hmm_order::reparam::ModelKind;
use hmm_order::select::{consistency_probe, decide, select_k, select_k_mixture};
use hmm_order::stats::{mean, rng_from, variance};

fn quick() -> EstimatorConfig {
    EstimatorConfig { n_draws: 1500, n_burn: 500, n_is: 3000, region_mc: 5000, ..EstimatorConfig::default() }
}

#[test]
fn single_state_gibbs_matches_posterior_moments() {
    let truth = HmmParams::new(vec![vec![1.0]], vec![-1.0], vec![2.0]).unwrap();
    let obs = simulate(&truth, 60, 3).unwrap().obs;
    let prior = PriorSpec::default_for(&obs, 1).unwrap();
    let exact = common::normal_model_posterior(&obs, &prior);
    let cfg = GibbsConfig { n_iter: 21_000, n_burn: 1000, ..GibbsConfig::default() };
    let post = run_gibbs(&obs, 1, &prior, &cfg, 4).unwrap();
    assert_eq!(post.len(), 20_000);
    let mus: Vec<f64> = post.draws.iter().map(|p| p.means()[0]).collect();
    let lvs: Vec<f64> = post.draws.iter().map(|p| p.variances()[0].ln()).collect();
    // a two-block Gibbs chain on near-orthogonal blocks mixes almost like i.i.d. draws
    let se_mu = (variance(&mus) / mus.len() as f64).sqrt();
    let se_lv = (variance(&lvs) / lvs.len() as f64).sqrt();
    assert!((mean(&mus) - exact.mean_mu).abs() < 4.0 * se_mu, "{} vs {}", mean(&mus), exact.mean_mu);
    assert!((mean(&lvs) - exact.mean_log_var).abs() < 4.0 * se_lv, "{} vs {}", mean(&lvs), exact.mean_log_var);
}

#[test]
fn gibbs_concentrates_near_truth_and_writes_csv() {
    let truth = HmmParams::new(vec![vec![0.9, 0.1], vec![0.2, 0.8]], vec![0.0, 3.0], vec![0.25, 0.25]).unwrap();
    let obs = simulate(&truth, 500, 5).unwrap().obs;
    let prior = PriorSpec::default_for(&obs, 2).unwrap();
    let cfg = GibbsConfig { n_iter: 3000, n_burn: 500, thin: 5, ..GibbsConfig::default() };
    let post = run_gibbs(&obs, 2, &prior, &cfg, 6).unwrap();
    assert_eq!(post.len(), 500);
    let sorted: Vec<HmmParams<f64>> = post.draws.iter().map(|p| p.sorted_by_mean()).collect();
    let m0 = mean(&sorted.iter().map(|p| p.means()[0]).collect::<Vec<_>>());
    let q11 = mean(&sorted.iter().map(|p| p.q(0, 0)).collect::<Vec<_>>());
    assert!(m0.abs() < 0.1 && (q11 - 0.9).abs() < 0.05, "{m0} {q11}");
    for rate in post.acceptance_rates.values() {
        assert!((0.0..=1.0).contains(rate));
    }
    let mut buf = Vec::new();
    post.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "iter,q_11,q_12,q_21,q_22,mu_1,mu_2,var_1,var_2");
    assert_eq!(text.lines().count(), 501);
}

#[test]
fn mixture_likelihood_equals_hmm_with_identical_rows() {
    let mut rng = rng_from(3);
    for k in 1..=4 {
        let w: Vec<f64> = (1..=k).map(|i| i as f64).collect();
        let s: f64 = w.iter().sum();
        let row: Vec<f64> = w.iter().map(|x| x / s).collect();
        let p = HmmParams::new(vec![row; k], (0..k).map(|i| i as f64).collect(), vec![0.7; k]).unwrap();
        let obs: Vec<f64> = (0..50).map(|_| rand::Rng::random_range(&mut rng, -2.0..5.0)).collect();
        let a = mixture_log_likelihood(&p, &obs).unwrap();
        let b: f64 = log_likelihood(&p, &obs).unwrap();
        assert!((a - b).abs() < 1e-9 * b.abs(), "K={k}: {a} vs {b}");
    }
}

#[test]
fn decision_rule_prefers_smaller_indistinguishable_k() {
    assert_eq!(decide(&[(1, -100.0, 0.1), (2, -90.0, 0.1), (3, -89.9, 0.1)]), Some((2, 3, vec![2, 3])));
    assert_eq!(decide(&[(1, -100.0, 0.01), (2, -90.0, 0.01), (3, -89.0, 0.01)]), Some((3, 3, vec![])));
    assert_eq!(decide(&[(1, f64::NAN, 0.0), (2, -5.0, 0.0)]), Some((2, 2, vec![])));
    assert_eq!(decide(&[]), None);
}

#[test]
fn selection_finds_clear_two_state_structure() {
    let truth = HmmParams::new(vec![vec![0.9, 0.1], vec![0.1, 0.9]], vec![1.0, 2.0], vec![0.04, 0.04]).unwrap();
    let obs = simulate(&truth, 300, 8).unwrap().obs;
    let sel = select_k(&obs, 3, &quick(), 2).unwrap();
    assert_eq!(sel.k_hat, 2);
    assert_eq!(sel.model, ModelKind::Hmm);
    assert!(sel.log_ml(2).unwrap() > sel.log_ml(1).unwrap() + 50.0);
    let mix = select_k_mixture(&obs, 3, &quick(), 2).unwrap();
    assert_eq!(mix.k_hat, 2);
    // ignoring the serial dependence loses evidence
    assert!(sel.log_ml(2).unwrap() > mix.log_ml(2).unwrap());
}

#[test]
fn probe_reports_fits_per_candidate() {
    let truth = HmmParams::new(vec![vec![0.8, 0.2], vec![0.2, 0.8]], vec![1.0, 2.0], vec![0.04, 0.04]).unwrap();
    let cfg = EstimatorConfig { n_draws: 600, n_burn: 200, n_is: 1000, region_mc: 2000, ..EstimatorConfig::default() };
    let rep = consistency_probe(&truth, &[1, 2, 3], &[100, 200, 400], 2, &cfg, 1).unwrap();
    assert_eq!(rep.points.len(), 9);
    assert_eq!(rep.fits.len(), 2);
    let under = rep.points.iter().filter(|p| p.k == 1).map(|p| p.mean_log_ratio).collect::<Vec<_>>();
    assert!(under.windows(2).all(|w| w[1] < w[0]), "{under:?}");
}

fn cell(reps: usize) -> ExperimentSpec {
    ExperimentSpec {
        k_star: 2,
        sigma: 0.2,
        n: 150,
        q_kind: TransitionKind::P2,
        heter: true,
        reps,
        k_max: 3,
        master_seed: 12,
    }
}

#[test]
fn heterogeneous_sds_stay_in_range() {
    let spec = ExperimentSpec { k_star: 5, ..cell(1) };
    let mut rng = rng_from(0);
    for _ in 0..200 {
        let p = build_params(&spec, &mut rng).unwrap();
        for v in p.variances() {
            let s = v.sqrt();
            assert!((0.5 * 0.2..=2.5 * 0.2).contains(&s), "{s}");
        }
    }
}

#[test]
fn experiment_is_deterministic_and_tabulates() {
    let cfg = HarnessConfig { estimator: quick(), bic_restarts: 5, obs_dim: 2 };
    let spec = cell(2);
    assert_eq!(run_rep(&spec, &cfg, 1), run_rep(&spec, &cfg, 1));
    let row = run_experiment(&spec, &cfg).unwrap();
    assert_eq!(row.outcomes.len(), 2);
    assert!(row.ml_pct == 0.0 || row.ml_pct == 50.0 || row.ml_pct == 100.0);
    let mut buf = Vec::new();
    write_table(&[row], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("k_star,sigma,n,q_kind,heter,reps,ml_pct,bic_pct"));
    assert_eq!(text.lines().count(), 2);
    assert!(run_experiment(&cell(0), &cfg).is_err());
}

#[test]
fn benchmark_samplers_have_the_right_moments() {
    let mixed = bench_target(BenchKind::Mixed3D).unwrap().sample(200_000, 1);
    let x3: Vec<f64> = mixed.iter().map(|x| x[2]).collect();
    let x1: Vec<f64> = mixed.iter().map(|x| x[0]).collect();
    // Gamma(6, scale 2) has mean 12 and sd sqrt(24); N(1, 1) has mean 1
    assert!((mean(&x3) - 12.0).abs() < 4.0 * (24.0f64 / 200_000.0).sqrt());
    assert!((mean(&x1) - 1.0).abs() < 4.0 * (1.0f64 / 200_000.0).sqrt());
    let gm = bench_target(BenchKind::GaussMix3 { d: 5 }).unwrap().sample(200_000, 2);
    let first: Vec<f64> = gm.iter().map(|x| x[0]).collect();
    // mixture variance: 0.1 + spacing^2 * 2/3
    let var = 0.1 + GAUSS_MIX_SPACING * GAUSS_MIX_SPACING * 2.0 / 3.0;
    assert!((mean(&first) - GAUSS_MIX_SPACING).abs() < 4.0 * (var / 200_000.0).sqrt());
    assert!((variance(&first) - var).abs() < 0.05);
}

#[test]
fn benchmark_study_recovers_known_constant() {
    let spec = BenchSpec::new(BenchKind::GaussMix3 { d: 3 }, 2000, 2000, Method::Is, Tail::StudentT { df: 3.0 }, 12, 4);
    let report = run_bench(&spec).unwrap();
    assert_eq!(report.failures, 0);
    assert!(report.covers_zero() && report.width() < 0.2, "{:?}", report.ci);
    let mut buf = Vec::new();
    write_reports(&[report], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.lines().nth(1).unwrap().starts_with("1,3,2000,2000,is,t3,12,"));
}
