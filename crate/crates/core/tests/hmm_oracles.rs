mod common;

use approx::assert_relative_eq;
use hmm_order::hmm::{
    ffbs_sample_path, joint_log_density, log_likelihood, simulate, smooth, stationary, HmmParams,
};
use hmm_order::stats::rng_from;
use rand::Rng;

fn random_params<R: Rng>(k: usize, rng: &mut R) -> HmmParams<f64> {
    let trans = (0..k)
        .map(|_| {
            let w: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let means = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    let vars = (0..k).map(|_| rng.random_range(0.1..2.0)).collect();
    HmmParams::new(trans, means, vars).unwrap()
}

#[test]
fn forward_matches_path_enumeration() {
    let mut rng = rng_from(2024);
    for _ in 0..100 {
        let k = rng.random_range(1..=3);
        let n = rng.random_range(1..=7);
        let p = random_params(k, &mut rng);
        let obs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mu = p.stationary().unwrap().mu;
        let brute = common::brute_force_likelihood(&p, &mu, &obs);
        let ll = log_likelihood(&p, &obs).unwrap();
        assert_relative_eq!(ll.exp(), brute, max_relative = 1e-10);
    }
}

#[test]
fn smoothing_matches_path_enumeration() {
    let mut rng = rng_from(7);
    for _ in 0..30 {
        let k = rng.random_range(2..=3);
        let n = rng.random_range(2..=6);
        let p = random_params(k, &mut rng);
        let obs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mu = p.stationary().unwrap().mu;
        let brute = common::brute_force_marginals(&p, &mu, &obs);
        let s = smooth(&p, &obs).unwrap();
        for t in 0..n {
            for j in 0..k {
                assert!((s.gamma[t * k + j] - brute[t][j]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn joint_density_sums_to_likelihood() {
    let mut rng = rng_from(11);
    let p = random_params(2, &mut rng);
    let obs = [0.3, -1.0, 2.0, 0.1];
    let mut total = 0.0;
    for code in 0..16usize {
        let path: Vec<usize> = (0..4).map(|i| (code >> i) & 1).collect();
        total += joint_log_density(&p, &path, &obs).unwrap().exp();
    }
    assert_relative_eq!(total, log_likelihood(&p, &obs).unwrap().exp(), max_relative = 1e-12);
}

#[test]
fn ffbs_path_frequencies_match_smoothing() {
    let mut rng = rng_from(5);
    let p = random_params(3, &mut rng);
    let obs = [0.0, 1.5, -0.5, 0.7, 2.0];
    let mu = p.stationary().unwrap().mu;
    let exact = common::brute_force_marginals(&p, &mu, &obs);
    let draws = 40_000;
    let mut counts = vec![vec![0usize; 3]; obs.len()];
    let mut srng = rng_from(99);
    for _ in 0..draws {
        let path = ffbs_sample_path(&p, &obs, &mut srng).unwrap();
        for (t, &x) in path.iter().enumerate() {
            counts[t][x] += 1;
        }
    }
    for t in 0..obs.len() {
        for j in 0..3 {
            let f = counts[t][j] as f64 / draws as f64;
            let se = (exact[t][j] * (1.0 - exact[t][j]) / draws as f64).sqrt();
            assert!((f - exact[t][j]).abs() < 4.0 * se + 1e-9, "t {t} state {j}: {f} vs {}", exact[t][j]);
        }
    }
}

#[test]
fn stationary_two_state_closed_form() {
    // mu_1 = q21 / (q12 + q21)
    let mu = stationary(&[vec![0.7, 0.3], vec![0.6, 0.4]]).unwrap().mu;
    assert_relative_eq!(mu[0], 2.0 / 3.0, epsilon = 1e-14);
}

#[test]
fn simulated_state_frequencies_follow_stationary_law() {
    let p = HmmParams::new(vec![vec![0.9, 0.1], vec![0.3, 0.7]], vec![0.0, 5.0], vec![1.0, 1.0]).unwrap();
    let t = simulate(&p, 100_000, 3).unwrap();
    let ones = t.hidden.unwrap().iter().filter(|&&x| x == 1).count() as f64 / 100_000.0;
    // stationary mass of state 2 is 0.25; autocorrelation inflates the i.i.d. error a few times
    assert!((ones - 0.25).abs() < 0.01, "{ones}");
}

#[test]
fn simulation_is_seed_deterministic() {
    let p = HmmParams::new(vec![vec![0.5, 0.5], vec![0.2, 0.8]], vec![0.0, 1.0], vec![1.0, 0.5]).unwrap();
    assert_eq!(simulate(&p, 50, 4).unwrap(), simulate(&p, 50, 4).unwrap());
    assert_ne!(simulate(&p, 50, 4).unwrap().obs, simulate(&p, 50, 5).unwrap().obs);
}

#[test]
fn long_sequence_stays_finite() {
    let p = HmmParams::new(vec![vec![0.99, 0.01], vec![0.01, 0.99]], vec![0.0f64, 100.0], vec![1e-4, 1e-4]).unwrap();
    let t = simulate(&p, 200_000, 8).unwrap();
    let ll: f64 = log_likelihood(&p, &t.obs).unwrap();
    assert!(ll.is_finite());
}

#[test]
fn invalid_inputs_are_rejected() {
    let p = HmmParams::new(vec![vec![1.0]], vec![0.0], vec![1.0]).unwrap();
    assert!(log_likelihood(&p, &[]).is_err());
    assert!(log_likelihood(&p, &[f64::NAN]).is_err());
    assert!(HmmParams::new(vec![vec![0.5, 0.6], vec![0.5, 0.5]], vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
    assert!(HmmParams::new(vec![vec![1.0]], vec![0.0], vec![0.0]).is_err());
}
