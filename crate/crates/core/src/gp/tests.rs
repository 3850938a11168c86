use super::*;
use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn obs1(t: f64, v: f64, seq: u64) -> TimedObservation {
    TimedObservation::new(Source::Operator, seq, t, vec![v])
}

/// Dense joint-Gaussian oracle: assemble the covariance of
/// [grid values; noisy observations] and apply the block conditioning
/// formula with an explicit LU inverse.
fn dense_oracle(
    params: &KernelParams,
    obs: &[(f64, f64)],
    grid: &[f64],
) -> (DVector<f64>, DMatrix<f64>) {
    let m = grid.len();
    let n = obs.len();
    let times: Vec<f64> = grid.iter().copied().chain(obs.iter().map(|o| o.0)).collect();
    let mut joint = DMatrix::from_fn(m + n, m + n, |i, j| params.covariance(times[i], times[j]));
    for i in m..m + n {
        joint[(i, i)] += params.noise_variance;
    }
    let a = joint.view((0, 0), (m, m)).into_owned();
    let b = joint.view((0, m), (m, n)).into_owned();
    let c = joint.view((m, m), (n, n)).into_owned();
    let c_inv = c.try_inverse().expect("invertible");
    let y = DVector::from_iterator(n, obs.iter().map(|o| o.1));
    (&b * &c_inv * y, a - &b * &c_inv * b.transpose())
}

fn dense_log_density(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    let n = x.len() as f64;
    let diff = x - mean;
    let inv = cov.clone().try_inverse().unwrap();
    let q = (diff.transpose() * inv * &diff)[(0, 0)];
    -0.5 * (q + cov.determinant().ln() + n * (2.0 * std::f64::consts::PI).ln())
}

#[test]
fn prior_recovered_without_data() {
    let p = KernelParams::new(1.0, 1.0, 1e-6).unwrap();
    let grid = TimeGrid::new(0.0, 9, 0.1).unwrap();
    let post = posterior(&p, 2, &[], &grid).unwrap();
    assert!(post.mean.iter().all(|&m| m == 0.0));
    for i in 0..grid.len() {
        assert_eq!(post.variance_at(i), vec![1.0, 1.0]);
    }
}

#[test]
fn interpolates_observed_point() {
    let p = KernelParams::new(1.0, 1.0, 1e-12).unwrap();
    let grid = TimeGrid::new(0.0, 3, 0.5).unwrap();
    let post = posterior(&p, 1, &[obs1(0.0, 2.0, 0)], &grid).unwrap();
    assert_abs_diff_eq!(post.mean[(0, 0)], 2.0, epsilon = 1e-6);
}

#[test]
fn matches_dense_conditioning_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let p = KernelParams::new(rng.random_range(0.5..2.0), rng.random_range(0.3..2.0), rng.random_range(1e-3..1e-1)).unwrap();
        let grid = TimeGrid::new(rng.random_range(-1.0..1.0), 19, 0.1).unwrap();
        let raw: Vec<(f64, f64)> = (0..5)
            .map(|_| (rng.random_range(-2.0..3.0), rng.random_range(-2.0..2.0)))
            .collect();
        let obs: Vec<_> = raw.iter().enumerate().map(|(i, &(t, v))| obs1(t, v, i as u64)).collect();
        let post = posterior(&p, 1, &obs, &grid).unwrap();
        let (mean, cov) = dense_oracle(&p, &raw, &grid.times());
        let err_m = (post.mean.column(0) - mean).amax();
        let err_c = (&post.covariance[0] - cov).amax();
        assert!(err_m < 1e-8 && err_c < 1e-8, "mean {err_m:e} cov {err_c:e}");
    }
}

#[test]
fn predictive_std_examples() {
    let p = KernelParams::new(2.0, 1.0, 1e-6).unwrap();
    let s = predictive_std_at_now(&p, 2, &[], 5.0).unwrap();
    assert_abs_diff_eq!(s[0], 2f64.sqrt(), epsilon = 1e-12);

    let q = KernelParams::new(1.0, 1.0, 1e-6).unwrap();
    let s = predictive_std_at_now(&q, 1, &[obs1(3.0, 0.4, 0)], 3.0).unwrap();
    assert_abs_diff_eq!(s[0], 1e-3, epsilon = 1e-5);

    // closed form for one point: σ_f² − k(τ)²/(σ_f² + σ_n²)
    let mut prev = 0.0;
    for age in [0.5, 1.0, 2.0] {
        let s = predictive_std_at_now(&q, 1, &[obs1(0.0, 1.0, 0)], age).unwrap()[0];
        let k = q.covariance(0.0, age);
        let closed = (q.signal_variance - k * k / (q.signal_variance + q.noise_variance)).sqrt();
        assert_abs_diff_eq!(s, closed, epsilon = 1e-9);
        assert!(s > prev);
        prev = s;
    }
}

#[test]
fn sampling_is_deterministic_and_degenerate_safe() {
    let p = KernelParams::new(1.0, 0.5, 1e-2).unwrap();
    let grid = TimeGrid::new(0.0, 4, 0.2).unwrap();
    let post = posterior(&p, 2, &[TimedObservation::new(Source::Robot, 0, 0.1, vec![1.0, -1.0])], &grid).unwrap();
    let a = sample(&post, 3, 42).unwrap();
    let b = sample(&post, 3, 42).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|s| s.shape() == (5, 2)));

    let mut zero = post.clone();
    for c in &mut zero.covariance {
        c.fill(0.0);
    }
    for s in sample(&zero, 4, 1).unwrap() {
        assert_eq!(s, zero.mean);
    }
}

#[test]
fn sampling_monte_carlo_moments() {
    let p = KernelParams::new(1.5, 1.0, 0.1).unwrap();
    let grid = TimeGrid::new(0.7, 1, 0.1).unwrap();
    let post = posterior(&p, 1, &[obs1(0.0, 0.8, 0)], &grid).unwrap();
    let n = 10_000;
    let draws = sample(&post, n, 3).unwrap();
    let xs: Vec<f64> = draws.iter().map(|d| d[(0, 0)]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let m0 = post.mean[(0, 0)];
    let v0 = post.covariance[0][(0, 0)];
    assert!((mean - m0).abs() < 5.0 * (v0 / n as f64).sqrt());
    // var of the sample variance ≈ 2σ⁴/(n−1)
    assert!((var - v0).abs() < 5.0 * (2.0 * v0 * v0 / (n - 1) as f64).sqrt());
}

#[test]
fn log_density_examples() {
    let grid = TimeGrid::new(0.0, 1, 1.0).unwrap();
    let post = GpPosterior {
        grid,
        mean: DMatrix::zeros(1, 1),
        covariance: vec![DMatrix::identity(1, 1)],
        conditioning_set: vec![],
    };
    let lp = post.prepare().unwrap().log_density(&DMatrix::zeros(1, 1));
    assert_abs_diff_eq!(lp, standard_normal_log_density(0.0), epsilon = 1e-9);
    assert_abs_diff_eq!(lp, -0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-9);

    let p = KernelParams::new(1.0, 0.6, 0.05).unwrap();
    let grid = TimeGrid::new(0.0, 6, 0.25).unwrap();
    let raw = [(0.1, 0.3), (0.9, -0.2), (1.3, 0.5)];
    let obs: Vec<_> = raw.iter().enumerate().map(|(i, &(t, v))| obs1(t, v, i as u64)).collect();
    let post = posterior(&p, 1, &obs, &grid).unwrap();
    let at_mean = log_density(&post, &post.mean).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (om, oc) = dense_oracle(&p, &raw, &grid.times());
    for _ in 0..20 {
        let x = DMatrix::from_fn(7, 1, |i, _| post.mean[(i, 0)] + rng.random_range(-0.3..0.3));
        let lp = log_density(&post, &x).unwrap();
        assert!(lp < at_mean);
        let oracle = dense_log_density(&om, &oc, &x.column(0).into_owned());
        // the grid covariance is nearly singular; compare relative to magnitude
        assert_abs_diff_eq!(lp, oracle, epsilon = 1e-8 * oracle.abs().max(1.0));
    }
    assert!(matches!(
        log_density(&post, &DMatrix::zeros(3, 1)),
        Err(GpError::DimensionMismatch { .. })
    ));
}

#[test]
fn rejects_bad_observations() {
    let p = KernelParams::new(1.0, 1.0, 1e-3).unwrap();
    let grid = TimeGrid::new(0.0, 2, 0.1).unwrap();
    let bad = [obs1(0.0, f64::NAN, 0)];
    assert!(matches!(posterior(&p, 1, &bad, &grid), Err(GpError::NonFiniteObservation { .. })));
    let wrong_dim = [TimedObservation::new(Source::Robot, 0, 0.0, vec![1.0, 2.0])];
    assert!(matches!(posterior(&p, 1, &wrong_dim, &grid), Err(GpError::DimensionMismatch { .. })));
    let dup = [obs1(0.0, 1.0, 3), obs1(0.5, 1.0, 3)];
    assert!(matches!(posterior(&p, 1, &dup, &grid), Err(GpError::DuplicateSequence { .. })));
    assert!(TimeGrid::new(0.0, 0, 0.1).is_err());
    assert!(TimeGrid::new(0.0, 3, 0.0).is_err());
}

#[test]
fn overflowing_gram_names_timestamps() {
    let p = KernelParams::new(f64::MAX, 1.0, 1e-3).unwrap();
    let grid = TimeGrid::new(0.0, 1, 0.1).unwrap();
    let obs = [obs1(1.5, 1.0, 0), obs1(1.5, 1.0, 1)];
    match posterior(&p, 1, &obs, &grid) {
        Err(GpError::IllConditioned { timestamps }) => assert_eq!(timestamps, vec![1.5]),
        other => panic!("expected ill-conditioning, got {other:?}"),
    }
}

fn synthesize(length_scale: f64, n: usize, seed: u64) -> Vec<TimedObservation> {
    let truth = KernelParams::new(1.0, length_scale, 0.01).unwrap();
    let grid = TimeGrid::new(0.0, n - 1, 0.1).unwrap();
    let prior = posterior(&truth, 1, &[], &grid).unwrap();
    let draw = sample(&prior.scaled(1.0), 1, seed).unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    (0..n)
        .map(|i| {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal) * 0.1;
            obs1(grid.time(i), draw[(i, 0)] + noise, i as u64)
        })
        .collect()
}

#[test]
fn fit_recovers_generating_length_scale() {
    let obs = synthesize(1.0, 200, 5);
    let cands: Vec<_> = [0.25, 1.0, 4.0]
        .iter()
        .map(|&l| KernelParams::new(1.0, l, 0.01).unwrap())
        .collect();
    assert_eq!(fit_hyperparameters(&obs, &cands).unwrap().length_scale, 1.0);

    let single = [KernelParams::new(3.0, 0.2, 0.5).unwrap()];
    assert_eq!(fit_hyperparameters(&obs, &single).unwrap(), single[0]);

    let a = KernelParams::new(1.0, 1.0, 0.01).unwrap();
    let b = KernelParams::new(1.0, 1.0, 0.01).unwrap();
    let worse = KernelParams::new(1.0, 0.01, 0.01).unwrap();
    let picked = fit_hyperparameters(&obs, &[worse, a, b]).unwrap();
    assert_eq!(picked, a);

    assert!(matches!(
        fit_hyperparameters(&obs[..2], &cands),
        Err(GpError::TooFewObservations { .. })
    ));
    assert_eq!(fit_hyperparameters(&obs, &[]), Err(GpError::EmptySearchGrid));
}

#[test]
fn mixture_single_goal_and_symmetry() {
    let p = KernelParams::new(4.0, 1.0, 1e-3).unwrap();
    let grid = TimeGrid::new(1.0, 10, 0.1).unwrap();
    let obs: Vec<_> = (0..5)
        .map(|i| TimedObservation::new(Source::Robot, i, i as f64 * 0.2, vec![i as f64 * 0.2, 0.0]))
        .collect();
    let one = mixture_posterior(&p, &obs, &[vec![3.0, 0.0]], &grid, 0.01).unwrap();
    assert_eq!(one.weights, vec![1.0]);

    let two = mixture_posterior(&p, &obs, &[vec![3.0, 1.0], vec![3.0, -1.0]], &grid, 0.01).unwrap();
    assert_abs_diff_eq!(two.weights[0], 0.5, epsilon = 1e-9);
    assert_abs_diff_eq!(two.weights[1], 0.5, epsilon = 1e-9);

    assert_eq!(
        mixture_posterior(&p, &obs, &[], &grid, 0.01).unwrap_err(),
        GpError::EmptyGoals
    );
}

#[test]
fn mixture_prefers_goal_data_moves_toward() {
    let p = KernelParams::new(1.0, 1.0, 1e-2).unwrap();
    let grid = TimeGrid::new(1.0, 5, 0.1).unwrap();
    let raw = [(0.0, 0.0), (0.4, 0.3), (0.8, 0.6)];
    let obs: Vec<_> = raw.iter().enumerate().map(|(i, &(t, v))| obs1(t, v, i as u64)).collect();
    let goal_a = 1.1;
    let goal_b = -1.1;
    let mix = mixture_posterior(&p, &obs, &[vec![goal_a], vec![goal_b]], &grid, 0.05).unwrap();
    assert!(mix.weights[0] > mix.weights[1]);

    // oracle: p(obs | goal) from the dense joint covariance of [obs; goal]
    let oracle_lml = |goal: f64| {
        let times = [0.0, 0.4, 0.8, grid.last_time()];
        let noise = [1e-2, 1e-2, 1e-2, 0.05];
        let cov = DMatrix::from_fn(4, 4, |i, j| {
            p.covariance(times[i], times[j]) + if i == j { noise[i] } else { 0.0 }
        });
        let x = DVector::from_vec(vec![0.0, 0.3, 0.6, goal]);
        let joint = dense_log_density(&DVector::zeros(4), &cov, &x);
        let marg = dense_log_density(
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, p.signal_variance + 0.05),
            &DVector::from_element(1, goal),
        );
        joint - marg
    };
    let la = oracle_lml(goal_a);
    let lb = oracle_lml(goal_b);
    let wa = 1.0 / (1.0 + (lb - la).exp());
    assert_abs_diff_eq!(mix.weights[0], wa, epsilon = 1e-8);
}

#[test]
fn grid_index_lookup() {
    let g = TimeGrid::new(2.0, 4, 0.5).unwrap();
    assert_eq!(g.len(), 5);
    assert_eq!(g.index_of(2.0), Some(0));
    assert_eq!(g.index_of(3.01), Some(2));
    assert_eq!(g.index_of(10.0), None);
    assert_eq!(g.last_time(), 4.0);
}

fn arb_obs() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0), 0..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_observation_never_increases_variance(raw in arb_obs(), extra in (-3.0f64..3.0, -2.0f64..2.0), q in -3.0f64..4.0) {
        let p = KernelParams::new(1.0, 0.8, 1e-2).unwrap();
        let grid = TimeGrid::new(q, 3, 0.3).unwrap();
        let obs: Vec<_> = raw.iter().enumerate().map(|(i, &(t, v))| obs1(t, v, i as u64)).collect();
        let mut more = obs.clone();
        more.push(obs1(extra.0, extra.1, 99));
        let a = posterior(&p, 1, &obs, &grid).unwrap();
        let b = posterior(&p, 1, &more, &grid).unwrap();
        for i in 0..grid.len() {
            prop_assert!(b.covariance[0][(i, i)] <= a.covariance[0][(i, i)] + 1e-12);
        }
        prop_assert!(a.min_eigenvalue() >= -PSD_TOLERANCE);
        prop_assert!(b.min_eigenvalue() >= -PSD_TOLERANCE);
    }

    #[test]
    fn dropped_observation_equals_never_sent(raw in prop::collection::vec((-3.0f64..3.0, -2.0f64..2.0), 1..8), k in 0usize..8, seed in 0u64..1000) {
        let k = k % raw.len();
        let p = KernelParams::new(1.0, 0.8, 1e-2).unwrap();
        let grid = TimeGrid::new(0.0, 5, 0.2).unwrap();
        let all: Vec<_> = raw.iter().enumerate().map(|(i, &(t, v))| obs1(t, v, i as u64)).collect();
        let mut never: Vec<_> = all.clone();
        never.remove(k);
        // same set delivered in a scrambled order
        let mut shuffled = never.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = posterior(&p, 1, &never, &grid).unwrap();
        let b = posterior(&p, 1, &shuffled, &grid).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn stationary_under_time_shift(raw in arb_obs(), shift in -50.0f64..50.0) {
        let p = KernelParams::new(1.0, 0.8, 1e-2).unwrap();
        let obs: Vec<_> = raw.iter().enumerate().map(|(i, &(t, v))| obs1(t, v, i as u64)).collect();
        let moved: Vec<_> = raw.iter().enumerate().map(|(i, &(t, v))| obs1(t + shift, v, i as u64)).collect();
        let a = posterior(&p, 1, &obs, &TimeGrid::new(0.5, 4, 0.25).unwrap()).unwrap();
        let b = posterior(&p, 1, &moved, &TimeGrid::new(0.5 + shift, 4, 0.25).unwrap()).unwrap();
        prop_assert!((&a.mean - &b.mean).amax() < 1e-10);
        prop_assert!((&a.covariance[0] - &b.covariance[0]).amax() < 1e-10);
    }

    #[test]
    fn mixture_weights_normalized_and_equivariant(goals in prop::collection::vec(-3.0f64..3.0, 1..5), raw in arb_obs(), rot in 0usize..5) {
        let p = KernelParams::new(1.0, 1.0, 1e-2).unwrap();
        let grid = TimeGrid::new(3.5, 4, 0.1).unwrap();
        let obs: Vec<_> = raw.iter().enumerate().map(|(i, &(t, v))| obs1(t, v, i as u64)).collect();
        let gs: Vec<Vec<f64>> = goals.iter().map(|g| vec![*g]).collect();
        let mix = mixture_posterior(&p, &obs, &gs, &grid, 0.05).unwrap();
        prop_assert!((mix.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(mix.weights.iter().all(|w| *w >= 0.0));
        let r = rot % gs.len();
        let mut rotated = gs.clone();
        rotated.rotate_left(r);
        let mix_r = mixture_posterior(&p, &obs, &rotated, &grid, 0.05).unwrap();
        for (i, w) in mix_r.weights.iter().enumerate() {
            prop_assert!((w - mix.weights[(i + r) % gs.len()]).abs() < 1e-12);
        }
    }
}
