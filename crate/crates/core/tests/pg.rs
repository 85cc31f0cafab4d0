use leqg_core::linalg::{Mat, Vector};
use leqg_core::model::ScalarParams;
use leqg_core::oracle;
use leqg_core::pg::{self, CriticParams, TrainConfig};
use leqg_core::policy::{self, PolicyParams};
use leqg_core::{solve, validate, Error, ModelSpec, ValidatedModel};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn table2() -> ValidatedModel {
    validate(ModelSpec::table2()).unwrap()
}

fn zero_cost(horizon: usize) -> ValidatedModel {
    validate(
        ScalarParams {
            m_mat: 0.0,
            n_mat: 0.0,
            q: 0.0,
            m_terminal: 0.0,
            horizon,
            ..ScalarParams::TABLE2
        }
        .into_spec(),
    )
    .unwrap()
}

fn exact_moments(model: &ValidatedModel, k: &PolicyParams) -> Vec<Mat> {
    let m = policy::state_moments(model, k);
    (0..model.horizon).map(|t| m.second_moment_z(t)).collect()
}

#[test]
fn zero_cost_unshifted_objective_is_zero() {
    let model = zero_cost(5);
    let (est, se) = pg::objective_estimate(&model, &PolicyParams::zeros(&model), 100, 1).unwrap();
    assert_eq!((est, se), (0.0, 0.0));
    assert!(matches!(
        pg::objective_estimate(&model, &PolicyParams::zeros(&model), 0, 1),
        Err(Error::Precondition(_))
    ));
}

#[test]
fn zero_cost_objective_is_minus_entropy() {
    let model = zero_cost(3);
    let mut k = PolicyParams::zeros(&model);
    k.e_off = vec![Vector::from_element(1, 0.3); 3];
    let (est, _) = pg::objective_estimate(&model, &k, 50, 1).unwrap();
    let entropy = 3.0 * 0.5 * 0.09 / 0.15;
    assert!((est + entropy).abs() < 1e-12, "{est}");
}

#[test]
fn doubling_rollouts_halves_variance() {
    let model = table2();
    let k = PolicyParams::from_solution(&solve(&model).unwrap());
    let (_, se1) = pg::objective_estimate(&model, &k, 20_000, 2).unwrap();
    let (_, se2) = pg::objective_estimate(&model, &k, 40_000, 2).unwrap();
    let ratio = (se1 * se1) / (se2 * se2);
    assert!((ratio - 2.0).abs() < 0.3, "{ratio}");
}

#[test]
fn exact_step_at_optimum_is_stationary() {
    let model = table2();
    let k = PolicyParams::from_solution(&solve(&model).unwrap());
    let (grad, _) = policy::exact_gradient(&model, &k).unwrap();
    let next = pg::npg_step(&k, &grad, &exact_moments(&model, &k), 1e-2);
    let mut diff = 0.0f64;
    for t in 0..model.horizon {
        diff = diff
            .max((&next.d[t] - &k.d[t]).amax())
            .max((&next.d_off[t] - &k.d_off[t]).amax())
            .max((&next.e[t] - &k.e[t]).amax())
            .max((&next.f_off[t] - &k.f_off[t]).amax());
    }
    assert!(diff <= 1e-10, "{diff}");
}

#[test]
fn descent_on_offset_lowers_objective() {
    let model = table2();
    let mut k = PolicyParams::from_solution(&solve(&model).unwrap());
    k.d_off[3][0] += 0.2;
    let before = policy::evaluate(&model, &k).unwrap().objective;
    let (grad, _) = policy::exact_gradient(&model, &k).unwrap();
    assert!(grad.d_off[3][0] > 0.0);
    let mut only_d = PolicyParams::zeros(&model);
    only_d.d_off[3] = grad.d_off[3].clone();
    let next = pg::npg_step(&k, &only_d, &exact_moments(&model, &k), 1e-2);
    assert!(policy::evaluate(&model, &next).unwrap().objective < before);
}

#[test]
fn singular_moments_fall_back_to_pooled() {
    let model = table2();
    let k = PolicyParams::zeros(&model);
    let mut grad = PolicyParams::zeros(&model);
    grad.d_off[0][0] = 1.0;
    let mut covs = exact_moments(&model, &k);
    // Deterministic x0: the step-0 moment [[1, 1], [1, 1]] is singular.
    assert!(covs[0]
        .clone()
        .try_inverse()
        .map_or(true, |m| m.amax() > 1e12));
    covs[0] = Mat::from_element(2, 2, 1.0);
    let next = pg::npg_step(&k, &grad, &covs, 1e-2);
    assert!(next.d_off[0][0].is_finite() && next.d_off[0][0] < 0.0);
    let all_singular = vec![Mat::from_element(2, 2, 1.0); model.horizon];
    assert!(pg::npg_step(&k, &grad, &all_singular, 1e-2).d_off[0][0].is_finite());
}

#[test]
fn critic_is_unbiased_at_fixed_point() {
    let model = validate(
        ScalarParams {
            horizon: 3,
            ..ScalarParams::TABLE2
        }
        .into_spec(),
    )
    .unwrap();
    let sol = solve(&model).unwrap();
    let k = PolicyParams::from_solution(&sol);
    let start = CriticParams::from_solution(&sol);
    let drifts: Vec<f64> = (0..40)
        .map(|s| {
            let batch = pg::critic_batch(&model, &k, 256, s, 1.0);
            pg::critic_td_update(&model, &start, &batch, 0.1)
                .unwrap()
                .value[0]
                .quad[(0, 0)]
                - start.value[0].quad[(0, 0)]
        })
        .collect();
    let n = drifts.len() as f64;
    let mean = drifts.iter().sum::<f64>() / n;
    let sd = (drifts.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() <= 3.0 * sd / n.sqrt(), "mean {mean}, sd {sd}");
}

#[test]
fn long_td_run_recovers_value() {
    let model = validate(
        ScalarParams {
            horizon: 2,
            ..ScalarParams::TABLE2
        }
        .into_spec(),
    )
    .unwrap();
    let sol = solve(&model).unwrap();
    let k = PolicyParams::from_solution(&sol);
    let mut critic = CriticParams::zeros(&model);
    for s in 0..10_000 {
        let batch = pg::critic_batch(&model, &k, 32, s, 1.0);
        critic = pg::critic_td_update(&model, &critic, &batch, 0.02).unwrap();
    }
    let (got, want) = (critic.value[0].quad[(0, 0)], sol.value[0].quad[(0, 0)]);
    assert!((got - want).abs() <= 0.05 * want, "{got} vs {want}");
}

#[test]
fn training_from_optimum_stays_flat() {
    let model = table2();
    let sol = solve(&model).unwrap();
    let config = TrainConfig {
        episodes: 50,
        ..TrainConfig::default()
    };
    let (_, history) = pg::train(&model, PolicyParams::from_solution(&sol), &config).unwrap();
    let first = history[0].c_estimate;
    assert!(history.iter().all(|h| (h.c_estimate - first).abs() < 1e-10));
    assert!(pg::history_json_lines(&history)
        .lines()
        .next()
        .unwrap()
        .contains("\"C_estimate\""));
}

#[test]
fn oversized_steps_diverge() {
    let model = table2();
    let config = TrainConfig {
        delta0: 0.5,
        episodes: 200,
        ..TrainConfig::default()
    };
    let res = pg::train(&model, PolicyParams::zeros(&model), &config);
    assert!(matches!(res, Err(Error::Diverged { .. })), "{res:?}");
}

fn random_policy(rng: &mut ChaCha8Rng, model: &ValidatedModel) -> PolicyParams {
    let mut k = PolicyParams::zeros(model);
    for t in 0..model.horizon {
        k.d[t][(0, 0)] = rng.random_range(-0.5..0.5);
        k.d_off[t][0] = rng.random_range(-0.5..0.5);
        k.e[t][(0, 0)] = rng.random_range(-0.5..0.5);
        k.e_off[t][0] = rng.random_range(-0.5..0.5);
        k.f[t][(0, 0)] = rng.random_range(-0.5..0.5);
        k.f_off[t][0] = rng.random_range(-0.5..0.5);
    }
    k
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn objective_sandwich(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, _) = oracle::random_scalar_instance(&mut rng);
        let model = validate(model.into_spec().with_horizon(3)).unwrap();
        let sol = solve(&model).unwrap();
        prop_assume!(sol.saddle_verified);
        let opt = PolicyParams::from_solution(&sol);
        let k = random_policy(&mut rng, &model);
        let value = |p: &PolicyParams| policy::evaluate(&model, p).unwrap().objective;
        let v = value(&opt);
        let shift_dev = opt.with_shift_of(&k);
        let control_dev = k.with_shift_of(&opt);
        let tol = 1e-9 * v.abs().max(1.0);
        prop_assert!(value(&shift_dev) <= v + tol);
        prop_assert!(v <= value(&control_dev) + tol);
    }
}
