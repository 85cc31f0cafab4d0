use leqg_core::conditions;
use leqg_core::config::{load_config, to_config_string};
use leqg_core::duality::{self, MeasureShift};
use leqg_core::linalg::{self, Mat, Vector};
use leqg_core::model::ScalarParams;
use leqg_core::oracle;
use leqg_core::policy::{self, PolicyParams};
use leqg_core::solver::{self, ValueQuad};
use leqg_core::{solve, validate, ModelSpec};
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_params() -> impl Strategy<Value = ScalarParams> {
    (
        (
            -1.0..1.0f64,
            -1.2..1.2f64,
            -1.0..1.0f64,
            0.05..1.0f64,
            0.05..1.0f64,
        ),
        (
            0.0..3.0f64,
            0.5..3.0f64,
            -1.0..1.0f64,
            -1.0..1.0f64,
            -1.0..1.0f64,
        ),
        (
            0.0..3.0f64,
            -1.0..1.0f64,
            0.05..1.0f64,
            1usize..6,
            -2.0..2.0f64,
        ),
    )
        .prop_map(
            |(
                (a, a_mat, b, lambda, xi),
                (m_mat, n_mat, q, m, n),
                (m_terminal, m_terminal_linear, theta, horizon, x0),
            )| {
                ScalarParams {
                    a,
                    a_mat,
                    b,
                    lambda,
                    xi,
                    m_mat,
                    n_mat,
                    q,
                    m,
                    n,
                    m_terminal,
                    m_terminal_linear,
                    theta,
                    horizon,
                    x0,
                }
            },
        )
}

fn matrix(n: usize, m: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = Mat> {
    prop::collection::vec(range, n * m).prop_map(move |v| Mat::from_row_slice(n, m, &v))
}

fn spd(n: usize, floor: f64) -> impl Strategy<Value = Mat> {
    matrix(n, n, -1.0..1.0).prop_map(move |g| &g * g.transpose() + Mat::identity(n, n) * floor)
}

/// Two-state, one-control model with small random perturbations of a stable base.
fn planar_spec() -> impl Strategy<Value = ModelSpec> {
    (
        matrix(2, 2, -0.6..0.6),
        matrix(2, 1, -0.8..0.8),
        spd(2, 0.1),
        spd(1, 0.1),
        spd(2, 0.5),
        spd(1, 1.0),
        1usize..6,
        0.05..0.6f64,
    )
        .prop_map(|(a, b, lambda, xi, m, n, horizon, theta)| {
            let small = |x: &Mat| x * 0.2;
            ModelSpec {
                drift: Vector::from_vec(vec![0.1, -0.1]),
                transition: a,
                input: b,
                system_noise: vec![small(&lambda); horizon],
                exploration: vec![small(&xi); horizon],
                state_cost: m.clone(),
                control_cost: vec![n; horizon],
                cross_cost: Mat::from_row_slice(1, 2, &[0.1, -0.2]),
                state_linear: Vector::from_vec(vec![0.2, 0.0]),
                control_linear: Vector::from_vec(vec![-0.1]),
                terminal_cost: m,
                terminal_linear: Vector::zeros(2),
                theta,
                horizon,
                x0: Vector::from_vec(vec![1.0, -0.5]),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_round_trip(params in scalar_params()) {
        let spec = params.into_spec();
        let back = load_config(&to_config_string(&spec)).unwrap();
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn planar_config_round_trip(spec in planar_spec()) {
        let back = load_config(&to_config_string(&spec)).unwrap();
        prop_assert_eq!(back, spec);
    }

    #[test]
    fn validation_is_idempotent(spec in planar_spec()) {
        let once = validate(spec).unwrap().into_spec();
        let twice = validate(once.clone()).unwrap().into_spec();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn exploration_shift_vanishes(seed in any::<u64>(), xv in -3.0..3.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, _, f) = oracle::random_saddle_instance(&mut rng);
        let (_, _, eta) = solver::stationary_controls(&f, &Vector::from_element(1, xv)).unwrap();
        prop_assert!(eta.amax() <= 1e-12 * (1.0 + xv.abs()));
    }

    #[test]
    fn planar_value_is_symmetric_and_eta_free(spec in planar_spec()) {
        let model = validate(spec).unwrap();
        let sol = solve(&model).unwrap();
        for (v, g) in sol.value.iter().zip(&sol.gains) {
            prop_assert_eq!(&v.quad, &v.quad.transpose());
            prop_assert!(linalg::max_abs(&g.eta_gain) <= 1e-10 * (1.0 + linalg::max_abs(&v.quad)));
            prop_assert!(g.eta_offset.amax() <= 1e-10 * (1.0 + v.lin.amax()));
        }
        prop_assert!(sol.asymmetry.iter().all(|a| *a <= 1e-9));
    }

    #[test]
    fn recursion_matches_block_form(spec in planar_spec()) {
        let model = validate(spec).unwrap();
        let sol = solve(&model).unwrap();
        for t in 0..model.horizon {
            let f = &sol.fraktur[t];
            let pn = &sol.value[t + 1].quad;
            let l = Mat::from_fn(3, 2, |i, j| if i < 1 { f.a1_mat[(i, j)] } else { f.a2_mat[(i - 1, j)] });
            let h = Mat::from_fn(3, 3, |i, j| match (i < 1, j < 1) {
                (true, true) => f.b1[(i, j)],
                (true, false) => f.c[(i, j - 1)],
                (false, true) => f.c[(j, i - 1)],
                (false, false) => f.b2[(i - 1, j - 1)],
            });
            let Some(h_inv) = h.clone().try_inverse() else { continue };
            let a = &model.transition;
            let block = -(l.transpose() * h_inv * &l) + &model.state_cost * (2.0 * model.theta) + a.transpose() * pn * a;
            let dev = linalg::max_abs(&(linalg::symmetrize(&block) - &sol.value[t].quad));
            prop_assert!(dev <= 1e-8 * (1.0 + linalg::max_abs(&sol.value[t].quad)), "t={} dev={}", t, dev);
        }
    }

    #[test]
    fn sylvester_agrees_with_eigenvalues(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (model, vnext) = oracle::random_scalar_instance(&mut rng);
        let f = solver::fraktur_coeffs(&vnext, 0, &model).unwrap();
        let (min_eig, _) = linalg::eig_extremes(&(-f.adversary_hessian()));
        let flags = conditions::sylvester_conditions(&f);
        if min_eig.abs() > 1e-9 {
            prop_assert_eq!(flags.det_condition, min_eig > 0.0);
            prop_assert_eq!(conditions::check_assumption1(&f).neg_h_pass, min_eig > 0.0);
        }
    }

    #[test]
    fn corrected_bounds_are_sufficient(
        params in scalar_params(),
        p_next in -3.0..3.0f64,
        slack in (1.01..3.0f64, 1.01..3.0f64, 1.01..3.0f64),
    ) {
        let theta = params.theta;
        let b2p = params.b * params.b * p_next;
        let n_mat = (-b2p / (2.0 * theta)).max(0.0) * slack.0 + 0.01;
        let lambda_inv = p_next.max(0.0) * slack.1 + 0.5;
        let probe = ScalarParams { n_mat, lambda: 1.0 / lambda_inv, horizon: 1, ..params };
        let model = validate(probe.into_spec()).unwrap();
        let bound = conditions::sufficient_bounds(&model, p_next, 0).unwrap().xi_inv_lower_sufficient;
        let xi_inv = bound.max(0.0) * slack.2 + 0.01;
        let model = validate(ScalarParams { xi: 1.0 / xi_inv, ..probe }.into_spec()).unwrap();
        let vnext = ValueQuad {
            quad: Mat::from_element(1, 1, p_next),
            lin: Vector::zeros(1),
            constant: 0.0,
        };
        let f = solver::fraktur_coeffs(&vnext, 0, &model).unwrap();
        let entry = conditions::check_assumption1(&f);
        prop_assert!(entry.violations.is_empty(), "{:?}", entry.violations);
    }

    #[test]
    fn numeric_saddle_matches_analytic(seed in any::<u64>(), xv in -2.0..2.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, _, f) = oracle::random_saddle_instance(&mut rng);
        let x = Vector::from_element(1, xv);
        let (u, g, e) = oracle::numeric_saddle_f(&f, &x).unwrap();
        let (ua, ga, ea) = solver::stationary_controls(&f, &x).unwrap();
        let (uc, gc, ec) = solver::closed_form_controls(&f, &x).unwrap();
        prop_assert!((&u - &ua).amax() <= 1e-8 && (&g - &ga).amax() <= 1e-8 && (&e - &ea).amax() <= 1e-8);
        let scale = 1.0 + ua.amax() + ga.amax();
        prop_assert!((uc - ua).amax() <= 1e-9 * scale && (gc - ga).amax() <= 1e-9 * scale && (ec - ea).amax() <= 1e-9 * scale);
    }

    #[test]
    fn relative_entropy_is_nonnegative(
        params in scalar_params(),
        shifts in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64), 5),
    ) {
        let model = validate(ScalarParams { horizon: 5, ..params }.into_spec()).unwrap();
        let shift = MeasureShift {
            gamma: shifts.iter().map(|s| Vector::from_element(1, s.0)).collect(),
            eta: shifts.iter().map(|s| Vector::from_element(1, s.1)).collect(),
        };
        let kl = duality::relative_entropy(&shift, &model);
        prop_assert!(kl >= 0.0);
        let nonzero = shifts.iter().any(|s| s.0 != 0.0 || s.1 != 0.0);
        prop_assert_eq!(kl > 0.0, nonzero);
    }

    #[test]
    fn saddle_policy_is_unilaterally_stable(
        d_pert in -0.3..0.3f64,
        d_off_pert in -0.3..0.3f64,
        e_pert in -0.3..0.3f64,
        f_pert in -0.3..0.3f64,
        step in 0usize..5,
    ) {
        let model = validate(ModelSpec::table2().with_horizon(5)).unwrap();
        let sol = solve(&model).unwrap();
        let saddle = PolicyParams::from_solution(&sol);
        let v0 = policy::evaluate(&model, &saddle).unwrap().objective;

        let mut minimizer = saddle.clone();
        minimizer.d[step][(0, 0)] += d_pert;
        minimizer.d_off[step][0] += d_off_pert;
        prop_assert!(policy::evaluate(&model, &minimizer).unwrap().objective >= v0 - 1e-10);

        let mut maximizer = saddle.clone();
        maximizer.e[step][(0, 0)] += e_pert;
        maximizer.f_off[step][0] += f_pert;
        prop_assert!(policy::evaluate(&model, &maximizer).unwrap().objective <= v0 + 1e-10);
    }
}
