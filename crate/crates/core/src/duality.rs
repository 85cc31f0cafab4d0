//! Free energy, relative entropy and the change of measure behind the game.
//!
//! Under the reference measure `P` the noises are `w_t ~ N(0, Λ_t)`,
//! `v_t ~ N(0, Ξ_t)`. A measure shift moves their means to `γ_t` and `η_t`.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::ValidatedModel;
use crate::policy::{self, PolicyParams};
use crate::rng::{self, NoiseFactors, Purpose};
use crate::simulate::{self, Measure};
use crate::solver::GainSet;

/// Deterministic mean shifts of the system and exploration noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasureShift {
    pub gamma: Vec<Vector>,
    pub eta: Vec<Vector>,
}

impl MeasureShift {
    pub fn zeros(model: &ValidatedModel) -> Self {
        MeasureShift {
            gamma: vec![Vector::zeros(model.state_dim()); model.horizon],
            eta: vec![Vector::zeros(model.control_dim()); model.horizon],
        }
    }

    fn check(&self, model: &ValidatedModel) -> Result<()> {
        if self.gamma.len() != model.horizon || self.eta.len() != model.horizon {
            return Err(Error::Precondition(
                "shift schedules must have T entries".into(),
            ));
        }
        Ok(())
    }

    /// Open-loop policy: controls from `gains`, constant-in-state shifts from `self`.
    pub fn with_gains(&self, gains: &[GainSet]) -> PolicyParams {
        let mut k = PolicyParams::from_gains(gains);
        for t in 0..k.horizon() {
            k.e[t].fill(0.0);
            k.e_off[t] = self.gamma[t].clone();
            k.f[t].fill(0.0);
            k.f_off[t] = self.eta[t].clone();
        }
        k
    }
}

/// One sample path of the noise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseRealization {
    pub w: Vec<Vector>,
    pub v: Vec<Vector>,
}

/// `D_KL(P^{γ,η} ‖ P) = ½ Σ_t (γ_t'Λ_t⁻¹γ_t + η_t'Ξ_t⁻¹η_t)`.
pub fn relative_entropy(shift: &MeasureShift, model: &ValidatedModel) -> f64 {
    (0..model.horizon)
        .map(|t| {
            0.5 * linalg::quad_form(&shift.gamma[t], model.lambda_inv(t))
                + 0.5 * linalg::quad_form(&shift.eta[t], model.xi_inv(t))
        })
        .sum()
}

/// `ln dP^{γ,η}/dP` on one noise path.
pub fn log_rn_derivative(
    shift: &MeasureShift,
    noise: &NoiseRealization,
    model: &ValidatedModel,
) -> f64 {
    (0..model.horizon)
        .map(|t| {
            let li = model.lambda_inv(t);
            let xi = model.xi_inv(t);
            let g = &shift.gamma[t];
            let e = &shift.eta[t];
            g.dot(&(li * &noise.w[t])) - 0.5 * linalg::quad_form(g, li) + e.dot(&(xi * &noise.v[t]))
                - 0.5 * linalg::quad_form(e, xi)
        })
        .sum()
}

/// The cost `G_T` with exploration integrated out:
/// `Σ_t [x'Mx + tr(Ξ_tN_t) + c'N_tc + c'Qx + x'm + c'n] + x_T'M_T x_T + x_T'm_T` with `c = ū_t + η_t`.
pub fn cost_g(
    states: &[Vector],
    controls: &[Vector],
    eta: &[Vector],
    model: &ValidatedModel,
) -> f64 {
    let horizon = controls.len();
    let running: f64 = (0..horizon)
        .map(|t| model.running_cost(t, &states[t], &(&controls[t] + &eta[t])))
        .sum();
    let x_t = &states[horizon];
    running + linalg::quad_form(x_t, &model.terminal_cost) + x_t.dot(&model.terminal_linear)
}

/// The exponent whose log-moment the game value represents:
/// `θ·Σ running + V_T(x_T)`, with `V_T` taken from the model's terminal convention.
pub fn criterion_exponent(states: &[Vector], controls: &[Vector], model: &ValidatedModel) -> f64 {
    let horizon = controls.len();
    let running: f64 = (0..horizon)
        .map(|t| model.running_cost(t, &states[t], &controls[t]))
        .sum();
    model.theta * running + model.terminal_payoff(&states[horizon])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub samples: usize,
    pub seed: u64,
}

/// `ln mean(exp(xs))` with max-shift, and its delta-method standard error.
pub fn log_mean_exp(xs: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len() as f64;
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateSample);
    }
    let weights: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let mean = linalg::pairwise_sum(&weights) / n;
    if mean <= 0.0 || !mean.is_finite() {
        return Err(Error::DegenerateSample);
    }
    let sq: Vec<f64> = weights.iter().map(|w| (w - mean) * (w - mean)).collect();
    let var = linalg::pairwise_sum(&sq) / (n - 1.0).max(1.0);
    Ok((max + mean.ln(), (var / n).sqrt() / mean))
}

/// Monte Carlo estimate of `ln E_P[exp(ψ)]` for the closed loop `ū_t = Du_t x_t + du_t`.
pub fn free_energy_mc(
    model: &ValidatedModel,
    gains: &[GainSet],
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if samples < 1000 {
        return Err(Error::Precondition(format!(
            "need at least 1000 samples, got {samples}"
        )));
    }
    let policy = PolicyParams::from_gains(gains);
    let factors = NoiseFactors::new(model);
    let exponents: Vec<f64> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::substream(seed, Purpose::FreeEnergy, i);
            let path =
                simulate::sample_path(model, &factors, &policy, Measure::Reference, &mut rng);
            criterion_exponent(&path.states, &path.controls, model)
        })
        .collect();
    let (estimate, std_error) = log_mean_exp(&exponents)?;
    Ok(McEstimate {
        estimate,
        std_error,
        samples,
        seed,
    })
}

/// `ln E_P[exp(ψ)]` in closed form for the closed loop `ū_t = Du_t x_t + du_t`.
///
/// The log-moment stays quadratic in the state, `W_t(x) = ½x'W x + x'w + ω`, and
/// each step integrates a Gaussian against an exponential-quadratic. Fails with
/// `InfiniteMoment` once `Σ⁻¹ − W` loses definiteness.
pub fn exact_free_energy(model: &ValidatedModel, gains: &[GainSet]) -> Result<f64> {
    let (mut wq, mut wl) = model.terminal_coefficients();
    let mut wc = 0.0;
    let theta = model.theta;
    for t in (0..model.horizon).rev() {
        let g = &gains[t];
        let b = &model.input;
        let phi = &model.transition + b * &g.u_gain;
        let off = &model.drift + b * &g.u_offset;
        let cov = linalg::symmetrize(
            &(&model.system_noise[t] + b * &model.exploration[t] * b.transpose()),
        );
        let cov_inv = linalg::spd_inverse(&cov)
            .ok_or_else(|| Error::InfiniteMoment(format!("singular noise covariance at t={t}")))?;
        let prec = linalg::symmetrize(&(cov_inv - &wq));
        let chol = linalg::cholesky(&prec)
            .filter(|_| linalg::is_pd_scaled(&prec))
            .ok_or_else(|| {
                Error::InfiniteMoment(format!("exponential moment diverges at t={t}"))
            })?;
        let prec_inv = chol.inverse();
        let log_det_prec = 2.0 * chol.l().diagonal().map(f64::ln).sum();
        let log_det_cov = 2.0
            * linalg::cholesky(&cov)
                .expect("pd")
                .l()
                .diagonal()
                .map(f64::ln)
                .sum();
        // E[exp(½y'Wy + w'y)], y ~ N(m, Σ):
        // −½ln det(ΣΣ⁻¹ − ΣW) + ½m'Wm + w'm + ½(Wm + w)'(Σ⁻¹ − W)⁻¹(Wm + w), m = Φx + φ.
        let wm_quad = &wq * &phi;
        let wm_off = &wq * &off + &wl;
        let lift = prec_inv.clone();
        let q_next = phi.transpose() * &wm_quad + wm_quad.transpose() * &lift * &wm_quad;
        let l_next = phi.transpose() * (&wq * &off)
            + phi.transpose() * &wl
            + wm_quad.transpose() * &lift * &wm_off;
        let c_next = 0.5 * linalg::quad_form(&off, &wq)
            + wl.dot(&off)
            + 0.5 * linalg::quad_form(&wm_off, &lift)
            - 0.5 * (log_det_cov + log_det_prec);

        // θ·running cost with ū = Du x + du, exploration integrated out.
        let n = &model.control_cost[t];
        let du = &g.u_gain;
        let dv = &g.u_offset;
        let q = &model.cross_cost;
        let run_quad = &model.state_cost * 2.0
            + du.transpose() * n * du * 2.0
            + du.transpose() * q
            + q.transpose() * du;
        let run_lin = du.transpose() * (n * dv) * 2.0
            + q.transpose() * dv
            + &model.state_linear
            + du.transpose() * &model.control_linear;
        let run_const = linalg::trace_product(&model.exploration[t], n)
            + linalg::quad_form(dv, n)
            + dv.dot(&model.control_linear);

        wq = linalg::symmetrize(&(q_next + run_quad * theta));
        wl = l_next + run_lin * theta;
        wc += c_next + theta * run_const;
    }
    let x0 = &model.x0;
    Ok(0.5 * linalg::quad_form(x0, &wq) + x0.dot(&wl) + wc)
}

/// Exact `E^{γ,η}[θ·running + V_T] − D_KL` for an affine policy.
pub fn game_objective(model: &ValidatedModel, policy: &PolicyParams) -> Result<f64> {
    Ok(policy::evaluate(model, policy)?.objective)
}

/// Deterministic-shift version of [`game_objective`].
pub fn game_objective_open_loop(
    model: &ValidatedModel,
    gains: &[GainSet],
    shift: &MeasureShift,
) -> Result<f64> {
    shift.check(model)?;
    game_objective(model, &shift.with_gains(gains))
}

/// Agreement between the exponentially tilted path weight and the density of a
/// feedback measure shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RnShapeReport {
    /// Correlation of `ψ` and `ln dP^{γ,η}/dP` across sampled paths.
    pub correlation: f64,
    /// Standard deviation of `ψ − ln dP^{γ,η}/dP`; zero iff the two agree up to a constant.
    pub residual_sd: f64,
    pub samples: usize,
}

/// Sample paths under `P` and compare `ψ(ω)` with `ln dP^{γ,η}/dP(ω)` for the feedback shift in `policy`.
pub fn rn_shape_check(
    model: &ValidatedModel,
    policy: &PolicyParams,
    samples: usize,
    seed: u64,
) -> RnShapeReport {
    let factors = NoiseFactors::new(model);
    let pairs: Vec<(f64, f64)> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::substream(seed, Purpose::Entropy, i);
            let path = simulate::sample_path(model, &factors, policy, Measure::Reference, &mut rng);
            let shift = MeasureShift {
                gamma: path.gamma.clone(),
                eta: path.eta.clone(),
            };
            let noise = NoiseRealization {
                w: path.w.clone(),
                v: path.v.clone(),
            };
            (
                criterion_exponent(&path.states, &path.controls, model),
                log_rn_derivative(&shift, &noise, model),
            )
        })
        .collect();
    let n = samples as f64;
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy, mut srr) = (0.0, 0.0, 0.0, 0.0);
    let mr = mx - my;
    for (x, y) in &pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
        srr += (x - y - mr) * (x - y - mr);
    }
    RnShapeReport {
        correlation: sxy / (sxx * syy).sqrt(),
        residual_sd: (srr / (n - 1.0)).sqrt(),
        samples,
    }
}

/// Gaussian moments helper for tests: mean and covariance of `x_T` under `P` for a closed loop.
pub fn terminal_state_moments(model: &ValidatedModel, gains: &[GainSet]) -> (Vector, Mat) {
    let k = PolicyParams::from_gains(gains);
    let mut k0 = k.clone();
    for t in 0..k0.horizon() {
        k0.e[t].fill(0.0);
        k0.e_off[t].fill(0.0);
        k0.f[t].fill(0.0);
        k0.f_off[t].fill(0.0);
    }
    let m = policy::state_moments(model, &k0);
    (m.mean[model.horizon].clone(), m.cov[model.horizon].clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate, ModelSpec};
    use crate::solver::solve;

    #[test]
    fn zero_shift_has_zero_entropy_and_rn() {
        let m = validate(ModelSpec::table2().with_horizon(3)).unwrap();
        let s = MeasureShift::zeros(&m);
        assert_eq!(relative_entropy(&s, &m), 0.0);
        let noise = NoiseRealization {
            w: vec![Vector::from_element(1, 0.3); 3],
            v: vec![Vector::from_element(1, -0.1); 3],
        };
        assert_eq!(log_rn_derivative(&s, &noise, &m), 0.0);
    }

    #[test]
    fn entropy_scales_quadratically() {
        let m = validate(ModelSpec::table2().with_horizon(2)).unwrap();
        let mut s = MeasureShift::zeros(&m);
        s.gamma = vec![Vector::from_element(1, 1.0); 2];
        let one = relative_entropy(&s, &m);
        assert!((one - 2.0 * 0.5 / 0.15).abs() < 1e-12);
        s.gamma = vec![Vector::from_element(1, 2.0); 2];
        assert!((relative_entropy(&s, &m) - 4.0 * one).abs() < 1e-12);
    }

    #[test]
    fn terminal_only_cost() {
        let mut spec = ModelSpec::table2().with_horizon(1);
        spec.state_cost[(0, 0)] = 0.0;
        spec.control_cost = vec![Mat::zeros(1, 1)];
        spec.cross_cost[(0, 0)] = 0.0;
        let m = validate(spec).unwrap();
        let states = vec![
            Vector::from_element(1, 1.0),
            Vector::from_element(1, 0.2497),
        ];
        let zero = vec![Vector::zeros(1)];
        assert!((cost_g(&states, &zero, &zero, &m) - 4.0 * 0.2497 * 0.2497).abs() < 1e-15);
    }

    #[test]
    fn log_mean_exp_of_constant() {
        let (est, se) = log_mean_exp(&[19.5; 2000]).unwrap();
        assert_eq!(est, 19.5);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn saddle_policy_objective_is_game_value() {
        let m = validate(ModelSpec::table2()).unwrap();
        let sol = solve(&m).unwrap();
        let v = game_objective(&m, &PolicyParams::from_solution(&sol)).unwrap();
        assert!((v - 19.678560773).abs() < 1e-8);
    }
}
