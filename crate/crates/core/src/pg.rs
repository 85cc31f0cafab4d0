//! Natural policy gradient and actor–critic baseline for the dual game.
//!
//! The minimizing player owns `(D, d)`, the maximizing player `(E, e, F, f)`.
//! Each episode takes one preconditioned gradient step for both, using the
//! exact gradient, a critic-based gradient, or a two-point zeroth-order estimate.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditions;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::ValidatedModel;
use crate::policy::{self, PolicyGradient, PolicyParams};
use crate::rng::{self, NoiseFactors, Purpose};
use crate::simulate::{self, Measure, PathSample};
use crate::solver::{self, FrakturSet, Solution, ValueQuad};

/// Per-step quadratic critic `½x'P̂_t x + x'p̂_t + r̂_t`, `t = 0..=T`; entry `T` is the terminal payoff.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CriticParams {
    pub value: Vec<ValueQuad>,
}

impl CriticParams {
    pub fn zeros(model: &ValidatedModel) -> Self {
        let dx = model.state_dim();
        let mut value = vec![
            ValueQuad {
                quad: Mat::zeros(dx, dx),
                lin: Vector::zeros(dx),
                constant: 0.0,
            };
            model.horizon
        ];
        value.push(solver::terminal_value(model));
        CriticParams { value }
    }

    pub fn from_solution(sol: &Solution) -> Self {
        CriticParams {
            value: sol.value.clone(),
        }
    }
}

/// Sampled value of one rollout: `θ·Σ running(x, ū + η) + V_T(x_T) − ½Σ(γ'Λ⁻¹γ + η'Ξ⁻¹η)`.
pub fn rollout_value(model: &ValidatedModel, path: &PathSample) -> f64 {
    let horizon = model.horizon;
    let mut total = model.terminal_payoff(&path.states[horizon]);
    for t in 0..horizon {
        total += step_reward(model, t, path);
    }
    total
}

fn step_reward(model: &ValidatedModel, t: usize, path: &PathSample) -> f64 {
    let c = &path.controls[t] + &path.eta[t];
    model.theta * model.running_cost(t, &path.states[t], &c)
        - 0.5 * linalg::quad_form(&path.gamma[t], model.lambda_inv(t))
        - 0.5 * linalg::quad_form(&path.eta[t], model.xi_inv(t))
}

fn rollouts(
    model: &ValidatedModel,
    k: &PolicyParams,
    n: usize,
    seed: u64,
    purpose: Purpose,
    x0_spread: f64,
) -> Vec<PathSample> {
    let factors = NoiseFactors::new(model);
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng::substream(seed, purpose, i);
            if x0_spread > 0.0 {
                let dx = model.state_dim();
                let x0 = &model.x0 + rng::standard_normal(&mut rng, dx) * x0_spread;
                let mut spread = model.clone();
                let mut spec = spread.spec().clone();
                spec.x0 = x0;
                spread = crate::model::validate(spec)
                    .expect("only the initial state changed")
                    .with_terminal_convention(model.terminal_convention());
                simulate::sample_path(&spread, &factors, k, Measure::Shifted, &mut rng)
            } else {
                simulate::sample_path(model, &factors, k, Measure::Shifted, &mut rng)
            }
        })
        .collect()
}

/// Monte Carlo estimate of the objective `C(K)` and its standard error, rolling
/// out under the measure shifted by `K`'s own `(E, e, F, f)`.
pub fn objective_estimate(
    model: &ValidatedModel,
    k: &PolicyParams,
    n_rollouts: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_rollouts == 0 {
        return Err(Error::Precondition("n_rollouts must be at least 1".into()));
    }
    let values: Vec<f64> = rollouts(model, k, n_rollouts, seed, Purpose::Rollout, 0.0)
        .iter()
        .map(|p| rollout_value(model, p))
        .collect();
    let n = n_rollouts as f64;
    let mean = linalg::pairwise_sum(&values) / n;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = if n_rollouts > 1 {
        linalg::pairwise_sum(&sq) / (n - 1.0)
    } else {
        0.0
    };
    Ok((mean, (var / n).sqrt()))
}

/// Empirical `E[z z']`, `z = [x_t; 1]`, per step.
pub fn empirical_state_moments(paths: &[PathSample], horizon: usize) -> Vec<Mat> {
    let dx = paths[0].states[0].len();
    let n = paths.len() as f64;
    (0..horizon)
        .map(|t| {
            let mut s = Mat::zeros(dx + 1, dx + 1);
            for p in paths {
                let mut z = Vector::from_element(dx + 1, 1.0);
                z.rows_mut(0, dx).copy_from(&p.states[t]);
                s += &z * z.transpose();
            }
            s / n
        })
        .collect()
}

const COV_EPS: f64 = 1e-8;

fn precondition_inverse(covs: &[Mat], t: usize) -> Mat {
    let own = &covs[t];
    if linalg::is_pd_scaled(own) {
        return linalg::spd_inverse(own).expect("positive definite");
    }
    let pooled = covs
        .iter()
        .fold(Mat::zeros(own.nrows(), own.ncols()), |acc, c| acc + c)
        / covs.len() as f64;
    if linalg::is_pd_scaled(&pooled) {
        return linalg::spd_inverse(&pooled).expect("positive definite");
    }
    log::warn!("state covariance is singular at t={t}; regularizing with {COV_EPS:e} I");
    let reg = own + Mat::identity(own.nrows(), own.ncols()) * COV_EPS;
    linalg::spd_inverse(&reg).expect("regularized covariance is positive definite")
}

/// One natural-gradient step: descent on `(D, d)`, ascent on `(E, e, F, f)`,
/// each gradient block post-multiplied by the inverse state second moment.
///
/// A rank-deficient per-step moment falls back to the pooled moment, then to `εI` regularization.
pub fn npg_step(k: &PolicyParams, grad: &PolicyGradient, covs: &[Mat], delta: f64) -> PolicyParams {
    let mut out = k.clone();
    for t in 0..k.horizon() {
        let inv = precondition_inverse(covs, t);
        let dx = k.e[t].nrows();
        let natural = |g: &Mat, g_off: &Vector| -> (Mat, Vector) {
            let mut gz = Mat::zeros(g.nrows(), dx + 1);
            gz.view_mut((0, 0), (g.nrows(), dx)).copy_from(g);
            gz.set_column(dx, g_off);
            let n = gz * &inv;
            (
                n.view((0, 0), (g.nrows(), dx)).into_owned(),
                n.column(dx).into_owned(),
            )
        };
        let (nd, ndo) = natural(&grad.d[t], &grad.d_off[t]);
        let (ne, neo) = natural(&grad.e[t], &grad.e_off[t]);
        let (nf, nfo) = natural(&grad.f[t], &grad.f_off[t]);
        out.d[t] -= nd * delta;
        out.d_off[t] -= ndo * delta;
        out.e[t] += ne * delta;
        out.e_off[t] += neo * delta;
        out.f[t] += nf * delta;
        out.f_off[t] += nfo * delta;
    }
    out
}

/// Critic features `(½x_i², x_ix_j for i < j, x, 1)`, matching the parameter order of [`pack`].
fn features(x: &Vector) -> Vector {
    let dx = x.len();
    let mut phi = Vec::with_capacity(dx * (dx + 1) / 2 + dx + 1);
    for i in 0..dx {
        phi.push(0.5 * x[i] * x[i]);
        for j in i + 1..dx {
            phi.push(x[i] * x[j]);
        }
    }
    phi.extend(x.iter());
    phi.push(1.0);
    Vector::from_vec(phi)
}

fn pack(v: &ValueQuad) -> Vector {
    let dx = v.lin.len();
    let mut theta = Vec::with_capacity(dx * (dx + 1) / 2 + dx + 1);
    for i in 0..dx {
        for j in i..dx {
            theta.push(v.quad[(i, j)]);
        }
    }
    theta.extend(v.lin.iter());
    theta.push(v.constant);
    Vector::from_vec(theta)
}

fn unpack(theta: &Vector, dx: usize) -> ValueQuad {
    let mut quad = Mat::zeros(dx, dx);
    let mut k = 0;
    for i in 0..dx {
        for j in i..dx {
            quad[(i, j)] = theta[k];
            quad[(j, i)] = theta[k];
            k += 1;
        }
    }
    ValueQuad {
        quad,
        lin: theta.rows(k, dx).into_owned(),
        constant: theta[k + dx],
    }
}

/// One least-mean-squares step of every `V̂_t`, `t < T`, toward the one-step target
/// `reward_t + V̂_{t+1}(x_{t+1})` along the batch.
///
/// The step is normalized by the inverse feature second moment (minimum-norm on
/// rank-deficient batches), so `learn_rate = 1` jumps to the per-step least-squares fit.
pub fn critic_td_update(
    model: &ValidatedModel,
    critic: &CriticParams,
    batch: &[PathSample],
    learn_rate: f64,
) -> Result<CriticParams> {
    if batch.is_empty() {
        return Err(Error::Precondition("empty trajectory batch".into()));
    }
    let mut out = critic.clone();
    let n = batch.len() as f64;
    let dx = model.state_dim();
    for t in 0..model.horizon {
        let k = features(&batch[0].states[t]).len();
        let mut moment = Mat::zeros(k, k);
        let mut grad = Vector::zeros(k);
        for p in batch {
            let phi = features(&p.states[t]);
            let target = step_reward(model, t, p) + critic.value[t + 1].eval(&p.states[t + 1]);
            let err = target - critic.value[t].eval(&p.states[t]);
            moment += &phi * phi.transpose();
            grad += phi * err;
        }
        let step = (moment / n)
            .svd(true, true)
            .solve(&(grad / n), 1e-12)
            .map_err(|e| Error::Precondition(e.to_string()))?;
        out.value[t] = unpack(&(pack(&critic.value[t]) + step * learn_rate), dx);
    }
    Ok(out)
}

/// Rollouts for critic training, with initial states spread around `x0` so that
/// the step-0 quadratic is identifiable.
pub fn critic_batch(
    model: &ValidatedModel,
    k: &PolicyParams,
    n: usize,
    seed: u64,
    x0_spread: f64,
) -> Vec<PathSample> {
    rollouts(model, k, n, seed, Purpose::Critic, x0_spread)
}

/// Policy gradient with the critic standing in for the continuation value.
pub fn critic_gradient(
    model: &ValidatedModel,
    k: &PolicyParams,
    critic: &CriticParams,
    covs: &[Mat],
) -> Result<PolicyGradient> {
    let mut grad = PolicyParams::zeros(model);
    let du = model.control_dim();
    let dx = model.state_dim();
    for t in 0..model.horizon {
        let f: FrakturSet = solver::fraktur_coeffs(&critic.value[t + 1], t, model)?;
        let (h, l, lv) = policy::stacked_f(&f);
        let mut kk = Mat::zeros(2 * du + dx, dx);
        kk.view_mut((0, 0), (du, dx)).copy_from(&k.d[t]);
        kk.view_mut((du, 0), (dx, dx)).copy_from(&k.e[t]);
        kk.view_mut((du + dx, 0), (du, dx)).copy_from(&k.f[t]);
        let mut off = Vector::zeros(2 * du + dx);
        off.rows_mut(0, du).copy_from(&k.d_off[t]);
        off.rows_mut(du, dx).copy_from(&k.e_off[t]);
        off.rows_mut(du + dx, du).copy_from(&k.f_off[t]);
        let gm = &h * kk + l;
        let gv = &h * off + lv;
        let mut gz = Mat::zeros(gm.nrows(), dx + 1);
        gz.view_mut((0, 0), (gm.nrows(), dx)).copy_from(&gm);
        gz.set_column(dx, &gv);
        let full = gz * &covs[t];
        grad.d[t] = full.view((0, 0), (du, dx)).into_owned();
        grad.d_off[t] = full.view((0, dx), (du, 1)).column(0).into_owned();
        grad.e[t] = full.view((du, 0), (dx, dx)).into_owned();
        grad.e_off[t] = full.view((du, dx), (dx, 1)).column(0).into_owned();
        grad.f[t] = full.view((du + dx, 0), (du, dx)).into_owned();
        grad.f_off[t] = full.view((du + dx, dx), (du, 1)).column(0).into_owned();
    }
    Ok(grad)
}

fn map_params(
    k: &PolicyParams,
    other: &PolicyParams,
    mut op: impl FnMut(f64, f64) -> f64,
) -> PolicyParams {
    let zm = |a: &Vec<Mat>, b: &Vec<Mat>, op: &mut dyn FnMut(f64, f64) -> f64| -> Vec<Mat> {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.zip_map(y, &mut *op))
            .collect()
    };
    let d = zm(&k.d, &other.d, &mut op);
    let e = zm(&k.e, &other.e, &mut op);
    let f = zm(&k.f, &other.f, &mut op);
    let zv =
        |a: &Vec<Vector>, b: &Vec<Vector>, op: &mut dyn FnMut(f64, f64) -> f64| -> Vec<Vector> {
            a.iter()
                .zip(b)
                .map(|(x, y)| x.zip_map(y, &mut *op))
                .collect()
        };
    PolicyParams {
        d,
        d_off: zv(&k.d_off, &other.d_off, &mut op),
        e,
        e_off: zv(&k.e_off, &other.e_off, &mut op),
        f,
        f_off: zv(&k.f_off, &other.f_off, &mut op),
    }
}

/// Two-point zeroth-order gradient estimate with common random numbers.
pub fn zeroth_order_gradient(
    model: &ValidatedModel,
    k: &PolicyParams,
    radius: f64,
    directions: usize,
    rollouts_per_eval: usize,
    seed: u64,
) -> Result<PolicyGradient> {
    let mut acc = map_params(k, k, |_, _| 0.0);
    let mut rng = rng::substream(seed, Purpose::Rollout, u64::MAX);
    for j in 0..directions {
        let dir = map_params(k, k, |_, _| rng.sample(rand_distr::StandardNormal));
        let plus = map_params(k, &dir, |a, b| a + radius * b);
        let minus = map_params(k, &dir, |a, b| a - radius * b);
        let eval_seed = seed.wrapping_add(j as u64 + 1);
        let (jp, _) = objective_estimate(model, &plus, rollouts_per_eval, eval_seed)?;
        let (jm, _) = objective_estimate(model, &minus, rollouts_per_eval, eval_seed)?;
        let scale = (jp - jm) / (2.0 * radius * directions as f64);
        acc = map_params(&acc, &dir, |a, b| a + scale * b);
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientSource {
    /// Analytic gradient of the exact objective, exact state moments.
    Exact,
    /// Gradient through a TD-trained critic, empirical state moments.
    Critic,
    /// Two-point zeroth-order estimate, empirical state moments.
    ZerothOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub rollouts: usize,
    /// Step size `δ_m = δ_0 / (1 + m/100)`.
    pub delta0: f64,
    pub seed: u64,
    pub gradient: GradientSource,
    pub critic_learn_rate: f64,
    /// Critic sweeps per actor step.
    pub critic_sweeps: usize,
    pub x0_spread: f64,
    pub zo_radius: f64,
    pub zo_directions: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 1000,
            rollouts: 256,
            delta0: 1e-2,
            seed: 0,
            gradient: GradientSource::Exact,
            critic_learn_rate: 0.2,
            critic_sweeps: 5,
            x0_spread: 1.0,
            zo_radius: 1e-2,
            zo_directions: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRecord {
    pub episode: usize,
    #[serde(rename = "C_estimate")]
    pub c_estimate: f64,
    pub gain_gap: f64,
    pub eta_norm: f64,
}

/// Largest gap between `k`'s control gains and the saddle gains. At `t = 0` only
/// the action at `x0` is compared, since `x0` is deterministic.
pub fn gain_gap(k: &PolicyParams, sol: &Solution) -> f64 {
    let x0 = &sol.model.x0;
    let mut gap: f64 = (k.u(0, x0) - sol.gains[0].u(x0)).amax();
    for t in 1..k.horizon() {
        gap = gap
            .max(linalg::max_abs(&(&k.d[t] - &sol.gains[t].u_gain)))
            .max((&k.d_off[t] - &sol.gains[t].u_offset).amax());
    }
    gap
}

pub fn history_json_lines(history: &[HistoryRecord]) -> String {
    history
        .iter()
        .map(|h| serde_json::to_string(h).expect("record serializes") + "\n")
        .collect()
}

/// Alternate actor and critic updates from `k0`.
pub fn train(
    model: &ValidatedModel,
    k0: PolicyParams,
    config: &TrainConfig,
) -> Result<(PolicyParams, Vec<HistoryRecord>)> {
    let sol = solver::solve(model)?;
    if !conditions::check_full_horizon(&sol).all_pass {
        return Err(Error::Precondition(
            "saddle conditions fail for this model".into(),
        ));
    }
    let mut k = k0;
    let mut critic = CriticParams::zeros(model);
    let mut history = Vec::with_capacity(config.episodes);
    let mut initial: Option<f64> = None;
    for m in 0..config.episodes {
        let delta = config.delta0 / (1.0 + m as f64 / 100.0);
        let episode_seed = config.seed.wrapping_add(m as u64);
        let (grad, covs, c_estimate) = match config.gradient {
            GradientSource::Exact => {
                let (grad, eval) = policy::exact_gradient(model, &k)?;
                let covs = (0..model.horizon)
                    .map(|t| eval.moments.second_moment_z(t))
                    .collect();
                (grad, covs, eval.objective)
            }
            GradientSource::Critic => {
                for s in 0..config.critic_sweeps {
                    let batch = critic_batch(
                        model,
                        &k,
                        config.rollouts,
                        episode_seed.wrapping_mul(1 << 16).wrapping_add(s as u64),
                        config.x0_spread,
                    );
                    critic = critic_td_update(model, &critic, &batch, config.critic_learn_rate)?;
                }
                let paths = rollouts(
                    model,
                    &k,
                    config.rollouts,
                    episode_seed,
                    Purpose::Rollout,
                    0.0,
                );
                let covs = empirical_state_moments(&paths, model.horizon);
                let values: Vec<f64> = paths.iter().map(|p| rollout_value(model, p)).collect();
                let c = linalg::pairwise_sum(&values) / values.len() as f64;
                (critic_gradient(model, &k, &critic, &covs)?, covs, c)
            }
            GradientSource::ZerothOrder => {
                let paths = rollouts(
                    model,
                    &k,
                    config.rollouts,
                    episode_seed,
                    Purpose::Rollout,
                    0.0,
                );
                let covs = empirical_state_moments(&paths, model.horizon);
                let values: Vec<f64> = paths.iter().map(|p| rollout_value(model, p)).collect();
                let c = linalg::pairwise_sum(&values) / values.len() as f64;
                let grad = zeroth_order_gradient(
                    model,
                    &k,
                    config.zo_radius,
                    config.zo_directions,
                    config.rollouts,
                    episode_seed,
                )?;
                (grad, covs, c)
            }
        };
        let init = *initial.get_or_insert(c_estimate);
        if c_estimate.abs() > 10.0 * init.abs().max(1.0) {
            return Err(Error::Diverged {
                episode: m,
                objective: c_estimate,
                initial: init,
            });
        }
        history.push(HistoryRecord {
            episode: m,
            c_estimate,
            gain_gap: gain_gap(&k, &sol),
            eta_norm: k.eta_norm(),
        });
        k = npg_step(&k, &grad, &covs, delta);
    }
    Ok((k, history))
}
