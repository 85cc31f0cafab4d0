//! Forward simulation, least-squares re-estimation and the adaptive
//! estimate–solve–explore loop.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditions;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::ValidatedModel;
use crate::policy::PolicyParams;
use crate::report::{self, Cell, Table};
use crate::rng::{self, NoiseFactors, Purpose};
use crate::solver::{self, Solution, ValueQuad};

/// Which law the noise is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    /// `w ~ N(0, Λ)`, `v ~ N(0, Ξ)`.
    Reference,
    /// `w ~ N(γ*(x), Λ)`, `v ~ N(η*(x), Ξ)`.
    Shifted,
}

/// One simulated path: `states` has `T + 1` entries, everything else `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub gamma: Vec<Vector>,
    pub eta: Vec<Vector>,
    pub w: Vec<Vector>,
    pub v: Vec<Vector>,
}

pub fn step(model: &ValidatedModel, x: &Vector, u: &Vector, v: &Vector, w: &Vector) -> Vector {
    &model.drift + &model.transition * x + &model.input * (u + v) + w
}

/// Simulate `policy` forward from `x0`.
pub fn sample_path<R: Rng>(
    model: &ValidatedModel,
    factors: &NoiseFactors,
    policy: &PolicyParams,
    measure: Measure,
    rng: &mut R,
) -> PathSample {
    let horizon = model.horizon;
    let mut path = PathSample {
        states: Vec::with_capacity(horizon + 1),
        controls: Vec::with_capacity(horizon),
        gamma: Vec::with_capacity(horizon),
        eta: Vec::with_capacity(horizon),
        w: Vec::with_capacity(horizon),
        v: Vec::with_capacity(horizon),
    };
    path.states.push(model.x0.clone());
    for t in 0..horizon {
        let x = &path.states[t];
        let u = policy.u(t, x);
        let g = policy.gamma(t, x);
        let e = policy.eta(t, x);
        let (mut w, mut v) = factors.draw(rng, t);
        if measure == Measure::Shifted {
            w += &g;
            v += &e;
        }
        let next = step(model, x, &u, &v, &w);
        path.states.push(next);
        path.controls.push(u);
        path.gamma.push(g);
        path.eta.push(e);
        path.w.push(w);
        path.v.push(v);
    }
    path
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub x: Vector,
    pub u_star: Vector,
    pub gamma_star: Vector,
    pub eta_star: Vector,
    pub w: Vector,
    pub v: Vector,
    pub running_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
    pub terminal_state: Vector,
    /// `x_T'M_T x_T + x_T'm_T`.
    pub terminal_cost: f64,
    pub measure: Measure,
    pub seed: u64,
}

impl Trajectory {
    pub fn states(&self) -> Vec<Vector> {
        let mut xs: Vec<Vector> = self.steps.iter().map(|s| s.x.clone()).collect();
        xs.push(self.terminal_state.clone());
        xs
    }

    /// Realized `G_T`.
    pub fn total_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.running_cost).sum::<f64>() + self.terminal_cost
    }

    /// Largest violation of `x_{t+1} = a + Ax_t + B(ū_t + v_t) + w_t` over the stored records.
    pub fn replay_residual(&self, model: &ValidatedModel) -> f64 {
        let xs = self.states();
        self.steps
            .iter()
            .map(|s| (step(model, &s.x, &s.u_star, &s.v, &s.w) - &xs[s.t + 1]).amax())
            .fold(0.0, f64::max)
    }
}

fn to_trajectory(
    model: &ValidatedModel,
    path: PathSample,
    measure: Measure,
    seed: u64,
) -> Trajectory {
    let horizon = model.horizon;
    let steps = (0..horizon)
        .map(|t| StepRecord {
            t,
            x: path.states[t].clone(),
            u_star: path.controls[t].clone(),
            gamma_star: path.gamma[t].clone(),
            eta_star: path.eta[t].clone(),
            w: path.w[t].clone(),
            v: path.v[t].clone(),
            running_cost: model.running_cost(
                t,
                &path.states[t],
                &(&path.controls[t] + &path.eta[t]),
            ),
        })
        .collect();
    let xt = path.states[horizon].clone();
    Trajectory {
        steps,
        terminal_cost: linalg::quad_form(&xt, &model.terminal_cost)
            + xt.dot(&model.terminal_linear),
        terminal_state: xt,
        measure,
        seed,
    }
}

fn run_indexed(
    model: &ValidatedModel,
    sol: &Solution,
    measure: Measure,
    seed: u64,
    index: u64,
) -> Trajectory {
    let factors = NoiseFactors::new(model);
    let policy = PolicyParams::from_solution(sol);
    let mut rng = rng::substream(seed, Purpose::Trajectory, index);
    let path = sample_path(model, &factors, &policy, measure, &mut rng);
    to_trajectory(model, path, measure, seed)
}

/// One run of the closed loop under the saddle gains of `sol`.
///
/// Under both measures the same seed yields the same underlying standard-normal draws.
pub fn run_trajectory(
    model: &ValidatedModel,
    sol: &Solution,
    measure: Measure,
    seed: u64,
) -> Trajectory {
    run_indexed(model, sol, measure, seed, 0)
}

/// Re-run the closed loop on a given noise path (`w`, `v` as realized, shifts included).
pub fn replay(
    model: &ValidatedModel,
    sol: &Solution,
    w: &[Vector],
    v: &[Vector],
    measure: Measure,
    seed: u64,
) -> Trajectory {
    let policy = PolicyParams::from_solution(sol);
    let horizon = model.horizon;
    let mut path = PathSample {
        states: vec![model.x0.clone()],
        controls: vec![],
        gamma: vec![],
        eta: vec![],
        w: w.to_vec(),
        v: v.to_vec(),
    };
    for t in 0..horizon {
        let x = path.states[t].clone();
        let u = policy.u(t, &x);
        path.states.push(step(model, &x, &u, &v[t], &w[t]));
        path.gamma.push(policy.gamma(t, &x));
        path.eta.push(policy.eta(t, &x));
        path.controls.push(u);
    }
    to_trajectory(model, path, measure, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BatchSummary {
    pub runs: usize,
    pub seed: u64,
    pub measure: Measure,
    pub mean_x: Vec<Vector>,
    pub var_x: Vec<Vector>,
    pub mean_u: Vec<Vector>,
    pub var_u: Vec<Vector>,
    pub mean_w: Vec<Vector>,
    /// Mean realized `θ·G_T`.
    pub mean_theta_g: f64,
}

/// `n_runs` independent trajectories; run `i` uses substream `i`, so run 0 equals [`run_trajectory`].
pub fn run_batch(
    model: &ValidatedModel,
    sol: &Solution,
    measure: Measure,
    n_runs: usize,
    seed: u64,
) -> Result<BatchSummary> {
    if n_runs == 0 {
        return Err(Error::Precondition("n_runs must be at least 1".into()));
    }
    let runs: Vec<Trajectory> = (0..n_runs as u64)
        .into_par_iter()
        .map(|i| run_indexed(model, sol, measure, seed, i))
        .collect();
    let n = n_runs as f64;
    let horizon = model.horizon;
    let moments = |get: &dyn Fn(&Trajectory, usize) -> Vector, len: usize| {
        let mut means = Vec::with_capacity(len);
        let mut vars = Vec::with_capacity(len);
        for t in 0..len {
            let dim = get(&runs[0], t).len();
            let mut mean = Vector::zeros(dim);
            let mut var = Vector::zeros(dim);
            for j in 0..dim {
                let xs: Vec<f64> = runs.iter().map(|r| get(r, t)[j]).collect();
                let m = linalg::pairwise_sum(&xs) / n;
                let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
                mean[j] = m;
                var[j] = if n_runs > 1 {
                    linalg::pairwise_sum(&sq) / (n - 1.0)
                } else {
                    0.0
                };
            }
            means.push(mean);
            vars.push(var);
        }
        (means, vars)
    };
    let state = |r: &Trajectory, t: usize| {
        if t < horizon {
            r.steps[t].x.clone()
        } else {
            r.terminal_state.clone()
        }
    };
    let (mean_x, var_x) = moments(&state, horizon + 1);
    let (mean_u, var_u) = moments(
        &|r: &Trajectory, t: usize| r.steps[t].u_star.clone(),
        horizon,
    );
    let (mean_w, _) = moments(&|r: &Trajectory, t: usize| r.steps[t].w.clone(), horizon);
    let costs: Vec<f64> = runs.iter().map(|r| model.theta * r.total_cost()).collect();
    Ok(BatchSummary {
        runs: n_runs,
        seed,
        measure,
        mean_x,
        var_x,
        mean_u,
        var_u,
        mean_w,
        mean_theta_g: linalg::pairwise_sum(&costs) / n,
    })
}

/// Table with columns
/// `t, x_P, x_Pstar, P, p, r, V, u_star, gamma_star, eta_star, B1, B2, B3, C, det_negH`.
///
/// `reference` and `shifted` are runs under the two measures; `V` and the
/// controls are evaluated at the shifted state.
pub fn trajectory_table(
    sol: &Solution,
    reference: &Trajectory,
    shifted: &Trajectory,
) -> Result<Table> {
    let dx = sol.model.state_dim();
    let du = sol.model.control_dim();
    let mut columns = vec!["t".to_string()];
    columns.extend(report::vector_columns("x_P", dx));
    columns.extend(report::vector_columns("x_Pstar", dx));
    columns.extend(report::matrix_columns("P", dx, dx));
    columns.extend(report::vector_columns("p", dx));
    columns.push("r".into());
    columns.push("V".into());
    columns.extend(report::vector_columns("u_star", du));
    columns.extend(report::vector_columns("gamma_star", dx));
    columns.extend(report::vector_columns("eta_star", du));
    columns.extend(report::matrix_columns("B1", du, du));
    columns.extend(report::matrix_columns("B2", dx, dx));
    columns.extend(report::matrix_columns("B3", du, du));
    columns.extend(report::matrix_columns("C", du, dx));
    columns.push("det_negH".into());

    let xs_ref = reference.states();
    let xs_shift = shifted.states();
    let mut rows = Vec::with_capacity(sol.value.len());
    for (t, v) in sol.value.iter().enumerate() {
        let x = &xs_shift[t];
        let mut row = vec![Cell::Num(t as f64)];
        row.extend(report::vector_cells(&xs_ref[t]));
        row.extend(report::vector_cells(x));
        row.extend(report::matrix_cells(&v.quad));
        row.extend(report::vector_cells(&v.lin));
        row.push(Cell::Num(v.constant));
        row.push(Cell::Num(v.eval(x)));
        match sol.gains.get(t) {
            Some(g) => {
                row.extend(report::vector_cells(&g.u(x)));
                row.extend(report::vector_cells(&g.gamma(x)));
                row.extend(report::vector_cells(&g.eta(x)));
            }
            None => row.extend(report::empty_cells(2 * du + dx)),
        }
        let f = solver::table_fraktur(sol, t)?;
        row.extend(report::matrix_cells(&f.b1));
        row.extend(report::matrix_cells(&f.b2));
        row.extend(report::matrix_cells(&f.b3));
        row.extend(report::matrix_cells(&f.c));
        row.push(Cell::Num(conditions::det_neg_h(&f)));
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

/// One observed transition: state, applied control `ū + v`, next state.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub x: Vector,
    pub control: Vector,
    pub next: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateRecord {
    pub a_hat: Mat,
    pub b_hat: Mat,
    /// Residual covariance; absent when the fit is exactly determined.
    pub residual_cov: Option<Mat>,
    /// Standard errors of `A_hat` and `B_hat` entries.
    pub a_std_error: Option<Mat>,
    pub b_std_error: Option<Mat>,
    pub samples: usize,
}

/// Least-squares fit of `x_{t+1} − a = A x_t + B c_t` with the drift `a` taken from `prior`.
pub fn estimate_ab(transitions: &[Transition], prior: &ValidatedModel) -> Result<EstimateRecord> {
    let dx = prior.state_dim();
    let du = prior.control_dim();
    let k = dx + du;
    let n = transitions.len();
    if n < k {
        return Err(Error::RankDeficient { rank: n, needed: k });
    }
    let mut z = Mat::zeros(n, k);
    let mut y = Mat::zeros(n, dx);
    for (i, tr) in transitions.iter().enumerate() {
        z.view_mut((i, 0), (1, dx)).copy_from(&tr.x.transpose());
        z.view_mut((i, dx), (1, du))
            .copy_from(&tr.control.transpose());
        y.view_mut((i, 0), (1, dx))
            .copy_from(&(&tr.next - &prior.drift).transpose());
    }
    let svd = z.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(k) as f64) * f64::EPSILON;
    let rank = svd.rank(tol);
    if rank < k {
        return Err(Error::RankDeficient { rank, needed: k });
    }
    let theta = svd
        .solve(&y, tol)
        .map_err(|e| Error::Precondition(e.to_string()))?;
    let coeffs = theta.transpose();
    let a_hat = coeffs.view((0, 0), (dx, dx)).into_owned();
    let b_hat = coeffs.view((0, dx), (dx, du)).into_owned();
    let (residual_cov, a_se, b_se) = if n > k {
        let resid = &y - &z * &theta;
        let cov = resid.transpose() * &resid / (n - k) as f64;
        let ztz_inv = linalg::spd_inverse(&(z.transpose() * &z))
            .ok_or(Error::RankDeficient { rank, needed: k })?;
        let se = Mat::from_fn(dx, k, |i, j| (cov[(i, i)] * ztz_inv[(j, j)]).sqrt());
        (
            Some(cov),
            Some(se.view((0, 0), (dx, dx)).into_owned()),
            Some(se.view((0, dx), (dx, du)).into_owned()),
        )
    } else {
        (None, None, None)
    };
    Ok(EstimateRecord {
        a_hat,
        b_hat,
        residual_cov,
        a_std_error: a_se,
        b_std_error: b_se,
        samples: n,
    })
}

/// Settings for [`procedure_recursion`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProcedureConfig {
    pub episodes: usize,
    /// Transitions collected per episode (rounded up to whole trajectories).
    pub transitions_per_episode: usize,
    pub seed: u64,
    /// Factor by which adjusted `N_t` or `Ξ_t⁻¹` clear their lower bounds.
    pub margin: f64,
}

impl Default for ProcedureConfig {
    fn default() -> Self {
        ProcedureConfig {
            episodes: 50,
            transitions_per_episode: 1000,
            seed: 0,
            margin: 1.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub a_hat: Mat,
    pub b_hat: Mat,
    pub a_std_error: Option<Mat>,
    pub b_std_error: Option<Mat>,
    pub samples: usize,
    /// Steps at which `N_t` or `Ξ_t` were adjusted to meet the explicit bounds.
    pub adjusted_steps: Vec<usize>,
    pub conditions_pass: bool,
    pub value_x0: f64,
    pub p0: f64,
    /// Mean realized `θ·G_T` of the episode's runs on the true system; absent for the initial pass.
    pub mean_theta_g: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcedureLog {
    pub episodes: Vec<EpisodeRecord>,
}

impl ProcedureLog {
    pub fn to_json_lines(&self) -> String {
        self.episodes
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes") + "\n")
            .collect()
    }

    pub fn last(&self) -> &EpisodeRecord {
        self.episodes
            .last()
            .expect("log starts with the initial pass")
    }
}

/// Backward pass on `model` that raises `N_t` and shrinks `Ξ_t` where the scalar bounds require it.
fn adapted_solve(
    model: &ValidatedModel,
    margin: f64,
) -> Result<(ValidatedModel, Solution, Vec<usize>)> {
    if !model.is_scalar() || model.theta <= 0.0 {
        let sol = solver::solve(model)?;
        return Ok((model.clone(), sol, vec![]));
    }
    let mut current = model.clone();
    let mut adjusted = Vec::new();
    let mut vnext: ValueQuad = solver::terminal_value(&current);
    for t in (0..current.horizon).rev() {
        let p_next = vnext.quad[(0, 0)];
        let bounds = conditions::sufficient_bounds(&current, p_next, t)?;
        let lambda_inv = current.lambda_inv(t)[(0, 0)];
        if lambda_inv <= bounds.lambda_inv_lower {
            return Err(Error::ConditionsUnsatisfiable {
                t,
                reason: format!("Lambda^-1 = {lambda_inv} does not exceed P_(t+1) = {p_next}"),
            });
        }
        let mut n_sched = current.control_cost.clone();
        let mut xi_sched = current.exploration.clone();
        let mut changed = false;
        if n_sched[t][(0, 0)] <= bounds.n_lower {
            n_sched[t][(0, 0)] = margin * bounds.n_lower;
            changed = true;
        }
        // Recompute the Ξ bound with the possibly raised N_t.
        let b = current.input[(0, 0)];
        let xi_bound = 2.0 * current.theta * n_sched[t][(0, 0)]
            + lambda_inv * b * b * p_next / (lambda_inv - p_next);
        let xi_inv = current.xi_inv(t)[(0, 0)];
        if xi_inv <= xi_bound {
            if xi_bound <= 0.0 {
                return Err(Error::ConditionsUnsatisfiable {
                    t,
                    reason: format!("no positive exploration variance meets bound {xi_bound}"),
                });
            }
            xi_sched[t][(0, 0)] = 1.0 / (margin * xi_bound);
            changed = true;
        }
        if changed {
            current = current.with_schedules(n_sched, xi_sched)?;
            adjusted.push(t);
        }
        let (v, _, _, _) = solver::backward_step(&vnext, t, &current)?;
        vnext = v;
    }
    adjusted.reverse();
    let sol = solver::solve(&current)?;
    Ok((current, sol, adjusted))
}

/// Repeated estimate → check/adjust → solve → explore → re-estimate.
///
/// Episode 0 is the backward pass on the initial estimates. Each later episode
/// runs the current saddle controls with exploration on the true system under
/// the reference measure, pools all transitions so far and refits `(A, B)`.
pub fn procedure_recursion(
    a_hat: Mat,
    b_hat: Mat,
    true_model: &ValidatedModel,
    config: &ProcedureConfig,
) -> Result<ProcedureLog> {
    let horizon = true_model.horizon;
    let runs_per_episode = config.transitions_per_episode.div_ceil(horizon).max(1);
    let mut estimate = EstimateRecord {
        a_hat,
        b_hat,
        residual_cov: None,
        a_std_error: None,
        b_std_error: None,
        samples: 0,
    };
    let mut data: Vec<Transition> = Vec::new();
    let mut episodes = Vec::with_capacity(config.episodes + 1);
    let mut current: Option<(ValidatedModel, Solution)> = None;
    for episode in 0..=config.episodes {
        let mut mean_theta_g = None;
        if let Some((adapted, sol)) = &current {
            // Estimated controls and adapted exploration, run on the true system.
            let system = true_model
                .with_schedules(true_model.control_cost.clone(), adapted.exploration.clone())?;
            let policy = PolicyParams::from_solution(sol);
            let factors = NoiseFactors::new(&system);
            let base = (episode as u64) * runs_per_episode as u64;
            let paths: Vec<PathSample> = (0..runs_per_episode as u64)
                .into_par_iter()
                .map(|i| {
                    let mut rng = rng::substream(config.seed, Purpose::Procedure, base + i);
                    sample_path(&system, &factors, &policy, Measure::Reference, &mut rng)
                })
                .collect();
            let mut costs = Vec::with_capacity(paths.len());
            for p in &paths {
                for t in 0..horizon {
                    data.push(Transition {
                        x: p.states[t].clone(),
                        control: &p.controls[t] + &p.v[t],
                        next: p.states[t + 1].clone(),
                    });
                }
                costs.push(
                    crate::duality::cost_g(&p.states, &p.controls, &p.eta, &system) * system.theta,
                );
            }
            mean_theta_g = Some(linalg::pairwise_sum(&costs) / costs.len() as f64);
            estimate = estimate_ab(&data, true_model)?;
        }
        let est_model = true_model.with_dynamics(estimate.a_hat.clone(), estimate.b_hat.clone())?;
        let (adapted, sol, adjusted_steps) = adapted_solve(&est_model, config.margin)?;
        let report = conditions::check_full_horizon(&sol);
        episodes.push(EpisodeRecord {
            episode,
            a_hat: estimate.a_hat.clone(),
            b_hat: estimate.b_hat.clone(),
            a_std_error: estimate.a_std_error.clone(),
            b_std_error: estimate.b_std_error.clone(),
            samples: estimate.samples,
            adjusted_steps,
            conditions_pass: report.all_pass,
            value_x0: solver::value_at(&sol, 0, &sol.model.x0),
            p0: sol.value[0].quad[(0, 0)],
            mean_theta_g,
        });
        current = Some((adapted, sol));
    }
    Ok(ProcedureLog { episodes })
}
