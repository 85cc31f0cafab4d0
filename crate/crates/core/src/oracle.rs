//! Brute-force cross-checks of the analytic solver.
//!
//! Everything here avoids the solver's closed forms: the saddle is located by
//! probing `F` as a black box, the log-moment by tensor-product Gauss–Hermite
//! quadrature, and the value function by grid search over the one-step game.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::conditions;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::{validate, ModelSpec, ScalarParams, ValidatedModel};
use crate::solver::{self, FrakturSet, GainSet, ValueQuad};

/// `F(u, γ, η; x)` term by term.
pub fn eval_f(f: &FrakturSet, x: &Vector, u: &Vector, gamma: &Vector, eta: &Vector) -> f64 {
    let a1x = &f.a1_mat * x;
    let a2x = &f.a2_mat * x;
    0.5 * u.dot(&(&f.b1 * u))
        + u.dot(&a1x)
        + u.dot(&f.a1)
        + 0.5 * gamma.dot(&(&f.b2 * gamma))
        + gamma.dot(&a2x)
        + gamma.dot(&f.a2)
        + 0.5 * eta.dot(&(&f.b3 * eta))
        + eta.dot(&a1x)
        + eta.dot(&f.a1)
        + u.dot(&(&f.c * gamma))
        + u.dot(&(&f.b1 * eta))
        + eta.dot(&(&f.c * gamma))
}

fn split(z: &Vector, du: usize, dx: usize) -> (Vector, Vector, Vector) {
    (
        z.rows(0, du).into_owned(),
        z.rows(du, dx).into_owned(),
        z.rows(du + dx, du).into_owned(),
    )
}

fn join(u: &Vector, gamma: &Vector, eta: &Vector) -> Vector {
    let mut z = Vector::zeros(u.len() + gamma.len() + eta.len());
    z.rows_mut(0, u.len()).copy_from(u);
    z.rows_mut(u.len(), gamma.len()).copy_from(gamma);
    z.rows_mut(u.len() + gamma.len(), eta.len()).copy_from(eta);
    z
}

/// Central-difference gradient of `F` in `(u, γ, η)`.
pub fn fd_gradient_f(
    f: &FrakturSet,
    x: &Vector,
    u: &Vector,
    gamma: &Vector,
    eta: &Vector,
    h: f64,
) -> Vector {
    let du = u.len();
    let dx = gamma.len();
    let z = join(u, gamma, eta);
    let eval = |z: &Vector| {
        let (u, g, e) = split(z, du, dx);
        eval_f(f, x, &u, &g, &e)
    };
    Vector::from_fn(z.len(), |i, _| {
        let mut zp = z.clone();
        let mut zm = z.clone();
        zp[i] += h;
        zm[i] -= h;
        (eval(&zp) - eval(&zm)) / (2.0 * h)
    })
}

/// Gradient and Hessian of `F(·; x)` recovered from probes. Exact up to rounding
/// because `F` is quadratic.
fn probe_quadratic(f: &FrakturSet, x: &Vector) -> (Vector, Mat) {
    let du = f.b1.nrows();
    let dx = f.b2.nrows();
    let n = 2 * du + dx;
    let grad_at = |z: &Vector| {
        let (u, g, e) = split(z, du, dx);
        fd_gradient_f(f, x, &u, &g, &e, 1.0)
    };
    let g0 = grad_at(&Vector::zeros(n));
    let mut h = Mat::zeros(n, n);
    for j in 0..n {
        let mut e = Vector::zeros(n);
        e[j] = 1.0;
        h.set_column(j, &(grad_at(&e) - &g0));
    }
    (g0, linalg::symmetrize(&h))
}

/// Numerical saddle of `F(·; x)`: min over `u` of the envelope `max_{γ,η} F`.
///
/// The inner maximization is an exact quadratic solve; the outer minimization is
/// steepest descent with exact line search on the envelope. Iterates stop once a
/// step moves less than `1e-10`.
pub fn numeric_saddle_f(f: &FrakturSet, x: &Vector) -> Result<(Vector, Vector, Vector)> {
    const MAX_SWEEPS: usize = 10_000;
    let du = f.b1.nrows();
    let dx = f.b2.nrows();
    let nv = dx + du;
    let (g0, h) = probe_quadratic(f, x);
    let huu = h.view((0, 0), (du, du)).into_owned();
    let hvv = h.view((du, du), (nv, nv)).into_owned();
    let hvu = h.view((du, 0), (nv, du)).into_owned();
    let gu = g0.rows(0, du).into_owned();
    let gv = g0.rows(du, nv).into_owned();
    let neg_hvv = linalg::cholesky(&(-&hvv))
        .ok_or_else(|| Error::Precondition("F is not concave in (gamma, eta)".into()))?;

    // Best response of the maximizer: ν*(u) = −H_νν⁻¹(g_ν + H_νu u).
    let best_nu = |u: &Vector| neg_hvv.solve(&(&gv + &hvu * u));
    let envelope = |u: &Vector| {
        let nu = best_nu(u);
        let z = join(
            u,
            &nu.rows(0, dx).into_owned(),
            &nu.rows(dx, du).into_owned(),
        );
        let (a, b, c) = split(&z, du, dx);
        eval_f(f, x, &a, &b, &c)
    };

    let mut u = Vector::zeros(du);
    for _ in 0..MAX_SWEEPS {
        let nu = best_nu(&u);
        // Envelope gradient: ∂F/∂u at ν*(u).
        let grad = &gu + &huu * &u + hvu.transpose() * &nu;
        let norm = grad.norm();
        if norm == 0.0 {
            return Ok((u, nu.rows(0, dx).into_owned(), nu.rows(dx, du).into_owned()));
        }
        let dir = -grad / norm;
        let phi0 = envelope(&u);
        let phi_p = envelope(&(&u + &dir));
        let phi_m = envelope(&(&u - &dir));
        let curvature = phi_p - 2.0 * phi0 + phi_m;
        if curvature <= 0.0 {
            return Err(Error::Precondition("F envelope is not convex in u".into()));
        }
        let alpha = -(phi_p - phi_m) / (2.0 * curvature);
        let step = &dir * alpha;
        u += &step;
        if step.amax() < 1e-10 {
            let nu = best_nu(&u);
            return Ok((u, nu.rows(0, dx).into_owned(), nu.rows(dx, du).into_owned()));
        }
    }
    Err(Error::NoConvergence(MAX_SWEEPS))
}

/// Probabilists' Gauss–Hermite rule: `E[g(Z)] ≈ Σ w_i g(x_i)` for `Z ~ N(0, 1)`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = Mat::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let mut nodes: Vec<f64> = jacobi
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    nodes.sort_by(f64::total_cmp);
    // Christoffel weights 1 / Σ_k h_k(x)² from the orthonormal recurrence; the
    // eigenvector route loses the tiny tail weights to rounding.
    let weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let (mut prev, mut cur) = (0.0, 1.0);
            let mut sum = 1.0;
            for k in 0..n - 1 {
                let next = (x * cur - (k as f64).sqrt() * prev) / ((k + 1) as f64).sqrt();
                prev = cur;
                cur = next;
                sum += cur * cur;
            }
            1.0 / sum
        })
        .collect();
    (nodes, weights)
}

/// Largest horizon accepted by the quadrature and grid oracles.
pub const MAX_ORACLE_HORIZON: usize = 3;

/// Default node count per noise dimension: 64 up to `T = 2`, 20 at `T = 3`.
pub fn default_nodes(horizon: usize) -> usize {
    if horizon <= 2 {
        64
    } else {
        20
    }
}

struct ScalarData {
    a: f64,
    am: f64,
    b: f64,
    theta: f64,
    mm: f64,
    q: f64,
    m: f64,
    n: f64,
    nn: Vec<f64>,
    xi: Vec<f64>,
    sd_w: Vec<f64>,
    sd_v: Vec<f64>,
    du: Vec<f64>,
    dd: Vec<f64>,
}

impl ScalarData {
    fn new(model: &ValidatedModel, gains: &[GainSet]) -> Self {
        let s = |m: &Mat| m[(0, 0)];
        ScalarData {
            a: model.drift[0],
            am: s(&model.transition),
            b: s(&model.input),
            theta: model.theta,
            mm: s(&model.state_cost),
            q: s(&model.cross_cost),
            m: model.state_linear[0],
            n: model.control_linear[0],
            nn: model.control_cost.iter().map(s).collect(),
            xi: model.exploration.iter().map(s).collect(),
            sd_w: model.system_noise.iter().map(|m| s(m).sqrt()).collect(),
            sd_v: model.exploration.iter().map(|m| s(m).sqrt()).collect(),
            du: gains.iter().map(|g| s(&g.u_gain)).collect(),
            dd: gains.iter().map(|g| g.u_offset[0]).collect(),
        }
    }

    fn running(&self, t: usize, x: f64, u: f64) -> f64 {
        self.mm * x * x
            + self.xi[t] * self.nn[t]
            + self.nn[t] * u * u
            + u * self.q * x
            + x * self.m
            + u * self.n
    }
}

/// `ln E_P[exp(θ·Σ running + V_T(x_T))]` by tensor-product Gauss–Hermite over every `w_t`, `v_t`.
pub fn quadrature_log_moment(model: &ValidatedModel, gains: &[GainSet]) -> Result<f64> {
    quadrature_log_moment_with(model, gains, default_nodes(model.horizon))
}

pub fn quadrature_log_moment_with(
    model: &ValidatedModel,
    gains: &[GainSet],
    nodes: usize,
) -> Result<f64> {
    if !model.is_scalar() {
        return Err(Error::NotScalar);
    }
    if model.horizon > MAX_ORACLE_HORIZON {
        return Err(Error::Precondition(format!(
            "quadrature needs T <= {MAX_ORACLE_HORIZON}, got {}",
            model.horizon
        )));
    }
    let data = ScalarData::new(model, gains);
    let (tq, tl) = model.terminal_coefficients();
    let (tq, tl) = (tq[(0, 0)], tl[0]);
    let (z, w) = gauss_hermite(nodes);
    let horizon = model.horizon;

    // Exponent on the noise-free path, used as the shift.
    let mut x = model.x0[0];
    let mut shift = 0.0;
    for t in 0..horizon {
        let u = data.du[t] * x + data.dd[t];
        shift += data.theta * data.running(t, x, u);
        x = data.a + data.am * x + data.b * u;
    }
    shift += 0.5 * tq * x * x + tl * x;

    fn recurse(
        d: &ScalarData,
        z: &[f64],
        w: &[f64],
        t: usize,
        horizon: usize,
        x: f64,
        acc: f64,
        term: (f64, f64),
        shift: f64,
    ) -> f64 {
        if t == horizon {
            return (acc + 0.5 * term.0 * x * x + term.1 * x - shift).exp();
        }
        let u = d.du[t] * x + d.dd[t];
        let acc = acc + d.theta * d.running(t, x, u);
        let base = d.a + d.am * x + d.b * u;
        let mut total = 0.0;
        for (zw, ww) in z.iter().zip(w) {
            let wn = d.sd_w[t] * zw;
            let mut inner = 0.0;
            for (zv, wv) in z.iter().zip(w) {
                let next = base + d.b * d.sd_v[t] * zv + wn;
                inner += wv * recurse(d, z, w, t + 1, horizon, next, acc, term, shift);
            }
            total += ww * inner;
        }
        total
    }

    let x0 = model.x0[0];
    let u0 = data.du[0] * x0 + data.dd[0];
    let acc0 = data.theta * data.running(0, x0, u0);
    let base0 = data.a + data.am * x0 + data.b * u0;
    let partial: Vec<f64> = (0..nodes)
        .into_par_iter()
        .map(|i| {
            let wn = data.sd_w[0] * z[i];
            let mut inner = 0.0;
            for (zv, wv) in z.iter().zip(&w) {
                let next = base0 + data.b * data.sd_v[0] * zv + wn;
                inner += wv * recurse(&data, &z, &w, 1, horizon, next, acc0, (tq, tl), shift);
            }
            w[i] * inner
        })
        .collect();
    let mean = linalg::pairwise_sum(&partial);
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::InfiniteMoment("quadrature sum is not finite".into()));
    }
    Ok(shift + mean.ln())
}

/// Brackets and resolution for [`dp_grid_value`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridConfig {
    pub states: Vec<f64>,
    pub u_bracket: (f64, f64),
    pub gamma_bracket: (f64, f64),
    pub eta_bracket: (f64, f64),
    /// Points per zoom level.
    pub points: usize,
    /// Zoom levels per one-dimensional search.
    pub levels: usize,
    /// Bracket doublings allowed when the first level peaks on an endpoint.
    pub expansions: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            states: (0..9).map(|i| -1.0 + 0.25 * i as f64).collect(),
            u_bracket: (-5.0, 5.0),
            gamma_bracket: (-5.0, 5.0),
            eta_bracket: (-5.0, 5.0),
            points: 11,
            levels: 10,
            expansions: 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridDpResult {
    pub states: Vec<f64>,
    /// `values[t][i]` approximates `V_t(states[i])`.
    pub values: Vec<Vec<f64>>,
    /// Least-squares quadratic fit `(P, p, r)` of each gridded `V_t`.
    pub fits: Vec<(f64, f64, f64)>,
    /// Fitted `V_0(x0)`.
    pub v0_at_x0: f64,
}

/// Zooming grid search for the optimum of a unimodal function on `[lo, hi]`.
/// The bracket doubles about its center, at most `expansions` times, while the
/// coarsest level peaks on an endpoint.
fn zoom_search(
    objective: &dyn Fn(f64) -> f64,
    bracket: (f64, f64),
    points: usize,
    levels: usize,
    expansions: usize,
    maximize: bool,
    name: &str,
) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = bracket;
    let mut expanded = 0;
    let mut best = (0.5 * (lo + hi), objective(0.5 * (lo + hi)));
    let mut level = 0;
    while level < levels {
        let h = (hi - lo) / (points - 1) as f64;
        let vals: Vec<(f64, f64)> = (0..points)
            .map(|i| {
                let s = lo + h * i as f64;
                (s, objective(s))
            })
            .collect();
        let center = (points - 1) as f64 / 2.0;
        let better = |a: f64, b: f64| if maximize { a > b } else { a < b };
        let mut idx = 0;
        for i in 1..points {
            let (vi, vb) = (vals[i].1, vals[idx].1);
            let closer = ((i as f64) - center).abs() < ((idx as f64) - center).abs();
            if better(vi, vb) || (vb.is_nan() && !vi.is_nan()) || (vi == vb && closer) {
                idx = i;
            }
        }
        if level == 0 && (idx == 0 || idx == points - 1 || vals[idx].1.is_nan()) {
            if expanded == expansions {
                return Err(Error::GridTooCoarse(name.to_string()));
            }
            expanded += 1;
            let (mid, half) = (0.5 * (lo + hi), hi - lo);
            (lo, hi) = (mid - half, mid + half);
            continue;
        }
        best = vals[idx];
        lo = vals[idx.saturating_sub(1)].0;
        hi = vals[(idx + 1).min(points - 1)].0;
        level += 1;
    }
    Ok(best)
}

fn fit_quadratic(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let z = Mat::from_fn(xs.len(), 3, |i, j| match j {
        0 => 0.5 * xs[i] * xs[i],
        1 => xs[i],
        _ => 1.0,
    });
    let y = Vector::from_column_slice(ys);
    let sol = z
        .svd(true, true)
        .solve(&y, 1e-14)
        .map_err(|e| Error::Precondition(e.to_string()))?;
    Ok((sol[0], sol[1], sol[2]))
}

/// `V_0` by backward inf–sup over control grids, with the closed-form Gaussian
/// expectation of a quadratic fit to the gridded `V_{t+1}` as continuation.
pub fn dp_grid_value(model: &ValidatedModel, grid: &GridConfig) -> Result<GridDpResult> {
    if !model.is_scalar() {
        return Err(Error::NotScalar);
    }
    if model.horizon > MAX_ORACLE_HORIZON {
        return Err(Error::Precondition(format!(
            "grid DP needs T <= {MAX_ORACLE_HORIZON}, got {}",
            model.horizon
        )));
    }
    let horizon = model.horizon;
    let xs = &grid.states;
    let terminal = solver::terminal_value(model);
    let mut values = vec![xs
        .iter()
        .map(|&x| terminal.eval(&Vector::from_element(1, x)))
        .collect::<Vec<_>>()];
    let mut fits = vec![fit_quadratic(xs, &values[0])?];
    for t in (0..horizon).rev() {
        let (pq, pl, pc) = *fits.last().expect("nonempty");
        let vnext = ValueQuad {
            quad: Mat::from_element(1, 1, pq),
            lin: Vector::from_element(1, pl),
            constant: pc,
        };
        let row: Vec<f64> = xs
            .par_iter()
            .map(|&x| {
                let xv = Vector::from_element(1, x);
                let obj = |u: f64, g: f64, e: f64| {
                    solver::dpp_objective(
                        &vnext,
                        &xv,
                        &Vector::from_element(1, u),
                        &Vector::from_element(1, g),
                        &Vector::from_element(1, e),
                        t,
                        model,
                    )
                };
                let sup_eta = |u: f64, g: f64| {
                    zoom_search(
                        &|e| obj(u, g, e),
                        grid.eta_bracket,
                        grid.points,
                        grid.levels,
                        grid.expansions,
                        true,
                        "eta",
                    )
                    .map(|r| r.1)
                };
                let sup_gamma = |u: f64| {
                    zoom_search(
                        &|g| sup_eta(u, g).unwrap_or(f64::NAN),
                        grid.gamma_bracket,
                        grid.points,
                        grid.levels,
                        grid.expansions,
                        true,
                        "gamma",
                    )
                    .map(|r| r.1)
                };
                // Surface inner boundary hits before the outer search.
                sup_gamma(0.5 * (grid.u_bracket.0 + grid.u_bracket.1))?;
                zoom_search(
                    &|u| sup_gamma(u).unwrap_or(f64::NAN),
                    grid.u_bracket,
                    grid.points,
                    grid.levels,
                    grid.expansions,
                    false,
                    "u",
                )
                .map(|r| r.1)
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::GridTooCoarse("inner search".into()));
        }
        fits.push(fit_quadratic(xs, &row)?);
        values.push(row);
    }
    values.reverse();
    fits.reverse();
    let (p, q, r) = fits[0];
    let x0 = model.x0[0];
    Ok(GridDpResult {
        states: xs.clone(),
        values,
        fits,
        v0_at_x0: 0.5 * p * x0 * x0 + q * x0 + r,
    })
}

/// A single oracle comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub check: String,
    #[serde(rename = "instance-hash")]
    pub instance_hash: String,
    #[serde(rename = "max-deviation")]
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn new(check: &str, model: &ModelSpec, max_deviation: f64, tolerance: f64) -> Self {
        OracleReport {
            check: check.to_string(),
            instance_hash: instance_hash(model),
            max_deviation,
            tolerance,
            pass: max_deviation <= tolerance,
        }
    }
}

/// SHA-256 of the instance's configuration document.
pub fn instance_hash(model: &ModelSpec) -> String {
    let text = crate::config::to_config_string(model);
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// A random scalar instance with a random continuation `V_{t+1}`.
pub fn random_scalar_instance<R: Rng>(rng: &mut R) -> (ValidatedModel, ValueQuad) {
    let params = ScalarParams {
        a: rng.random_range(-1.0..1.0),
        a_mat: rng.random_range(-1.5..1.5),
        b: rng.random_range(-1.5..1.5),
        lambda: rng.random_range(0.02..1.0),
        xi: rng.random_range(0.02..1.0),
        m_mat: rng.random_range(0.0..3.0),
        n_mat: rng.random_range(0.05..3.0),
        q: rng.random_range(-1.0..1.0),
        m: rng.random_range(-1.0..1.0),
        n: rng.random_range(-1.0..1.0),
        m_terminal: rng.random_range(0.0..4.0),
        m_terminal_linear: rng.random_range(-1.0..1.0),
        theta: rng.random_range(0.1..2.0),
        horizon: 1,
        x0: rng.random_range(-2.0..2.0),
    };
    let model = validate(params.into_spec()).expect("sampled ranges are valid");
    let vnext = ValueQuad {
        quad: Mat::from_element(1, 1, rng.random_range(-2.0..6.0)),
        lin: Vector::from_element(1, rng.random_range(-2.0..2.0)),
        constant: rng.random_range(-1.0..1.0),
    };
    (model, vnext)
}

/// Draw random scalar instances until one passes the saddle check.
pub fn random_saddle_instance<R: Rng>(rng: &mut R) -> (ValidatedModel, ValueQuad, FrakturSet) {
    loop {
        let (model, vnext) = random_scalar_instance(rng);
        if let Ok(f) = solver::fraktur_coeffs(&vnext, 0, &model) {
            if conditions::check_assumption1(&f).violations.is_empty() {
                return (model, vnext, f);
            }
        }
    }
}
