//! Backward recursion for the entropy-penalized LQ game.
//!
//! The value function is `V_t(x) = ½x'P_t x + x'p_t + r_t`. Each step builds the
//! coefficient bundle ([`FrakturSet`]) from `V_{t+1}` and the step-`t` model data,
//! solves the first-order system for the saddle controls, and assembles `V_t`.

use serde::Serialize;

use crate::conditions;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::ValidatedModel;
use crate::report::{self, Cell, Table};

/// Coefficients of `½x'Px + x'p + r`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueQuad {
    pub quad: Mat,
    pub lin: Vector,
    pub constant: f64,
}

impl ValueQuad {
    pub fn eval(&self, x: &Vector) -> f64 {
        0.5 * linalg::quad_form(x, &self.quad) + x.dot(&self.lin) + self.constant
    }

    /// `E[V(X)]` for `X ~ N(mean, cov)`.
    pub fn expect_gaussian(&self, mean: &Vector, cov: &Mat) -> f64 {
        self.eval(mean) + 0.5 * linalg::trace_product(cov, &self.quad)
    }
}

/// Shorthand coefficients at one backward step, built from `P_{t+1}, p_{t+1}` and step-`t` data.
///
/// With `P = P_{t+1}`, `p = p_{t+1}`:
/// `A1 = B'PA + θQ`, `a1 = B'Pa + B'p + θn`, `A2 = PA`, `a2 = Pa + p`,
/// `B1 = B'PB + 2θN_t`, `B2 = P − Λ_t⁻¹`, `B3 = B1 − Ξ_t⁻¹`, `C = B'P`, `G = C'B1⁻¹C − B2`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrakturSet {
    pub a1_mat: Mat,
    pub a1: Vector,
    pub a2_mat: Mat,
    pub a2: Vector,
    pub b1: Mat,
    pub b2: Mat,
    pub b3: Mat,
    pub c: Mat,
    pub g: Mat,
}

/// Affine saddle controls `u* = Du x + du`, `γ* = Dγ x + dγ`, `η* = Dη x + dη`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainSet {
    pub u_gain: Mat,
    pub u_offset: Vector,
    pub gamma_gain: Mat,
    pub gamma_offset: Vector,
    pub eta_gain: Mat,
    pub eta_offset: Vector,
}

impl GainSet {
    pub fn u(&self, x: &Vector) -> Vector {
        &self.u_gain * x + &self.u_offset
    }

    pub fn gamma(&self, x: &Vector) -> Vector {
        &self.gamma_gain * x + &self.gamma_offset
    }

    pub fn eta(&self, x: &Vector) -> Vector {
        &self.eta_gain * x + &self.eta_offset
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Solution {
    /// `V_t` for `t = 0..=T`.
    pub value: Vec<ValueQuad>,
    /// Saddle gains for `t = 0..T`.
    pub gains: Vec<GainSet>,
    /// `fraktur[t]` is built from `value[t + 1]`.
    pub fraktur: Vec<FrakturSet>,
    /// `‖P_t − P_t'‖∞` before symmetrization.
    pub asymmetry: Vec<f64>,
    /// False if any step fails the saddle-point sufficiency check.
    pub saddle_verified: bool,
    #[serde(skip)]
    pub model: ValidatedModel,
}

fn check_cond(m: &Mat) -> (f64, bool) {
    let cond = linalg::condition_number(m);
    (cond, cond <= linalg::COND_LIMIT)
}

/// Build the shorthand coefficients for step `t` from `V_{t+1}`.
pub fn fraktur_coeffs(vnext: &ValueQuad, t: usize, model: &ValidatedModel) -> Result<FrakturSet> {
    let p = &vnext.quad;
    let b = &model.input;
    let theta = model.theta;
    let bt = b.transpose();
    let c = &bt * p;
    let a1_mat = &c * &model.transition + &model.cross_cost * theta;
    let a1 = &c * &model.drift + &bt * &vnext.lin + &model.control_linear * theta;
    let a2_mat = p.transpose() * &model.transition;
    let a2 = p.transpose() * &model.drift + &vnext.lin;
    let b1 = &c * b + &model.control_cost[t] * (2.0 * theta);
    let b2 = p - model.lambda_inv(t);
    let b3 = &b1 - model.xi_inv(t);
    let (cond, ok) = check_cond(&b1);
    if !ok {
        return Err(Error::SingularB1 { t, cond });
    }
    let y = b1
        .clone()
        .lu()
        .solve(&c)
        .ok_or(Error::SingularB1 { t, cond })?;
    let g = c.transpose() * y - &b2;
    Ok(FrakturSet {
        a1_mat,
        a1,
        a2_mat,
        a2,
        b1,
        b2,
        b3,
        c,
        g,
    })
}

impl FrakturSet {
    /// The `(u, γ)` block Hessian `[[B1, C], [C', B2]]`.
    pub fn stationarity_matrix(&self) -> Mat {
        let du = self.b1.nrows();
        let dx = self.b2.nrows();
        let mut h = Mat::zeros(du + dx, du + dx);
        h.view_mut((0, 0), (du, du)).copy_from(&self.b1);
        h.view_mut((0, du), (du, dx)).copy_from(&self.c);
        h.view_mut((du, 0), (dx, du)).copy_from(&self.c.transpose());
        h.view_mut((du, du), (dx, dx)).copy_from(&self.b2);
        h
    }

    /// The `(γ, η)` Hessian `H = [[B2, C'], [C, B3]]`.
    pub fn adversary_hessian(&self) -> Mat {
        let du = self.b1.nrows();
        let dx = self.b2.nrows();
        let mut h = Mat::zeros(dx + du, dx + du);
        h.view_mut((0, 0), (dx, dx)).copy_from(&self.b2);
        h.view_mut((0, dx), (dx, du)).copy_from(&self.c.transpose());
        h.view_mut((dx, 0), (du, dx)).copy_from(&self.c);
        h.view_mut((dx, dx), (du, du)).copy_from(&self.b3);
        h
    }

    fn linear_terms(&self, x: &Vector) -> (Vector, Vector) {
        (&self.a1_mat * x + &self.a1, &self.a2_mat * x + &self.a2)
    }
}

/// Saddle controls at state `x`: solve `B1 u + C γ = −(A1 x + a1)`, `C'u + B2 γ = −(A2 x + a2)`; `η* = 0`.
pub fn stationary_controls(f: &FrakturSet, x: &Vector) -> Result<(Vector, Vector, Vector)> {
    let du = f.b1.nrows();
    let dx = f.b2.nrows();
    let h = f.stationarity_matrix();
    let lu = linalg::factor(&h).ok_or(Error::SingularSystem)?;
    let (l1, l2) = f.linear_terms(x);
    let mut rhs = Vector::zeros(du + dx);
    rhs.rows_mut(0, du).copy_from(&(-l1));
    rhs.rows_mut(du, dx).copy_from(&(-l2));
    let z = lu.solve(&rhs).ok_or(Error::SingularSystem)?;
    Ok((
        z.rows(0, du).into_owned(),
        z.rows(du, dx).into_owned(),
        Vector::zeros(du),
    ))
}

/// Saddle controls through the Schur complement:
/// `γ* = G⁻¹(A2 x + a2 − C'B1⁻¹(A1 x + a1))`, `u* = −B1⁻¹(A1 x + a1 + C γ*)`.
pub fn closed_form_controls(f: &FrakturSet, x: &Vector) -> Result<(Vector, Vector, Vector)> {
    let b1 = f.b1.clone().lu();
    let g = f.g.clone().lu();
    let (l1, l2) = f.linear_terms(x);
    let b1_l1 = b1.solve(&l1).ok_or(Error::SingularSystem)?;
    let gamma = g
        .solve(&(l2 - f.c.transpose() * b1_l1))
        .ok_or(Error::SingularSystem)?;
    let u = -b1
        .solve(&(l1 + &f.c * &gamma))
        .ok_or(Error::SingularSystem)?;
    let du = f.b1.nrows();
    Ok((u, gamma, Vector::zeros(du)))
}

/// Read the affine gains off the stationarity system solved at `x = 0` and `x = e_i`.
pub fn gains_from_fraktur(f: &FrakturSet) -> Result<GainSet> {
    let du = f.b1.nrows();
    let dx = f.b2.nrows();
    let (u0, g0, _) = stationary_controls(f, &Vector::zeros(dx))?;
    let mut u_gain = Mat::zeros(du, dx);
    let mut gamma_gain = Mat::zeros(dx, dx);
    for i in 0..dx {
        let mut e = Vector::zeros(dx);
        e[i] = 1.0;
        let (u, g, _) = stationary_controls(f, &e)?;
        u_gain.set_column(i, &(u - &u0));
        gamma_gain.set_column(i, &(g - &g0));
    }
    Ok(GainSet {
        u_gain,
        u_offset: u0,
        gamma_gain,
        gamma_offset: g0,
        eta_gain: Mat::zeros(du, dx),
        eta_offset: Vector::zeros(du),
    })
}

/// One step of the recursion: `V_t` from `V_{t+1}`, along with the coefficients and gains.
pub fn backward_step(
    vnext: &ValueQuad,
    t: usize,
    model: &ValidatedModel,
) -> Result<(ValueQuad, FrakturSet, GainSet, f64)> {
    let f = fraktur_coeffs(vnext, t, model)?;
    let (g_cond, ok) = check_cond(&f.g);
    if !ok {
        return Err(Error::SingularG { t, cond: g_cond });
    }
    let b1 = f.b1.clone().lu();
    let g = f.g.clone().lu();
    let solve_b1 = |m: &Mat| b1.solve(m).ok_or(Error::SingularB1 { t, cond: g_cond });
    let solve_g = |m: &Mat| g.solve(m).ok_or(Error::SingularG { t, cond: g_cond });
    let as_mat = |v: &Vector| Mat::from_column_slice(v.len(), 1, v.as_slice());

    let p = &vnext.quad;
    let a = &model.transition;
    let drift = &model.drift;
    let theta = model.theta;
    let ct = f.c.transpose();

    // B1⁻¹A1, B1⁻¹a1, B1⁻¹C and G⁻¹ applied to A2, a2, C'B1⁻¹A1, C'B1⁻¹a1.
    let b1_a1 = solve_b1(&f.a1_mat)?;
    let b1_av1 = solve_b1(&as_mat(&f.a1))?;
    let b1_c = solve_b1(&f.c)?;
    let g_a2 = solve_g(&f.a2_mat)?;
    let g_av2 = solve_g(&as_mat(&f.a2))?;
    let g_ct_b1_a1 = solve_g(&(&ct * &b1_a1))?;
    let g_ct_b1_av1 = solve_g(&(&ct * &b1_av1))?;
    let a1t = f.a1_mat.transpose();
    let a1t_b1_c = &a1t * &b1_c;

    let cross = &a1t_b1_c * &g_a2;
    let quad = -(&a1t * &b1_a1) - (&cross + cross.transpose())
        + &a1t_b1_c * &g_ct_b1_a1
        + f.a2_mat.transpose() * &g_a2
        + &model.state_cost * (2.0 * theta)
        + a.transpose() * p * a;
    let asym = linalg::max_abs(&(&quad - quad.transpose()));
    let quad = linalg::symmetrize(&quad);

    let lin: Mat = -(&a1t * &b1_av1) - &a1t_b1_c * &g_av2 + &a1t_b1_c * &g_ct_b1_av1
        - f.a2_mat.transpose() * &g_ct_b1_av1
        + f.a2_mat.transpose() * &g_av2
        + a.transpose() * p * as_mat(drift)
        + as_mat(&model.state_linear) * theta
        + a.transpose() * as_mat(&vnext.lin);
    let lin = lin.column(0).into_owned();

    let a1v = &f.a1;
    let a2v = &f.a2;
    let b = &model.input;
    let bxb = b * &model.exploration[t] * b.transpose();
    let constant = -0.5 * a1v.dot(&b1_av1.column(0)) - a1v.dot(&(&b1_c * &g_av2).column(0))
        + 0.5 * a1v.dot(&(&b1_c * &g_ct_b1_av1).column(0))
        + 0.5 * a2v.dot(&g_av2.column(0))
        + 0.5 * linalg::trace_product(&bxb, p)
        + 0.5 * linalg::trace_product(&model.system_noise[t], p)
        + vnext.constant
        + 0.5 * linalg::quad_form(drift, p)
        + drift.dot(&vnext.lin)
        + theta * linalg::trace_product(&model.exploration[t], &model.control_cost[t]);

    let gains = gains_from_fraktur(&f)?;
    Ok((
        ValueQuad {
            quad,
            lin,
            constant,
        },
        f,
        gains,
        asym,
    ))
}

pub fn terminal_value(model: &ValidatedModel) -> ValueQuad {
    let (quad, lin) = model.terminal_coefficients();
    ValueQuad {
        quad,
        lin,
        constant: 0.0,
    }
}

/// Full backward sweep `t = T−1, …, 0`.
pub fn solve(model: &ValidatedModel) -> Result<Solution> {
    let horizon = model.horizon;
    let mut value = vec![terminal_value(model)];
    let mut gains = Vec::with_capacity(horizon);
    let mut fraktur = Vec::with_capacity(horizon);
    let mut asymmetry = Vec::with_capacity(horizon);
    for t in (0..horizon).rev() {
        let (v, f, g, asym) = backward_step(value.last().expect("nonempty"), t, model)?;
        value.push(v);
        fraktur.push(f);
        gains.push(g);
        asymmetry.push(asym);
    }
    value.reverse();
    fraktur.reverse();
    gains.reverse();
    asymmetry.reverse();
    let saddle_verified = fraktur
        .iter()
        .all(|f| conditions::check_assumption1(f).violations.is_empty());
    if !saddle_verified {
        log::warn!("saddle-point sufficiency check failed at one or more steps");
    }
    Ok(Solution {
        value,
        gains,
        fraktur,
        asymmetry,
        saddle_verified,
        model: model.clone(),
    })
}

/// `V_t(x) = ½x'P_t x + x'p_t + r_t`.
pub fn value_at(sol: &Solution, t: usize, x: &Vector) -> f64 {
    sol.value[t].eval(x)
}

/// Exponential and certainty-equivalent transforms of `V_0(x0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CriterionTransforms {
    /// `ln inf I = V_0(x0)`.
    pub log_inf_i: f64,
    /// `inf I = exp(V_0(x0))`, infinite on overflow.
    pub inf_i: f64,
    pub overflow: bool,
    /// `sup J = −V_0(x0)/θ`.
    pub sup_j: f64,
}

pub fn criterion_transforms(sol: &Solution) -> CriterionTransforms {
    let v0 = value_at(sol, 0, &sol.model.x0);
    let inf_i = v0.exp();
    CriterionTransforms {
        log_inf_i: v0,
        inf_i,
        overflow: !inf_i.is_finite(),
        sup_j: -v0 / sol.model.theta,
    }
}

/// Mean and covariance of `x_{t+1}` under the shifted measure:
/// mean `a + Ax + B(u + η) + γ`, covariance `Λ_t + BΞ_tB'`.
pub fn next_state_moments(
    model: &ValidatedModel,
    t: usize,
    x: &Vector,
    u: &Vector,
    gamma: &Vector,
    eta: &Vector,
) -> (Vector, Mat) {
    let b = &model.input;
    let mean = &model.drift + &model.transition * x + b * (u + eta) + gamma;
    let cov = &model.system_noise[t] + b * &model.exploration[t] * b.transpose();
    (mean, cov)
}

/// `E^{γ,η}_{t,x}[V_{t+1}(x_{t+1})]` in closed form.
pub fn lemma1_expectation(
    vnext: &ValueQuad,
    x: &Vector,
    u: &Vector,
    gamma: &Vector,
    eta: &Vector,
    t: usize,
    model: &ValidatedModel,
) -> f64 {
    let (mean, cov) = next_state_moments(model, t, x, u, gamma, eta);
    vnext.expect_gaussian(&mean, &cov)
}

/// The one-step game objective whose inf–sup defines `V_t(x)`:
/// `θ·(running cost with control u + η) − ½γ'Λ⁻¹γ − ½η'Ξ⁻¹η + E[V_{t+1}]`.
pub fn dpp_objective(
    vnext: &ValueQuad,
    x: &Vector,
    u: &Vector,
    gamma: &Vector,
    eta: &Vector,
    t: usize,
    model: &ValidatedModel,
) -> f64 {
    let running = model.running_cost(t, x, &(u + eta));
    let entropy = 0.5 * linalg::quad_form(gamma, model.lambda_inv(t))
        + 0.5 * linalg::quad_form(eta, model.xi_inv(t));
    model.theta * running - entropy + lemma1_expectation(vnext, x, u, gamma, eta, t, model)
}

/// Coefficients laid out as in the reference table: row `t` uses the bundle built from `P_t`.
pub fn table_fraktur(sol: &Solution, t: usize) -> Result<FrakturSet> {
    if t == 0 {
        fraktur_coeffs(&sol.value[0], 0, &sol.model)
    } else {
        Ok(sol.fraktur[t - 1].clone())
    }
}

/// One row per `t = 0..=T`: `t, P, p, r, Du, du, Dg, dg, B1, B2, B3, C, det_negH`.
/// Gains at row `t` act at step `t`; the coefficient columns use the table layout of [`table_fraktur`].
pub fn solution_table(sol: &Solution) -> Result<Table> {
    let dx = sol.model.state_dim();
    let du = sol.model.control_dim();
    let mut columns = vec!["t".to_string()];
    columns.extend(report::matrix_columns("P", dx, dx));
    columns.extend(report::vector_columns("p", dx));
    columns.push("r".into());
    columns.extend(report::matrix_columns("Du", du, dx));
    columns.extend(report::vector_columns("du", du));
    columns.extend(report::matrix_columns("Dg", dx, dx));
    columns.extend(report::vector_columns("dg", dx));
    columns.extend(report::matrix_columns("B1", du, du));
    columns.extend(report::matrix_columns("B2", dx, dx));
    columns.extend(report::matrix_columns("B3", du, du));
    columns.extend(report::matrix_columns("C", du, dx));
    columns.push("det_negH".into());

    let mut rows = Vec::with_capacity(sol.value.len());
    for (t, v) in sol.value.iter().enumerate() {
        let mut row = vec![Cell::Num(t as f64)];
        row.extend(report::matrix_cells(&v.quad));
        row.extend(report::vector_cells(&v.lin));
        row.push(Cell::Num(v.constant));
        match sol.gains.get(t) {
            Some(g) => {
                row.extend(report::matrix_cells(&g.u_gain));
                row.extend(report::vector_cells(&g.u_offset));
                row.extend(report::matrix_cells(&g.gamma_gain));
                row.extend(report::vector_cells(&g.gamma_offset));
            }
            None => row.extend(report::empty_cells(du * dx + du + dx * dx + dx)),
        }
        let f = table_fraktur(sol, t)?;
        row.extend(report::matrix_cells(&f.b1));
        row.extend(report::matrix_cells(&f.b2));
        row.extend(report::matrix_cells(&f.b3));
        row.extend(report::matrix_cells(&f.c));
        row.push(Cell::Num(conditions::det_neg_h(&f)));
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

/// Deterministic columns `t, P, p, r, B1, B2, B3, C, det_negH` of the reference
/// run, rounded to 4 decimals. Row 0 has no coefficient entries.
pub const REFERENCE_TABLE: &str = include_str!("../data/reference_table.csv");

/// Compare a scalar solution with [`REFERENCE_TABLE`] after rounding both to 4
/// decimals. Returns the number of cells compared and a description of each mismatch.
pub fn reference_mismatches(sol: &Solution) -> Result<(usize, Vec<String>)> {
    if !sol.model.is_scalar() {
        return Err(Error::NotScalar);
    }
    let table = solution_table(sol)?;
    let round4 = |v: f64| (v * 1e4).round() / 1e4 + 0.0;
    let mut reader = csv::Reader::from_reader(REFERENCE_TABLE.as_bytes());
    let headers = reader.headers()?.clone();
    let mut compared = 0;
    let mut mismatches = Vec::new();
    for (t, record) in reader.records().enumerate() {
        let record = record?;
        for (name, field) in headers.iter().zip(record.iter()).skip(1) {
            if field.is_empty() {
                continue;
            }
            let expected: f64 = field.parse().map_err(|_| Error::Parse {
                location: format!("reference row {t}, column {name}"),
                message: format!("not a number: {field}"),
            })?;
            let got = table
                .column(name)
                .and_then(|c| c.get(t).and_then(Cell::as_f64))
                .unwrap_or(f64::NAN);
            compared += 1;
            if round4(got) != round4(expected) {
                mismatches.push(format!("t={t} {name}: {got:.6} vs {expected}"));
            }
        }
    }
    Ok((compared, mismatches))
}
