//! Exact evaluation of affine policies in the dual game.
//!
//! A policy fixes `ū_t = D_t x + d_t`, `γ_t = E_t x + e_t`, `η_t = F_t x + f_t`.
//! Its objective `E^{γ,η}[θ·running + V_T] − D_KL` is again quadratic in the
//! initial state, so it is computed by a backward sweep; the state moments
//! under the shifted measure come from a forward sweep. Together they give the
//! exact policy gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::model::ValidatedModel;
use crate::solver::{self, FrakturSet, GainSet, Solution, ValueQuad};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub d: Vec<Mat>,
    pub d_off: Vec<Vector>,
    pub e: Vec<Mat>,
    pub e_off: Vec<Vector>,
    pub f: Vec<Mat>,
    pub f_off: Vec<Vector>,
}

impl PolicyParams {
    pub fn zeros(model: &ValidatedModel) -> Self {
        let (dx, du, t) = (model.state_dim(), model.control_dim(), model.horizon);
        PolicyParams {
            d: vec![Mat::zeros(du, dx); t],
            d_off: vec![Vector::zeros(du); t],
            e: vec![Mat::zeros(dx, dx); t],
            e_off: vec![Vector::zeros(dx); t],
            f: vec![Mat::zeros(du, dx); t],
            f_off: vec![Vector::zeros(du); t],
        }
    }

    /// The saddle policy of a solution: `(Du, du, Dγ, dγ, 0, 0)`.
    pub fn from_solution(sol: &Solution) -> Self {
        Self::from_gains(&sol.gains)
    }

    pub fn from_gains(gains: &[GainSet]) -> Self {
        PolicyParams {
            d: gains.iter().map(|g| g.u_gain.clone()).collect(),
            d_off: gains.iter().map(|g| g.u_offset.clone()).collect(),
            e: gains.iter().map(|g| g.gamma_gain.clone()).collect(),
            e_off: gains.iter().map(|g| g.gamma_offset.clone()).collect(),
            f: gains.iter().map(|g| g.eta_gain.clone()).collect(),
            f_off: gains.iter().map(|g| g.eta_offset.clone()).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.d.len()
    }

    pub fn u(&self, t: usize, x: &Vector) -> Vector {
        &self.d[t] * x + &self.d_off[t]
    }

    pub fn gamma(&self, t: usize, x: &Vector) -> Vector {
        &self.e[t] * x + &self.e_off[t]
    }

    pub fn eta(&self, t: usize, x: &Vector) -> Vector {
        &self.f[t] * x + &self.f_off[t]
    }

    /// Control gains from `self`, shift gains from `other`.
    pub fn with_shift_of(&self, other: &PolicyParams) -> Self {
        PolicyParams {
            e: other.e.clone(),
            e_off: other.e_off.clone(),
            f: other.f.clone(),
            f_off: other.f_off.clone(),
            ..self.clone()
        }
    }

    /// Stacked gain `[D; E; F]` and offset `[d; e; f]` at step `t`.
    fn stacked(&self, t: usize) -> (Mat, Vector) {
        let du = self.d[t].nrows();
        let dx = self.e[t].nrows();
        let n = 2 * du + dx;
        let mut k = Mat::zeros(n, dx);
        let mut off = Vector::zeros(n);
        k.view_mut((0, 0), (du, dx)).copy_from(&self.d[t]);
        k.view_mut((du, 0), (dx, dx)).copy_from(&self.e[t]);
        k.view_mut((du + dx, 0), (du, dx)).copy_from(&self.f[t]);
        off.rows_mut(0, du).copy_from(&self.d_off[t]);
        off.rows_mut(du, dx).copy_from(&self.e_off[t]);
        off.rows_mut(du + dx, du).copy_from(&self.f_off[t]);
        (k, off)
    }

    /// Largest absolute entry across `F` and `f`.
    pub fn eta_norm(&self) -> f64 {
        self.f
            .iter()
            .map(linalg::max_abs)
            .chain(self.f_off.iter().map(|v| v.amax()))
            .fold(0.0, f64::max)
    }
}

/// Gradient of the objective with the same block layout as [`PolicyParams`].
pub type PolicyGradient = PolicyParams;

/// Hessian and linear coefficients of `F` in the stacked control `w = (u, γ, η)`:
/// `F = ½w'Hw + w'(Lx + l)`.
pub fn stacked_f(f: &FrakturSet) -> (Mat, Mat, Vector) {
    let du = f.b1.nrows();
    let dx = f.b2.nrows();
    let n = 2 * du + dx;
    let ct = f.c.transpose();
    let mut h = Mat::zeros(n, n);
    let (iu, ig, ie) = (0, du, du + dx);
    h.view_mut((iu, iu), (du, du)).copy_from(&f.b1);
    h.view_mut((iu, ig), (du, dx)).copy_from(&f.c);
    h.view_mut((iu, ie), (du, du)).copy_from(&f.b1);
    h.view_mut((ig, iu), (dx, du)).copy_from(&ct);
    h.view_mut((ig, ig), (dx, dx)).copy_from(&f.b2);
    h.view_mut((ig, ie), (dx, du)).copy_from(&ct);
    h.view_mut((ie, iu), (du, du)).copy_from(&f.b1);
    h.view_mut((ie, ig), (du, dx)).copy_from(&f.c);
    h.view_mut((ie, ie), (du, du)).copy_from(&f.b3);
    let mut l = Mat::zeros(n, dx);
    l.view_mut((iu, 0), (du, dx)).copy_from(&f.a1_mat);
    l.view_mut((ig, 0), (dx, dx)).copy_from(&f.a2_mat);
    l.view_mut((ie, 0), (du, dx)).copy_from(&f.a1_mat);
    let mut lv = Vector::zeros(n);
    lv.rows_mut(iu, du).copy_from(&f.a1);
    lv.rows_mut(ig, dx).copy_from(&f.a2);
    lv.rows_mut(ie, du).copy_from(&f.a1);
    (h, l, lv)
}

/// Part of the one-step objective that does not depend on the controls.
fn base_terms(vnext: &ValueQuad, t: usize, model: &ValidatedModel) -> ValueQuad {
    let p = &vnext.quad;
    let a = &model.transition;
    let drift = &model.drift;
    let b = &model.input;
    let theta = model.theta;
    let bxb = b * &model.exploration[t] * b.transpose();
    ValueQuad {
        quad: &model.state_cost * (2.0 * theta) + a.transpose() * p * a,
        lin: a.transpose() * (p * drift) + a.transpose() * &vnext.lin + &model.state_linear * theta,
        constant: 0.5 * linalg::quad_form(drift, p)
            + drift.dot(&vnext.lin)
            + vnext.constant
            + 0.5 * linalg::trace_product(&bxb, p)
            + 0.5 * linalg::trace_product(&model.system_noise[t], p)
            + theta * linalg::trace_product(&model.exploration[t], &model.control_cost[t]),
    }
}

/// Moments of `z_t = [x_t; 1]` under the shifted measure induced by a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMoments {
    pub mean: Vec<Vector>,
    pub cov: Vec<Mat>,
}

impl StateMoments {
    /// `E[z z']` with `z = [x; 1]`.
    pub fn second_moment_z(&self, t: usize) -> Mat {
        let dx = self.mean[t].len();
        let mu = &self.mean[t];
        let mut s = Mat::zeros(dx + 1, dx + 1);
        s.view_mut((0, 0), (dx, dx))
            .copy_from(&(&self.cov[t] + mu * mu.transpose()));
        s.view_mut((0, dx), (dx, 1)).copy_from(mu);
        s.view_mut((dx, 0), (1, dx)).copy_from(&mu.transpose());
        s[(dx, dx)] = 1.0;
        s
    }
}

/// Closed-loop transition `x' = Φx + φ + noise` under the shifted measure.
fn closed_loop(model: &ValidatedModel, k: &PolicyParams, t: usize) -> (Mat, Vector, Mat) {
    let b = &model.input;
    let phi = &model.transition + b * (&k.d[t] + &k.f[t]) + &k.e[t];
    let off = &model.drift + b * (&k.d_off[t] + &k.f_off[t]) + &k.e_off[t];
    let cov = &model.system_noise[t] + b * &model.exploration[t] * b.transpose();
    (phi, off, cov)
}

pub fn state_moments(model: &ValidatedModel, k: &PolicyParams) -> StateMoments {
    let dx = model.state_dim();
    let mut mean = vec![model.x0.clone()];
    let mut cov = vec![Mat::zeros(dx, dx)];
    for t in 0..model.horizon {
        let (phi, off, noise) = closed_loop(model, k, t);
        let m = &phi * &mean[t] + off;
        let c = linalg::symmetrize(&(&phi * &cov[t] * phi.transpose() + noise));
        mean.push(m);
        cov.push(c);
    }
    StateMoments { mean, cov }
}

/// Result of evaluating a policy exactly.
#[derive(Debug, Clone)]
pub struct PolicyEvaluation {
    /// Policy value function `S_t`, `t = 0..=T`.
    pub value: Vec<ValueQuad>,
    /// Coefficients built from `S_{t+1}` at each step.
    pub fraktur: Vec<FrakturSet>,
    pub moments: StateMoments,
    /// `S_0(x0)`.
    pub objective: f64,
}

/// Backward policy evaluation plus forward moments.
pub fn evaluate(model: &ValidatedModel, k: &PolicyParams) -> Result<PolicyEvaluation> {
    if k.horizon() != model.horizon {
        return Err(Error::Precondition(format!(
            "policy has {} steps, model horizon is {}",
            k.horizon(),
            model.horizon
        )));
    }
    let mut value = vec![solver::terminal_value(model)];
    let mut fraktur = Vec::with_capacity(model.horizon);
    for t in (0..model.horizon).rev() {
        let vnext = value.last().expect("nonempty");
        let f = solver::fraktur_coeffs(vnext, t, model)?;
        let (h, l, lv) = stacked_f(&f);
        let (kk, off) = k.stacked(t);
        let base = base_terms(vnext, t, model);
        let hk = &h * &kk;
        let kl = kk.transpose() * &l;
        let quad = linalg::symmetrize(&(kk.transpose() * &hk + &kl + kl.transpose() + base.quad));
        let lin =
            kk.transpose() * (&h * &off) + kk.transpose() * &lv + l.transpose() * &off + base.lin;
        let constant = 0.5 * linalg::quad_form(&off, &h) + off.dot(&lv) + base.constant;
        value.push(ValueQuad {
            quad,
            lin,
            constant,
        });
        fraktur.push(f);
    }
    value.reverse();
    fraktur.reverse();
    let moments = state_moments(model, k);
    let objective = value[0].eval(&model.x0);
    Ok(PolicyEvaluation {
        value,
        fraktur,
        moments,
        objective,
    })
}

/// Affine form of `∂F/∂w` at step `t` along the policy: `G x + g`.
pub fn control_gradient_affine(
    eval: &PolicyEvaluation,
    k: &PolicyParams,
    t: usize,
) -> (Mat, Vector) {
    let (h, l, lv) = stacked_f(&eval.fraktur[t]);
    let (kk, off) = k.stacked(t);
    (&h * kk + l, &h * off + lv)
}

/// Exact gradient of the objective with respect to every block of `k`.
pub fn exact_gradient(
    model: &ValidatedModel,
    k: &PolicyParams,
) -> Result<(PolicyGradient, PolicyEvaluation)> {
    let eval = evaluate(model, k)?;
    let du = model.control_dim();
    let dx = model.state_dim();
    let mut grad = PolicyParams::zeros(model);
    for t in 0..model.horizon {
        let (gm, gv) = control_gradient_affine(&eval, k, t);
        let mut gz = Mat::zeros(gm.nrows(), dx + 1);
        gz.view_mut((0, 0), (gm.nrows(), dx)).copy_from(&gm);
        gz.set_column(dx, &gv);
        let full = gz * eval.moments.second_moment_z(t);
        let split = |row: usize, rows: usize| {
            (
                full.view((row, 0), (rows, dx)).into_owned(),
                full.view((row, dx), (rows, 1)).column(0).into_owned(),
            )
        };
        (grad.d[t], grad.d_off[t]) = split(0, du);
        (grad.e[t], grad.e_off[t]) = split(du, dx);
        (grad.f[t], grad.f_off[t]) = split(du + dx, du);
    }
    Ok((grad, eval))
}

/// Largest absolute entry over all blocks.
pub fn max_abs_params(k: &PolicyParams) -> f64 {
    let mats = k.d.iter().chain(&k.e).chain(&k.f).map(linalg::max_abs);
    let vecs = k
        .d_off
        .iter()
        .chain(&k.e_off)
        .chain(&k.f_off)
        .map(|v| v.amax());
    mats.chain(vecs).fold(0.0, f64::max)
}
