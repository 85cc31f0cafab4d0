//! Problem data for a discrete-time LEQG instance with exploratory controls.
//!
//! State dynamics `x' = a + A x + B (u + v) + w` with `w ~ N(0, Λ_t)` and
//! exploration noise `v ~ N(0, Ξ_t)`; running cost
//! `x'Mx + tr(Ξ_t N_t) + u'N_t u + u'Qx + x'm + u'n`, terminal `x'M_T x + x'm_T`.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::linalg::{self, Mat, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Drift `a` (d_x).
    pub drift: Vector,
    /// State transition `A` (d_x × d_x).
    pub transition: Mat,
    /// Control input `B` (d_x × d_u).
    pub input: Mat,
    /// System-noise covariances `Λ_t`, one per step.
    pub system_noise: Vec<Mat>,
    /// Exploration covariances `Ξ_t`, one per step.
    pub exploration: Vec<Mat>,
    /// Running state cost `M`.
    pub state_cost: Mat,
    /// Running control costs `N_t`, one per step.
    pub control_cost: Vec<Mat>,
    /// Cross cost `Q` (d_u × d_x).
    pub cross_cost: Mat,
    /// Linear state cost `m`.
    pub state_linear: Vector,
    /// Linear control cost `n`.
    pub control_linear: Vector,
    /// Terminal quadratic cost `M_T`.
    pub terminal_cost: Mat,
    /// Terminal linear cost `m_T`.
    pub terminal_linear: Vector,
    /// Risk sensitivity θ.
    pub theta: f64,
    pub horizon: usize,
    pub x0: Vector,
}

/// Scalar (d_x = d_u = 1) instance with time-constant schedules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarParams {
    pub a: f64,
    pub a_mat: f64,
    pub b: f64,
    pub lambda: f64,
    pub xi: f64,
    pub m_mat: f64,
    pub n_mat: f64,
    pub q: f64,
    pub m: f64,
    pub n: f64,
    pub m_terminal: f64,
    pub m_terminal_linear: f64,
    pub theta: f64,
    pub horizon: usize,
    pub x0: f64,
}

impl ScalarParams {
    /// The built-in `table2` instance.
    pub const TABLE2: ScalarParams = ScalarParams {
        a: 0.0,
        a_mat: -0.2,
        b: 0.4,
        lambda: 0.15,
        xi: 0.15,
        m_mat: 2.0,
        n_mat: 2.0,
        q: 1.0,
        m: 0.0,
        n: 0.0,
        m_terminal: 4.0,
        m_terminal_linear: 0.0,
        theta: 1.0,
        horizon: 25,
        x0: 1.0,
    };

    pub fn into_spec(self) -> ModelSpec {
        let s = |v: f64| Mat::from_element(1, 1, v);
        let v = |x: f64| Vector::from_element(1, x);
        let t = self.horizon;
        ModelSpec {
            drift: v(self.a),
            transition: s(self.a_mat),
            input: s(self.b),
            system_noise: vec![s(self.lambda); t],
            exploration: vec![s(self.xi); t],
            state_cost: s(self.m_mat),
            control_cost: vec![s(self.n_mat); t],
            cross_cost: s(self.q),
            state_linear: v(self.m),
            control_linear: v(self.n),
            terminal_cost: s(self.m_terminal),
            terminal_linear: v(self.m_terminal_linear),
            theta: self.theta,
            horizon: t,
            x0: v(self.x0),
        }
    }
}

impl ModelSpec {
    pub fn table2() -> Self {
        ScalarParams::TABLE2.into_spec()
    }

    pub fn state_dim(&self) -> usize {
        self.x0.len()
    }

    pub fn control_dim(&self) -> usize {
        self.input.ncols()
    }

    /// Same instance with a shorter (or longer) horizon; schedules are truncated
    /// or padded with their last entry.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        let resize = |v: &Vec<Mat>| -> Vec<Mat> {
            (0..horizon)
                .map(|t| v[t.min(v.len() - 1)].clone())
                .collect()
        };
        ModelSpec {
            system_noise: resize(&self.system_noise),
            exploration: resize(&self.exploration),
            control_cost: resize(&self.control_cost),
            horizon,
            ..self.clone()
        }
    }
}

/// How the terminal value `V_T` is seeded.
///
/// `AsPrinted` uses `P_T = M_T, p_T = m_T` (value `½x'M_T x + x'm_T`), which is the
/// convention the reference table is computed with. `Consistent` uses
/// `V_T = θ(x'M_T x + x'm_T)`, i.e. `P_T = 2θM_T, p_T = θm_T`, matching the
/// θ-scaled running cost exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalConvention {
    #[default]
    AsPrinted,
    Consistent,
}

/// A model that passed [`validate`]. Cost matrices are symmetrized, noise
/// inverses are cached.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidatedModel {
    spec: ModelSpec,
    #[serde(skip)]
    lambda_inv: Vec<Mat>,
    #[serde(skip)]
    xi_inv: Vec<Mat>,
    terminal: TerminalConvention,
}

impl Deref for ValidatedModel {
    type Target = ModelSpec;
    fn deref(&self) -> &ModelSpec {
        &self.spec
    }
}

impl ValidatedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn into_spec(self) -> ModelSpec {
        self.spec
    }

    pub fn lambda_inv(&self, t: usize) -> &Mat {
        &self.lambda_inv[t]
    }

    pub fn xi_inv(&self, t: usize) -> &Mat {
        &self.xi_inv[t]
    }

    pub fn terminal_convention(&self) -> TerminalConvention {
        self.terminal
    }

    pub fn with_terminal_convention(mut self, terminal: TerminalConvention) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn is_scalar(&self) -> bool {
        self.state_dim() == 1 && self.control_dim() == 1
    }

    /// Re-validate with different dynamics, keeping everything else.
    pub fn with_dynamics(&self, transition: Mat, input: Mat) -> Result<Self> {
        let spec = ModelSpec {
            transition,
            input,
            ..self.spec.clone()
        };
        Ok(validate(spec)?.with_terminal_convention(self.terminal))
    }

    /// Re-validate with different per-step `N_t` and `Ξ_t` schedules.
    pub fn with_schedules(&self, control_cost: Vec<Mat>, exploration: Vec<Mat>) -> Result<Self> {
        let spec = ModelSpec {
            control_cost,
            exploration,
            ..self.spec.clone()
        };
        Ok(validate(spec)?.with_terminal_convention(self.terminal))
    }

    /// Terminal payoff `V_T(x)` under the active convention.
    pub fn terminal_payoff(&self, x: &Vector) -> f64 {
        let (quad, lin) = self.terminal_coefficients();
        0.5 * linalg::quad_form(x, &quad) + x.dot(&lin)
    }

    /// `(P_T, p_T)` under the active convention.
    pub fn terminal_coefficients(&self) -> (Mat, Vector) {
        match self.terminal {
            TerminalConvention::AsPrinted => {
                (self.terminal_cost.clone(), self.terminal_linear.clone())
            }
            TerminalConvention::Consistent => (
                &self.terminal_cost * (2.0 * self.theta),
                &self.terminal_linear * self.theta,
            ),
        }
    }

    /// π-integrated running cost at step `t` for mean control `u`:
    /// `x'Mx + tr(Ξ_t N_t) + u'N_t u + u'Qx + x'm + u'n`.
    pub fn running_cost(&self, t: usize, x: &Vector, u: &Vector) -> f64 {
        let n = &self.control_cost[t];
        linalg::quad_form(x, &self.state_cost)
            + linalg::trace_product(&self.exploration[t], n)
            + linalg::quad_form(u, n)
            + u.dot(&(&self.cross_cost * x))
            + x.dot(&self.state_linear)
            + u.dot(&self.control_linear)
    }
}

fn shape(m: &Mat) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

fn check_shape(out: &mut Vec<Violation>, field: &str, m: &Mat, rows: usize, cols: usize) -> bool {
    if m.nrows() != rows || m.ncols() != cols {
        out.push(Violation::DimensionMismatch {
            field: field.to_string(),
            expected: format!("{rows}x{cols}"),
            found: shape(m),
        });
        false
    } else {
        true
    }
}

fn check_len(out: &mut Vec<Violation>, field: &str, v: &Vector, len: usize) {
    if v.len() != len {
        out.push(Violation::DimensionMismatch {
            field: field.to_string(),
            expected: format!("{len}"),
            found: format!("{}", v.len()),
        });
    }
}

fn check_psd(out: &mut Vec<Violation>, field: String, m: &Mat) {
    let (min, max_abs) = linalg::eig_extremes(m);
    if min < -linalg::PSD_REL_TOL * max_abs {
        out.push(Violation::NotPsd {
            field,
            min_eig: min,
            max_abs_eig: max_abs,
        });
    }
}

fn check_pd(out: &mut Vec<Violation>, field: String, m: &Mat) -> Option<Mat> {
    let (min, max_abs) = linalg::eig_extremes(m);
    let asym = linalg::max_abs(&(m - m.transpose()));
    if asym > 1e-8 * max_abs.max(1.0) || min <= linalg::PSD_REL_TOL * max_abs {
        out.push(Violation::NotPsd {
            field,
            min_eig: min,
            max_abs_eig: max_abs,
        });
        return None;
    }
    match linalg::spd_inverse(m) {
        Some(inv) => Some(linalg::symmetrize(&inv)),
        None => {
            out.push(Violation::NotPsd {
                field,
                min_eig: min,
                max_abs_eig: max_abs,
            });
            None
        }
    }
}

/// Validate `spec`, returning every violated invariant at once.
pub fn validate(spec: ModelSpec) -> Result<ValidatedModel> {
    let mut spec = spec;
    let mut out = Vec::new();
    let dx = spec.state_dim();
    let du = spec.control_dim();
    let horizon = spec.horizon;

    if horizon == 0 {
        out.push(Violation::DimensionMismatch {
            field: "T".into(),
            expected: ">= 1".into(),
            found: "0".into(),
        });
    }
    if !(spec.theta.is_finite() && (spec.theta > 0.0 || (spec.theta > -1.0 && spec.theta < 0.0))) {
        out.push(Violation::ThetaOutOfRange(spec.theta));
    }

    check_len(&mut out, "a", &spec.drift, dx);
    check_shape(&mut out, "A", &spec.transition, dx, dx);
    check_shape(&mut out, "B", &spec.input, dx, du);
    let m_ok = check_shape(&mut out, "M", &spec.state_cost, dx, dx);
    check_shape(&mut out, "Q", &spec.cross_cost, du, dx);
    check_len(&mut out, "m", &spec.state_linear, dx);
    check_len(&mut out, "n", &spec.control_linear, du);
    let mt_ok = check_shape(&mut out, "M_T", &spec.terminal_cost, dx, dx);
    check_len(&mut out, "m_T", &spec.terminal_linear, dx);

    for (name, sched) in [
        ("Lambda", &spec.system_noise),
        ("Xi", &spec.exploration),
        ("N", &spec.control_cost),
    ] {
        if sched.len() != horizon {
            out.push(Violation::ScheduleLength {
                field: name.into(),
                expected: horizon,
                found: sched.len(),
            });
        }
    }

    let finite_m = |m: &Mat| m.iter().all(|v| v.is_finite());
    let finite_v = |v: &Vector| v.iter().all(|x| x.is_finite());
    let mats = [
        ("A", &spec.transition),
        ("B", &spec.input),
        ("M", &spec.state_cost),
        ("Q", &spec.cross_cost),
        ("M_T", &spec.terminal_cost),
    ];
    for (name, m) in mats {
        if !finite_m(m) {
            out.push(Violation::NonFinite(name.into()));
        }
    }
    let vecs = [
        ("a", &spec.drift),
        ("m", &spec.state_linear),
        ("n", &spec.control_linear),
        ("m_T", &spec.terminal_linear),
        ("x0", &spec.x0),
    ];
    for (name, v) in vecs {
        if !finite_v(v) {
            out.push(Violation::NonFinite(name.into()));
        }
    }

    if m_ok {
        spec.state_cost = linalg::symmetrize(&spec.state_cost);
        check_psd(&mut out, "M".into(), &spec.state_cost);
    }
    if mt_ok {
        spec.terminal_cost = linalg::symmetrize(&spec.terminal_cost);
        check_psd(&mut out, "M_T".into(), &spec.terminal_cost);
    }
    for t in 0..spec.control_cost.len() {
        let field = format!("N[{t}]");
        if check_shape(&mut out, &field, &spec.control_cost[t], du, du) {
            spec.control_cost[t] = linalg::symmetrize(&spec.control_cost[t]);
            check_psd(&mut out, field, &spec.control_cost[t]);
        }
    }

    let mut lambda_inv = Vec::with_capacity(horizon);
    for (t, m) in spec.system_noise.iter().enumerate() {
        let field = format!("Lambda[{t}]");
        if check_shape(&mut out, &field, m, dx, dx) {
            if let Some(inv) = check_pd(&mut out, field, m) {
                lambda_inv.push(inv);
            }
        }
    }
    let mut xi_inv = Vec::with_capacity(horizon);
    for (t, m) in spec.exploration.iter().enumerate() {
        let field = format!("Xi[{t}]");
        if check_shape(&mut out, &field, m, du, du) {
            if let Some(inv) = check_pd(&mut out, field, m) {
                xi_inv.push(inv);
            }
        }
    }

    if !out.is_empty() {
        return Err(Error::Invalid(out));
    }
    spec.system_noise = spec.system_noise.iter().map(linalg::symmetrize).collect();
    spec.exploration = spec.exploration.iter().map(linalg::symmetrize).collect();
    Ok(ValidatedModel {
        spec,
        lambda_inv,
        xi_inv,
        terminal: TerminalConvention::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn violations(spec: ModelSpec) -> Vec<Violation> {
        match validate(spec) {
            Err(Error::Invalid(v)) => v,
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn table2_is_valid() {
        let m = validate(ModelSpec::table2()).unwrap();
        assert_eq!(m.horizon, 25);
        assert!(m.is_scalar());
        assert!((m.lambda_inv(0)[(0, 0)] - 1.0 / 0.15).abs() < 1e-12);
    }

    #[test]
    fn theta_zero_rejected() {
        let mut spec = ModelSpec::table2();
        spec.theta = 0.0;
        assert_eq!(violations(spec), vec![Violation::ThetaOutOfRange(0.0)]);
        let mut spec = ModelSpec::table2();
        spec.theta = -1.0;
        assert_eq!(violations(spec), vec![Violation::ThetaOutOfRange(-1.0)]);
        let mut spec = ModelSpec::table2();
        spec.theta = -0.5;
        assert!(validate(spec).is_ok());
    }

    #[test]
    fn negative_noise_covariance_rejected() {
        let mut spec = ModelSpec::table2();
        spec.system_noise[3] = Mat::from_element(1, 1, -0.1);
        let v = violations(spec);
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::NotPsd { field, .. } if field == "Lambda[3]"));
    }

    #[test]
    fn every_violation_is_listed() {
        let mut spec = ModelSpec::table2();
        spec.theta = 0.0;
        spec.state_cost = Mat::from_element(1, 1, -1.0);
        spec.exploration.pop();
        spec.cross_cost = Mat::zeros(2, 1);
        let v = violations(spec);
        assert_eq!(v.len(), 4, "{v:?}");
    }

    #[test]
    fn round_off_asymmetry_is_symmetrized() {
        let mut spec = ModelSpec::table2().with_horizon(2);
        spec.state_cost = Mat::from_row_slice(1, 1, &[2.0]);
        let two = Mat::from_row_slice(2, 2, &[1.0, 0.5 + 1e-13, 0.5, 1.0]);
        spec.x0 = Vector::from_element(2, 1.0);
        spec.drift = Vector::zeros(2);
        spec.transition = Mat::identity(2, 2);
        spec.input = Mat::from_element(2, 1, 1.0);
        spec.system_noise = vec![Mat::identity(2, 2); 2];
        spec.state_cost = two.clone();
        spec.terminal_cost = two;
        spec.cross_cost = Mat::zeros(1, 2);
        spec.state_linear = Vector::zeros(2);
        spec.terminal_linear = Vector::zeros(2);
        let m = validate(spec).unwrap();
        assert_eq!(m.state_cost, m.state_cost.transpose());
    }

    #[test]
    fn validate_is_idempotent() {
        let once = validate(ModelSpec::table2()).unwrap();
        let twice = validate(once.spec().clone()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn terminal_conventions() {
        let m = validate(ModelSpec::table2()).unwrap();
        let x = Vector::from_element(1, 0.2497);
        assert!((m.terminal_payoff(&x) - 0.5 * 4.0 * 0.2497 * 0.2497).abs() < 1e-15);
        let c = m.with_terminal_convention(TerminalConvention::Consistent);
        assert!((c.terminal_payoff(&x) - 4.0 * 0.2497 * 0.2497).abs() < 1e-15);
    }
}
