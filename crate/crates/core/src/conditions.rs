//! Sufficient conditions for the stationary point to be a saddle point.
//!
//! At each step the minimizer block `B1` must be positive definite and the
//! maximizer Hessian `H = [[B2, C'], [C, B3]]` negative definite.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::model::ValidatedModel;
use crate::report::{Cell, Table};
use crate::solver::{FrakturSet, Solution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ConditionFailure {
    B1NotPositiveDefinite,
    B2NotNegativeDefinite,
    B3NotNegativeDefinite,
    NegHNotPositiveDefinite,
}

impl ConditionFailure {
    pub fn tag(&self) -> &'static str {
        match self {
            ConditionFailure::B1NotPositiveDefinite => "B1 not positive definite",
            ConditionFailure::B2NotNegativeDefinite => "B2 not negative definite",
            ConditionFailure::B3NotNegativeDefinite => "B3 not negative definite",
            ConditionFailure::NegHNotPositiveDefinite => "-H not positive definite",
        }
    }
}

/// Scalar-case explicit bounds on `N_t`, `Λ_t⁻¹` and `Ξ_t⁻¹` given `P_{t+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SufficientBounds {
    /// `N_t` must exceed this for `B1 > 0`.
    pub n_lower: f64,
    /// `Λ_t⁻¹` must exceed this for `B2 < 0`.
    pub lambda_inv_lower: f64,
    /// The bound on `Ξ_t⁻¹` in its customary form: `2θN + B²P` for `P > 0`,
    /// `2θN + Λ⁻¹B²P/(P − Λ⁻¹)` otherwise. For `P > 0` it does not by itself
    /// guarantee `det(−H) > 0`.
    pub xi_inv_lower: f64,
    /// `2θN + Λ⁻¹B²P/(Λ⁻¹ − P)`: exceeding it (with the other two bounds) is
    /// equivalent to `−H > 0`, for either sign of `P`.
    pub xi_inv_lower_sufficient: f64,
    /// Set when `Q`, `m` or `n` is nonzero, in which case the bounds are reported
    /// for reference only.
    pub caveat: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleEntry {
    pub t: usize,
    pub b1_min_eig: f64,
    pub b1_pass: bool,
    pub neg_h_min_eig: f64,
    pub neg_h_pass: bool,
    pub neg_h_leading_minors_ok: bool,
    pub det_neg_h: f64,
    pub det_h: f64,
    pub violations: Vec<ConditionFailure>,
    pub sufficient_bounds: Option<SufficientBounds>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaddleReport {
    pub entries: Vec<SaddleEntry>,
    pub all_pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SylvesterFlags {
    /// All leading principal minors of `−H` positive (in the scalar case: `det(−H) > 0`).
    pub det_condition: bool,
    pub b2_negative: bool,
    pub b3_negative: bool,
}

impl SylvesterFlags {
    pub fn all(&self) -> bool {
        self.det_condition && self.b2_negative && self.b3_negative
    }
}

pub fn det_neg_h(f: &FrakturSet) -> f64 {
    (-f.adversary_hessian()).determinant()
}

fn leading_minors_positive(m: &Mat) -> bool {
    (1..=m.nrows()).all(|k| m.view((0, 0), (k, k)).determinant() > 0.0)
}

/// Check `B1 > 0` and `−H > 0` at one step. Failures are recorded, not raised.
pub fn check_assumption1(f: &FrakturSet) -> SaddleEntry {
    let neg_h = -f.adversary_hessian();
    let (b1_min_eig, _) = linalg::eig_extremes(&f.b1);
    let (neg_h_min_eig, _) = linalg::eig_extremes(&neg_h);
    let b1_pass = linalg::is_pd_scaled(&f.b1) && linalg::cholesky(&f.b1).is_some();
    let neg_h_pass = linalg::is_pd_scaled(&neg_h) && linalg::cholesky(&neg_h).is_some();
    let det_neg_h = neg_h.determinant();
    let mut violations = Vec::new();
    if !b1_pass {
        violations.push(ConditionFailure::B1NotPositiveDefinite);
    }
    if !linalg::is_pd_scaled(&(-&f.b2)) {
        violations.push(ConditionFailure::B2NotNegativeDefinite);
    }
    if !linalg::is_pd_scaled(&(-&f.b3)) {
        violations.push(ConditionFailure::B3NotNegativeDefinite);
    }
    if !neg_h_pass {
        violations.push(ConditionFailure::NegHNotPositiveDefinite);
    }
    SaddleEntry {
        t: 0,
        b1_min_eig,
        b1_pass,
        neg_h_min_eig,
        neg_h_pass,
        neg_h_leading_minors_ok: leading_minors_positive(&neg_h),
        det_neg_h,
        det_h: f.adversary_hessian().determinant(),
        violations,
        sufficient_bounds: None,
    }
}

pub fn sylvester_conditions(f: &FrakturSet) -> SylvesterFlags {
    SylvesterFlags {
        det_condition: leading_minors_positive(&(-f.adversary_hessian())),
        b2_negative: linalg::is_pd_scaled(&(-&f.b2)),
        b3_negative: linalg::is_pd_scaled(&(-&f.b3)),
    }
}

/// Explicit scalar bounds at step `t` given `P_{t+1}`.
pub fn sufficient_bounds(
    model: &ValidatedModel,
    p_next: f64,
    t: usize,
) -> Result<SufficientBounds> {
    if !model.is_scalar() {
        return Err(Error::NotScalar);
    }
    let theta = model.theta;
    if theta <= 0.0 {
        return Err(Error::Precondition(format!(
            "explicit bounds need theta > 0, got {theta}"
        )));
    }
    let b = model.input[(0, 0)];
    let n = model.control_cost[t][(0, 0)];
    let lambda_inv = model.lambda_inv(t)[(0, 0)];
    let b2p = b * b * p_next;
    let xi_inv_lower = if p_next > 0.0 {
        2.0 * theta * n + b2p
    } else {
        2.0 * theta * n + lambda_inv * b2p / (p_next - lambda_inv)
    };
    let caveat = model.cross_cost[(0, 0)] != 0.0
        || model.state_linear[0] != 0.0
        || model.control_linear[0] != 0.0;
    Ok(SufficientBounds {
        n_lower: (-b2p / (2.0 * theta)).max(0.0),
        lambda_inv_lower: p_next,
        xi_inv_lower,
        xi_inv_lower_sufficient: 2.0 * theta * n + lambda_inv * b2p / (lambda_inv - p_next),
        caveat,
    })
}

/// Run [`check_assumption1`] at every step; entry `t` checks the coefficients built from `P_{t+1}`.
pub fn check_full_horizon(sol: &Solution) -> SaddleReport {
    let model = &sol.model;
    let entries: Vec<SaddleEntry> = sol
        .fraktur
        .iter()
        .enumerate()
        .map(|(t, f)| {
            let mut e = check_assumption1(f);
            e.t = t;
            if model.is_scalar() {
                e.sufficient_bounds =
                    sufficient_bounds(model, sol.value[t + 1].quad[(0, 0)], t).ok();
            }
            e
        })
        .collect();
    let all_pass = entries.iter().all(|e| e.violations.is_empty());
    SaddleReport { entries, all_pass }
}

impl SaddleReport {
    /// Columns `t, b1_pass, negH_pass, det_negH, violations`.
    pub fn table(&self) -> Table {
        let columns = ["t", "b1_pass", "negH_pass", "det_negH", "violations"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let rows = self
            .entries
            .iter()
            .map(|e| {
                vec![
                    Cell::Num(e.t as f64),
                    Cell::Bool(e.b1_pass),
                    Cell::Bool(e.neg_h_pass),
                    Cell::Num(e.det_neg_h),
                    Cell::Text(
                        e.violations
                            .iter()
                            .map(|v| v.tag())
                            .collect::<Vec<_>>()
                            .join("; "),
                    ),
                ]
            })
            .collect();
        Table { columns, rows }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
