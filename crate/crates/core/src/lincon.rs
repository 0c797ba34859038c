//! Feasibility of small systems of strict and non-strict linear inequalities
//! over a box-constrained control vector.
//!
//! Strict rows `a · u > b` are handled by maximising a common slack `δ`:
//!
//! ```text
//! max δ  s.t.  a_s · u >= b_s + δ   (strict rows)
//!              a_t · u <= b_t       (non-strict rows)
//!              lo <= u <= hi,  0 <= δ <= DELTA_CAP
//! ```
//!
//! and the system is declared feasible iff `δ* > TOL_STRICT`. The program is
//! solved with a dense two-phase tableau simplex using Bland's rule, which
//! keeps the result a deterministic function of the input.

use serde::{Deserialize, Serialize};

use crate::geometry::AxisBox;

/// Minimum certified slack for a strict row to count as satisfied.
pub const TOL_STRICT: f64 = 1e-7;
/// Upper bound on the auxiliary slack variable.
pub const DELTA_CAP: f64 = 1e6;
/// Allowed violation of non-strict rows when checking a witness by substitution.
pub const NONSTRICT_TOL: f64 = 1e-9;

const PIVOT_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    /// `coeffs · u > rhs`
    StrictGreater,
    /// `coeffs · u <= rhs`
    NonStrictLessEq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearRow {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
    pub relation: Relation,
}

impl LinearRow {
    pub fn strict(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self {
            coeffs,
            rhs,
            relation: Relation::StrictGreater,
        }
    }

    pub fn non_strict(coeffs: Vec<f64>, rhs: f64) -> Self {
        Self {
            coeffs,
            rhs,
            relation: Relation::NonStrictLessEq,
        }
    }

    /// Signed slack at `u`: positive means satisfied with room to spare.
    pub fn slack(&self, u: &[f64]) -> f64 {
        let lhs: f64 = self.coeffs.iter().zip(u).map(|(a, x)| a * x).sum();
        match self.relation {
            Relation::StrictGreater => lhs - self.rhs,
            Relation::NonStrictLessEq => self.rhs - lhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConstraintSystem {
    pub dim: usize,
    pub rows: Vec<LinearRow>,
    pub bounds: AxisBox,
}

impl LinearConstraintSystem {
    pub fn new(bounds: AxisBox) -> Self {
        Self {
            dim: bounds.dim(),
            rows: Vec::new(),
            bounds,
        }
    }

    pub fn push(&mut self, row: LinearRow) {
        assert_eq!(
            row.coeffs.len(),
            self.dim,
            "row length must match control dimension"
        );
        self.rows.push(row);
    }

    /// Checks `u` by direct substitution: strict rows need slack above
    /// `strict_slack`, non-strict rows may be violated by at most
    /// [`NONSTRICT_TOL`], and `u` must lie in the box.
    pub fn is_satisfied_by(&self, u: &[f64], strict_slack: f64) -> bool {
        self.bounds.contains(u, NONSTRICT_TOL)
            && self.rows.iter().all(|r| match r.relation {
                Relation::StrictGreater => r.slack(u) > strict_slack,
                Relation::NonStrictLessEq => r.slack(u) >= -NONSTRICT_TOL,
            })
    }

    pub fn has_strict_rows(&self) -> bool {
        self.rows
            .iter()
            .any(|r| r.relation == Relation::StrictGreater)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityResult {
    pub feasible: bool,
    pub witness: Option<Vec<f64>>,
    /// Achieved strict-row slack `δ*` (`DELTA_CAP` when there are no strict rows).
    pub margin: f64,
}

impl FeasibilityResult {
    fn infeasible(margin: f64) -> Self {
        Self {
            feasible: false,
            witness: None,
            margin,
        }
    }
}

/// Decides the system by slack maximisation.
pub fn decide_feasibility(sys: &LinearConstraintSystem) -> FeasibilityResult {
    let m = sys.dim;
    let lo = &sys.bounds.lo;
    let hi = &sys.bounds.hi;
    // Variables: y_k = u_k - lo_k >= 0 (k < m) and δ (index m).
    let nvars = m + 1;
    let mut a_rows: Vec<Vec<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    for row in &sys.rows {
        let shift: f64 = row.coeffs.iter().zip(lo).map(|(a, l)| a * l).sum();
        let mut coeffs = vec![0.0; nvars];
        match row.relation {
            Relation::StrictGreater => {
                for k in 0..m {
                    coeffs[k] = -row.coeffs[k];
                }
                coeffs[m] = 1.0;
                a_rows.push(coeffs);
                b.push(shift - row.rhs);
            }
            Relation::NonStrictLessEq => {
                coeffs[..m].copy_from_slice(&row.coeffs);
                a_rows.push(coeffs);
                b.push(row.rhs - shift);
            }
        }
    }
    for k in 0..nvars {
        let mut coeffs = vec![0.0; nvars];
        coeffs[k] = 1.0;
        a_rows.push(coeffs);
        b.push(if k < m { hi[k] - lo[k] } else { DELTA_CAP });
    }
    let mut objective = vec![0.0; nvars];
    objective[m] = 1.0;

    match maximize(&a_rows, &b, &objective) {
        LpOutcome::Infeasible => FeasibilityResult::infeasible(0.0),
        LpOutcome::Optimal { x, value } => {
            let mut u: Vec<f64> = (0..m).map(|k| x[k] + lo[k]).collect();
            sys.bounds.clamp(&mut u);
            let delta = if sys.has_strict_rows() {
                // Report the slack actually achieved by the clamped witness.
                sys.rows
                    .iter()
                    .filter(|r| r.relation == Relation::StrictGreater)
                    .map(|r| r.slack(&u))
                    .fold(value, f64::min)
            } else {
                DELTA_CAP
            };
            let nonstrict_ok = sys
                .rows
                .iter()
                .filter(|r| r.relation == Relation::NonStrictLessEq)
                .all(|r| r.slack(&u) >= -NONSTRICT_TOL);
            if delta > TOL_STRICT && nonstrict_ok {
                FeasibilityResult {
                    feasible: true,
                    witness: Some(u),
                    margin: delta,
                }
            } else {
                FeasibilityResult::infeasible(delta.max(0.0))
            }
        }
    }
}

enum LpOutcome {
    Infeasible,
    Optimal { x: Vec<f64>, value: f64 },
}

/// Dense two-phase simplex for `max c·x  s.t.  A x <= b, x >= 0`.
///
/// The feasible region here is always bounded (every variable carries an
/// explicit upper-bound row), so unboundedness cannot occur.
fn maximize(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> LpOutcome {
    let rows = a.len();
    let nvars = c.len();
    // Columns: structural | slack (one per row) | artificial (rows with b < 0).
    let neg_rows: Vec<usize> = (0..rows).filter(|&i| b[i] < 0.0).collect();
    let nart = neg_rows.len();
    let ncols = nvars + rows + nart;
    let mut t = Tableau {
        m: vec![vec![0.0; ncols + 1]; rows],
        basis: vec![0; rows],
        ncols,
    };
    let mut art = 0;
    for i in 0..rows {
        let sign = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..nvars {
            t.m[i][j] = sign * a[i][j];
        }
        t.m[i][nvars + i] = sign;
        t.m[i][ncols] = sign * b[i];
        if b[i] < 0.0 {
            t.m[i][nvars + rows + art] = 1.0;
            t.basis[i] = nvars + rows + art;
            art += 1;
        } else {
            t.basis[i] = nvars + i;
        }
    }

    if nart > 0 {
        // Phase 1: minimise the sum of artificials, i.e. maximise its negation.
        let mut phase1 = vec![0.0; ncols];
        for k in 0..nart {
            phase1[nvars + rows + k] = -1.0;
        }
        t.optimize(&phase1, ncols);
        let infeas: f64 = (0..rows)
            .filter(|&i| t.basis[i] >= nvars + rows)
            .map(|i| t.m[i][ncols])
            .sum();
        let scale = 1.0 + b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if infeas > 1e-9 * scale {
            return LpOutcome::Infeasible;
        }
        // Drive zero-level artificials out of the basis.
        for i in 0..rows {
            if t.basis[i] >= nvars + rows {
                if let Some(j) = (0..nvars + rows).find(|&j| t.m[i][j].abs() > PIVOT_EPS) {
                    t.pivot(i, j);
                }
            }
        }
    }

    // Phase 2 over structural and slack columns only.
    let mut obj = vec![0.0; ncols];
    obj[..nvars].copy_from_slice(c);
    t.optimize(&obj, nvars + rows);
    let mut x = vec![0.0; nvars];
    for i in 0..rows {
        if t.basis[i] < nvars {
            x[t.basis[i]] = t.m[i][ncols].max(0.0);
        }
    }
    let value = x.iter().zip(c).map(|(xi, ci)| xi * ci).sum();
    LpOutcome::Optimal { x, value }
}

struct Tableau {
    m: Vec<Vec<f64>>,
    basis: Vec<usize>,
    ncols: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, col: usize) {
        let p = self.m[r][col];
        for v in self.m[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.m[r].clone();
        for (i, row) in self.m.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[col];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        self.basis[r] = col;
    }

    /// Bland's rule: lowest-index improving column, lowest basic index on
    /// ratio ties. Only the first `allowed` columns may enter.
    fn optimize(&mut self, obj: &[f64], allowed: usize) {
        let rhs = self.ncols;
        loop {
            let mut entering = None;
            for j in 0..allowed {
                if self.basis.contains(&j) {
                    continue;
                }
                let reduced: f64 = obj[j]
                    - self
                        .m
                        .iter()
                        .zip(&self.basis)
                        .map(|(row, &bi)| obj[bi] * row[j])
                        .sum::<f64>();
                if reduced > PIVOT_EPS {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else { return };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.m.len() {
                let a = self.m[i][col];
                if a > PIVOT_EPS {
                    let ratio = self.m[i][rhs] / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((k, best)) => {
                            if ratio < best - 1e-15
                                || (ratio <= best + 1e-15 && self.basis[i] < self.basis[k])
                            {
                                Some((i, ratio))
                            } else {
                                Some((k, best))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, col),
                // Bounded programs never get here.
                None => return,
            }
        }
    }
}
