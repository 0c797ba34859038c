//! Facet reachability on a polytope cell under affine dynamics.
//!
//! For an exit facet `F_1` with outward normal `n_1`, every vertex `v_j` needs
//! an input `u_j ∈ P_u` with
//!
//! * `n_1 · (A v_j + B u_j + c) > 0` (flow leaves through the exit facet), and
//! * `n_i · (A v_j + B u_j + c) <= 0` for every other facet `i` containing
//!   `v_j` (flow does not leave through the sides). For vertices off the exit
//!   facet this covers every facet containing them.
//!
//! The inputs decouple per vertex, so each vertex gives one small
//! [`LinearConstraintSystem`]. For a cell whose dynamics are not identified yet,
//! the same rows are built from a reference model and tightened (robust) or
//! loosened (expanded) by the deviation bounds. One system is built per sign
//! pattern of `u`, which keeps the `B` uncertainty term linear.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{AffineModel, FeedbackLaw, Lipschitz};
use crate::geometry::{triangulate, AxisBox, GeometryError, Polytope, Simplex};
use crate::lincon::{decide_feasibility, LinearConstraintSystem, LinearRow, Relation, TOL_STRICT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReachError {
    #[error("controller synthesis failed: {0}")]
    Synthesis(String),
    #[error("transit time is unbounded: minimum exit velocity {0} is not positive")]
    UnboundedTransit(f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReachStatus {
    Exists,
    Absent,
    Uncertain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachDecision {
    pub status: ReachStatus,
    /// One input per cell vertex; present iff `status == Exists`.
    pub witnesses: Option<Vec<DVector<f64>>>,
}

impl ReachDecision {
    fn absent() -> Self {
        Self {
            status: ReachStatus::Absent,
            witnesses: None,
        }
    }
}

/// Radii with `‖A₂ - A₁‖ <= eps_a`, `‖B₂ - B₁‖ <= eps_b`, `‖c₂ - c₁‖ <= eps_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelDeviationBounds {
    pub eps_a: f64,
    pub eps_b: f64,
    pub eps_c: f64,
}

impl ModelDeviationBounds {
    pub const ZERO: Self = Self {
        eps_a: 0.0,
        eps_b: 0.0,
        eps_c: 0.0,
    };
}

/// Spectral norm (largest singular value).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Bounds on the difference between the linearisations at `x1` (where
/// `ref_model` was taken) and at `x2`.
pub fn deviation_bounds(
    ref_model: &AffineModel,
    x1: &DVector<f64>,
    x2: &DVector<f64>,
    lipschitz: Lipschitz,
) -> ModelDeviationBounds {
    let dist = (x2 - x1).norm();
    let a_norm = operator_norm(&ref_model.a);
    ModelDeviationBounds {
        eps_a: lipschitz.l_df * dist,
        eps_b: lipschitz.l_g * dist,
        eps_c: 2.0 * a_norm * dist
            + 0.5 * lipschitz.l_df * dist * dist
            + lipschitz.l_df * dist * x2.norm(),
    }
}

/// Signs of the input components; `true` selects `u_k >= 0`, `false` `u_k <= 0`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignPattern(pub Vec<bool>);

impl SignPattern {
    fn sign(&self, k: usize) -> f64 {
        if self.0[k] {
            1.0
        } else {
            -1.0
        }
    }
}

/// All `2^m` patterns, pattern `p` having `+` exactly where bit `k` of `p` is set.
pub fn sign_patterns(m: usize) -> impl Iterator<Item = SignPattern> {
    (0..1usize << m).map(move |p| SignPattern((0..m).map(|k| p >> k & 1 == 1).collect()))
}

#[derive(Clone, Copy)]
enum Shift<'a> {
    Nominal,
    Robust(&'a ModelDeviationBounds, &'a SignPattern),
    Expanded(&'a ModelDeviationBounds, &'a SignPattern),
}

/// Facets constrained by `<= 0` rows at `vertex` for the given exit facet.
fn side_facets(cell: &Polytope, exit_facet: usize, vertex: usize) -> Vec<usize> {
    cell.vertex_facets(vertex)
        .iter()
        .copied()
        .filter(|&i| i != exit_facet)
        .collect()
}

fn build_vertex_system(
    cell: &Polytope,
    exit_facet: usize,
    vertex: usize,
    model: &AffineModel,
    control_box: &AxisBox,
    shift: Shift<'_>,
) -> LinearConstraintSystem {
    let v = &cell.vertices()[vertex];
    let drift = &model.a * v + &model.c;
    let m = model.b.ncols();
    let mut sys = LinearConstraintSystem::new(control_box.clone());

    // Row for facet i: coefficients nᵀB ± ε_B‖n‖s, offset -nᵀ(Av + c) ± ‖n‖(ε_A‖v‖ + ε_c).
    // `tighten` is +1 when the row must hold for every model in the ball.
    let row = |facet: usize, strict: bool| -> LinearRow {
        let h = cell.halfspace(facet);
        let nb = model.b.transpose() * &h.normal;
        let base_rhs = -h.normal.dot(&drift);
        let (mut coeffs, mut rhs): (Vec<f64>, f64) = (nb.iter().copied().collect(), base_rhs);
        let (bounds, pattern, tighten) = match shift {
            Shift::Nominal => (None, None, 0.0),
            Shift::Robust(b, p) => (Some(b), Some(p), 1.0),
            Shift::Expanded(b, p) => (Some(b), Some(p), -1.0),
        };
        if let (Some(b), Some(p)) = (bounds, pattern) {
            let n_norm = h.normal.norm();
            let offset = n_norm * (b.eps_a * v.norm() + b.eps_c);
            // Strict rows lower-bound nᵀB'u, non-strict rows upper-bound it.
            let dir = if strict { -tighten } else { tighten };
            for (k, c) in coeffs.iter_mut().enumerate() {
                *c += dir * b.eps_b * n_norm * p.sign(k);
            }
            rhs += if strict {
                tighten * offset
            } else {
                -tighten * offset
            };
        }
        if strict {
            LinearRow::strict(coeffs, rhs)
        } else {
            LinearRow::non_strict(coeffs, rhs)
        }
    };

    sys.push(row(exit_facet, true));
    for i in side_facets(cell, exit_facet, vertex) {
        sys.push(row(i, false));
    }
    if let Shift::Robust(_, p) | Shift::Expanded(_, p) = shift {
        for k in 0..m {
            let mut coeffs = vec![0.0; m];
            coeffs[k] = -p.sign(k);
            sys.push(LinearRow::non_strict(coeffs, 0.0));
        }
    }
    sys
}

/// Nominal conditions for `vertex` under `model`.
pub fn vertex_constraint_system(
    cell: &Polytope,
    exit_facet: usize,
    vertex: usize,
    model: &AffineModel,
    control_box: &AxisBox,
) -> LinearConstraintSystem {
    build_vertex_system(cell, exit_facet, vertex, model, control_box, Shift::Nominal)
}

/// Conditions tightened so that feasibility holds for every model within
/// `bounds` of `ref_model`, restricted to one sign pattern of the input.
pub fn robust_vertex_system(
    cell: &Polytope,
    exit_facet: usize,
    vertex: usize,
    ref_model: &AffineModel,
    bounds: &ModelDeviationBounds,
    pattern: &SignPattern,
    control_box: &AxisBox,
) -> LinearConstraintSystem {
    build_vertex_system(
        cell,
        exit_facet,
        vertex,
        ref_model,
        control_box,
        Shift::Robust(bounds, pattern),
    )
}

/// Conditions loosened so that they are feasible whenever some model within
/// `bounds` of `ref_model` is feasible in this sign pattern.
pub fn expanded_vertex_system(
    cell: &Polytope,
    exit_facet: usize,
    vertex: usize,
    ref_model: &AffineModel,
    bounds: &ModelDeviationBounds,
    pattern: &SignPattern,
    control_box: &AxisBox,
) -> LinearConstraintSystem {
    build_vertex_system(
        cell,
        exit_facet,
        vertex,
        ref_model,
        control_box,
        Shift::Expanded(bounds, pattern),
    )
}

/// Witness for a feasible system, preferring one with slack on every row.
///
/// The verdict comes from [`decide_feasibility`] alone. If the system stays
/// feasible with every non-strict row made strict as well, the witness of
/// that tighter system is returned instead, so the closed loop keeps some
/// distance from the side facets.
pub fn centered_witness(sys: &LinearConstraintSystem) -> Option<Vec<f64>> {
    let first = decide_feasibility(sys);
    if !first.feasible {
        return None;
    }
    let mut all_strict = LinearConstraintSystem::new(sys.bounds.clone());
    for row in &sys.rows {
        all_strict.push(match row.relation {
            Relation::StrictGreater => row.clone(),
            Relation::NonStrictLessEq => {
                LinearRow::strict(row.coeffs.iter().map(|a| -a).collect(), -row.rhs)
            }
        });
    }
    let centered = decide_feasibility(&all_strict);
    if centered.feasible {
        centered.witness
    } else {
        first.witness
    }
}

/// Definitive decision from an identified model of the cell itself.
pub fn decide_exit_facet(
    cell: &Polytope,
    exit_facet: usize,
    model: &AffineModel,
    control_box: &AxisBox,
) -> ReachDecision {
    let mut witnesses = Vec::with_capacity(cell.num_vertices());
    for j in 0..cell.num_vertices() {
        let sys = vertex_constraint_system(cell, exit_facet, j, model, control_box);
        match centered_witness(&sys) {
            Some(u) => witnesses.push(DVector::from_vec(u)),
            None => return ReachDecision::absent(),
        }
    }
    ReachDecision {
        status: ReachStatus::Exists,
        witnesses: Some(witnesses),
    }
}

/// Predictive decision for a cell whose model is only known to lie within
/// `bounds` of `ref_model`.
pub fn predict_exit_facet(
    cell: &Polytope,
    exit_facet: usize,
    ref_model: &AffineModel,
    bounds: &ModelDeviationBounds,
    control_box: &AxisBox,
) -> ReachDecision {
    let m = ref_model.b.ncols();
    let mut witnesses = Vec::with_capacity(cell.num_vertices());
    let mut robust_failed = Vec::new();
    for j in 0..cell.num_vertices() {
        let found = sign_patterns(m).find_map(|p| {
            let sys = robust_vertex_system(cell, exit_facet, j, ref_model, bounds, &p, control_box);
            decide_feasibility(&sys).witness
        });
        match found {
            Some(u) => witnesses.push(DVector::from_vec(u)),
            None => robust_failed.push(j),
        }
    }
    if robust_failed.is_empty() {
        return ReachDecision {
            status: ReachStatus::Exists,
            witnesses: Some(witnesses),
        };
    }
    // Robust feasibility implies expanded feasibility, so only the failed
    // vertices can certify absence.
    let certified_absent = robust_failed.iter().any(|&j| {
        sign_patterns(m).all(|p| {
            let sys =
                expanded_vertex_system(cell, exit_facet, j, ref_model, bounds, &p, control_box);
            !decide_feasibility(&sys).feasible
        })
    });
    ReachDecision {
        status: if certified_absent {
            ReachStatus::Absent
        } else {
            ReachStatus::Uncertain
        },
        witnesses: None,
    }
}

/// Affine law `u = F x + g` interpolating vertex inputs on one simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerLaw {
    pub f: DMatrix<f64>,
    pub g: DVector<f64>,
    pub simplex: Simplex,
    pub vertex_inputs: Vec<DVector<f64>>,
}

impl ControllerLaw {
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x + &self.g
    }
}

impl FeedbackLaw for ControllerLaw {
    fn input(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eval(x)
    }
}

fn interpolate_on_simplex(
    cell: &Polytope,
    simplex: &Simplex,
    witnesses: &[DVector<f64>],
) -> Result<ControllerLaw, ReachError> {
    let n = cell.dim();
    let m = witnesses[0].len();
    let verts = DMatrix::from_fn(n + 1, n + 1, |r, c| {
        if r < n {
            cell.vertices()[simplex.vertex_indices[c]][r]
        } else {
            1.0
        }
    });
    let inputs = DMatrix::from_fn(m, n + 1, |r, c| witnesses[simplex.vertex_indices[c]][r]);
    // [F | g] V = U  ⇔  Vᵀ [F | g]ᵀ = Uᵀ
    let lu = verts.transpose().lu();
    if lu.determinant().abs() <= 1e-12 * cell.measure().unwrap_or(1.0) {
        return Err(ReachError::Synthesis(format!(
            "simplex {:?} is degenerate",
            simplex.vertex_indices
        )));
    }
    let sol = lu
        .solve(&inputs.transpose())
        .ok_or_else(|| ReachError::Synthesis("singular interpolation matrix".into()))?
        .transpose();
    Ok(ControllerLaw {
        f: sol.columns(0, n).into_owned(),
        g: sol.column(n).into_owned(),
        simplex: simplex.clone(),
        vertex_inputs: simplex
            .vertex_indices
            .iter()
            .map(|&j| witnesses[j].clone())
            .collect(),
    })
}

fn check_witnesses(cell: &Polytope, witnesses: &[DVector<f64>]) -> Result<(), ReachError> {
    if witnesses.len() != cell.num_vertices() || witnesses.is_empty() {
        return Err(ReachError::Synthesis(format!(
            "{} witnesses for {} vertices",
            witnesses.len(),
            cell.num_vertices()
        )));
    }
    Ok(())
}

/// Law on the simplex of the cell's triangulation that contains `x0`
/// (lowest simplex index on ties).
pub fn synthesize_controller(
    cell: &Polytope,
    witnesses: &[DVector<f64>],
    x0: &DVector<f64>,
) -> Result<ControllerLaw, ReachError> {
    check_witnesses(cell, witnesses)?;
    let simplices = triangulate(cell)?;
    let chosen = simplices
        .iter()
        .find(|s| s.contains(cell, x0, 1e-12))
        .ok_or_else(|| ReachError::Synthesis("initial state is not in the cell".into()))?;
    interpolate_on_simplex(cell, chosen, witnesses)
}

/// Continuous piecewise-affine law over the whole cell: the interpolating law
/// of whichever simplex currently contains the state. Neighbouring pieces agree
/// on shared faces, so switching pieces never makes the input jump.
#[derive(Debug, Clone)]
pub struct CellController {
    cell: Polytope,
    pieces: Vec<ControllerLaw>,
}

impl CellController {
    pub fn pieces(&self) -> &[ControllerLaw] {
        &self.pieces
    }

    /// Index of the piece used at `x`; states slightly outside every simplex
    /// use the piece with the largest minimal barycentric weight.
    pub fn piece_at(&self, x: &DVector<f64>) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in self.pieces.iter().enumerate() {
            let Some(l) = p.simplex.barycentric(&self.cell, x) else {
                continue;
            };
            let worst = l.min();
            if worst >= -1e-12 {
                return i;
            }
            if worst > best.1 {
                best = (i, worst);
            }
        }
        best.0
    }
}

impl FeedbackLaw for CellController {
    fn input(&self, x: &DVector<f64>) -> DVector<f64> {
        self.pieces[self.piece_at(x)].eval(x)
    }
}

pub fn synthesize_cell_controller(
    cell: &Polytope,
    witnesses: &[DVector<f64>],
) -> Result<CellController, ReachError> {
    check_witnesses(cell, witnesses)?;
    let pieces = triangulate(cell)?
        .iter()
        .map(|s| interpolate_on_simplex(cell, s, witnesses))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CellController {
        cell: cell.clone(),
        pieces,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum AlphaMode {
    /// `α = n₁ · x0` for a known entry state.
    EntryState(DVector<f64>),
    /// `α = min_j n₁ · v_j`, for entry states not known in advance.
    WorstCase,
}

/// Upper bound `(β - α) / c₁` on the time to reach the exit facet, with
/// `c₁` the smallest exit-normal velocity over the vertices.
pub fn t0_upper_bound(
    cell: &Polytope,
    exit_facet: usize,
    model: &AffineModel,
    witnesses: &[DVector<f64>],
    alpha_mode: &AlphaMode,
) -> Result<f64, ReachError> {
    check_witnesses(cell, witnesses)?;
    let n1 = &cell.halfspace(exit_facet).normal;
    let c1 = cell
        .vertices()
        .iter()
        .zip(witnesses)
        .map(|(v, u)| n1.dot(&model.velocity(v, u)))
        .fold(f64::INFINITY, f64::min);
    if !(c1 > TOL_STRICT) {
        return Err(ReachError::UnboundedTransit(c1));
    }
    let proj = cell.vertices().iter().map(|v| n1.dot(v));
    let beta = proj.clone().fold(f64::NEG_INFINITY, f64::max);
    let alpha = match alpha_mode {
        AlphaMode::EntryState(x0) => n1.dot(x0),
        AlphaMode::WorstCase => proj.fold(f64::INFINITY, f64::min),
    };
    Ok(((beta - alpha) / c1).max(0.0))
}
