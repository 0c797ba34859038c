//! Ground-truth control-affine vector fields, their linearisations, and
//! fixed-step closed-loop integration with facet-exit detection.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AxisBox, Polytope};

/// Central-difference step for fields without an analytic Jacobian.
pub const FD_STEP: f64 = 1e-5;
/// Default RK4 step.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Time resolution of the exit-time bisection.
pub const EXIT_TIME_RESOLUTION: f64 = 1e-10;
/// A state counts as having left a cell once it violates a facet by more than
/// this, so the exit state is unambiguously located in the next cell.
pub const EXIT_MARGIN: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("initial state {0:?} is outside the cell")]
    StartOutsideCell(Vec<f64>),
    #[error("invalid simulation parameter: {0}")]
    InvalidParameter(String),
}

/// Declared Lipschitz constants of `∇f` and `g` on the state domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lipschitz {
    #[serde(rename = "L_df")]
    pub l_df: f64,
    #[serde(rename = "L_g")]
    pub l_g: f64,
}

/// `ẋ = f(x) + g(x) u`.
pub trait ControlAffineField: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn drift(&self, x: &DVector<f64>) -> DVector<f64>;
    fn control_matrix(&self, x: &DVector<f64>) -> DMatrix<f64>;
    fn lipschitz(&self) -> Lipschitz;

    /// Analytic `∇f(x)` when the field knows it.
    fn drift_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }

    fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        self.drift(x) + self.control_matrix(x) * u
    }
}

/// The uneven-terrain mobile robot model.
#[derive(Debug, Clone, Copy, Default)]
pub struct TerrainModel;

pub fn terrain_model() -> TerrainModel {
    TerrainModel
}

impl ControlAffineField for TerrainModel {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        2
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![
            -0.5 * (0.1 * x[0] - 0.2 * x[1]).sin() - 4.5,
            -0.2 * (0.3 * x[0] - 0.1 * x[1]).sin() - 4.5,
        ])
    }

    fn control_matrix(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0 + 0.02 * x[0],
                0.02 * x[1],
                -0.02 * x[0],
                1.0 - 0.02 * x[1],
            ],
        )
    }

    fn lipschitz(&self) -> Lipschitz {
        Lipschitz {
            l_df: 0.03,
            l_g: 0.03,
        }
    }

    fn drift_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let c1 = (0.1 * x[0] - 0.2 * x[1]).cos();
        let c2 = (0.3 * x[0] - 0.1 * x[1]).cos();
        Some(DMatrix::from_row_slice(
            2,
            2,
            &[-0.05 * c1, 0.1 * c1, -0.06 * c2, 0.02 * c2],
        ))
    }
}

/// Field with constant `A`, `B`, `c`: `ẋ = A x + B u + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    pub lipschitz: Lipschitz,
}

impl ControlAffineField for AffineField {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn drift(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.c
    }

    fn control_matrix(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.b.clone()
    }

    fn lipschitz(&self) -> Lipschitz {
        self.lipschitz
    }

    fn drift_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }
}

/// Affine approximation `A x + B u + c` of a field around `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineModel {
    #[serde(rename = "A", with = "serde_rows::matrix")]
    pub a: DMatrix<f64>,
    #[serde(rename = "B", with = "serde_rows::matrix")]
    pub b: DMatrix<f64>,
    #[serde(with = "serde_rows::vector")]
    pub c: DVector<f64>,
    #[serde(with = "serde_rows::vector")]
    pub center: DVector<f64>,
}

/// Matrices as lists of rows and vectors as plain lists.
pub mod serde_rows {
    pub mod matrix {
        use nalgebra::DMatrix;
        use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

        pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
            m.row_iter().map(|r| r.iter().copied().collect()).collect()
        }

        pub fn from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>, String> {
            let ncols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != ncols) {
                return Err("matrix rows have different lengths".into());
            }
            Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
        }

        pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
            to_rows(m).serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
            let rows = Vec::<Vec<f64>>::deserialize(d)?;
            from_rows(&rows).map_err(D::Error::custom)
        }
    }

    pub mod vector {
        use nalgebra::DVector;
        use serde::{Deserialize, Deserializer, Serialize, Serializer};

        pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
            v.as_slice().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
            Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
        }
    }
}

impl AffineModel {
    pub fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.c
    }

    /// The model as a field, e.g. to simulate under identified dynamics.
    pub fn as_field(&self, lipschitz: Lipschitz) -> AffineField {
        AffineField {
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            lipschitz,
        }
    }

    /// Largest absolute entrywise difference over `A`, `B` and `c`.
    pub fn max_entry_distance(&self, other: &AffineModel) -> f64 {
        (&self.a - &other.a)
            .amax()
            .max((&self.b - &other.b).amax())
            .max((&self.c - &other.c).amax())
    }
}

/// Central finite-difference Jacobian of the drift.
pub fn finite_difference_jacobian(
    field: &dyn ControlAffineField,
    x: &DVector<f64>,
) -> DMatrix<f64> {
    let n = field.state_dim();
    let mut jac = DMatrix::zeros(n, n);
    for k in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += FD_STEP;
        xm[k] -= FD_STEP;
        let col = (field.drift(&xp) - field.drift(&xm)) / (2.0 * FD_STEP);
        jac.set_column(k, &col);
    }
    jac
}

/// `A = ∇f(x_e)`, `B = g(x_e)`, `c = f(x_e) - A x_e`.
pub fn linearize_at(field: &dyn ControlAffineField, x_e: &DVector<f64>) -> AffineModel {
    let a = field
        .drift_jacobian(x_e)
        .unwrap_or_else(|| finite_difference_jacobian(field, x_e));
    let b = field.control_matrix(x_e);
    let c = field.drift(x_e) - &a * x_e;
    AffineModel {
        a,
        b,
        c,
        center: x_e.clone(),
    }
}

/// State feedback `u = k(x)` (before saturation).
pub trait FeedbackLaw {
    fn input(&self, x: &DVector<f64>) -> DVector<f64>;
}

#[derive(Debug, Clone)]
pub struct ConstantInput(pub DVector<f64>);

impl FeedbackLaw for ConstantInput {
    fn input(&self, _x: &DVector<f64>) -> DVector<f64> {
        self.0.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitOutcome {
    ExitedFacet,
    Timeout,
    LeftDomain,
}

impl fmt::Display for ExitOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ExitOutcome::ExitedFacet => "exited_facet",
            ExitOutcome::Timeout => "timeout",
            ExitOutcome::LeftDomain => "left_domain",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub exit_state: Vec<f64>,
    /// Time since the start of the transit.
    pub exit_time: f64,
    pub exit_facet: Option<usize>,
    pub outcome: ExitOutcome,
}

/// One integration sample: time since transit start, state, and the
/// (saturated) input applied at that state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulationOptions<'a> {
    pub step: f64,
    pub t_max: f64,
    pub control_box: &'a AxisBox,
    /// When set, exits that leave this box are reported as `LeftDomain`.
    pub domain: Option<&'a AxisBox>,
    pub record: bool,
}

#[derive(Debug, Clone)]
pub struct Transit {
    pub exit: ExitRecord,
    /// Samples after each step, ending with the exit state; empty unless
    /// recording was requested.
    pub samples: Vec<Sample>,
}

fn saturate(u: DVector<f64>, control_box: &AxisBox) -> DVector<f64> {
    let mut u = u;
    control_box.clamp(u.as_mut_slice());
    u
}

/// One classical RK4 step of the closed loop `ẋ = f(x) + g(x) sat(k(x))`.
pub fn rk4_step(
    field: &dyn ControlAffineField,
    law: &dyn FeedbackLaw,
    control_box: &AxisBox,
    x: &DVector<f64>,
    h: f64,
) -> DVector<f64> {
    let vel = |p: &DVector<f64>| field.velocity(p, &saturate(law.input(p), control_box));
    let k1 = vel(x);
    let k2 = vel(&(x + &k1 * (0.5 * h)));
    let k3 = vel(&(x + &k2 * (0.5 * h)));
    let k4 = vel(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Integrates the closed loop inside `cell` until the state leaves it or
/// `t_max` elapses. The crossing time is bisected to
/// [`EXIT_TIME_RESOLUTION`] and the crossed facet is the one with maximal
/// signed violation at the exit state.
pub fn simulate_closed_loop(
    field: &dyn ControlAffineField,
    law: &dyn FeedbackLaw,
    cell: &Polytope,
    x0: &DVector<f64>,
    opts: &SimulationOptions<'_>,
) -> Result<Transit, DynamicsError> {
    if !(opts.step > 0.0 && opts.t_max > 0.0) {
        return Err(DynamicsError::InvalidParameter(format!(
            "step {} and t_max {} must be positive",
            opts.step, opts.t_max
        )));
    }
    if !cell.contains(x0, EXIT_MARGIN) {
        return Err(DynamicsError::StartOutsideCell(
            x0.iter().copied().collect(),
        ));
    }
    let inside = |p: &DVector<f64>| cell.contains(p, EXIT_MARGIN);
    let input_at = |p: &DVector<f64>| saturate(law.input(p), opts.control_box);
    let mut samples = Vec::new();
    let mut x = x0.clone();
    let mut t = 0.0;
    let mut k: u64 = 0;
    loop {
        if t >= opts.t_max {
            return Ok(Transit {
                exit: ExitRecord {
                    exit_state: x.iter().copied().collect(),
                    exit_time: t,
                    exit_facet: None,
                    outcome: ExitOutcome::Timeout,
                },
                samples,
            });
        }
        let h = opts.step.min(opts.t_max - t);
        let next = rk4_step(field, law, opts.control_box, &x, h);
        if inside(&next) {
            k += 1;
            // Multiply rather than accumulate so long transits keep exact step times.
            t = if h == opts.step {
                k as f64 * opts.step
            } else {
                opts.t_max
            };
            x = next;
            if opts.record {
                samples.push(Sample {
                    t,
                    u: input_at(&x),
                    x: x.clone(),
                });
            }
            continue;
        }
        // Bisect the sub-step length on [0, h]: lo stays inside, hi outside.
        let (mut lo, mut hi) = (0.0, h);
        let mut x_hi = next;
        while hi - lo > EXIT_TIME_RESOLUTION {
            let mid = 0.5 * (lo + hi);
            let x_mid = rk4_step(field, law, opts.control_box, &x, mid);
            if inside(&x_mid) {
                lo = mid;
            } else {
                hi = mid;
                x_hi = x_mid;
            }
        }
        let exit_time = t + hi;
        let (facet, _) = cell.max_violation(&x_hi);
        let left_domain = opts
            .domain
            .is_some_and(|d| !d.contains(x_hi.as_slice(), 0.0));
        if opts.record {
            samples.push(Sample {
                t: exit_time,
                u: input_at(&x_hi),
                x: x_hi.clone(),
            });
        }
        return Ok(Transit {
            exit: ExitRecord {
                exit_state: x_hi.iter().copied().collect(),
                exit_time,
                exit_facet: Some(facet),
                outcome: if left_domain {
                    ExitOutcome::LeftDomain
                } else {
                    ExitOutcome::ExitedFacet
                },
            },
            samples,
        });
    }
}
