//! Affine system identification from small random excitations.
//!
//! The environment is driven with `N` piecewise-constant random inputs of
//! duration `T`. Each step records the extended regressor `[x; u; 1]` and the
//! measured velocity, and `Θ = [A | B | c]` is fitted by least squares through
//! the normal equations `Θ = Ẋ Xᵀ (X Xᵀ)⁻¹`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{rk4_step, AffineModel, ConstantInput, ControlAffineField};
use crate::geometry::AxisBox;

/// Gram matrices with a larger condition number trigger the ridge retry.
pub const MAX_CONDITION: f64 = 1e12;
/// Ridge weight relative to the mean diagonal of `X Xᵀ`.
pub const RIDGE_FACTOR: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IdentificationError {
    #[error("invalid identification config: {0}")]
    InvalidConfig(String),
    #[error("regressor Gram matrix is ill-conditioned (condition number {0:e})")]
    IllConditioned(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMode {
    /// Velocity read directly from the environment.
    Oracle,
    /// `(x_new - x) / T` from one integration step.
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationConfig {
    pub samples: usize,
    pub time_step: f64,
    pub input_scale: f64,
    pub velocity_mode: VelocityMode,
    pub seed: u64,
}

impl IdentificationConfig {
    /// `N = 100`, `T = 1e-3`, inputs at a tenth of the smallest control half-width.
    pub fn defaults_for(control_box: &AxisBox, seed: u64) -> Self {
        Self {
            samples: 100,
            time_step: 1e-3,
            input_scale: 0.1 * control_box.min_half_width(),
            velocity_mode: VelocityMode::Oracle,
            seed,
        }
    }

    pub fn validate(&self, n: usize, m: usize) -> Result<(), IdentificationError> {
        if self.samples < n + m + 1 {
            return Err(IdentificationError::InvalidConfig(format!(
                "N = {} is below n + m + 1 = {}",
                self.samples,
                n + m + 1
            )));
        }
        if !(self.time_step > 0.0 && self.time_step.is_finite()) {
            return Err(IdentificationError::InvalidConfig(
                "T must be positive".into(),
            ));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(IdentificationError::InvalidConfig(
                "input_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One excitation step: the state it started from, the input held over the
/// step, and the state reached.
#[derive(Debug, Clone, PartialEq)]
pub struct ExcitationStep {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Identification {
    pub model: AffineModel,
    pub final_state: DVector<f64>,
    pub residual_rms: f64,
    pub ridge_used: bool,
    pub steps: Vec<ExcitationStep>,
}

impl Identification {
    /// Largest speed observed along the run (for the displacement check).
    pub fn max_speed(&self, field: &dyn ControlAffineField) -> f64 {
        self.steps
            .iter()
            .map(|s| field.velocity(&s.x, &s.u).norm())
            .fold(0.0, f64::max)
    }
}

/// Runs the excitation loop from `x_init` and fits an affine model.
pub fn identify(
    env: &dyn ControlAffineField,
    x_init: &DVector<f64>,
    control_box: &AxisBox,
    cfg: &IdentificationConfig,
) -> Result<Identification, IdentificationError> {
    let nominal = DVector::zeros(env.input_dim());
    identify_around(env, x_init, control_box, cfg, &nominal)
}

/// Like [`identify`], with the random inputs drawn around `nominal` instead
/// of zero.
pub fn identify_around(
    env: &dyn ControlAffineField,
    x_init: &DVector<f64>,
    control_box: &AxisBox,
    cfg: &IdentificationConfig,
    nominal: &DVector<f64>,
) -> Result<Identification, IdentificationError> {
    let n = env.state_dim();
    let m = env.input_dim();
    cfg.validate(n, m)?;
    if nominal.len() != m {
        return Err(IdentificationError::InvalidConfig(format!(
            "nominal input has {} entries, expected {m}",
            nominal.len()
        )));
    }
    let p = n + m + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut regressors = DMatrix::zeros(p, cfg.samples);
    let mut velocities = DMatrix::zeros(n, cfg.samples);
    let mut steps = Vec::with_capacity(cfg.samples);
    let mut x = x_init.clone();
    for i in 0..cfg.samples {
        let mut u: Vec<f64> = (0..m)
            .map(|k| nominal[k] + rng.gen_range(-cfg.input_scale..=cfg.input_scale))
            .collect();
        control_box.clamp(&mut u);
        let u = DVector::from_vec(u);
        let x_next = rk4_step(
            env,
            &ConstantInput(u.clone()),
            control_box,
            &x,
            cfg.time_step,
        );
        let xdot = match cfg.velocity_mode {
            VelocityMode::Oracle => env.velocity(&x, &u),
            VelocityMode::FiniteDifference => (&x_next - &x) / cfg.time_step,
        };
        regressors.view_mut((0, i), (n, 1)).copy_from(&x);
        regressors.view_mut((n, i), (m, 1)).copy_from(&u);
        regressors[(p - 1, i)] = 1.0;
        velocities.set_column(i, &xdot);
        steps.push(ExcitationStep {
            x: x.clone(),
            u,
            x_next: x_next.clone(),
        });
        x = x_next;
    }

    let (theta, ridge_used) = least_squares(&regressors, &velocities)?;
    let residual = &velocities - &theta * &regressors;
    let residual_rms = (residual.norm_squared() / residual.len() as f64).sqrt();
    let center = steps
        .iter()
        .fold(DVector::zeros(n), |acc: DVector<f64>, s| acc + &s.x)
        / cfg.samples as f64;
    let model = AffineModel {
        a: theta.columns(0, n).into_owned(),
        b: theta.columns(n, m).into_owned(),
        c: theta.column(n + m).into_owned(),
        center,
    };
    Ok(Identification {
        model,
        final_state: x,
        residual_rms,
        ridge_used,
        steps,
    })
}

/// Solves `Θ (X Xᵀ) = Ẋ Xᵀ`, with one ridge-regularised retry.
fn least_squares(
    x: &DMatrix<f64>,
    xdot: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, bool), IdentificationError> {
    let gram = x * x.transpose();
    let rhs = xdot * x.transpose();
    let solve = |g: &DMatrix<f64>| -> Result<DMatrix<f64>, f64> {
        let cond = condition_number(g);
        if !(cond <= MAX_CONDITION) {
            return Err(cond);
        }
        // Θ G = R  ⇔  G Θᵀ = Rᵀ (G symmetric).
        g.clone()
            .cholesky()
            .map(|ch| ch.solve(&rhs.transpose()).transpose())
            .ok_or(f64::INFINITY)
    };
    if condition_number(&gram) <= MAX_CONDITION {
        if let Some(theta) = centered_solve(x, xdot) {
            return Ok((theta, false));
        }
    }
    match solve(&gram) {
        Ok(theta) => Ok((theta, false)),
        Err(_) => {
            let p = gram.nrows();
            let lambda = RIDGE_FACTOR * gram.trace() / p as f64;
            let ridged = &gram + DMatrix::identity(p, p) * lambda;
            solve(&ridged)
                .map(|theta| (theta, true))
                .map_err(IdentificationError::IllConditioned)
        }
    }
}

/// Minimiser of the normal equations computed without forming them. Every
/// regressor row except the constant one is centred first, which removes
/// the offset that otherwise dominates the conditioning, and the centred
/// problem is solved by SVD. The constant term is restored afterwards.
fn centered_solve(x: &DMatrix<f64>, xdot: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (p, k) = x.shape();
    let mean = x.column_mean();
    let mut centered = x.clone();
    for r in 0..p - 1 {
        for i in 0..k {
            centered[(r, i)] -= mean[r];
        }
    }
    let mut theta = centered
        .transpose()
        .svd(true, true)
        .solve(&xdot.transpose(), 0.0)
        .ok()?
        .transpose();
    // Θ_c x_c = Θ_c (x - x̄) + θ_1, so the constant term absorbs -Θ x̄.
    let shift = theta.columns(0, p - 1) * mean.rows(0, p - 1);
    let mut last = theta.column_mut(p - 1);
    last -= shift;
    Some(theta)
}

fn condition_number(g: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(g.clone()).eigenvalues;
    let max = eig.max();
    let min = eig.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{linearize_at, terrain_model, AffineField, Lipschitz};

    fn random_affine(seed: u64) -> AffineField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AffineField {
            a: DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0)),
            b: DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..1.0)),
            c: DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)),
            lipschitz: Lipschitz {
                l_df: 1.0,
                l_g: 1.0,
            },
        }
    }

    fn cfg(mode: VelocityMode, t: f64, seed: u64) -> IdentificationConfig {
        IdentificationConfig {
            samples: 100,
            time_step: t,
            input_scale: 0.5,
            velocity_mode: mode,
            seed,
        }
    }

    #[test]
    fn exact_recovery_on_affine_env() {
        let env = random_affine(1);
        let ubox = AxisBox::symmetric(2, 5.0);
        let x0 = DVector::from_vec(vec![0.3, -0.2]);
        let id = identify(&env, &x0, &ubox, &cfg(VelocityMode::Oracle, 1e-3, 9)).unwrap();
        assert!((&id.model.a - &env.a).amax() < 1e-8);
        assert!((&id.model.b - &env.b).amax() < 1e-8);
        assert!((&id.model.c - &env.c).amax() < 1e-8);
        assert!(id.residual_rms <= 1e-10);
    }

    #[test]
    fn terrain_recovery_close_to_linearization() {
        let env = terrain_model();
        let ubox = AxisBox::symmetric(2, 5.0);
        let center = DVector::from_vec(vec![0.5, 0.5]);
        let c = IdentificationConfig {
            samples: 100,
            time_step: 1e-3,
            input_scale: 0.1,
            velocity_mode: VelocityMode::Oracle,
            seed: 42,
        };
        let id = identify(&env, &center, &ubox, &c).unwrap();
        let lin = linearize_at(&env, &center);
        assert!(id.model.max_entry_distance(&lin) <= 0.1);
    }

    #[test]
    fn finite_difference_agrees_with_oracle() {
        // The finite-difference bias is about (T/2) A [A | B | c]; keep it near 1e-6.
        let mut env = random_affine(5);
        env.a *= 0.1;
        env.b *= 0.5;
        env.c *= 0.5;
        let ubox = AxisBox::symmetric(2, 5.0);
        let x0 = DVector::from_vec(vec![0.1, 0.1]);
        let a = identify(&env, &x0, &ubox, &cfg(VelocityMode::Oracle, 1e-4, 3)).unwrap();
        let b = identify(
            &env,
            &x0,
            &ubox,
            &cfg(VelocityMode::FiniteDifference, 1e-4, 3),
        )
        .unwrap();
        assert!(a.model.max_entry_distance(&b.model) < 1e-5);
    }

    #[test]
    fn displacement_bounded_by_speed() {
        let env = terrain_model();
        let ubox = AxisBox::symmetric(2, 5.0);
        let x0 = DVector::from_vec(vec![3.5, -2.5]);
        let id = identify(
            &env,
            &x0,
            &ubox,
            &IdentificationConfig::defaults_for(&ubox, 1),
        )
        .unwrap();
        let disp = (&id.final_state - &x0).norm();
        assert!(disp <= 100.0 * 1e-3 * id.max_speed(&env) + 1e-12);
        assert!(disp <= 1.0);
    }

    #[test]
    fn deterministic_for_seed() {
        let env = terrain_model();
        let ubox = AxisBox::symmetric(2, 5.0);
        let x0 = DVector::from_vec(vec![0.5, 0.5]);
        let c = IdentificationConfig::defaults_for(&ubox, 11);
        let a = identify(&env, &x0, &ubox, &c).unwrap();
        let b = identify(&env, &x0, &ubox, &c).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.final_state, b.final_state);
    }

    #[test]
    fn too_few_samples_rejected() {
        let env = terrain_model();
        let ubox = AxisBox::symmetric(2, 5.0);
        let mut c = IdentificationConfig::defaults_for(&ubox, 1);
        c.samples = 4;
        assert!(matches!(
            identify(&env, &DVector::zeros(2), &ubox, &c),
            Err(IdentificationError::InvalidConfig(_))
        ));
    }

    #[test]
    fn motionless_env_uses_ridge() {
        let env = AffineField {
            a: DMatrix::zeros(2, 2),
            b: DMatrix::zeros(2, 2),
            c: DVector::zeros(2),
            lipschitz: Lipschitz {
                l_df: 1.0,
                l_g: 1.0,
            },
        };
        let ubox = AxisBox::symmetric(2, 5.0);
        let id = identify(
            &env,
            &DVector::from_vec(vec![0.5, 0.5]),
            &ubox,
            &IdentificationConfig::defaults_for(&ubox, 2),
        )
        .unwrap();
        assert!(id.ridge_used);
        assert!(id.model.b.amax() < 1e-6);
    }
}
