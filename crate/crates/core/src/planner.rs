//! The mission loop: identify the current cell, refresh the graph, search,
//! synthesize a controller for the first hop and execute it on the true
//! dynamics, until the target cell is reached or a cap triggers.

use std::collections::BTreeMap;
use std::sync::Arc;

use log::{debug, info, warn};
use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{
    simulate_closed_loop, AffineModel, ControlAffineField, ExitOutcome, ExitRecord, Lipschitz,
    SimulationOptions, DEFAULT_STEP,
};
use crate::geometry::{AxisBox, GridPartition};
use crate::graph::{
    nearest_explored, shortest_path, update_graph, EdgeStatus, ReachGraph, UpdateSummary,
    WeightMode,
};
use crate::lincon::TOL_STRICT;
use crate::reach::{
    synthesize_cell_controller, t0_upper_bound, vertex_constraint_system, AlphaMode,
};
use crate::sysid::{identify_around, IdentificationConfig, IdentificationError};

/// Transit budget used when the time bound cannot be evaluated.
pub const FALLBACK_TRANSIT_TIME: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MissionError {
    #[error("initial state {0:?} is outside the state bounds")]
    InitialStateOutside(Vec<f64>),
    #[error("target cell {0} is out of range")]
    InvalidTarget(usize),
    #[error("invalid mission configuration: {0}")]
    InvalidConfig(String),
    #[error("identification of cell {cell} failed: {source}")]
    Identification {
        cell: usize,
        #[source]
        source: IdentificationError,
    },
}

/// Everything about the world the agent operates in.
#[derive(Clone)]
pub struct MissionSetup {
    pub field: Arc<dyn ControlAffineField>,
    pub partition: GridPartition,
    pub control_box: AxisBox,
    pub lipschitz: Lipschitz,
    pub gamma: f64,
    pub weight_mode: WeightMode,
    /// Identification settings; the seed is replaced per cell.
    pub sysid: IdentificationConfig,
    pub initial_state: Vec<f64>,
    pub target_cell: usize,
}

#[derive(Clone)]
pub struct MissionConfig {
    pub setup: MissionSetup,
    pub max_iterations: usize,
    pub stuck_retry_limit: usize,
    pub transit_timeout_factor: f64,
    pub seed: u64,
}

impl MissionConfig {
    pub fn new(setup: MissionSetup, seed: u64) -> Self {
        Self {
            setup,
            max_iterations: 400,
            stuck_retry_limit: 3,
            transit_timeout_factor: 3.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MissionStatus {
    ReachedTarget,
    Stuck,
    IterationCap,
}

impl MissionStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            MissionStatus::ReachedTarget => 0,
            MissionStatus::Stuck => 2,
            MissionStatus::IterationCap => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub cell: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentificationSummary {
    pub residual_rms: f64,
    pub ridge_used: bool,
    pub samples: usize,
    pub seed: u64,
    pub final_cell: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cell: usize,
    pub identification: Option<IdentificationSummary>,
    pub graph_update: Option<UpdateSummary>,
    pub path: Option<Vec<usize>>,
    pub path_cost: Option<f64>,
    pub target_edge: Option<(usize, usize)>,
    pub t0_bound: Option<f64>,
    /// Witness inputs lie in the control box and satisfy every vertex system.
    pub witness_check: Option<bool>,
    pub exit: Option<ExitRecord>,
    pub entered_cell: Option<usize>,
    pub note: Option<String>,
}

impl IterationRecord {
    fn new(iteration: usize, cell: usize) -> Self {
        Self {
            iteration,
            cell,
            identification: None,
            graph_update: None,
            path: None,
            path_cost: None,
            target_edge: None,
            t0_bound: None,
            witness_check: None,
            exit: None,
            entered_cell: None,
            note: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MissionLog {
    pub status: MissionStatus,
    pub iterations: usize,
    pub initial_cell: usize,
    pub target_cell: usize,
    pub final_cell: Option<usize>,
    pub records: Vec<IterationRecord>,
    pub diagnostics: Vec<String>,
    pub models: BTreeMap<usize, AffineModel>,
    /// Edges excluded empirically after repeated failed transits.
    pub overrides: Vec<(usize, usize)>,
    #[serde(skip)]
    pub trajectory: Vec<TrajectoryRow>,
    #[serde(skip)]
    pub graph: ReachGraph,
}

/// Identification seed of `cell` derived from the mission seed (SplitMix64).
pub fn cell_seed(seed: u64, cell: usize) -> u64 {
    let mut z = seed ^ (cell as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fraction of the way to the cell center the nominal input aims to cover
/// over one identification run.
const IDENTIFICATION_CENTERING: f64 = 0.5;

/// Nominal identification input for a fresh cell: under `model` (the nearest
/// identified one) it steers the state toward `center`, so the excitation run
/// tends to stay inside the cell. Kept at least `input_scale` away from the
/// control bounds so the random part is not clipped.
pub fn steering_input(
    model: &AffineModel,
    x: &DVector<f64>,
    center: &DVector<f64>,
    control_box: &AxisBox,
    sysid: &IdentificationConfig,
) -> DVector<f64> {
    let m = model.b.ncols();
    let horizon = sysid.samples as f64 * sysid.time_step;
    let wanted = (center - x) * (IDENTIFICATION_CENTERING / horizon);
    let rhs = wanted - (&model.a * x + &model.c);
    let mut u = model
        .b
        .clone()
        .svd(true, true)
        .solve(&rhs, 1e-9)
        .unwrap_or_else(|_| DVector::zeros(m));
    for k in 0..m {
        let (lo, hi) = (
            control_box.lo[k] + sysid.input_scale,
            control_box.hi[k] - sysid.input_scale,
        );
        u[k] = if lo <= hi {
            u[k].clamp(lo, hi)
        } else {
            0.5 * (control_box.lo[k] + control_box.hi[k])
        };
    }
    u
}

struct Mission<'a> {
    cfg: &'a MissionConfig,
    trajectory: Vec<TrajectoryRow>,
    time: f64,
    last_cell: usize,
}

impl Mission<'_> {
    fn push_row(&mut self, t: f64, x: &DVector<f64>, u: &DVector<f64>) {
        if let Ok(c) = self.cfg.setup.partition.locate(x.as_slice()) {
            self.last_cell = c;
        }
        self.trajectory.push(TrajectoryRow {
            t,
            x: x.iter().copied().collect(),
            u: u.iter().copied().collect(),
            cell: self.last_cell,
        });
    }
}

pub fn run_mission(cfg: &MissionConfig) -> Result<MissionLog, MissionError> {
    let setup = &cfg.setup;
    let part = &setup.partition;
    let field = setup.field.as_ref();
    if cfg.max_iterations == 0 || cfg.stuck_retry_limit == 0 || !(cfg.transit_timeout_factor > 0.0)
    {
        return Err(MissionError::InvalidConfig(
            "max_iterations, stuck_retry_limit and transit_timeout_factor must be positive".into(),
        ));
    }
    if setup.target_cell >= part.num_cells() {
        return Err(MissionError::InvalidTarget(setup.target_cell));
    }
    let initial_cell = part
        .locate(&setup.initial_state)
        .map_err(|_| MissionError::InitialStateOutside(setup.initial_state.clone()))?;

    let m = field.input_dim();
    let mut graph = ReachGraph::new(part, setup.gamma, setup.weight_mode);
    let mut models: BTreeMap<usize, AffineModel> = BTreeMap::new();
    let mut failures: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut overrides = Vec::new();
    let mut records = Vec::new();
    let mut diagnostics = Vec::new();
    let mut mission = Mission {
        cfg,
        trajectory: Vec::new(),
        time: 0.0,
        last_cell: initial_cell,
    };
    let mut x = DVector::from_column_slice(&setup.initial_state);
    mission.push_row(0.0, &x, &DVector::zeros(m));

    let mut status = MissionStatus::IterationCap;
    let mut iterations = 0;
    let mut current = initial_cell;
    loop {
        current = match part.locate(x.as_slice()) {
            Ok(c) => c,
            Err(_) => {
                diagnostics.push(format!("state {:?} left the state bounds", x.as_slice()));
                status = MissionStatus::Stuck;
                break;
            }
        };
        if current == setup.target_cell {
            status = MissionStatus::ReachedTarget;
            break;
        }
        if iterations >= cfg.max_iterations {
            diagnostics.push(format!("iteration cap {} reached", cfg.max_iterations));
            break;
        }
        iterations += 1;
        let mut rec = IterationRecord::new(iterations, current);

        if !models.contains_key(&current) {
            let mut sysid = setup.sysid.clone();
            sysid.seed = cell_seed(cfg.seed, current);
            let nominal = if models.is_empty() {
                DVector::zeros(m)
            } else {
                let center = part.center(current).expect("valid id");
                let reference = nearest_explored(part, current, &models);
                steering_input(&models[&reference], &x, &center, &setup.control_box, &sysid)
            };
            let ident = identify_around(field, &x, &setup.control_box, &sysid, &nominal).map_err(
                |source| MissionError::Identification {
                    cell: current,
                    source,
                },
            )?;
            for (i, step) in ident.steps.iter().enumerate() {
                let t = mission.time + (i + 1) as f64 * sysid.time_step;
                mission.push_row(t, &step.x_next, &step.u);
            }
            mission.time += ident.steps.len() as f64 * sysid.time_step;
            x = ident.final_state.clone();
            let final_cell = part.locate(x.as_slice()).ok();
            info!(
                "iteration {iterations}: identified cell {current} (rms {:.3e}, ridge {})",
                ident.residual_rms, ident.ridge_used
            );
            rec.identification = Some(IdentificationSummary {
                residual_rms: ident.residual_rms,
                ridge_used: ident.ridge_used,
                samples: ident.steps.len(),
                seed: sysid.seed,
                final_cell,
            });
            let prev = models.insert(current, ident.model);
            assert!(prev.is_none(), "cell {current} identified twice");
            if final_cell != Some(current) {
                rec.note = Some("state left the cell during identification".into());
                records.push(rec);
                continue;
            }
        }

        rec.graph_update = Some(update_graph(
            &mut graph,
            part,
            &models,
            setup.lipschitz,
            &setup.control_box,
        ));
        let Some(path) = shortest_path(&graph, current, setup.target_cell) else {
            diagnostics.push(format!(
                "no path from cell {current} to target cell {}",
                setup.target_cell
            ));
            rec.note = Some("empty path".into());
            records.push(rec);
            status = MissionStatus::Stuck;
            break;
        };
        let next = path.nodes[1];
        debug!(
            "iteration {iterations}: path {:?} cost {}",
            path.nodes, path.cost
        );
        rec.path = Some(path.nodes.clone());
        rec.path_cost = Some(path.cost);
        rec.target_edge = Some((current, next));

        let edge = graph.edge(current, next).expect("path follows edges");
        assert!(
            edge.definitive && edge.status == EdgeStatus::Exists,
            "edges out of an identified cell are definitive"
        );
        let witnesses: Vec<DVector<f64>> = edge
            .witnesses
            .as_ref()
            .expect("exists edges carry witnesses")
            .iter()
            .map(|w| DVector::from_column_slice(w))
            .collect();
        let cell = part.cell(current).expect("valid id");
        let facet = part
            .common_facet(current, next)
            .expect("valid ids")
            .expect("path edges join adjacent cells");
        let model = &models[&current];
        let witness_ok = witnesses.iter().enumerate().all(|(j, u)| {
            setup.control_box.contains(u.as_slice(), 0.0)
                && vertex_constraint_system(cell, facet, j, model, &setup.control_box)
                    .is_satisfied_by(u.as_slice(), TOL_STRICT)
        });
        rec.witness_check = Some(witness_ok);
        if !witness_ok {
            warn!("witness substitution check failed on edge {current}->{next}");
        }
        let controller = synthesize_cell_controller(cell, &witnesses)
            .expect("witnesses match the cell's vertices");
        let t0 = t0_upper_bound(
            cell,
            facet,
            model,
            &witnesses,
            &AlphaMode::EntryState(x.clone()),
        )
        .ok();
        rec.t0_bound = t0;
        let t_max = t0
            .map(|t| cfg.transit_timeout_factor * t.max(DEFAULT_STEP))
            .unwrap_or(FALLBACK_TRANSIT_TIME);
        let transit = simulate_closed_loop(
            field,
            &controller,
            cell,
            &x,
            &SimulationOptions {
                step: DEFAULT_STEP,
                t_max,
                control_box: &setup.control_box,
                domain: Some(part.bounds()),
                record: true,
            },
        )
        .expect("state lies in the current cell");
        for s in &transit.samples {
            mission.push_row(mission.time + s.t, &s.x, &s.u);
        }
        mission.time += transit.exit.exit_time;
        x = DVector::from_column_slice(&transit.exit.exit_state);
        let exit = transit.exit.clone();
        rec.exit = Some(exit.clone());

        match exit.outcome {
            ExitOutcome::LeftDomain => {
                diagnostics.push(format!(
                    "transit {current}->{next} left the state bounds at {:?}",
                    exit.exit_state
                ));
                records.push(rec);
                status = MissionStatus::Stuck;
                break;
            }
            ExitOutcome::ExitedFacet if exit.exit_facet == Some(facet) => {
                rec.entered_cell = part.locate(x.as_slice()).ok();
            }
            _ => {
                rec.entered_cell = part.locate(x.as_slice()).ok();
                let count = failures.entry((current, next)).or_insert(0);
                *count += 1;
                warn!(
                    "transit {current}->{next} failed ({}, {} of {})",
                    exit.outcome, count, cfg.stuck_retry_limit
                );
                if *count >= cfg.stuck_retry_limit {
                    graph.override_absent(current, next);
                    overrides.push((current, next));
                    rec.note = Some(format!("edge {current}->{next} overridden to absent"));
                }
            }
        }
        records.push(rec);
    }

    let final_cell = part.locate(x.as_slice()).ok();
    info!("mission finished: {status:?} after {iterations} iterations");
    Ok(MissionLog {
        status,
        iterations,
        initial_cell,
        target_cell: setup.target_cell,
        final_cell: final_cell.or(Some(current)),
        records,
        diagnostics,
        models,
        overrides,
        trajectory: mission.trajectory,
        graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::AffineField;
    use crate::geometry::build_grid_partition;
    use crate::sysid::VelocityMode;
    use nalgebra::DMatrix;

    fn setup(b: DMatrix<f64>, initial: Vec<f64>, target: usize) -> MissionSetup {
        let lipschitz = Lipschitz {
            l_df: 0.03,
            l_g: 0.03,
        };
        let control_box = AxisBox::symmetric(2, 5.0);
        MissionSetup {
            field: Arc::new(AffineField {
                a: DMatrix::zeros(2, 2),
                b,
                c: DVector::zeros(2),
                lipschitz,
            }),
            partition: build_grid_partition(&AxisBox::symmetric(2, 3.0), &[3, 3]).unwrap(),
            sysid: IdentificationConfig {
                samples: 100,
                time_step: 1e-3,
                input_scale: 0.5,
                velocity_mode: VelocityMode::Oracle,
                seed: 0,
            },
            control_box,
            lipschitz,
            gamma: 100.0,
            weight_mode: WeightMode::Constant,
            initial_state: initial,
            target_cell: target,
        }
    }

    #[test]
    fn start_in_target_is_immediate() {
        let cfg = MissionConfig::new(setup(DMatrix::identity(2, 2), vec![0.0, 0.0], 4), 1);
        let log = run_mission(&cfg).unwrap();
        assert_eq!(log.status, MissionStatus::ReachedTarget);
        assert_eq!(log.iterations, 0);
        assert_eq!(log.trajectory.len(), 1);
    }

    #[test]
    fn integrator_reaches_corner() {
        let cfg = MissionConfig::new(setup(DMatrix::identity(2, 2), vec![-2.5, -2.5], 8), 1);
        let log = run_mission(&cfg).unwrap();
        assert_eq!(log.status, MissionStatus::ReachedTarget);
        assert_eq!(log.final_cell, Some(8));
        assert_eq!(log.trajectory.last().unwrap().cell, 8);
        assert!(log.records.iter().all(|r| r.witness_check != Some(false)));
        for w in log.trajectory.windows(2) {
            assert!(w[1].t > w[0].t);
        }
        assert_eq!(run_mission(&cfg).unwrap(), log);
    }

    #[test]
    fn no_actuation_is_stuck() {
        let cfg = MissionConfig::new(setup(DMatrix::zeros(2, 2), vec![0.0, 0.0], 8), 1);
        let log = run_mission(&cfg).unwrap();
        assert_eq!(log.status, MissionStatus::Stuck);
        assert!(log.diagnostics.iter().any(|d| d.contains("no path")));
    }

    #[test]
    fn rejects_start_outside() {
        let cfg = MissionConfig::new(setup(DMatrix::identity(2, 2), vec![11.0, 0.0], 8), 1);
        assert!(matches!(
            run_mission(&cfg),
            Err(MissionError::InitialStateOutside(_))
        ));
    }

    #[test]
    fn cell_seeds_differ() {
        assert_ne!(cell_seed(7, 0), cell_seed(7, 1));
        assert_eq!(cell_seed(7, 3), cell_seed(7, 3));
    }
}
