//! Scenario files, the `plan` / `truth-graph` / `sysid-check` subcommands and
//! their artifact writers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::dynamics::serde_rows::matrix::{from_rows, to_rows};
use crate::dynamics::{
    linearize_at, terrain_model, AffineField, AffineModel, ControlAffineField, Lipschitz,
};
use crate::geometry::{build_grid_partition, AxisBox, GridPartition};
use crate::graph::{ground_truth_graph, EdgeStatus, ReachGraph, WeightMode};
use crate::planner::{
    run_mission, MissionConfig, MissionError, MissionLog, MissionSetup, TrajectoryRow,
};
use crate::sysid::{identify, IdentificationConfig, VelocityMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_MALFORMED: i32 = 1;
pub const EXIT_STUCK: i32 = 2;
pub const EXIT_ITERATION_CAP: i32 = 3;
pub const EXIT_IDENTIFICATION: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("malformed scenario: {0}")]
    Scenario(String),
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("identification failed: {0}")]
    Identification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Scenario(_) | CliError::Io(_) => EXIT_MALFORMED,
            CliError::Identification(_) => EXIT_IDENTIFICATION,
        }
    }
}

fn malformed(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Scenario(format!("field `{field}`: {msg}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Builtin {
    Terrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DynamicsSpec {
    Builtin(Builtin),
    Affine(AffineSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum TargetSpec {
    Cell(usize),
    State(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SysidSpec {
    #[serde(rename = "N")]
    pub samples: usize,
    #[serde(rename = "T")]
    pub time_step: f64,
    pub input_scale: f64,
    pub velocity_mode: VelocityMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub dynamics: DynamicsSpec,
    pub state_bounds: AxisBox,
    pub grid: Vec<usize>,
    pub control_box: AxisBox,
    pub lipschitz: Lipschitz,
    pub gamma: f64,
    pub sysid: SysidSpec,
    pub initial_state: Vec<f64>,
    pub target: TargetSpec,
    pub weight_mode: WeightMode,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        serde_json::from_str(text).map_err(|e| CliError::Scenario(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Scenario(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn field(&self) -> Result<Arc<dyn ControlAffineField>, CliError> {
        match &self.dynamics {
            DynamicsSpec::Builtin(Builtin::Terrain) => Ok(Arc::new(terrain_model())),
            DynamicsSpec::Affine(spec) => {
                let a = from_rows(&spec.a).map_err(|e| malformed("dynamics.affine.A", e))?;
                let b = from_rows(&spec.b).map_err(|e| malformed("dynamics.affine.B", e))?;
                let n = spec.c.len();
                if a.shape() != (n, n) {
                    return Err(malformed("dynamics.affine.A", format!("expected {n}x{n}")));
                }
                if b.nrows() != n || b.ncols() == 0 {
                    return Err(malformed("dynamics.affine.B", format!("expected {n} rows")));
                }
                Ok(Arc::new(AffineField {
                    a,
                    b,
                    c: DVector::from_vec(spec.c.clone()),
                    lipschitz: self.lipschitz,
                }))
            }
        }
    }

    /// Validates the scenario and resolves it into a mission setup.
    pub fn setup(&self) -> Result<MissionSetup, CliError> {
        let field = self.field()?;
        let (n, m) = (field.state_dim(), field.input_dim());
        let bounds = AxisBox::new(self.state_bounds.lo.clone(), self.state_bounds.hi.clone())
            .map_err(|e| malformed("state_bounds", e))?;
        if bounds.dim() != n {
            return Err(malformed("state_bounds", format!("expected dimension {n}")));
        }
        let partition =
            build_grid_partition(&bounds, &self.grid).map_err(|e| malformed("grid", e))?;
        let control_box = AxisBox::new(self.control_box.lo.clone(), self.control_box.hi.clone())
            .map_err(|e| malformed("control_box", e))?;
        if control_box.dim() != m {
            return Err(malformed("control_box", format!("expected dimension {m}")));
        }
        if !(self.lipschitz.l_df > 0.0 && self.lipschitz.l_g > 0.0) {
            return Err(malformed("lipschitz", "constants must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(malformed("gamma", "must be positive"));
        }
        if !(self.sysid.time_step > 0.0 && self.sysid.input_scale > 0.0) {
            return Err(malformed("sysid", "T and input_scale must be positive"));
        }
        if self.initial_state.len() != n {
            return Err(malformed("initial_state", format!("expected {n} entries")));
        }
        partition.locate(&self.initial_state).map_err(|_| {
            malformed(
                "initial_state",
                format!("{:?} is outside state_bounds", self.initial_state),
            )
        })?;
        let target_cell = match &self.target {
            TargetSpec::Cell(c) if *c < partition.num_cells() => *c,
            TargetSpec::Cell(c) => {
                return Err(malformed("target", format!("cell {c} is out of range")))
            }
            TargetSpec::State(x) => partition
                .locate(x)
                .map_err(|_| malformed("target", format!("{x:?} is outside state_bounds")))?,
        };
        Ok(MissionSetup {
            lipschitz: self.lipschitz,
            field,
            partition,
            control_box,
            gamma: self.gamma,
            weight_mode: self.weight_mode,
            sysid: IdentificationConfig {
                samples: self.sysid.samples,
                time_step: self.sysid.time_step,
                input_scale: self.sysid.input_scale,
                velocity_mode: self.sysid.velocity_mode,
                seed: self.sysid.seed,
            },
            initial_state: self.initial_state.clone(),
            target_cell,
        })
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "pwa-nav",
    version,
    about = "Reach-control navigation with online identification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a mission and write the trajectory, graph and figures.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "max-iters")]
        max_iters: Option<usize>,
    },
    /// Decide every edge from the analytic linearization at each cell center.
    TruthGraph {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Identify one cell and compare against the analytic linearization.
    SysidCheck {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Cell to identify; defaults to the cell containing the domain center.
        #[arg(long)]
        cell: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Plan {
            scenario,
            out,
            seed,
            max_iters,
        } => cmd_plan(&scenario, &out, seed, max_iters),
        Command::TruthGraph { scenario, out } => cmd_truth_graph(&scenario, &out),
        Command::SysidCheck {
            scenario,
            out,
            cell,
            samples,
            seed,
        } => cmd_sysid_check(&scenario, &out, cell, samples, seed),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(io::Error::other)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn trajectory_csv(rows: &[TrajectoryRow], n: usize, m: usize) -> String {
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",x{i}");
    }
    for i in 1..=m {
        let _ = write!(out, ",u{i}");
    }
    out.push_str(",cell_id\n");
    for r in rows {
        let _ = write!(out, "{:.16e}", r.t);
        for v in r.x.iter().chain(&r.u) {
            let _ = write!(out, ",{v:.16e}");
        }
        let _ = writeln!(out, ",{}", r.cell);
    }
    out
}

pub fn cmd_plan(
    scenario_path: &Path,
    out: &Path,
    seed: Option<u64>,
    max_iters: Option<usize>,
) -> Result<i32, CliError> {
    let scenario = Scenario::load(scenario_path)?;
    let setup = scenario.setup()?;
    let mut cfg = MissionConfig::new(setup, seed.unwrap_or(scenario.sysid.seed));
    if let Some(k) = max_iters {
        if k == 0 {
            return Err(malformed("--max-iters", "must be positive"));
        }
        cfg.max_iterations = k;
    }
    let log = match run_mission(&cfg) {
        Ok(log) => log,
        Err(MissionError::Identification { cell, source }) => {
            return Err(CliError::Identification(format!("cell {cell}: {source}")))
        }
        Err(e) => return Err(CliError::Scenario(e.to_string())),
    };
    fs::create_dir_all(out)?;
    write_plan_outputs(&cfg, &log, out)?;
    Ok(log.status.exit_code())
}

pub fn write_plan_outputs(cfg: &MissionConfig, log: &MissionLog, out: &Path) -> io::Result<()> {
    let setup = &cfg.setup;
    let (n, m) = (setup.field.state_dim(), setup.field.input_dim());
    write_atomic(
        &out.join("trajectory.csv"),
        trajectory_csv(&log.trajectory, n, m).as_bytes(),
    )?;
    write_json(&out.join("graph_final.json"), &log.graph.to_snapshot())?;
    write_json(&out.join("mission.json"), log)?;
    let explored: Vec<usize> = log.models.keys().copied().collect();
    let style = FigureStyle {
        explored: &explored,
        start: Some(log.initial_cell),
        target: Some(log.target_cell),
    };
    let traj = [log.trajectory.as_slice()];
    write_atomic(
        &out.join("trajectory.svg"),
        render_svg(&setup.partition, None, &traj, &style).as_bytes(),
    )?;
    write_atomic(
        &out.join("graph.svg"),
        render_svg(&setup.partition, Some(&log.graph), &traj, &style).as_bytes(),
    )
}

pub fn cmd_truth_graph(scenario_path: &Path, out: &Path) -> Result<i32, CliError> {
    let scenario = Scenario::load(scenario_path)?;
    let setup = scenario.setup()?;
    let (graph, _) = ground_truth_graph(
        setup.field.as_ref(),
        &setup.partition,
        &setup.control_box,
        setup.gamma,
        setup.weight_mode,
    );
    fs::create_dir_all(out)?;
    write_json(&out.join("graph_truth.json"), &graph.to_snapshot())?;
    let all: Vec<usize> = (0..setup.partition.num_cells()).collect();
    let style = FigureStyle {
        explored: &all,
        start: None,
        target: None,
    };
    write_atomic(
        &out.join("truth.svg"),
        render_svg(&setup.partition, Some(&graph), &[], &style).as_bytes(),
    )?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelRows {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
}

impl ModelRows {
    fn of(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DVector<f64>) -> Self {
        Self {
            a: to_rows(a),
            b: to_rows(b),
            c: c.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SysidReport {
    pub cell: usize,
    pub start_state: Vec<f64>,
    pub linearization_point: Vec<f64>,
    pub mean_visited_state: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
    pub identified: ModelRows,
    pub analytic: ModelRows,
    pub error: ModelRows,
    pub max_entry_error: f64,
    pub residual_rms: f64,
    pub ridge_used: bool,
}

/// Identifies `cell` from its center and compares against the analytic
/// linearization at that center.
pub fn sysid_report(
    setup: &MissionSetup,
    cell: usize,
    samples: Option<usize>,
    seed: u64,
) -> Result<SysidReport, CliError> {
    let part = &setup.partition;
    let x0 = part
        .center(cell)
        .map_err(|_| malformed("--cell", format!("cell {cell} is out of range")))?;
    let mut cfg = setup.sysid.clone();
    cfg.seed = seed;
    if let Some(s) = samples {
        cfg.samples = s;
    }
    let field = setup.field.as_ref();
    let ident = identify(field, &x0, &setup.control_box, &cfg)
        .map_err(|e| CliError::Identification(e.to_string()))?;
    let model = &ident.model;
    let truth: AffineModel = linearize_at(field, &x0);
    Ok(SysidReport {
        cell,
        start_state: x0.iter().copied().collect(),
        linearization_point: x0.iter().copied().collect(),
        mean_visited_state: model.center.iter().copied().collect(),
        samples: cfg.samples,
        seed,
        identified: ModelRows::of(&model.a, &model.b, &model.c),
        analytic: ModelRows::of(&truth.a, &truth.b, &truth.c),
        error: ModelRows::of(
            &(&model.a - &truth.a).abs(),
            &(&model.b - &truth.b).abs(),
            &(&model.c - &truth.c).abs(),
        ),
        max_entry_error: model.max_entry_distance(&truth),
        residual_rms: ident.residual_rms,
        ridge_used: ident.ridge_used,
    })
}

pub fn cmd_sysid_check(
    scenario_path: &Path,
    out: &Path,
    cell: Option<usize>,
    samples: Option<usize>,
    seed: Option<u64>,
) -> Result<i32, CliError> {
    let scenario = Scenario::load(scenario_path)?;
    let setup = scenario.setup()?;
    let cell = match cell {
        Some(c) => c,
        None => setup
            .partition
            .locate(setup.partition.bounds().center().as_slice())
            .expect("domain center lies in the domain"),
    };
    let report = sysid_report(&setup, cell, samples, seed.unwrap_or(scenario.sysid.seed))?;
    fs::create_dir_all(out)?;
    write_json(&out.join("sysid_report.json"), &report)?;
    Ok(EXIT_OK)
}

pub struct FigureStyle<'a> {
    pub explored: &'a [usize],
    pub start: Option<usize>,
    pub target: Option<usize>,
}

const FIGURE_SIZE: f64 = 720.0;
const MARGIN: f64 = 20.0;

fn status_color(s: EdgeStatus) -> &'static str {
    match s {
        EdgeStatus::Exists => "#2e7d32",
        EdgeStatus::Absent => "#c62828",
        EdgeStatus::Uncertain => "#f9a825",
    }
}

/// SVG of a 2-D partition: one rectangle per cell, one arrow per edge of
/// `graph` (if given) and one path per trajectory.
pub fn render_svg(
    partition: &GridPartition,
    graph: Option<&ReachGraph>,
    trajectories: &[&[TrajectoryRow]],
    style: &FigureStyle<'_>,
) -> String {
    let b = partition.bounds();
    let (x0, y0) = (b.lo[0], b.lo.get(1).copied().unwrap_or(0.0));
    let w = b.hi[0] - b.lo[0];
    let h = b.hi.get(1).map_or(1.0, |hi| hi - y0);
    let scale = (FIGURE_SIZE - 2.0 * MARGIN) / w.max(h);
    let px = |x: f64| MARGIN + (x - x0) * scale;
    let py = |y: f64| MARGIN + (h - (y - y0)) * scale;
    let width = 2.0 * MARGIN + w * scale;
    let height = 2.0 * MARGIN + h * scale;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{width:.1}" height="{height:.1}" viewBox="0 0 {width:.1} {height:.1}">"#
    );
    s.push_str("<defs>\n");
    for st in [
        EdgeStatus::Exists,
        EdgeStatus::Absent,
        EdgeStatus::Uncertain,
    ] {
        let _ = writeln!(
            s,
            r#"<marker id="arrow-{st:?}" viewBox="0 0 10 10" refX="9" refY="5" markerWidth="4" markerHeight="4" orient="auto"><polygon points="0,0 10,5 0,10" fill="{}"/></marker>"#,
            status_color(st)
        );
    }
    s.push_str("</defs>\n<g id=\"cells\">\n");
    for id in 0..partition.num_cells() {
        let cell = partition.cell(id).expect("valid id");
        let bx = cell.as_box().expect("grid cells are boxes");
        let (lo1, hi1) = (
            bx.lo.get(1).copied().unwrap_or(0.0),
            bx.hi.get(1).copied().unwrap_or(1.0),
        );
        let fill = if Some(id) == style.target {
            "#ffe082"
        } else if Some(id) == style.start {
            "#b3e5fc"
        } else if style.explored.binary_search(&id).is_ok() {
            "#e3f2fd"
        } else {
            "#ffffff"
        };
        let _ = writeln!(
            s,
            r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{fill}" stroke="#9e9e9e" stroke-width="0.5"><title>cell {id}</title></rect>"##,
            px(bx.lo[0]),
            py(hi1),
            (bx.hi[0] - bx.lo[0]) * scale,
            (hi1 - lo1) * scale
        );
    }
    s.push_str("</g>\n");
    if let Some(g) = graph {
        s.push_str("<g id=\"edges\">\n");
        for (&(src, dst), rec) in g.edges() {
            let a = partition.center(src).expect("valid id");
            let c = partition.center(dst).expect("valid id");
            let (ax, ay) = (px(a[0]), py(a.get(1).copied().unwrap_or(0.0)));
            let (cx, cy) = (px(c[0]), py(c.get(1).copied().unwrap_or(0.0)));
            let (dx, dy) = (cx - ax, cy - ay);
            let len = (dx * dx + dy * dy).sqrt().max(1e-9);
            // Offset sideways so opposite edges do not overlap.
            let (ox, oy) = (-dy / len * 0.12 * len, dx / len * 0.12 * len);
            let _ = writeln!(
                s,
                r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="{}" stroke-width="{}" stroke-opacity="{}" marker-end="url(#arrow-{:?})"/>"#,
                ax + 0.2 * dx + ox,
                ay + 0.2 * dy + oy,
                ax + 0.8 * dx + ox,
                ay + 0.8 * dy + oy,
                status_color(rec.status),
                if rec.definitive { "1.4" } else { "0.8" },
                if rec.status == EdgeStatus::Uncertain {
                    "0.25"
                } else {
                    "1"
                },
                rec.status
            );
        }
        s.push_str("</g>\n");
    }
    for (k, traj) in trajectories.iter().enumerate() {
        let mut d = String::new();
        for (i, r) in traj.iter().enumerate() {
            let _ = write!(
                d,
                "{}{:.3},{:.3} ",
                if i == 0 { "M" } else { "L" },
                px(r.x[0]),
                py(r.x.get(1).copied().unwrap_or(0.0))
            );
        }
        if d.is_empty() {
            d.push_str("M0,0");
        }
        let _ = writeln!(
            s,
            r##"<path id="trajectory-{k}" d="{}" fill="none" stroke="#1565c0" stroke-width="1.5"/>"##,
            d.trim_end()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Counts of (exists, absent, uncertain) edges, keyed for reports.
pub fn status_summary(graph: &ReachGraph) -> BTreeMap<&'static str, usize> {
    let (e, a, u) = graph.status_counts();
    BTreeMap::from([("exists", e), ("absent", a), ("uncertain", u)])
}

/// Small JSON document describing a run, for log lines.
pub fn plan_summary(log: &MissionLog) -> serde_json::Value {
    json!({
        "status": log.status,
        "iterations": log.iterations,
        "explored": log.models.len(),
        "edges": status_summary(&log.graph),
    })
}
