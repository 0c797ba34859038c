use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pwa_nav::graph::{EdgeStatus, GraphSnapshot, ReachGraph};

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwa-nav"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_in(sub: &str, scenario: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        sub,
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    run(&args)
}

/// Terrain scenario text with `edit` applied, written next to the outputs.
fn edited_terrain(dir: &Path, edit: impl Fn(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(scenario("terrain.json")).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join("scenario.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn csv_rows(path: &Path) -> (String, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn snapshot(path: &Path) -> GraphSnapshot {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn count_elements(svg: &str, tag: &str) -> usize {
    let doc = roxmltree::Document::parse(svg).expect("well-formed SVG");
    doc.descendants()
        .filter(|n| n.tag_name().name() == tag)
        .count()
}

#[test]
fn plan_on_terrain_writes_every_output() {
    let out = tempfile::tempdir().unwrap();
    let o = run_in("plan", &scenario("terrain.json"), out.path(), &[]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    for f in [
        "trajectory.csv",
        "graph_final.json",
        "mission.json",
        "trajectory.svg",
        "graph.svg",
    ] {
        assert!(out.path().join(f).is_file(), "{f} missing");
    }

    let (header, rows) = csv_rows(&out.path().join("trajectory.csv"));
    assert_eq!(header, "t,x1,x2,u1,u2,cell_id");
    let times: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert!(times.windows(2).all(|w| w[1] > w[0]), "time not increasing");

    // Reloading and re-serialising the graph reproduces the file.
    let text = fs::read_to_string(out.path().join("graph_final.json")).unwrap();
    let graph = ReachGraph::from_snapshot(serde_json::from_str(&text).unwrap());
    let mut again = serde_json::to_string_pretty(&graph.to_snapshot()).unwrap();
    again.push('\n');
    assert_eq!(again, text);

    let graph_svg = fs::read_to_string(out.path().join("graph.svg")).unwrap();
    assert_eq!(count_elements(&graph_svg, "rect"), 400);
    assert_eq!(count_elements(&graph_svg, "path"), 1);
    assert_eq!(count_elements(&graph_svg, "line"), graph.edges().len());
    let traj_svg = fs::read_to_string(out.path().join("trajectory.svg")).unwrap();
    assert_eq!(count_elements(&traj_svg, "rect"), 400);
    assert_eq!(count_elements(&traj_svg, "path"), 1);
}

#[test]
fn target_equal_to_start_gives_a_single_row() {
    let out = tempfile::tempdir().unwrap();
    let path = edited_terrain(out.path(), |v| {
        v["target"] = serde_json::json!({ "state": v["initial_state"].clone() });
    });
    let o = run_in("plan", &path, out.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    let (_, rows) = csv_rows(&out.path().join("trajectory.csv"));
    assert_eq!(rows.len(), 1);
}

#[test]
fn start_outside_the_domain_is_malformed() {
    let out = tempfile::tempdir().unwrap();
    let path = edited_terrain(out.path(), |v| {
        v["initial_state"] = serde_json::json!([11.0, 0.0]);
    });
    let o = run_in("plan", &path, out.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("initial_state"));
}

#[test]
fn unknown_scenario_key_is_malformed() {
    let out = tempfile::tempdir().unwrap();
    let path = edited_terrain(out.path(), |v| {
        v["gama"] = serde_json::json!(1.0);
    });
    let o = run_in("plan", &path, out.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unactuated_plan_is_stuck() {
    let out = tempfile::tempdir().unwrap();
    let o = run_in("plan", &scenario("unactuated.json"), out.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_iteration_hits_the_cap() {
    let out = tempfile::tempdir().unwrap();
    let o = run_in(
        "plan",
        &scenario("terrain.json"),
        out.path(),
        &["--max-iters", "1"],
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn integrator_plan_succeeds() {
    let out = tempfile::tempdir().unwrap();
    let o = run_in("plan", &scenario("integrator.json"), out.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
}

fn truth(name: &str) -> GraphSnapshot {
    let out = tempfile::tempdir().unwrap();
    let o = run_in("truth-graph", &scenario(name), out.path(), &[]);
    assert_eq!(o.status.code(), Some(0));
    let svg = fs::read_to_string(out.path().join("truth.svg")).unwrap();
    roxmltree::Document::parse(&svg).expect("well-formed SVG");
    snapshot(&out.path().join("graph_truth.json"))
}

#[test]
fn truth_graphs_of_affine_fields() {
    let integrator = truth("integrator.json");
    assert!(!integrator.edges.is_empty());
    assert!(integrator
        .edges
        .iter()
        .all(|e| e.record.status == EdgeStatus::Exists));
    let frozen = truth("unactuated.json");
    assert!(frozen
        .edges
        .iter()
        .all(|e| e.record.status == EdgeStatus::Absent));
}

#[test]
fn terrain_truth_graph_is_fully_definitive() {
    let g = truth("terrain.json");
    assert_eq!(g.nodes.len(), 400);
    // 2 * (19 * 20) horizontal plus as many vertical adjacencies.
    assert_eq!(g.edges.len(), 1520);
    assert!(g.edges.iter().all(|e| e.record.definitive));
}

fn sysid_error(name: &str, extra: &[&str]) -> (Option<i32>, Option<f64>) {
    let out = tempfile::tempdir().unwrap();
    let o = run_in("sysid-check", &scenario(name), out.path(), extra);
    let report = fs::read_to_string(out.path().join("sysid_report.json"))
        .ok()
        .map(|t| serde_json::from_str::<serde_json::Value>(&t).unwrap());
    (
        o.status.code(),
        report.and_then(|r| r["max_entry_error"].as_f64()),
    )
}

#[test]
fn sysid_check_reports() {
    let (code, err) = sysid_error("integrator.json", &[]);
    assert_eq!(code, Some(0));
    assert!(err.unwrap() <= 1e-8);
    let (code, err) = sysid_error("terrain.json", &[]);
    assert_eq!(code, Some(0));
    assert!(err.unwrap() <= 0.1, "terrain error {err:?}");
    let (code, _) = sysid_error("terrain.json", &["--samples", "4"]);
    assert_eq!(code, Some(4));
}
