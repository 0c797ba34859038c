//! The tri-state reachability graph over partition cells.
//!
//! Edges out of identified cells are decided definitively and frozen. Edges
//! out of unexplored cells are predicted from the nearest identified cell's
//! model and the deviation bounds between the two cell centers; predictions
//! that are neither certified nor refuted stay `Uncertain` and receive an
//! exploration weight.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::dynamics::{linearize_at, AffineModel, ControlAffineField, Lipschitz};
use crate::geometry::{AxisBox, GridPartition};
use crate::reach::{
    decide_exit_facet, deviation_bounds, predict_exit_facet, t0_upper_bound, AlphaMode,
    ReachDecision, ReachStatus,
};

pub use crate::reach::ReachStatus as EdgeStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Weight 1 for every edge whose existence is known.
    Constant,
    /// Worst-case transit-time bound.
    T0Bound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub status: EdgeStatus,
    pub weight: f64,
    pub definitive: bool,
    /// Per-vertex inputs of the source cell certifying an `Exists` status.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witnesses: Option<Vec<Vec<f64>>>,
    /// Explored cell whose model anchored a predictive status.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<usize>,
    /// Set when the planner excluded the edge after repeated failed transits.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub overridden: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub center: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    #[serde(flatten)]
    pub record: EdgeRecord,
}

/// On-disk form of a [`ReachGraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSnapshot {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub gamma: f64,
    pub weight_mode: WeightMode,
    pub mean_known_weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReachGraph {
    nodes: Vec<GraphNode>,
    edges: BTreeMap<(usize, usize), EdgeRecord>,
    gamma: f64,
    weight_mode: WeightMode,
    mean_known_weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct UpdateSummary {
    pub newly_definitive: usize,
    pub repredicted: usize,
    pub exists: usize,
    pub absent: usize,
    pub uncertain: usize,
}

impl ReachGraph {
    /// Graph with one node per cell and an `Uncertain` edge per adjacent pair.
    pub fn new(partition: &GridPartition, gamma: f64, weight_mode: WeightMode) -> Self {
        let nodes = (0..partition.num_cells())
            .map(|id| GraphNode {
                id,
                center: partition
                    .center(id)
                    .expect("valid id")
                    .iter()
                    .copied()
                    .collect(),
            })
            .collect();
        let mut edges = BTreeMap::new();
        for src in 0..partition.num_cells() {
            for &(_, dst) in partition.neighbors(src).expect("valid id") {
                edges.insert(
                    (src, dst),
                    EdgeRecord {
                        status: EdgeStatus::Uncertain,
                        weight: gamma,
                        definitive: false,
                        witnesses: None,
                        reference: None,
                        overridden: false,
                    },
                );
            }
        }
        Self {
            nodes,
            edges,
            gamma,
            weight_mode,
            mean_known_weight: 1.0,
        }
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &BTreeMap<(usize, usize), EdgeRecord> {
        &self.edges
    }

    pub fn edge(&self, src: usize, dst: usize) -> Option<&EdgeRecord> {
        self.edges.get(&(src, dst))
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn weight_mode(&self) -> WeightMode {
        self.weight_mode
    }

    pub fn mean_known_weight(&self) -> f64 {
        self.mean_known_weight
    }

    /// Inserts or replaces an edge; intended for building graphs by hand.
    pub fn set_edge(&mut self, src: usize, dst: usize, record: EdgeRecord) {
        self.edges.insert((src, dst), record);
    }

    /// Builds a bare graph over `n` nodes (centers at the origin).
    pub fn with_nodes(n: usize, gamma: f64, weight_mode: WeightMode) -> Self {
        Self {
            nodes: (0..n)
                .map(|id| GraphNode {
                    id,
                    center: Vec::new(),
                })
                .collect(),
            edges: BTreeMap::new(),
            gamma,
            weight_mode,
            mean_known_weight: 1.0,
        }
    }

    pub fn status_counts(&self) -> (usize, usize, usize) {
        self.edges
            .values()
            .fold((0, 0, 0), |(e, a, u), r| match r.status {
                EdgeStatus::Exists => (e + 1, a, u),
                EdgeStatus::Absent => (e, a + 1, u),
                EdgeStatus::Uncertain => (e, a, u + 1),
            })
    }

    /// Marks an edge definitively absent after transits kept failing on it.
    pub fn override_absent(&mut self, src: usize, dst: usize) {
        if let Some(r) = self.edges.get_mut(&(src, dst)) {
            r.status = EdgeStatus::Absent;
            r.weight = 0.0;
            r.definitive = true;
            r.witnesses = None;
            r.overridden = true;
        }
    }

    pub fn to_snapshot(&self) -> GraphSnapshot {
        GraphSnapshot {
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .map(|(&(src, dst), r)| GraphEdge {
                    src,
                    dst,
                    record: r.clone(),
                })
                .collect(),
            gamma: self.gamma,
            weight_mode: self.weight_mode,
            mean_known_weight: self.mean_known_weight,
        }
    }

    pub fn from_snapshot(s: GraphSnapshot) -> Self {
        Self {
            nodes: s.nodes,
            edges: s
                .edges
                .into_iter()
                .map(|e| ((e.src, e.dst), e.record))
                .collect(),
            gamma: s.gamma,
            weight_mode: s.weight_mode,
            mean_known_weight: s.mean_known_weight,
        }
    }
}

/// Exploration weight `γ w̄ (Σ_i 1/d_i) / #explored` of an uncertain edge into
/// `dst`, with center distances floored at half the cell diameter.
pub fn uncertain_weight(
    dst: usize,
    explored: &[usize],
    mean_known_weight: f64,
    gamma: f64,
    partition: &GridPartition,
) -> f64 {
    assert!(
        !explored.is_empty(),
        "uncertain weights need an explored cell"
    );
    let target = partition.center(dst).expect("valid id");
    let d_floor = 0.5 * partition.cell(dst).expect("valid id").diameter();
    let inv_sum: f64 = explored
        .iter()
        .map(|&e| {
            let d = (partition.center(e).expect("valid id") - &target).norm();
            1.0 / d.max(d_floor)
        })
        .sum();
    gamma * mean_known_weight * inv_sum / explored.len() as f64
}

fn known_weight(
    mode: WeightMode,
    partition: &GridPartition,
    src: usize,
    facet: usize,
    model: &AffineModel,
    decision: &ReachDecision,
) -> f64 {
    match mode {
        WeightMode::Constant => 1.0,
        WeightMode::T0Bound => {
            let cell = partition.cell(src).expect("valid id");
            let w = decision
                .witnesses
                .as_ref()
                .expect("exists carries witnesses");
            t0_upper_bound(cell, facet, model, w, &AlphaMode::WorstCase).unwrap_or(f64::MAX)
        }
    }
}

fn record_from(
    decision: ReachDecision,
    weight: f64,
    definitive: bool,
    reference: Option<usize>,
) -> EdgeRecord {
    let status = decision.status;
    EdgeRecord {
        status,
        weight: if status == EdgeStatus::Absent {
            0.0
        } else {
            weight
        },
        definitive,
        witnesses: decision
            .witnesses
            .map(|w| w.iter().map(|u| u.iter().copied().collect()).collect()),
        reference,
        overridden: false,
    }
}

/// Nearest explored cell by center distance (lowest id on ties).
pub fn nearest_explored(
    partition: &GridPartition,
    cell: usize,
    explored: &BTreeMap<usize, AffineModel>,
) -> usize {
    let c = partition.center(cell).expect("valid id");
    let mut best = (usize::MAX, f64::INFINITY);
    for &e in explored.keys() {
        let d = (partition.center(e).expect("valid id") - &c).norm();
        if d < best.1 {
            best = (e, d);
        }
    }
    best.0
}

/// Refreshes every edge from the identified models.
///
/// Definitive edges are never touched again. Predictive edges are recomputed
/// only when their anchoring reference cell changes.
pub fn update_graph(
    graph: &mut ReachGraph,
    partition: &GridPartition,
    explored_models: &BTreeMap<usize, AffineModel>,
    lipschitz: Lipschitz,
    control_box: &AxisBox,
) -> UpdateSummary {
    assert!(
        !explored_models.is_empty(),
        "update_graph needs an identified cell"
    );
    let mut summary = UpdateSummary::default();
    let mode = graph.weight_mode;
    for src in 0..partition.num_cells() {
        let cell = partition.cell(src).expect("valid id");
        let neighbors = partition.neighbors(src).expect("valid id");
        if let Some(model) = explored_models.get(&src) {
            for &(facet, dst) in neighbors {
                let rec = graph
                    .edges
                    .get_mut(&(src, dst))
                    .expect("edge per adjacency");
                if rec.definitive {
                    continue;
                }
                let decision = decide_exit_facet(cell, facet, model, control_box);
                let w = if decision.status == ReachStatus::Exists {
                    known_weight(mode, partition, src, facet, model, &decision)
                } else {
                    0.0
                };
                *rec = record_from(decision, w, true, None);
                summary.newly_definitive += 1;
            }
        } else {
            let reference = nearest_explored(partition, src, explored_models);
            let ref_model = &explored_models[&reference];
            let x1 = partition.center(reference).expect("valid id");
            let x2 = partition.center(src).expect("valid id");
            let bounds = deviation_bounds(ref_model, &x1, &x2, lipschitz);
            for &(facet, dst) in neighbors {
                let rec = graph
                    .edges
                    .get_mut(&(src, dst))
                    .expect("edge per adjacency");
                if rec.definitive || rec.reference == Some(reference) {
                    continue;
                }
                let decision = predict_exit_facet(cell, facet, ref_model, &bounds, control_box);
                let w = if decision.status == ReachStatus::Exists {
                    known_weight(mode, partition, src, facet, ref_model, &decision)
                } else {
                    0.0
                };
                *rec = record_from(decision, w, false, Some(reference));
                summary.repredicted += 1;
            }
        }
    }

    let known: Vec<f64> = graph
        .edges
        .values()
        .filter(|r| r.definitive && r.status == EdgeStatus::Exists)
        .map(|r| r.weight)
        .collect();
    graph.mean_known_weight = if known.is_empty() {
        1.0
    } else {
        known.iter().sum::<f64>() / known.len() as f64
    };

    let explored: Vec<usize> = explored_models.keys().copied().collect();
    let (gamma, w_bar) = (graph.gamma, graph.mean_known_weight);
    for (&(src, dst), rec) in graph.edges.iter_mut() {
        if rec.status == EdgeStatus::Uncertain {
            debug_assert!(
                !explored_models.contains_key(&src),
                "explored edges are definitive"
            );
            rec.weight = uncertain_weight(dst, &explored, w_bar, gamma, partition);
        }
    }
    let (e, a, u) = graph.status_counts();
    summary.exists = e;
    summary.absent = a;
    summary.uncertain = u;
    summary
}

/// Graph with every cell "explored" by the analytic linearization at its
/// center, so that every edge is definitive.
pub fn ground_truth_graph(
    field: &dyn ControlAffineField,
    partition: &GridPartition,
    control_box: &AxisBox,
    gamma: f64,
    weight_mode: WeightMode,
) -> (ReachGraph, BTreeMap<usize, AffineModel>) {
    let models: BTreeMap<usize, AffineModel> = (0..partition.num_cells())
        .map(|id| {
            (
                id,
                linearize_at(field, &partition.center(id).expect("valid id")),
            )
        })
        .collect();
    let mut graph = ReachGraph::new(partition, gamma, weight_mode);
    update_graph(
        &mut graph,
        partition,
        &models,
        field.lipschitz(),
        control_box,
    );
    (graph, models)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphPath {
    pub nodes: Vec<usize>,
    pub cost: f64,
}

#[derive(PartialEq)]
struct QueueEntry(f64, usize);

impl Eq for QueueEntry {}

impl Ord for QueueEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on distance, then on node id.
        other
            .0
            .total_cmp(&self.0)
            .then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn searchable(r: &EdgeRecord) -> bool {
    matches!(r.status, EdgeStatus::Exists | EdgeStatus::Uncertain)
}

/// Minimum-weight path over `Exists` and `Uncertain` edges. Among equally
/// short paths the lexicographically smallest node sequence is returned.
pub fn shortest_path(graph: &ReachGraph, src: usize, dst: usize) -> Option<GraphPath> {
    let n = graph.num_nodes();
    if src >= n || dst >= n {
        return None;
    }
    if src == dst {
        return Some(GraphPath {
            nodes: vec![src],
            cost: 0.0,
        });
    }
    // Distances to `dst` over reversed edges.
    let mut incoming: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut outgoing: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (&(a, b), r) in &graph.edges {
        if searchable(r) {
            incoming[b].push((a, r.weight));
            outgoing[a].push((b, r.weight));
        }
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut heap = BinaryHeap::new();
    dist[dst] = 0.0;
    heap.push(QueueEntry(0.0, dst));
    while let Some(QueueEntry(d, v)) = heap.pop() {
        if d > dist[v] {
            continue;
        }
        for &(u, w) in &incoming[v] {
            let nd = d + w;
            if nd < dist[u] {
                dist[u] = nd;
                heap.push(QueueEntry(nd, u));
            }
        }
    }
    if !dist[src].is_finite() {
        return None;
    }
    // Walk forward choosing the smallest successor on some shortest path.
    let mut nodes = vec![src];
    let mut cur = src;
    let mut cost = 0.0;
    while cur != dst {
        let tol = 1e-9 * dist[cur].max(1.0);
        let &(next, w) = outgoing[cur]
            .iter()
            .filter(|&&(v, w)| (w + dist[v] - dist[cur]).abs() <= tol)
            .min_by_key(|&&(v, _)| v)?;
        cost += w;
        nodes.push(next);
        cur = next;
        if nodes.len() > n {
            return None;
        }
    }
    Some(GraphPath { nodes, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_grid_partition;
    use nalgebra::{DMatrix, DVector};

    fn rec(status: EdgeStatus, weight: f64) -> EdgeRecord {
        EdgeRecord {
            status,
            weight,
            definitive: status != EdgeStatus::Uncertain,
            witnesses: None,
            reference: None,
            overridden: false,
        }
    }

    #[test]
    fn uncertain_weight_examples() {
        let g = build_grid_partition(
            &AxisBox::new(vec![0.0, 0.0], vec![5.0, 1.0]).unwrap(),
            &[5, 1],
        )
        .unwrap();
        assert!((uncertain_weight(2, &[0], 1.0, 100.0, &g) - 50.0).abs() < 1e-12);
        assert!((uncertain_weight(2, &[1, 3], 1.0, 100.0, &g) - 100.0).abs() < 1e-12);
        // Distances below half the diagonal are floored.
        let floor = 0.5 * 2f64.sqrt();
        assert!((uncertain_weight(2, &[2], 1.0, 100.0, &g) - 100.0 / floor).abs() < 1e-9);
    }

    #[test]
    fn uncertain_weight_scales_inversely_with_distance() {
        let g1 = build_grid_partition(
            &AxisBox::new(vec![0.0, 0.0], vec![8.0, 1.0]).unwrap(),
            &[8, 1],
        )
        .unwrap();
        let g2 = build_grid_partition(
            &AxisBox::new(vec![0.0, 0.0], vec![16.0, 2.0]).unwrap(),
            &[8, 1],
        )
        .unwrap();
        let w1 = uncertain_weight(7, &[0, 2], 1.0, 100.0, &g1);
        let w2 = uncertain_weight(7, &[0, 2], 1.0, 100.0, &g2);
        assert!((w1 - 2.0 * w2).abs() < 1e-12);
    }

    #[test]
    fn two_node_path() {
        let mut g = ReachGraph::with_nodes(2, 100.0, WeightMode::Constant);
        g.set_edge(0, 1, rec(EdgeStatus::Exists, 1.0));
        let p = shortest_path(&g, 0, 1).unwrap();
        assert_eq!(p.nodes, vec![0, 1]);
        assert_eq!(p.cost, 1.0);
    }

    #[test]
    fn absent_edges_block() {
        let mut g = ReachGraph::with_nodes(3, 100.0, WeightMode::Constant);
        g.set_edge(0, 1, rec(EdgeStatus::Absent, 0.0));
        g.set_edge(1, 2, rec(EdgeStatus::Absent, 0.0));
        assert!(shortest_path(&g, 0, 2).is_none());
    }

    #[test]
    fn ties_break_lexicographically() {
        let mut g = ReachGraph::with_nodes(4, 100.0, WeightMode::Constant);
        for (a, b) in [(0, 2), (2, 3), (0, 1), (1, 3)] {
            g.set_edge(a, b, rec(EdgeStatus::Exists, 1.0));
        }
        assert_eq!(shortest_path(&g, 0, 3).unwrap().nodes, vec![0, 1, 3]);
    }

    fn integrator_model(center: DVector<f64>) -> AffineModel {
        AffineModel {
            a: DMatrix::zeros(2, 2),
            b: DMatrix::identity(2, 2),
            c: DVector::zeros(2),
            center,
        }
    }

    #[test]
    fn explored_edges_definitive_and_reverse_predicted() {
        let part = build_grid_partition(
            &AxisBox::new(vec![0.0, 0.0], vec![2.0, 1.0]).unwrap(),
            &[2, 1],
        )
        .unwrap();
        let ubox = AxisBox::symmetric(2, 5.0);
        let lip = Lipschitz {
            l_df: 0.03,
            l_g: 0.03,
        };
        let mut g = ReachGraph::new(&part, 100.0, WeightMode::Constant);
        let mut models = BTreeMap::new();
        models.insert(0, integrator_model(part.center(0).unwrap()));
        update_graph(&mut g, &part, &models, lip, &ubox);
        let fwd = g.edge(0, 1).unwrap();
        assert!(fwd.definitive);
        assert_eq!(fwd.status, EdgeStatus::Exists);
        assert_eq!(fwd.weight, 1.0);
        let back = g.edge(1, 0).unwrap();
        assert!(!back.definitive);
        let bounds = deviation_bounds(
            &models[&0],
            &part.center(0).unwrap(),
            &part.center(1).unwrap(),
            lip,
        );
        let facet = part.common_facet(1, 0).unwrap().unwrap();
        let standalone =
            predict_exit_facet(part.cell(1).unwrap(), facet, &models[&0], &bounds, &ubox);
        assert_eq!(back.status, standalone.status);

        let before = g.clone();
        update_graph(&mut g, &part, &models, lip, &ubox);
        assert_eq!(g, before);
    }

    #[test]
    fn snapshot_round_trip() {
        let part = build_grid_partition(
            &AxisBox::new(vec![0.0, 0.0], vec![3.0, 3.0]).unwrap(),
            &[3, 3],
        )
        .unwrap();
        let mut g = ReachGraph::new(&part, 100.0, WeightMode::T0Bound);
        let mut models = BTreeMap::new();
        models.insert(4, integrator_model(part.center(4).unwrap()));
        update_graph(
            &mut g,
            &part,
            &models,
            Lipschitz {
                l_df: 0.03,
                l_g: 0.03,
            },
            &AxisBox::symmetric(2, 5.0),
        );
        g.override_absent(4, 5);
        let json = serde_json::to_string(&g.to_snapshot()).unwrap();
        let back = ReachGraph::from_snapshot(serde_json::from_str(&json).unwrap());
        assert_eq!(back, g);
    }
}
