use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pwa_nav::dynamics::{linearize_at, terrain_model, AffineModel, FeedbackLaw, Lipschitz};
use pwa_nav::geometry::{build_grid_partition, triangulate, AxisBox, Polytope};
use pwa_nav::graph::{
    ground_truth_graph, shortest_path, update_graph, EdgeRecord, EdgeStatus, ReachGraph, WeightMode,
};
use pwa_nav::lincon::{decide_feasibility, LinearConstraintSystem, TOL_STRICT};
use pwa_nav::reach::{
    decide_exit_facet, expanded_vertex_system, predict_exit_facet, robust_vertex_system,
    sign_patterns, synthesize_cell_controller, vertex_constraint_system, ModelDeviationBounds,
    ReachStatus,
};
use pwa_nav::sysid::{identify, IdentificationConfig, VelocityMode};

const TERRAIN_LIP: Lipschitz = Lipschitz {
    l_df: 0.03,
    l_g: 0.03,
};

fn unit_square() -> Polytope {
    Polytope::from_box(&AxisBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap()).unwrap()
}

fn random_model(rng: &mut ChaCha8Rng) -> AffineModel {
    AffineModel {
        a: DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..=1.0)),
        b: DMatrix::from_fn(2, 2, |_, _| rng.gen_range(-1.0..=1.0)),
        c: DVector::from_fn(2, |_, _| rng.gen_range(-1.0..=1.0)),
        center: DVector::from_vec(vec![0.5, 0.5]),
    }
}

/// Points satisfying every row, with strict rows judged at zero slack.
fn admits(sys: &LinearConstraintSystem, u: &[f64]) -> bool {
    sys.is_satisfied_by(u, 0.0)
}

#[test]
fn robust_nominal_expanded_are_nested_per_pattern() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cell = unit_square();
    let control_box = AxisBox::symmetric(2, 2.0);
    let mut robust_hits = 0usize;
    for _ in 0..100 {
        let model = random_model(&mut rng);
        let bounds = ModelDeviationBounds {
            eps_a: rng.gen_range(0.0..0.3),
            eps_b: rng.gen_range(0.0..0.3),
            eps_c: rng.gen_range(0.0..0.3),
        };
        let facet = rng.gen_range(0..4);
        let vertex = rng.gen_range(0..4);
        let nominal = vertex_constraint_system(&cell, facet, vertex, &model, &control_box);
        for pattern in sign_patterns(2) {
            let robust = robust_vertex_system(
                &cell,
                facet,
                vertex,
                &model,
                &bounds,
                &pattern,
                &control_box,
            );
            let expanded = expanded_vertex_system(
                &cell,
                facet,
                vertex,
                &model,
                &bounds,
                &pattern,
                &control_box,
            );
            for _ in 0..10_000 {
                let u = [rng.gen_range(-2.0..=2.0), rng.gen_range(-2.0..=2.0)];
                let in_orthant = (0..2).all(|k| (u[k] >= 0.0) == pattern.0[k] || u[k] == 0.0);
                if admits(&robust, &u) {
                    robust_hits += 1;
                    assert!(in_orthant, "robust point {u:?} outside its orthant");
                    assert!(admits(&nominal, &u), "robust point {u:?} not nominal");
                }
                if in_orthant && admits(&nominal, &u) {
                    assert!(admits(&expanded, &u), "nominal point {u:?} not expanded");
                }
            }
        }
    }
    assert!(robust_hits > 0, "no sample landed in a robust region");
}

fn arb_model() -> impl Strategy<Value = AffineModel> {
    (
        prop::collection::vec(-1.0f64..1.0, 4),
        prop::collection::vec(-1.0f64..1.0, 4),
        prop::collection::vec(-1.0f64..1.0, 2),
    )
        .prop_map(|(a, b, c)| AffineModel {
            a: DMatrix::from_row_slice(2, 2, &a),
            b: DMatrix::from_row_slice(2, 2, &b),
            c: DVector::from_vec(c),
            center: DVector::from_vec(vec![0.5, 0.5]),
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tighter_bounds_never_lose_a_verdict(
        model in arb_model(),
        eps in prop::collection::vec(0.0f64..0.4, 3),
        shrink in 0.0f64..1.0,
        facet in 0usize..4,
    ) {
        let cell = unit_square();
        let control_box = AxisBox::symmetric(2, 2.0);
        let wide = ModelDeviationBounds { eps_a: eps[0], eps_b: eps[1], eps_c: eps[2] };
        let narrow = ModelDeviationBounds {
            eps_a: eps[0] * shrink,
            eps_b: eps[1] * shrink,
            eps_c: eps[2] * shrink,
        };
        let w = predict_exit_facet(&cell, facet, &model, &wide, &control_box).status;
        let n = predict_exit_facet(&cell, facet, &model, &narrow, &control_box).status;
        if w != ReachStatus::Uncertain {
            prop_assert_eq!(w, n);
        }
    }

    #[test]
    fn located_cell_contains_the_point(
        x in prop::collection::vec(-10.0f64..=10.0, 2),
        nx in 1usize..8,
        ny in 1usize..8,
    ) {
        let p = build_grid_partition(&AxisBox::symmetric(2, 10.0), &[nx, ny]).unwrap();
        let id = p.locate(&x).unwrap();
        prop_assert!(p.cell(id).unwrap().contains(&DVector::from_vec(x), 1e-9));
    }

    #[test]
    fn kuhn_simplices_tile_the_box(
        lo in prop::collection::vec(-5.0f64..5.0, 3),
        w in prop::collection::vec(0.1f64..3.0, 3),
    ) {
        let hi: Vec<f64> = lo.iter().zip(&w).map(|(l, w)| l + w).collect();
        let cell = Polytope::from_box(&AxisBox::new(lo, hi).unwrap()).unwrap();
        let simplices = triangulate(&cell).unwrap();
        prop_assert_eq!(simplices.len(), 6);
        let total: f64 = simplices.iter().map(|s| s.measure(&cell)).sum();
        prop_assert!((total - cell.measure().unwrap()).abs() <= 1e-9 * total);
    }

    #[test]
    fn cell_controller_interpolates_and_is_continuous(
        inputs in prop::collection::vec(-3.0f64..3.0, 8),
        x in prop::collection::vec(0.0f64..=1.0, 2),
    ) {
        let cell = unit_square();
        let witnesses: Vec<DVector<f64>> =
            inputs.chunks(2).map(DVector::from_row_slice).collect();
        let ctrl = synthesize_cell_controller(&cell, &witnesses).unwrap();
        for (v, u) in cell.vertices().iter().zip(&witnesses) {
            prop_assert!((ctrl.input(v) - u).amax() < 1e-9);
        }
        // Every piece whose simplex contains x gives the same input.
        let x = DVector::from_vec(x);
        let here = ctrl.input(&x);
        for piece in ctrl.pieces() {
            if piece.simplex.contains(&cell, &x, 1e-12) {
                prop_assert!((piece.eval(&x) - &here).amax() < 1e-9);
            }
        }
    }

    #[test]
    fn feasible_witness_has_the_reported_margin(model in arb_model(), facet in 0usize..4, vertex in 0usize..4) {
        let cell = unit_square();
        let sys = vertex_constraint_system(&cell, facet, vertex, &model, &AxisBox::symmetric(2, 2.0));
        let r = decide_feasibility(&sys);
        if let Some(u) = &r.witness {
            prop_assert!(r.margin > TOL_STRICT);
            prop_assert!(sys.is_satisfied_by(u, 0.5 * r.margin.min(1.0)));
        }
    }

    #[test]
    fn returned_path_is_searchable_and_costed(
        edges in prop::collection::vec((0usize..6, 0usize..6, 0u8..3, 0.1f64..5.0), 0..30),
        src in 0usize..6,
        dst in 0usize..6,
    ) {
        let mut g = ReachGraph::with_nodes(6, 100.0, WeightMode::Constant);
        for (a, b, s, w) in edges {
            if a == b {
                continue;
            }
            let status = [EdgeStatus::Exists, EdgeStatus::Absent, EdgeStatus::Uncertain][s as usize];
            g.set_edge(a, b, EdgeRecord {
                status,
                weight: w,
                definitive: false,
                witnesses: None,
                reference: None,
                overridden: false,
            });
        }
        if let Some(p) = shortest_path(&g, src, dst) {
            prop_assert_eq!(p.nodes.first(), Some(&src));
            prop_assert_eq!(p.nodes.last(), Some(&dst));
            let mut cost = 0.0;
            for e in p.nodes.windows(2) {
                let r = g.edge(e[0], e[1]).unwrap();
                prop_assert!(r.status != EdgeStatus::Absent);
                cost += r.weight;
            }
            prop_assert!((cost - p.cost).abs() < 1e-9);
        }
    }
}

/// Brute-force vertex feasibility: sample `u` on a grid of step 0.05 over
/// the control box with strict rows required to hold with positive slack.
fn sampled_feasible(sys: &LinearConstraintSystem) -> bool {
    let steps = 200;
    (0..=steps).any(|i| {
        (0..=steps).any(|j| {
            let u = [-5.0 + 0.05 * i as f64, -5.0 + 0.05 * j as f64];
            admits(sys, &u)
        })
    })
}

#[test]
fn terrain_decisions_match_input_sampling() {
    let field = terrain_model();
    let partition = build_grid_partition(&AxisBox::symmetric(2, 10.0), &[20, 20]).unwrap();
    let control_box = AxisBox::symmetric(2, 5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut exists = 0;
    for _ in 0..20 {
        let id = rng.gen_range(0..partition.num_cells());
        let cell = partition.cell(id).unwrap();
        let model = linearize_at(&field, &partition.center(id).unwrap());
        for facet in 0..cell.num_facets() {
            let sampled = (0..cell.num_vertices()).all(|j| {
                sampled_feasible(&vertex_constraint_system(
                    cell,
                    facet,
                    j,
                    &model,
                    &control_box,
                ))
            });
            let decided = decide_exit_facet(cell, facet, &model, &control_box).status;
            assert_eq!(
                decided == ReachStatus::Exists,
                sampled,
                "cell {id} facet {facet}"
            );
            exists += sampled as usize;
        }
    }
    assert!(exists > 0);
}

#[test]
fn terrain_predictions_agree_with_the_ground_truth() {
    let field = terrain_model();
    let partition = build_grid_partition(&AxisBox::symmetric(2, 10.0), &[20, 20]).unwrap();
    let control_box = AxisBox::symmetric(2, 5.0);
    let (truth, models) = ground_truth_graph(
        &field,
        &partition,
        &control_box,
        100.0,
        WeightMode::Constant,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut graph = ReachGraph::new(&partition, 100.0, WeightMode::Constant);
    let mut explored = BTreeMap::new();
    let (mut checked, mut violations) = (0usize, 0usize);
    for _ in 0..12 {
        let id = rng.gen_range(0..partition.num_cells());
        explored.insert(id, models[&id].clone());
        let before: Vec<((usize, usize), EdgeRecord)> = graph
            .edges()
            .iter()
            .filter(|(_, r)| r.definitive)
            .map(|(k, r)| (*k, r.clone()))
            .collect();
        update_graph(&mut graph, &partition, &explored, TERRAIN_LIP, &control_box);
        for (key, rec) in before {
            assert_eq!(graph.edges()[&key], rec, "definitive edge {key:?} changed");
        }
        for (&(src, dst), rec) in graph.edges() {
            let actual = truth.edge(src, dst).unwrap().status;
            if rec.definitive {
                assert_eq!(rec.status, actual, "definitive edge ({src}, {dst})");
            } else if rec.status != EdgeStatus::Uncertain {
                checked += 1;
                if rec.status != actual {
                    violations += 1;
                }
            }
        }
    }
    assert_eq!(violations, 0, "{violations} of {checked} predictions wrong");
    assert!(checked > 0);
}

#[test]
fn terrain_identification_is_accurate_along_the_excited_direction() {
    // The state moves mostly along the drift, so A is only pinned down along
    // the principal direction of the visited states; B and A·d are checked.
    let field = terrain_model();
    let control_box = AxisBox::symmetric(2, 5.0);
    for seed in 0..10 {
        let x0 = DVector::from_vec(vec![0.5, 0.5]);
        let cfg = IdentificationConfig {
            samples: 100,
            time_step: 1e-3,
            input_scale: 0.5,
            velocity_mode: VelocityMode::Oracle,
            seed,
        };
        let id = identify(&field, &x0, &control_box, &cfg).unwrap();
        let lin = linearize_at(&field, &x0);
        let k = id.steps.len();
        let mean = id.model.center.clone();
        let spread = DMatrix::from_fn(2, k, |r, c| id.steps[c].x[r] - mean[r]);
        let svd = spread.svd(true, false);
        let (i, _) = svd.singular_values.argmax();
        let d = svd.u.unwrap().column(i).into_owned();
        let a_err = ((&id.model.a - &lin.a) * &d).amax();
        let b_err = (&id.model.b - &lin.b).amax();
        assert!(
            a_err <= 0.02,
            "seed {seed}: A along excited direction off by {a_err}"
        );
        assert!(b_err <= 0.02, "seed {seed}: B off by {b_err}");
    }
}
