use machplan::geometry::synth::build_meshes;
use machplan::geometry::{Family, FeatureKind, FeatureSpec, PartSpec, TriMesh};
use machplan::graph::{design_to_graph, stl_to_graph};
use proptest::prelude::*;

fn part(l: f64, w: f64, pocket: [f64; 2], hole_d: f64) -> PartSpec {
    PartSpec {
        family: Family::Simple,
        stock_dims: [l, w, 20.0],
        features: vec![
            FeatureSpec::new(FeatureKind::RectPocket, [l * 0.3, w * 0.5], pocket.to_vec(), 5.0),
            FeatureSpec::new(FeatureKind::CircHole, [l * 0.75, w * 0.5], vec![hole_d], 12.0),
        ],
    }
}

fn final_mesh(spec: &PartSpec) -> TriMesh {
    build_meshes(spec, 16).unwrap().pop().unwrap()
}

fn parts() -> impl Strategy<Value = PartSpec> {
    (80.0..120.0f64, 50.0..70.0f64, 8.0..15.0f64, 8.0..20.0f64, 3.0..9.0f64)
        .prop_map(|(l, w, px, py, d)| part(l, w, [px, py], d))
}

const CENTROID: std::ops::Range<usize> = 0..3;
const EDGE_MID: std::ops::Range<usize> = 3..6;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn directed_edges_are_three_per_face_and_symmetric(spec in parts()) {
        let g = stl_to_graph(&final_mesh(&spec), 1).unwrap().graph;
        prop_assert_eq!(g.edge_count(), 3 * g.node_count());
        for k in (0..g.edge_count()).step_by(2) {
            let [a, b] = g.edge_index[k];
            prop_assert_eq!(g.edge_index[k + 1], [b, a]);
            prop_assert_eq!(g.edge_features.row(k), g.edge_features.row(k + 1));
        }
        let mut deg = vec![0; g.node_count()];
        for [s, _] in &g.edge_index {
            deg[*s] += 1;
        }
        prop_assert!(deg.iter().all(|&d| d == 3));
    }

    #[test]
    fn translation_moves_only_positions(spec in parts(), d in prop::array::uniform3(-50.0..50.0f64)) {
        let m = final_mesh(&spec);
        let moved = m.map_vertices(|v| [v[0] + d[0], v[1] + d[1], v[2] + d[2]]);
        let (g, h) = (stl_to_graph(&m, 1).unwrap().graph, stl_to_graph(&moved, 1).unwrap().graph);
        for i in 0..g.node_count() {
            let (a, b) = (g.node_features.row(i), h.node_features.row(i));
            for c in 0..16 {
                let expect = if CENTROID.contains(&c) { a[c] + d[c] } else { a[c] };
                prop_assert!((b[c] - expect).abs() < 1e-9, "node col {} {} vs {}", c, b[c], expect);
            }
        }
        for k in 0..g.edge_count() {
            let (a, b) = (g.edge_features.row(k), h.edge_features.row(k));
            for c in 0..7 {
                let expect = if EDGE_MID.contains(&c) { a[c] + d[c - 3] } else { a[c] };
                prop_assert!((b[c] - expect).abs() < 1e-9, "edge col {}", c);
            }
        }
    }

    #[test]
    fn uniform_scaling(spec in parts(), s in 0.1..10.0f64) {
        let m = final_mesh(&spec);
        let scaled = m.map_vertices(|v| [v[0] * s, v[1] * s, v[2] * s]);
        let (g, h) = (stl_to_graph(&m, 1).unwrap().graph, stl_to_graph(&scaled, 1).unwrap().graph);
        let node_factor = |c: usize| match c {
            0..=2 | 7 | 8 => s,
            6 => s * s,
            _ => 1.0,
        };
        let edge_factor = |c: usize| if c == 1 || c == 6 { 1.0 } else { s };
        for i in 0..g.node_count() {
            for c in 0..16 {
                let (x, y) = (g.node_features.row(i)[c] * node_factor(c), h.node_features.row(i)[c]);
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "node col {}", c);
            }
        }
        for k in 0..g.edge_count() {
            for c in 0..7 {
                let (x, y) = (g.edge_features.row(k)[c] * edge_factor(c), h.edge_features.row(k)[c]);
                prop_assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "edge col {}", c);
            }
        }
    }

    #[test]
    fn face_permutation_permutes_rows(spec in parts(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let m = final_mesh(&spec);
        let mut perm: Vec<usize> = (0..m.face_count()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled = TriMesh::new(m.vertices.clone(), perm.iter().map(|&f| m.faces[f]).collect()).unwrap();
        let (g, h) = (stl_to_graph(&m, 1).unwrap().graph, stl_to_graph(&shuffled, 1).unwrap().graph);
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(h.node_features.row(new), g.node_features.row(old));
        }
        let mut a: Vec<([usize; 2], Vec<u64>)> = g.edge_index.iter().enumerate()
            .map(|(k, e)| (*e, g.edge_features.row(k).iter().map(|x| x.to_bits()).collect()))
            .collect();
        let mut b: Vec<([usize; 2], Vec<u64>)> = h.edge_index.iter().enumerate()
            .map(|(k, e)| ([perm[e[0]], perm[e[1]]], h.edge_features.row(k).iter().map(|x| x.to_bits()).collect()))
            .collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn design_one_hot_blocks_sum_to_one(spec in parts()) {
        let g = design_to_graph(&spec).unwrap().graph;
        // box, pocket walls and floor, blind hole wall and floor
        prop_assert_eq!(g.node_count(), 6 + 5 + 2);
        for i in 0..g.node_count() {
            prop_assert_eq!(g.node_features.row(i)[0..3].iter().sum::<f64>(), 1.0);
        }
        for k in 0..g.edge_count() {
            prop_assert_eq!(g.edge_features.row(k)[2..4].iter().sum::<f64>(), 1.0);
        }
    }
}

#[test]
fn design_areas_match_mesh_surface_area_for_straight_walls() {
    // Rect pocket only: every analytic face is planar, so areas agree exactly.
    let spec = PartSpec {
        family: Family::Simple,
        stock_dims: [90.0, 60.0, 20.0],
        features: vec![FeatureSpec::new(FeatureKind::RectPocket, [40.0, 30.0], vec![24.0, 14.0], 7.0)],
    };
    let g = design_to_graph(&spec).unwrap().graph;
    let analytic: f64 = (0..g.node_count()).map(|i| g.node_features.row(i)[3]).sum();
    let mesh = final_mesh(&spec).surface_area();
    assert!((analytic - mesh).abs() < 1e-9, "{analytic} vs {mesh}");
}
