//! Triangle-face graphs of in-process workpiece meshes.

use std::f64::consts::{FRAC_PI_2, PI};

use super::layout::{D_STL, E_STL};
use super::{Graph, Matrix};
use crate::geometry::synth::SequenceSample;
use crate::geometry::vec3::{add, angle_between, dist, dot, norm, scale, sub};
use crate::geometry::TriMesh;
use crate::{Error, Result};

/// Tolerance (radians) for classifying a largest angle as right.
pub const RIGHT_ANGLE_TOL: f64 = 1e-6;

/// Graph of one in-process workpiece at operation step `timestep` (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessGraph {
    pub graph: Graph,
    pub timestep: usize,
}

fn node_row(mesh: &TriMesh, f: usize) -> [f64; D_STL] {
    let [a, b, c] = mesh.corners(f);
    let centroid = scale(add(add(a, b), c), 1.0 / 3.0);
    let n = mesh.face_normal(f);
    let area = mesh.face_area(f);
    let perimeter = dist(a, b) + dist(b, c) + dist(c, a);
    let mut angles = [
        angle_between(sub(b, a), sub(c, a)),
        angle_between(sub(a, b), sub(c, b)),
        angle_between(sub(a, c), sub(b, c)),
    ];
    angles.sort_by(f64::total_cmp);
    let largest = angles[2];
    let kind = if (largest - FRAC_PI_2).abs() <= RIGHT_ANGLE_TOL {
        [0.0, 1.0, 0.0]
    } else if largest < FRAC_PI_2 {
        [1.0, 0.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    // Isoperimetric ratio scaled so the equilateral triangle scores 1.
    let compactness = 12.0 * 3f64.sqrt() * area / (perimeter * perimeter);
    let mut row = [0.0; D_STL];
    row[0..3].copy_from_slice(&centroid);
    row[3..6].copy_from_slice(&n);
    row[6] = area;
    row[7] = perimeter;
    row[8] = perimeter / 3.0;
    row[9..12].copy_from_slice(&angles);
    row[12..15].copy_from_slice(&kind);
    row[15] = compactness;
    row
}

fn opposite(mesh: &TriMesh, f: usize, a: usize, b: usize) -> usize {
    mesh.faces[f].into_iter().find(|&v| v != a && v != b).expect("face contains edge")
}

/// Converts a closed manifold mesh into its face-adjacency graph.
///
/// Each undirected mesh edge yields two directed edges with identical
/// features.  Edges are ordered by their sorted vertex pair, which keeps the
/// result independent of face order up to relabelling.
pub fn stl_to_graph(mesh: &TriMesh, t: usize) -> Result<ProcessGraph> {
    if t == 0 {
        return Err(Error::Contract("timesteps start at 1".into()));
    }
    mesh.validate()?;
    let edges = mesh.edges()?;
    let mut nodes = Matrix::zeros(mesh.face_count(), D_STL);
    for f in 0..mesh.face_count() {
        nodes.row_mut(f).copy_from_slice(&node_row(mesh, f));
    }
    let mut edge_index = Vec::with_capacity(2 * edges.len());
    let mut feats = Matrix::zeros(2 * edges.len(), E_STL);
    for (k, e) in edges.iter().enumerate() {
        let [fi, fj] = e.faces;
        let (ni, nj) = (mesh.face_normal(fi), mesh.face_normal(fj));
        let (pa, pb) = (mesh.vertices[e.a], mesh.vertices[e.b]);
        let ci = &nodes.row(fi)[0..3];
        let cj = &nodes.row(fj)[0..3];
        let cdist = dist([ci[0], ci[1], ci[2]], [cj[0], cj[1], cj[2]]);
        let bend = angle_between(ni, nj);
        // Face j folds behind the plane of face i on a convex ridge.
        let probe = dot(sub(mesh.vertices[opposite(mesh, fj, e.a, e.b)], pa), ni);
        let dihedral = if probe > 0.0 { PI + bend } else { PI - bend };
        let mid = scale(add(pa, pb), 0.5);
        let row = [cdist, norm(sub(ni, nj)), dist(pa, pb), mid[0], mid[1], mid[2], dihedral];
        feats.row_mut(2 * k).copy_from_slice(&row);
        feats.row_mut(2 * k + 1).copy_from_slice(&row);
        edge_index.push([fi, fj]);
        edge_index.push([fj, fi]);
    }
    let graph = Graph {
        node_features: nodes,
        edge_index,
        edge_features: feats,
    };
    graph.check()?;
    Ok(ProcessGraph { graph, timestep: t })
}

/// One graph per in-process mesh, timesteps `1..=T`.
pub fn process_graphs(sample: &SequenceSample) -> Result<Vec<ProcessGraph>> {
    if sample.ipw_meshes.len() != sample.labels.len() {
        return Err(Error::Contract(format!(
            "sample {} has {} meshes for {} labels",
            sample.id,
            sample.ipw_meshes.len(),
            sample.labels.len()
        )));
    }
    sample
        .ipw_meshes
        .iter()
        .enumerate()
        .map(|(i, m)| stl_to_graph(m, i + 1))
        .collect()
}
