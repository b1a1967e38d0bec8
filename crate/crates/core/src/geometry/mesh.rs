//! Indexed triangle meshes and their topological checks.

use std::collections::{BTreeMap, HashMap};

use super::vec3::{self, Vec3};
use crate::{Error, Result};

/// Faces smaller than this (mm²) are considered degenerate.
pub const MIN_FACE_AREA: f64 = 1e-9;

/// Default vertex weld tolerance (mm) used when reading triangle soups.
pub const WELD_TOLERANCE: f64 = 1e-6;

/// Indexed triangle mesh with counter-clockwise winding (outward normals).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[usize; 3]>,
}

/// One undirected mesh edge and the two faces sharing it.
///
/// `faces[0]` traverses the edge as `a -> b`, `faces[1]` as `b -> a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshEdge {
    pub a: usize,
    pub b: usize,
    pub faces: [usize; 2],
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::Topology(format!(
                    "face {fi} references vertex beyond count {n}"
                )));
            }
        }
        Ok(Self { vertices, faces })
    }

    /// Axis-aligned box `[0,l] x [0,w] x [0,h]`, 12 triangles.
    pub fn cuboid(l: f64, w: f64, h: f64) -> Self {
        let vertices = vec![
            [0.0, 0.0, 0.0],
            [l, 0.0, 0.0],
            [l, w, 0.0],
            [0.0, w, 0.0],
            [0.0, 0.0, h],
            [l, 0.0, h],
            [l, w, h],
            [0.0, w, h],
        ];
        let faces = vec![
            [0, 2, 1],
            [0, 3, 2],
            [4, 5, 6],
            [4, 6, 7],
            [0, 1, 5],
            [0, 5, 4],
            [1, 2, 6],
            [1, 6, 5],
            [2, 3, 7],
            [2, 7, 6],
            [3, 0, 4],
            [3, 4, 7],
        ];
        Self { vertices, faces }
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn corners(&self, face: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[face];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Non-normalized normal (length = twice the area).
    pub fn face_cross(&self, face: usize) -> Vec3 {
        let [p, q, r] = self.corners(face);
        vec3::cross(vec3::sub(q, p), vec3::sub(r, p))
    }

    pub fn face_area(&self, face: usize) -> f64 {
        0.5 * vec3::norm(self.face_cross(face))
    }

    pub fn face_normal(&self, face: usize) -> Vec3 {
        vec3::normalize(self.face_cross(face))
    }

    /// Undirected edges with their two incident faces, sorted by vertex pair.
    ///
    /// Fails unless the mesh is closed, 2-manifold and consistently wound.
    pub fn edges(&self) -> Result<Vec<MeshEdge>> {
        // (lo, hi) -> (face traversing lo->hi, face traversing hi->lo)
        let mut map: BTreeMap<(usize, usize), [Option<usize>; 2]> = BTreeMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let (u, v) = (f[k], f[(k + 1) % 3]);
                if u == v {
                    return Err(Error::Topology(format!("face {fi} repeats vertex {u}")));
                }
                let (key, slot) = if u < v { ((u, v), 0) } else { ((v, u), 1) };
                let entry = map.entry(key).or_insert([None, None]);
                if entry[slot].is_some() {
                    return Err(Error::Topology(format!(
                        "edge ({}, {}) traversed twice in the same direction (face {fi})",
                        key.0, key.1
                    )));
                }
                entry[slot] = Some(fi);
            }
        }
        map.into_iter()
            .map(|((a, b), slots)| match slots {
                [Some(f0), Some(f1)] => Ok(MeshEdge { a, b, faces: [f0, f1] }),
                _ => Err(Error::Topology(format!(
                    "edge ({a}, {b}) is a boundary edge; mesh is not closed"
                ))),
            })
            .collect()
    }

    /// Full validity check: indices, non-degenerate faces, closed manifold with
    /// consistent winding.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (fi, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::Topology(format!("face {fi} index out of range")));
            }
            let area = self.face_area(fi);
            if !(area > MIN_FACE_AREA) {
                return Err(Error::Topology(format!(
                    "face {fi} is degenerate (area {area:e})"
                )));
            }
        }
        if self.vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Topology("non-finite vertex coordinate".into()));
        }
        self.edges().map(|_| ())
    }

    /// Signed divergence-theorem volume; positive for outward winding.
    pub fn volume(&self) -> Result<f64> {
        self.edges()?;
        Ok(self.signed_volume_unchecked())
    }

    pub(crate) fn signed_volume_unchecked(&self) -> f64 {
        // Kahan-free but centred on the first vertex to limit cancellation.
        let origin = self.vertices.first().copied().unwrap_or([0.0; 3]);
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                let p = vec3::sub(self.vertices[a], origin);
                let q = vec3::sub(self.vertices[b], origin);
                let r = vec3::sub(self.vertices[c], origin);
                vec3::dot(p, vec3::cross(q, r))
            })
            .sum::<f64>()
            / 6.0
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| self.face_area(f)).sum()
    }

    /// Per-face corner coordinates in face order.
    pub fn soup(&self) -> Vec<[Vec3; 3]> {
        (0..self.faces.len()).map(|f| self.corners(f)).collect()
    }

    /// Rebuilds an indexed mesh from a triangle soup, merging vertices closer
    /// than `tol`. Vertices are numbered in order of first appearance.
    pub fn from_soup(soup: &[[Vec3; 3]], tol: f64) -> Self {
        let mut welder = Welder::new(tol);
        let faces = soup
            .iter()
            .map(|tri| [welder.insert(tri[0]), welder.insert(tri[1]), welder.insert(tri[2])])
            .collect();
        Self {
            vertices: welder.vertices,
            faces,
        }
    }

    /// Applies `f` to every vertex.
    pub fn map_vertices(&self, f: impl Fn(Vec3) -> Vec3) -> Self {
        Self {
            vertices: self.vertices.iter().copied().map(f).collect(),
            faces: self.faces.clone(),
        }
    }
}

struct Welder {
    tol: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    vertices: Vec<Vec3>,
}

impl Welder {
    fn new(tol: f64) -> Self {
        Self {
            tol: tol.max(f64::MIN_POSITIVE),
            cells: HashMap::new(),
            vertices: Vec::new(),
        }
    }

    fn cell(&self, p: Vec3) -> [i64; 3] {
        p.map(|c| (c / self.tol).floor() as i64)
    }

    fn insert(&mut self, p: Vec3) -> usize {
        let c = self.cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let key = [c[0].saturating_add(dx), c[1].saturating_add(dy), c[2].saturating_add(dz)];
                    if let Some(ids) = self.cells.get(&key) {
                        for &id in ids {
                            if vec3::dist(self.vertices[id], p) <= self.tol {
                                return id;
                            }
                        }
                    }
                }
            }
        }
        let id = self.vertices.len();
        self.vertices.push(p);
        self.cells.entry(c).or_default().push(id);
        id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_volume_and_topology() {
        let cube = TriMesh::cuboid(1.0, 1.0, 1.0);
        cube.validate().unwrap();
        assert_eq!(cube.edges().unwrap().len(), 18);
        assert_eq!(cube.volume().unwrap(), 1.0);
        let block = TriMesh::cuboid(100.0, 60.0, 20.0);
        assert_eq!(block.face_count(), 12);
        assert!((block.volume().unwrap() - 120000.0).abs() < 1e-9);
    }

    #[test]
    fn open_mesh_is_rejected() {
        let mut cube = TriMesh::cuboid(1.0, 1.0, 1.0);
        cube.faces.pop();
        assert!(matches!(cube.volume(), Err(Error::Topology(_))));
    }

    #[test]
    fn flipped_face_breaks_winding() {
        let mut cube = TriMesh::cuboid(1.0, 1.0, 1.0);
        cube.faces[3].swap(1, 2);
        assert!(cube.validate().is_err());
    }

    #[test]
    fn inverted_winding_gives_negative_volume() {
        let mut cube = TriMesh::cuboid(2.0, 1.0, 1.0);
        for f in &mut cube.faces {
            f.swap(1, 2);
        }
        assert_eq!(cube.volume().unwrap(), -2.0);
    }

    #[test]
    fn weld_reconstructs_cube() {
        let cube = TriMesh::cuboid(1.0, 1.0, 1.0);
        let soup = cube.soup();
        // brute-force count of distinct corner positions and undirected edges
        let mut distinct: Vec<Vec3> = Vec::new();
        let mut edges: Vec<(Vec3, Vec3)> = Vec::new();
        for tri in &soup {
            for k in 0..3 {
                if !distinct.contains(&tri[k]) {
                    distinct.push(tri[k]);
                }
                let (u, v) = (tri[k], tri[(k + 1) % 3]);
                if !edges.contains(&(u, v)) && !edges.contains(&(v, u)) {
                    edges.push((u, v));
                }
            }
        }
        assert_eq!((distinct.len(), edges.len()), (8, 18));

        let welded = TriMesh::from_soup(&soup, WELD_TOLERANCE);
        assert_eq!(welded.vertices.len(), 8);
        assert_eq!(welded.edges().unwrap().len(), 18);
        assert_eq!(welded.soup(), soup);
    }

    #[test]
    fn weld_merges_within_tolerance_only() {
        let a = [0.0, 0.0, 0.0];
        let near = [5e-7, 0.0, 0.0];
        let far = [1e-5, 0.0, 0.0];
        let soup = [[a, [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], [near, far, [0.0, 0.0, 1.0]]];
        let m = TriMesh::from_soup(&soup, WELD_TOLERANCE);
        assert_eq!(m.faces[1][0], 0);
        assert_eq!(m.vertices.len(), 5);
    }
}
