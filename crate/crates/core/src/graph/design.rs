//! Analytic face-adjacency graph of the finished design.
//!
//! Faces come straight from the parametric [`Workpiece`]: planar outer and
//! machined faces, cylindrical walls (full or quarter) and conical
//! countersink walls.  Nothing is measured from a tessellation.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2, TAU};

use super::layout::{D_BREP, E_BREP};
use super::{Graph, Matrix};
use crate::geometry::workpiece::{Level, Point, Shape, Site, DEFAULT_SEGMENTS};
use crate::geometry::{PartSpec, Workpiece};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DesignGraph {
    pub graph: Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Plane,
    Cylinder,
    Cone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    Line,
    Circle,
}

#[derive(Debug, Clone, Copy)]
struct Face {
    surface: Surface,
    area: f64,
    uv: [f64; 2],
    centroid: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct Adjacency {
    faces: [usize; 2],
    length: f64,
    dihedral: f64,
    curve: Curve,
}

/// Wall faces between two levels of one site plus their bounding curves.
struct Ring {
    faces: Vec<usize>,
    /// Upper and lower boundary piece of each face.
    upper: Vec<(f64, Curve)>,
    lower: Vec<(f64, Curve)>,
    /// Inward lean of the wall from vertical, radians.
    tilt: f64,
}

#[derive(Default)]
struct Builder {
    faces: Vec<Face>,
    adj: Vec<Adjacency>,
}

impl Builder {
    fn face(&mut self, surface: Surface, area: f64, uv: [f64; 2], centroid: [f64; 3]) -> usize {
        self.faces.push(Face {
            surface,
            area,
            uv,
            centroid,
        });
        self.faces.len() - 1
    }

    fn link(&mut self, a: usize, b: usize, length: f64, dihedral: f64, curve: Curve) {
        self.adj.push(Adjacency {
            faces: [a, b],
            length,
            dihedral,
            curve,
        });
    }

    fn ring(&mut self, center: Point, up: Level, lo: Level) -> Result<Ring> {
        let h = up.z - lo.z;
        let zm = 0.5 * (up.z + lo.z);
        let [cx, cy] = center;
        let mut ring = Ring {
            faces: Vec::new(),
            upper: Vec::new(),
            lower: Vec::new(),
            tilt: 0.0,
        };
        match (up.shape, lo.shape) {
            (Shape::Circle { r: ru }, Shape::Circle { r: rl }) if ru == rl => {
                ring.faces.push(self.face(Surface::Cylinder, TAU * ru * h, [TAU, h], [cx, cy, zm]));
                ring.upper.push((TAU * ru, Curve::Circle));
                ring.lower.push((TAU * ru, Curve::Circle));
            }
            (Shape::Circle { r: ru }, Shape::Circle { r: rl }) => {
                let s = (ru - rl).hypot(h);
                let z = lo.z + h * (rl + 2.0 * ru) / (3.0 * (rl + ru));
                ring.faces.push(self.face(Surface::Cone, PI * (ru + rl) * s, [TAU, s], [cx, cy, z]));
                ring.upper.push((TAU * ru, Curve::Circle));
                ring.lower.push((TAU * rl, Curve::Circle));
                ring.tilt = (ru - rl).atan2(h);
            }
            (Shape::Rect { .. }, Shape::Rect { .. }) if up.shape == lo.shape => {
                let p = up.shape.polygon(center, 4);
                for j in 0..4 {
                    let (a, b) = (p[j], p[(j + 1) % 4]);
                    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                    let mid = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), zm];
                    ring.faces.push(self.face(Surface::Plane, len * h, [len, h], mid));
                    ring.upper.push((len, Curve::Line));
                    ring.lower.push((len, Curve::Line));
                }
                for j in 0..4 {
                    self.link(ring.faces[j], ring.faces[(j + 1) % 4], h, 1.5 * PI, Curve::Line);
                }
            }
            (Shape::Rounded { lx, ly, r }, Shape::Rounded { .. }) if up.shape == lo.shape => {
                let (ox, oy) = (lx / 2.0 - r, ly / 2.0 - r);
                let corners = [(ox, -oy), (ox, oy), (-ox, oy), (-ox, -oy)];
                let arc_pt = |q: usize, a: f64| {
                    let (dx, dy) = corners[q % 4];
                    [cx + dx + r * a.cos(), cy + dy + r * a.sin()]
                };
                let arc_off = 2.0 * SQRT_2 * r / PI;
                for q in 0..4 {
                    let start = -FRAC_PI_2 + q as f64 * FRAC_PI_2;
                    let mid = start + 0.25 * PI;
                    let (dx, dy) = corners[q];
                    let c = [cx + dx + arc_off * mid.cos(), cy + dy + arc_off * mid.sin(), zm];
                    ring.faces
                        .push(self.face(Surface::Cylinder, FRAC_PI_2 * r * h, [FRAC_PI_2, h], c));
                    ring.upper.push((FRAC_PI_2 * r, Curve::Circle));
                    ring.lower.push((FRAC_PI_2 * r, Curve::Circle));
                    let a = arc_pt(q, start + FRAC_PI_2);
                    let b = arc_pt(q + 1, start + FRAC_PI_2);
                    let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                    if len > 1e-12 {
                        let m = [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1]), zm];
                        ring.faces.push(self.face(Surface::Plane, len * h, [len, h], m));
                        ring.upper.push((len, Curve::Line));
                        ring.lower.push((len, Curve::Line));
                    }
                }
                let n = ring.faces.len();
                for j in 0..n {
                    // Arcs meet their straight neighbours tangentially.
                    self.link(ring.faces[j], ring.faces[(j + 1) % n], h, PI, Curve::Line);
                }
            }
            (a, b) => {
                return Err(Error::Contract(format!(
                    "unsupported wall between levels {a:?} and {b:?}"
                )))
            }
        }
        Ok(ring)
    }

    fn site(&mut self, top: usize, bottom: usize, site: &Site) -> Result<()> {
        let mut prev: Option<Ring> = None;
        for k in 0..site.levels.len() - 1 {
            let ring = self.ring(site.center, site.levels[k], site.levels[k + 1])?;
            match &prev {
                None => {
                    for (j, &f) in ring.faces.iter().enumerate() {
                        let (len, curve) = ring.upper[j];
                        self.link(top, f, len, FRAC_PI_2 + ring.tilt, curve);
                    }
                }
                Some(above) => {
                    if above.faces.len() != ring.faces.len() {
                        return Err(Error::Contract("site levels with mismatched wall counts".into()));
                    }
                    for j in 0..ring.faces.len() {
                        let (len, curve) = ring.upper[j];
                        self.link(above.faces[j], ring.faces[j], len, PI - above.tilt + ring.tilt, curve);
                    }
                }
            }
            prev = Some(ring);
        }
        let last = prev.ok_or_else(|| Error::Contract("site without walls".into()))?;
        let lowest = *site.levels.last().unwrap();
        let (below, dihedral) = if site.is_through() {
            (bottom, FRAC_PI_2 - last.tilt)
        } else {
            let [hx, hy] = lowest.shape.half_extents();
            let c = [site.center[0], site.center[1], lowest.z];
            let floor = self.face(Surface::Plane, lowest.shape.area(), [2.0 * hx, 2.0 * hy], c);
            (floor, 1.5 * PI - last.tilt)
        };
        for (j, &f) in last.faces.iter().enumerate() {
            let (len, curve) = last.lower[j];
            self.link(f, below, len, dihedral, curve);
        }
        Ok(())
    }

    fn finish(self) -> Result<DesignGraph> {
        let mut nodes = Matrix::zeros(self.faces.len(), D_BREP);
        for (i, f) in self.faces.iter().enumerate() {
            let onehot = match f.surface {
                Surface::Plane => [1.0, 0.0, 0.0],
                Surface::Cylinder => [0.0, 1.0, 0.0],
                Surface::Cone => [0.0, 0.0, 1.0],
            };
            let row = nodes.row_mut(i);
            row[0..3].copy_from_slice(&onehot);
            row[3] = f.area;
            row[4..6].copy_from_slice(&f.uv);
            row[6..9].copy_from_slice(&f.centroid);
        }
        let mut edge_index = Vec::with_capacity(2 * self.adj.len());
        let mut feats = Matrix::zeros(2 * self.adj.len(), E_BREP);
        for (k, a) in self.adj.iter().enumerate() {
            let curve = match a.curve {
                Curve::Line => [1.0, 0.0],
                Curve::Circle => [0.0, 1.0],
            };
            let row = [a.length, a.dihedral, curve[0], curve[1]];
            feats.row_mut(2 * k).copy_from_slice(&row);
            feats.row_mut(2 * k + 1).copy_from_slice(&row);
            edge_index.push(a.faces);
            edge_index.push([a.faces[1], a.faces[0]]);
        }
        let graph = Graph {
            node_features: nodes,
            edge_index,
            edge_features: feats,
        };
        graph.check()?;
        Ok(DesignGraph { graph })
    }
}

/// Area and centroid of a simple polygon.
fn polygon_moments(p: &[Point]) -> (f64, Point) {
    let n = p.len();
    let (mut a2, mut cx, mut cy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (u, v) = (p[i], p[(i + 1) % n]);
        let c = u[0] * v[1] - v[0] * u[1];
        a2 += c;
        cx += (u[0] + v[0]) * c;
        cy += (u[1] + v[1]) * c;
    }
    (0.5 * a2, [cx / (3.0 * a2), cy / (3.0 * a2)])
}

/// Planar face left after removing `holes` (area, centre) from the outline.
fn pierced(outline: (f64, Point), holes: &[(f64, Point)]) -> (f64, Point) {
    let (mut a, mut mx, mut my) = (outline.0, outline.0 * outline.1[0], outline.0 * outline.1[1]);
    for &(ha, hc) in holes {
        a -= ha;
        mx -= ha * hc[0];
        my -= ha * hc[1];
    }
    (a, [mx / a, my / a])
}

/// Builds the design graph of a finished workpiece.
pub fn workpiece_graph(wp: &Workpiece) -> Result<DesignGraph> {
    let mut b = Builder::default();
    let outline = polygon_moments(&wp.outline);
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &wp.outline {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span = [hi[0] - lo[0], hi[1] - lo[1]];
    let openings: Vec<(f64, Point)> = wp.sites.iter().map(|s| (s.top_shape().area(), s.center)).collect();
    let through: Vec<(f64, Point)> = wp
        .sites
        .iter()
        .filter(|s| s.is_through())
        .map(|s| (s.levels.last().unwrap().shape.area(), s.center))
        .collect();
    let (ta, tc) = pierced(outline, &openings);
    let (ba, bc) = pierced(outline, &through);
    let top = b.face(Surface::Plane, ta, span, [tc[0], tc[1], wp.top_z]);
    let bottom = b.face(Surface::Plane, ba, span, [bc[0], bc[1], 0.0]);
    let n = wp.outline.len();
    let h = wp.top_z;
    let sides: Vec<usize> = (0..n)
        .map(|i| {
            let (p, q) = (wp.outline[i], wp.outline[(i + 1) % n]);
            let len = (q[0] - p[0]).hypot(q[1] - p[1]);
            let c = [0.5 * (p[0] + q[0]), 0.5 * (p[1] + q[1]), 0.5 * h];
            b.face(Surface::Plane, len * h, [len, h], c)
        })
        .collect();
    for i in 0..n {
        let (p, q, r) = (wp.outline[i], wp.outline[(i + 1) % n], wp.outline[(i + 2) % n]);
        let len = (q[0] - p[0]).hypot(q[1] - p[1]);
        b.link(top, sides[i], len, FRAC_PI_2, Curve::Line);
        b.link(bottom, sides[i], len, FRAC_PI_2, Curve::Line);
        let d1 = [q[0] - p[0], q[1] - p[1]];
        let d2 = [r[0] - q[0], r[1] - q[1]];
        let turn = (d1[0] * d2[1] - d1[1] * d2[0]).atan2(d1[0] * d2[0] + d1[1] * d2[1]);
        b.link(sides[i], sides[(i + 1) % n], h, PI - turn, Curve::Line);
    }
    for site in &wp.sites {
        b.site(top, bottom, site)?;
    }
    b.finish()
}

/// Design graph of the part described by `spec`.
pub fn design_to_graph(spec: &PartSpec) -> Result<DesignGraph> {
    workpiece_graph(&Workpiece::from_spec(spec, DEFAULT_SEGMENTS)?)
}
