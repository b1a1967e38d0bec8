//! In-process workpiece state and its explicit mesh construction.
//!
//! A workpiece is a vertical prism over a convex outline with a set of
//! disjoint machined sites cut down from the top face. Each site is a stack
//! of horizontal cross-sections (levels) with matching vertex counts, so
//! walls between consecutive levels are simple quad strips (vertical for
//! pockets and holes, conical for countersinks). The top and bottom faces
//! are triangulated with a constrained Delaunay triangulation in which every
//! site opening is a hole.

use spade::{ConstrainedDelaunayTriangulation, Point2, Triangulation};

use super::mesh::TriMesh;
use super::part::{FeatureKind, FeatureSpec, PartSpec};
use super::vec3::Vec3;
use crate::{Error, Result};

/// Segments used to tessellate full circles.
pub const DEFAULT_SEGMENTS: usize = 32;
/// Minimum material (mm) between footprints and between footprints and the
/// outer walls.
pub const MIN_WALL: f64 = 1.0;
const CENTER_EPS: f64 = 1e-9;

pub type Point = [f64; 2];

/// Cross-section of a site, centred on the site center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Rect { lx: f64, ly: f64 },
    Circle { r: f64 },
    Rounded { lx: f64, ly: f64, r: f64 },
}

impl Shape {
    /// Half extents of the axis-aligned bounding box.
    pub fn half_extents(&self) -> [f64; 2] {
        match *self {
            Shape::Rect { lx, ly } | Shape::Rounded { lx, ly, .. } => [lx / 2.0, ly / 2.0],
            Shape::Circle { r } => [r, r],
        }
    }

    /// Exact (untessellated) area.
    pub fn area(&self) -> f64 {
        match *self {
            Shape::Rect { lx, ly } => lx * ly,
            Shape::Circle { r } => std::f64::consts::PI * r * r,
            Shape::Rounded { lx, ly, r } => lx * ly - (4.0 - std::f64::consts::PI) * r * r,
        }
    }

    /// Counter-clockwise polygon around `center`.
    pub fn polygon(&self, center: Point, segments: usize) -> Vec<Point> {
        let [cx, cy] = center;
        match *self {
            Shape::Rect { lx, ly } => {
                let (hx, hy) = (lx / 2.0, ly / 2.0);
                vec![[cx - hx, cy - hy], [cx + hx, cy - hy], [cx + hx, cy + hy], [cx - hx, cy + hy]]
            }
            Shape::Circle { r } => (0..segments)
                .map(|i| {
                    let a = std::f64::consts::TAU * i as f64 / segments as f64;
                    [cx + r * a.cos(), cy + r * a.sin()]
                })
                .collect(),
            Shape::Rounded { lx, ly, r } => {
                let per = (segments / 4).max(1);
                let (ox, oy) = (lx / 2.0 - r, ly / 2.0 - r);
                let corners = [(ox, -oy), (ox, oy), (-ox, oy), (-ox, -oy)];
                let mut pts = Vec::with_capacity(4 * (per + 1));
                for (q, (dx, dy)) in corners.into_iter().enumerate() {
                    let start = -std::f64::consts::FRAC_PI_2 + q as f64 * std::f64::consts::FRAC_PI_2;
                    for k in 0..=per {
                        let a = start + std::f64::consts::FRAC_PI_2 * k as f64 / per as f64;
                        pts.push([cx + dx + r * a.cos(), cy + dy + r * a.sin()]);
                    }
                }
                pts
            }
        }
    }

    fn contains(&self, other: &Shape) -> bool {
        let [a, b] = self.half_extents();
        let [c, d] = other.half_extents();
        a >= c && b >= d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    pub z: f64,
    pub shape: Shape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    Pocket,
    Hole,
    Cavity,
}

/// One machined site: levels ordered from the top face downward.
#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    pub kind: SiteKind,
    pub center: Point,
    pub levels: Vec<Level>,
}

impl Site {
    /// A site whose lowest level sits on the bottom face.
    pub fn is_through(&self) -> bool {
        self.levels.last().map_or(false, |l| l.z == 0.0)
    }

    pub fn top_shape(&self) -> Shape {
        self.levels[0].shape
    }

    pub fn floor_z(&self) -> f64 {
        self.levels.last().unwrap().z
    }

    fn has_countersink(&self) -> bool {
        self.levels.len() > 2
    }
}

/// Which analytic face of the workpiece a mesh triangle belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaceTag {
    Top,
    Bottom,
    /// Outer wall over outline edge `i -> i+1`.
    Side(usize),
    /// Wall of site `site` between levels `level` and `level + 1`; `segment`
    /// is the ring edge index.
    Wall { site: usize, level: usize, segment: usize },
    Floor(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workpiece {
    /// Counter-clockwise convex outline of the prism.
    pub outline: Vec<Point>,
    pub top_z: f64,
    pub sites: Vec<Site>,
    pub segments: usize,
}

impl Workpiece {
    pub fn stock(length: f64, width: f64, height: f64, segments: usize) -> Result<Self> {
        if !(length > 0.0 && width > 0.0 && height > 0.0) || ![length, width, height].iter().all(|x| x.is_finite()) {
            return Err(Error::Geometry(format!(
                "stock dimensions must be positive, got {length} x {width} x {height}"
            )));
        }
        if segments < 8 || segments % 4 != 0 {
            return Err(Error::Config(format!(
                "circle segment count must be a multiple of 4 and >= 8, got {segments}"
            )));
        }
        Ok(Self {
            outline: vec![[0.0, 0.0], [length, 0.0], [length, width], [0.0, width]],
            top_z: height,
            sites: Vec::new(),
            segments,
        })
    }

    /// Replays every feature of `spec` on fresh stock.
    pub fn from_spec(spec: &PartSpec, segments: usize) -> Result<Self> {
        let [l, w, h] = spec.stock_dims;
        let mut wp = Self::stock(l, w, h, segments)?;
        for f in &spec.features {
            wp.apply(f)?;
        }
        Ok(wp)
    }

    fn is_rectangular_outline(&self) -> bool {
        self.outline.len() == 4
    }

    fn outline_bounds(&self) -> (Point, Point) {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in &self.outline {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        (lo, hi)
    }

    /// Smallest signed distance from `p` to the outline edges (positive inside).
    fn inset_distance(&self, p: Point) -> f64 {
        let n = self.outline.len();
        (0..n)
            .map(|i| {
                let a = self.outline[i];
                let b = self.outline[(i + 1) % n];
                let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
                let len = dx.hypot(dy);
                (dx * (p[1] - a[1]) - dy * (p[0] - a[0])) / len
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn footprint_fits(&self, center: Point, shape: &Shape) -> bool {
        let [hx, hy] = shape.half_extents();
        [[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]]
            .iter()
            .all(|d| self.inset_distance([center[0] + d[0], center[1] + d[1]]) >= MIN_WALL)
    }

    fn footprint_clear(&self, center: Point, shape: &Shape, skip: Option<usize>) -> Result<()> {
        let [hx, hy] = shape.half_extents();
        for (i, s) in self.sites.iter().enumerate() {
            if Some(i) == skip {
                continue;
            }
            let [sx, sy] = s.top_shape().half_extents();
            let gap_x = (center[0] - s.center[0]).abs() - hx - sx;
            let gap_y = (center[1] - s.center[1]).abs() - hy - sy;
            if gap_x.max(gap_y) < MIN_WALL {
                return Err(Error::Geometry(format!(
                    "footprint at ({:.3}, {:.3}) overlaps site {i} at ({:.3}, {:.3})",
                    center[0], center[1], s.center[0], s.center[1]
                )));
            }
        }
        if !self.footprint_fits(center, shape) {
            return Err(Error::Geometry(format!(
                "footprint at ({:.3}, {:.3}) does not lie inside the top face",
                center[0], center[1]
            )));
        }
        Ok(())
    }

    fn site_at(&self, center: Point) -> Option<usize> {
        self.sites.iter().position(|s| {
            (s.center[0] - center[0]).abs() < CENTER_EPS && (s.center[1] - center[1]).abs() < CENTER_EPS
        })
    }

    fn floor_for(&self, depth: f64) -> Result<f64> {
        if depth > self.top_z + 1e-9 {
            return Err(Error::Geometry(format!(
                "depth {depth} exceeds remaining stock height {}",
                self.top_z
            )));
        }
        let z = self.top_z - depth;
        Ok(if z <= 1e-9 { 0.0 } else { z })
    }

    /// Applies one machining feature in place.
    pub fn apply(&mut self, f: &FeatureSpec) -> Result<()> {
        f.validate()?;
        match f.kind {
            FeatureKind::FaceReduction => {
                if !self.sites.is_empty() {
                    return Err(Error::Geometry("face reduction after machined sites".into()));
                }
                if f.depth >= self.top_z {
                    return Err(Error::Geometry(format!(
                        "face reduction depth {} removes the whole stock",
                        f.depth
                    )));
                }
                self.top_z -= f.depth;
            }
            FeatureKind::OutlineProfile => {
                if !self.is_rectangular_outline() {
                    return Err(Error::Geometry("outline profiling needs a rectangular outline".into()));
                }
                let d = f.dims[0];
                let (lo, hi) = self.outline_bounds();
                if hi[0] - lo[0] <= 2.0 * d || hi[1] - lo[1] <= 2.0 * d {
                    return Err(Error::Geometry(format!("profile offset {d} consumes the outline")));
                }
                self.outline = vec![
                    [lo[0] + d, lo[1] + d],
                    [hi[0] - d, lo[1] + d],
                    [hi[0] - d, hi[1] - d],
                    [lo[0] + d, hi[1] - d],
                ];
                self.check_sites_inside()?;
            }
            FeatureKind::EdgeChamfer => {
                if !self.is_rectangular_outline() {
                    return Err(Error::Geometry("edge chamfer needs a rectangular outline".into()));
                }
                let c = f.dims[0];
                let (lo, hi) = self.outline_bounds();
                if hi[0] - lo[0] <= 2.0 * c || hi[1] - lo[1] <= 2.0 * c {
                    return Err(Error::Geometry(format!("chamfer {c} consumes the outline")));
                }
                self.outline = vec![
                    [lo[0] + c, lo[1]],
                    [hi[0] - c, lo[1]],
                    [hi[0], lo[1] + c],
                    [hi[0], hi[1] - c],
                    [hi[0] - c, hi[1]],
                    [lo[0] + c, hi[1]],
                    [lo[0], hi[1] - c],
                    [lo[0], lo[1] + c],
                ];
                self.check_sites_inside()?;
            }
            FeatureKind::RectPocket => {
                let shape = Shape::Rect { lx: f.dims[0], ly: f.dims[1] };
                self.cut_prism(f, SiteKind::Pocket, shape)?;
            }
            FeatureKind::ContourCavity => {
                let [lx, ly, r] = [f.dims[0], f.dims[1], f.dims[2]];
                if r >= 0.5 * lx.min(ly) {
                    return Err(Error::Geometry(format!(
                        "corner radius {r} must be below half the smaller side of {lx} x {ly}"
                    )));
                }
                self.cut_prism(f, SiteKind::Cavity, Shape::Rounded { lx, ly, r })?;
            }
            FeatureKind::CircHole => {
                let shape = Shape::Circle { r: f.dims[0] / 2.0 };
                self.cut_prism(f, SiteKind::Hole, shape)?;
            }
            FeatureKind::Countersink => self.countersink(f)?,
        }
        Ok(())
    }

    fn check_sites_inside(&self) -> Result<()> {
        for s in &self.sites {
            if !self.footprint_fits(s.center, &s.top_shape()) {
                return Err(Error::Geometry(format!(
                    "site at ({:.3}, {:.3}) no longer lies inside the outline",
                    s.center[0], s.center[1]
                )));
            }
        }
        Ok(())
    }

    fn cut_prism(&mut self, f: &FeatureSpec, kind: SiteKind, shape: Shape) -> Result<()> {
        let floor = self.floor_for(f.depth)?;
        match self.site_at(f.center) {
            None => {
                self.footprint_clear(f.center, &shape, None)?;
                self.sites.push(Site {
                    kind,
                    center: f.center,
                    levels: vec![Level { z: self.top_z, shape }, Level { z: floor, shape }],
                });
            }
            Some(i) => {
                // follow-up pass: same kind, footprint and floor may only grow
                let site = &self.sites[i];
                if site.kind != kind || site.has_countersink() {
                    return Err(Error::Geometry(format!(
                        "{} pass incompatible with existing site {i}",
                        f.kind.name()
                    )));
                }
                let old = site.top_shape();
                if !shape.contains(&old) || floor > site.floor_z() {
                    return Err(Error::Geometry(format!(
                        "{} pass on site {i} must not shrink the cut",
                        f.kind.name()
                    )));
                }
                if shape == old && floor == site.floor_z() {
                    return Err(Error::Geometry(format!("{} pass on site {i} removes no material", f.kind.name())));
                }
                self.footprint_clear(f.center, &shape, Some(i))?;
                self.sites[i].levels = vec![Level { z: self.top_z, shape }, Level { z: floor, shape }];
            }
        }
        Ok(())
    }

    fn countersink(&mut self, f: &FeatureSpec) -> Result<()> {
        let i = self
            .site_at(f.center)
            .filter(|&i| self.sites[i].kind == SiteKind::Hole && !self.sites[i].has_countersink())
            .ok_or_else(|| Error::Geometry("countersink requires an existing plain hole at its center".into()))?;
        let site = &self.sites[i];
        let Shape::Circle { r } = site.top_shape() else {
            unreachable!("hole sites are circular")
        };
        let big = f.dims[0] / 2.0;
        let cone = f.depth;
        if big <= r {
            return Err(Error::Geometry(format!(
                "countersink diameter {} must exceed hole diameter {}",
                f.dims[0],
                2.0 * r
            )));
        }
        if self.top_z - cone <= site.floor_z() + 1e-9 {
            return Err(Error::Geometry("countersink cone reaches the hole floor".into()));
        }
        let shape = Shape::Circle { r: big };
        self.footprint_clear(f.center, &shape, Some(i))?;
        let floor = site.floor_z();
        self.sites[i].levels = vec![
            Level { z: self.top_z, shape },
            Level { z: self.top_z - cone, shape: Shape::Circle { r } },
            Level { z: floor, shape: Shape::Circle { r } },
        ];
        Ok(())
    }

    /// Builds the closed, outward-wound mesh of the current state.
    pub fn to_mesh(&self) -> Result<TriMesh> {
        self.to_tagged_mesh().map(|(m, _)| m)
    }

    /// Mesh plus the analytic face each triangle belongs to.
    pub fn to_tagged_mesh(&self) -> Result<(TriMesh, Vec<FaceTag>)> {
        let mut vertices: Vec<Vec3> = Vec::new();
        let mut faces: Vec<[usize; 3]> = Vec::new();
        let mut tags: Vec<FaceTag> = Vec::new();

        let n_out = self.outline.len();
        let top_outline: Vec<usize> = push_ring(&mut vertices, &self.outline, self.top_z);
        let bottom_outline: Vec<usize> = push_ring(&mut vertices, &self.outline, 0.0);

        let mut rings: Vec<Vec<(Vec<Point>, Vec<usize>)>> = Vec::with_capacity(self.sites.len());
        for site in &self.sites {
            let mut site_rings = Vec::with_capacity(site.levels.len());
            for level in &site.levels {
                let poly = level.shape.polygon(site.center, self.segments);
                let ids = push_ring(&mut vertices, &poly, level.z);
                site_rings.push((poly, ids));
            }
            rings.push(site_rings);
        }

        // top face: every site opening is a hole
        let top_holes: Vec<(&[Point], &[usize])> =
            rings.iter().map(|r| (r[0].0.as_slice(), r[0].1.as_slice())).collect();
        for tri in triangulate_with_holes(&self.outline, &top_outline, &top_holes, true)? {
            faces.push(tri);
            tags.push(FaceTag::Top);
        }

        // bottom face: only through sites open here
        let bottom_holes: Vec<(&[Point], &[usize])> = self
            .sites
            .iter()
            .zip(&rings)
            .filter(|(s, _)| s.is_through())
            .map(|(_, r)| {
                let last = r.last().unwrap();
                (last.0.as_slice(), last.1.as_slice())
            })
            .collect();
        for tri in triangulate_with_holes(&self.outline, &bottom_outline, &bottom_holes, false)? {
            faces.push(tri);
            tags.push(FaceTag::Bottom);
        }

        for i in 0..n_out {
            let j = (i + 1) % n_out;
            let (ta, tb, ba, bb) = (top_outline[i], top_outline[j], bottom_outline[i], bottom_outline[j]);
            faces.push([ba, bb, tb]);
            faces.push([ba, tb, ta]);
            tags.extend([FaceTag::Side(i); 2]);
        }

        for (si, (site, site_rings)) in self.sites.iter().zip(&rings).enumerate() {
            for level in 0..site.levels.len() - 1 {
                let up = &site_rings[level].1;
                let lo = &site_rings[level + 1].1;
                let n = up.len();
                for k in 0..n {
                    let k1 = (k + 1) % n;
                    faces.push([lo[k], up[k], up[k1]]);
                    faces.push([lo[k], up[k1], lo[k1]]);
                    tags.extend([FaceTag::Wall { site: si, level, segment: k }; 2]);
                }
            }
            if !site.is_through() {
                let ring = &site_rings.last().unwrap().1;
                for k in 1..ring.len() - 1 {
                    faces.push([ring[0], ring[k], ring[k + 1]]);
                    tags.push(FaceTag::Floor(si));
                }
            }
        }

        let mesh = TriMesh::new(vertices, faces)?;
        Ok((mesh, tags))
    }
}

fn push_ring(vertices: &mut Vec<Vec3>, poly: &[Point], z: f64) -> Vec<usize> {
    poly.iter()
        .map(|p| {
            vertices.push([p[0], p[1], z]);
            vertices.len() - 1
        })
        .collect()
}

fn inside_convex(poly: &[Point], p: Point) -> bool {
    let n = poly.len();
    (0..n).all(|i| {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) > 0.0
    })
}

/// Triangulates a convex outline minus convex holes. Triangles are wound
/// counter-clockwise seen from +z when `up`, clockwise otherwise.
fn triangulate_with_holes(
    outline: &[Point],
    outline_ids: &[usize],
    holes: &[(&[Point], &[usize])],
    up: bool,
) -> Result<Vec<[usize; 3]>> {
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> = ConstrainedDelaunayTriangulation::new();
    let mut id_of: Vec<usize> = Vec::new();
    let mut insert_loop = |cdt: &mut ConstrainedDelaunayTriangulation<Point2<f64>>,
                           pts: &[Point],
                           ids: &[usize]|
     -> Result<()> {
        let mut handles = Vec::with_capacity(pts.len());
        for (p, &id) in pts.iter().zip(ids) {
            let h = cdt
                .insert(Point2::new(p[0], p[1]))
                .map_err(|e| Error::Geometry(format!("triangulation insert failed: {e:?}")))?;
            if h.index() == id_of.len() {
                id_of.push(id);
            } else {
                return Err(Error::Geometry(format!(
                    "coincident vertex at ({:.6}, {:.6}) in face triangulation",
                    p[0], p[1]
                )));
            }
            handles.push(h);
        }
        for k in 0..handles.len() {
            let (a, b) = (handles[k], handles[(k + 1) % handles.len()]);
            if !cdt.can_add_constraint(a, b) {
                return Err(Error::Geometry("intersecting boundary loops in face triangulation".into()));
            }
            cdt.add_constraint(a, b);
        }
        Ok(())
    };
    insert_loop(&mut cdt, outline, outline_ids)?;
    for (pts, ids) in holes {
        insert_loop(&mut cdt, pts, ids)?;
    }
    if cdt.num_vertices() != id_of.len() {
        return Err(Error::Geometry("triangulation introduced extra vertices".into()));
    }

    let mut out = Vec::new();
    for face in cdt.inner_faces() {
        let vs = face.vertices();
        let p: [Point; 3] = vs.map(|v| [v.position().x, v.position().y]);
        let centroid = [(p[0][0] + p[1][0] + p[2][0]) / 3.0, (p[0][1] + p[1][1] + p[2][1]) / 3.0];
        if holes.iter().any(|(poly, _)| inside_convex(poly, centroid)) {
            continue;
        }
        let ids = vs.map(|v| id_of[v.fix().index()]);
        let orient = (p[1][0] - p[0][0]) * (p[2][1] - p[0][1]) - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]);
        let ccw = orient > 0.0;
        out.push(if ccw == up { ids } else { [ids[0], ids[2], ids[1]] });
    }
    Ok(out)
}

/// Applies `feature` to `state` and returns the resulting in-process mesh.
pub fn apply_operation(state: &mut Workpiece, feature: &FeatureSpec) -> Result<TriMesh> {
    state.apply(feature)?;
    state.to_mesh()
}
