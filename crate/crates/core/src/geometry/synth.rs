//! Parametric part families and labelled in-process mesh sequences.
//!
//! A [`GridSpec`] lists, per part family, the discrete values each parameter
//! sweeps through. Every combination is turned into a [`PartSpec`] with its
//! operations in machining order; combinations that violate a geometric
//! constraint are dropped.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mesh::TriMesh;
use super::part::{Family, FeatureKind, FeatureSpec, OperationLabel, PartSpec, SubOp};
use super::workpiece::{Workpiece, DEFAULT_SEGMENTS};
use crate::{Error, Result};

/// Upper bound on enumerated combinations per family.
pub const MAX_COMBINATIONS: usize = 2_000_000;

fn default_segments() -> usize {
    DEFAULT_SEGMENTS
}
fn default_spot_ratio() -> f64 {
    2.0
}
fn default_spot_depth() -> f64 {
    1.0
}
fn zero_list() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default = "default_segments")]
    pub segments: usize,
    /// Uniform jitter (mm) applied to every feature center, drawn from the seed.
    #[serde(default)]
    pub jitter: f64,
    /// Drilled holes at least this many diameters deep get a spot-drill pre-op.
    #[serde(default = "default_spot_ratio")]
    pub spot_drill_ratio: f64,
    #[serde(default = "default_spot_depth")]
    pub spot_depth: f64,
    #[serde(default)]
    pub family: Vec<FamilyGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyGrid {
    pub family: Family,
    pub length: Vec<f64>,
    pub width: Vec<f64>,
    pub height: Vec<f64>,
    /// Face-milling depths; `0` means no facing operation.
    #[serde(default = "zero_list")]
    pub face_reduction: Vec<f64>,
    /// Outer-wall profiling offsets; `0` means none.
    #[serde(default = "zero_list")]
    pub outline_profile: Vec<f64>,
    /// Vertical-edge chamfer sizes; `0` means no deburring.
    #[serde(default = "zero_list")]
    pub edge_chamfer: Vec<f64>,
    #[serde(default)]
    pub feature: Vec<FeatureGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureGrid {
    pub kind: FeatureKind,
    /// Center positions as fractions of stock length.
    pub u: Vec<f64>,
    /// Center positions as fractions of stock width.
    pub v: Vec<f64>,
    pub dims: Vec<Vec<f64>>,
    /// Depths in mm; a value >= the remaining height makes a through cut.
    pub depth: Vec<f64>,
    /// Finishing-pass offset per side (pockets: wall/floor profiling,
    /// cavities: curve drive); `0` means none.
    #[serde(default = "zero_list")]
    pub finish: Vec<f64>,
    /// Countersink outer diameter for holes; `0` means none.
    #[serde(default = "zero_list")]
    pub countersink: Vec<f64>,
    /// Also enumerate parts without this feature.
    #[serde(default)]
    pub optional: bool,
}

impl GridSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("grid serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.family.is_empty() {
            return Err(Error::Config("grid defines no part family".into()));
        }
        for fam in &self.family {
            for (name, list) in [("length", &fam.length), ("width", &fam.width), ("height", &fam.height)] {
                if list.is_empty() {
                    return Err(Error::Config(format!("{} grid has empty `{name}` range", fam.family.name())));
                }
            }
            for (name, list) in [
                ("face_reduction", &fam.face_reduction),
                ("outline_profile", &fam.outline_profile),
                ("edge_chamfer", &fam.edge_chamfer),
            ] {
                if list.is_empty() {
                    return Err(Error::Config(format!("{} grid has empty `{name}` range", fam.family.name())));
                }
            }
            for f in &fam.feature {
                if f.u.is_empty() || f.v.is_empty() || f.dims.is_empty() || f.depth.is_empty() || f.finish.is_empty() || f.countersink.is_empty() {
                    return Err(Error::Config(format!(
                        "{} feature `{}` has an empty range",
                        fam.family.name(),
                        f.kind.name()
                    )));
                }
                if !matches!(
                    f.kind,
                    FeatureKind::RectPocket | FeatureKind::CircHole | FeatureKind::ContourCavity
                ) {
                    return Err(Error::Config(format!(
                        "feature kind `{}` is configured through family-level ranges",
                        f.kind.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One machined part with its labelled in-process workpiece meshes.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub id: String,
    pub spec: PartSpec,
    pub ipw_meshes: Vec<TriMesh>,
    pub labels: Vec<OperationLabel>,
    pub design_mesh: TriMesh,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Concrete choice of every family-level and feature-level parameter.
struct Choice<'a> {
    fam: &'a FamilyGrid,
    dims: [f64; 3],
    face: f64,
    profile: f64,
    chamfer: f64,
    features: Vec<Option<FeatureChoice>>,
}

#[derive(Clone, Copy)]
struct FeatureChoice {
    uv: [f64; 2],
    dims_idx: usize,
    depth: f64,
    finish: f64,
    countersink: f64,
}

/// Mixed-radix odometer over the per-axis option counts.
fn odometer(radices: &[usize], mut index: usize) -> Vec<usize> {
    radices
        .iter()
        .map(|&r| {
            let d = index % r;
            index /= r;
            d
        })
        .collect()
}

fn family_axes(fam: &FamilyGrid) -> Vec<usize> {
    let mut axes = vec![
        fam.length.len(),
        fam.width.len(),
        fam.height.len(),
        fam.face_reduction.len(),
        fam.outline_profile.len(),
        fam.edge_chamfer.len(),
    ];
    for f in &fam.feature {
        axes.extend([
            if f.optional { 2 } else { 1 },
            f.u.len(),
            f.v.len(),
            f.dims.len(),
            f.depth.len(),
            f.finish.len(),
            f.countersink.len(),
        ]);
    }
    axes
}

/// An absent optional feature must not vary its own parameters, otherwise
/// the same part would be enumerated once per unused combination.
fn is_canonical(fam: &FamilyGrid, digits: &[usize]) -> bool {
    let mut at = 6;
    for _ in &fam.feature {
        if digits[at] == 1 && digits[at + 1..at + 7].iter().any(|&d| d != 0) {
            return false;
        }
        at += 7;
    }
    true
}

fn decode<'a>(fam: &'a FamilyGrid, digits: &[usize]) -> Choice<'a> {
    let mut it = digits.iter().copied();
    let mut next = || it.next().unwrap();
    let dims = [fam.length[next()], fam.width[next()], fam.height[next()]];
    let face = fam.face_reduction[next()];
    let profile = fam.outline_profile[next()];
    let chamfer = fam.edge_chamfer[next()];
    let features = fam
        .feature
        .iter()
        .map(|f| {
            let present = next() == 0;
            let c = FeatureChoice {
                uv: [f.u[next()], f.v[next()]],
                dims_idx: next(),
                depth: f.depth[next()],
                finish: f.finish[next()],
                countersink: f.countersink[next()],
            };
            present.then_some(c)
        })
        .collect();
    Choice {
        fam,
        dims,
        face,
        profile,
        chamfer,
        features,
    }
}

/// Orders the operations of one parameter choice into a machining plan:
/// facing and outer profiling, pockets and cavities by decreasing area (each
/// followed by its finishing pass), holes (spot drill, drill or mill,
/// countersink), deburring last.
fn plan(grid: &GridSpec, choice: &Choice<'_>, jitter: &mut impl FnMut() -> [f64; 2]) -> PartSpec {
    let [l, w, h] = choice.dims;
    let mut ops: Vec<FeatureSpec> = Vec::new();
    let mut top = h;
    if choice.face > 0.0 {
        ops.push(FeatureSpec::new(FeatureKind::FaceReduction, [l / 2.0, w / 2.0], vec![], choice.face));
        top -= choice.face;
    }
    if choice.profile > 0.0 {
        ops.push(FeatureSpec::new(FeatureKind::OutlineProfile, [l / 2.0, w / 2.0], vec![choice.profile], top));
    }

    let mut cuts: Vec<(f64, Vec<FeatureSpec>)> = Vec::new();
    let mut holes: Vec<Vec<FeatureSpec>> = Vec::new();
    for (fg, fc) in choice.fam.feature.iter().zip(&choice.features) {
        let Some(fc) = fc else { continue };
        let j = jitter();
        let center = [fc.uv[0] * l + j[0], fc.uv[1] * w + j[1]];
        let dims = fg.dims[fc.dims_idx].clone();
        match fg.kind {
            FeatureKind::RectPocket | FeatureKind::ContourCavity => {
                let base = FeatureSpec::new(fg.kind, center, dims.clone(), fc.depth.min(top));
                let area = dims[0] * dims[1];
                let mut seq = vec![base];
                if fc.finish > 0.0 {
                    let mut grown = dims.clone();
                    grown[0] += 2.0 * fc.finish;
                    grown[1] += 2.0 * fc.finish;
                    let (depth, sub) = if fg.kind == FeatureKind::RectPocket {
                        ((fc.depth + fc.finish).min(top), SubOp::WallFloorProfiling)
                    } else {
                        (fc.depth.min(top), SubOp::CurveDrive)
                    };
                    seq.push(FeatureSpec::new(fg.kind, center, grown, depth).with_label(sub));
                }
                cuts.push((area, seq));
            }
            FeatureKind::CircHole => {
                let d = dims[0];
                let depth = fc.depth.min(top);
                let main = FeatureSpec::new(FeatureKind::CircHole, center, dims.clone(), depth);
                let mut seq = Vec::new();
                if main.label.sub == SubOp::Drilling
                    && depth >= grid.spot_drill_ratio * d
                    && grid.spot_depth < depth
                {
                    seq.push(
                        FeatureSpec::new(FeatureKind::CircHole, center, dims.clone(), grid.spot_depth)
                            .with_label(SubOp::SpotDrilling),
                    );
                }
                seq.push(main);
                if fc.countersink > 0.0 {
                    let cone = (fc.countersink - d) / 2.0;
                    seq.push(FeatureSpec::new(FeatureKind::Countersink, center, vec![fc.countersink], cone));
                }
                holes.push(seq);
            }
            _ => unreachable!("validated in GridSpec::validate"),
        }
    }
    // stable: equal areas keep grid order
    cuts.sort_by(|a, b| b.0.total_cmp(&a.0));
    ops.extend(cuts.into_iter().flat_map(|(_, s)| s));
    ops.extend(holes.into_iter().flatten());
    if choice.chamfer > 0.0 {
        ops.push(FeatureSpec::new(FeatureKind::EdgeChamfer, [l / 2.0, w / 2.0], vec![choice.chamfer], top));
    }
    PartSpec {
        family: choice.fam.family,
        stock_dims: choice.dims,
        features: ops,
    }
}

/// Replays `spec` and returns one mesh per operation, checking that every
/// mesh is valid and that every operation strictly removes material.
pub fn build_meshes(spec: &PartSpec, segments: usize) -> Result<Vec<TriMesh>> {
    if spec.features.is_empty() {
        return Err(Error::Geometry("part has no operations".into()));
    }
    let [l, w, h] = spec.stock_dims;
    let mut wp = Workpiece::stock(l, w, h, segments)?;
    let mut last = wp.to_mesh()?.volume()?;
    let mut meshes = Vec::with_capacity(spec.features.len());
    for f in &spec.features {
        wp.apply(f)?;
        let m = wp.to_mesh()?;
        m.validate()?;
        let v = m.volume()?;
        if !(v < last) {
            return Err(Error::Geometry(format!(
                "{} does not remove material ({v} >= {last})",
                f.kind.name()
            )));
        }
        last = v;
        meshes.push(m);
    }
    Ok(meshes)
}

pub fn build_sample(id: String, spec: PartSpec, segments: usize) -> Result<SequenceSample> {
    let ipw_meshes = build_meshes(&spec, segments)?;
    let design_mesh = ipw_meshes.last().cloned().expect("non-empty");
    let labels = spec.labels();
    Ok(SequenceSample {
        id,
        spec,
        ipw_meshes,
        labels,
        design_mesh,
    })
}

/// Enumerates every valid part of `grid`, returning `(id, spec)` pairs sorted
/// by id. Deterministic in `(seed, grid)`.
pub fn enumerate_specs(seed: u64, grid: &GridSpec, parallel: bool) -> Result<Vec<(String, PartSpec)>> {
    grid.validate()?;
    let mut out = Vec::new();
    let mut counters = [0usize; 2];
    for (fi, fam) in grid.family.iter().enumerate() {
        let axes = family_axes(fam);
        let total = axes
            .iter()
            .try_fold(1usize, |acc, &r| acc.checked_mul(r))
            .filter(|&t| t <= MAX_COMBINATIONS)
            .ok_or_else(|| {
                Error::Config(format!(
                    "{} grid exceeds {MAX_COMBINATIONS} combinations",
                    fam.family.name()
                ))
            })?;
        let indices: Vec<usize> = (0..total).collect();
        let specs = crate::exec::map(&indices, parallel, |&idx| {
            let digits = odometer(&axes, idx);
            if !is_canonical(fam, &digits) {
                return None;
            }
            let choice = decode(fam, &digits);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((fi as u64) << 48) ^ (idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let jit = grid.jitter;
            let mut jitter = || {
                if jit > 0.0 {
                    [rng.gen_range(-jit..=jit), rng.gen_range(-jit..=jit)]
                } else {
                    [0.0, 0.0]
                }
            };
            let spec = plan(grid, &choice, &mut jitter);
            build_meshes(&spec, grid.segments).ok().map(|_| spec)
        });
        let n = &mut counters[fam.family as usize];
        for spec in specs.into_iter().flatten() {
            out.push((format!("{}-{:05}", fam.family.name(), *n), spec));
            *n += 1;
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Generates every valid labelled sample of `grid`.
pub fn generate_dataset(seed: u64, grid: &GridSpec) -> Result<Vec<SequenceSample>> {
    let specs = enumerate_specs(seed, grid, true)?;
    crate::exec::try_map(&specs, true, |(id, spec)| build_sample(id.clone(), spec.clone(), grid.segments))
}
