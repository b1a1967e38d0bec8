//! Operation labels and parametric part descriptions.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MainOp {
    MillPlanar,
    HoleMaking,
    MillContour,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubOp {
    FloorWall,
    WallFloorProfiling,
    WallProfiling,
    FaceMillZigzag,
    PlanarProfiling,
    PlanarDeburring,
    Drilling,
    SpotDrilling,
    HoleMilling,
    Countersinking,
    CavityMilling,
    CurveDrive,
}

impl MainOp {
    pub const ALL: [MainOp; 3] = [MainOp::MillPlanar, MainOp::HoleMaking, MainOp::MillContour];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MainOp::MillPlanar => "MillPlanar",
            MainOp::HoleMaking => "HoleMaking",
            MainOp::MillContour => "MillContour",
        }
    }
}

impl SubOp {
    pub const ALL: [SubOp; 12] = [
        SubOp::FloorWall,
        SubOp::WallFloorProfiling,
        SubOp::WallProfiling,
        SubOp::FaceMillZigzag,
        SubOp::PlanarProfiling,
        SubOp::PlanarDeburring,
        SubOp::Drilling,
        SubOp::SpotDrilling,
        SubOp::HoleMilling,
        SubOp::Countersinking,
        SubOp::CavityMilling,
        SubOp::CurveDrive,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// The main-operation group this sub-operation belongs to.
    pub fn main(self) -> MainOp {
        use SubOp::*;
        match self {
            FloorWall | WallFloorProfiling | WallProfiling | FaceMillZigzag | PlanarProfiling
            | PlanarDeburring => MainOp::MillPlanar,
            Drilling | SpotDrilling | HoleMilling | Countersinking => MainOp::HoleMaking,
            CavityMilling | CurveDrive => MainOp::MillContour,
        }
    }

    pub fn name(self) -> &'static str {
        use SubOp::*;
        match self {
            FloorWall => "FloorWall",
            WallFloorProfiling => "WallFloorProfiling",
            WallProfiling => "WallProfiling",
            FaceMillZigzag => "FaceMillZigzag",
            PlanarProfiling => "PlanarProfiling",
            PlanarDeburring => "PlanarDeburring",
            Drilling => "Drilling",
            SpotDrilling => "SpotDrilling",
            HoleMilling => "HoleMilling",
            Countersinking => "Countersinking",
            CavityMilling => "CavityMilling",
            CurveDrive => "CurveDrive",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|op| op.name() == s)
    }
}

/// Two-tier machining label. Always constructed from the sub-operation so
/// the pair is consistent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "LabelRepr", into = "LabelRepr")]
pub struct OperationLabel {
    pub main: MainOp,
    pub sub: SubOp,
}

impl OperationLabel {
    pub fn new(sub: SubOp) -> Self {
        Self { main: sub.main(), sub }
    }

    pub fn checked(main: MainOp, sub: SubOp) -> Result<Self> {
        if sub.main() != main {
            return Err(Error::Contract(format!(
                "sub-operation {} does not belong to {}",
                sub.name(),
                main.name()
            )));
        }
        Ok(Self { main, sub })
    }

    /// `Main:Sub` text form.
    pub fn code(&self) -> String {
        format!("{}:{}", self.main.name(), self.sub.name())
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (m, sub) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("malformed label `{s}`")))?;
        let sub = SubOp::parse(sub).ok_or_else(|| Error::Config(format!("unknown sub-operation `{sub}`")))?;
        let main = MainOp::ALL
            .into_iter()
            .find(|x| x.name() == m)
            .ok_or_else(|| Error::Config(format!("unknown main operation `{m}`")))?;
        Self::checked(main, sub)
    }
}

#[derive(Serialize, Deserialize)]
struct LabelRepr(String);

impl TryFrom<LabelRepr> for OperationLabel {
    type Error = Error;
    fn try_from(r: LabelRepr) -> Result<Self> {
        OperationLabel::parse(&r.0)
    }
}

impl From<OperationLabel> for LabelRepr {
    fn from(l: OperationLabel) -> Self {
        LabelRepr(l.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Simple,
    Complex,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Simple => "simple",
            Family::Complex => "complex",
        }
    }
}

/// Machined feature kinds.
///
/// A feature placed at the same center as an earlier feature of a compatible
/// kind is a follow-up pass on the same site (spot drill then drill, drill
/// then countersink, roughing then finishing) rather than a new footprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// `dims = [length_x, length_y]`
    RectPocket,
    /// `dims = [diameter]`; `depth == stock height` makes a through hole
    CircHole,
    /// `dims = [outer_diameter]`, 90° cone on an existing hole; `depth` is
    /// the cone depth
    Countersink,
    /// Lowers the whole top face by `depth`; `dims = []`
    FaceReduction,
    /// Rounded-rectangle cavity, `dims = [length_x, length_y, corner_radius]`
    ContourCavity,
    /// Profiles the outer walls inward by `dims[0]`; `depth` is the stock height
    OutlineProfile,
    /// Chamfers the four vertical outer edges by `dims[0]`
    EdgeChamfer,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::RectPocket => "rect_pocket",
            FeatureKind::CircHole => "circ_hole",
            FeatureKind::Countersink => "countersink",
            FeatureKind::FaceReduction => "face_reduction",
            FeatureKind::ContourCavity => "contour_cavity",
            FeatureKind::OutlineProfile => "outline_profile",
            FeatureKind::EdgeChamfer => "edge_chamfer",
        }
    }

    fn dim_count(self) -> usize {
        match self {
            FeatureKind::RectPocket => 2,
            FeatureKind::CircHole | FeatureKind::Countersink => 1,
            FeatureKind::FaceReduction => 0,
            FeatureKind::ContourCavity => 3,
            FeatureKind::OutlineProfile | FeatureKind::EdgeChamfer => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub kind: FeatureKind,
    pub center: [f64; 2],
    pub dims: Vec<f64>,
    pub depth: f64,
    pub label: OperationLabel,
}

/// Aspect ratio at or above which a rectangular pocket is a wall-profiling
/// (slot-like) operation rather than floor/wall milling.
pub const SLOT_ASPECT: f64 = 3.0;
/// Largest diameter (mm) still produced by drilling.
pub const MAX_DRILL_DIAMETER: f64 = 10.0;

impl FeatureSpec {
    /// Builds a feature with the default label for its kind and size.
    pub fn new(kind: FeatureKind, center: [f64; 2], dims: Vec<f64>, depth: f64) -> Self {
        let label = default_label(kind, &dims);
        Self {
            kind,
            center,
            dims,
            depth,
            label,
        }
    }

    pub fn with_label(mut self, sub: SubOp) -> Self {
        self.label = OperationLabel::new(sub);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() != self.kind.dim_count() {
            return Err(Error::Geometry(format!(
                "{} expects {} dims, got {}",
                self.kind.name(),
                self.kind.dim_count(),
                self.dims.len()
            )));
        }
        if self.dims.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::Geometry(format!("{} has non-positive dims", self.kind.name())));
        }
        if !(self.depth.is_finite() && self.depth > 0.0) {
            return Err(Error::Geometry(format!("{} has non-positive depth", self.kind.name())));
        }
        if self.center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Geometry("non-finite feature center".into()));
        }
        Ok(())
    }
}

/// Label assigned to a feature when the grid does not override it.
pub fn default_label(kind: FeatureKind, dims: &[f64]) -> OperationLabel {
    let sub = match kind {
        FeatureKind::RectPocket => {
            let (a, b) = (dims.first().copied().unwrap_or(1.0), dims.get(1).copied().unwrap_or(1.0));
            if a.max(b) >= SLOT_ASPECT * a.min(b) {
                SubOp::WallProfiling
            } else {
                SubOp::FloorWall
            }
        }
        FeatureKind::CircHole => {
            if dims.first().copied().unwrap_or(0.0) <= MAX_DRILL_DIAMETER {
                SubOp::Drilling
            } else {
                SubOp::HoleMilling
            }
        }
        FeatureKind::Countersink => SubOp::Countersinking,
        FeatureKind::FaceReduction => SubOp::FaceMillZigzag,
        FeatureKind::ContourCavity => SubOp::CavityMilling,
        FeatureKind::OutlineProfile => SubOp::PlanarProfiling,
        FeatureKind::EdgeChamfer => SubOp::PlanarDeburring,
    };
    OperationLabel::new(sub)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub family: Family,
    /// `(length, width, height)` in mm.
    pub stock_dims: [f64; 3],
    /// Features in machining order.
    pub features: Vec<FeatureSpec>,
}

impl PartSpec {
    pub fn labels(&self) -> Vec<OperationLabel> {
        self.features.iter().map(|f| f.label).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taxonomy_group_sizes() {
        let count = |m| SubOp::ALL.iter().filter(|s| s.main() == m).count();
        assert_eq!(count(MainOp::MillPlanar), 6);
        assert_eq!(count(MainOp::HoleMaking), 4);
        assert_eq!(count(MainOp::MillContour), 2);
        for (i, s) in SubOp::ALL.iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(SubOp::parse(s.name()), Some(*s));
        }
    }

    #[test]
    fn label_consistency_enforced() {
        assert!(OperationLabel::checked(MainOp::HoleMaking, SubOp::FloorWall).is_err());
        let l = OperationLabel::parse("HoleMaking:Countersinking").unwrap();
        assert_eq!(l, OperationLabel::new(SubOp::Countersinking));
        assert!(OperationLabel::parse("MillPlanar:Drilling").is_err());
    }

    #[test]
    fn default_mapping() {
        let lbl = |k, d: &[f64]| default_label(k, d).sub;
        assert_eq!(lbl(FeatureKind::RectPocket, &[20.0, 10.0]), SubOp::FloorWall);
        assert_eq!(lbl(FeatureKind::RectPocket, &[30.0, 10.0]), SubOp::WallProfiling);
        assert_eq!(lbl(FeatureKind::CircHole, &[10.0]), SubOp::Drilling);
        assert_eq!(lbl(FeatureKind::CircHole, &[12.0]), SubOp::HoleMilling);
        assert_eq!(lbl(FeatureKind::ContourCavity, &[20.0, 10.0, 2.0]), SubOp::CavityMilling);
        assert_eq!(lbl(FeatureKind::FaceReduction, &[]), SubOp::FaceMillZigzag);
    }
}
