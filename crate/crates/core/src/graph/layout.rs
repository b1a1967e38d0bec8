//! Column layout of the node and edge feature matrices.

/// One named block of feature columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub name: &'static str,
    pub offset: usize,
    pub width: usize,
    /// One-hot blocks are left untouched by normalization.
    pub one_hot: bool,
}

/// Ordered blocks that partition a feature vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureLayout {
    pub name: &'static str,
    pub blocks: Vec<Block>,
}

impl FeatureLayout {
    fn build(name: &'static str, spec: &[(&'static str, usize, bool)]) -> Self {
        let mut offset = 0;
        let blocks = spec
            .iter()
            .map(|&(name, width, one_hot)| {
                let b = Block {
                    name,
                    offset,
                    width,
                    one_hot,
                };
                offset += width;
                b
            })
            .collect();
        Self { name, blocks }
    }

    pub fn width(&self) -> usize {
        self.blocks.iter().map(|b| b.width).sum()
    }

    pub fn block(&self, name: &str) -> Option<Block> {
        self.blocks.iter().copied().find(|b| b.name == name)
    }

    /// Per-column flag: `true` for one-hot columns.
    pub fn one_hot_mask(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| std::iter::repeat(b.one_hot).take(b.width))
            .collect()
    }

    /// `name:offset:width` tokens, as written in graph cache headers.
    pub fn describe(&self) -> String {
        self.blocks
            .iter()
            .map(|b| format!("{}:{}:{}", b.name, b.offset, b.width))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Triangle-face node features (width 16).
    pub fn stl_node() -> Self {
        Self::build(
            "stl_node",
            &[
                ("centroid", 3, false),
                ("normal", 3, false),
                ("area", 1, false),
                ("perimeter", 1, false),
                ("edge_length", 1, false),
                ("angles", 3, false),
                ("angle_type", 3, true),
                ("compactness", 1, false),
            ],
        )
    }

    /// Face-adjacency edge features (width 7).
    pub fn stl_edge() -> Self {
        Self::build(
            "stl_edge",
            &[
                ("centroid_distance", 1, false),
                ("normal_distance", 1, false),
                ("shared_edge_length", 1, false),
                ("edge_midpoint", 3, false),
                ("dihedral_angle", 1, false),
            ],
        )
    }

    /// Analytic design-face node features (width 9).
    pub fn brep_node() -> Self {
        Self::build(
            "brep_node",
            &[
                ("surface_type", 3, true),
                ("area", 1, false),
                ("uv_span", 2, false),
                ("centroid", 3, false),
            ],
        )
    }

    /// Design-face adjacency features (width 4).
    pub fn brep_edge() -> Self {
        Self::build(
            "brep_edge",
            &[
                ("shared_edge_length", 1, false),
                ("dihedral_angle", 1, false),
                ("curve_type", 2, true),
            ],
        )
    }
}

pub const D_STL: usize = 16;
pub const E_STL: usize = 7;
pub const D_BREP: usize = 9;
pub const E_BREP: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_partition_without_gaps() {
        for (layout, width) in [
            (FeatureLayout::stl_node(), D_STL),
            (FeatureLayout::stl_edge(), E_STL),
            (FeatureLayout::brep_node(), D_BREP),
            (FeatureLayout::brep_edge(), E_BREP),
        ] {
            assert_eq!(layout.width(), width);
            let mut next = 0;
            for b in &layout.blocks {
                assert_eq!(b.offset, next, "{} gap before {}", layout.name, b.name);
                assert!(b.width > 0);
                next += b.width;
            }
        }
        assert_eq!(FeatureLayout::stl_node().block("angle_type").unwrap().offset, 12);
    }
}
