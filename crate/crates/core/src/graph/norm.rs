//! Per-column feature standardization fitted on training samples only.

use super::layout::FeatureLayout;
use super::{ExtractedSample, Matrix};
use crate::{Error, Result};

/// Columns with a standard deviation below this are only centred.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnStats {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ColumnStats {
    fn fit<'a>(layout: &FeatureLayout, mats: impl Iterator<Item = &'a Matrix> + Clone) -> Self {
        let w = layout.width();
        let one_hot = layout.one_hot_mask();
        let mut n = 0usize;
        let mut sum = vec![0.0; w];
        for m in mats.clone() {
            n += m.rows;
            for i in 0..m.rows {
                for (s, x) in sum.iter_mut().zip(m.row(i)) {
                    *s += x;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| if n > 0 { s / n as f64 } else { 0.0 }).collect();
        let mut sq = vec![0.0; w];
        for m in mats {
            for i in 0..m.rows {
                for ((q, x), mu) in sq.iter_mut().zip(m.row(i)).zip(&mean) {
                    *q += (x - mu) * (x - mu);
                }
            }
        }
        let mut stats = Self {
            mean,
            scale: sq
                .iter()
                .map(|q| {
                    let sd = if n > 0 { (q / n as f64).sqrt() } else { 0.0 };
                    if sd < MIN_STD {
                        1.0
                    } else {
                        sd
                    }
                })
                .collect(),
        };
        for (c, &oh) in one_hot.iter().enumerate() {
            if oh {
                stats.mean[c] = 0.0;
                stats.scale[c] = 1.0;
            }
        }
        stats
    }

    fn apply(&self, m: &mut Matrix) -> Result<()> {
        if m.cols != self.mean.len() {
            return Err(Error::Shape {
                op: "normalize",
                lhs: vec![m.rows, m.cols],
                rhs: vec![self.mean.len()],
            });
        }
        for i in 0..m.rows {
            for ((x, mu), s) in m.row_mut(i).iter_mut().zip(&self.mean).zip(&self.scale) {
                *x = (*x - mu) / s;
            }
        }
        Ok(())
    }
}

/// Statistics for the four feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub stl_node: ColumnStats,
    pub stl_edge: ColumnStats,
    pub brep_node: ColumnStats,
    pub brep_edge: ColumnStats,
}

impl NormStats {
    /// Fits mean and scale over every row of every graph in `train`.
    pub fn fit(train: &[ExtractedSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract("cannot fit normalization on an empty split".into()));
        }
        let process = || train.iter().flat_map(|s| s.process.iter().map(|p| &p.graph));
        let design = || train.iter().map(|s| &s.design.graph);
        Ok(Self {
            stl_node: ColumnStats::fit(&FeatureLayout::stl_node(), process().map(|g| &g.node_features)),
            stl_edge: ColumnStats::fit(&FeatureLayout::stl_edge(), process().map(|g| &g.edge_features)),
            brep_node: ColumnStats::fit(&FeatureLayout::brep_node(), design().map(|g| &g.node_features)),
            brep_edge: ColumnStats::fit(&FeatureLayout::brep_edge(), design().map(|g| &g.edge_features)),
        })
    }

    pub fn apply(&self, sample: &mut ExtractedSample) -> Result<()> {
        for p in &mut sample.process {
            self.stl_node.apply(&mut p.graph.node_features)?;
            self.stl_edge.apply(&mut p.graph.edge_features)?;
        }
        self.brep_node.apply(&mut sample.design.graph.node_features)?;
        self.brep_edge.apply(&mut sample.design.graph.edge_features)
    }

    /// `(name, values)` pairs in a fixed order, for persistence.
    pub fn named_vectors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (name, c) in self.parts() {
            out.push((format!("{name}.mean"), c.mean.as_slice()));
            out.push((format!("{name}.scale"), c.scale.as_slice()));
        }
        out
    }

    /// Inverse of [`NormStats::named_vectors`].
    pub fn from_named(mut get: impl FnMut(&str) -> Option<Vec<f64>>) -> Result<Self> {
        let mut read = |name: &str, layout: FeatureLayout| -> Result<ColumnStats> {
            let mean = get(&format!("{name}.mean"));
            let scale = get(&format!("{name}.scale"));
            match (mean, scale) {
                (Some(mean), Some(scale)) if mean.len() == layout.width() && scale.len() == layout.width() => {
                    Ok(ColumnStats { mean, scale })
                }
                _ => Err(Error::Contract(format!("missing or malformed normalization block {name}"))),
            }
        };
        Ok(Self {
            stl_node: read("stl_node", FeatureLayout::stl_node())?,
            stl_edge: read("stl_edge", FeatureLayout::stl_edge())?,
            brep_node: read("brep_node", FeatureLayout::brep_node())?,
            brep_edge: read("brep_edge", FeatureLayout::brep_edge())?,
        })
    }

    fn parts(&self) -> [(&'static str, &ColumnStats); 4] {
        [
            ("stl_node", &self.stl_node),
            ("stl_edge", &self.stl_edge),
            ("brep_node", &self.brep_node),
            ("brep_edge", &self.brep_edge),
        ]
    }
}

/// Fits statistics on `train` and standardizes every sample in both splits.
pub fn normalize_features(
    mut train: Vec<ExtractedSample>,
    mut rest: Vec<ExtractedSample>,
) -> Result<(Vec<ExtractedSample>, Vec<ExtractedSample>, NormStats)> {
    let stats = NormStats::fit(&train)?;
    for s in train.iter_mut().chain(rest.iter_mut()) {
        stats.apply(s)?;
    }
    Ok((train, rest, stats))
}
