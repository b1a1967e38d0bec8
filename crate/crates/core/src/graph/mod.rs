//! Face-adjacency graphs of in-process meshes and of the parametric design.

pub mod cache;
pub mod design;
pub mod layout;
pub mod norm;
pub mod process;

pub use cache::{extract_sequence, parse_cache_text, to_cache_text, ExtractedSample};
pub use design::{design_to_graph, DesignGraph};
pub use layout::FeatureLayout;
pub use norm::{normalize_features, NormStats};
pub use process::{stl_to_graph, ProcessGraph};

use crate::{Error, Result};

/// Dense row-major feature matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(cols: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Contract(format!("row {i} has {} columns, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Nodes, directed edges (both directions stored) and their features.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub node_features: Matrix,
    /// `[source, target]` pairs.
    pub edge_index: Vec<[usize; 2]>,
    pub edge_features: Matrix,
}

impl Graph {
    pub fn node_count(&self) -> usize {
        self.node_features.rows
    }

    pub fn edge_count(&self) -> usize {
        self.edge_index.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.edge_features.rows != self.edge_index.len() {
            return Err(Error::Contract("edge feature rows do not match edge count".into()));
        }
        let n = self.node_count();
        if self.edge_index.iter().flatten().any(|&v| v >= n) {
            return Err(Error::Contract("edge references a missing node".into()));
        }
        if self
            .node_features
            .data
            .iter()
            .chain(&self.edge_features.data)
            .any(|x| !x.is_finite())
        {
            return Err(Error::Contract("non-finite graph feature".into()));
        }
        Ok(())
    }
}
