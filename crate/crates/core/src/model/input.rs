//! Model-ready graphs: self-loops added, process steps merged into one
//! disjoint union so each encoder stage runs as a single batched pass.

use crate::geometry::OperationLabel;
use crate::graph::{ExtractedSample, Graph};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A graph with self-loops appended after the original directed edges.
/// Self-loops carry all-zero edge features.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedGraph {
    pub nodes: Tensor,
    pub edges: Tensor,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
}

impl PreparedGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.rows()
    }

    pub fn from_graph(g: &Graph) -> Result<Self> {
        Self::union(&[g])
    }

    /// Disjoint union of `graphs`, nodes numbered in order.
    pub fn union(graphs: &[&Graph]) -> Result<Self> {
        let d = graphs.first().map_or(0, |g| g.node_features.cols);
        let e = graphs.first().map_or(0, |g| g.edge_features.cols);
        let (mut nodes, mut edges) = (Vec::new(), Vec::new());
        let (mut src, mut dst) = (Vec::new(), Vec::new());
        let mut offset = 0;
        for g in graphs {
            g.check()?;
            if g.node_features.cols != d || g.edge_features.cols != e {
                return Err(Error::Contract("graphs in a union must share feature widths".into()));
            }
            nodes.extend_from_slice(&g.node_features.data);
            edges.extend_from_slice(&g.edge_features.data);
            for [s, t] in &g.edge_index {
                src.push(s + offset);
                dst.push(t + offset);
            }
            offset += g.node_count();
        }
        if offset == 0 {
            return Err(Error::Contract("graph without nodes".into()));
        }
        let loops = offset;
        edges.resize(edges.len() + loops * e, 0.0);
        src.extend(0..loops);
        dst.extend(0..loops);
        Ok(Self {
            nodes: Tensor::matrix(offset, d, nodes)?,
            edges: Tensor::matrix(src.len(), e, edges)?,
            src,
            dst,
        })
    }
}

/// One sequence as consumed by the model.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub id: String,
    pub design: PreparedGraph,
    /// All process graphs as one disjoint union.
    pub process: PreparedGraph,
    /// 0-based step of every union node.
    pub node_step: Vec<usize>,
    pub steps: usize,
    pub labels: Vec<OperationLabel>,
}

impl SequenceInput {
    pub fn from_sample(s: &ExtractedSample) -> Result<Self> {
        if s.process.len() != s.labels.len() || s.process.is_empty() {
            return Err(Error::Contract(format!(
                "sample {} has {} graphs for {} labels",
                s.id,
                s.process.len(),
                s.labels.len()
            )));
        }
        for (i, p) in s.process.iter().enumerate() {
            if p.timestep != i + 1 {
                return Err(Error::Contract(format!("sample {} has out-of-order timesteps", s.id)));
            }
        }
        let graphs: Vec<&Graph> = s.process.iter().map(|p| &p.graph).collect();
        let node_step = s
            .process
            .iter()
            .enumerate()
            .flat_map(|(t, p)| std::iter::repeat(t).take(p.graph.node_count()))
            .collect();
        let design = PreparedGraph::from_graph(&s.design.graph)?;
        Ok(Self {
            id: s.id.clone(),
            design,
            process: PreparedGraph::union(&graphs)?,
            node_step,
            steps: s.labels.len(),
            labels: s.labels.clone(),
        })
    }

    pub fn main_targets(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.main.index()).collect()
    }

    pub fn sub_targets(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.sub.index()).collect()
    }
}
