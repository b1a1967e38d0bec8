//! Extracted samples and their plain-text graph cache.
//!
//! ```text
//! machplan-graph v1
//! id simple-00003
//! family simple
//! labels MillPlanar:FaceMilling,HoleMaking:Drilling
//! layout stl_node centroid:0:3 normal:3:3 ...
//! design nodes 7 edges 28
//! n <d_brep floats>
//! e <src> <dst> <e_brep floats>
//! process 1 nodes 12 edges 36
//! ...
//! end
//! ```

use super::design::{design_to_graph, DesignGraph};
use super::layout::FeatureLayout;
use super::process::{process_graphs, ProcessGraph};
use super::{Graph, Matrix};
use crate::geometry::synth::SequenceSample;
use crate::geometry::{Family, OperationLabel};
use crate::{Error, Result};

pub const CACHE_MAGIC: &str = "machplan-graph v1";

/// Design graph plus one process graph per operation step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedSample {
    pub id: String,
    pub family: Family,
    pub labels: Vec<OperationLabel>,
    pub design: DesignGraph,
    pub process: Vec<ProcessGraph>,
}

impl ExtractedSample {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Extracts the design graph and the `T` process graphs of one sample.
pub fn extract_sequence(sample: &SequenceSample) -> Result<ExtractedSample> {
    Ok(ExtractedSample {
        id: sample.id.clone(),
        family: sample.spec.family,
        labels: sample.labels.clone(),
        design: design_to_graph(&sample.spec)?,
        process: process_graphs(sample)?,
    })
}

fn layouts() -> [FeatureLayout; 4] {
    [
        FeatureLayout::stl_node(),
        FeatureLayout::stl_edge(),
        FeatureLayout::brep_node(),
        FeatureLayout::brep_edge(),
    ]
}

fn push_graph(out: &mut String, head: String, g: &Graph) {
    use std::fmt::Write;
    let _ = writeln!(out, "{head} nodes {} edges {}", g.node_count(), g.edge_count());
    for i in 0..g.node_count() {
        out.push('n');
        for x in g.node_features.row(i) {
            let _ = write!(out, " {x}");
        }
        out.push('\n');
    }
    for (k, [s, d]) in g.edge_index.iter().enumerate() {
        let _ = write!(out, "e {s} {d}");
        for x in g.edge_features.row(k) {
            let _ = write!(out, " {x}");
        }
        out.push('\n');
    }
}

pub fn to_cache_text(s: &ExtractedSample) -> String {
    let mut out = format!("{CACHE_MAGIC}\nid {}\nfamily {}\n", s.id, s.family.name());
    let codes: Vec<String> = s.labels.iter().map(|l| l.code()).collect();
    out.push_str(&format!("labels {}\n", codes.join(",")));
    for l in layouts() {
        out.push_str(&format!("layout {} {}\n", l.name, l.describe()));
    }
    push_graph(&mut out, "design".into(), &s.design.graph);
    for p in &s.process {
        push_graph(&mut out, format!("process {}", p.timestep), &p.graph);
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return Err(Error::parse(self.pos, "unexpected end of graph cache"));
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let end = rest.find('\n').map_or(rest.len(), |i| i);
        self.pos = start + end + 1;
        Ok((start, rest[..end].trim_end_matches('\r')))
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (at, line) = self.next()?;
        match line.strip_prefix(key).and_then(|r| r.strip_prefix(' ')) {
            Some(v) => Ok((at, v)),
            None => Err(Error::parse(at, format!("expected `{key}` line"))),
        }
    }
}

fn floats(at: usize, toks: &[&str], want: usize) -> Result<Vec<f64>> {
    if toks.len() != want {
        return Err(Error::parse(at, format!("expected {want} values, found {}", toks.len())));
    }
    toks.iter()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::parse(at, format!("bad number `{t}`")))
        })
        .collect()
}

fn read_graph(lines: &mut Lines, head: &str, d: usize, e: usize) -> Result<(usize, Graph)> {
    let (at, rest) = lines.keyed(head)?;
    let toks: Vec<&str> = rest.split_whitespace().collect();
    let bad = || Error::parse(at, format!("malformed `{head}` header"));
    let (tag, counts) = match toks.as_slice() {
        ["nodes", n, "edges", m] => (0, [*n, *m]),
        [t, "nodes", n, "edges", m] => (t.parse().map_err(|_| bad())?, [*n, *m]),
        _ => return Err(bad()),
    };
    let n: usize = counts[0].parse().map_err(|_| bad())?;
    let m: usize = counts[1].parse().map_err(|_| bad())?;
    let mut nodes = Matrix::zeros(n, d);
    for i in 0..n {
        let (at, rest) = lines.keyed("n")?;
        let toks: Vec<&str> = rest.split_whitespace().collect();
        nodes.row_mut(i).copy_from_slice(&floats(at, &toks, d)?);
    }
    let mut index = Vec::with_capacity(m);
    let mut feats = Matrix::zeros(m, e);
    for k in 0..m {
        let (at, rest) = lines.keyed("e")?;
        let toks: Vec<&str> = rest.split_whitespace().collect();
        if toks.len() < 2 {
            return Err(Error::parse(at, "edge line without endpoints"));
        }
        let ends: Vec<usize> = toks[..2]
            .iter()
            .map(|t| t.parse::<usize>().ok().filter(|&v| v < n))
            .collect::<Option<_>>()
            .ok_or_else(|| Error::parse(at, "edge endpoint out of range"))?;
        index.push([ends[0], ends[1]]);
        feats.row_mut(k).copy_from_slice(&floats(at, &toks[2..], e)?);
    }
    Ok((
        tag,
        Graph {
            node_features: nodes,
            edge_index: index,
            edge_features: feats,
        },
    ))
}

pub fn parse_cache_text(text: &str) -> Result<ExtractedSample> {
    let mut lines = Lines { text, pos: 0 };
    let (at, magic) = lines.next()?;
    if magic != CACHE_MAGIC {
        return Err(Error::parse(at, "not a machplan graph cache"));
    }
    let (_, id) = lines.keyed("id")?;
    let (at, fam) = lines.keyed("family")?;
    let family = match fam {
        "simple" => Family::Simple,
        "complex" => Family::Complex,
        other => return Err(Error::parse(at, format!("unknown family `{other}`"))),
    };
    let (at, codes) = lines.keyed("labels")?;
    let labels = codes
        .split(',')
        .map(OperationLabel::parse)
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::parse(at, e.to_string()))?;
    for l in layouts() {
        let (at, rest) = lines.keyed("layout")?;
        if rest != format!("{} {}", l.name, l.describe()) {
            return Err(Error::parse(at, format!("feature layout mismatch for {}", l.name)));
        }
    }
    let (_, design) = read_graph(&mut lines, "design", 9, 4)?;
    let mut process = Vec::with_capacity(labels.len());
    for t in 1..=labels.len() {
        let at = lines.pos;
        let (tag, graph) = read_graph(&mut lines, "process", 16, 7)?;
        if tag != t {
            return Err(Error::parse(at, format!("expected process step {t}, found {tag}")));
        }
        process.push(ProcessGraph { graph, timestep: t });
    }
    let (at, end) = lines.next()?;
    if end != "end" {
        return Err(Error::parse(at, "expected `end`"));
    }
    let sample = ExtractedSample {
        id: id.to_string(),
        family,
        labels,
        design: DesignGraph { graph: design },
        process,
    };
    sample.design.graph.check()?;
    for p in &sample.process {
        p.graph.check()?;
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::synth::build_sample;
    use crate::geometry::{FeatureKind, FeatureSpec, PartSpec};

    fn sample() -> ExtractedSample {
        let spec = PartSpec {
            family: Family::Simple,
            stock_dims: [80.0, 50.0, 20.0],
            features: vec![
                FeatureSpec::new(FeatureKind::RectPocket, [30.0, 25.0], vec![20.0, 12.0], 6.0),
                FeatureSpec::new(FeatureKind::CircHole, [62.0, 25.0], vec![7.3], 20.0),
            ],
        };
        extract_sequence(&build_sample("simple-00000".into(), spec, 16).unwrap()).unwrap()
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let s = sample();
        assert_eq!(s.process.len(), 2);
        assert_eq!(s.process[1].timestep, 2);
        let text = to_cache_text(&s);
        assert_eq!(parse_cache_text(&text).unwrap(), s);
    }

    #[test]
    fn corrupt_cache_reports_offset() {
        let text = to_cache_text(&sample());
        let bad = text.replacen("\nn ", "\nn x", 1);
        let at = bad.find("\nn x").unwrap() + 1;
        match parse_cache_text(&bad).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, at),
            e => panic!("{e}"),
        }
        assert!(parse_cache_text(&text[..text.len() - 4]).is_err());
    }
}
