//! On-disk layout of a generated dataset.
//!
//! ```text
//! <root>/dataset_manifest.txt
//! <root>/samples/<id>/ipw_01.stl .. ipw_NN.stl
//! <root>/samples/<id>/design.stl
//! <root>/samples/<id>/part.toml
//! ```
//!
//! The manifest holds one line per sample, sorted by id, with
//! space-separated `key=value` fields.

use std::fs;
use std::path::Path;

use super::mesh::TriMesh;
use super::part::{Family, OperationLabel, PartSpec};
use super::stl::{read_stl, write_stl, StlFlavor};
use super::synth::SequenceSample;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "dataset_manifest.txt";
const MANIFEST_HEADER: &str = "# machplan dataset manifest v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub id: String,
    pub family: Family,
    pub labels: Vec<OperationLabel>,
    pub ipw: Vec<String>,
    pub design: String,
    pub spec: String,
}

impl ManifestRecord {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn to_line(&self) -> String {
        let labels: Vec<String> = self.labels.iter().map(|l| l.code()).collect();
        format!(
            "id={} family={} T={} labels={} ipw={} design={} spec={}",
            self.id,
            self.family.name(),
            self.labels.len(),
            labels.join(","),
            self.ipw.join(","),
            self.design,
            self.spec
        )
    }

    fn parse_line(line: &str, offset: usize) -> Result<Self> {
        let mut id = None;
        let mut family = None;
        let mut t = None;
        let mut labels = None;
        let mut ipw = None;
        let mut design = None;
        let mut spec = None;
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::parse(offset, format!("malformed manifest field `{field}`")))?;
            match k {
                "id" => id = Some(v.to_string()),
                "family" => {
                    family = Some(match v {
                        "simple" => Family::Simple,
                        "complex" => Family::Complex,
                        _ => return Err(Error::parse(offset, format!("unknown family `{v}`"))),
                    })
                }
                "T" => t = Some(v.parse::<usize>().map_err(|_| Error::parse(offset, "bad T"))?),
                "labels" => {
                    labels = Some(
                        v.split(',')
                            .map(OperationLabel::parse)
                            .collect::<Result<Vec<_>>>()
                            .map_err(|e| Error::parse(offset, e.to_string()))?,
                    )
                }
                "ipw" => ipw = Some(v.split(',').map(str::to_string).collect::<Vec<_>>()),
                "design" => design = Some(v.to_string()),
                "spec" => spec = Some(v.to_string()),
                _ => return Err(Error::parse(offset, format!("unknown manifest key `{k}`"))),
            }
        }
        let missing = |k: &str| Error::parse(offset, format!("manifest record lacks `{k}`"));
        let rec = Self {
            id: id.ok_or_else(|| missing("id"))?,
            family: family.ok_or_else(|| missing("family"))?,
            labels: labels.ok_or_else(|| missing("labels"))?,
            ipw: ipw.ok_or_else(|| missing("ipw"))?,
            design: design.ok_or_else(|| missing("design"))?,
            spec: spec.ok_or_else(|| missing("spec"))?,
        };
        let t = t.ok_or_else(|| missing("T"))?;
        if t == 0 || rec.labels.len() != t || rec.ipw.len() != t {
            return Err(Error::parse(offset, format!("record {} has inconsistent length T={t}", rec.id)));
        }
        Ok(rec)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut recs: Vec<&ManifestRecord> = self.records.iter().collect();
        recs.sort_by(|a, b| a.id.cmp(&b.id));
        let mut s = String::from(MANIFEST_HEADER);
        s.push('\n');
        for r in recs {
            s.push_str(&r.to_line());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let body = line.trim();
            if !body.is_empty() && !body.starts_with('#') {
                records.push(ManifestRecord::parse_line(body, offset)?);
            }
            offset += line.len();
        }
        Ok(Self { records })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Serialized files of one sample as `(relative path, bytes)` pairs, plus
/// its manifest record.
pub fn sample_files(sample: &SequenceSample, flavor: StlFlavor) -> Result<(ManifestRecord, Vec<(String, Vec<u8>)>)> {
    let dir = format!("samples/{}", sample.id);
    let mut files = Vec::with_capacity(sample.ipw_meshes.len() + 2);
    let mut ipw = Vec::with_capacity(sample.ipw_meshes.len());
    for (t, mesh) in sample.ipw_meshes.iter().enumerate() {
        let rel = format!("{dir}/ipw_{:02}.stl", t + 1);
        files.push((rel.clone(), write_stl(mesh, flavor)));
        ipw.push(rel);
    }
    let design = format!("{dir}/design.stl");
    files.push((design.clone(), write_stl(&sample.design_mesh, flavor)));
    let spec = format!("{dir}/part.toml");
    let text = toml::to_string(&sample.spec).map_err(|e| Error::Config(e.to_string()))?;
    files.push((spec.clone(), text.into_bytes()));
    let rec = ManifestRecord {
        id: sample.id.clone(),
        family: sample.spec.family,
        labels: sample.labels.clone(),
        ipw,
        design,
        spec,
    };
    Ok((rec, files))
}

/// Writes one sample's files below `root` and returns its manifest record.
pub fn write_sample(root: &Path, sample: &SequenceSample, flavor: StlFlavor) -> Result<ManifestRecord> {
    let (rec, files) = sample_files(sample, flavor)?;
    for (rel, bytes) in files {
        write_file(&root.join(rel), &bytes)?;
    }
    Ok(rec)
}

/// Reassembles a sample from its files below `root`.
pub fn read_sample(root: &Path, rec: &ManifestRecord) -> Result<SequenceSample> {
    let ipw_meshes = rec.ipw.iter().map(|p| read_mesh(root, p)).collect::<Result<Vec<_>>>()?;
    Ok(SequenceSample {
        id: rec.id.clone(),
        spec: read_part_spec(root, rec)?,
        ipw_meshes,
        labels: rec.labels.clone(),
        design_mesh: read_mesh(root, &rec.design)?,
    })
}

pub fn write_manifest(root: &Path, manifest: &DatasetManifest) -> Result<()> {
    write_file(&root.join(MANIFEST_FILE), manifest.to_text().as_bytes())
}

pub fn read_part_spec(root: &Path, rec: &ManifestRecord) -> Result<PartSpec> {
    let path = root.join(&rec.spec);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn read_mesh(root: &Path, rel: &str) -> Result<TriMesh> {
    let path = root.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    read_stl(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::part::SubOp;

    #[test]
    fn manifest_text_round_trip_sorted() {
        let rec = |id: &str| ManifestRecord {
            id: id.into(),
            family: Family::Complex,
            labels: vec![OperationLabel::new(SubOp::Drilling), OperationLabel::new(SubOp::PlanarDeburring)],
            ipw: vec![format!("samples/{id}/ipw_01.stl"), format!("samples/{id}/ipw_02.stl")],
            design: format!("samples/{id}/design.stl"),
            spec: format!("samples/{id}/part.toml"),
        };
        let m = DatasetManifest { records: vec![rec("b"), rec("a")] };
        let text = m.to_text();
        let back = DatasetManifest::parse(&text).unwrap();
        assert_eq!(back.records[0].id, "a");
        assert_eq!(back.records[1], m.records[0]);
    }

    #[test]
    fn inconsistent_record_rejected() {
        let line = "id=x family=simple T=2 labels=HoleMaking:Drilling ipw=a.stl design=d.stl spec=p.toml\n";
        assert!(matches!(DatasetManifest::parse(line), Err(Error::Parse { .. })));
    }
}
