//! STL reading and writing (binary and ASCII).
//!
//! Binary layout: 80-byte header, little-endian `u32` triangle count, then
//! one 50-byte record per triangle (normal and three vertices as `f32`,
//! followed by a `u16` attribute word).

use std::fmt::Write as _;

use super::mesh::{TriMesh, WELD_TOLERANCE};
use super::vec3::Vec3;
use crate::{Error, Result};

const HEADER_LEN: usize = 80;
const RECORD_LEN: usize = 50;
const HEADER_TEXT: &[u8] = b"binary STL / machplan";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StlFlavor {
    Binary,
    Ascii,
}

/// Exact byte size of a binary STL with `triangles` records.
pub const fn binary_size(triangles: usize) -> usize {
    HEADER_LEN + 4 + RECORD_LEN * triangles
}

pub fn write_stl(mesh: &TriMesh, flavor: StlFlavor) -> Vec<u8> {
    match flavor {
        StlFlavor::Binary => write_binary(mesh),
        StlFlavor::Ascii => write_ascii(mesh).into_bytes(),
    }
}

fn write_binary(mesh: &TriMesh) -> Vec<u8> {
    let mut out = Vec::with_capacity(binary_size(mesh.face_count()));
    let mut header = [0u8; HEADER_LEN];
    header[..HEADER_TEXT.len()].copy_from_slice(HEADER_TEXT);
    out.extend_from_slice(&header);
    out.extend_from_slice(&(mesh.face_count() as u32).to_le_bytes());
    for f in 0..mesh.face_count() {
        let n = mesh.face_normal(f);
        for c in n {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
        for p in mesh.corners(f) {
            for c in p {
                out.extend_from_slice(&(c as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&0u16.to_le_bytes());
    }
    out
}

fn write_ascii(mesh: &TriMesh) -> String {
    let mut s = String::from("solid machplan\n");
    for f in 0..mesh.face_count() {
        let n = mesh.face_normal(f);
        let _ = writeln!(s, "  facet normal {:e} {:e} {:e}", n[0], n[1], n[2]);
        s.push_str("    outer loop\n");
        for p in mesh.corners(f) {
            let _ = writeln!(s, "      vertex {:e} {:e} {:e}", p[0], p[1], p[2]);
        }
        s.push_str("    endloop\n  endfacet\n");
    }
    s.push_str("endsolid machplan\n");
    s
}

/// Parses binary or ASCII STL and welds coincident corners back into an
/// indexed mesh.
pub fn read_stl(bytes: &[u8]) -> Result<TriMesh> {
    let soup = read_soup(bytes)?;
    Ok(TriMesh::from_soup(&soup, WELD_TOLERANCE))
}

/// Parses STL into a raw triangle soup without welding.
pub fn read_soup(bytes: &[u8]) -> Result<Vec<[Vec3; 3]>> {
    if looks_ascii(bytes) {
        parse_ascii(bytes)
    } else {
        parse_binary(bytes)
    }
}

fn looks_ascii(bytes: &[u8]) -> bool {
    if bytes.len() >= HEADER_LEN + 4 {
        let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
        if count.checked_mul(RECORD_LEN).map(|r| r + HEADER_LEN + 4) == Some(bytes.len()) {
            return false;
        }
    }
    let start = bytes.iter().position(|b| !b.is_ascii_whitespace()).unwrap_or(0);
    bytes[start..].starts_with(b"solid")
}

fn parse_binary(bytes: &[u8]) -> Result<Vec<[Vec3; 3]>> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::parse(bytes.len(), "truncated binary STL header"));
    }
    let count = u32::from_le_bytes(bytes[80..84].try_into().unwrap()) as usize;
    let expected = count
        .checked_mul(RECORD_LEN)
        .and_then(|r| r.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| Error::parse(80, "triangle count overflows"))?;
    if bytes.len() < expected {
        let complete = (bytes.len() - HEADER_LEN - 4) / RECORD_LEN;
        return Err(Error::parse(
            HEADER_LEN + 4 + complete * RECORD_LEN,
            format!("truncated: header declares {count} triangles, record {complete} incomplete"),
        ));
    }
    if bytes.len() > expected {
        return Err(Error::parse(
            expected,
            format!(
                "triangle count mismatch: header declares {count} but {} trailing bytes follow",
                bytes.len() - expected
            ),
        ));
    }
    let mut soup = Vec::with_capacity(count);
    for t in 0..count {
        let rec = HEADER_LEN + 4 + t * RECORD_LEN;
        let mut tri = [[0.0; 3]; 3];
        for (k, corner) in tri.iter_mut().enumerate() {
            for (c, slot) in corner.iter_mut().enumerate() {
                let off = rec + 12 + 12 * k + 4 * c;
                let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
                if !v.is_finite() {
                    return Err(Error::parse(off, "non-finite vertex coordinate"));
                }
                *slot = v as f64;
            }
        }
        soup.push(tri);
    }
    Ok(soup)
}

struct Tokens<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Tokens<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        let rest = &self.text[self.pos..];
        let skip = rest.len() - rest.trim_start().len();
        let start = self.pos + skip;
        if start >= self.text.len() {
            self.pos = start;
            return None;
        }
        let tail = &self.text[start..];
        let len = tail.find(char::is_whitespace).unwrap_or(tail.len());
        self.pos = start + len;
        Some((start, &tail[..len]))
    }

    fn expect(&mut self, word: &str) -> Result<usize> {
        match self.next() {
            Some((off, tok)) if tok == word => Ok(off),
            Some((off, tok)) => Err(Error::parse(off, format!("expected `{word}`, found `{tok}`"))),
            None => Err(Error::parse(self.text.len(), format!("unexpected end, expected `{word}`"))),
        }
    }

    fn float(&mut self) -> Result<f64> {
        match self.next() {
            Some((off, tok)) => {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::parse(off, format!("invalid number `{tok}`")))?;
                if !v.is_finite() {
                    return Err(Error::parse(off, "non-finite coordinate"));
                }
                Ok(v)
            }
            None => Err(Error::parse(self.text.len(), "unexpected end, expected number")),
        }
    }
}

fn parse_ascii(bytes: &[u8]) -> Result<Vec<[Vec3; 3]>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::parse(e.valid_up_to(), "ASCII STL is not valid UTF-8"))?;
    let mut tok = Tokens { text, pos: 0 };
    tok.expect("solid")?;
    let mut soup = Vec::new();
    // solid name: any tokens up to the first `facet` / `endsolid`
    let mut pending = loop {
        match tok.next() {
            Some((_, "facet")) => break Some("facet"),
            Some((_, "endsolid")) => break Some("endsolid"),
            Some(_) => continue,
            None => return Err(Error::parse(text.len(), "missing `endsolid`")),
        }
    };
    loop {
        let word = match pending.take() {
            Some(w) => w,
            None => match tok.next() {
                Some((_, w)) => w,
                None => return Err(Error::parse(text.len(), "missing `endsolid`")),
            },
        };
        match word {
            "endsolid" => break,
            "facet" => {
                tok.expect("normal")?;
                for _ in 0..3 {
                    tok.float()?;
                }
                tok.expect("outer")?;
                tok.expect("loop")?;
                let mut tri = [[0.0; 3]; 3];
                for corner in &mut tri {
                    tok.expect("vertex")?;
                    for c in corner.iter_mut() {
                        *c = tok.float()?;
                    }
                }
                tok.expect("endloop")?;
                tok.expect("endfacet")?;
                soup.push(tri);
            }
            other => {
                return Err(Error::parse(
                    tok.pos - other.len(),
                    format!("expected `facet` or `endsolid`, found `{other}`"),
                ))
            }
        }
    }
    Ok(soup)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_binary_size_and_round_trip() {
        let cube = TriMesh::cuboid(1.0, 1.0, 1.0);
        let bytes = write_stl(&cube, StlFlavor::Binary);
        assert_eq!(bytes.len(), 684);
        assert_eq!(binary_size(12), 80 + 4 + 12 * 50);
        let back = read_stl(&bytes).unwrap();
        assert_eq!(back.soup(), cube.soup());
        assert_eq!(back.vertices.len(), 8);
    }

    #[test]
    fn ascii_round_trip_within_tolerance() {
        let m = TriMesh::cuboid(100.0, 60.0, 20.0).map_vertices(|p| [p[0] + 0.1, p[1] / 3.0, p[2]]);
        let bytes = write_stl(&m, StlFlavor::Ascii);
        assert!(bytes.starts_with(b"solid"));
        let back = read_stl(&bytes).unwrap();
        for (a, b) in back.soup().iter().zip(m.soup()) {
            for k in 0..3 {
                for c in 0..3 {
                    let rel = (a[k][c] - b[k][c]).abs() / b[k][c].abs().max(1.0);
                    assert!(rel < 1e-5);
                }
            }
        }
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let bytes = write_stl(&TriMesh::cuboid(1.0, 1.0, 1.0), StlFlavor::Binary);
        let err = read_stl(&bytes[..bytes.len() - 10]).unwrap_err();
        match err {
            Error::Parse { offset, .. } => assert_eq!(offset, 84 + 11 * 50),
            e => panic!("unexpected {e:?}"),
        }
        assert!(matches!(read_stl(&bytes[..40]), Err(Error::Parse { offset: 40, .. })));
    }

    #[test]
    fn count_mismatch_and_non_finite() {
        let mut bytes = write_stl(&TriMesh::cuboid(1.0, 1.0, 1.0), StlFlavor::Binary);
        bytes.extend_from_slice(&[0u8; 7]);
        assert!(matches!(read_stl(&bytes), Err(Error::Parse { offset: 684, .. })));

        let mut bytes = write_stl(&TriMesh::cuboid(1.0, 1.0, 1.0), StlFlavor::Binary);
        let off = 84 + 2 * 50 + 12 + 4;
        bytes[off..off + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_stl(&bytes), Err(Error::Parse { offset, .. }) if offset == off));
    }

    #[test]
    fn ascii_grammar_errors() {
        let bad = b"solid x\n facet normal 0 0 1\n outer loop\n vertex 0 0 0\n vertex 1 0 0\n endloop\n";
        assert!(matches!(read_stl(bad), Err(Error::Parse { .. })));
        let nan = b"solid x\nfacet normal 0 0 1\nouter loop\nvertex nan 0 0\nvertex 1 0 0\nvertex 0 1 0\nendloop\nendfacet\nendsolid x\n";
        assert!(matches!(read_stl(nan), Err(Error::Parse { offset: 45, .. })));
    }
}
