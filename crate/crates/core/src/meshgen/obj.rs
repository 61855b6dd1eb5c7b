//! ASCII OBJ subset: `v x y z [r g b]` and `f` with 1-based (or negative,
//! relative) indices in `v`, `v/vt`, `v//vn` or `v/vt/vn` form. Polygons are
//! fan-triangulated; every other record is ignored.

use super::{TriangleMesh, V3};
use crate::error::{Error, Result};
use std::path::Path;

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    tok.parse()
        .map_err(|_| Error::InvalidMesh(format!("line {line}: bad number {tok:?}")))
}

pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices: Vec<V3> = Vec::new();
    let mut colors: Vec<Option<V3>> = Vec::new();
    let mut faces = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = ln + 1;
        let content = raw.split('#').next().unwrap_or("");
        let mut toks = content.split_whitespace();
        match toks.next() {
            Some("v") => {
                let vals = toks.map(|t| parse_f64(t, line)).collect::<Result<Vec<f64>>>()?;
                match vals.len() {
                    3 | 4 => colors.push(None),
                    6 => colors.push(Some([vals[3], vals[4], vals[5]])),
                    n => return Err(Error::InvalidMesh(format!("line {line}: vertex with {n} values"))),
                }
                vertices.push([vals[0], vals[1], vals[2]]);
            }
            Some("f") => {
                let idx = toks
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let i: i64 = head
                            .parse()
                            .map_err(|_| Error::InvalidMesh(format!("line {line}: bad index {t:?}")))?;
                        let n = vertices.len() as i64;
                        let resolved = if i > 0 { i - 1 } else { n + i };
                        if i == 0 || resolved < 0 || resolved >= n {
                            return Err(Error::InvalidMesh(format!("line {line}: index {i} out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<Vec<usize>>>()?;
                if idx.len() < 3 {
                    return Err(Error::InvalidMesh(format!("line {line}: face with {} vertices", idx.len())));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    if faces.is_empty() {
        return Err(Error::InvalidMesh("no faces".into()));
    }
    let vertex_colors = if colors.iter().all(Option::is_some) {
        Some(colors.into_iter().map(|c| c.unwrap()).collect())
    } else {
        None
    };
    TriangleMesh::new(vertices, faces, vertex_colors)
}

pub fn load_obj(path: &Path) -> Result<TriangleMesh> {
    parse_obj(&std::fs::read_to_string(path)?)
}

/// Serializes a mesh as OBJ (colors appended to `v` lines when present).
pub fn write_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.vertex_colors {
            Some(c) => out.push_str(&format!(
                "v {} {} {} {} {} {}\n",
                v[0], v[1], v[2], c[i][0], c[i][1], c[i][2]
            )),
            None => out.push_str(&format!("v {} {} {}\n", v[0], v[1], v[2])),
        }
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    out
}
