//! Two-sided z-buffer rasterizer. Coverage is decided in screen space with
//! inclusive edge functions at pixel centers; the stored depth is the exact
//! ray–plane distance along the pixel ray.

use super::{add, cross, dot, scale, sub, CameraPose, TriangleMesh, V3, MID_GRAY};
use crate::error::{Error, Result};

/// Triangles with a vertex closer than this to the camera plane are skipped.
const NEAR: f64 = 1e-6;
/// Relative depth difference under which two surfaces count as tied.
const TIE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    /// Row-major distance along the pixel ray; `+inf` for background.
    pub values: Vec<f64>,
}

impl DepthImage {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn covered(&self) -> usize {
        self.values.iter().filter(|v| v.is_finite()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<V3>,
    /// `false` marks transparent background.
    pub alpha: Vec<bool>,
}

impl ColorImage {
    pub fn at(&self, x: usize, y: usize) -> V3 {
        self.rgb[y * self.width + x]
    }
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

pub fn rasterize(mesh: &TriangleMesh, pose: &CameraPose) -> Result<(DepthImage, ColorImage)> {
    let (w, h) = (pose.width, pose.height);
    if w == 0 || h == 0 {
        return Err(Error::InvalidConfig(format!("image resolution {w}x{h} is empty")));
    }
    let mut depth = vec![f64::INFINITY; w * h];
    let mut front = vec![false; w * h];
    let mut rgb = vec![[0.0; 3]; w * h];
    let gray = [MID_GRAY; 3];
    for f in 0..mesh.faces.len() {
        let tri = mesh.face_vertices(f);
        let cam = tri.map(|v| pose.to_camera(v));
        if cam.iter().any(|c| c[2] <= NEAR) {
            continue;
        }
        let s = cam.map(|c| pose.project(c));
        let area = edge(s[0], s[1], s[2]);
        if area == 0.0 {
            continue;
        }
        let n = cross(sub(tri[1], tri[0]), sub(tri[2], tri[0]));
        let nn = dot(n, n);
        let x0 = s.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let x1 = s.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let y0 = s.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
        let y1 = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        let px0 = (x0 - 0.5).floor().max(0.0) as usize;
        let py0 = (y0 - 0.5).floor().max(0.0) as usize;
        let px1 = ((x1 - 0.5).ceil().max(-1.0) as isize).min(w as isize - 1);
        let py1 = ((y1 - 0.5).ceil().max(-1.0) as isize).min(h as isize - 1);
        if px1 < 0 || py1 < 0 {
            continue;
        }
        let colors = mesh.vertex_colors.as_ref().map(|c| {
            let [a, b, cc] = mesh.faces[f];
            [c[a], c[b], c[cc]]
        });
        for py in py0..=py1 as usize {
            for px in px0..=px1 as usize {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let e = [edge(s[1], s[2], p), edge(s[2], s[0], p), edge(s[0], s[1], p)];
                let inside = if area > 0.0 {
                    e.iter().all(|&v| v >= 0.0)
                } else {
                    e.iter().all(|&v| v <= 0.0)
                };
                if !inside {
                    continue;
                }
                let dir = pose.ray(px, py);
                let denom = dot(n, dir);
                if denom == 0.0 {
                    continue;
                }
                let t = dot(n, sub(tri[0], pose.position)) / denom;
                if !(t > 0.0) {
                    continue;
                }
                let is_front = denom < 0.0;
                let i = py * w + px;
                let cur = depth[i];
                let closer = t < cur * (1.0 - TIE);
                let tied_front = !closer && t <= cur * (1.0 + TIE) && is_front && !front[i];
                if !(closer || tied_front) {
                    continue;
                }
                depth[i] = t;
                front[i] = is_front;
                rgb[i] = match &colors {
                    None => gray,
                    Some(c) => {
                        let q = add(pose.position, scale(dir, t));
                        let b0 = dot(n, cross(sub(tri[2], tri[1]), sub(q, tri[1]))) / nn;
                        let b1 = dot(n, cross(sub(tri[0], tri[2]), sub(q, tri[2]))) / nn;
                        let b2 = 1.0 - b0 - b1;
                        let mut out = [0.0; 3];
                        for ch in 0..3 {
                            out[ch] = (b0 * c[0][ch] + b1 * c[1][ch] + b2 * c[2][ch]).clamp(0.0, 1.0);
                        }
                        out
                    }
                };
            }
        }
    }
    let alpha = depth.iter().map(|d| d.is_finite()).collect();
    Ok((
        DepthImage {
            width: w,
            height: h,
            values: depth,
        },
        ColorImage {
            width: w,
            height: h,
            rgb,
            alpha,
        },
    ))
}
