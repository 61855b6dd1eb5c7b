//! Occluded triplet generation: mesh normalization, the 12-camera ring,
//! z-buffer rendering and back-projection of visible pixels.

mod obj;
mod raster;
pub mod shapes;

pub use obj::{load_obj, parse_obj, write_obj};
pub use raster::{rasterize, ColorImage, DepthImage};

use crate::error::{Error, Result};
use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const CAMERA_RADIUS: f64 = 2.0;
pub const NUM_VIEWS: usize = 12;
/// `2·asin(1/2)`: the unit sphere seen from distance 2 fills the frame.
pub const VERTICAL_FOV: f64 = std::f64::consts::FRAC_PI_3;
pub const DEFAULT_RESOLUTION: usize = 128;
pub const DEFAULT_POINTS: usize = 2048;
pub const MID_GRAY: f64 = 0.5;

pub(crate) type V3 = [f64; 3];

pub(crate) fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub(crate) fn scale(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub(crate) fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn normalize(a: V3) -> V3 {
    scale(a, 1.0 / norm(a))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<V3>,
    pub faces: Vec<[usize; 3]>,
    pub vertex_colors: Option<Vec<V3>>,
}

impl TriangleMesh {
    /// Validates face indices, face degeneracy and color count.
    pub fn new(vertices: Vec<V3>, faces: Vec<[usize; 3]>, vertex_colors: Option<Vec<V3>>) -> Result<Self> {
        for (i, f) in faces.iter().enumerate() {
            if f.iter().any(|&v| v >= vertices.len()) {
                return Err(Error::InvalidMesh(format!(
                    "face {i} references a vertex beyond {}",
                    vertices.len()
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!("face {i} repeats a vertex: {f:?}")));
            }
        }
        if let Some(c) = &vertex_colors {
            if c.len() != vertices.len() {
                return Err(Error::InvalidMesh(format!(
                    "{} colors for {} vertices",
                    c.len(),
                    vertices.len()
                )));
            }
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMesh("non-finite vertex".into()));
        }
        Ok(TriangleMesh {
            vertices,
            faces,
            vertex_colors,
        })
    }

    pub fn face_vertices(&self, f: usize) -> [V3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    pub fn face_normal(&self, f: usize) -> V3 {
        let [a, b, c] = self.face_vertices(f);
        cross(sub(b, a), sub(c, a))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.faces.len()).map(|f| 0.5 * norm(self.face_normal(f))).sum()
    }
}

/// Centers the mesh on its bounding-box center and scales it so the farthest
/// vertex lies on the unit sphere.
pub fn normalize_mesh(mesh: &TriangleMesh) -> Result<TriangleMesh> {
    if mesh.faces.is_empty() || mesh.vertices.is_empty() {
        return Err(Error::InvalidMesh("mesh has no faces".into()));
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &mesh.vertices {
        for a in 0..3 {
            lo[a] = lo[a].min(v[a]);
            hi[a] = hi[a].max(v[a]);
        }
    }
    let center = scale(add(lo, hi), 0.5);
    let r = mesh
        .vertices
        .iter()
        .map(|&v| norm(sub(v, center)))
        .fold(0.0, f64::max);
    if !(r > 0.0) {
        return Err(Error::DegenerateMesh("all vertices coincide".into()));
    }
    Ok(TriangleMesh {
        vertices: mesh.vertices.iter().map(|&v| scale(sub(v, center), 1.0 / r)).collect(),
        faces: mesh.faces.clone(),
        vertex_colors: mesh.vertex_colors.clone(),
    })
}

/// Pinhole camera looking at the origin with `+z` up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub view_id: usize,
    pub position: V3,
    pub forward: V3,
    pub right: V3,
    pub up: V3,
    pub vertical_fov: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraPose {
    pub fn look_at_origin(view_id: usize, position: V3, vertical_fov: f64, width: usize, height: usize) -> Self {
        let forward = normalize(scale(position, -1.0));
        let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
        let up = cross(right, forward);
        CameraPose {
            view_id,
            position,
            forward,
            right,
            up,
            vertical_fov,
            width,
            height,
        }
    }

    pub(crate) fn tan_half(&self) -> f64 {
        (0.5 * self.vertical_fov).tan()
    }

    pub(crate) fn aspect(&self) -> f64 {
        self.width as f64 / self.height as f64
    }

    /// Unit direction of the ray through the center of pixel `(px, py)`;
    /// row 0 is the top of the image.
    pub fn ray(&self, px: usize, py: usize) -> V3 {
        let t = self.tan_half();
        let x = ((px as f64 + 0.5) / self.width as f64 * 2.0 - 1.0) * t * self.aspect();
        let y = (1.0 - (py as f64 + 0.5) / self.height as f64 * 2.0) * t;
        normalize(add(self.forward, add(scale(self.right, x), scale(self.up, y))))
    }

    /// Camera-space coordinates `(right, up, forward)` of a world point.
    pub fn to_camera(&self, p: V3) -> V3 {
        let d = sub(p, self.position);
        [dot(d, self.right), dot(d, self.up), dot(d, self.forward)]
    }

    /// Continuous pixel coordinates of a camera-space point in front of the
    /// camera.
    pub fn project(&self, c: V3) -> (f64, f64) {
        let t = self.tan_half();
        let sx = (c[0] / c[2] / (t * self.aspect()) + 1.0) * 0.5 * self.width as f64;
        let sy = (1.0 - c[1] / c[2] / t) * 0.5 * self.height as f64;
        (sx, sy)
    }
}

/// Twelve cameras on the radius-2 sphere: views 0-3 on the equator at
/// azimuths 0/90/180/270 degrees, views 4-7 at +45 degrees elevation and
/// views 8-11 at -45 degrees, both offset by 45 degrees in azimuth.
pub fn camera_ring(resolution: usize) -> Vec<CameraPose> {
    let rings = [(0.0f64, 0.0f64), (45.0, 45.0), (-45.0, 45.0)];
    let mut out = Vec::with_capacity(NUM_VIEWS);
    for (elev, offset) in rings {
        for k in 0..4 {
            let az = (offset + 90.0 * k as f64).to_radians();
            let el = elev.to_radians();
            let mut p = [el.cos() * az.cos(), el.cos() * az.sin(), el.sin()];
            if elev == 0.0 {
                p[2] = 0.0;
            }
            let id = out.len();
            out.push(CameraPose::look_at_origin(
                id,
                scale(p, CAMERA_RADIUS),
                VERTICAL_FOV,
                resolution,
                resolution,
            ));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialPointCloud {
    pub points: Vec<V3>,
    pub colors: Option<Vec<V3>>,
    pub view_id: usize,
}

impl PartialPointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One point per finite-depth pixel at `camera + depth·ray`, with the
/// pixel's color.
pub fn backproject(depth: &DepthImage, color: &ColorImage, pose: &CameraPose) -> Result<PartialPointCloud> {
    if depth.width != color.width || depth.height != color.height {
        return Err(Error::shape("depth and color resolutions differ"));
    }
    if depth.width != pose.width || depth.height != pose.height {
        return Err(Error::shape("image resolution differs from the camera"));
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for py in 0..depth.height {
        for px in 0..depth.width {
            let d = depth.at(px, py);
            if d.is_finite() {
                points.push(add(pose.position, scale(pose.ray(px, py), d)));
                colors.push(color.at(px, py));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud(format!("view {} sees no surface", pose.view_id)));
    }
    Ok(PartialPointCloud {
        points,
        colors: Some(colors),
        view_id: pose.view_id,
    })
}

/// Draws exactly `n` points: without replacement when the cloud is large
/// enough, with replacement otherwise.
pub fn sample_points(cloud: &PartialPointCloud, n: usize, seed: u64) -> Result<PartialPointCloud> {
    if n == 0 {
        return Err(Error::InvalidConfig("number of sampled points must be at least 1".into()));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyCloud("cannot sample from an empty cloud".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = cloud.len();
    let idx: Vec<usize> = if m >= n {
        index::sample(&mut rng, m, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..m)).collect()
    };
    Ok(PartialPointCloud {
        points: idx.iter().map(|&i| cloud.points[i]).collect(),
        colors: cloud.colors.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        view_id: cloud.view_id,
    })
}

/// Independent random stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Normalizes `mesh` and renders, back-projects and samples all 12 views.
pub fn generate_views(mesh: &TriangleMesh, resolution: usize, n_points: usize, seed: u64) -> Result<Vec<PartialPointCloud>> {
    let mesh = normalize_mesh(mesh)?;
    camera_ring(resolution)
        .iter()
        .map(|pose| {
            let (depth, color) = rasterize(&mesh, pose)?;
            let cloud = backproject(&depth, &color, pose)?;
            sample_points(&cloud, n_points, stream_rng(seed, pose.view_id as u64).random())
        })
        .collect()
}

/// Area-weighted uniform samples on the mesh surface.
pub fn surface_samples(mesh: &TriangleMesh, n: usize, seed: u64) -> Vec<V3> {
    let areas: Vec<f64> = (0..mesh.faces.len()).map(|f| 0.5 * norm(mesh.face_normal(f))).collect();
    let dist = rand::distr::weighted::WeightedIndex::new(&areas).expect("mesh has positive area");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let [a, b, c] = mesh.face_vertices(rng.sample(&dist));
            let (mut u, mut v): (f64, f64) = (rng.random(), rng.random());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            add(a, add(scale(sub(b, a), u), scale(sub(c, a), v)))
        })
        .collect()
}

/// Fraction of `samples` that the depth image sees: a sample counts as
/// visible when its distance to the camera agrees with the depth stored at
/// its pixel to within a few pixel footprints.
pub fn visible_fraction(samples: &[V3], depth: &DepthImage, pose: &CameraPose) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let pixel_angle = 2.0 * pose.tan_half() / pose.height as f64;
    let visible = samples
        .iter()
        .filter(|&&s| {
            let c = pose.to_camera(s);
            if c[2] <= 0.0 {
                return false;
            }
            let (sx, sy) = pose.project(c);
            if sx < 0.0 || sy < 0.0 || sx >= pose.width as f64 || sy >= pose.height as f64 {
                return false;
            }
            let d = depth.at(sx as usize, sy as usize);
            let dist = norm(sub(s, pose.position));
            d.is_finite() && (d - dist).abs() <= 4.0 * pixel_angle * dist
        })
        .count();
    visible as f64 / samples.len() as f64
}
