//! Procedural closed meshes with outward-facing (counter-clockwise) faces.

use super::{TriangleMesh, V3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::TAU;

/// Surface of revolution about `z`. `profile` runs bottom to top as
/// `(radius, z)`; zero-radius points become single pole vertices.
pub fn revolve(profile: &[(f64, f64)], slices: usize) -> TriangleMesh {
    assert!(slices >= 3 && profile.len() >= 2);
    let mut vertices = Vec::new();
    // first vertex index of each profile point and whether it is a pole
    let mut rings = Vec::with_capacity(profile.len());
    for &(r, z) in profile {
        let start = vertices.len();
        if r == 0.0 {
            vertices.push([0.0, 0.0, z]);
            rings.push((start, true));
        } else {
            for j in 0..slices {
                let a = TAU * j as f64 / slices as f64;
                vertices.push([r * a.cos(), r * a.sin(), z]);
            }
            rings.push((start, false));
        }
    }
    let mut faces = Vec::new();
    for w in rings.windows(2) {
        let ((a, a_pole), (b, b_pole)) = (w[0], w[1]);
        for j in 0..slices {
            let k = (j + 1) % slices;
            match (a_pole, b_pole) {
                (false, false) => {
                    faces.push([a + j, a + k, b + k]);
                    faces.push([a + j, b + k, b + j]);
                }
                (true, false) => faces.push([a, b + k, b + j]),
                (false, true) => faces.push([a + j, a + k, b]),
                (true, true) => {}
            }
        }
    }
    TriangleMesh::new(vertices, faces, None).expect("revolved mesh is valid")
}

pub fn unit_cube() -> TriangleMesh {
    let vertices = vec![
        [-1.0, -1.0, -1.0],
        [1.0, -1.0, -1.0],
        [1.0, 1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
        [1.0, -1.0, 1.0],
        [1.0, 1.0, 1.0],
        [-1.0, 1.0, 1.0],
    ];
    let faces = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    TriangleMesh::new(vertices, faces, None).expect("cube is valid")
}

pub fn uv_sphere(stacks: usize, slices: usize) -> TriangleMesh {
    let profile: Vec<(f64, f64)> = (0..=stacks)
        .map(|i| {
            let phi = std::f64::consts::PI * i as f64 / stacks as f64;
            let r = if i == 0 || i == stacks { 0.0 } else { phi.sin() };
            (r, -phi.cos())
        })
        .collect();
    revolve(&profile, slices)
}

pub fn torus(major: f64, minor: f64, nu: usize, nv: usize) -> TriangleMesh {
    let mut vertices = Vec::with_capacity(nu * nv);
    for i in 0..nu {
        let u = TAU * i as f64 / nu as f64;
        for j in 0..nv {
            let v = TAU * j as f64 / nv as f64;
            let rr = major + minor * v.cos();
            vertices.push([rr * u.cos(), rr * u.sin(), minor * v.sin()]);
        }
    }
    let id = |i: usize, j: usize| (i % nu) * nv + (j % nv);
    let mut faces = Vec::with_capacity(2 * nu * nv);
    for i in 0..nu {
        for j in 0..nv {
            faces.push([id(i, j), id(i + 1, j), id(i + 1, j + 1)]);
            faces.push([id(i, j), id(i + 1, j + 1), id(i, j + 1)]);
        }
    }
    TriangleMesh::new(vertices, faces, None).expect("torus is valid")
}

/// Class names of the toy set, in label order.
pub const TOY_CLASSES: [&str; 8] = [
    "box", "sphere", "cylinder", "cone", "torus", "octahedron", "pyramid", "prism",
];

const CLASS_COLORS: [V3; 8] = [
    [0.85, 0.25, 0.2],
    [0.2, 0.6, 0.85],
    [0.3, 0.75, 0.3],
    [0.9, 0.75, 0.2],
    [0.65, 0.35, 0.8],
    [0.95, 0.5, 0.15],
    [0.45, 0.45, 0.45],
    [0.2, 0.8, 0.7],
];

pub fn class_shape(class: usize) -> TriangleMesh {
    match class {
        0 => revolve(&[(0.0, -1.0), (1.0, -1.0), (1.0, 1.0), (0.0, 1.0)], 4),
        1 => uv_sphere(16, 24),
        2 => revolve(&[(0.0, -1.0), (0.7, -1.0), (0.7, 1.0), (0.0, 1.0)], 24),
        3 => revolve(&[(0.0, -1.0), (1.0, -1.0), (0.0, 1.0)], 24),
        4 => torus(1.0, 0.35, 32, 12),
        5 => revolve(&[(0.0, -1.0), (1.0, 0.0), (0.0, 1.0)], 4),
        6 => revolve(&[(0.0, -0.6), (1.0, -0.6), (0.0, 1.0)], 4),
        7 => revolve(&[(0.0, -1.0), (1.0, -1.0), (1.0, 1.0), (0.0, 1.0)], 3),
        _ => panic!("toy class {class} out of range"),
    }
}

#[derive(Clone, Debug)]
pub struct LabeledMesh {
    pub name: String,
    pub class: usize,
    pub mesh: TriangleMesh,
}

/// `per_class` variants of each toy class: random per-axis stretch in
/// `[0.75, 1.25]`, a random turn about `z`, and a class color shaded by
/// height.
pub fn toy_objects(per_class: usize, seed: u64) -> Vec<LabeledMesh> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (class, name) in TOY_CLASSES.iter().enumerate() {
        for k in 0..per_class {
            let base = class_shape(class);
            let s: [f64; 3] = [rng.random_range(0.75..1.25), rng.random_range(0.75..1.25), rng.random_range(0.75..1.25)];
            let turn: f64 = rng.random_range(0.0..TAU);
            let (sn, cs) = turn.sin_cos();
            let vertices: Vec<V3> = base
                .vertices
                .iter()
                .map(|v| {
                    let (x, y, z) = (v[0] * s[0], v[1] * s[1], v[2] * s[2]);
                    [cs * x - sn * y, sn * x + cs * y, z]
                })
                .collect();
            let c = CLASS_COLORS[class];
            let colors = vertices
                .iter()
                .map(|v| {
                    let shade = 0.75 + 0.2 * (v[2] / s[2]).clamp(-1.0, 1.0);
                    [c[0] * shade, c[1] * shade, c[2] * shade]
                })
                .collect();
            let mesh = TriangleMesh::new(vertices, base.faces, Some(colors)).expect("toy mesh is valid");
            out.push(LabeledMesh {
                name: format!("{name}_{k:02}"),
                class,
                mesh,
            });
        }
    }
    out
}
