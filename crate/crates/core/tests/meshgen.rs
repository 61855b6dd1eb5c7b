use occtip::meshgen::shapes::{class_shape, toy_objects, unit_cube, uv_sphere, TOY_CLASSES};
use occtip::meshgen::{
    backproject, camera_ring, normalize_mesh, parse_obj, rasterize, sample_points, surface_samples, visible_fraction,
    CameraPose, PartialPointCloud, TriangleMesh, NUM_VIEWS, VERTICAL_FOV,
};
use occtip::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

type V3 = [f64; 3];

fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: V3, b: V3) -> V3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norm(a: V3) -> f64 {
    dot(a, a).sqrt()
}

fn lerp3(a: V3, b: V3, c: V3, u: f64, v: f64) -> V3 {
    let w = 1.0 - u - v;
    [
        w * a[0] + u * b[0] + v * c[0],
        w * a[1] + u * b[1] + v * c[1],
        w * a[2] + u * b[2] + v * c[2],
    ]
}

/// Closest point on triangle `abc` to `p` (Voronoi-region walk).
fn closest_on_triangle(p: V3, a: V3, b: V3, c: V3) -> V3 {
    let (ab, ac, ap) = (sub(b, a), sub(c, a), sub(p, a));
    let (d1, d2) = (dot(ab, ap), dot(ac, ap));
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = sub(p, b);
    let (d3, d4) = (dot(ab, bp), dot(ac, bp));
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        return lerp3(a, b, c, d1 / (d1 - d3), 0.0);
    }
    let cp = sub(p, c);
    let (d5, d6) = (dot(ab, cp), dot(ac, cp));
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        return lerp3(a, b, c, 0.0, d2 / (d2 - d6));
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && d4 - d3 >= 0.0 && d5 - d6 >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return lerp3(a, b, c, 1.0 - w, w);
    }
    let denom = 1.0 / (va + vb + vc);
    lerp3(a, b, c, vb * denom, vc * denom)
}

fn face_distance(mesh: &TriangleMesh, f: usize, p: V3) -> f64 {
    let [a, b, c] = mesh.face_vertices(f);
    norm(sub(p, closest_on_triangle(p, a, b, c)))
}

/// Number of points that do not lie (within `tol`) on any face whose normal
/// points toward the camera.
fn hidden_points(mesh: &TriangleMesh, cloud: &PartialPointCloud, camera: V3, tol: f64) -> usize {
    cloud
        .points
        .iter()
        .filter(|&&p| {
            !(0..mesh.faces.len())
                .any(|f| dot(mesh.face_normal(f), sub(camera, p)) > 0.0 && face_distance(mesh, f, p) <= tol)
        })
        .count()
}

fn render_view(mesh: &TriangleMesh, pose: &CameraPose) -> PartialPointCloud {
    let (d, c) = rasterize(mesh, pose).unwrap();
    backproject(&d, &c, pose).unwrap()
}

fn ring_at(resolution: usize) -> Vec<CameraPose> {
    camera_ring(resolution)
}

#[test]
fn normalization_examples() {
    let cube = unit_cube();
    let shifted = TriangleMesh::new(
        cube.vertices.iter().map(|v| [3.0 * v[0] + 10.0, 3.0 * v[1], 3.0 * v[2]]).collect(),
        cube.faces.clone(),
        None,
    )
    .unwrap();
    let n = normalize_mesh(&shifted).unwrap();
    let inv = 1.0 / 3f64.sqrt();
    for (v, c) in n.vertices.iter().zip(&cube.vertices) {
        for a in 0..3 {
            assert!((v[a] - c[a] * inv).abs() < 1e-12);
        }
    }
    let point = TriangleMesh::new(vec![[1.0, 2.0, 3.0]; 3], vec![[0, 1, 2]], None).unwrap();
    assert!(matches!(normalize_mesh(&point), Err(Error::DegenerateMesh(_))));
    let empty = TriangleMesh::new(vec![[0.0; 3]], vec![], None).unwrap();
    assert!(matches!(normalize_mesh(&empty), Err(Error::InvalidMesh(_))));

    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let vertices: Vec<V3> = (0..100)
        .map(|_| [rng.random_range(-5.0..9.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..30.0)])
        .collect();
    let faces = (0..98).map(|i| [i, i + 1, i + 2]).collect();
    let n = normalize_mesh(&TriangleMesh::new(vertices, faces, None).unwrap()).unwrap();
    let max = n.vertices.iter().map(|&v| norm(v)).fold(0.0, f64::max);
    assert!((max - 1.0).abs() <= 1e-6);
}

#[test]
fn ring_geometry() {
    let ring = camera_ring(128);
    assert_eq!(ring.len(), NUM_VIEWS);
    let mut hist = [0; 3];
    for p in &ring {
        assert!((norm(p.position) - 2.0).abs() <= 1e-9);
        hist[match p.position[2] {
            z if z > 0.0 => 0,
            z if z == 0.0 => 1,
            _ => 2,
        }] += 1;
    }
    assert_eq!(hist, [4, 4, 4]);
    assert_eq!(ring[0].position, [2.0, 0.0, 0.0]);
    for band in ring.chunks(4) {
        for k in 0..4 {
            let a = band[k].position;
            let b = band[(k + 1) % 4].position;
            let az = |p: V3| p[1].atan2(p[0]);
            let step = (az(b) - az(a)).rem_euclid(std::f64::consts::TAU);
            assert!((step - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        }
    }
    // the unit sphere projects inside the frame
    for p in &ring {
        for v in &uv_sphere(12, 24).vertices {
            let (x, y) = p.project(p.to_camera(*v));
            assert!((-1e-9..=128.0 + 1e-9).contains(&x) && (-1e-9..=128.0 + 1e-9).contains(&y));
        }
    }
}

#[test]
fn facing_triangle_depth_is_the_ray_plane_distance() {
    let pose = CameraPose::look_at_origin(0, [2.0, 0.0, 0.0], VERTICAL_FOV, 33, 33);
    // tilted plane through (0.3, 0, 0)
    let n = [1.0, 0.2, -0.1];
    let p0 = [0.3, 0.0, 0.0];
    let on_plane = |y: f64, z: f64| [p0[0] - (n[1] * y + n[2] * z) / n[0], y, z];
    let tri = TriangleMesh::new(vec![on_plane(-0.8, -0.6), on_plane(0.8, -0.6), on_plane(0.0, 0.8)], vec![[0, 1, 2]], None)
        .unwrap();
    let (d, c) = rasterize(&tri, &pose).unwrap();
    let dir = pose.ray(16, 16);
    let oracle = dot(n, sub(p0, pose.position)) / dot(n, dir);
    assert!((d.at(16, 16) - oracle).abs() <= 1e-4);
    assert!((d.at(16, 16) - 1.7).abs() <= 1e-12);
    assert_eq!(c.at(16, 16), [0.5; 3]);
}

fn quad(x: f64, half: f64) -> (Vec<V3>, Vec<[usize; 3]>) {
    (
        vec![[x, -half, -half], [x, half, -half], [x, half, half], [x, -half, half]],
        vec![[0, 1, 2], [0, 2, 3]],
    )
}

#[test]
fn nearer_quad_wins_and_background_is_infinite() {
    let pose = CameraPose::look_at_origin(0, [2.0, 0.0, 0.0], VERTICAL_FOV, 41, 41);
    let (mut v, mut f) = quad(-0.5, 0.4);
    let (v2, f2) = quad(0.5, 0.3);
    f.extend(f2.iter().map(|t| t.map(|i| i + 4)));
    v.extend(v2);
    let (d, c) = rasterize(&TriangleMesh::new(v, f, None).unwrap(), &pose).unwrap();
    let cloud = backproject(&d, &c, &pose).unwrap();
    // pixels inside the small quad's footprint
    let near: Vec<V3> = cloud.points.iter().copied().filter(|p| p[1].abs() < 0.3 && p[2].abs() < 0.3).collect();
    assert!(near.len() > 50);
    for p in near {
        assert!((pose.to_camera(p)[2] - 1.5).abs() <= 1e-9);
    }
    assert!((d.at(20, 20) - 1.5).abs() <= 1e-12);
    assert_eq!(d.at(0, 0), f64::INFINITY);
    assert!(!c.alpha[0]);
    assert!(c.alpha[20 * 41 + 20]);
}

#[test]
fn empty_frame_and_bad_resolution() {
    let pose = CameraPose::look_at_origin(0, [2.0, 0.0, 0.0], VERTICAL_FOV, 8, 8);
    let behind = TriangleMesh::new(vec![[3.0, 0.0, 0.0], [3.0, 1.0, 0.0], [3.0, 0.0, 1.0]], vec![[0, 1, 2]], None).unwrap();
    let (d, c) = rasterize(&behind, &pose).unwrap();
    assert!(d.values.iter().all(|v| *v == f64::INFINITY));
    assert!(matches!(backproject(&d, &c, &pose), Err(Error::EmptyCloud(_))));
    let zero = CameraPose::look_at_origin(0, [2.0, 0.0, 0.0], VERTICAL_FOV, 0, 8);
    assert!(matches!(rasterize(&unit_cube(), &zero), Err(Error::InvalidConfig(_))));
}

#[test]
fn center_pixel_backprojects_along_the_axis() {
    let pose = CameraPose::look_at_origin(0, [0.0, 2.0, 0.0], VERTICAL_FOV, 9, 9);
    let mut values = vec![f64::INFINITY; 81];
    values[4 * 9 + 4] = 1.25;
    let depth = occtip::meshgen::DepthImage {
        width: 9,
        height: 9,
        values,
    };
    let color = occtip::meshgen::ColorImage {
        width: 9,
        height: 9,
        rgb: vec![[0.1, 0.2, 0.3]; 81],
        alpha: vec![true; 81],
    };
    let cloud = backproject(&depth, &color, &pose).unwrap();
    assert_eq!(cloud.len(), 1);
    let expect = [0.0, 2.0 - 1.25, 0.0];
    assert!(norm(sub(cloud.points[0], expect)) <= 1e-15);
    assert_eq!(cloud.colors.unwrap()[0], [0.1, 0.2, 0.3]);
}

#[test]
fn cube_views_lie_on_visible_faces() {
    let cube = normalize_mesh(&unit_cube()).unwrap();
    let h = 1.0 / 3f64.sqrt();
    for pose in ring_at(64) {
        let cloud = render_view(&cube, &pose);
        for p in &cloud.points {
            let on_face = (0..3).any(|a| (p[a].abs() - h).abs() <= 2e-3) && p.iter().all(|c| c.abs() <= h + 2e-3);
            assert!(on_face, "{p:?}");
        }
        assert_eq!(hidden_points(&cube, &cloud, pose.position, 1e-9), 0, "view {}", pose.view_id);
    }
}

#[test]
fn convex_meshes_are_occlusion_sound() {
    let convex = ["box", "sphere", "cone", "octahedron", "prism"];
    for obj in toy_objects(1, 71).iter().filter(|o| convex.contains(&TOY_CLASSES[o.class])) {
        let mesh = normalize_mesh(&obj.mesh).unwrap();
        for pose in ring_at(40) {
            let cloud = render_view(&mesh, &pose);
            assert_eq!(hidden_points(&mesh, &cloud, pose.position, 1e-9), 0, "{} view {}", obj.name, pose.view_id);
        }
    }
}

#[test]
fn twelve_views_cover_the_sphere() {
    let sphere = normalize_mesh(&uv_sphere(36, 72)).unwrap();
    let mut cells = HashSet::new();
    for pose in ring_at(128) {
        for p in render_view(&sphere, &pose).points {
            let lat = (p[2] / norm(p)).clamp(-1.0, 1.0).asin().to_degrees() + 90.0;
            let lon = p[1].atan2(p[0]).to_degrees() + 180.0;
            cells.insert(((lat / 10.0) as usize).min(17) * 36 + ((lon / 10.0) as usize).min(35));
        }
    }
    let fraction = cells.len() as f64 / (18.0 * 36.0);
    assert!(fraction >= 0.95, "{fraction}");
}

#[test]
fn depth_round_trip_and_ranges() {
    for class in 0..TOY_CLASSES.len() {
        let mesh = normalize_mesh(&class_shape(class)).unwrap();
        for pose in ring_at(32) {
            let (d, c) = rasterize(&mesh, &pose).unwrap();
            let cloud = backproject(&d, &c, &pose).unwrap();
            let finite: Vec<f64> = d.values.iter().copied().filter(|v| v.is_finite()).collect();
            assert_eq!(finite.len(), cloud.len());
            for (depth, p) in finite.iter().zip(&cloud.points) {
                assert!(*depth > 1.0 && *depth < 3.0);
                assert!((depth - norm(sub(*p, pose.position))).abs() <= 1e-6 * depth);
                assert!(norm(*p) <= 1.0 + 1e-3);
            }
        }
    }
}

#[test]
fn sphere_shows_a_quarter_of_its_surface_per_view() {
    // the cap seen from distance 2 is cos θ ≥ 1/2, i.e. (1 - 1/2)/2 of the area
    let sphere = normalize_mesh(&uv_sphere(48, 96)).unwrap();
    let samples = surface_samples(&sphere, 4000, 72);
    let ring = ring_at(128);
    let mean = ring
        .iter()
        .map(|pose| visible_fraction(&samples, &rasterize(&sphere, pose).unwrap().0, pose))
        .sum::<f64>()
        / ring.len() as f64;
    assert!((mean - 0.25).abs() <= 0.05, "{mean}");
}

#[test]
fn vertex_colors_are_interpolated() {
    let mesh = parse_obj("v 0 -1 -1 1 0 0\nv 0 1 -1 1 0 0\nv 0 0 1 1 0 0\nf 1 2 3\n").unwrap();
    let pose = CameraPose::look_at_origin(0, [2.0, 0.0, 0.0], VERTICAL_FOV, 17, 17);
    let (_, c) = rasterize(&mesh, &pose).unwrap();
    assert!(norm(sub(c.at(8, 8), [1.0, 0.0, 0.0])) <= 1e-12);
}

#[test]
fn sampling_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(73);
    let big = PartialPointCloud {
        points: (0..5000).map(|_| [rng.random(), rng.random(), rng.random()]).collect(),
        colors: None,
        view_id: 3,
    };
    let s = sample_points(&big, 2048, 1).unwrap();
    let distinct: HashSet<[u64; 3]> = s.points.iter().map(|p| p.map(f64::to_bits)).collect();
    assert_eq!(distinct.len(), 2048);
    assert_eq!(s.view_id, 3);
    let small = PartialPointCloud {
        points: big.points[..100].to_vec(),
        colors: None,
        view_id: 0,
    };
    let s = sample_points(&small, 2048, 2).unwrap();
    assert_eq!(s.len(), 2048);
    assert!(s.points.iter().all(|p| small.points.contains(p)));
    assert_eq!(sample_points(&small, 2048, 2).unwrap(), s);
    assert!(matches!(sample_points(&small, 0, 2), Err(Error::InvalidConfig(_))));
}

#[test]
fn generated_views_are_deterministic() {
    let mesh = &toy_objects(1, 74)[3].mesh;
    let a = occtip::meshgen::generate_views(mesh, 32, 256, 9).unwrap();
    let b = occtip::meshgen::generate_views(mesh, 32, 256, 9).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 12);
    assert!(a.iter().enumerate().all(|(i, c)| c.view_id == i && c.len() == 256));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn normalized_max_norm_is_one(seed in any::<u64>(), n in 3usize..60, spread in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vertices: Vec<V3> = (0..n)
            .map(|_| [rng.random_range(-spread..spread), rng.random_range(-spread..spread), rng.random_range(-spread..spread)])
            .collect();
        let mesh = TriangleMesh::new(vertices, vec![[0, 1, 2]], None).unwrap();
        let out = normalize_mesh(&mesh).unwrap();
        let max = out.vertices.iter().map(|&v| norm(v)).fold(0.0, f64::max);
        prop_assert!((max - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn random_tetrahedra_are_occlusion_sound(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<V3> = (0..4)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let vol = dot(sub(v[1], v[0]), cross(sub(v[2], v[0]), sub(v[3], v[0])));
        prop_assume!(vol.abs() > 0.05);
        if vol < 0.0 {
            v.swap(1, 2);
        }
        let mesh = normalize_mesh(&TriangleMesh::new(v, vec![[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]], None).unwrap()).unwrap();
        for pose in ring_at(24) {
            let (d, c) = rasterize(&mesh, &pose).unwrap();
            if let Ok(cloud) = backproject(&d, &c, &pose) {
                prop_assert_eq!(hidden_points(&mesh, &cloud, pose.position, 1e-9), 0);
            }
        }
    }
}
