use occtip::gradcheck::{check_parameters, probe, DEFAULT_STEP};
use occtip::tensor::{Parameters, Tensor};
use occtip::tokenizer::{build_patches, farthest_point_sampling, knn_group, MiniPointNet};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cloud(rng: &mut ChaCha8Rng, n: usize) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let pts = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let cols = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    (pts, cols)
}

fn brute_force_fps(points: &[[f64; 3]], s: usize) -> Vec<[f64; 3]> {
    let mut chosen = vec![*points
        .iter()
        .min_by(|a, b| a.partial_cmp(b).unwrap())
        .unwrap()];
    while chosen.len() < s {
        let score = |p: &[f64; 3]| {
            chosen
                .iter()
                .map(|c| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        };
        let best = points
            .iter()
            .filter(|p| !chosen.contains(p))
            .max_by(|a, b| score(a).total_cmp(&score(b)).then(b.partial_cmp(a).unwrap()))
            .unwrap();
        chosen.push(*best);
    }
    chosen
}

#[test]
fn fps_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    for _ in 0..20 {
        let (pts, _) = cloud(&mut rng, 60);
        let idx = farthest_point_sampling(&pts, 12).unwrap();
        let got: Vec<[f64; 3]> = idx.iter().map(|&i| pts[i]).collect();
        assert_eq!(got, brute_force_fps(&pts, 12));
    }
}

#[test]
fn fps_exhausts_every_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (pts, _) = cloud(&mut rng, 25);
    let mut idx = farthest_point_sampling(&pts, 25).unwrap();
    idx.sort();
    assert_eq!(idx, (0..25).collect::<Vec<_>>());
}

#[test]
fn relative_points_are_bounded_and_centers_included() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (pts, cols) = cloud(&mut rng, 200);
    let patches = build_patches(&pts, Some(&cols), 16, 10).unwrap();
    let mut max_pair: f64 = 0.0;
    for a in &pts {
        for b in &pts {
            max_pair = max_pair.max((0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt());
        }
    }
    let centers = farthest_point_sampling(&pts, 16).unwrap();
    for (s, row) in patches.neighbor_indices.iter().enumerate() {
        assert_eq!(row.len(), 10);
        assert!(row.contains(&centers[s]));
        for r in &patches.relative_points[s] {
            assert!((r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt() <= max_pair);
        }
    }
}

#[test]
fn knn_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (pts, _) = cloud(&mut rng, 80);
    let centers = [0, 17, 42];
    let patches = knn_group(&pts, None, &centers, 7).unwrap();
    for (s, &c) in centers.iter().enumerate() {
        let mut all: Vec<(f64, usize)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| ((0..3).map(|d| (p[d] - pts[c][d]).powi(2)).sum(), i))
            .collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let expect: Vec<usize> = all[..7].iter().map(|&(_, i)| i).collect();
        assert_eq!(patches.neighbor_indices[s], expect);
    }
}

#[test]
fn identical_patches_give_identical_tokens() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let net = MiniPointNet::new(16, &mut rng);
    let (pts, cols) = cloud(&mut rng, 40);
    let mut patches = build_patches(&pts, Some(&cols), 4, 6).unwrap();
    patches.relative_points[1] = patches.relative_points[0].clone();
    patches.patch_colors.as_mut().unwrap()[1] = patches.patch_colors.as_ref().unwrap()[0].clone();
    let t = net.forward(&patches).unwrap().tokens;
    assert_eq!(t.row(0), t.row(1));
}

#[test]
fn pointnet_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let net = MiniPointNet::new(8, &mut rng);
    let (pts, cols) = cloud(&mut rng, 50);
    let patches = build_patches(&pts, Some(&cols), 5, 6).unwrap();
    let w = Tensor::uniform(&[5, 8], 1.0, &mut rng);
    let (_, cache) = net.forward_cached(&patches).unwrap();
    let mut g = net.zeros_like();
    net.backward(&cache, &w, &mut g);
    let report = check_parameters(
        &net,
        &g,
        |n| Ok(probe(&n.forward(&patches)?.tokens, &w)),
        DEFAULT_STEP,
        None,
    )
    .unwrap();
    assert!(report.worst <= 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn tokens_ignore_within_patch_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MiniPointNet::new(8, &mut rng);
        let (pts, cols) = cloud(&mut rng, 64);
        let patches = build_patches(&pts, Some(&cols), 8, 8).unwrap();
        let mut shuffled = patches.clone();
        for s in 0..shuffled.len() {
            let mut order: Vec<usize> = (0..8).collect();
            order.shuffle(&mut rng);
            shuffled.relative_points[s] = order.iter().map(|&j| patches.relative_points[s][j]).collect();
            shuffled.patch_colors.as_mut().unwrap()[s] =
                order.iter().map(|&j| patches.patch_colors.as_ref().unwrap()[s][j]).collect();
        }
        prop_assert_eq!(net.forward(&patches).unwrap(), net.forward(&shuffled).unwrap());
    }

    #[test]
    fn token_sequence_ignores_cloud_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = MiniPointNet::new(8, &mut rng);
        let (pts, cols) = cloud(&mut rng, 96);
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.shuffle(&mut rng);
        let p2: Vec<[f64; 3]> = order.iter().map(|&i| pts[i]).collect();
        let c2: Vec<[f64; 3]> = order.iter().map(|&i| cols[i]).collect();
        let a = net.forward(&build_patches(&pts, Some(&cols), 16, 8).unwrap()).unwrap();
        let b = net.forward(&build_patches(&p2, Some(&c2), 16, 8).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}
