use occtip::curves::{sort_by_curve, CurveKind, Permutation};
use occtip::duomamba::{
    attention_flops, count_flops, count_params, embed_patches, embed_patches_cached, encoder_backward,
    encoder_forward, ConvMode, EncoderConfig, EncoderParams,
};
use occtip::gradcheck::{check_input, check_parameters, probe, DEFAULT_STEP};
use occtip::nn::Linear;
use occtip::tensor::{Parameters, Tensor};
use occtip::tokenizer::{build_patches, TokenSequence};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod support;

use support::{block_oracle, perturbed_block, random_perm, to_mat};

#[test]
fn block_matches_transcription() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let modes = [ConvMode::Standard, ConvMode::Causal, ConvMode::None];
    for i in 0..100 {
        let (s, c) = (8, 4);
        let p = perturbed_block(&mut rng, c, modes[i % 3]);
        let z = Tensor::uniform(&[s, c], 1.5, &mut rng);
        let (ph, pt) = (random_perm(&mut rng, s), random_perm(&mut rng, s));
        let got = p.forward(&z, &ph, &pt).unwrap();
        let want = block_oracle(&to_mat(&z), &ph, &pt, &p);
        for r in 0..s {
            for j in 0..c {
                assert!((got.at(r, j) - want[r][j]).abs() <= 1e-10, "instance {i}");
            }
        }
    }
}

#[test]
fn zero_out_proj_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut p = perturbed_block(&mut rng, 6, ConvMode::Standard);
    p.out_proj = Linear::zeros(12, 6, true);
    let z = Tensor::uniform(&[10, 6], 1.0, &mut rng);
    let (ph, pt) = (random_perm(&mut rng, 10), random_perm(&mut rng, 10));
    assert_eq!(p.forward(&z, &ph, &pt).unwrap(), z);
}

#[test]
fn zero_gate_leaves_only_the_output_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut p = perturbed_block(&mut rng, 6, ConvMode::Standard);
    p.gate_proj = Linear::zeros(6, 12, true);
    let z = Tensor::uniform(&[10, 6], 1.0, &mut rng);
    let (ph, pt) = (random_perm(&mut rng, 10), random_perm(&mut rng, 10));
    let out = p.forward(&z, &ph, &pt).unwrap();
    let bias = p.out_proj.bias.as_ref().unwrap().data();
    for r in 0..10 {
        for j in 0..6 {
            assert_eq!(out.at(r, j), z.at(r, j) + bias[j]);
        }
    }
}

#[test]
fn block_rejects_wrong_permutation_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let p = perturbed_block(&mut rng, 4, ConvMode::Standard);
    let z = Tensor::uniform(&[8, 4], 1.0, &mut rng);
    let err = p.forward(&z, &Permutation::identity(7), &Permutation::identity(8));
    assert!(matches!(err, Err(occtip::Error::Shape(_))));
}

#[test]
fn block_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for conv in [ConvMode::Standard, ConvMode::Causal, ConvMode::None] {
        let p = perturbed_block(&mut rng, 4, conv);
        let z = Tensor::uniform(&[8, 4], 1.0, &mut rng);
        let w = Tensor::uniform(&[8, 4], 1.0, &mut rng);
        let (ph, pt) = (random_perm(&mut rng, 8), random_perm(&mut rng, 8));
        let (_, cache) = p.forward_cached(&z, &ph, &pt).unwrap();
        let mut g = p.zeros_like();
        let dz = p.backward(&cache, &ph, &pt, &w, &mut g);
        let report =
            check_parameters(&p, &g, |q| Ok(probe(&q.forward(&z, &ph, &pt)?, &w)), DEFAULT_STEP, None).unwrap();
        assert!(report.worst <= 1e-4, "{conv:?} {report:?}");
        let ex = check_input(&z, &dz, |z| Ok(probe(&p.forward(z, &ph, &pt)?, &w)), DEFAULT_STEP).unwrap();
        assert!(ex <= 1e-4, "{conv:?} {ex}");
    }
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        l_blocks: 2,
        c_dim: 8,
        s_tokens: 12,
        k_neighbors: 6,
        n_state: 4,
        embed_dim: 5,
        ..EncoderConfig::desk()
    }
}

fn unit_cloud(rng: &mut ChaCha8Rng, n: usize) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let pts = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let cols = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    (pts, cols)
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let cfg = tiny_config();
    let params = EncoderParams::new(&cfg, &mut rng).unwrap();
    let (pts, cols) = unit_cloud(&mut rng, 80);
    let patches = build_patches(&pts, Some(&cols), cfg.s_tokens, cfg.k_neighbors).unwrap();
    let w: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (_, cache) = embed_patches_cached(&patches, &cfg, &params).unwrap();
    let mut g = params.zeros_like();
    encoder_backward(&params, &cache, &w, &mut g);
    let loss = |p: &EncoderParams| {
        let z = embed_patches(&patches, &cfg, p)?;
        Ok(z.iter().zip(&w).map(|(a, b)| a * b).sum())
    };
    let report = check_parameters(&params, &g, loss, DEFAULT_STEP, Some(24)).unwrap();
    assert!(report.worst <= 1e-4, "{report:?}");
}

#[test]
fn point_embedding_ignores_input_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let cfg = tiny_config();
    let params = EncoderParams::new(&cfg, &mut rng).unwrap();
    for _ in 0..5 {
        let (pts, cols) = unit_cloud(&mut rng, 100);
        let mut order: Vec<usize> = (0..100).collect();
        order.shuffle(&mut rng);
        let p2: Vec<[f64; 3]> = order.iter().map(|&i| pts[i]).collect();
        let c2: Vec<[f64; 3]> = order.iter().map(|&i| cols[i]).collect();
        let a = embed_patches(&build_patches(&pts, Some(&cols), 12, 6).unwrap(), &cfg, &params).unwrap();
        let b = embed_patches(&build_patches(&p2, Some(&c2), 12, 6).unwrap(), &cfg, &params).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn empty_stack_is_head_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    for pos_embed in [false, true] {
        let cfg = EncoderConfig {
            l_blocks: 0,
            pos_embed,
            ..tiny_config()
        };
        let params = EncoderParams::new(&cfg, &mut rng).unwrap();
        let tokens = Tensor::uniform(&[12, 8], 1.0, &mut rng);
        let (centers, _) = unit_cloud(&mut rng, 12);
        let mut inputs = tokens.clone();
        if let Some(p) = &params.pos_embed {
            let c = Tensor::from_rows(&centers.iter().map(|c| c.to_vec()).collect::<Vec<_>>()).unwrap();
            inputs.add_assign(&p.forward(&c).unwrap());
        }
        let seq = TokenSequence { tokens, centers };
        let z = encoder_forward(&seq, &cfg, &params).unwrap();
        assert_eq!(z, params.head.forward(&inputs).unwrap().mean_rows());
    }
}

#[test]
fn every_ablation_runs_forward_and_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let base = tiny_config();
    let (pts, cols) = unit_cloud(&mut rng, 60);
    let patches = build_patches(&pts, Some(&cols), base.s_tokens, base.k_neighbors).unwrap();
    let rows = base.component_ablations().into_iter().chain(base.ordering_ablations());
    for (label, cfg) in rows {
        let params = EncoderParams::new(&cfg, &mut rng).unwrap();
        let (z, cache) = embed_patches_cached(&patches, &cfg, &params).unwrap();
        let mut g = params.zeros_like();
        encoder_backward(&params, &cache, &z, &mut g);
        assert!(g.all_finite().is_none(), "{label}");
    }
}

#[test]
fn stream_permutations_follow_the_configured_curves() {
    // a Hilbert-ordered token sequence leaves the first stream unsorted
    let mut rng = ChaCha8Rng::seed_from_u64(49);
    let (pts, _) = unit_cloud(&mut rng, 12);
    let perm = sort_by_curve(&pts, CurveKind::Hilbert, 10).unwrap();
    assert_eq!(sort_by_curve(&perm.apply(&pts), CurveKind::Hilbert, 10).unwrap(), Permutation::identity(12));
}

#[test]
fn count_params_matches_enumeration_at_desk_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let cfg = EncoderConfig::desk();
    let params = EncoderParams::new(&cfg, &mut rng).unwrap();
    assert_eq!(count_params(&cfg), params.num_params());
}

#[test]
fn flops_scale_linearly_and_attention_quadratically() {
    let cfg = EncoderConfig::paper();
    let f = |s| count_flops(&cfg, s).total as f64;
    assert!(f(8192) / f(4096) <= 2.1);
    let blocks = |s| attention_flops(&cfg, s).blocks as f64;
    let r = blocks(1 << 20) / blocks(1 << 19);
    assert!((r - 4.0).abs() < 0.05, "{r}");
}
