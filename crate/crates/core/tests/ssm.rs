use occtip::gradcheck::{check_input, check_parameters, probe, DEFAULT_STEP};
use occtip::ssm::{
    selective_scan, selective_scan_backward, selective_scan_cached, selective_scan_reference, zoh_discretize,
    S6Params, ScanState,
};
use occtip::tensor::{Parameters, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Exact zero-order hold for a scalar system: `b̄ = (exp(dt·a) - 1) / a · b`.
fn zoh_exact(a: f64, b: f64, dt: f64) -> (f64, f64) {
    ((dt * a).exp(), ((dt * a).exp() - 1.0) / a * b)
}

#[test]
fn simplified_zoh_example_and_gap_to_exact() {
    let (a_bar, b_bar) = zoh_discretize(-2.0, 3.0, 0.5).unwrap();
    assert!((a_bar - (-1f64).exp()).abs() < 1e-15);
    assert!((a_bar - 0.36788).abs() < 5e-6);
    assert_eq!(b_bar, 1.5);
    let (ea, eb) = zoh_exact(-2.0, 3.0, 0.5);
    assert_eq!(ea, a_bar);
    // (1 - e^-1) * 1.5 = 0.948..., the simplified form overshoots by ~0.55
    assert!((eb - 0.948_180_8).abs() < 1e-6);
    assert!((b_bar - eb - 0.551_819_2).abs() < 1e-6);
    // the gap vanishes to first order as dt -> 0
    let (_, small) = zoh_discretize(-2.0, 3.0, 1e-6).unwrap();
    let (_, small_exact) = zoh_exact(-2.0, 3.0, 1e-6);
    assert!((small - small_exact).abs() < 1e-11);
}

fn half_life_params() -> S6Params {
    // softplus(0) = ln 2 and A = -1 give ā = 0.5; B = 1/ln 2 gives b̄ = 1
    let a = Tensor::from_vec(&[1, 1], vec![-1.0]).unwrap();
    S6Params::constant(&a, &[1.0 / 2f64.ln()], &[1.0], &[2f64.ln()], None).unwrap()
}

#[test]
fn unrolled_recurrence() {
    let p = half_life_params();
    let x = Tensor::from_vec(&[3, 1], vec![1.0, 0.0, 0.0]).unwrap();
    for y in [selective_scan(&x, &p).unwrap(), selective_scan_reference(&x, &p).unwrap()] {
        let expect = [1.0, 0.5, 0.25];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-14, "{:?}", y.data());
        }
    }
}

fn random_params(rng: &mut ChaCha8Rng, ch: usize, ns: usize) -> S6Params {
    let mut p = S6Params::new(ch, ns, rng.random_bool(0.5), rng);
    // spread Δ wider than the init range so the recurrence is exercised
    for v in p.dt_up.bias.as_mut().unwrap().data_mut() {
        *v = rng.random_range(-4.0..1.0);
    }
    p
}

#[test]
fn kernel_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..40 {
        let len = rng.random_range(1..=256);
        let ch = rng.random_range(1..=32);
        let ns = rng.random_range(1..=16);
        let p = random_params(&mut rng, ch, ns);
        let x = Tensor::uniform(&[len, ch], 1.0, &mut rng);
        let fast = selective_scan(&x, &p).unwrap();
        let slow = selective_scan_reference(&x, &p).unwrap();
        assert!(fast.max_abs_diff(&slow) <= 1e-12, "diff {}", fast.max_abs_diff(&slow));
    }
}

#[test]
fn input_independent_scan_is_a_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (len, ch, ns) = (48, 3, 5);
    let a = Tensor::uniform(&[ch, ns], 1.0, &mut rng).map(|v| -(v.abs() + 0.05));
    let b: Vec<f64> = (0..ns).map(|_| rng.random_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..ns).map(|_| rng.random_range(-1.0..1.0)).collect();
    let delta: Vec<f64> = (0..ch).map(|_| rng.random_range(0.05..0.8)).collect();
    let p = S6Params::constant(&a, &b, &c, &delta, None).unwrap();
    let x = Tensor::uniform(&[len, ch], 1.0, &mut rng);
    let y = selective_scan(&x, &p).unwrap();
    for ci in 0..ch {
        let kernel: Vec<f64> = (0..len)
            .map(|t| {
                (0..ns)
                    .map(|n| {
                        let (a_bar, b_bar) = zoh_discretize(a.at(ci, n), b[n], delta[ci]).unwrap();
                        c[n] * a_bar.powi(t as i32) * b_bar
                    })
                    .sum()
            })
            .collect();
        for t in 0..len {
            let conv: f64 = (0..=t).map(|s| kernel[t - s] * x.at(s, ci)).sum();
            assert!((conv - y.at(t, ci)).abs() <= 1e-10);
        }
    }
}

#[test]
fn bounded_input_keeps_state_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (ch, ns) = (4, 6);
    let a = Tensor::uniform(&[ch, ns], 1.0, &mut rng).map(|v| -(v.abs() + 0.01));
    let b: Vec<f64> = (0..ns).map(|_| rng.random_range(-2.0..2.0)).collect();
    let c = vec![1.0; ns];
    let delta = vec![0.3; ch];
    let p = S6Params::constant(&a, &b, &c, &delta, None).unwrap();
    let mut max_a_bar: f64 = 0.0;
    for ci in 0..ch {
        for n in 0..ns {
            max_a_bar = max_a_bar.max(zoh_discretize(a.at(ci, n), b[n], delta[ci]).unwrap().0);
        }
    }
    let max_bx = b.iter().map(|v| (v * 0.3).abs()).fold(0.0, f64::max);
    let bound = max_bx / (1.0 - max_a_bar);
    let mut state = ScanState::new(&p);
    for _ in 0..2000 {
        let xt: Vec<f64> = (0..ch).map(|_| rng.random_range(-1.0..1.0)).collect();
        state.step(&p, &xt).unwrap();
        assert!(state.h.iter().all(|h| h.abs() <= bound + 1e-12));
    }
}

#[test]
fn scan_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (len, ch, ns) = (16, 4, 4);
    let mut p = S6Params::new(ch, ns, true, &mut rng);
    for v in p.dt_up.bias.as_mut().unwrap().data_mut() {
        *v = rng.random_range(-2.0..0.5);
    }
    let x = Tensor::uniform(&[len, ch], 1.0, &mut rng);
    let w = Tensor::uniform(&[len, ch], 1.0, &mut rng);
    let (_, cache) = selective_scan_cached(&x, &p).unwrap();
    let mut g = p.zeros_like();
    let dx = selective_scan_backward(&p, &cache, &w, &mut g);
    let report = check_parameters(&p, &g, |q| Ok(probe(&selective_scan(&x, q)?, &w)), DEFAULT_STEP, None).unwrap();
    assert!(report.worst <= 1e-4, "{report:?}");
    let ex = check_input(&x, &dx, |x| Ok(probe(&selective_scan(x, &p)?, &w)), DEFAULT_STEP).unwrap();
    assert!(ex <= 1e-4, "{ex}");
}

#[test]
fn runtime_is_linear_in_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let p = S6Params::new(16, 8, true, &mut rng);
    let short = Tensor::uniform(&[2048, 16], 1.0, &mut rng);
    let long = Tensor::uniform(&[4096, 16], 1.0, &mut rng);
    let time = |x: &Tensor| {
        let start = Instant::now();
        std::hint::black_box(selective_scan(x, &p).unwrap());
        start.elapsed().as_secs_f64()
    };
    time(&short);
    time(&long);
    let mut ratios: Vec<f64> = (0..7).map(|_| time(&long) / time(&short)).collect();
    ratios.sort_by(f64::total_cmp);
    assert!(ratios[3] <= 2.5, "median ratio {}", ratios[3]);
}
