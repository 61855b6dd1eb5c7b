//! Analytic FLOPs next to measured encoder latency over a range of token
//! counts.

use crate::duomamba::{attention_flops, count_flops, encoder_forward, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::{Duration, Instant};

pub const BENCH_SIZES: [usize; 5] = [128, 256, 512, 1024, 2048];
pub const DEFAULT_RUNS: usize = 20;
pub const WARMUP_RUNS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub s_tokens: usize,
    pub duomamba_flops: u64,
    pub attention_flops: u64,
    /// Median forward latency of the block stack and head, in seconds.
    pub latency_s: f64,
}

/// Median wall time of `runs` calls to each of `f(0), .., f(n - 1)` after
/// [`WARMUP_RUNS`] untimed rounds. Calls are interleaved round by round so
/// that background load lands on every case alike.
pub fn median_times(n: usize, runs: usize, mut f: impl FnMut(usize) -> Result<()>) -> Result<Vec<Duration>> {
    for _ in 0..WARMUP_RUNS {
        for i in 0..n {
            f(i)?;
        }
    }
    let mut times = vec![Vec::with_capacity(runs.max(1)); n];
    for _ in 0..runs.max(1) {
        for (i, t) in times.iter_mut().enumerate() {
            let start = Instant::now();
            f(i)?;
            t.push(start.elapsed());
        }
    }
    Ok(times
        .into_iter()
        .map(|mut t| {
            t.sort();
            t[t.len() / 2]
        })
        .collect())
}

/// Random token sequence with centers in the unit cube.
pub fn random_tokens(s: usize, c: usize, rng: &mut ChaCha8Rng) -> TokenSequence {
    TokenSequence {
        tokens: Tensor::uniform(&[s, c], 1.0, rng),
        centers: (0..s)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect(),
    }
}

/// One row per entry of `sizes`, with `config.s_tokens` overridden. Latency
/// covers curve ordering, every block and the head on fixed random tokens;
/// `runs == 0` skips timing and reports 0.
pub fn run_bench(config: &EncoderConfig, sizes: &[usize], runs: usize, seed: u64) -> Result<Vec<BenchRow>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = EncoderParams::new(config, &mut rng)?;
    let cases: Vec<(EncoderConfig, TokenSequence)> = sizes
        .iter()
        .map(|&s| {
            let cfg = EncoderConfig {
                s_tokens: s,
                ..config.clone()
            };
            let tokens = random_tokens(s, cfg.c_dim, &mut rng);
            (cfg, tokens)
        })
        .collect();
    let latency = if runs == 0 {
        vec![Duration::ZERO; cases.len()]
    } else {
        median_times(cases.len(), runs, |i| {
            let (cfg, tokens) = &cases[i];
            encoder_forward(tokens, cfg, &params).map(|_| ())
        })?
    };
    Ok(cases
        .iter()
        .zip(latency)
        .map(|((cfg, _), t)| BenchRow {
            s_tokens: cfg.s_tokens,
            duomamba_flops: count_flops(cfg, cfg.s_tokens).total,
            attention_flops: attention_flops(cfg, cfg.s_tokens).total,
            latency_s: t.as_secs_f64(),
        })
        .collect())
}

/// CSV with a header line: `s_tokens,duomamba_flops,attention_flops,latency_s`.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("s_tokens,duomamba_flops,attention_flops,latency_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6e}\n",
            r.s_tokens, r.duomamba_flops, r.attention_flops, r.latency_s
        ));
    }
    out
}
