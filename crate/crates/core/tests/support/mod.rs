//! Literal transcription of the block equations, shared by the block tests
//! and the acceptance harness.
#![allow(dead_code)]

use occtip::curves::Permutation;
use occtip::duomamba::{ConvMode, DuoMambaBlockParams};
use occtip::nn::{DepthwiseConv1d, LayerNorm, Linear};
use occtip::ssm::S6Params;
use occtip::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sig(x)
}

pub fn lin(x: &Mat, l: &Linear) -> Mat {
    let (din, dout) = (l.d_in(), l.d_out());
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|o| {
                    let mut acc = l.bias.as_ref().map_or(0.0, |b| b.data()[o]);
                    for i in 0..din {
                        acc += row[i] * l.weight.at(i, o);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &Mat, ln: &LayerNorm) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) / (var + 1e-5).sqrt() * ln.gain.data()[j] + ln.bias.data()[j])
                .collect()
        })
        .collect()
}

pub fn conv(x: &Mat, c: &DepthwiseConv1d) -> Mat {
    let (len, w) = (x.len() as isize, c.width());
    (0..len)
        .map(|t| {
            (0..x[0].len())
                .map(|ch| {
                    let mut acc = c.bias.data()[ch];
                    for j in 0..w {
                        let src = t + j as isize - c.pad_left as isize;
                        if (0..len).contains(&src) {
                            acc += c.kernel.at(ch, j) * x[src as usize][ch];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn s6(x: &Mat, p: &S6Params) -> Mat {
    let n = p.n_state();
    let chans = x[0].len();
    let mut h = vec![vec![0.0; n]; chans];
    let mut out = Vec::new();
    for row in x {
        let single = vec![row.clone()];
        let dt = lin(&lin(&single, &p.dt_down), &p.dt_up)[0].clone();
        let b = lin(&single, &p.b_proj)[0].clone();
        let c = lin(&single, &p.c_proj)[0].clone();
        let mut y = vec![0.0; chans];
        for ch in 0..chans {
            let delta = (1.0 + dt[ch].exp()).ln();
            for s in 0..n {
                let a = -p.a_log.at(ch, s).exp();
                h[ch][s] = (delta * a).exp() * h[ch][s] + delta * b[s] * row[ch];
                y[ch] += c[s] * h[ch][s];
            }
            if let Some(d) = &p.d_skip {
                y[ch] += d.data()[ch] * row[ch];
            }
        }
        out.push(y);
    }
    out
}

/// Literal evaluation of the block equations.
pub fn block_oracle(z_prev: &Mat, ph: &Permutation, pt: &Permutation, p: &DuoMambaBlockParams) -> Mat {
    let z_in = layer_norm(z_prev, &p.norm);
    let z: Mat = lin(&z_in, &p.gate_proj).into_iter().map(|r| r.into_iter().map(silu).collect()).collect();
    let stream = |proj: &Linear, cv: &Option<DepthwiseConv1d>, s6p: &S6Params, perm: &Permutation| -> Mat {
        let u = lin(&z_in, proj);
        let sorted: Mat = perm.forward().iter().map(|&i| u[i].clone()).collect();
        let pre = match cv {
            Some(c) => conv(&sorted, c),
            None => sorted,
        };
        let act: Mat = pre.into_iter().map(|r| r.into_iter().map(silu).collect()).collect();
        let y = s6(&act, s6p);
        let mut unsorted = vec![Vec::new(); y.len()];
        for (pos, &orig) in perm.forward().iter().enumerate() {
            unsorted[orig] = y[pos].clone();
        }
        unsorted
            .iter()
            .zip(&z)
            .map(|(a, g)| a.iter().zip(g).map(|(x, y)| x * y).collect())
            .collect()
    };
    let h = stream(&p.branch_proj_h, &p.conv_h, &p.s6_h, ph);
    let t = stream(&p.branch_proj_t, &p.conv_t, &p.s6_t, pt);
    let mixed: Mat = h.iter().zip(&t).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect()).collect();
    let out = lin(&mixed, &p.out_proj);
    out.iter()
        .zip(z_prev)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn random_perm(rng: &mut ChaCha8Rng, n: usize) -> Permutation {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(rng);
    Permutation::from_forward(v).unwrap()
}

pub fn perturbed_block(rng: &mut ChaCha8Rng, c: usize, conv: ConvMode) -> DuoMambaBlockParams {
    let mut p = DuoMambaBlockParams::new(c, 4, conv, true, rng);
    p.norm.gain = Tensor::uniform(&[c], 1.0, rng).map(|v| 1.0 + 0.5 * v);
    p.norm.bias = Tensor::uniform(&[c], 0.5, rng);
    for s6 in [&mut p.s6_h, &mut p.s6_t] {
        for v in s6.dt_up.bias.as_mut().unwrap().data_mut() {
            *v = rng.random_range(-2.0..0.5);
        }
    }
    p
}
