//! Selective state space recurrence (S6).
//!
//! Per channel `c`, state index `n` and step `t`:
//!
//! ```text
//! Δ_t   = softplus(dt_proj(x_t))          B_t = b_proj(x_t)     C_t = c_proj(x_t)
//! h_t   = exp(Δ_t,c · A_c,n) · h_{t-1} + Δ_t,c · B_t,n · x_t,c
//! y_t,c = Σ_n C_t,n · h_t,c,n + D_c · x_t,c
//! ```
//!
//! with `A = -exp(a_log)` and `h_0 = 0`. The input-independent special case
//! (zero projection weights) is the S4 recurrence.

use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, softplus_inv, Linear};
use crate::tensor::{join, Parameters, Tensor};
use rand::Rng;

pub const DT_MIN: f64 = 1e-3;
pub const DT_MAX: f64 = 1e-1;
pub const A_MIN: f64 = 1.0;
pub const A_MAX: f64 = 16.0;

/// Simplified zero-order hold: `ā = exp(dt·a)`, `b̄ = dt·b`.
pub fn zoh_discretize(a: f64, b: f64, dt: f64) -> Result<(f64, f64)> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if !(a < 0.0) {
        return Err(Error::invalid(format!("a must be negative, got {a}")));
    }
    Ok(((dt * a).exp(), dt * b))
}

#[derive(Clone, Debug, PartialEq)]
pub struct S6Params {
    /// `[channels, n_state]`, `A = -exp(a_log)`.
    pub a_log: Tensor,
    pub b_proj: Linear,
    pub c_proj: Linear,
    /// Low-rank `dt_proj = dt_up ∘ dt_down`.
    pub dt_down: Linear,
    pub dt_up: Linear,
    pub d_skip: Option<Tensor>,
}

impl Parameters for S6Params {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(join(prefix, "a_log"), &self.a_log);
        self.b_proj.visit(&join(prefix, "b_proj"), f);
        self.c_proj.visit(&join(prefix, "c_proj"), f);
        self.dt_down.visit(&join(prefix, "dt_down"), f);
        self.dt_up.visit(&join(prefix, "dt_up"), f);
        if let Some(d) = &self.d_skip {
            f(join(prefix, "d_skip"), d);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut Tensor)) {
        f(join(prefix, "a_log"), &mut self.a_log);
        self.b_proj.visit_mut(&join(prefix, "b_proj"), f);
        self.c_proj.visit_mut(&join(prefix, "c_proj"), f);
        self.dt_down.visit_mut(&join(prefix, "dt_down"), f);
        self.dt_up.visit_mut(&join(prefix, "dt_up"), f);
        if let Some(d) = &mut self.d_skip {
            f(join(prefix, "d_skip"), d);
        }
    }
}

impl S6Params {
    pub fn dt_rank(channels: usize) -> usize {
        channels.div_ceil(16)
    }

    /// `A` spread log-uniformly over `[-16, -1]` along the state index and
    /// `Δ` biased to start log-uniformly in `[1e-3, 1e-1]` per channel.
    pub fn new<R: Rng + ?Sized>(channels: usize, n_state: usize, d_skip: bool, rng: &mut R) -> Self {
        let rank = Self::dt_rank(channels);
        let mut a_log = Tensor::zeros(&[channels, n_state]);
        for c in 0..channels {
            for n in 0..n_state {
                let frac = if n_state > 1 {
                    n as f64 / (n_state - 1) as f64
                } else {
                    0.0
                };
                a_log.data_mut()[c * n_state + n] = A_MIN.ln() + frac * (A_MAX / A_MIN).ln();
            }
        }
        let mut dt_up = Linear::new(rank, channels, true, rng);
        let bias = dt_up.bias.as_mut().expect("dt_up has a bias");
        for v in bias.data_mut() {
            let u: f64 = rng.random();
            let dt = (DT_MIN.ln() + u * (DT_MAX / DT_MIN).ln()).exp();
            *v = softplus_inv(dt);
        }
        S6Params {
            a_log,
            b_proj: Linear::new(channels, n_state, true, rng),
            c_proj: Linear::new(channels, n_state, true, rng),
            dt_down: Linear::new(channels, rank, false, rng),
            dt_up,
            d_skip: d_skip.then(|| Tensor::full(&[channels], 1.0)),
        }
    }

    /// Input-independent parameters: every projection weight is zero, so
    /// `Δ`, `B`, `C` are the given constants for every step.
    pub fn constant(a: &Tensor, b: &[f64], c: &[f64], delta: &[f64], d_skip: Option<Vec<f64>>) -> Result<Self> {
        let (channels, n_state) = (a.rows(), a.cols());
        if b.len() != n_state || c.len() != n_state || delta.len() != channels {
            return Err(Error::shape("constant S6 parameter lengths disagree with A"));
        }
        if a.data().iter().any(|&v| !(v < 0.0)) || delta.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::invalid("A must be negative and Δ positive"));
        }
        let rank = Self::dt_rank(channels);
        let mut p = S6Params {
            a_log: a.map(|v| (-v).ln()),
            b_proj: Linear::zeros(channels, n_state, true),
            c_proj: Linear::zeros(channels, n_state, true),
            dt_down: Linear::zeros(channels, rank, false),
            dt_up: Linear::zeros(rank, channels, true),
            d_skip: None,
        };
        p.b_proj.bias.as_mut().unwrap().data_mut().copy_from_slice(b);
        p.c_proj.bias.as_mut().unwrap().data_mut().copy_from_slice(c);
        for (v, &d) in p.dt_up.bias.as_mut().unwrap().data_mut().iter_mut().zip(delta) {
            *v = softplus_inv(d);
        }
        if let Some(d) = d_skip {
            if d.len() != channels {
                return Err(Error::shape("d_skip length"));
            }
            p.d_skip = Some(Tensor::from_vec(&[channels], d)?);
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.a_log.rows()
    }

    pub fn n_state(&self) -> usize {
        self.a_log.cols()
    }

    /// `A = -exp(a_log)`, strictly negative.
    pub fn a_matrix(&self) -> Tensor {
        self.a_log.map(|v| -v.exp())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.channels() {
            return Err(Error::shape(format!(
                "scan expects [L, {}], got {:?}",
                self.channels(),
                x.shape()
            )));
        }
        Ok(())
    }
}

/// Recurrent state for step-by-step evaluation.
#[derive(Clone, Debug)]
pub struct ScanState {
    /// `[channels * n_state]`, channel-major.
    pub h: Vec<f64>,
    pub position: usize,
}

impl ScanState {
    pub fn new(params: &S6Params) -> Self {
        ScanState {
            h: vec![0.0; params.channels() * params.n_state()],
            position: 0,
        }
    }

    /// Advances one step with input `x_t` and returns `y_t`. Every projection
    /// is evaluated as an explicit dot product.
    pub fn step(&mut self, params: &S6Params, x_t: &[f64]) -> Result<Vec<f64>> {
        let (ch, ns) = (params.channels(), params.n_state());
        let affine = |lin: &Linear, j: usize| -> f64 {
            let w = lin.weight.data();
            let d_out = lin.d_out();
            let mut s = lin.bias.as_ref().map_or(0.0, |b| b.data()[j]);
            for (i, xi) in x_t.iter().enumerate() {
                s += xi * w[i * d_out + j];
            }
            s
        };
        let b_t: Vec<f64> = (0..ns).map(|n| affine(&params.b_proj, n)).collect();
        let c_t: Vec<f64> = (0..ns).map(|n| affine(&params.c_proj, n)).collect();
        let low: Vec<f64> = (0..params.dt_down.d_out()).map(|r| affine(&params.dt_down, r)).collect();
        let mut y = vec![0.0; ch];
        for c in 0..ch {
            let mut raw = params.dt_up.bias.as_ref().map_or(0.0, |b| b.data()[c]);
            for (r, lr) in low.iter().enumerate() {
                raw += lr * params.dt_up.weight.data()[r * ch + c];
            }
            let delta = softplus(raw);
            for n in 0..ns {
                let a = -params.a_log.data()[c * ns + n].exp();
                let (a_bar, b_bar) = zoh_discretize(a, b_t[n], delta).map_err(|e| Error::Numerical {
                    step: self.position,
                    msg: e.to_string(),
                })?;
                let h = &mut self.h[c * ns + n];
                *h = a_bar * *h + b_bar * x_t[c];
                y[c] += c_t[n] * *h;
            }
            if let Some(d) = &params.d_skip {
                y[c] += d.data()[c] * x_t[c];
            }
            if !y[c].is_finite() {
                return Err(Error::Numerical {
                    step: self.position,
                    msg: format!("non-finite output in channel {c}"),
                });
            }
        }
        self.position += 1;
        Ok(y)
    }
}

/// Literal per-step evaluation; the oracle for [`selective_scan`].
pub fn selective_scan_reference(x: &Tensor, params: &S6Params) -> Result<Tensor> {
    params.check_input(x)?;
    let mut state = ScanState::new(params);
    let mut y = Tensor::zeros(x.shape());
    for t in 0..x.rows() {
        let yt = state.step(params, x.row(t))?;
        y.row_mut(t).copy_from_slice(&yt);
    }
    Ok(y)
}

/// Activations kept for the backward pass.
pub struct ScanCache {
    x: Tensor,
    low: Tensor,
    dt_raw: Tensor,
    delta: Tensor,
    b: Tensor,
    c: Tensor,
    a: Tensor,
    /// `[L, channels * n_state]`
    h: Tensor,
}

/// Linear-time scan: projections for all steps are computed as matrix
/// products, then a single pass over time updates the state.
pub fn selective_scan(x: &Tensor, params: &S6Params) -> Result<Tensor> {
    scan_impl(x, params, false).map(|(y, _)| y)
}

pub fn selective_scan_cached(x: &Tensor, params: &S6Params) -> Result<(Tensor, ScanCache)> {
    let (y, cache) = scan_impl(x, params, true)?;
    Ok((y, cache.expect("cache requested")))
}

fn scan_impl(x: &Tensor, params: &S6Params, keep: bool) -> Result<(Tensor, Option<ScanCache>)> {
    params.check_input(x)?;
    let (len, ch, ns) = (x.rows(), params.channels(), params.n_state());
    let low = params.dt_down.forward(x)?;
    let dt_raw = params.dt_up.forward(&low)?;
    let delta = dt_raw.map(softplus);
    let b = params.b_proj.forward(x)?;
    let c = params.c_proj.forward(x)?;
    let a = params.a_matrix();
    let ad = a.data();

    let mut y = Tensor::zeros(&[len, ch]);
    let mut hist = if keep {
        Tensor::zeros(&[len, ch * ns])
    } else {
        Tensor::zeros(&[0, ch * ns])
    };
    let mut h = vec![0.0; ch * ns];
    let d_skip = params.d_skip.as_ref().map(|d| d.data());
    for t in 0..len {
        let xt = x.row(t);
        let dt = delta.row(t);
        let bt = b.row(t);
        let ct = c.row(t);
        let yt = y.row_mut(t);
        for ci in 0..ch {
            let dx = dt[ci] * xt[ci];
            let hs = &mut h[ci * ns..(ci + 1) * ns];
            let arow = &ad[ci * ns..(ci + 1) * ns];
            let mut acc = 0.0;
            for n in 0..ns {
                hs[n] = (dt[ci] * arow[n]).exp() * hs[n] + dx * bt[n];
                acc += ct[n] * hs[n];
            }
            if let Some(d) = d_skip {
                acc += d[ci] * xt[ci];
            }
            yt[ci] = acc;
        }
        if yt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: t,
                msg: "non-finite scan output".into(),
            });
        }
        if keep {
            hist.row_mut(t).copy_from_slice(&h);
        }
    }
    let cache = keep.then(|| ScanCache {
        x: x.clone(),
        low,
        dt_raw,
        delta,
        b,
        c,
        a,
        h: hist,
    });
    Ok((y, cache))
}

/// Reverse-time pass: accumulates parameter gradients into `grad` and
/// returns `dL/dx`.
pub fn selective_scan_backward(params: &S6Params, cache: &ScanCache, dy: &Tensor, grad: &mut S6Params) -> Tensor {
    let (len, ch, ns) = (cache.x.rows(), params.channels(), params.n_state());
    let mut dx = Tensor::zeros(&[len, ch]);
    let mut d_delta = Tensor::zeros(&[len, ch]);
    let mut db = Tensor::zeros(&[len, ns]);
    let mut dc = Tensor::zeros(&[len, ns]);
    let mut da = vec![0.0; ch * ns];
    let mut gh = vec![0.0; ch * ns];
    let ad = cache.a.data();
    let zero = vec![0.0; ch * ns];

    for t in (0..len).rev() {
        let xt = cache.x.row(t);
        let dt = cache.delta.row(t);
        let bt = cache.b.row(t);
        let ct = cache.c.row(t);
        let ht = cache.h.row(t);
        let hprev: &[f64] = if t > 0 { cache.h.row(t - 1) } else { &zero };
        let dyt = dy.row(t);
        {
            let dct = dc.row_mut(t);
            for ci in 0..ch {
                for n in 0..ns {
                    dct[n] += dyt[ci] * ht[ci * ns + n];
                }
            }
        }
        if let (Some(d), Some(gd)) = (&params.d_skip, &mut grad.d_skip) {
            let gd = gd.data_mut();
            for ci in 0..ch {
                gd[ci] += dyt[ci] * xt[ci];
                dx.data_mut()[t * ch + ci] += dyt[ci] * d.data()[ci];
            }
        }
        let mut dbt = vec![0.0; ns];
        for ci in 0..ch {
            let mut dd = 0.0;
            let mut dxc = 0.0;
            for n in 0..ns {
                let k = ci * ns + n;
                let g = gh[k] + dyt[ci] * ct[n];
                let a_bar = (dt[ci] * ad[k]).exp();
                dd += g * (ad[k] * a_bar * hprev[k] + bt[n] * xt[ci]);
                da[k] += g * dt[ci] * a_bar * hprev[k];
                dbt[n] += g * dt[ci] * xt[ci];
                dxc += g * dt[ci] * bt[n];
                gh[k] = g * a_bar;
            }
            d_delta.data_mut()[t * ch + ci] = dd;
            dx.data_mut()[t * ch + ci] += dxc;
        }
        db.row_mut(t).copy_from_slice(&dbt);
    }

    {
        let ga = grad.a_log.data_mut();
        for k in 0..ch * ns {
            ga[k] += da[k] * ad[k];
        }
    }
    let mut d_raw = d_delta;
    for (g, &r) in d_raw.data_mut().iter_mut().zip(cache.dt_raw.data()) {
        *g *= sigmoid(r);
    }
    let d_low = params.dt_up.backward(&cache.low, &d_raw, &mut grad.dt_up);
    dx.add_assign(&params.dt_down.backward(&cache.x, &d_low, &mut grad.dt_down));
    dx.add_assign(&params.b_proj.backward(&cache.x, &db, &mut grad.b_proj));
    dx.add_assign(&params.c_proj.backward(&cache.x, &dc, &mut grad.c_proj));
    dx
}
