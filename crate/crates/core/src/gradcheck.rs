//! Central-difference verification of hand-written backward passes.
//!
//! The error for one tensor is `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|)`
//! (analytic `a`, numeric `n`); entries with vanishing gradient therefore do
//! not blow the ratio up. The reported figure is the worst tensor.

use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst: f64,
    pub per_tensor: Vec<(String, f64)>,
    /// Largest absolute analytic/numeric discrepancy per tensor.
    pub abs_error: Vec<f64>,
    /// Largest gradient magnitude per tensor.
    pub scale: Vec<f64>,
}

impl GradCheckReport {
    pub fn worst_tensor(&self) -> Option<&str> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(n, _)| n.as_str())
    }

    /// Error of the whole gradient vector: the largest absolute discrepancy
    /// over the largest gradient entry of any tensor.
    pub fn vector_relative(&self) -> f64 {
        let scale = self.scale.iter().copied().fold(FLOOR, f64::max);
        self.abs_error.iter().copied().fold(0.0, f64::max) / scale
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(FLOOR);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Entry indices probed for a tensor of `len` values: all of them, or an
/// evenly strided subset of at most `max_entries`.
fn probe_indices(len: usize, max_entries: Option<usize>) -> Vec<usize> {
    match max_entries {
        Some(m) if m < len => {
            let stride = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

/// Compares `analytic` (same structure as `params`) against central
/// differences of `loss` for every parameter tensor.
pub fn check_parameters<P, F>(
    params: &P,
    analytic: &P,
    loss: F,
    h: f64,
    max_entries: Option<usize>,
) -> Result<GradCheckReport>
where
    P: Parameters + Clone,
    F: Fn(&P) -> Result<f64>,
{
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    if grads.len() != names.len() {
        return Err(Error::shape("gradient structure differs from parameters"));
    }
    let mut work = params.clone();
    let mut per_tensor = Vec::with_capacity(names.len());
    let mut abs_error = Vec::with_capacity(names.len());
    let mut scale = Vec::with_capacity(names.len());
    for (ti, name) in names.iter().enumerate() {
        let len = grads[ti].len();
        let idx = probe_indices(len, max_entries);
        let mut num = Vec::with_capacity(idx.len());
        let mut ana = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work.tensors_mut()[ti].data()[i];
            work.tensors_mut()[ti].data_mut()[i] = orig + h;
            let fp = loss(&work)?;
            work.tensors_mut()[ti].data_mut()[i] = orig - h;
            let fm = loss(&work)?;
            work.tensors_mut()[ti].data_mut()[i] = orig;
            let g = (fp - fm) / (2.0 * h);
            if !g.is_finite() || !grads[ti][i].is_finite() {
                return Err(Error::Numerical {
                    step: i,
                    msg: format!("non-finite gradient in {name}"),
                });
            }
            num.push(g);
            ana.push(grads[ti][i]);
        }
        per_tensor.push((name.clone(), relative_error(&ana, &num)));
        abs_error.push(ana.iter().zip(&num).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max));
        scale.push(ana.iter().chain(&num).fold(0.0f64, |m, v| m.max(v.abs())));
    }
    let worst = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        worst,
        per_tensor,
        abs_error,
        scale,
    })
}

/// Same check for the gradient with respect to an input tensor.
pub fn check_input<F>(x: &Tensor, analytic: &Tensor, loss: F, h: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    let mut work = x.clone();
    let mut num = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = work.data()[i];
        work.data_mut()[i] = orig + h;
        let fp = loss(&work)?;
        work.data_mut()[i] = orig - h;
        let fm = loss(&work)?;
        work.data_mut()[i] = orig;
        num.push((fp - fm) / (2.0 * h));
    }
    if num.iter().chain(analytic.data()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            step: 0,
            msg: "non-finite input gradient".into(),
        });
    }
    Ok(relative_error(analytic.data(), &num))
}

/// `Σ y ⊙ w`, the scalar probe used to turn a tensor-valued map into a loss.
pub fn probe(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}
