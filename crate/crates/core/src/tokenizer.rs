//! Point tokenizer: farthest point sampling for patch centers, kNN patches,
//! and a shared mini-PointNet with max pooling that embeds each patch.

use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::nn::{silu, silu_grad, Linear};
use crate::tensor::Tensor;
use rand::Rng;
use std::cmp::Ordering;

/// Per-channel color substituted when a cloud carries no color.
pub const COLOR_CONSTANT: f64 = 0.4;
pub const POINT_FEATURES: usize = 6;
pub const POINTNET_HIDDEN: usize = 64;

fn lex_cmp(a: &[f64; 3], b: &[f64; 3]) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Greedy farthest point sampling.
///
/// Starts from the lexicographically smallest point; each further center
/// maximizes the distance to the chosen set, ties going to the
/// lexicographically smallest coordinates. The emission order depends only
/// on the coordinate set, not on input order. With `s > N` the order repeats
/// cyclically.
pub fn farthest_point_sampling(points: &[[f64; 3]], s: usize) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::invalid("farthest point sampling needs at least one point"));
    }
    if s == 0 {
        return Err(Error::InvalidConfig("number of centers must be at least 1".into()));
    }
    let n = points.len();
    let better = |i: usize, j: usize| lex_cmp(&points[i], &points[j]).then(i.cmp(&j)) == Ordering::Less;
    let mut first = 0;
    for i in 1..n {
        if better(i, first) {
            first = i;
        }
    }
    let take = s.min(n);
    let mut order = Vec::with_capacity(s);
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = first;
    loop {
        order.push(current);
        chosen[current] = true;
        if order.len() == take {
            break;
        }
        let c = points[current];
        let mut best: Option<usize> = None;
        for i in 0..n {
            if chosen[i] {
                continue;
            }
            let d = dist2(&points[i], &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            best = match best {
                None => Some(i),
                Some(b) => match min_d[i].total_cmp(&min_d[b]) {
                    Ordering::Greater => Some(i),
                    Ordering::Equal if better(i, b) => Some(i),
                    _ => Some(b),
                },
            };
        }
        current = best.expect("unchosen point remains");
    }
    for i in take..s {
        order.push(order[i % take]);
    }
    Ok(order)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: Vec<[f64; 3]>,
    /// `[S][k]` indices into the source cloud.
    pub neighbor_indices: Vec<Vec<usize>>,
    /// `[S][k]` neighbor minus center.
    pub relative_points: Vec<Vec<[f64; 3]>>,
    pub patch_colors: Option<Vec<Vec<[f64; 3]>>>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn k(&self) -> usize {
        self.neighbor_indices.first().map_or(0, |r| r.len())
    }

    /// Drops per-point colors; the constant color is used instead.
    pub fn without_colors(&self) -> PatchSet {
        PatchSet {
            patch_colors: None,
            ..self.clone()
        }
    }

    /// Flattened `[S * k, 6]` features: relative xyz then rgb.
    pub fn features(&self) -> Tensor {
        let k = self.k();
        let mut data = Vec::with_capacity(self.len() * k * POINT_FEATURES);
        for (s, rel) in self.relative_points.iter().enumerate() {
            for (j, r) in rel.iter().enumerate() {
                data.extend_from_slice(r);
                match &self.patch_colors {
                    Some(c) => data.extend_from_slice(&c[s][j]),
                    None => data.extend_from_slice(&[COLOR_CONSTANT; 3]),
                }
            }
        }
        Tensor::from_vec(&[self.len() * k, POINT_FEATURES], data).expect("consistent patch sizes")
    }
}

/// Groups the `k` nearest points (L2) around each center. Ties are broken by
/// coordinates, then by index.
pub fn knn_group(
    points: &[[f64; 3]],
    colors: Option<&[[f64; 3]]>,
    centers: &[usize],
    k: usize,
) -> Result<PatchSet> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if k > points.len() {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds the {} available points",
            points.len()
        )));
    }
    if let Some(c) = colors {
        if c.len() != points.len() {
            return Err(Error::shape("colors and points differ in length"));
        }
    }
    let mut neighbor_indices = Vec::with_capacity(centers.len());
    let mut relative_points = Vec::with_capacity(centers.len());
    let mut patch_colors = colors.map(|_| Vec::with_capacity(centers.len()));
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for &ci in centers {
        let c = *points
            .get(ci)
            .ok_or_else(|| Error::invalid(format!("center index {ci} out of range")))?;
        keyed.clear();
        keyed.extend(points.iter().enumerate().map(|(i, p)| (dist2(p, &c), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0)
                .then(lex_cmp(&points[a.1], &points[b.1]))
                .then(a.1.cmp(&b.1))
        };
        if k < keyed.len() {
            keyed.select_nth_unstable_by(k - 1, cmp);
        }
        keyed[..k].sort_unstable_by(cmp);
        let idx: Vec<usize> = keyed[..k].iter().map(|&(_, i)| i).collect();
        relative_points.push(
            idx.iter()
                .map(|&i| [points[i][0] - c[0], points[i][1] - c[1], points[i][2] - c[2]])
                .collect(),
        );
        if let (Some(out), Some(col)) = (&mut patch_colors, colors) {
            out.push(idx.iter().map(|&i| col[i]).collect());
        }
        neighbor_indices.push(idx);
    }
    Ok(PatchSet {
        centers: centers.iter().map(|&i| points[i]).collect(),
        neighbor_indices,
        relative_points,
        patch_colors,
    })
}

/// Farthest point sampling followed by kNN grouping.
pub fn build_patches(
    points: &[[f64; 3]],
    colors: Option<&[[f64; 3]]>,
    s: usize,
    k: usize,
) -> Result<PatchSet> {
    let centers = farthest_point_sampling(points, s)?;
    knn_group(points, colors, &centers, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[S, C]`
    pub tokens: Tensor,
    pub centers: Vec<[f64; 3]>,
}

/// Shared per-point MLP (6 -> 64 -> C, SiLU after each layer), max pool over
/// the patch, then an affine C -> C.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniPointNet {
    pub layer1: Linear,
    pub layer2: Linear,
    pub out: Linear,
}

impl_parameters!(MiniPointNet { layer1, layer2, out });

pub struct PointNetCache {
    x: Tensor,
    a1: Tensor,
    h1: Tensor,
    a2: Tensor,
    pooled: Tensor,
    argmax: Vec<usize>,
    k: usize,
}

impl MiniPointNet {
    pub fn new<R: Rng + ?Sized>(c_dim: usize, rng: &mut R) -> Self {
        MiniPointNet {
            layer1: Linear::new(POINT_FEATURES, POINTNET_HIDDEN, true, rng),
            layer2: Linear::new(POINTNET_HIDDEN, c_dim, true, rng),
            out: Linear::new(c_dim, c_dim, true, rng),
        }
    }

    pub fn c_dim(&self) -> usize {
        self.out.d_out()
    }

    fn check(&self, patches: &PatchSet) -> Result<()> {
        if self.layer1.d_in() != POINT_FEATURES
            || self.layer1.d_out() != self.layer2.d_in()
            || self.layer2.d_out() != self.out.d_in()
        {
            return Err(Error::shape("mini-PointNet layer widths do not chain"));
        }
        if patches.is_empty() || patches.k() == 0 {
            return Err(Error::shape("empty patch set"));
        }
        if patches.relative_points.iter().any(|r| r.len() != patches.k()) {
            return Err(Error::shape("patches have unequal sizes"));
        }
        Ok(())
    }

    pub fn forward(&self, patches: &PatchSet) -> Result<TokenSequence> {
        self.forward_cached(patches).map(|(t, _)| t)
    }

    pub fn forward_cached(&self, patches: &PatchSet) -> Result<(TokenSequence, PointNetCache)> {
        self.check(patches)?;
        let (s, k, c) = (patches.len(), patches.k(), self.c_dim());
        let x = patches.features();
        let a1 = self.layer1.forward(&x)?;
        let h1 = a1.map(silu);
        let a2 = self.layer2.forward(&h1)?;
        let width = a2.cols();
        let mut pooled = Tensor::zeros(&[s, width]);
        let mut argmax = vec![0usize; s * width];
        for p in 0..s {
            for ch in 0..width {
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for j in 0..k {
                    let v = silu(a2.at(p * k + j, ch));
                    if v > best {
                        best = v;
                        arg = j;
                    }
                }
                pooled.data_mut()[p * width + ch] = best;
                argmax[p * width + ch] = arg;
            }
        }
        let tokens = self.out.forward(&pooled)?;
        debug_assert_eq!(tokens.cols(), c);
        let seq = TokenSequence {
            tokens,
            centers: patches.centers.clone(),
        };
        Ok((
            seq,
            PointNetCache {
                x,
                a1,
                h1,
                a2,
                pooled,
                argmax,
                k,
            },
        ))
    }

    /// Accumulates gradients given `dL/dtokens`.
    pub fn backward(&self, cache: &PointNetCache, d_tokens: &Tensor, grad: &mut MiniPointNet) {
        let d_pooled = self.out.backward(&cache.pooled, d_tokens, &mut grad.out);
        let (s, width, k) = (cache.pooled.rows(), cache.pooled.cols(), cache.k);
        let mut d_a2 = Tensor::zeros(&[s * k, width]);
        for p in 0..s {
            for ch in 0..width {
                let j = cache.argmax[p * width + ch];
                let row = p * k + j;
                d_a2.data_mut()[row * width + ch] = d_pooled.at(p, ch) * silu_grad(cache.a2.at(row, ch));
            }
        }
        let mut d_a1 = self.layer2.backward(&cache.h1, &d_a2, &mut grad.layer2);
        for (g, &a) in d_a1.data_mut().iter_mut().zip(cache.a1.data()) {
            *g *= silu_grad(a);
        }
        self.layer1.backward(&cache.x, &d_a1, &mut grad.layer1);
    }
}
