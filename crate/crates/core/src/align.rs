//! Cross-modal contrastive alignment: projection heads for the frozen text
//! and image features, the mixed point+image embedding, the symmetric
//! contrastive loss and the four-term total.

use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::nn::{l2_normalize_rows, l2_normalize_rows_backward, Linear};
use crate::tensor::{matmul, matmul_at_acc, matmul_bt, Tensor};
use serde::{Deserialize, Serialize};

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 5e-3;
pub const TAU_MAX: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    /// Sum over the batch.
    Sum,
    /// Sum divided by the batch size.
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Text,
    Image,
    /// Takes the concatenation of point and image embeddings.
    Mixed,
}

/// Affine map followed by row-wise L2 normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub kind: HeadKind,
    pub linear: Linear,
}

impl_parameters!(ProjectionHead { linear });

pub struct HeadCache {
    input: Tensor,
    z: Tensor,
    norms: Vec<f64>,
}

impl ProjectionHead {
    /// Identity map for text/image heads; `[I; I]` (sum of the two halves)
    /// for the mixed head.
    pub fn identity(kind: HeadKind, d: usize) -> Self {
        let linear = match kind {
            HeadKind::Text | HeadKind::Image => Linear::identity(d),
            HeadKind::Mixed => {
                let mut l = Linear::zeros(2 * d, d, true);
                for i in 0..d {
                    l.weight.data_mut()[i * d + i] = 1.0;
                    l.weight.data_mut()[(d + i) * d + i] = 1.0;
                }
                l
            }
        };
        ProjectionHead { kind, linear }
    }

    pub fn d_out(&self) -> usize {
        self.linear.d_out()
    }

    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        self.project_cached(features).map(|(z, _)| z)
    }

    pub fn project_cached(&self, features: &Tensor) -> Result<(Tensor, HeadCache)> {
        let u = self.linear.forward(features)?;
        let (z, norms) = l2_normalize_rows(&u)?;
        let cache = HeadCache {
            input: features.clone(),
            z: z.clone(),
            norms,
        };
        Ok((z, cache))
    }

    /// Accumulates into `grad` and returns `dL/dfeatures`.
    pub fn backward(&self, cache: &HeadCache, dz: &Tensor, grad: &mut ProjectionHead) -> Tensor {
        let du = l2_normalize_rows_backward(&cache.z, &cache.norms, dz);
        self.linear.backward(&cache.input, &du, &mut grad.linear)
    }
}

/// Learnable temperature, `τ = exp(log_tau)` clamped to `[TAU_MIN, TAU_MAX]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TemperatureParam {
    pub log_tau: Tensor,
}

impl_parameters!(TemperatureParam { log_tau });

impl Default for TemperatureParam {
    fn default() -> Self {
        Self::new(TAU_INIT)
    }
}

impl TemperatureParam {
    pub fn new(tau: f64) -> Self {
        TemperatureParam {
            log_tau: Tensor::scalar(tau.ln()),
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// `dτ/dlog_tau`; zero where the clamp is active.
    pub fn dtau_dlog(&self) -> f64 {
        let t = self.log_tau.data()[0].exp();
        if (TAU_MIN..=TAU_MAX).contains(&t) {
            t
        } else {
            0.0
        }
    }
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Value and gradients of [`cross_modal_loss`].
pub struct PairGrad {
    pub loss: f64,
    pub d_a: Tensor,
    pub d_b: Tensor,
    pub d_tau: f64,
}

fn check_pair(za: &Tensor, zb: &Tensor, tau: f64) -> Result<()> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if za.shape() != zb.shape() || za.shape().len() != 2 {
        return Err(Error::shape(format!(
            "paired embeddings differ: {:?} vs {:?}",
            za.shape(),
            zb.shape()
        )));
    }
    if za.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(())
}

/// Symmetric contrastive loss `-(l_ab + l_ba) / 2` where
/// `l_ab = Σ_i log softmax_j(a_i·b_j / τ)_i`.
pub fn cross_modal_loss(za: &Tensor, zb: &Tensor, tau: f64, reduction: Reduction) -> Result<f64> {
    cross_modal_loss_grad(za, zb, tau, reduction).map(|g| g.loss)
}

pub fn cross_modal_loss_grad(za: &Tensor, zb: &Tensor, tau: f64, reduction: Reduction) -> Result<PairGrad> {
    check_pair(za, zb, tau)?;
    let b = za.rows();
    let mut s = matmul_bt(za, zb);
    s.scale(1.0 / tau);
    let row_lse: Vec<f64> = (0..b).map(|i| log_sum_exp(s.row(i).iter().copied())).collect();
    let col_lse: Vec<f64> = (0..b).map(|j| log_sum_exp((0..b).map(|i| s.at(i, j)))).collect();
    let mut l_ab = 0.0;
    let mut l_ba = 0.0;
    for i in 0..b {
        l_ab += s.at(i, i) - row_lse[i];
        l_ba += s.at(i, i) - col_lse[i];
    }
    let scale = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => 1.0 / b as f64,
    };
    let loss = -0.5 * (l_ab + l_ba) * scale;
    // dL/dS_ij = scale * (P_ij + Q_ij - 2δ_ij) / 2 with P, Q the row and
    // column softmaxes
    let mut g = Tensor::zeros(&[b, b]);
    let mut d_tau = 0.0;
    for i in 0..b {
        for j in 0..b {
            let sij = s.at(i, j);
            let p = (sij - row_lse[i]).exp();
            let q = (sij - col_lse[j]).exp();
            let delta = if i == j { 2.0 } else { 0.0 };
            let gij = 0.5 * scale * (p + q - delta);
            g.data_mut()[i * b + j] = gij;
            d_tau -= gij * sij / tau;
        }
    }
    let mut d_a = matmul(&g, zb);
    d_a.scale(1.0 / tau);
    let mut d_b = Tensor::zeros(&[b, zb.cols()]);
    matmul_at_acc(&g, za, &mut d_b);
    d_b.scale(1.0 / tau);
    if !loss.is_finite() {
        return Err(Error::Numerical {
            step: 0,
            msg: "non-finite contrastive loss".into(),
        });
    }
    Ok(PairGrad { loss, d_a, d_b, d_tau })
}

/// Normalized embeddings of one batch; every row has unit norm.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingBatch {
    pub z_t: Option<Tensor>,
    pub z_i: Option<Tensor>,
    pub z_p: Option<Tensor>,
    pub z_m: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub point_image: f64,
    pub point_text: f64,
    pub image_text: f64,
    pub mixed_text: f64,
    pub total: f64,
}

fn require<'a>(t: &'a Option<Tensor>, name: &str) -> Result<&'a Tensor> {
    t.as_ref()
        .ok_or_else(|| Error::invalid(format!("missing {name} embeddings")))
}

/// `L(P,I) + L(P,T) + L(I,T) + L(M,T)` with one shared temperature.
pub fn total_loss(batch: &EmbeddingBatch, tau: f64, reduction: Reduction) -> Result<LossBreakdown> {
    let (t, i, p, m) = (
        require(&batch.z_t, "text")?,
        require(&batch.z_i, "image")?,
        require(&batch.z_p, "point")?,
        require(&batch.z_m, "mixed")?,
    );
    let point_image = cross_modal_loss(p, i, tau, reduction)?;
    let point_text = cross_modal_loss(p, t, tau, reduction)?;
    let image_text = cross_modal_loss(i, t, tau, reduction)?;
    let mixed_text = cross_modal_loss(m, t, tau, reduction)?;
    Ok(LossBreakdown {
        point_image,
        point_text,
        image_text,
        mixed_text,
        total: point_image + point_text + image_text + mixed_text,
    })
}

/// Text, image and mixed heads plus the temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignHeads {
    pub text: ProjectionHead,
    pub image: ProjectionHead,
    pub mixed: ProjectionHead,
    pub temperature: TemperatureParam,
}

impl_parameters!(AlignHeads { text, image, mixed, temperature });

pub struct AlignCache {
    point: (Tensor, Vec<f64>),
    text: HeadCache,
    image: HeadCache,
    mixed: HeadCache,
    batch: EmbeddingBatch,
}

impl AlignHeads {
    pub fn identity(d: usize) -> Self {
        AlignHeads {
            text: ProjectionHead::identity(HeadKind::Text, d),
            image: ProjectionHead::identity(HeadKind::Image, d),
            mixed: ProjectionHead::identity(HeadKind::Mixed, d),
            temperature: TemperatureParam::default(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.text.d_out()
    }

    /// Builds the normalized embedding batch from raw point embeddings and
    /// frozen image/text features (all `[B, D]`).
    pub fn embed(&self, z_p_raw: &Tensor, image: &Tensor, text: &Tensor) -> Result<(EmbeddingBatch, AlignCache)> {
        let (z_p, p_norms) = l2_normalize_rows(z_p_raw)?;
        let (z_t, text_c) = self.text.project_cached(text)?;
        let (z_i, image_c) = self.image.project_cached(image)?;
        if z_p.shape() != z_i.shape() || z_p.shape() != z_t.shape() {
            return Err(Error::shape(format!(
                "embedding shapes differ: point {:?}, image {:?}, text {:?}",
                z_p.shape(),
                z_i.shape(),
                z_t.shape()
            )));
        }
        let (b, d) = (z_p.rows(), z_p.cols());
        let mut cat = Tensor::zeros(&[b, 2 * d]);
        for r in 0..b {
            cat.row_mut(r)[..d].copy_from_slice(z_p.row(r));
            cat.row_mut(r)[d..].copy_from_slice(z_i.row(r));
        }
        let (z_m, mixed_c) = self.mixed.project_cached(&cat)?;
        let batch = EmbeddingBatch {
            z_t: Some(z_t),
            z_i: Some(z_i),
            z_p: Some(z_p.clone()),
            z_m: Some(z_m),
        };
        let cache = AlignCache {
            point: (z_p, p_norms),
            text: text_c,
            image: image_c,
            mixed: mixed_c,
            batch: batch.clone(),
        };
        Ok((batch, cache))
    }

    pub fn loss(&self, z_p_raw: &Tensor, image: &Tensor, text: &Tensor, reduction: Reduction) -> Result<LossBreakdown> {
        let (batch, _) = self.embed(z_p_raw, image, text)?;
        total_loss(&batch, self.temperature.tau(), reduction)
    }

    /// Loss, head gradients (accumulated into `grad`) and `dL/dz_p_raw`.
    pub fn loss_and_backward(
        &self,
        z_p_raw: &Tensor,
        image: &Tensor,
        text: &Tensor,
        reduction: Reduction,
        grad: &mut AlignHeads,
    ) -> Result<(LossBreakdown, Tensor)> {
        let (_, cache) = self.embed(z_p_raw, image, text)?;
        let tau = self.temperature.tau();
        let b = &cache.batch;
        let (t, i, p, m) = (
            require(&b.z_t, "text")?,
            require(&b.z_i, "image")?,
            require(&b.z_p, "point")?,
            require(&b.z_m, "mixed")?,
        );
        let pi = cross_modal_loss_grad(p, i, tau, reduction)?;
        let pt = cross_modal_loss_grad(p, t, tau, reduction)?;
        let it = cross_modal_loss_grad(i, t, tau, reduction)?;
        let mt = cross_modal_loss_grad(m, t, tau, reduction)?;
        let breakdown = LossBreakdown {
            point_image: pi.loss,
            point_text: pt.loss,
            image_text: it.loss,
            mixed_text: mt.loss,
            total: pi.loss + pt.loss + it.loss + mt.loss,
        };
        let mut dz_p = pi.d_a;
        dz_p.add_assign(&pt.d_a);
        let mut dz_i = pi.d_b;
        dz_i.add_assign(&it.d_a);
        let mut dz_t = pt.d_b;
        dz_t.add_assign(&it.d_b);
        dz_t.add_assign(&mt.d_b);
        let d_cat = self.mixed.backward(&cache.mixed, &mt.d_a, &mut grad.mixed);
        let d = p.cols();
        for r in 0..p.rows() {
            for (g, v) in dz_p.row_mut(r).iter_mut().zip(&d_cat.row(r)[..d]) {
                *g += v;
            }
            for (g, v) in dz_i.row_mut(r).iter_mut().zip(&d_cat.row(r)[d..]) {
                *g += v;
            }
        }
        self.image.backward(&cache.image, &dz_i, &mut grad.image);
        self.text.backward(&cache.text, &dz_t, &mut grad.text);
        let d_tau = pi.d_tau + pt.d_tau + it.d_tau + mt.d_tau;
        grad.temperature.log_tau.data_mut()[0] += d_tau * self.temperature.dtau_dlog();
        let d_raw = l2_normalize_rows_backward(&cache.point.0, &cache.point.1, &dz_p);
        Ok((breakdown, d_raw))
    }
}
