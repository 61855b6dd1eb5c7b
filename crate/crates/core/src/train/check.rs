//! Finite-difference checks of every parameterized operation on small random
//! instances.

use super::{batch_loss, batch_loss_and_grad, Model};
use crate::align::{total_loss, AlignHeads, EmbeddingBatch, HeadKind, ProjectionHead, Reduction, TemperatureParam};
use crate::curves::{sort_by_curve, CurveKind};
use crate::duomamba::{ConvMode, DuoMambaBlockParams, EncoderConfig};
use crate::error::Result;
use crate::gradcheck::{check_parameters, probe, GradCheckReport};
use crate::nn::{l2_normalize_rows, DepthwiseConv1d, LayerNorm, Linear};
use crate::ssm::{selective_scan, selective_scan_backward, selective_scan_cached, S6Params};
use crate::tensor::{Parameters, Tensor};
use crate::tokenizer::{build_patches, MiniPointNet, PatchSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckedOp {
    Affine,
    LayerNorm,
    Conv,
    SelectiveScan,
    MiniPointNet,
    Block,
    Heads,
    Temperature,
    /// Total loss of a full batch through tokenizer, encoder and heads.
    Pipeline,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 9] = [
        CheckedOp::Affine,
        CheckedOp::LayerNorm,
        CheckedOp::Conv,
        CheckedOp::SelectiveScan,
        CheckedOp::MiniPointNet,
        CheckedOp::Block,
        CheckedOp::Heads,
        CheckedOp::Temperature,
        CheckedOp::Pipeline,
    ];
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let pts = (0..n)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    let cols = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
    (pts, cols)
}

fn unit_rows(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Result<Tensor> {
    Ok(l2_normalize_rows(&Tensor::uniform(&[b, d], 1.0, rng))?.0)
}

/// Pipeline-sized encoder used by the end-to-end check.
pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        l_blocks: 2,
        c_dim: 8,
        s_tokens: 8,
        k_neighbors: 4,
        n_state: 3,
        embed_dim: 8,
        ..EncoderConfig::toy()
    }
}

/// Worst relative error of the named operation's parameter gradients on a
/// random instance drawn from `seed`. Per tensor for single operations; over
/// the full gradient vector for [`CheckedOp::Pipeline`].
pub fn grad_check(op: CheckedOp, seed: u64, h: f64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match op {
        CheckedOp::Affine => {
            let lin = Linear::new(5, 4, true, &mut rng);
            let x = Tensor::uniform(&[6, 5], 1.0, &mut rng);
            let w = Tensor::uniform(&[6, 4], 1.0, &mut rng);
            let mut g = lin.zeros_like();
            lin.backward(&x, &w, &mut g);
            check_parameters(&lin, &g, |p| Ok(probe(&p.forward(&x)?, &w)), h, None)
        }
        CheckedOp::LayerNorm => {
            let mut ln = LayerNorm::new(6);
            ln.gain = Tensor::uniform(&[6], 1.5, &mut rng);
            ln.bias = Tensor::uniform(&[6], 0.5, &mut rng);
            let x = Tensor::uniform(&[5, 6], 2.0, &mut rng);
            let w = Tensor::uniform(&[5, 6], 1.0, &mut rng);
            let (_, cache) = ln.forward(&x);
            let mut g = ln.zeros_like();
            ln.backward(&cache, &w, &mut g);
            check_parameters(&ln, &g, |p| Ok(probe(&p.forward(&x).0, &w)), h, None)
        }
        CheckedOp::Conv => {
            let conv = DepthwiseConv1d::new(4, 5, 2, &mut rng);
            let x = Tensor::uniform(&[9, 4], 1.0, &mut rng);
            let w = Tensor::uniform(&[9, 4], 1.0, &mut rng);
            let mut g = conv.zeros_like();
            conv.backward(&x, &w, &mut g);
            check_parameters(&conv, &g, |p| Ok(probe(&p.forward(&x), &w)), h, None)
        }
        CheckedOp::SelectiveScan => {
            let params = S6Params::new(4, 4, true, &mut rng);
            let x = Tensor::uniform(&[16, 4], 1.0, &mut rng);
            let w = Tensor::uniform(&[16, 4], 1.0, &mut rng);
            let (_, cache) = selective_scan_cached(&x, &params)?;
            let mut g = params.zeros_like();
            selective_scan_backward(&params, &cache, &w, &mut g);
            check_parameters(&params, &g, |p| Ok(probe(&selective_scan(&x, p)?, &w)), h, None)
        }
        CheckedOp::MiniPointNet => {
            let net = MiniPointNet::new(6, &mut rng);
            let (pts, cols) = random_cloud(&mut rng, 40);
            let patches = build_patches(&pts, Some(&cols), 5, 4)?;
            let w = Tensor::uniform(&[5, 6], 1.0, &mut rng);
            let (_, cache) = net.forward_cached(&patches)?;
            let mut g = net.zeros_like();
            net.backward(&cache, &w, &mut g);
            check_parameters(&net, &g, |p| Ok(probe(&p.forward(&patches)?.tokens, &w)), h, None)
        }
        CheckedOp::Block => {
            let block = DuoMambaBlockParams::new(4, 3, ConvMode::Standard, true, &mut rng);
            let (pts, _) = random_cloud(&mut rng, 10);
            let ph = sort_by_curve(&pts, CurveKind::Hilbert, 4)?;
            let pt = sort_by_curve(&pts, CurveKind::TransHilbert, 4)?;
            let z = Tensor::uniform(&[10, 4], 1.0, &mut rng);
            let w = Tensor::uniform(&[10, 4], 1.0, &mut rng);
            let (_, cache) = block.forward_cached(&z, &ph, &pt)?;
            let mut g = block.zeros_like();
            block.backward(&cache, &ph, &pt, &w, &mut g);
            check_parameters(&block, &g, |p| Ok(probe(&p.forward(&z, &ph, &pt)?, &w)), h, None)
        }
        CheckedOp::Heads => {
            let d = 4;
            let heads = AlignHeads {
                text: ProjectionHead {
                    kind: HeadKind::Text,
                    linear: Linear::new(d, d, true, &mut rng),
                },
                image: ProjectionHead {
                    kind: HeadKind::Image,
                    linear: Linear::new(d, d, true, &mut rng),
                },
                mixed: ProjectionHead {
                    kind: HeadKind::Mixed,
                    linear: Linear::new(2 * d, d, true, &mut rng),
                },
                temperature: TemperatureParam::new(0.2),
            };
            let zp = Tensor::uniform(&[5, d], 1.0, &mut rng);
            let img = Tensor::uniform(&[5, d], 1.0, &mut rng);
            let txt = Tensor::uniform(&[5, d], 1.0, &mut rng);
            let mut g = heads.zeros_like();
            heads.loss_and_backward(&zp, &img, &txt, Reduction::Mean, &mut g)?;
            check_parameters(&heads, &g, |p| Ok(p.loss(&zp, &img, &txt, Reduction::Mean)?.total), h, None)
        }
        CheckedOp::Temperature => {
            let temp = TemperatureParam::new(0.15);
            let batch = EmbeddingBatch {
                z_t: Some(unit_rows(&mut rng, 6, 5)?),
                z_i: Some(unit_rows(&mut rng, 6, 5)?),
                z_p: Some(unit_rows(&mut rng, 6, 5)?),
                z_m: Some(unit_rows(&mut rng, 6, 5)?),
            };
            let b = batch.clone();
            let modalities = [
                (b.z_p.unwrap(), b.z_i.clone().unwrap()),
                (batch.z_p.clone().unwrap(), b.z_t.clone().unwrap()),
                (b.z_i.unwrap(), b.z_t.clone().unwrap()),
                (b.z_m.unwrap(), b.z_t.unwrap()),
            ];
            let mut d_tau = 0.0;
            for (a, c) in &modalities {
                d_tau += crate::align::cross_modal_loss_grad(a, c, temp.tau(), Reduction::Sum)?.d_tau;
            }
            let mut g = temp.zeros_like();
            g.log_tau.data_mut()[0] = d_tau * temp.dtau_dlog();
            check_parameters(&temp, &g, |p| Ok(total_loss(&batch, p.tau(), Reduction::Sum)?.total), h, None)
        }
        CheckedOp::Pipeline => {
            let config = tiny_encoder_config();
            let model = Model::new(&config, seed)?;
            let mut model = model;
            // break the identity initialization so every head gradient is generic
            for head in [&mut model.heads.text, &mut model.heads.image, &mut model.heads.mixed] {
                let (i, o) = (head.linear.d_in(), head.linear.d_out());
                head.linear = Linear::new(i, o, true, &mut rng);
            }
            model.heads.temperature = TemperatureParam::new(0.3);
            let b = 3;
            let patches: Vec<PatchSet> = (0..b)
                .map(|_| {
                    let (pts, cols) = random_cloud(&mut rng, 30);
                    build_patches(&pts, Some(&cols), config.s_tokens, config.k_neighbors)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&PatchSet> = patches.iter().collect();
            let img = Tensor::uniform(&[b, config.embed_dim], 1.0, &mut rng);
            let txt = Tensor::uniform(&[b, config.embed_dim], 1.0, &mut rng);
            let (_, g) = batch_loss_and_grad(&model, &config, &refs, &img, &txt, Reduction::Mean)?;
            let mut report = check_parameters(
                &model,
                &g,
                |p| Ok(batch_loss(p, &config, &refs, &img, &txt, Reduction::Mean)?.total),
                h,
                Some(8),
            )?;
            // S6 gradients sit five orders of magnitude below the head
            // gradients here, under the difference quotient's roundoff, so the
            // end-to-end figure is taken over the whole gradient vector.
            report.worst = report.vector_relative();
            Ok(report)
        }
    }
}
