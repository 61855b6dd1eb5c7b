//! Zero-shot classification against class text features and the few-shot
//! linear probe.

use super::{prepare_patches, Model, TripletDataset};
use crate::align::AlignHeads;
use crate::duomamba::{embed_patches, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::l2_normalize_rows;
use crate::tensor::{matmul, Tensor};
use crate::tokenizer::PatchSet;
use serde::{Deserialize, Serialize};

/// Raw point embeddings `[R, D]` of each patch set.
pub fn embed_clouds(model: &Model, config: &EncoderConfig, patches: &[PatchSet]) -> Result<Tensor> {
    let mut out = Tensor::zeros(&[patches.len(), config.embed_dim]);
    for (r, p) in patches.iter().enumerate() {
        out.row_mut(r).copy_from_slice(&embed_patches(p, config, &model.encoder)?);
    }
    Ok(out)
}

/// Classes ordered by cosine similarity between the point embedding and the
/// projected class text features, most similar first (ties by index).
pub fn zero_shot_classify(z_p: &[f64], class_text: &Tensor, heads: &AlignHeads) -> Result<Vec<usize>> {
    if class_text.rows() == 0 {
        return Err(Error::invalid("zero-shot classification needs at least one class"));
    }
    let classes = heads.text.project(class_text)?;
    let (z, _) = l2_normalize_rows(&Tensor::from_vec(&[1, z_p.len()], z_p.to_vec())?)?;
    if z.cols() != classes.cols() {
        return Err(Error::Config(format!(
            "point embedding width {} differs from class feature width {}",
            z.cols(),
            classes.cols()
        )));
    }
    let sims: Vec<f64> = (0..classes.rows())
        .map(|k| classes.row(k).iter().zip(z.row(0)).map(|(a, b)| a * b).sum())
        .collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

fn check_width(config: &EncoderConfig, dataset: &TripletDataset) -> Result<()> {
    if dataset.embed_dim() != config.embed_dim {
        return Err(Error::Config(format!(
            "checkpoint embeds into {} dimensions, dataset features have {}",
            config.embed_dim,
            dataset.embed_dim()
        )));
    }
    Ok(())
}

/// Zero-shot top-1/3/5 of `model` on the given records.
pub fn zero_shot_eval(model: &Model, config: &EncoderConfig, dataset: &TripletDataset, indices: &[usize]) -> Result<TopK> {
    check_width(config, dataset)?;
    let patches = prepare_patches(dataset, indices, config)?;
    let z = embed_clouds(model, config, &patches)?;
    let rankings = (0..z.rows())
        .map(|r| zero_shot_classify(z.row(r), &dataset.class_text, &model.heads))
        .collect::<Result<Vec<_>>>()?;
    Ok(TopK::from_rankings(&rankings, &dataset.labels(indices)))
}

/// Probe accuracy for each entry of `shots`, on frozen point embeddings.
pub fn probe_eval(
    model: &Model,
    config: &EncoderConfig,
    dataset: &TripletDataset,
    train: &[usize],
    test: &[usize],
    shots: &[usize],
) -> Result<Vec<(usize, f64)>> {
    check_width(config, dataset)?;
    let train_x = embed_clouds(model, config, &prepare_patches(dataset, train, config)?)?;
    let test_x = embed_clouds(model, config, &prepare_patches(dataset, test, config)?)?;
    let (train_y, test_y) = (dataset.labels(train), dataset.labels(test));
    shots
        .iter()
        .map(|&n| Ok((n, linear_probe(&train_x, &train_y, &test_x, &test_y, n)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
}

/// Fraction of rankings whose first `k` entries contain the label.
pub fn top_k_accuracy(rankings: &[Vec<usize>], labels: &[usize], k: usize) -> f64 {
    if rankings.is_empty() {
        return 0.0;
    }
    let hits = rankings
        .iter()
        .zip(labels)
        .filter(|(r, l)| r.iter().take(k).any(|c| c == *l))
        .count();
    hits as f64 / rankings.len() as f64
}

impl TopK {
    pub fn from_rankings(rankings: &[Vec<usize>], labels: &[usize]) -> Self {
        TopK {
            top1: top_k_accuracy(rankings, labels, 1),
            top3: top_k_accuracy(rankings, labels, 3),
            top5: top_k_accuracy(rankings, labels, 5),
        }
    }
}

pub const PROBE_ITERATIONS: usize = 1000;
pub const PROBE_LR: f64 = 0.1;
pub const PROBE_L2: f64 = 1e-4;

/// Multinomial logistic regression on the first `n_shot` training rows of
/// each class (full-batch gradient descent from zero), scored on the test
/// rows. Classes are `0..=max label`.
pub fn linear_probe(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    n_shot: usize,
) -> Result<f64> {
    if train_x.rows() != train_y.len() || test_x.rows() != test_y.len() || train_x.cols() != test_x.cols() {
        return Err(Error::shape("probe features and labels disagree"));
    }
    if n_shot == 0 {
        return Err(Error::invalid("n_shot must be at least 1"));
    }
    let k = train_y.iter().chain(test_y).copied().max().map_or(0, |m| m + 1);
    let mut chosen = Vec::new();
    let mut counts = vec![0usize; k];
    for (i, &y) in train_y.iter().enumerate() {
        if counts[y] < n_shot {
            counts[y] += 1;
            chosen.push(i);
        }
    }
    if let Some(c) = counts.iter().position(|&c| c < n_shot) {
        return Err(Error::invalid(format!(
            "class {c} has {} training instances, {n_shot} required",
            counts[c]
        )));
    }
    let x = train_x.gather_rows(&chosen);
    let (m, d) = (x.rows(), x.cols());
    let mut w = Tensor::zeros(&[d, k]);
    let mut b = vec![0.0; k];
    for _ in 0..PROBE_ITERATIONS {
        let mut g = logits(&x, &w, &b);
        for (r, &i) in chosen.iter().enumerate() {
            let row = g.row_mut(r);
            softmax_in_place(row);
            row[train_y[i]] -= 1.0;
            row.iter_mut().for_each(|v| *v /= m as f64);
        }
        let mut dw = Tensor::zeros(&[d, k]);
        crate::tensor::matmul_at_acc(&x, &g, &mut dw);
        for (wv, gv) in w.data_mut().iter_mut().zip(dw.data()) {
            *wv -= PROBE_LR * (gv + PROBE_L2 * *wv);
        }
        for c in 0..k {
            let gb: f64 = (0..m).map(|r| g.at(r, c)).sum();
            b[c] -= PROBE_LR * gb;
        }
    }
    let scores = logits(test_x, &w, &b);
    let correct = (0..test_x.rows())
        .filter(|&r| {
            let row = scores.row(r);
            let best = (0..k).max_by(|&a, &c| row[a].total_cmp(&row[c]).then(c.cmp(&a))).unwrap_or(0);
            best == test_y[r]
        })
        .count();
    Ok(if test_y.is_empty() {
        0.0
    } else {
        correct as f64 / test_y.len() as f64
    })
}

fn logits(x: &Tensor, w: &Tensor, b: &[f64]) -> Tensor {
    let mut out = matmul(x, w);
    for r in 0..out.rows() {
        out.row_mut(r).iter_mut().zip(b).for_each(|(o, bb)| *o += bb);
    }
    out
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    v.iter_mut().for_each(|x| *x /= s);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_ranks_first() {
        let heads = AlignHeads::identity(3);
        let classes = Tensor::from_vec(&[1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(zero_shot_classify(&[1.0, 0.0, 0.0], &classes, &heads).unwrap(), vec![0]);
        let none = Tensor::zeros(&[0, 3]);
        assert!(matches!(zero_shot_classify(&[1.0, 0.0, 0.0], &none, &heads), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn top_k_counts_hits() {
        let r = vec![vec![2, 0, 1], vec![0, 1, 2]];
        assert_eq!(top_k_accuracy(&r, &[0, 0], 1), 0.5);
        assert_eq!(top_k_accuracy(&r, &[0, 0], 3), 1.0);
    }
}
