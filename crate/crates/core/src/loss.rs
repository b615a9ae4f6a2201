//! Masked focal loss and the L2 weight penalty.

use alloc::vec;

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 2.0;

/// Log-probability of class `t` at pixel `p`, and the log-partition.
fn log_softmax_at(z: &[f64], c: usize, inner: usize, n: usize, p: usize, t: usize) -> (f64, f64) {
    let idx = |k: usize| (n * c + k) * inner + p;
    let max = (0..c).map(|k| z[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = (0..c).map(|k| libm::exp(z[idx(k)] - max)).sum();
    let log_z = max + libm::log(sum);
    (z[idx(t)] - log_z, log_z)
}

fn check(logits: &Tensor, labels: &[u16]) -> Result<(usize, usize, usize)> {
    let s = logits.shape();
    if s.len() < 2 {
        return Err(Error::InvalidAxis {
            op: "focal_loss",
            axis: 1,
            rank: s.len(),
        });
    }
    let (n, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    if labels.len() != n * inner {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            left: s.to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize > c) {
        return Err(Error::LabelOutOfRange {
            label: bad as u32,
            classes: c,
        });
    }
    Ok((n, c, inner))
}

/// `-(1 - p_t)^γ · log p_t` and `d/dz_t` coefficient for one pixel.
fn pixel_terms(log_pt: f64, gamma: f64) -> (f64, f64) {
    let pt = libm::exp(log_pt);
    let u = -libm::expm1(log_pt);
    let loss = -libm::pow(u, gamma) * log_pt;
    let factor = if u == 0.0 {
        if gamma == 0.0 {
            -1.0
        } else {
            0.0
        }
    } else {
        gamma * libm::pow(u, gamma - 1.0) * pt * log_pt - libm::pow(u, gamma)
    };
    (loss, factor)
}

pub(crate) fn focal_backward(logits: &Tensor, labels: &[u16], gamma: f64, count: usize, g: f64) -> Tensor {
    let s = logits.shape();
    let (n_b, c) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let z = logits.data();
    let mut dz = vec![0.0; logits.len()];
    let scale = g / count as f64;
    for n in 0..n_b {
        for p in 0..inner {
            let label = labels[n * inner + p];
            if label == 0 {
                continue;
            }
            let t = label as usize - 1;
            let (log_pt, log_z) = log_softmax_at(z, c, inner, n, p, t);
            let (_, factor) = pixel_terms(log_pt, gamma);
            for k in 0..c {
                let idx = (n * c + k) * inner + p;
                let pk = libm::exp(z[idx] - log_z);
                let delta = if k == t { 1.0 } else { 0.0 };
                dz[idx] = scale * factor * (delta - pk);
            }
        }
    }
    Tensor::from_vec(s, dz).expect("logit shape")
}

/// Focal loss value without recording a graph.
pub fn focal_loss_value(logits: &Tensor, labels: &[u16], gamma: f64) -> Result<f64> {
    let (n_b, c, inner) = check(logits, labels)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..n_b {
        for p in 0..inner {
            let label = labels[n * inner + p];
            if label == 0 {
                continue;
            }
            let (log_pt, _) = log_softmax_at(logits.data(), c, inner, n, p, label as usize - 1);
            total += pixel_terms(log_pt, gamma).0;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::NoLabeledPixels);
    }
    Ok(total / count as f64)
}

impl Tape {
    /// Mean focal loss over pixels with a nonzero label. `labels` holds one id
    /// per pixel of `logits: [N, C, H, W]`, with `1..=C` naming the true class.
    pub fn focal_loss(&mut self, logits: Var, labels: &[u16], gamma: f64) -> Result<Var> {
        if !(gamma >= 0.0) {
            return Err(crate::error::precondition("focal gamma must be >= 0"));
        }
        let value = focal_loss_value(self.value(logits), labels, gamma)?;
        let count = labels.iter().filter(|&&l| l != 0).count();
        self.push(
            Tensor::scalar(value),
            Op::FocalLoss {
                logits,
                labels: labels.to_vec(),
                gamma,
                count,
            },
        )
    }

    /// `(λ / 2) · Σ ‖w‖²` over `weights`.
    pub fn l2_penalty(&mut self, weights: &[Var], weight_decay: f64) -> Result<Var> {
        let total: f64 = weights.iter().map(|&w| self.value(w).sum_of_squares()).sum();
        let scale = weight_decay / 2.0;
        self.push(Tensor::scalar(scale * total), Op::SumSquares(weights.to_vec(), scale))
    }
}

/// `(λ / 2) · Σ ‖w‖²` over plain tensors.
pub fn l2_penalty_value<'a>(weights: impl IntoIterator<Item = &'a Tensor>, weight_decay: f64) -> f64 {
    let total: f64 = weights.into_iter().map(Tensor::sum_of_squares).sum();
    weight_decay / 2.0 * total
}
