//! Crop-batch training loop and whole-image prediction.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cspn::PropagationConfig;
use crate::data::{HsiCube, LabelMap, SplitCell, SplitMask};
use crate::error::{precondition, Error, Result};
use crate::model::{Ctx, Fcspn, ModelParams};
use crate::ops::BnMode;
use crate::optim::{sgd_step, OptimizerState, SgdConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// ChaCha stream used for crop sampling, distinct from the default stream 0.
pub const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    pub focal_gamma: f64,
    /// Crop extent `(rows, cols)`.
    pub crop: [usize; 2],
    pub seed: u64,
    /// Train through the propagation refinement (jointly with the network).
    pub refine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 20,
            weight_decay: 1e-5,
            epochs: 60,
            momentum: 0.9,
            learning_rate: 0.01,
            focal_gamma: crate::loss::DEFAULT_GAMMA,
            crop: [64, 64],
            seed: 0,
            refine: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("epochs", self.epochs as f64),
            ("crop rows", self.crop[0] as f64),
            ("crop cols", self.crop[1] as f64),
        ];
        for (name, v) in positive {
            if !(v >= 1.0) {
                return Err(precondition(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("momentum", self.momentum),
            ("learning_rate", self.learning_rate),
            ("focal_gamma", self.focal_gamma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(precondition(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    /// Steps in one epoch: every training pixel anchors one crop, in batches
    /// of `batch_size` (the last batch topped up with extra anchors).
    pub fn steps_per_epoch(&self, train_pixels: usize) -> usize {
        train_pixels.div_ceil(self.batch_size).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub focal: f64,
    pub l2: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub trace: Vec<LossRecord>,
    pub warnings: Vec<String>,
}

/// Places crops so that each contains its anchor pixel at a random offset.
struct CropSampler<'a> {
    train: &'a [u16],
    rows: usize,
    cols: usize,
    h: usize,
    w: usize,
}

impl CropSampler<'_> {
    fn around(&self, p: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
        let (i, j) = (p / self.cols, p % self.cols);
        let top = rng.random_range(i.saturating_sub(self.h - 1)..=i.min(self.rows - self.h));
        let left = rng.random_range(j.saturating_sub(self.w - 1)..=j.min(self.cols - self.w));
        (top, left)
    }

    fn labels(&self, origins: &[(usize, usize)]) -> Vec<u16> {
        let mut out = Vec::with_capacity(origins.len() * self.h * self.w);
        for &(top, left) in origins {
            for i in top..top + self.h {
                out.extend_from_slice(&self.train[i * self.cols + left..i * self.cols + left + self.w]);
            }
        }
        out
    }
}

/// Trains `params` in place of a fresh copy and returns the result with the loss trace.
///
/// `observer` sees every loss record as it is produced.
pub fn train<F>(
    net: &Fcspn,
    params: ModelParams,
    cube: &HsiCube,
    labels: &LabelMap,
    split: &SplitMask,
    config: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&LossRecord),
{
    config.validate()?;
    params.validate(net.layout())?;
    split.check_against(labels)?;
    if cube.bands() != net.config().in_bands {
        return Err(precondition(format!(
            "cube has {} bands, model expects {}",
            cube.bands(),
            net.config().in_bands
        )));
    }
    if (cube.rows(), cube.cols()) != (labels.rows(), labels.cols()) {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: alloc::vec![cube.rows(), cube.cols()],
            right: alloc::vec![labels.rows(), labels.cols()],
        });
    }
    if labels.num_classes() != net.config().num_classes {
        return Err(precondition(format!(
            "labels declare {} classes, model has {}",
            labels.num_classes(),
            net.config().num_classes
        )));
    }
    let train_labels = split.mask_labels(labels, SplitCell::Train);
    if train_labels.iter().all(|&l| l == 0) {
        return Err(Error::NoLabeledPixels);
    }

    let mut warnings = Vec::new();
    let (rows, cols) = (cube.rows(), cube.cols());
    let [ch, cw] = config.crop;
    if ch > rows || cw > cols {
        warnings.push(format!(
            "crop {ch}x{cw} exceeds image {rows}x{cols}; clamped to {}x{}",
            ch.min(rows),
            cw.min(cols)
        ));
    }
    let (h, w) = (ch.min(rows), cw.min(cols));
    let sampler = CropSampler {
        train: &train_labels,
        rows,
        cols,
        h,
        w,
    };
    let mut anchors: Vec<usize> = (0..train_labels.len()).filter(|&p| train_labels[p] != 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Stream 0 of the same seed is left for parameter initialization.
    rng.set_stream(TRAIN_STREAM);
    let sgd = SgdConfig {
        learning_rate: config.learning_rate,
        momentum: config.momentum,
    };
    let refine = config.refine.then(|| net.config().propagation());
    let penalized = net.conv_weight_indices();
    let mut params = params;
    let mut state = OptimizerState::new(&params);
    let mut trace = Vec::new();
    let steps = config.steps_per_epoch(anchors.len());

    for epoch in 0..config.epochs {
        anchors.shuffle(&mut rng);
        for step in 0..steps {
            // A crop covering the whole image has one position, so every crop of
            // the batch is the same; one copy gives the same statistics and gradient.
            let batch = if (h, w) == (rows, cols) { 1 } else { config.batch_size };
            let origins: Vec<(usize, usize)> = (0..batch)
                .map(|k| {
                    let idx = step * config.batch_size + k;
                    let p = match anchors.get(idx) {
                        Some(&p) => p,
                        None => anchors[rng.random_range(0..anchors.len())],
                    };
                    sampler.around(p, &mut rng)
                })
                .collect();
            let x = cube.crops(&origins, h, w)?;
            let y = sampler.labels(&origins);

            let mut tape = Tape::new();
            let (grads, updates, record) = {
                let mut ctx = Ctx::bind(&mut tape, &params, BnMode::Train, true);
                let xv = ctx.tape.constant(x);
                let out = net.forward(&mut ctx, xv, refine)?;
                let focal = ctx.tape.focal_loss(out.scores, &y, config.focal_gamma)?;
                let weights: Vec<_> = penalized.iter().map(|&i| ctx.var(i)).collect();
                let l2 = ctx.tape.l2_penalty(&weights, config.weight_decay)?;
                let total = ctx.tape.add(focal, l2)?;
                let record = LossRecord {
                    epoch,
                    step,
                    focal: ctx.tape.value(focal).item(),
                    l2: ctx.tape.value(l2).item(),
                    total: ctx.tape.value(total).item(),
                };
                ctx.tape.backward(total)?;
                let vars = ctx.vars().to_vec();
                let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| ctx.tape.take_grad(v)).collect();
                (grads, ctx.into_stat_updates(), record)
            };
            warnings.extend(tape.warnings().iter().cloned());
            sgd_step(&mut params, &grads, &mut state, &sgd)?;
            for u in updates {
                params.tensor_mut(u.mean_index).data_mut().copy_from_slice(&u.mean);
                params.tensor_mut(u.var_index).data_mut().copy_from_slice(&u.var);
            }
            observer(&record);
            trace.push(record);
        }
    }
    warnings.sort();
    warnings.dedup();
    Ok(TrainOutcome {
        params,
        trace,
        warnings,
    })
}

/// Eval-mode scores for a whole cube.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `[c, H, W]` scores (refined when requested).
    pub scores: Tensor,
    /// Per-pixel argmax class ids `1..=c`.
    pub labels: Vec<u16>,
}

pub fn predict(
    net: &Fcspn,
    params: &ModelParams,
    cube: &HsiCube,
    refine: Option<PropagationConfig>,
) -> Result<Prediction> {
    params.validate(net.layout())?;
    let mut tape = Tape::new();
    let mut ctx = Ctx::bind(&mut tape, params, BnMode::Eval, false);
    let x = ctx.tape.constant(cube.as_input());
    let out = net.forward(&mut ctx, x, refine)?;
    let scores = ctx.tape.value(out.scores).clone();
    let s = scores.shape().to_vec();
    let (c, plane) = (s[1], s[2] * s[3]);
    let labels = (0..plane)
        .map(|p| {
            let mut best = (f64::NEG_INFINITY, 0);
            for k in 0..c {
                let v = scores.data()[k * plane + p];
                if v > best.0 {
                    best = (v, k);
                }
            }
            best.1 as u16 + 1
        })
        .collect();
    Ok(Prediction {
        scores: scores.reshaped(&[c, s[2], s[3]])?,
        labels,
    })
}
