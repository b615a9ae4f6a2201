//! Batch normalization over every axis except the channel axis (axis 1).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
///
/// `momentum` is the retention factor: `running = momentum * running + (1 - momentum) * batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// (outer, channels, inner) split of a `[N, C, ...]` shape.
fn layout(shape: &[usize]) -> (usize, usize, usize) {
    let outer = shape[0];
    let c = shape[1];
    let inner = shape[2..].iter().product();
    (outer, c, inner)
}

fn for_channel(shape: &[usize], data: &[f64], c: usize, mut f: impl FnMut(usize, f64)) {
    let (outer, channels, inner) = layout(shape);
    for n in 0..outer {
        let base = (n * channels + c) * inner;
        for (i, &v) in data[base..base + inner].iter().enumerate() {
            f(base + i, v);
        }
    }
}

pub(crate) fn backward(
    g: &Tensor,
    gamma: &Tensor,
    xhat: &Tensor,
    inv_std: &[f64],
    train: bool,
    (x, gv, bv): (Var, Var, Var),
    out: &mut Vec<(Var, Tensor)>,
) {
    let shape = g.shape();
    let (outer, channels, inner) = layout(shape);
    let m = (outer * inner) as f64;
    let gd = g.data();
    let xh = xhat.data();
    let mut dgamma = vec![0.0; channels];
    let mut dbeta = vec![0.0; channels];
    let mut dx = vec![0.0; g.len()];
    for c in 0..channels {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for_channel(shape, gd, c, |i, gi| {
            sg += gi;
            sgx += gi * xh[i];
        });
        dgamma[c] = sgx;
        dbeta[c] = sg;
        let k = gamma.data()[c] * inv_std[c];
        if train {
            for_channel(shape, gd, c, |i, gi| {
                dx[i] = k * (gi - sg / m - xh[i] * sgx / m);
            });
        } else {
            for_channel(shape, gd, c, |i, gi| dx[i] = k * gi);
        }
    }
    out.push((x, Tensor::from_vec(shape, dx).expect("input shape")));
    out.push((gv, Tensor::from_vec(&[channels], dgamma).expect("channels")));
    out.push((bv, Tensor::from_vec(&[channels], dbeta).expect("channels")));
}

impl Tape {
    /// Normalizes `x: [N, C, ...]` per channel. Train mode uses batch statistics
    /// and folds them into `state`; eval mode uses the running statistics.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2
            || shape[1] != state.channels()
            || self.shape(gamma) != [shape[1]]
            || self.shape(beta) != [shape[1]]
        {
            return Err(Error::ShapeMismatch {
                op: "batchnorm",
                left: shape,
                right: vec![state.channels()],
            });
        }
        if !(state.epsilon > 0.0) {
            return Err(crate::error::precondition("batchnorm epsilon must be > 0"));
        }
        let (outer, channels, inner) = layout(&shape);
        let count = outer * inner;
        let xd = self.value(x).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; channels];
        let mut single = false;
        for c in 0..channels {
            let (mean, var) = match mode {
                BnMode::Train => {
                    let mut sum = 0.0;
                    for_channel(&shape, xd, c, |_, v| sum += v);
                    let mean = sum / count as f64;
                    let mut ss = 0.0;
                    for_channel(&shape, xd, c, |_, v| ss += (v - mean) * (v - mean));
                    let var = ss / count as f64;
                    let unbiased = if count > 1 {
                        ss / (count - 1) as f64
                    } else {
                        single = true;
                        state.running_var[c]
                    };
                    let mom = state.momentum;
                    state.running_mean[c] = mom * state.running_mean[c] + (1.0 - mom) * mean;
                    state.running_var[c] = mom * state.running_var[c] + (1.0 - mom) * unbiased;
                    (mean, var)
                }
                BnMode::Eval => (state.running_mean[c], state.running_var[c].max(0.0)),
            };
            let is = 1.0 / libm::sqrt(var + state.epsilon);
            inv_std[c] = is;
            for_channel(&shape, xd, c, |i, v| xhat[i] = (v - mean) * is);
        }
        if single {
            self.warn(format!(
                "batchnorm: one value per channel in train mode (shape {shape:?}); variance floored at epsilon"
            ));
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut y = vec![0.0; xhat.len()];
        for c in 0..channels {
            for_channel(&shape, &xhat, c, |i, v| y[i] = gd[c] * v + bd[c]);
        }
        let xhat = Tensor::from_vec(&shape, xhat)?;
        let y = Tensor::from_vec(&shape, y)?;
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
        )
    }
}
