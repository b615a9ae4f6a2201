//! Channel-axis (axis 1) concatenation and softmax.

use alloc::vec;

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

fn split(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

pub(crate) fn concat_backward(g: &Tensor, a: &[usize], b: &[usize]) -> (Tensor, Tensor) {
    let (outer, ca, inner) = split(a);
    let cb = b[1];
    let mut ga = vec![0.0; outer * ca * inner];
    let mut gb = vec![0.0; outer * cb * inner];
    for n in 0..outer {
        let src = &g.data()[n * (ca + cb) * inner..(n + 1) * (ca + cb) * inner];
        ga[n * ca * inner..(n + 1) * ca * inner].copy_from_slice(&src[..ca * inner]);
        gb[n * cb * inner..(n + 1) * cb * inner].copy_from_slice(&src[ca * inner..]);
    }
    (
        Tensor::from_vec(a, ga).expect("shape a"),
        Tensor::from_vec(b, gb).expect("shape b"),
    )
}

pub(crate) fn softmax_backward(g: &Tensor, y: &Tensor) -> Tensor {
    let (outer, c, inner) = split(y.shape());
    let (gd, yd) = (g.data(), y.data());
    let mut dx = vec![0.0; y.len()];
    for n in 0..outer {
        for p in 0..inner {
            let idx = |k: usize| (n * c + k) * inner + p;
            let dot: f64 = (0..c).map(|k| gd[idx(k)] * yd[idx(k)]).sum();
            for k in 0..c {
                dx[idx(k)] = yd[idx(k)] * (gd[idx(k)] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape(), dx).expect("same shape")
}

/// Softmax over axis 1 of a `[N, C, ...]` array, with max subtraction.
pub fn softmax_values(x: &Tensor) -> Tensor {
    let (outer, c, inner) = split(x.shape());
    let xd = x.data();
    let mut y = vec![0.0; x.len()];
    for n in 0..outer {
        for p in 0..inner {
            let idx = |k: usize| (n * c + k) * inner + p;
            let max = (0..c).map(|k| xd[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = libm::exp(xd[idx(k)] - max);
                y[idx(k)] = e;
                z += e;
            }
            for k in 0..c {
                y[idx(k)] /= z;
            }
        }
    }
    Tensor::from_vec(x.shape(), y).expect("same shape")
}

impl Tape {
    /// Concatenates `a: [N, Ca, ...]` and `b: [N, Cb, ...]` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                left: sa,
                right: sb,
            });
        }
        let (outer, ca, inner) = split(&sa);
        let cb = sb[1];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; outer * (ca + cb) * inner];
        for n in 0..outer {
            let dst = &mut data[n * (ca + cb) * inner..(n + 1) * (ca + cb) * inner];
            dst[..ca * inner].copy_from_slice(&da[n * ca * inner..(n + 1) * ca * inner]);
            dst[ca * inner..].copy_from_slice(&db[n * cb * inner..(n + 1) * cb * inner]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        let t = Tensor::from_vec(&shape, data)?;
        self.push(t, Op::Concat(a, b))
    }

    /// Per-pixel softmax over the channel axis of `x: [N, C, ...]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() < 2 {
            return Err(Error::InvalidAxis {
                op: "softmax_channels",
                axis: 1,
                rank: self.shape(x).len(),
            });
        }
        let y = softmax_values(self.value(x));
        self.push(y, Op::Softmax(x))
    }
}
