//! Trilinear resizing and global average pooling of `[N, C, D, H, W]` volumes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Align-corners interpolation taps: output `j` reads `(1 - t) * x[i0] + t * x[i1]`.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|j| {
            if output == 1 || input == 1 {
                return (0, 0, 0.0);
            }
            let pos = j as f64 * (input - 1) as f64 / (output - 1) as f64;
            let i0 = (libm::floor(pos) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Interpolates along `axis` of a 5D shape, returning the new data and shape.
fn resize_axis(data: &[f64], shape: [usize; 5], axis: usize, target: usize) -> (Vec<f64>, [usize; 5]) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let tp = taps(len, target);
    let mut out = vec![0.0; outer * target * inner];
    for o in 0..outer {
        let src = &data[o * len * inner..(o + 1) * len * inner];
        let dst = &mut out[o * target * inner..(o + 1) * target * inner];
        for (j, &(i0, i1, t)) in tp.iter().enumerate() {
            let a = &src[i0 * inner..(i0 + 1) * inner];
            let b = &src[i1 * inner..(i1 + 1) * inner];
            for ((d, &va), &vb) in dst[j * inner..(j + 1) * inner].iter_mut().zip(a).zip(b) {
                *d = (1.0 - t) * va + t * vb;
            }
        }
    }
    let mut s = shape;
    s[axis] = target;
    (out, s)
}

/// Transpose of [`resize_axis`]: scatters `g` (with `shape[axis] == target`) back to `len`.
fn resize_axis_transpose(g: &[f64], shape: [usize; 5], axis: usize, len: usize) -> (Vec<f64>, [usize; 5]) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let target = shape[axis];
    let tp = taps(len, target);
    let mut out = vec![0.0; outer * len * inner];
    for o in 0..outer {
        let src = &g[o * target * inner..(o + 1) * target * inner];
        let dst = &mut out[o * len * inner..(o + 1) * len * inner];
        for (j, &(i0, i1, t)) in tp.iter().enumerate() {
            let gs = &src[j * inner..(j + 1) * inner];
            for (k, &gv) in gs.iter().enumerate() {
                dst[i0 * inner + k] += (1.0 - t) * gv;
                dst[i1 * inner + k] += t * gv;
            }
        }
    }
    let mut s = shape;
    s[axis] = len;
    (out, s)
}

fn shape5(shape: &[usize]) -> Option<[usize; 5]> {
    shape.try_into().ok()
}

pub(crate) fn trilinear_backward(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let ins = shape5(in_shape).expect("5D input");
    let mut data = g.data().to_vec();
    let mut shape = shape5(g.shape()).expect("5D output");
    for axis in 2..5 {
        let (d, s) = resize_axis_transpose(&data, shape, axis, ins[axis]);
        data = d;
        shape = s;
    }
    Tensor::from_vec(in_shape, data).expect("input shape")
}

pub(crate) fn avg_pool_backward(g: &Tensor, in_shape: &[usize]) -> Tensor {
    let inner: usize = in_shape[2..].iter().product();
    let mut data = Vec::with_capacity(inner * g.len());
    for &gv in g.data() {
        data.extend(core::iter::repeat_n(gv / inner as f64, inner));
    }
    Tensor::from_vec(in_shape, data).expect("input shape")
}

impl Tape {
    /// Align-corners trilinear resize of `x: [N, C, D, H, W]` to `target = (D', H', W')`.
    pub fn trilinear_upsample(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let Some(mut shape) = shape5(self.shape(x)) else {
            return Err(Error::ShapeMismatch {
                op: "trilinear_upsample",
                left: self.shape(x).to_vec(),
                right: target.to_vec(),
            });
        };
        crate::tensor::check_extents(&target)?;
        let mut data = self.value(x).data().to_vec();
        for axis in (2..5).rev() {
            let (d, s) = resize_axis(&data, shape, axis, target[axis - 2]);
            data = d;
            shape = s;
        }
        let t = Tensor::from_vec(&shape, data)?;
        self.push(t, Op::Trilinear(x))
    }

    /// Per-channel global mean: `[N, C, D, H, W] -> [N, C, 1, 1, 1]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 5 {
            return Err(Error::ShapeMismatch {
                op: "adaptive_avg_pool",
                left: shape,
                right: vec![1, 1, 1],
            });
        }
        let inner: usize = shape[2..].iter().product();
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().sum::<f64>() / inner as f64)
            .collect();
        let t = Tensor::from_vec(&[shape[0], shape[1], 1, 1, 1], data)?;
        self.push(t, Op::AvgPool(x))
    }
}
