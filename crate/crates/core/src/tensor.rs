//! Dense row-major tensors.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// Fill rule for [`Tensor::new`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill {
    Zeros,
    Constant(f64),
    /// Uniform on `(-bound, bound)`.
    Uniform(f64),
    /// Normal with std `sqrt(2 / fan_in)`.
    Kaiming {
        fan_in: usize,
    },
}

/// Dense multi-dimensional array of `f64`, contiguous in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new<R: Rng + ?Sized>(shape: &[usize], fill: Fill, rng: &mut R) -> Result<Self> {
        check_extents(shape)?;
        let n = numel(shape);
        let data = match fill {
            Fill::Zeros => vec![0.0; n],
            Fill::Constant(c) => vec![c; n],
            Fill::Uniform(b) => {
                if !(b > 0.0) || !b.is_finite() {
                    return Err(crate::error::precondition("uniform bound must be positive"));
                }
                let dist = Uniform::new(-b, b).map_err(|_| crate::error::precondition("invalid uniform bound"))?;
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Fill::Kaiming { fan_in } => {
                if fan_in == 0 {
                    return Err(crate::error::precondition("fan_in must be >= 1"));
                }
                let std = libm::sqrt(2.0 / fan_in as f64);
                let dist = Normal::new(0.0, std).expect("finite positive std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_extents(shape)?;
        if numel(shape) != data.len() {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.shape)
    }

    /// Value of a rank-0 (or single element) tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_of_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::ZeroExtent(shape.to_vec()));
    }
    Ok(())
}

/// Output shape of a same-rank broadcast: each axis equal, or 1 on one side.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// Strides of `shape` read as a broadcast operand of `out`: 0 on stretched axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    shape
        .iter()
        .zip(out)
        .zip(s)
        .map(|((&e, &o), st)| if e == o { st } else { 0 })
        .collect()
}

/// Calls `f(out_index, offset)` for every element of `out`, where `offset` is the
/// flat offset under `strides` (one per axis, 0 for broadcast axes).
pub(crate) fn for_each_offset(out: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out.len();
    let total = numel(out);
    if rank == 0 {
        f(0, 0);
        return;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..total {
        f(flat, off);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
