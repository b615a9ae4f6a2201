//! Convolutional spatial propagation.
//!
//! Each pixel owns a 3x3 kernel `κ` built from eight raw affinities `κ̂`:
//!
//! ```text
//! κ(a,b)   = κ̂(a,b) / Σ_{(a,b)≠0} |κ̂(a,b)|
//! κ(0,0)   = 1 - Σ_{(a,b)≠0} κ(a,b)
//! h'(i,j)  = Σ_{a,b} κ_{i,j}(a,b) · h(i-a, j-b)
//! ```
//!
//! Every class map is updated with the same per-pixel kernel. Neighbors outside
//! the image read as zero. A pixel whose eight raw values are all zero gets the
//! identity kernel.
//!
//! Normalized kernels are stored as `[N, 9, H, W]` with kernel index
//! `(a + 1) * 3 + (b + 1)`, so index 4 is the center weight. Raw affinities are
//! `[N, 8, H, W]` in the same order with the center skipped.

use alloc::vec;

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

pub const CENTER: usize = 4;
pub const DEFAULT_STEPS: usize = 24;

/// `(a, b)` offsets of the eight raw channels.
pub const NEIGHBOR_OFFSETS: [(isize, isize); 8] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Kernel index of raw channel `r`.
pub fn kernel_index(r: usize) -> usize {
    if r < CENTER {
        r
    } else {
        r + 1
    }
}

fn offset_of(k: usize) -> (isize, isize) {
    (k as isize / 3 - 1, k as isize % 3 - 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PropagationConfig {
    pub steps: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS }
    }
}

/// Raw affinities together with their normalized 3x3 kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityField {
    pub raw: Tensor,
    pub normalized: Tensor,
}

impl AffinityField {
    pub fn from_raw(raw: Tensor) -> Result<Self> {
        let normalized = normalize_values(&raw)?;
        Ok(Self { raw, normalized })
    }
}

fn check_raw(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 4 || shape[1] != 8 {
        return Err(Error::ShapeMismatch {
            op: "normalize_affinity",
            left: shape.to_vec(),
            right: vec![8],
        });
    }
    Ok((shape[0], shape[2] * shape[3]))
}

/// `[N, 8, H, W]` raw affinities to `[N, 9, H, W]` kernels.
pub fn normalize_values(raw: &Tensor) -> Result<Tensor> {
    let (n, plane) = check_raw(raw.shape())?;
    let rd = raw.data();
    let mut out = vec![0.0; n * 9 * plane];
    for b in 0..n {
        for p in 0..plane {
            let r = |c: usize| rd[(b * 8 + c) * plane + p];
            let abs_sum: f64 = (0..8).map(|c| libm::fabs(r(c))).sum();
            let o = |k: usize| (b * 9 + k) * plane + p;
            if abs_sum == 0.0 {
                out[o(CENTER)] = 1.0;
                continue;
            }
            let mut signed = 0.0;
            for c in 0..8 {
                let v = r(c) / abs_sum;
                out[o(kernel_index(c))] = v;
                signed += v;
            }
            out[o(CENTER)] = 1.0 - signed;
        }
    }
    let s = raw.shape();
    Tensor::from_vec(&[s[0], 9, s[2], s[3]], out)
}

/// Gradient of the normalization. At an all-zero pixel the normalizer is
/// taken as 1, i.e. the kernel is differentiated as `κ = κ̂`.
pub(crate) fn normalize_backward(raw: &Tensor, g: &Tensor) -> Tensor {
    let s = raw.shape();
    let (n, plane) = (s[0], s[2] * s[3]);
    let (rd, gd) = (raw.data(), g.data());
    let mut dr = vec![0.0; raw.len()];
    for b in 0..n {
        for p in 0..plane {
            let ri = |c: usize| (b * 8 + c) * plane + p;
            let gi = |k: usize| (b * 9 + k) * plane + p;
            let gc = gd[gi(CENTER)];
            let eff: [f64; 8] = core::array::from_fn(|c| gd[gi(kernel_index(c))] - gc);
            let abs_sum: f64 = (0..8).map(|c| libm::fabs(rd[ri(c)])).sum();
            if abs_sum == 0.0 {
                for c in 0..8 {
                    dr[ri(c)] = eff[c];
                }
                continue;
            }
            let dot: f64 = (0..8).map(|c| eff[c] * rd[ri(c)]).sum();
            for c in 0..8 {
                let r = rd[ri(c)];
                let sign = if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                dr[ri(c)] = eff[c] / abs_sum - sign * dot / (abs_sum * abs_sum);
            }
        }
    }
    Tensor::from_vec(s, dr).expect("raw shape")
}

fn check_propagate(h: &[usize], k: &[usize]) -> Result<()> {
    if h.len() != 4 || k.len() != 4 || k[1] != 9 || h[0] != k[0] || h[2..] != k[2..] {
        return Err(Error::ShapeMismatch {
            op: "propagate_step",
            left: h.to_vec(),
            right: k.to_vec(),
        });
    }
    Ok(())
}

/// One simultaneous update of every pixel of `h: [N, c, H, W]`.
pub fn propagate_values(h: &Tensor, kappa: &Tensor) -> Result<Tensor> {
    check_propagate(h.shape(), kappa.shape())?;
    let [n, c, rows, cols]: [usize; 4] = h.shape().try_into().expect("rank 4");
    let plane = rows * cols;
    let (hd, kd) = (h.data(), kappa.data());
    let mut out = vec![0.0; h.len()];
    for b in 0..n {
        for k in 0..9 {
            let (a, bo) = offset_of(k);
            let kk = &kd[(b * 9 + k) * plane..(b * 9 + k + 1) * plane];
            for (i, j, si, sj) in shifted(rows, cols, a, bo) {
                let w = kk[i * cols + j];
                for l in 0..c {
                    let base = (b * c + l) * plane;
                    out[base + i * cols + j] += w * hd[base + si * cols + sj];
                }
            }
        }
    }
    Tensor::from_vec(h.shape(), out)
}

/// Pixels `(i, j)` whose source `(i - a, j - b)` lies inside the image.
fn shifted(rows: usize, cols: usize, a: isize, b: isize) -> impl Iterator<Item = (usize, usize, usize, usize)> {
    (0..rows).flat_map(move |i| {
        (0..cols).filter_map(move |j| {
            let si = i as isize - a;
            let sj = j as isize - b;
            (si >= 0 && sj >= 0 && (si as usize) < rows && (sj as usize) < cols).then_some((
                i,
                j,
                si as usize,
                sj as usize,
            ))
        })
    })
}

pub(crate) fn propagate_backward(h: &Tensor, kappa: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let [n, c, rows, cols]: [usize; 4] = h.shape().try_into().expect("rank 4");
    let plane = rows * cols;
    let (hd, kd, gd) = (h.data(), kappa.data(), g.data());
    let mut gh = vec![0.0; h.len()];
    let mut gk = vec![0.0; kappa.len()];
    for b in 0..n {
        for k in 0..9 {
            let (a, bo) = offset_of(k);
            let kbase = (b * 9 + k) * plane;
            for (i, j, si, sj) in shifted(rows, cols, a, bo) {
                let w = kd[kbase + i * cols + j];
                let mut acc = 0.0;
                for l in 0..c {
                    let base = (b * c + l) * plane;
                    let gv = gd[base + i * cols + j];
                    gh[base + si * cols + sj] += w * gv;
                    acc += gv * hd[base + si * cols + sj];
                }
                gk[kbase + i * cols + j] += acc;
            }
        }
    }
    (
        Tensor::from_vec(h.shape(), gh).expect("h shape"),
        Tensor::from_vec(kappa.shape(), gk).expect("kappa shape"),
    )
}

/// Applies `steps` propagation updates without recording gradients.
pub fn refine_values(logits: &Tensor, field: &AffinityField, config: PropagationConfig) -> Result<Tensor> {
    let mut h = logits.clone();
    for _ in 0..config.steps {
        h = propagate_values(&h, &field.normalized)?;
    }
    Ok(h)
}

/// Raw affinities `[1, 8, H, W]` from a guide image `[B, H, W]`: each pixel's
/// weight toward neighbor `(i - a, j - b)` is `exp(-‖g(i,j) - g(i-a,j-b)‖² / bandwidth)`,
/// and zero for neighbors outside the image.
pub fn guided_affinity(guide: &Tensor, bandwidth: f64) -> Result<Tensor> {
    let s = guide.shape();
    if s.len() != 3 {
        return Err(Error::InvalidAxis {
            op: "guided_affinity",
            axis: 2,
            rank: s.len(),
        });
    }
    if !(bandwidth > 0.0) {
        return Err(crate::error::precondition("bandwidth must be positive"));
    }
    let (bands, rows, cols) = (s[0], s[1], s[2]);
    let plane = rows * cols;
    let g = guide.data();
    let mut out = vec![0.0; 8 * plane];
    for (r, &(a, b)) in NEIGHBOR_OFFSETS.iter().enumerate() {
        for (i, j, si, sj) in shifted(rows, cols, a, b) {
            let d: f64 = (0..bands)
                .map(|k| {
                    let e = g[k * plane + i * cols + j] - g[k * plane + si * cols + sj];
                    e * e
                })
                .sum();
            out[r * plane + i * cols + j] = libm::exp(-d / bandwidth);
        }
    }
    Tensor::from_vec(&[1, 8, rows, cols], out)
}

impl Tape {
    pub fn normalize_affinity(&mut self, raw: Var) -> Result<Var> {
        let t = normalize_values(self.value(raw))?;
        self.push(t, Op::NormalizeAffinity(raw))
    }

    pub fn propagate_step(&mut self, h: Var, kappa: Var) -> Result<Var> {
        let t = propagate_values(self.value(h), self.value(kappa))?;
        self.push(t, Op::Propagate { h, kappa })
    }

    /// `config.steps` recurrent propagation updates; zero steps returns `logits`.
    pub fn refine(&mut self, logits: Var, kappa: Var, config: PropagationConfig) -> Result<Var> {
        let mut h = logits;
        for _ in 0..config.steps {
            h = self.propagate_step(h, kappa)?;
        }
        Ok(h)
    }
}
