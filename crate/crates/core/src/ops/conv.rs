//! 3D cross-correlation over `[N, C, D, H, W]` volumes.
//!
//! Each output depth slice is lowered to a column matrix and multiplied with
//! the `[C_out, C_in * k_d * k_h * k_w]` weight matrix.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

/// Geometry of one 3D convolution. Axes are ordered (spectral, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    /// Convolution with `floor(k/2)` padding on every axis.
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3], stride: [usize; 3]) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }

    pub fn with_padding(mut self, padding: [usize; 3]) -> Self {
        self.padding = padding;
        self
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [kd, kh, kw] = self.kernel;
        [self.out_channels, self.in_channels, kd, kh, kw]
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_volume()
    }

    /// Output extent along one axis: `ceil((in + 2p - k + 1) / s)`.
    pub fn output_extent(&self, axis: usize, input: usize) -> Result<usize> {
        let (k, s, p) = (self.kernel[axis], self.stride[axis], self.padding[axis]);
        if s == 0 || k == 0 {
            return Err(crate::error::precondition("kernel and stride must be >= 1"));
        }
        let span = input + 2 * p;
        if span < k {
            return Err(Error::ExtentCollapse {
                op: "conv3d",
                axis: axis + 2,
            });
        }
        Ok((span - k) / s + 1)
    }

    pub fn output_dims(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        Ok([
            self.output_extent(0, input[0])?,
            self.output_extent(1, input[1])?,
            self.output_extent(2, input[2])?,
        ])
    }
}

/// Index range `[lo, hi)` of output positions whose tap `k` lands inside the input.
fn valid_range(out: usize, input: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    if input + p <= k {
        return (0, 0);
    }
    let hi = ((input - 1 + p - k) / s + 1).min(out);
    (lo.min(hi), hi)
}

struct Geometry {
    n: usize,
    ci: usize,
    co: usize,
    ind: [usize; 3],
    outd: [usize; 3],
    spec: Conv3dSpec,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.ci * self.spec.kernel_volume()
    }
    fn plane(&self) -> usize {
        self.outd[1] * self.outd[2]
    }
    fn in_volume(&self) -> usize {
        self.ind.iter().product()
    }
    fn out_volume(&self) -> usize {
        self.outd.iter().product()
    }
}

fn geometry(spec: &Conv3dSpec, x: &[usize], w: &[usize]) -> Result<Geometry> {
    let mismatch = || Error::ShapeMismatch {
        op: "conv3d",
        left: x.to_vec(),
        right: w.to_vec(),
    };
    if x.len() != 5 || w != spec.weight_shape() || x[1] != spec.in_channels {
        return Err(mismatch());
    }
    let ind = [x[2], x[3], x[4]];
    Ok(Geometry {
        n: x[0],
        ci: x[1],
        co: spec.out_channels,
        ind,
        outd: spec.output_dims(ind)?,
        spec: *spec,
    })
}

/// Fills `col` (`rows x plane`) with the receptive fields of output slice `od`.
fn im2col(g: &Geometry, x: &[f64], od: usize, col: &mut [f64]) {
    let [kd_n, kh_n, kw_n] = g.spec.kernel;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.padding;
    let [di, hi, wi] = g.ind;
    let [_, ho, wo] = g.outd;
    let plane = g.plane();
    col.fill(0.0);
    let mut row = 0;
    for ci in 0..g.ci {
        let xc = &x[ci * g.in_volume()..(ci + 1) * g.in_volume()];
        for kd in 0..kd_n {
            let id = (od * sd + kd) as isize - pd as isize;
            if id < 0 || id as usize >= di {
                row += kh_n * kw_n;
                continue;
            }
            let xs = &xc[id as usize * hi * wi..(id as usize + 1) * hi * wi];
            for kh in 0..kh_n {
                let (oh_lo, oh_hi) = valid_range(ho, hi, kh, sh, ph);
                for kw in 0..kw_n {
                    let (ow_lo, ow_hi) = valid_range(wo, wi, kw, sw, pw);
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * sh + kh - ph;
                        let src = &xs[ih * wi..(ih + 1) * wi];
                        let drow = &mut dst[oh * wo..(oh + 1) * wo];
                        if sw == 1 {
                            let start = ow_lo + kw - pw;
                            drow[ow_lo..ow_hi].copy_from_slice(&src[start..start + (ow_hi - ow_lo)]);
                        } else {
                            for ow in ow_lo..ow_hi {
                                drow[ow] = src[ow * sw + kw - pw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adds the column matrix of slice `od` back into the input gradient.
fn col2im(g: &Geometry, col: &[f64], od: usize, dx: &mut [f64]) {
    let [kd_n, kh_n, kw_n] = g.spec.kernel;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.padding;
    let [di, hi, wi] = g.ind;
    let [_, ho, wo] = g.outd;
    let plane = g.plane();
    let vol = g.in_volume();
    let mut row = 0;
    for ci in 0..g.ci {
        let xc = &mut dx[ci * vol..(ci + 1) * vol];
        for kd in 0..kd_n {
            let id = (od * sd + kd) as isize - pd as isize;
            if id < 0 || id as usize >= di {
                row += kh_n * kw_n;
                continue;
            }
            let xs = &mut xc[id as usize * hi * wi..(id as usize + 1) * hi * wi];
            for kh in 0..kh_n {
                let (oh_lo, oh_hi) = valid_range(ho, hi, kh, sh, ph);
                for kw in 0..kw_n {
                    let (ow_lo, ow_hi) = valid_range(wo, wi, kw, sw, pw);
                    let src = &col[row * plane..(row + 1) * plane];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * sh + kh - ph;
                        let dst = &mut xs[ih * wi..(ih + 1) * wi];
                        let srow = &src[oh * wo..(oh + 1) * wo];
                        for ow in ow_lo..ow_hi {
                            dst[ow * sw + kw - pw] += srow[ow];
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `C = A * B + beta * C` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rs: usize, cs: usize, r: usize, col: usize| (r - 1) * rs + (col - 1) * cs;
    assert!(k == 0 || last(rsa, csa, m, k) < a.len());
    assert!(k == 0 || last(rsb, csb, k, n) < b.len());
    assert!(last(rsc, csc, m, n) < c.len());
    // SAFETY: the asserts above bound every element addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

pub(crate) fn forward(spec: &Conv3dSpec, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let g = geometry(spec, x.shape(), w.shape())?;
    if let Some(b) = b {
        if b.shape() != [g.co] {
            return Err(Error::ShapeMismatch {
                op: "conv3d bias",
                left: b.shape().to_vec(),
                right: alloc::vec![g.co],
            });
        }
    }
    let [d_out, ho, wo] = g.outd;
    let (rows, plane, ovol, ivol) = (g.rows(), g.plane(), g.out_volume(), g.in_volume());
    let mut out = vec![0.0; g.n * g.co * ovol];
    if let Some(b) = b {
        for (chunk, bias) in out.chunks_mut(ovol).zip(b.data().iter().cycle()) {
            chunk.fill(*bias);
        }
    }
    let mut col = vec![0.0; rows * plane];
    for n in 0..g.n {
        let xn = &x.data()[n * g.ci * ivol..(n + 1) * g.ci * ivol];
        let on = &mut out[n * g.co * ovol..(n + 1) * g.co * ovol];
        for od in 0..d_out {
            im2col(&g, xn, od, &mut col);
            gemm(
                g.co,
                rows,
                plane,
                w.data(),
                (rows, 1),
                &col,
                (plane, 1),
                1.0,
                &mut on[od * plane..],
                (ovol, 1),
            );
        }
    }
    Tensor::from_vec(&[g.n, g.co, d_out, ho, wo], out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    spec: &Conv3dSpec,
    x: &Tensor,
    w: &Tensor,
    gy: &Tensor,
    (xv, want_x): (Var, bool),
    (wv, want_w): (Var, bool),
    bias: Option<(Var, bool)>,
    out: &mut Vec<(Var, Tensor)>,
) {
    let g = geometry(spec, x.shape(), w.shape()).expect("validated in forward");
    let (rows, plane, ovol, ivol) = (g.rows(), g.plane(), g.out_volume(), g.in_volume());
    let gd = gy.data();
    let mut dx = if want_x { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = if want_w { vec![0.0; w.len()] } else { Vec::new() };
    let mut col = vec![0.0; rows * plane];
    for n in 0..g.n {
        let xn = &x.data()[n * g.ci * ivol..(n + 1) * g.ci * ivol];
        let gn = &gd[n * g.co * ovol..(n + 1) * g.co * ovol];
        for od in 0..g.outd[0] {
            let gs = &gn[od * plane..];
            if want_w {
                im2col(&g, xn, od, &mut col);
                gemm(
                    g.co,
                    plane,
                    rows,
                    gs,
                    (ovol, 1),
                    &col,
                    (1, plane),
                    1.0,
                    &mut dw,
                    (rows, 1),
                );
            }
            if want_x {
                gemm(
                    rows,
                    g.co,
                    plane,
                    w.data(),
                    (1, rows),
                    gs,
                    (ovol, 1),
                    0.0,
                    &mut col,
                    (plane, 1),
                );
                col2im(&g, &col, od, &mut dx[n * g.ci * ivol..(n + 1) * g.ci * ivol]);
            }
        }
    }
    if want_x {
        out.push((xv, Tensor::from_vec(x.shape(), dx).expect("input shape")));
    }
    if want_w {
        out.push((wv, Tensor::from_vec(w.shape(), dw).expect("weight shape")));
    }
    if let Some((bv, true)) = bias {
        let mut db = vec![0.0; g.co];
        for (i, chunk) in gd.chunks(ovol).enumerate() {
            db[i % g.co] += chunk.iter().sum::<f64>();
        }
        out.push((bv, Tensor::from_vec(&[g.co], db).expect("bias shape")));
    }
}

impl Tape {
    /// Cross-correlation of `x: [N, C_in, D, H, W]` with `w: [C_out, C_in, kd, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &Conv3dSpec) -> Result<Var> {
        let t = forward(spec, self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        self.push(t, Op::Conv3d { x, w, b, spec: *spec })
    }
}
