//! Forward and backward kernels on flat row-major buffers.

use crate::error::{NiceError, Result};

/// `c = a·b + beta·c` for an `m×k` by `k×n` product with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
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
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len());
        assert!(last(k, n, rsb, csb) < b.len());
    }
    assert!(last(m, n, rsc, csc) < c.len());
    // SAFETY: every index the kernel touches was bounds-checked above.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = x[..] else {
            return Err(NiceError::shape("conv2d", format!("input must be NCHW, got {x:?}")));
        };
        let [cout, wcin, kh, kw] = weight[..] else {
            return Err(NiceError::shape("conv2d", format!("weight must be OIHW, got {weight:?}")));
        };
        if wcin != cin {
            return Err(NiceError::shape(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if kh != kw {
            return Err(NiceError::shape("conv2d", format!("non-square kernel {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(NiceError::shape("conv2d", "stride must be positive"));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        if ph < kh || pw < kw {
            return Err(NiceError::shape(
                "conv2d",
                format!("padded input {ph}x{pw} smaller than kernel {kh}x{kw}"),
            ));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride,
            pad,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one CHW image into a `(cin·k·k) × (ho·wo)` column matrix.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let hw_out = g.spatial_out();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw_out = g.spatial_out();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (patch, hw_out) = (g.patch(), g.spatial_out());
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * hw_out;
    let mut out = vec![0.0; g.n * out_img];
    let mut cols = vec![0.0; patch * hw_out];
    for i in 0..g.n {
        im2col(&x[i * in_img..(i + 1) * in_img], g, &mut cols);
        let y = &mut out[i * out_img..(i + 1) * out_img];
        if let Some(b) = bias {
            for (o, row) in y.chunks_mut(hw_out).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        gemm(g.cout, patch, hw_out, weight, (patch, 1), &cols, (hw_out, 1), 1.0, y, (hw_out, 1));
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    (need_input, need_weight, need_bias): (bool, bool, bool),
) -> ConvGrads {
    let (patch, hw_out) = (g.patch(), g.spatial_out());
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * hw_out;
    let mut dx = need_input.then(|| vec![0.0; g.n * in_img]);
    let mut dw = need_weight.then(|| vec![0.0; weight.len()]);
    let mut db = need_bias.then(|| vec![0.0; g.cout]);
    let mut cols = vec![0.0; patch * hw_out];
    for i in 0..g.n {
        let dyi = &dy[i * out_img..(i + 1) * out_img];
        if let Some(db) = db.as_mut() {
            for (o, row) in dyi.chunks(hw_out).enumerate() {
                db[o] += row.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[i * in_img..(i + 1) * in_img], g, &mut cols);
            // dW (cout×patch) += dY (cout×hw) · colsᵀ (hw×patch)
            gemm(g.cout, hw_out, patch, dyi, (hw_out, 1), &cols, (1, hw_out), 1.0, dw, (patch, 1));
        }
        if let Some(dx) = dx.as_mut() {
            // dcols (patch×hw) = Wᵀ (patch×cout) · dY (cout×hw)
            gemm(g.patch(), g.cout, hw_out, weight, (1, patch), dyi, (hw_out, 1), 0.0, &mut cols, (hw_out, 1));
            col2im(&cols, g, &mut dx[i * in_img..(i + 1) * in_img]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    /// Windows must tile the input exactly; ragged trailing windows are rejected.
    pub fn new(op: &'static str, shape: &[usize], k: usize, stride: usize) -> Result<Self> {
        let [n, c, h, w] = shape[..] else {
            return Err(NiceError::shape(op, format!("input must be NCHW, got {shape:?}")));
        };
        if k == 0 || stride == 0 {
            return Err(NiceError::shape(op, "window and stride must be positive"));
        }
        if h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0 {
            return Err(NiceError::shape(
                op,
                format!("{h}x{w} input is not tiled by window {k} at stride {stride}"),
            ));
        }
        Ok(Self {
            planes: n * c,
            h,
            w,
            k,
            stride,
            ho: (h - k) / stride + 1,
            wo: (w - k) / stride + 1,
        })
    }
}

pub(crate) fn avgpool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let scale = 1.0 / (g.k * g.k) as f64;
    let mut out = vec![0.0; g.planes * g.ho * g.wo];
    for p in 0..g.planes {
        let plane = &x[p * g.h * g.w..(p + 1) * g.h * g.w];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut acc = 0.0;
                for ky in 0..g.k {
                    let row = (oy * g.stride + ky) * g.w + ox * g.stride;
                    acc += plane[row..row + g.k].iter().sum::<f64>();
                }
                out[(p * g.ho + oy) * g.wo + ox] = acc * scale;
            }
        }
    }
    out
}

pub(crate) fn avgpool_backward(dy: &[f64], g: &PoolGeom) -> Vec<f64> {
    let scale = 1.0 / (g.k * g.k) as f64;
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    for p in 0..g.planes {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let d = dy[(p * g.ho + oy) * g.wo + ox] * scale;
                for ky in 0..g.k {
                    let row = p * g.h * g.w + (oy * g.stride + ky) * g.w + ox * g.stride;
                    dx[row..row + g.k].iter_mut().for_each(|v| *v += d);
                }
            }
        }
    }
    dx
}

/// Window maxima and the flat input index of each; ties go to the first index in row-major order.
pub(crate) fn maxpool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let n_out = g.planes * g.ho * g.wo;
    let mut out = vec![0.0; n_out];
    let mut arg = vec![0; n_out];
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let idx = base + (oy * g.stride + ky) * g.w + ox * g.stride + kx;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (p * g.ho + oy) * g.wo + ox;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample_forward(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for oy in 0..ho {
            let src = &x[(p * h + oy / f) * w..(p * h + oy / f + 1) * w];
            let dst = &mut out[(p * ho + oy) * wo..(p * ho + oy + 1) * wo];
            for (ox, v) in dst.iter_mut().enumerate() {
                *v = src[ox / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dy: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                dx[(p * h + oy / f) * w + ox / f] += dy[(p * ho + oy) * wo + ox];
            }
        }
    }
    dx
}

/// `y = x·Wᵀ + b` for `x: n×d`, `W: o×d`.
pub(crate) fn dense_forward(x: &[f64], weight: &[f64], bias: Option<&[f64]>, n: usize, d: usize, o: usize) -> Vec<f64> {
    let mut y = vec![0.0; n * o];
    if let Some(b) = bias {
        for row in y.chunks_mut(o) {
            row.copy_from_slice(b);
        }
    }
    gemm(n, d, o, x, (d, 1), weight, (1, d), 1.0, &mut y, (o, 1));
    y
}
