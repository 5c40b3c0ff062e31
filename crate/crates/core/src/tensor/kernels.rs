//! Forward and backward kernels shared by the tape and the free functions.

use super::{channel_view, Tensor};
use crate::error::{shape_err, Result};
use crate::par;
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(shape_err!(
                "conv2d expects rank-4 input and kernel, got {input:?} and {kernel:?}"
            ));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (co, ci, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if ci != c {
            return Err(shape_err!(
                "conv2d channel mismatch: input has {c}, kernel expects {ci}"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err!("conv2d kernel extents must be odd, got {kh}x{kw}"));
        }
        if stride == 0 {
            return Err(shape_err!("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err!(
                "conv2d output extent would be non-positive for input {h}x{w}, kernel {kh}x{kw}, pad {pad}"
            ));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self {
            n,
            c,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_spatial(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let sp = g.out_spatial();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * sp..(row + 1) * sp];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let sp = g.out_spatial();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * sp..(row + 1) * sp];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(g: &ConvGeom, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let sp = g.out_spatial();
    let patch = g.patch();
    let in_len = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.co * sp];
    par::chunks_mut(&mut out, g.co * sp, |n, y| {
        let mut cols = vec![T::zero(); patch * sp];
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
        T::gemm(g.co, patch, sp, k, patch, 1, &cols, sp, 1, T::zero(), y, sp, 1);
        if let Some(b) = bias {
            for (co, row) in y.chunks_mut(sp).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    out
}

/// Returns `(dx, dk, dbias)`.
pub(crate) fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    k: &[T],
    dy: &[T],
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let sp = g.out_spatial();
    let patch = g.patch();
    let in_len = g.c * g.h * g.w;
    let parts = par::map_range(g.n, |n| {
        let dy_n = &dy[n * g.co * sp..(n + 1) * g.co * sp];
        let dk_n = want_dk.then(|| {
            let mut cols = vec![T::zero(); patch * sp];
            im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols);
            let mut dk = vec![T::zero(); g.co * patch];
            // dK = dY (co x sp) * cols^T (sp x patch)
            T::gemm(g.co, sp, patch, dy_n, sp, 1, &cols, 1, sp, T::zero(), &mut dk, patch, 1);
            dk
        });
        let dx_n = want_dx.then(|| {
            let mut dcols = vec![T::zero(); patch * sp];
            // dcols = K^T (patch x co) * dY (co x sp)
            T::gemm(patch, g.co, sp, k, 1, patch, dy_n, sp, 1, T::zero(), &mut dcols, sp, 1);
            let mut dx = vec![T::zero(); in_len];
            col2im(g, &dcols, &mut dx);
            dx
        });
        let db: Vec<T> = dy_n.chunks(sp).map(|r| r.iter().copied().sum()).collect();
        (dx_n, dk_n, db)
    });
    let mut dx = want_dx.then(|| Vec::with_capacity(g.n * in_len));
    let mut dk = want_dk.then(|| vec![T::zero(); g.co * patch]);
    let mut db = vec![T::zero(); g.co];
    for (dx_n, dk_n, db_n) in parts {
        if let (Some(acc), Some(part)) = (dx.as_mut(), dx_n) {
            acc.extend(part);
        }
        if let (Some(acc), Some(part)) = (dk.as_mut(), dk_n) {
            acc.iter_mut().zip(part).for_each(|(a, p)| *a += p);
        }
        db.iter_mut().zip(db_n).for_each(|(a, p)| *a += p);
    }
    (dx, dk, db)
}

/// Plain cross-correlation without tape participation.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input.shape(), kernel.shape(), stride, padding)?;
    let out = conv2d_forward(&g, input.data(), kernel.data(), None);
    Tensor::new(vec![g.n, g.co, g.ho, g.wo], out)?.ensure_finite("conv2d")
}

/// Pointwise linear map over the channel axis: `[N, Cin, S] -> [N, Cout, S]`.
pub(crate) fn linear_forward<T: Real>(
    (n, cin, s): (usize, usize, usize),
    cout: usize,
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
) -> Vec<T> {
    let mut y = vec![T::zero(); n * cout * s];
    if s == 1 {
        // Y[n, cout] = X[n, cin] * W^T
        T::gemm(n, cin, cout, x, cin, 1, w, 1, cin, T::zero(), &mut y, cout, 1);
        if let Some(b) = b {
            for row in y.chunks_mut(cout) {
                row.iter_mut().zip(b).for_each(|(v, bb)| *v += *bb);
            }
        }
        return y;
    }
    par::chunks_mut(&mut y, cout * s, |i, yn| {
        let xn = &x[i * cin * s..(i + 1) * cin * s];
        T::gemm(cout, cin, s, w, cin, 1, xn, s, 1, T::zero(), yn, s, 1);
        if let Some(b) = b {
            for (co, row) in yn.chunks_mut(s).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    });
    y
}

/// Returns `(dx, dw, db)`.
pub(crate) fn linear_backward<T: Real>(
    (n, cin, s): (usize, usize, usize),
    cout: usize,
    x: &[T],
    w: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    if s == 1 {
        let dx = want_dx.then(|| {
            let mut dx = vec![T::zero(); n * cin];
            T::gemm(n, cout, cin, dy, cout, 1, w, cin, 1, T::zero(), &mut dx, cin, 1);
            dx
        });
        let dw = want_dw.then(|| {
            let mut dw = vec![T::zero(); cout * cin];
            T::gemm(cout, n, cin, dy, 1, cout, x, cin, 1, T::zero(), &mut dw, cin, 1);
            dw
        });
        let mut db = vec![T::zero(); cout];
        for row in dy.chunks(cout) {
            db.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
        }
        return (dx, dw, db);
    }
    let parts = par::map_range(n, |i| {
        let xn = &x[i * cin * s..(i + 1) * cin * s];
        let dyn_ = &dy[i * cout * s..(i + 1) * cout * s];
        let dx = want_dx.then(|| {
            let mut dx = vec![T::zero(); cin * s];
            T::gemm(cin, cout, s, w, 1, cin, dyn_, s, 1, T::zero(), &mut dx, s, 1);
            dx
        });
        let dw = want_dw.then(|| {
            let mut dw = vec![T::zero(); cout * cin];
            T::gemm(cout, s, cin, dyn_, s, 1, xn, 1, s, T::zero(), &mut dw, cin, 1);
            dw
        });
        let db: Vec<T> = dyn_.chunks(s).map(|r| r.iter().copied().sum()).collect();
        (dx, dw, db)
    });
    let mut dx = want_dx.then(|| Vec::with_capacity(n * cin * s));
    let mut dw = want_dw.then(|| vec![T::zero(); cout * cin]);
    let mut db = vec![T::zero(); cout];
    for (px, pw, pb) in parts {
        if let (Some(acc), Some(p)) = (dx.as_mut(), px) {
            acc.extend(p);
        }
        if let (Some(acc), Some(p)) = (dw.as_mut(), pw) {
            acc.iter_mut().zip(p).for_each(|(a, v)| *a += v);
        }
        db.iter_mut().zip(pb).for_each(|(a, v)| *a += v);
    }
    (dx, dw, db)
}

/// Source taps `(i0, i1, w0, w1)` for each output index of a 2x bilinear
/// upsample with half-pixel centers (align-corners = false).
fn upsample_taps(len: usize) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let l = src - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

pub(crate) fn upsample_forward<T: Real>(shape: &[usize], x: &[T]) -> Vec<T> {
    let (h, w) = (shape[2], shape[3]);
    let planes = shape[0] * shape[1];
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    par::chunks_mut(&mut out, ho * wo, |p, plane| {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let top = src[y0 * w + x0] * wx0 + src[y0 * w + x1] * wx1;
                let bot = src[y1 * w + x0] * wx0 + src[y1 * w + x1] * wx1;
                plane[oy * wo + ox] = top * wy0 + bot * wy1;
            }
        }
    });
    out
}

pub(crate) fn upsample_backward<T: Real>(shape: &[usize], dy: &[T]) -> Vec<T> {
    let (h, w) = (shape[2], shape[3]);
    let planes = shape[0] * shape[1];
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    par::chunks_mut(&mut dx, h * w, |p, plane| {
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::lit(wy0), T::lit(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::lit(wx0), T::lit(wx1));
                let v = g[oy * wo + ox];
                plane[y0 * w + x0] += v * wy0 * wx0;
                plane[y0 * w + x1] += v * wy0 * wx1;
                plane[y1 * w + x0] += v * wy1 * wx0;
                plane[y1 * w + x1] += v * wy1 * wx1;
            }
        }
    });
    dx
}

/// 2x bilinear upsampling of an `[N, C, H, W]` tensor (align-corners = false).
pub fn bilinear_upsample2x<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(shape_err!("upsample expects rank 4, got {s:?}"));
    }
    let out = upsample_forward(s, input.data());
    Tensor::new(vec![s[0], s[1], 2 * s[2], 2 * s[3]], out)
}

pub(crate) fn softmax_forward<T: Real>((_, c, s): (usize, usize, usize), x: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    par::chunks_mut(&mut y, c * s, |i, yn| {
        let xn = &x[i * c * s..(i + 1) * c * s];
        for sp in 0..s {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(xn[ch * s + sp]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (xn[ch * s + sp] - m).exp();
                yn[ch * s + sp] = e;
                total += e;
            }
            for ch in 0..c {
                yn[ch * s + sp] /= total;
            }
        }
    });
    y
}

pub(crate) fn softmax_backward<T: Real>((_, c, s): (usize, usize, usize), y: &[T], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    par::chunks_mut(&mut dx, c * s, |i, dxn| {
        let off = i * c * s;
        for sp in 0..s {
            let mut dot = T::zero();
            for ch in 0..c {
                dot += y[off + ch * s + sp] * dy[off + ch * s + sp];
            }
            for ch in 0..c {
                let k = off + ch * s + sp;
                dxn[ch * s + sp] = y[k] * (dy[k] - dot);
            }
        }
    });
    dx
}

/// Max-stabilised softmax along the channel axis (axis 1).
pub fn softmax_channel<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let view = channel_view(input.shape())?;
    Tensor::new(input.shape().to_vec(), softmax_forward(view, input.data()))
}
