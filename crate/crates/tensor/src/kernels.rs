//! Slice-level forward and backward kernels shared by the tape and by
//! direct (non-recording) evaluation.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::{numel, strides};

// ── broadcasting ──────────────────────────────────────────────────────────────

/// Broadcast rule for binary ops: `b` either holds a single value or has the
/// same rank as `a` with every dimension equal to `a`'s or 1.
/// Returns, for every element of `a`, the index of the matching element of `b`,
/// or `None` when the shapes are identical.
pub fn broadcast_index(a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    let n = numel(a);
    if numel(b) == 1 {
        return Ok(Some(vec![0; n]));
    }
    if a.len() != b.len() || a.iter().zip(b).any(|(&da, &db)| db != da && db != 1) {
        return Err(shape_err(
            "broadcast",
            format!("{b:?} cannot broadcast onto {a:?}"),
        ));
    }
    let bs = strides(b);
    let eff: Vec<usize> = b
        .iter()
        .zip(&bs)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..a.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < a[ax] {
                break;
            }
            off -= eff[ax] * a[ax];
            idx[ax] = 0;
        }
    }
    Ok(Some(out))
}

/// Sum `g` (shaped like `a`) back onto the broadcast operand.
pub fn reduce_broadcast<T: Scalar>(g: &[T], map: &Option<Vec<usize>>, b_len: usize) -> Vec<T> {
    match map {
        None => g.to_vec(),
        Some(m) => {
            let mut out = vec![T::zero(); b_len];
            for (gi, &bi) in g.iter().zip(m) {
                out[bi] = out[bi] + *gi;
            }
            out
        }
    }
}

// ── conv2d ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected NCHW input and OIKhKw weight, got {x:?} and {w:?}"),
            ));
        }
        if stride == 0 {
            return Err(arg_err("conv2d", "stride must be at least 1"));
        }
        if x[1] != w[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels but weight expects {}", x[1], w[1]),
            ));
        }
        let (h, wd, kh, kw) = (x[2], x[3], w[2], w[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, wd + 2 * pad),
            ));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h,
            w: wd,
            o: w[0],
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (kk, hw) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * hw;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * hw] };
    for n in 0..g.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let yn = &mut out[n * out_len..(n + 1) * out_len];
        if let Some(b) = bias {
            for (o, row) in yn.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = b[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        gemm(g.o, kk, hw, T::one(), w, Layout::N, src, Layout::N, beta, yn);
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gy: &[T],
    g: &ConvGeom,
    need_x: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (kk, hw) = (g.col_rows(), g.col_cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.o * hw;
    let mut gx = if need_x { vec![T::zero(); g.n * in_len] } else { Vec::new() };
    let mut gw = vec![T::zero(); g.o * kk];
    let mut gb = vec![T::zero(); g.o];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut gcols = vec![T::zero(); kk * hw];
    for n in 0..g.n {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let gyn = &gy[n * out_len..(n + 1) * out_len];
        for (o, row) in gyn.chunks(hw).enumerate() {
            gb[o] = gb[o] + row.iter().copied().sum::<T>();
        }
        let src = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut cols);
            &cols
        };
        // gw (o x kk) += gy (o x hw) * cols^T (hw x kk)
        gemm(g.o, hw, kk, T::one(), gyn, Layout::N, src, Layout::T, T::one(), &mut gw);
        if need_x {
            let gxn = &mut gx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(kk, g.o, hw, T::one(), w, Layout::T, gyn, Layout::N, T::zero(), gxn);
            } else {
                gemm(kk, g.o, hw, T::one(), w, Layout::T, gyn, Layout::N, T::zero(), &mut gcols);
                col2im(&gcols, g, gxn);
            }
        }
    }
    (gx, gw, gb)
}

// ── pooling ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(x: &[usize], k: usize, stride: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(shape_err("avg_pool2d", format!("expected NCHW input, got {x:?}")));
        }
        if k == 0 || stride == 0 {
            return Err(arg_err("avg_pool2d", "kernel and stride must be at least 1"));
        }
        if k > x[2] || k > x[3] {
            return Err(arg_err(
                "avg_pool2d",
                format!("kernel {k} larger than input {}x{}", x[2], x[3]),
            ));
        }
        Ok(Self {
            planes: x[0] * x[1],
            h: x[2],
            w: x[3],
            k,
            stride,
            oh: (x[2] - k) / stride + 1,
            ow: (x[3] - k) / stride + 1,
        })
    }
}

pub fn avg_pool_forward<T: Scalar>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let inv = T::one() / T::from_usize(g.k * g.k).unwrap();
    let mut out = vec![T::zero(); g.planes * g.oh * g.ow];
    for p in 0..g.planes {
        let xp = &x[p * g.h * g.w..][..g.h * g.w];
        let yp = &mut out[p * g.oh * g.ow..][..g.oh * g.ow];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = T::zero();
                for i in 0..g.k {
                    let row = &xp[(oy * g.stride + i) * g.w + ox * g.stride..][..g.k];
                    acc = acc + row.iter().copied().sum::<T>();
                }
                yp[oy * g.ow + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(gy: &[T], g: &PoolGeom) -> Vec<T> {
    let inv = T::one() / T::from_usize(g.k * g.k).unwrap();
    let mut gx = vec![T::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let gxp = &mut gx[p * g.h * g.w..][..g.h * g.w];
        let gyp = &gy[p * g.oh * g.ow..][..g.oh * g.ow];
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let v = gyp[oy * g.ow + ox] * inv;
                for i in 0..g.k {
                    for j in 0..g.k {
                        let idx = (oy * g.stride + i) * g.w + ox * g.stride + j;
                        gxp[idx] = gxp[idx] + v;
                    }
                }
            }
        }
    }
    gx
}

// ── bilinear resampling (align corners) ───────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct Tap<T> {
    i0: usize,
    i1: usize,
    frac: T,
}

fn taps<T: Scalar>(input: usize, output: usize) -> Vec<Tap<T>> {
    (0..output)
        .map(|i| {
            if output == 1 || input == 1 {
                return Tap {
                    i0: 0,
                    i1: 0,
                    frac: T::zero(),
                };
            }
            // Exact rational source coordinate i * (in - 1) / (out - 1).
            let num = i * (input - 1);
            let den = output - 1;
            let i0 = num / den;
            let rem = num % den;
            let i1 = (i0 + 1).min(input - 1);
            let frac = T::from_usize(rem).unwrap() / T::from_usize(den).unwrap();
            Tap { i0, i1, frac }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizeGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ResizeGeom {
    pub fn new(x: &[usize], oh: usize, ow: usize) -> Result<Self> {
        if x.len() != 4 {
            return Err(shape_err("upsample_bilinear", format!("expected NCHW input, got {x:?}")));
        }
        if oh == 0 || ow == 0 {
            return Err(arg_err("upsample_bilinear", "output size must be at least 1x1"));
        }
        Ok(Self {
            planes: x[0] * x[1],
            h: x[2],
            w: x[3],
            oh,
            ow,
        })
    }
}

pub fn bilinear_forward<T: Scalar>(x: &[T], g: &ResizeGeom) -> Vec<T> {
    let ty = taps::<T>(g.h, g.oh);
    let tx = taps::<T>(g.w, g.ow);
    let mut out = vec![T::zero(); g.planes * g.oh * g.ow];
    for p in 0..g.planes {
        let xp = &x[p * g.h * g.w..][..g.h * g.w];
        let yp = &mut out[p * g.oh * g.ow..][..g.oh * g.ow];
        for (oy, a) in ty.iter().enumerate() {
            let (r0, r1) = (&xp[a.i0 * g.w..][..g.w], &xp[a.i1 * g.w..][..g.w]);
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.frac;
                let bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.frac;
                yp[oy * g.ow + ox] = top + (bot - top) * a.frac;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Scalar>(gy: &[T], g: &ResizeGeom) -> Vec<T> {
    let ty = taps::<T>(g.h, g.oh);
    let tx = taps::<T>(g.w, g.ow);
    let one = T::one();
    let mut gx = vec![T::zero(); g.planes * g.h * g.w];
    for p in 0..g.planes {
        let gxp = &mut gx[p * g.h * g.w..][..g.h * g.w];
        let gyp = &gy[p * g.oh * g.ow..][..g.oh * g.ow];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = gyp[oy * g.ow + ox];
                let (wy0, wy1) = (one - a.frac, a.frac);
                let (wx0, wx1) = (one - b.frac, b.frac);
                let mut add = |r: usize, c: usize, wgt: T| {
                    let i = r * g.w + c;
                    gxp[i] = gxp[i] + v * wgt;
                };
                add(a.i0, b.i0, wy0 * wx0);
                add(a.i0, b.i1, wy0 * wx1);
                add(a.i1, b.i0, wy1 * wx0);
                add(a.i1, b.i1, wy1 * wx1);
            }
        }
    }
    gx
}

// ── axis helpers ──────────────────────────────────────────────────────────────

/// `(outer, dim, inner)` decomposition around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * dim * inner + k * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..dim {
                m = m.max(x[at(k)]);
            }
            let mut s = T::zero();
            for k in 0..dim {
                let e = (x[at(k)] - m).exp();
                y[at(k)] = e;
                s = s + e;
            }
            for k in 0..dim {
                y[at(k)] = y[at(k)] / s;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], gy: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut gx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * dim * inner + k * inner + i;
            let dot: T = (0..dim).map(|k| y[at(k)] * gy[at(k)]).sum();
            for k in 0..dim {
                gx[at(k)] = y[at(k)] * (gy[at(k)] - dot);
            }
        }
    }
    gx
}

pub fn sum_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..dim {
            let src = &x[(o * dim + k) * inner..][..inner];
            let dst = &mut out[o * inner..][..inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *d + *s;
            }
        }
    }
    out
}

/// Maximum along `axis`; ties resolve to the lowest index.
pub fn max_axis<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> (Vec<T>, Vec<usize>) {
    let (outer, dim, inner) = split_axis(shape, axis);
    let mut out = vec![T::neg_infinity(); outer * inner];
    let mut arg = vec![0usize; outer * inner];
    for o in 0..outer {
        for k in 0..dim {
            for i in 0..inner {
                let v = x[(o * dim + k) * inner + i];
                let j = o * inner + i;
                if v > out[j] {
                    out[j] = v;
                    arg[j] = (o * dim + k) * inner + i;
                }
            }
        }
    }
    (out, arg)
}

pub fn permute<T: Scalar>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(x[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

// ── matmul ────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatmulGeom {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix shared by every batch entry of `a`.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulGeom {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err("matmul", format!("operands must be at least 2-d, got {a:?} and {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dimensions differ: {a:?} x {b:?}")));
        }
        let lead_a = &a[..a.len() - 2];
        let lead_b = &b[..b.len() - 2];
        let shared_rhs = lead_b.is_empty();
        if !shared_rhs && lead_a != lead_b {
            return Err(shape_err("matmul", format!("batch dimensions differ: {a:?} x {b:?}")));
        }
        let mut out_shape = lead_a.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: lead_a.iter().product(),
            m,
            k,
            n,
            shared_rhs,
            out_shape,
        })
    }
}

pub fn matmul_forward<T: Scalar>(a: &[T], b: &[T], g: &MatmulGeom) -> Vec<T> {
    let (m, k, n) = (g.m, g.k, g.n);
    let mut out = vec![T::zero(); g.batch * m * n];
    for i in 0..g.batch {
        let bi = if g.shared_rhs { 0 } else { i };
        gemm(
            m,
            k,
            n,
            T::one(),
            &a[i * m * k..][..m * k],
            Layout::N,
            &b[bi * k * n..][..k * n],
            Layout::N,
            T::zero(),
            &mut out[i * m * n..][..m * n],
        );
    }
    out
}

pub fn matmul_backward<T: Scalar>(a: &[T], b: &[T], gy: &[T], g: &MatmulGeom) -> (Vec<T>, Vec<T>) {
    let (m, k, n) = (g.m, g.k, g.n);
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    for i in 0..g.batch {
        let bi = if g.shared_rhs { 0 } else { i };
        let gyi = &gy[i * m * n..][..m * n];
        let bmat = &b[bi * k * n..][..k * n];
        // dA = G * B^T
        gemm(m, n, k, T::one(), gyi, Layout::N, bmat, Layout::T, T::zero(), &mut ga[i * m * k..][..m * k]);
        // dB += A^T * G
        gemm(
            k,
            m,
            n,
            T::one(),
            &a[i * m * k..][..m * k],
            Layout::T,
            gyi,
            Layout::N,
            T::one(),
            &mut gb[bi * k * n..][..k * n],
        );
    }
    (ga, gb)
}

/// Validates that `shapes` agree everywhere except `axis` and returns the output shape.
pub fn concat_shape(shapes: &[&[usize]], axis: usize) -> Result<Vec<usize>> {
    let first = shapes
        .first()
        .ok_or_else(|| arg_err("concat", "at least one tensor required"))?;
    if axis >= first.len() {
        return Err(crate::error::TensorError::Axis {
            op: "concat",
            axis,
            rank: first.len(),
        });
    }
    let mut out = first.to_vec();
    for s in &shapes[1..] {
        if s.len() != first.len()
            || s.iter()
                .zip(first.iter())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err(
                "concat",
                format!("{s:?} does not match {first:?} outside axis {axis}"),
            ));
        }
        out[axis] += s[axis];
    }
    Ok(out)
}
