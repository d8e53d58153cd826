//! Core NCHW operators: convolution, pooling, bilinear resize, activations.
//!
//! Two convolution paths are exposed. [`conv2d_direct`] is the plain loop
//! nest and serves as the in-crate reference; [`conv2d`] lowers to im2col +
//! matmul and is what the layers call. Both accumulate every output element
//! in the same fixed order — input channel, then kernel row, then kernel
//! column — so results are reproducible run-to-run and across thread counts,
//! and the two paths track each other to rounding noise.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Geometry of a 2-D convolution. `kernel` is the square window size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize) -> Self {
        ConvSpec {
            kernel,
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.padding = p;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    /// Output spatial size for an `(h, w)` input, or an error when the
    /// window does not fit.
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.kernel == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            shape_err!("conv spec has a zero field: {:?}", self);
        }
        let eff = self.dilation * (self.kernel - 1) + 1;
        let hp = h + 2 * self.padding;
        let wp = w + 2 * self.padding;
        if hp < eff || wp < eff {
            shape_err!(
                "kernel (effective {}) does not fit input {}x{} with padding {}",
                eff,
                h,
                w,
                self.padding
            );
        }
        Ok(((hp - eff) / self.stride + 1, (wp - eff) / self.stride + 1))
    }
}

fn check_conv_args<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    let xs = x.shape();
    let ws = w.shape();
    if ws.h != spec.kernel || ws.w != spec.kernel {
        shape_err!("weight {} does not match kernel size {}", ws, spec.kernel);
    }
    if xs.c % spec.groups != 0 || ws.n % spec.groups != 0 {
        shape_err!(
            "channels ({} in, {} out) not divisible by groups {}",
            xs.c,
            ws.n,
            spec.groups
        );
    }
    if ws.c != xs.c / spec.groups {
        shape_err!(
            "weight expects {} channels per group, input provides {}",
            ws.c,
            xs.c / spec.groups
        );
    }
    if let Some(b) = bias {
        if b.shape() != Shape::new(ws.n, 1, 1, 1) {
            shape_err!("bias shape {} must be ({}, 1, 1, 1)", b.shape(), ws.n);
        }
    }
    spec.out_hw(xs.h, xs.w)
}

/// Reference convolution: explicit loop nest, zero padding, channel-major
/// then row then column accumulation per output element.
pub fn conv2d_direct<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv_args(x, w, bias, spec)?;
    let xs = x.shape();
    let ws = w.shape();
    let (out_c, cg, k) = (ws.n, ws.c, spec.kernel);
    let ocg = out_c / spec.groups;
    let mut y = Tensor::zeros(Shape::new(xs.n, out_c, oh, ow));
    let xd = x.data();
    let wd = w.data();
    for n in 0..xs.n {
        for o in 0..out_c {
            let g = o / ocg;
            for p in 0..oh {
                for q in 0..ow {
                    let mut acc = T::ZERO;
                    for c in 0..cg {
                        let ic = g * cg + c;
                        for ky in 0..k {
                            let iy = (p * spec.stride + ky * spec.dilation) as isize
                                - spec.padding as isize;
                            if iy < 0 || iy >= xs.h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (q * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if ix < 0 || ix >= xs.w as isize {
                                    continue;
                                }
                                acc += wd[ws.idx(o, c, ky, kx)]
                                    * xd[xs.idx(n, ic, iy as usize, ix as usize)];
                            }
                        }
                    }
                    if let Some(b) = bias {
                        acc += b.data()[o];
                    }
                    y.set(n, o, p, q, acc);
                }
            }
        }
    }
    Ok(y)
}

/// Fill `cols` (rows = output positions of one image, cols = `cg * k * k`)
/// for group `g` of image `n`. Column order matches the direct loop nest.
fn im2col_image<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    g: usize,
    cg: usize,
    spec: &ConvSpec,
    _oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let xs = x.shape();
    let k = spec.kernel;
    let kk = cg * k * k;
    let xd = x.data();
    cols.par_chunks_mut(kk).enumerate().for_each(|(r, row)| {
        let p = r / ow;
        let q = r % ow;
        let ix0 = (q * spec.stride) as isize - spec.padding as isize;
        let mut j = 0;
        for c in 0..cg {
            let ic = g * cg + c;
            for ky in 0..k {
                let iy =
                    (p * spec.stride + ky * spec.dilation) as isize - spec.padding as isize;
                let in_row = iy >= 0 && iy < xs.h as isize;
                if in_row
                    && spec.dilation == 1
                    && ix0 >= 0
                    && ix0 as usize + k <= xs.w
                {
                    let base = xs.idx(n, ic, iy as usize, ix0 as usize);
                    row[j..j + k].copy_from_slice(&xd[base..base + k]);
                    j += k;
                    continue;
                }
                for kx in 0..k {
                    let ix = (q * spec.stride + kx * spec.dilation) as isize
                        - spec.padding as isize;
                    row[j] = if in_row && ix >= 0 && ix < xs.w as isize {
                        xd[xs.idx(n, ic, iy as usize, ix as usize)]
                    } else {
                        T::ZERO
                    };
                    j += 1;
                }
            }
        }
    });
}

/// Eight-way striped dot product. The stripe layout pins the floating-point
/// evaluation order in source, so the result is identical for any thread
/// count or SIMD width while still leaving the lanes free to vectorize.
#[inline]
pub(crate) fn dot_striped<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let mut acc = [T::ZERO; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (ao, bo) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += ao[l] * bo[l];
        }
    }
    let mut s = T::ZERO;
    for v in acc {
        s += v;
    }
    for (&av, &bv) in ca.remainder().iter().zip(cb.remainder()) {
        s += av * bv;
    }
    s
}

/// im2col + matmul convolution. Bit-for-bit deterministic: every output
/// element is one striped dot product over the direct path's column order.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (oh, ow) = check_conv_args(x, w, bias, spec)?;
    let xs = x.shape();
    let ws = w.shape();
    let (out_c, cg, k) = (ws.n, ws.c, spec.kernel);
    let ocg = out_c / spec.groups;
    let kk = cg * k * k;
    let rows = oh * ow;
    let mut y = Tensor::zeros(Shape::new(xs.n, out_c, oh, ow));
    let wd = w.data();

    let run_image = |n: usize, y_img: &mut [T], cols: &mut Vec<T>| {
        for g in 0..spec.groups {
            im2col_image(x, n, g, cg, spec, oh, ow, &mut cols[..]);
            let planes = &mut y_img[g * ocg * rows..(g + 1) * ocg * rows];
            planes
                .par_chunks_mut(rows)
                .enumerate()
                .for_each(|(oi, plane)| {
                    let o = g * ocg + oi;
                    let wrow = &wd[o * kk..(o + 1) * kk];
                    let b = bias.map(|b| b.data()[o]).unwrap_or(T::ZERO);
                    for (r, out) in plane.iter_mut().enumerate() {
                        let row = &cols[r * kk..(r + 1) * kk];
                        *out = dot_striped(wrow, row) + b;
                    }
                });
        }
    };

    let slab = out_c * rows;
    if xs.n > 1 {
        let yd = y.data_mut();
        yd.par_chunks_mut(slab).enumerate().for_each(|(n, y_img)| {
            let mut cols = vec![T::ZERO; rows * kk];
            run_image(n, y_img, &mut cols);
        });
    } else {
        let mut cols = vec![T::ZERO; rows * kk];
        run_image(0, &mut y.data_mut()[..slab], &mut cols);
    }
    Ok(y)
}

/// Gradients returned by [`conv2d_backward`].
pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub w: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Vector-Jacobian products of [`conv2d`] for input, weight and (optionally)
/// bias. Deterministic: each gradient element is reduced sequentially.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
    want_bias: bool,
) -> Result<ConvGrads<T>> {
    let (oh, ow) = check_conv_args(x, w, None, spec)?;
    let xs = x.shape();
    let ws = w.shape();
    let gs = grad_out.shape();
    if gs != Shape::new(xs.n, ws.n, oh, ow) {
        shape_err!(
            "grad_out shape {} does not match conv output ({}, {}, {}, {})",
            gs,
            xs.n,
            ws.n,
            oh,
            ow
        );
    }
    let (out_c, cg, k) = (ws.n, ws.c, spec.kernel);
    let ocg = out_c / spec.groups;
    let kk = cg * k * k;
    let rows = oh * ow;
    let god = grad_out.data();

    // Whole-batch column matrix per group: rebuilt once, reused by both the
    // weight and the input gradients.
    let mut grad_w = Tensor::zeros(ws);
    let mut grad_x = Tensor::zeros(xs);
    let mut cols = vec![T::ZERO; xs.n * rows * kk];
    for g in 0..spec.groups {
        cols.par_chunks_mut(rows * kk)
            .enumerate()
            .for_each(|(n, c)| im2col_image(x, n, g, cg, spec, oh, ow, c));

        // grad_w[o] = sum over images and positions of grad_out * cols.
        // Filters are updated in blocks of eight so each column row loaded
        // from memory feeds eight accumulators while it is hot in cache.
        const OBLK: usize = 8;
        grad_w.data_mut()[g * ocg * kk..(g + 1) * ocg * kk]
            .par_chunks_mut(OBLK * kk)
            .enumerate()
            .for_each(|(blk, wblock)| {
                let o0 = g * ocg + blk * OBLK;
                for n in 0..xs.n {
                    let gbase = (n * out_c + o0) * rows;
                    let cbase = n * rows * kk;
                    for r in 0..rows {
                        let row = &cols[cbase + r * kk..cbase + (r + 1) * kk];
                        for (b, wrow) in wblock.chunks_exact_mut(kk).enumerate() {
                            let gv = god[gbase + b * rows + r];
                            if gv == T::ZERO {
                                continue;
                            }
                            for (wv, &rv) in wrow.iter_mut().zip(row) {
                                *wv += gv * rv;
                            }
                        }
                    }
                }
            });

        // grad_cols = grad_out x W, then scatter back (col2im). Images are
        // independent, so the scatter parallelizes over the batch.
        let gxs = grad_x.shape();
        let img_len = xs.c * xs.h * xs.w;
        grad_x
            .data_mut()
            .par_chunks_mut(img_len)
            .enumerate()
            .for_each(|(n, gx_img)| {
                let mut grow = vec![T::ZERO; kk];
                for r in 0..rows {
                    let p = r / ow;
                    let q = r % ow;
                    grow.fill(T::ZERO);
                    for oi in 0..ocg {
                        let o = g * ocg + oi;
                        let gv = god[((n * out_c + o) * oh + p) * ow + q];
                        if gv == T::ZERO {
                            continue;
                        }
                        let wrow = &w.data()[o * kk..(o + 1) * kk];
                        for (gw, &wv) in grow.iter_mut().zip(wrow) {
                            *gw += gv * wv;
                        }
                    }
                    let ix0 = (q * spec.stride) as isize - spec.padding as isize;
                    let mut j = 0;
                    for c in 0..cg {
                        let ic = g * cg + c;
                        for ky in 0..k {
                            let iy = (p * spec.stride + ky * spec.dilation) as isize
                                - spec.padding as isize;
                            let in_row = iy >= 0 && iy < xs.h as isize;
                            if in_row
                                && spec.dilation == 1
                                && ix0 >= 0
                                && ix0 as usize + k <= xs.w
                            {
                                let base = gxs.idx(0, ic, iy as usize, ix0 as usize);
                                for (gx, &gw) in
                                    gx_img[base..base + k].iter_mut().zip(&grow[j..j + k])
                                {
                                    *gx += gw;
                                }
                                j += k;
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (q * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if in_row && ix >= 0 && ix < xs.w as isize {
                                    gx_img[gxs.idx(0, ic, iy as usize, ix as usize)] += grow[j];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            });
    }

    let bias = if want_bias {
        let mut gb = Tensor::zeros(Shape::new(out_c, 1, 1, 1));
        gb.data_mut()
            .par_iter_mut()
            .enumerate()
            .for_each(|(o, out)| {
                let mut acc = T::ZERO;
                for n in 0..xs.n {
                    let plane = &god[(n * out_c + o) * rows..(n * out_c + o + 1) * rows];
                    for &v in plane {
                        acc += v;
                    }
                }
                *out = acc;
            });
        Some(gb)
    } else {
        None
    };

    Ok(ConvGrads {
        x: grad_x,
        w: grad_w,
        bias,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

/// Output of [`pool2x2`]. Max pooling records which of the four window slots
/// won (first maximum in scan order on ties) so the backward pass can route
/// gradients without re-scanning.
pub struct Pool2x2<T> {
    pub y: Tensor<T>,
    argmax: Option<Vec<u8>>,
    in_shape: Shape,
    mode: PoolMode,
}

/// 2x2 pooling with stride 2. Odd spatial sizes are rejected rather than
/// silently truncated.
pub fn pool2x2<T: Scalar>(x: &Tensor<T>, mode: PoolMode) -> Result<Pool2x2<T>> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        shape_err!("pool2x2 needs even spatial dims, got {}", s);
    }
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut argmax = match mode {
        PoolMode::Max => Some(vec![0u8; y.len()]),
        PoolMode::Avg => None,
    };
    let quarter = T::from_f64(0.25);
    let xd = x.data();
    let out = y.data_mut();
    for n in 0..s.n {
        for c in 0..s.c {
            for p in 0..oh {
                for q in 0..ow {
                    let oidx = ((n * s.c + c) * oh + p) * ow + q;
                    match mode {
                        PoolMode::Max => {
                            let mut best = T::from_f64(f64::NEG_INFINITY);
                            let mut slot = 0u8;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let v = xd[s.idx(n, c, 2 * p + dy, 2 * q + dx)];
                                    if v > best {
                                        best = v;
                                        slot = (dy * 2 + dx) as u8;
                                    }
                                }
                            }
                            out[oidx] = best;
                            argmax.as_mut().unwrap()[oidx] = slot;
                        }
                        PoolMode::Avg => {
                            let mut acc = T::ZERO;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    acc += xd[s.idx(n, c, 2 * p + dy, 2 * q + dx)];
                                }
                            }
                            out[oidx] = acc * quarter;
                        }
                    }
                }
            }
        }
    }
    Ok(Pool2x2 {
        y,
        argmax,
        in_shape: s,
        mode,
    })
}

impl<T: Scalar> Pool2x2<T> {
    pub fn backward(&self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        if grad_out.shape() != self.y.shape() {
            shape_err!(
                "pool backward grad {} vs output {}",
                grad_out.shape(),
                self.y.shape()
            );
        }
        let s = self.in_shape;
        let os = self.y.shape();
        let mut gx = Tensor::zeros(s);
        let gd = grad_out.data();
        let quarter = T::from_f64(0.25);
        let gxd = gx.data_mut();
        for n in 0..s.n {
            for c in 0..s.c {
                for p in 0..os.h {
                    for q in 0..os.w {
                        let oidx = ((n * s.c + c) * os.h + p) * os.w + q;
                        let g = gd[oidx];
                        match self.mode {
                            PoolMode::Max => {
                                let slot = self.argmax.as_ref().unwrap()[oidx] as usize;
                                let (dy, dx) = (slot / 2, slot % 2);
                                gxd[s.idx(n, c, 2 * p + dy, 2 * q + dx)] += g;
                            }
                            PoolMode::Avg => {
                                let gq = g * quarter;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        gxd[s.idx(n, c, 2 * p + dy, 2 * q + dx)] += gq;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

/// Source coordinate mapping for bilinear resize without corner alignment:
/// `src = (dst + 0.5) * in/out - 0.5`, clamped. Returns the two source
/// indices and the weight of the second one.
fn bilinear_axis(dst: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = (dst as f64 + 0.5) * scale - 0.5;
    let src = src.clamp(0.0, (in_len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(in_len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear upsampling (half-pixel centers, i.e. `align_corners = false`).
pub fn upsample_bilinear<T: Scalar>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if out_h < s.h || out_w < s.w || out_h == 0 || out_w == 0 {
        shape_err!("upsample target {}x{} below input {}", out_h, out_w, s);
    }
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, out_h, out_w));
    let xd = x.data();
    let plane_out = out_h * out_w;
    y.data_mut()
        .par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(nc, plane)| {
            let base = nc * s.h * s.w;
            for p in 0..out_h {
                let (y0, y1, fy) = bilinear_axis(p, s.h, out_h);
                for q in 0..out_w {
                    let (x0, x1, fx) = bilinear_axis(q, s.w, out_w);
                    let v00 = xd[base + y0 * s.w + x0].to_f64();
                    let v01 = xd[base + y0 * s.w + x1].to_f64();
                    let v10 = xd[base + y1 * s.w + x0].to_f64();
                    let v11 = xd[base + y1 * s.w + x1].to_f64();
                    let top = v00 * (1.0 - fx) + v01 * fx;
                    let bot = v10 * (1.0 - fx) + v11 * fx;
                    plane[p * out_w + q] = T::from_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        });
    Ok(y)
}

/// Adjoint of [`upsample_bilinear`]: scatters each output gradient onto its
/// four source taps with the interpolation weights.
pub fn upsample_bilinear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    let mut gx = Tensor::zeros(Shape::new(gs.n, gs.c, in_h, in_w));
    let gd = grad_out.data();
    let plane_in = in_h * in_w;
    let plane_out = gs.h * gs.w;
    gx.data_mut()
        .par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(nc, plane)| {
            let base = nc * plane_out;
            for p in 0..gs.h {
                let (y0, y1, fy) = bilinear_axis(p, in_h, gs.h);
                for q in 0..gs.w {
                    let (x0, x1, fx) = bilinear_axis(q, in_w, gs.w);
                    let g = gd[base + p * gs.w + q].to_f64();
                    plane[y0 * in_w + x0] += T::from_f64(g * (1.0 - fy) * (1.0 - fx));
                    plane[y0 * in_w + x1] += T::from_f64(g * (1.0 - fy) * fx);
                    plane[y1 * in_w + x0] += T::from_f64(g * fy * (1.0 - fx));
                    plane[y1 * in_w + x1] += T::from_f64(g * fy * fx);
                }
            }
        });
    Ok(gx)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.maxs(T::ZERO))
}

pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip(x, |g, v| if v > T::ZERO { g } else { T::ZERO })
}

/// Per-channel parametric ReLU: `x` if `x >= 0`, else `alpha[c] * x`.
/// `alpha` has shape `(c, 1, 1, 1)`.
pub fn prelu<T: Scalar>(x: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if alpha.shape() != Shape::new(s.c, 1, 1, 1) {
        shape_err!("prelu alpha {} for input {}", alpha.shape(), s);
    }
    let mut y = x.clone();
    let plane = s.h * s.w;
    let ad = alpha.data();
    for nc in 0..s.n * s.c {
        let a = ad[nc % s.c];
        for v in &mut y.data_mut()[nc * plane..(nc + 1) * plane] {
            if *v < T::ZERO {
                *v *= a;
            }
        }
    }
    Ok(y)
}

/// Gradients of [`prelu`] for the input and the per-channel slopes.
pub fn prelu_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    alpha: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if grad_out.shape() != s {
        shape_err!("prelu backward grad {} vs input {}", grad_out.shape(), s);
    }
    let mut gx = Tensor::zeros(s);
    let mut ga = Tensor::zeros(alpha.shape());
    let plane = s.h * s.w;
    let (xd, gd, ad) = (x.data(), grad_out.data(), alpha.data());
    for n in 0..s.n {
        for c in 0..s.c {
            let a = ad[c];
            let base = (n * s.c + c) * plane;
            let mut acc = T::ZERO;
            for i in base..base + plane {
                if xd[i] >= T::ZERO {
                    gx.data_mut()[i] = gd[i];
                } else {
                    gx.data_mut()[i] = gd[i] * a;
                    acc += gd[i] * xd[i];
                }
            }
            ga.data_mut()[c] += acc;
        }
    }
    Ok((gx, ga))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::ONE / (T::ONE + (-v).exp()))
}

/// Backward through sigmoid given the *output* `y`.
pub fn sigmoid_backward<T: Scalar>(grad_out: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip(y, |g, v| g * v * (T::ONE - v))
}

/// Mean over the spatial extent, per image and channel -> `(n, c, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let plane = s.h * s.w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut y = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for nc in 0..s.n * s.c {
        let mut acc = T::ZERO;
        for &v in &x.data()[nc * plane..(nc + 1) * plane] {
            acc += v;
        }
        y.data_mut()[nc] = acc * inv;
    }
    y
}

pub fn global_avg_pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    in_shape: Shape,
) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    if gs != Shape::new(in_shape.n, in_shape.c, 1, 1) {
        shape_err!("gap backward grad {} for input {}", gs, in_shape);
    }
    let plane = in_shape.h * in_shape.w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut gx = Tensor::zeros(in_shape);
    for nc in 0..in_shape.n * in_shape.c {
        let g = grad_out.data()[nc] * inv;
        for v in &mut gx.data_mut()[nc * plane..(nc + 1) * plane] {
            *v = g;
        }
    }
    Ok(gx)
}
