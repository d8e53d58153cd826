//! 1-bit tensors and binary convolutions.
//!
//! Values are {−1, +1}, stored packed: bit 1 ↔ +1, bit 0 ↔ −1, flat NCHW
//! order, little-endian 64-bit words, bit 0 = first element. A ±1 dot
//! product of n bits is `2·popcount(XNOR(a, b)) − n`, which is *exactly*
//! the float product — the packed kernels here are required to match a ±1
//! float evaluation with integer equality, borders included.
//!
//! Binarization follows `sign(x) = +1 if x >= 0 else −1` — the boundary is
//! inclusive, so `sign(0) = +1`, and every oracle in the test suite shares
//! that convention. Two convolution flavors:
//!
//! - [`bconv`]: activations binarized against one global threshold τ.
//! - [`bipdc`]: each probe pair's *difference* is binarized, so the
//!   effective threshold at every tap is the neighboring pixel. No folded
//!   (re-parameterized) form exists — Sign sits between the difference and
//!   the weight — and none is offered.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::ops::ConvSpec;
use crate::pdc::{Offset, ProbePattern};
use crate::tensor::{Scalar, Shape, Tensor};

/// Elementwise binarization against a threshold: ±1 as floats.
pub fn sign<T: Scalar>(x: &Tensor<T>, tau: T) -> Tensor<T> {
    x.map(|v| if v >= tau { T::ONE } else { -T::ONE })
}

/// Straight-through estimator backward: pass the gradient where the
/// pre-activation sits inside the clip window, zero it elsewhere.
pub fn ste_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    pre_activation: &Tensor<T>,
    clip: T,
) -> Result<Tensor<T>> {
    grad_out.zip(pre_activation, |g, p| {
        if p.abs() <= clip {
            g
        } else {
            T::ZERO
        }
    })
}

/// Packed ±1 tensor. Bits beyond the logical length are kept zero so whole
/// trailing words can be fed to popcount unmasked.
#[derive(Clone, Debug, PartialEq)]
pub struct BitTensor {
    shape: Shape,
    words: Vec<u64>,
}

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl BitTensor {
    /// Binarize `x − tau` (bit set ⇔ `x >= tau`).
    pub fn pack<T: Scalar>(x: &Tensor<T>, tau: T) -> BitTensor {
        let shape = x.shape();
        let mut words = vec![0u64; words_for(shape.len())];
        for (i, &v) in x.data().iter().enumerate() {
            if v >= tau {
                words[i / 64] |= 1u64 << (i % 64);
            }
        }
        BitTensor { shape, words }
    }

    pub fn zeros(shape: Shape) -> BitTensor {
        BitTensor {
            shape,
            words: vec![0u64; words_for(shape.len())],
        }
    }

    /// Rebuild from raw words (e.g. deserialization). Trailing pad bits are
    /// masked off rather than trusted.
    pub fn from_words(shape: Shape, mut words: Vec<u64>) -> Result<BitTensor> {
        if words.len() != words_for(shape.len()) {
            shape_err!(
                "bit tensor {} needs {} words, got {}",
                shape,
                words_for(shape.len()),
                words.len()
            );
        }
        let tail = shape.len() % 64;
        if tail != 0 {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
        Ok(BitTensor { shape, words })
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, v: bool) {
        if v {
            self.words[i / 64] |= 1u64 << (i % 64);
        } else {
            self.words[i / 64] &= !(1u64 << (i % 64));
        }
    }

    /// Expand back to ±1 floats.
    pub fn unpack<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(self.shape);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = if self.get(i) { T::ONE } else { -T::ONE };
        }
        t
    }
}

/// ±1 dot product over `n_bits` packed bits. Both slices must already have
/// their pad bits zeroed; the last word is masked here anyway for safety.
#[inline]
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n_bits: usize) -> i64 {
    debug_assert_eq!(a.len(), b.len());
    let mut count: u32 = 0;
    let full = n_bits / 64;
    for i in 0..full {
        count += (!(a[i] ^ b[i])).count_ones();
    }
    let tail = n_bits % 64;
    if tail != 0 {
        let mask = (1u64 << tail) - 1;
        count += ((!(a[full] ^ b[full])) & mask).count_ones();
    }
    2 * count as i64 - n_bits as i64
}

/// Geometry plus binarization parameters of a binary convolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BinaryConvSpec {
    pub conv: ConvSpec,
    /// Global activation threshold τ of the vanilla binary conv.
    pub threshold: f64,
    /// STE clip window half-width (gradient passes where |pre| <= clip).
    pub ste_clip: f64,
    pub scale_mode: ScaleMode,
}

/// Optional output scaling. `PerChannelMeanAbs` multiplies each output
/// channel by the mean |w| of its latent full-precision filter; it is an
/// ablation knob and off by default (the layer applies it — the packed
/// kernels below never see latent weights).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ScaleMode {
    #[default]
    None,
    PerChannelMeanAbs,
}

impl BinaryConvSpec {
    pub fn new(conv: ConvSpec) -> Self {
        BinaryConvSpec {
            conv,
            threshold: 0.0,
            ste_clip: 1.0,
            scale_mode: ScaleMode::None,
        }
    }

    pub fn threshold(mut self, tau: f64) -> Self {
        self.threshold = tau;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.ste_clip > 0.0) {
            shape_err!("ste_clip must be positive, got {}", self.ste_clip);
        }
        Ok(())
    }
}

/// Repack each output filter of a weight BitTensor into its own word-aligned
/// row of `row_bits` bits, so window rows can be XNOR'ed against it.
fn aligned_weight_rows(wb: &BitTensor, out_c: usize, row_bits: usize) -> Vec<u64> {
    let wpr = words_for(row_bits);
    let mut rows = vec![0u64; out_c * wpr];
    for o in 0..out_c {
        for j in 0..row_bits {
            if wb.get(o * row_bits + j) {
                rows[o * wpr + j / 64] |= 1u64 << (j % 64);
            }
        }
    }
    rows
}

/// Vanilla binary convolution on packed operands.
///
/// `xb` is the already-binarized activation (bit = `x >= τ`); `wb` holds
/// binarized filters `(outC, inC/groups, k, k)`. Zero padding happens
/// *before* binarization, so padded taps contribute `Sign(0 − τ)`.
pub fn bconv<T: Scalar>(xb: &BitTensor, wb: &BitTensor, spec: &BinaryConvSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let cs = spec.conv;
    let xs = xb.shape();
    let ws = wb.shape();
    if ws.h != cs.kernel || ws.w != cs.kernel {
        shape_err!("binary weights {} vs kernel {}", ws, cs.kernel);
    }
    if xs.c % cs.groups != 0 || ws.n % cs.groups != 0 || ws.c != xs.c / cs.groups {
        shape_err!("bconv channel mismatch: {} vs {} groups {}", xs, ws, cs.groups);
    }
    let (oh, ow) = cs.out_hw(xs.h, xs.w)?;
    let (out_c, cg, k) = (ws.n, ws.c, cs.kernel);
    let ocg = out_c / cs.groups;
    let row_bits = cg * k * k;
    let wpr = words_for(row_bits);
    let wrows = aligned_weight_rows(wb, out_c, row_bits);
    let pad_bit = 0.0 >= spec.threshold;

    let mut y = Tensor::zeros(Shape::new(xs.n, out_c, oh, ow));
    let rows = oh * ow;
    let img_len = out_c * rows;
    y.data_mut()
        .par_chunks_mut(img_len)
        .enumerate()
        .for_each(|(n, y_img)| {
            let mut row = vec![0u64; wpr];
            for p in 0..oh {
                for q in 0..ow {
                    for g in 0..cs.groups {
                        row.fill(0);
                        let mut j = 0;
                        for c in 0..cg {
                            let ic = g * cg + c;
                            for ky in 0..k {
                                let iy = (p * cs.stride + ky * cs.dilation) as isize
                                    - cs.padding as isize;
                                for kx in 0..k {
                                    let ix = (q * cs.stride + kx * cs.dilation) as isize
                                        - cs.padding as isize;
                                    let bit = if iy >= 0
                                        && ix >= 0
                                        && iy < xs.h as isize
                                        && ix < xs.w as isize
                                    {
                                        xb.get(xs.idx(n, ic, iy as usize, ix as usize))
                                    } else {
                                        pad_bit
                                    };
                                    if bit {
                                        row[j / 64] |= 1u64 << (j % 64);
                                    }
                                    j += 1;
                                }
                            }
                        }
                        for oi in 0..ocg {
                            let o = g * ocg + oi;
                            let dot = xnor_popcount_dot(
                                &row,
                                &wrows[o * wpr..(o + 1) * wpr],
                                row_bits,
                            );
                            y_img[(o * oh + p) * ow + q] = T::from_f64(dot as f64);
                        }
                    }
                }
            }
        });
    Ok(y)
}

#[inline]
fn sample_or_zero<T: Scalar>(x: &Tensor<T>, n: usize, c: usize, cy: isize, cx: isize, off: Offset) -> T {
    let s = x.shape();
    let y = cy + off.0 as isize;
    let xx = cx + off.1 as isize;
    if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
        T::ZERO
    } else {
        x.at(n, c, y as usize, xx as usize)
    }
}

/// Flat index of `(n, c, y, 0)`, or `None` when the row is out of bounds.
fn row_base(s: &Shape, n: usize, c: usize, y: isize) -> Option<usize> {
    if y < 0 || y >= s.h as isize {
        None
    } else {
        Some(s.idx(n, c, y as usize, 0))
    }
}

/// Copy one shifted input row into `out`: `out[q] = x[n, c, y, q*stride +
/// off]`, with zeros where the source coordinate leaves the image. Stride-1
/// rows reduce to a single slice copy between the zero-padded edges.
fn gather_row<T: Scalar>(x: &Tensor<T>, n: usize, c: usize, y: isize, off: isize, stride: usize, out: &mut [T]) {
    let s = x.shape();
    let ow = out.len();
    let base = match row_base(&s, n, c, y) {
        Some(b) => b,
        None => {
            out.fill(T::ZERO);
            return;
        }
    };
    let xrow = &x.data()[base..base + s.w];
    if stride == 1 {
        let q0 = (-off).clamp(0, ow as isize) as usize;
        let q1 = (s.w as isize - off).clamp(q0 as isize, ow as isize) as usize;
        out[..q0].fill(T::ZERO);
        out[q0..q1].copy_from_slice(&xrow[(q0 as isize + off) as usize..(q1 as isize + off) as usize]);
        out[q1..].fill(T::ZERO);
        return;
    }
    for (q, v) in out.iter_mut().enumerate() {
        let sx = (q * stride) as isize + off;
        *v = if sx >= 0 && sx < s.w as isize {
            xrow[sx as usize]
        } else {
            T::ZERO
        };
    }
}

/// Binary pixel-difference convolution on packed weights.
///
/// The input stays real-valued: each probe pair is binarized as
/// `sign(x[sampled] − x[reference])`, i.e. the threshold is the neighboring
/// pixel itself. `wb` is `(outC, inC/groups, 1, m)`. Output values are the
/// integer ±1 dot products.
pub fn bipdc<T: Scalar>(
    x: &Tensor<T>,
    wb: &BitTensor,
    pattern: &ProbePattern,
    spec: &BinaryConvSpec,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let cs = spec.conv;
    if cs.kernel != pattern.window {
        shape_err!("spec kernel {} vs pattern window {}", cs.kernel, pattern.window);
    }
    let xs = x.shape();
    let ws = wb.shape();
    let m = pattern.m();
    if ws.h != 1 || ws.w != m {
        shape_err!("binary pair weights {} must be (outC, inC/groups, 1, {})", ws, m);
    }
    if xs.c % cs.groups != 0 || ws.n % cs.groups != 0 || ws.c != xs.c / cs.groups {
        shape_err!("bipdc channel mismatch: {} vs {} groups {}", xs, ws, cs.groups);
    }
    let (oh, ow) = cs.out_hw(xs.h, xs.w)?;
    let (out_c, cg) = (ws.n, ws.c);
    let ocg = out_c / cs.groups;
    let row_bits = cg * m;
    let wpr = words_for(row_bits);
    let wrows = aligned_weight_rows(wb, out_c, row_bits);
    let r = pattern.radius() as isize;

    let mut y = Tensor::zeros(Shape::new(xs.n, out_c, oh, ow));
    let rows = oh * ow;
    let img_len = out_c * rows;
    y.data_mut()
        .par_chunks_mut(img_len)
        .enumerate()
        .for_each(|(n, y_img)| {
            let mut row = vec![0u64; wpr];
            for p in 0..oh {
                for q in 0..ow {
                    let cy = (p * cs.stride) as isize - cs.padding as isize + r;
                    let cx = (q * cs.stride) as isize - cs.padding as isize + r;
                    for g in 0..cs.groups {
                        row.fill(0);
                        let mut j = 0;
                        for c in 0..cg {
                            let ic = g * cg + c;
                            for &(so, ro) in &pattern.pairs {
                                let diff = sample_or_zero(x, n, ic, cy, cx, so)
                                    - sample_or_zero(x, n, ic, cy, cx, ro);
                                if diff >= T::ZERO {
                                    row[j / 64] |= 1u64 << (j % 64);
                                }
                                j += 1;
                            }
                        }
                        for oi in 0..ocg {
                            let o = g * ocg + oi;
                            let dot = xnor_popcount_dot(
                                &row,
                                &wrows[o * wpr..(o + 1) * wpr],
                                row_bits,
                            );
                            y_img[(o * oh + p) * ow + q] = T::from_f64(dot as f64);
                        }
                    }
                }
            }
        });
    Ok(y)
}

/// Float-path twin of [`bipdc`] on ±1 weight tensors; exactly equal to the
/// packed path (the sums are small integers). The training layers use this
/// together with [`bipdc_backward`].
pub fn bipdc_float<T: Scalar>(
    x: &Tensor<T>,
    sw: &Tensor<T>,
    pattern: &ProbePattern,
    spec: &BinaryConvSpec,
) -> Result<Tensor<T>> {
    let wb = BitTensor::pack(sw, T::ZERO);
    bipdc(x, &wb, pattern, spec)
}

/// Gradients of the Bi-PDC op w.r.t. the real input (STE through each
/// pair's sign with the clip window applied to the *difference*) and the
/// ±1 weights (plain inner-product gradient; latent-weight clipping is the
/// caller's job).
pub fn bipdc_backward<T: Scalar>(
    x: &Tensor<T>,
    sw: &Tensor<T>,
    pattern: &ProbePattern,
    spec: &BinaryConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    spec.validate()?;
    let cs = spec.conv;
    let xs = x.shape();
    let ws = sw.shape();
    let (oh, ow) = cs.out_hw(xs.h, xs.w)?;
    if grad_out.shape() != Shape::new(xs.n, ws.n, oh, ow) {
        shape_err!("bipdc backward grad shape {}", grad_out.shape());
    }
    let (out_c, cg) = (ws.n, ws.c);
    let ocg = out_c / cs.groups;
    let m = pattern.m();
    let r = pattern.radius() as isize;
    let clip = T::from_f64(spec.ste_clip);
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    let wd = sw.data();
    let god = grad_out.data();
    let rows = oh * ow;
    // Plane-at-a-time scratch: for one (channel, pair) the sampled and
    // reference rows, the resulting ±1 bits, and the grad-sum every output
    // channel routes back through the straight-through estimator.
    let mut srow = vec![T::ZERO; ow];
    let mut rrow = vec![T::ZERO; ow];
    let mut diffs = vec![T::ZERO; rows];
    let mut bits = vec![T::ZERO; rows];
    let mut gsum = vec![T::ZERO; rows];
    for n in 0..xs.n {
        let img_go = &god[n * out_c * rows..(n + 1) * out_c * rows];
        for g in 0..cs.groups {
            for c in 0..cg {
                let ic = g * cg + c;
                for (i, &(so, ro)) in pattern.pairs.iter().enumerate() {
                    for p in 0..oh {
                        let cy = (p * cs.stride) as isize - cs.padding as isize + r;
                        gather_row(x, n, ic, cy + so.0 as isize, so.1 as isize - cs.padding as isize + r, cs.stride, &mut srow);
                        gather_row(x, n, ic, cy + ro.0 as isize, ro.1 as isize - cs.padding as isize + r, cs.stride, &mut rrow);
                        let drow = &mut diffs[p * ow..(p + 1) * ow];
                        let brow = &mut bits[p * ow..(p + 1) * ow];
                        for q in 0..ow {
                            let d = srow[q] - rrow[q];
                            drow[q] = d;
                            brow[q] = if d >= T::ZERO { T::ONE } else { -T::ONE };
                        }
                    }
                    gsum.fill(T::ZERO);
                    for oi in 0..ocg {
                        let o = g * ocg + oi;
                        let gop = &img_go[o * rows..(o + 1) * rows];
                        let wi = (o * cg + c) * m + i;
                        gwd[wi] += crate::ops::dot_striped(gop, &bits);
                        let wv = wd[wi];
                        for (gs, &gv) in gsum.iter_mut().zip(gop) {
                            *gs += wv * gv;
                        }
                    }
                    for p in 0..oh {
                        let cy = (p * cs.stride) as isize - cs.padding as isize + r;
                        let (sy, ry) = (cy + so.0 as isize, cy + ro.0 as isize);
                        let sbase = row_base(&xs, n, ic, sy);
                        let rbase = row_base(&xs, n, ic, ry);
                        for q in 0..ow {
                            let idx = p * ow + q;
                            if diffs[idx].abs() > clip {
                                continue;
                            }
                            let cx = (q * cs.stride) as isize - cs.padding as isize + r;
                            if let Some(base) = sbase {
                                let sx = cx + so.1 as isize;
                                if sx >= 0 && sx < xs.w as isize {
                                    gxd[base + sx as usize] += gsum[idx];
                                }
                            }
                            if let Some(base) = rbase {
                                let rx = cx + ro.1 as isize;
                                if rx >= 0 && rx < xs.w as isize {
                                    gxd[base + rx as usize] -= gsum[idx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}
