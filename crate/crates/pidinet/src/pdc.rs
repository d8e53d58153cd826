//! Pixel-difference convolution (PDC).
//!
//! A PDC kernel multiplies *differences* of pixel pairs instead of raw
//! intensities: `y = Σ_i w_i · (x_i − x_i')`, where the pair set is a fixed
//! probe pattern around each window. Three patterns are provided:
//!
//! - **Central** (`C`): each of the 8 ring neighbors against the center.
//! - **Angular** (`A`): consecutive ring neighbors against each other,
//!   one closed counter-clockwise cycle.
//! - **Radial** (`R`): the radius-2 ring of a 5×5 window against the
//!   radius-1 ring, along the 8 compass directions.
//!
//! Because the pair sum is linear, any PDC folds exactly into a vanilla
//! kernel (`reparameterize`): scatter `+w_i` at the sampled offset and
//! `−w_i` at the reference offset. Both evaluation paths are kept — the
//! eager pair sum as the semantic reference, the folded kernel for speed —
//! and they must agree to float rounding.

use crate::error::{shape_err, Error, Result};
use crate::ops::{conv2d, conv2d_backward, ConvSpec};
use crate::tensor::{Scalar, Shape, Tensor};

/// Block token: three difference patterns plus vanilla convolution.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum PdcKind {
    Central,
    Angular,
    Radial,
    Vanilla,
}

impl PdcKind {
    pub fn token(self) -> char {
        match self {
            PdcKind::Central => 'C',
            PdcKind::Angular => 'A',
            PdcKind::Radial => 'R',
            PdcKind::Vanilla => 'V',
        }
    }

    pub fn from_token(t: char) -> Option<Self> {
        match t {
            'C' => Some(PdcKind::Central),
            'A' => Some(PdcKind::Angular),
            'R' => Some(PdcKind::Radial),
            'V' => Some(PdcKind::Vanilla),
            _ => None,
        }
    }
}

/// `(dy, dx)` relative to the window center; y grows downward.
pub type Offset = (i32, i32);

/// The 3×3 ring in counter-clockwise cycle order, starting at the top-left
/// corner. This single ordering fixes the angular cycle, the radial
/// directions, and the bit order of the LBP codes in the analysis module.
pub const RING: [Offset; 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
];

/// An ordered set of (sampled, reference) offset pairs plus the window size
/// they live in.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProbePattern {
    pub kind: PdcKind,
    pub pairs: Vec<(Offset, Offset)>,
    pub window: usize,
}

impl ProbePattern {
    /// The pattern for a difference kind. `Vanilla` has no pair set.
    pub fn of(kind: PdcKind) -> Option<ProbePattern> {
        let pairs: Vec<(Offset, Offset)> = match kind {
            PdcKind::Central => RING.iter().map(|&o| (o, (0, 0))).collect(),
            PdcKind::Angular => (0..8).map(|i| (RING[i], RING[(i + 1) % 8])).collect(),
            PdcKind::Radial => RING
                .iter()
                .map(|&(dy, dx)| ((2 * dy, 2 * dx), (dy, dx)))
                .collect(),
            PdcKind::Vanilla => return None,
        };
        let window = match kind {
            PdcKind::Radial => 5,
            _ => 3,
        };
        Some(ProbePattern {
            kind,
            pairs,
            window,
        })
    }

    /// Number of pairs (the `m` of the weight table).
    #[inline]
    pub fn m(&self) -> usize {
        self.pairs.len()
    }

    #[inline]
    pub fn radius(&self) -> i32 {
        (self.window as i32 - 1) / 2
    }

    /// Every offset must fit the window and pairs must be distinct.
    pub fn validate(&self) -> Result<()> {
        let r = self.radius();
        if self.m() > self.window * self.window {
            shape_err!("pattern has {} pairs for a {} window", self.m(), self.window);
        }
        for (i, &(s, rf)) in self.pairs.iter().enumerate() {
            for &(dy, dx) in [&s, &rf] {
                if dy.abs() > r || dx.abs() > r {
                    shape_err!("pattern offset ({dy},{dx}) outside window {}", self.window);
                }
            }
            if self.pairs[..i].contains(&(s, rf)) {
                shape_err!("duplicate pair {:?}", (s, rf));
            }
        }
        Ok(())
    }
}

/// Check a pair-weight table `(outC, inC/groups, 1, m)` against a pattern
/// and a conv spec, returning `(out_c, cg)`.
fn check_pdc_args<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pattern: &ProbePattern,
    spec: &ConvSpec,
) -> Result<(usize, usize)> {
    if spec.kernel != pattern.window {
        shape_err!(
            "conv spec kernel {} does not match pattern window {}",
            spec.kernel,
            pattern.window
        );
    }
    if spec.dilation != 1 {
        shape_err!("pixel-difference conv does not support dilation");
    }
    let ws = w.shape();
    if ws.h != 1 || ws.w != pattern.m() {
        shape_err!(
            "pair weights {} must be (outC, inC/groups, 1, {})",
            ws,
            pattern.m()
        );
    }
    let xs = x.shape();
    if xs.c % spec.groups != 0 || ws.n % spec.groups != 0 || ws.c != xs.c / spec.groups {
        shape_err!(
            "pdc channel mismatch: input {}, weights {}, groups {}",
            xs,
            ws,
            spec.groups
        );
    }
    Ok((ws.n, ws.c))
}

#[inline]
fn sample<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    c: usize,
    cy: isize,
    cx: isize,
    off: Offset,
) -> T {
    let s = x.shape();
    let y = cy + off.0 as isize;
    let xx = cx + off.1 as isize;
    if y < 0 || xx < 0 || y >= s.h as isize || xx >= s.w as isize {
        T::ZERO
    } else {
        x.at(n, c, y as usize, xx as usize)
    }
}

/// Eager pair-sum evaluation of a PDC: for every output location,
/// `Σ_c Σ_i w[o,c,i] · (x[sampled] − x[reference])` with zero padding.
///
/// This is the semantic reference; layers use [`pdc_forward_reparam`].
pub fn pdc_forward_pairs<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pattern: &ProbePattern,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (out_c, cg) = check_pdc_args(x, w, pattern, spec)?;
    let (oh, ow) = spec.out_hw(x.shape().h, x.shape().w)?;
    let xs = x.shape();
    let ws = w.shape();
    let ocg = out_c / spec.groups;
    let r = pattern.radius() as isize;
    let mut y = Tensor::zeros(Shape::new(xs.n, out_c, oh, ow));
    for n in 0..xs.n {
        for o in 0..out_c {
            let g = o / ocg;
            for p in 0..oh {
                for q in 0..ow {
                    let cy = (p * spec.stride) as isize - spec.padding as isize + r;
                    let cx = (q * spec.stride) as isize - spec.padding as isize + r;
                    let mut acc = T::ZERO;
                    for c in 0..cg {
                        let ic = g * cg + c;
                        for (i, &(so, ro)) in pattern.pairs.iter().enumerate() {
                            let diff = sample(x, n, ic, cy, cx, so) - sample(x, n, ic, cy, cx, ro);
                            acc += w.data()[ws.idx(o, c, 0, i)] * diff;
                        }
                    }
                    y.set(n, o, p, q, acc);
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of the pair-sum path w.r.t. input and pair weights.
pub fn pdc_pairs_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pattern: &ProbePattern,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (out_c, cg) = check_pdc_args(x, w, pattern, spec)?;
    let (oh, ow) = spec.out_hw(x.shape().h, x.shape().w)?;
    let xs = x.shape();
    let ws = w.shape();
    if grad_out.shape() != Shape::new(xs.n, out_c, oh, ow) {
        shape_err!("pdc backward grad shape {}", grad_out.shape());
    }
    let ocg = out_c / spec.groups;
    let r = pattern.radius() as isize;
    let mut gx = Tensor::zeros(xs);
    let mut gw = Tensor::zeros(ws);
    let scatter = |gx: &mut Tensor<T>, n: usize, c: usize, cy: isize, cx: isize, off: Offset, v: T| {
        let yy = cy + off.0 as isize;
        let xx = cx + off.1 as isize;
        if yy >= 0 && xx >= 0 && yy < xs.h as isize && xx < xs.w as isize {
            let i = xs.idx(n, c, yy as usize, xx as usize);
            gx.data_mut()[i] += v;
        }
    };
    for n in 0..xs.n {
        for o in 0..out_c {
            let g = o / ocg;
            for p in 0..oh {
                for q in 0..ow {
                    let gv = grad_out.at(n, o, p, q);
                    if gv == T::ZERO {
                        continue;
                    }
                    let cy = (p * spec.stride) as isize - spec.padding as isize + r;
                    let cx = (q * spec.stride) as isize - spec.padding as isize + r;
                    for c in 0..cg {
                        let ic = g * cg + c;
                        for (i, &(so, ro)) in pattern.pairs.iter().enumerate() {
                            let wi = w.data()[ws.idx(o, c, 0, i)];
                            scatter(&mut gx, n, ic, cy, cx, so, gv * wi);
                            scatter(&mut gx, n, ic, cy, cx, ro, -(gv * wi));
                            let diff = sample(x, n, ic, cy, cx, so) - sample(x, n, ic, cy, cx, ro);
                            gw.data_mut()[ws.idx(o, c, 0, i)] += gv * diff;
                        }
                    }
                }
            }
        }
    }
    Ok((gx, gw))
}

/// Fold pair weights into a vanilla kernel: `+w_i` at the sampled offset,
/// `−w_i` at the reference offset, collisions summed. The result always
/// sums to zero per spatial slice.
pub fn reparameterize<T: Scalar>(w: &Tensor<T>, pattern: &ProbePattern) -> Result<Tensor<T>> {
    let ws = w.shape();
    if ws.h != 1 || ws.w != pattern.m() {
        shape_err!("pair weights {} for pattern m={}", ws, pattern.m());
    }
    let k = pattern.window;
    let r = pattern.radius();
    let ks = Shape::new(ws.n, ws.c, k, k);
    let mut khat = Tensor::zeros(ks);
    for o in 0..ws.n {
        for c in 0..ws.c {
            for (i, &(so, ro)) in pattern.pairs.iter().enumerate() {
                let wi = w.data()[ws.idx(o, c, 0, i)];
                let si = ks.idx(o, c, (so.0 + r) as usize, (so.1 + r) as usize);
                khat.data_mut()[si] += wi;
                let ri = ks.idx(o, c, (ro.0 + r) as usize, (ro.1 + r) as usize);
                khat.data_mut()[ri] -= wi;
            }
        }
    }
    Ok(khat)
}

/// Adjoint of [`reparameterize`]: gather `grad_khat[sampled] −
/// grad_khat[reference]` per pair. Used to route conv weight gradients back
/// onto the pair weights during training.
pub fn reparameterize_backward<T: Scalar>(
    grad_khat: &Tensor<T>,
    pattern: &ProbePattern,
) -> Result<Tensor<T>> {
    let ks = grad_khat.shape();
    if ks.h != pattern.window || ks.w != pattern.window {
        shape_err!("kernel grad {} for window {}", ks, pattern.window);
    }
    let r = pattern.radius();
    let ws = Shape::new(ks.n, ks.c, 1, pattern.m());
    let mut gw = Tensor::zeros(ws);
    for o in 0..ks.n {
        for c in 0..ks.c {
            for (i, &(so, ro)) in pattern.pairs.iter().enumerate() {
                let gs = grad_khat.at(o, c, (so.0 + r) as usize, (so.1 + r) as usize);
                let gr = grad_khat.at(o, c, (ro.0 + r) as usize, (ro.1 + r) as usize);
                gw.data_mut()[ws.idx(o, c, 0, i)] = gs - gr;
            }
        }
    }
    Ok(gw)
}

/// Folded-kernel evaluation: `conv2d` with the re-parameterized weights.
pub fn pdc_forward_reparam<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pattern: &ProbePattern,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    check_pdc_args(x, w, pattern, spec)?;
    let khat = reparameterize(w, pattern)?;
    conv2d(x, &khat, None, spec)
}

/// Gradients of the folded path; exactly `conv2d_backward` plus the scatter
/// adjoint for the weights.
pub fn pdc_reparam_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    pattern: &ProbePattern,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pdc_args(x, w, pattern, spec)?;
    let khat = reparameterize(w, pattern)?;
    let grads = conv2d_backward(x, &khat, spec, grad_out, false)?;
    let gw = reparameterize_backward(&grads.w, pattern)?;
    Ok((grads.x, gw))
}

/// Convenience used by builders: default padding that preserves spatial
/// size at stride 1 (1 for 3×3 patterns, 2 for the 5×5 radial pattern).
pub fn same_padding(kind: PdcKind) -> usize {
    match kind {
        PdcKind::Radial => 2,
        _ => 1,
    }
}

impl std::str::FromStr for PdcKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) => PdcKind::from_token(c)
                .ok_or_else(|| Error::Config {
                    pos: 0,
                    msg: format!("unknown block token '{c}'"),
                }),
            _ => Err(Error::Config {
                pos: 0,
                msg: format!("expected a single block token, got {s:?}"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn patterns_validate_and_have_eight_pairs() {
        for kind in [PdcKind::Central, PdcKind::Angular, PdcKind::Radial] {
            let p = ProbePattern::of(kind).unwrap();
            p.validate().unwrap();
            assert_eq!(p.m(), 8);
        }
        assert!(ProbePattern::of(PdcKind::Vanilla).is_none());
    }

    #[test]
    fn central_pairs_share_reference_origin() {
        let p = ProbePattern::of(PdcKind::Central).unwrap();
        assert!(p.pairs.iter().all(|&(_, r)| r == (0, 0)));
        assert_eq!(p.window, 3);
    }

    #[test]
    fn angular_pairs_form_one_closed_cycle() {
        let p = ProbePattern::of(PdcKind::Angular).unwrap();
        // Each pair's reference is the next pair's sampled offset, and the
        // walk returns to the start after visiting all 8 ring cells.
        for i in 0..8 {
            assert_eq!(p.pairs[i].1, p.pairs[(i + 1) % 8].0);
        }
        let visited: std::collections::HashSet<_> =
            p.pairs.iter().map(|&(s, _)| s).collect();
        assert_eq!(visited.len(), 8);
    }

    #[test]
    fn radial_sampled_is_twice_reference() {
        let p = ProbePattern::of(PdcKind::Radial).unwrap();
        assert_eq!(p.window, 5);
        for &(s, r) in &p.pairs {
            assert_eq!(s, (2 * r.0, 2 * r.1));
        }
    }

    #[test]
    fn central_unit_weights_fold_to_ring_minus_eight() {
        let p = ProbePattern::of(PdcKind::Central).unwrap();
        let w = Tensor::full(Shape::new(1, 1, 1, 8), 1.0f64);
        let k = reparameterize(&w, &p).unwrap();
        assert_eq!(k.at(0, 0, 1, 1), -8.0);
        for &(dy, dx) in RING.iter() {
            assert_eq!(k.at(0, 0, (dy + 1) as usize, (dx + 1) as usize), 1.0);
        }
        assert_eq!(k.sum(), 0.0);
    }

    #[test]
    fn angular_equal_weights_fold_to_zero() {
        let p = ProbePattern::of(PdcKind::Angular).unwrap();
        let w = Tensor::full(Shape::new(2, 3, 1, 8), 0.7f64);
        let k = reparameterize(&w, &p).unwrap();
        assert!(k.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn angular_center_coefficient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ProbePattern::of(PdcKind::Angular).unwrap();
        let w = rand_t(Shape::new(2, 2, 1, 8), &mut rng);
        let k = reparameterize(&w, &p).unwrap();
        for o in 0..2 {
            for c in 0..2 {
                assert_eq!(k.at(o, c, 1, 1), 0.0);
            }
        }
    }

    #[test]
    fn folded_kernels_sum_to_zero_exactly() {
        // Exactness window: weights come from f32 training, folding runs in
        // f64, so every collision sum and every partial sum of the flat
        // slice total is exact — the result is bitwise 0.0, no tolerance.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in [PdcKind::Central, PdcKind::Angular, PdcKind::Radial] {
            let p = ProbePattern::of(kind).unwrap();
            let ws = Shape::new(3, 2, 1, 8);
            let w = Tensor::from_vec(
                ws,
                (0..ws.len())
                    .map(|_| rng.gen_range(-2.0f32..2.0) as f64)
                    .collect(),
            )
            .unwrap();
            let k = reparameterize(&w, &p).unwrap();
            let ks = k.shape();
            for o in 0..ks.n {
                for c in 0..ks.c {
                    let mut sum = 0.0f64;
                    for y in 0..ks.h {
                        for x in 0..ks.w {
                            sum += k.at(o, c, y, x);
                        }
                    }
                    assert_eq!(sum, 0.0);
                }
            }
        }
    }

    #[test]
    fn constant_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in [PdcKind::Central, PdcKind::Angular, PdcKind::Radial] {
            let p = ProbePattern::of(kind).unwrap();
            let spec = ConvSpec::new(p.window);
            let x = Tensor::full(Shape::new(1, 2, 9, 9), 4.2f64);
            let w = rand_t(Shape::new(3, 2, 1, 8), &mut rng);
            let y = pdc_forward_pairs(&x, &w, &p, &spec).unwrap();
            assert!(y.data().iter().all(|&v| v.abs() < 1e-12));
            let y2 = pdc_forward_reparam(&x, &w, &p, &spec).unwrap();
            assert!(y2.data().iter().all(|&v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn single_pixel_impulse_matches_hand_expansion() {
        // Input zero except x[2,2] = 1; central pattern at stride 1, no
        // padding, output location (1,1) has its window centered on (2,2).
        // Every pair sees sampled 0 − reference 1 except none sample the
        // center... each pair contributes w_i * (0 - 1) = -w_i at the
        // center location; neighbors of (2,2) each catch +w_i once.
        let p = ProbePattern::of(PdcKind::Central).unwrap();
        let spec = ConvSpec::new(3);
        let mut x = Tensor::zeros(Shape::new(1, 1, 5, 5));
        x.set(0, 0, 2, 2, 1.0f64);
        let w = Tensor::from_vec(
            Shape::new(1, 1, 1, 8),
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        )
        .unwrap();
        let y = pdc_forward_pairs(&x, &w, &p, &spec).unwrap();
        let sum_w: f64 = (1..=8).map(|v| v as f64).sum();
        assert_eq!(y.at(0, 0, 1, 1), -sum_w);
        // Window centered at (1,1): pair sampling offset (1,1) hits (2,2).
        // RING[4] = (1,1) carries w[4] = 5.
        assert_eq!(y.at(0, 0, 0, 0), 5.0);
    }

    #[test]
    fn pairs_and_reparam_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [PdcKind::Central, PdcKind::Angular, PdcKind::Radial] {
            let p = ProbePattern::of(kind).unwrap();
            for stride in [1usize, 2] {
                for pad in [0usize, 1, 2] {
                    let spec = ConvSpec::new(p.window)
                        .stride(stride)
                        .padding(pad)
                        .groups(2);
                    let x = rand_t(Shape::new(2, 4, 9, 10), &mut rng);
                    let w = rand_t(Shape::new(4, 2, 1, 8), &mut rng);
                    let a = pdc_forward_pairs(&x, &w, &p, &spec).unwrap();
                    let b = pdc_forward_reparam(&x, &w, &p, &spec).unwrap();
                    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pair_path_gradients_match_reparam_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [PdcKind::Central, PdcKind::Angular, PdcKind::Radial] {
            let p = ProbePattern::of(kind).unwrap();
            let spec = ConvSpec::new(p.window).padding(1);
            let x = rand_t(Shape::new(1, 2, 8, 8), &mut rng);
            let w = rand_t(Shape::new(2, 2, 1, 8), &mut rng);
            let (oh, ow) = spec.out_hw(8, 8).unwrap();
            let g = rand_t(Shape::new(1, 2, oh, ow), &mut rng);
            let (gx_a, gw_a) = pdc_pairs_backward(&x, &w, &p, &spec, &g).unwrap();
            let (gx_b, gw_b) = pdc_reparam_backward(&x, &w, &p, &spec, &g).unwrap();
            assert!(gx_a.max_abs_diff(&gx_b).unwrap() < 1e-10);
            assert!(gw_a.max_abs_diff(&gw_b).unwrap() < 1e-10);
        }
    }

    #[test]
    fn reparam_backward_is_scatter_adjoint() {
        // <reparameterize(w), G> == <w, reparameterize_backward(G)>
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for kind in [PdcKind::Central, PdcKind::Angular, PdcKind::Radial] {
            let p = ProbePattern::of(kind).unwrap();
            let w = rand_t(Shape::new(2, 3, 1, 8), &mut rng);
            let k = reparameterize(&w, &p).unwrap();
            let g = rand_t(k.shape(), &mut rng);
            let gw = reparameterize_backward(&g, &p).unwrap();
            let lhs: f64 = k.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let rhs: f64 = w.data().iter().zip(gw.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
