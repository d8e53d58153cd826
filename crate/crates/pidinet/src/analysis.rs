//! Frequency-domain analysis (spectra of shifting filters and feature
//! maps), operation/memory cost accounting, and local-binary-pattern
//! statistics of packed 3x3 kernels.

use crate::binary::BitTensor;
use crate::blocks::{BiPiDiNet, BiReal18, PiDiNet, ResNet18};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Layer, LayerCost};
use crate::pdc::{PdcKind, ProbePattern};
use crate::tensor::{Scalar, Shape, Tensor};

// ---------------------------------------------------------------------------
// Spectra
// ---------------------------------------------------------------------------

/// A centered 2-D magnitude spectrum: the zero-frequency bin sits at
/// `(h/2, w/2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub h: usize,
    pub w: usize,
    pub mag: Vec<f64>,
}

impl Spectrum {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.mag[i * self.w + j]
    }

    /// Sum of squared magnitudes.
    pub fn energy(&self) -> f64 {
        self.mag.iter().map(|m| m * m).sum()
    }

    /// Fraction of spectral energy outside the central box spanning half
    /// the bandwidth per axis (a quarter of the plane).
    pub fn high_freq_ratio(&self) -> f64 {
        let total = self.energy();
        if total == 0.0 {
            return 0.0;
        }
        let (r0, r1) = (self.h / 4, self.h - self.h / 4);
        let (c0, c1) = (self.w / 4, self.w - self.w / 4);
        let mut low = 0.0;
        for i in r0..r1 {
            for j in c0..c1 {
                let m = self.at(i, j);
                low += m * m;
            }
        }
        1.0 - low / total
    }

    /// `ln(1 + magnitude)`, the usual scaling for plotting.
    pub fn log_scaled(&self) -> Spectrum {
        Spectrum {
            h: self.h,
            w: self.w,
            mag: self.mag.iter().map(|m| m.ln_1p()).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.h {
            let row: Vec<String> = (0..self.w).map(|j| self.at(i, j).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Direct separable DFT of a real plane; row-major, un-centered,
/// `(re, im)` per bin. O(HW·(H+W)), plenty at analysis sizes.
fn dft2_complex(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    // Rows first: t[u][j] = sum_i plane[i][j] e^{-2pi i u i / h}.
    let mut t = vec![(0.0f64, 0.0f64); h * w];
    for u in 0..h {
        for i in 0..h {
            let ang = -2.0 * std::f64::consts::PI * (u * i) as f64 / h as f64;
            let (s, c) = ang.sin_cos();
            for j in 0..w {
                let x = plane[i * w + j];
                t[u * w + j].0 += x * c;
                t[u * w + j].1 += x * s;
            }
        }
    }
    let mut out = vec![(0.0f64, 0.0f64); h * w];
    for v in 0..w {
        for j in 0..w {
            let ang = -2.0 * std::f64::consts::PI * (v * j) as f64 / w as f64;
            let (s, c) = ang.sin_cos();
            for u in 0..h {
                let (re, im) = t[u * w + j];
                out[u * w + v].0 += re * c - im * s;
                out[u * w + v].1 += re * s + im * c;
            }
        }
    }
    out
}

/// Raw frequency index feeding centered position `i` on an `n`-bin axis.
fn centered_source(i: usize, n: usize) -> usize {
    (i + n - n / 2) % n
}

/// Centered 2-D DFT magnitude of a real `h x w` plane.
pub fn fft2_magnitude(plane: &[f64], h: usize, w: usize) -> Result<Spectrum> {
    if h == 0 || w == 0 || plane.len() != h * w {
        shape_err!("plane of {} values is not {h}x{w}", plane.len());
    }
    let raw = dft2_complex(plane, h, w);
    let mut mag = vec![0.0f64; h * w];
    for i in 0..h {
        let u = centered_source(i, h);
        for j in 0..w {
            let v = centered_source(j, w);
            let (re, im) = raw[u * w + v];
            mag[i * w + j] = re.hypot(im);
        }
    }
    Ok(Spectrum { h, w, mag })
}

/// Spectra of the shifting filters behind one convolution kind, each
/// embedded in an `n x n` grid. The vanilla kind decomposes into one-hot
/// shifts over its window; difference kinds decompose into +1/-1 pairs
/// (+1 at the sampled offset, -1 at the reference offset).
pub fn shifting_filter_spectra(kind: PdcKind, window: usize, n: usize) -> Result<Vec<Spectrum>> {
    let needed = match ProbePattern::of(kind) {
        Some(p) => p.window,
        None => window,
    };
    if n < needed || needed == 0 {
        shape_err!("embedding grid {n} cannot hold a window of {needed}");
    }
    let c = (n / 2) as i32;
    let place = |plane: &mut [f64], dy: i32, dx: i32, v: f64| {
        plane[((c + dy) as usize) * n + (c + dx) as usize] += v;
    };
    let mut out = Vec::new();
    match ProbePattern::of(kind) {
        None => {
            let r = (window / 2) as i32;
            for dy in -r..=r {
                for dx in -r..=r {
                    let mut plane = vec![0.0f64; n * n];
                    place(&mut plane, dy, dx, 1.0);
                    out.push(fft2_magnitude(&plane, n, n)?);
                }
            }
        }
        Some(p) => {
            for &((sy, sx), (ry, rx)) in &p.pairs {
                let mut plane = vec![0.0f64; n * n];
                place(&mut plane, sy, sx, 1.0);
                place(&mut plane, ry, rx, -1.0);
                out.push(fft2_magnitude(&plane, n, n)?);
            }
        }
    }
    Ok(out)
}

/// Mean spectrum of a layer's output features: channel-mean plane per
/// sample, centered magnitude spectrum, averaged over the batch.
pub fn layer_feature_spectrum<T: Scalar>(
    layer: &mut dyn Layer<T>,
    batch: &Tensor<T>,
) -> Result<Spectrum> {
    feature_planes_spectrum(&layer.forward(batch, false)?)
}

/// Mean spectrum of edge-network trunk features at a named tap
/// (`init` or `block1`..`block15`).
pub fn feature_spectrum<T: Scalar>(
    net: &mut PiDiNet<T>,
    batch: &Tensor<T>,
    tap: &str,
) -> Result<Spectrum> {
    feature_planes_spectrum(&net.forward_to(batch, tap)?)
}

fn feature_planes_spectrum<T: Scalar>(feat: &Tensor<T>) -> Result<Spectrum> {
    let s = feat.shape();
    let mut mean = vec![0.0f64; s.h * s.w];
    let mut acc: Option<Spectrum> = None;
    for n in 0..s.n {
        mean.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..s.c {
            let base = s.idx(n, c, 0, 0);
            for (i, v) in feat.data()[base..base + s.h * s.w].iter().enumerate() {
                mean[i] += v.to_f64() / s.c as f64;
            }
        }
        let sp = fft2_magnitude(&mean, s.h, s.w)?;
        acc = Some(match acc {
            None => sp,
            Some(mut a) => {
                for (t, m) in a.mag.iter_mut().zip(&sp.mag) {
                    *t += m;
                }
                a
            }
        });
    }
    let mut sp = match acc {
        Some(sp) => sp,
        None => shape_err!("empty batch"),
    };
    sp.mag.iter_mut().for_each(|m| *m /= s.n as f64);
    Ok(sp)
}

/// One-sided sign test: probability of at least `wins` successes in
/// `trials` fair coin flips.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    if wins > trials {
        return 0.0;
    }
    let mut binom = 1.0f64; // C(trials, 0)
    let mut sum = 0.0f64;
    for k in 0..=trials {
        if k >= wins {
            sum += binom;
        }
        binom = binom * (trials - k) as f64 / (k + 1) as f64;
    }
    sum / 2f64.powi(trials as i32)
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

/// Aggregate complexity of one forward pass (per image) plus model size.
/// `ops` folds binary work at 64 binary operations per full-precision
/// operation; `memory_bits` stores full-precision parameters at 32 bits
/// and binary ones at 1 bit.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CostReport {
    pub flops: u64,
    pub bops: u64,
    pub ops: f64,
    pub fp_params: u64,
    pub b_params: u64,
    pub memory_bits: u64,
}

impl CostReport {
    pub fn from_cost(c: LayerCost) -> CostReport {
        CostReport {
            flops: c.flops,
            bops: c.bops,
            ops: c.flops as f64 + c.bops as f64 / 64.0,
            fp_params: c.fp_params,
            b_params: c.b_params,
            memory_bits: 32 * c.fp_params + c.b_params,
        }
    }

    pub fn table(&self) -> String {
        format!(
            "flops      {:>16}\nbops       {:>16}\nops        {:>16.2}\n\
             fp params  {:>16}\nbin params {:>16}\nmemory     {:>13.3} Mbit\n",
            self.flops,
            self.bops,
            self.ops,
            self.fp_params,
            self.b_params,
            self.memory_bits as f64 / 1e6,
        )
    }

    pub fn kv_lines(&self) -> String {
        format!(
            "flops={}\nbops={}\nops={}\nfp_params={}\nb_params={}\nmemory_bits={}\n",
            self.flops, self.bops, self.ops, self.fp_params, self.b_params, self.memory_bits
        )
    }
}

pub fn count_ops_edge<T: Scalar>(net: &PiDiNet<T>, input: Shape) -> Result<CostReport> {
    Ok(CostReport::from_cost(net.cost(input)?))
}

pub fn count_ops_classifier<T: Scalar>(net: &BiPiDiNet<T>, input: Shape) -> Result<CostReport> {
    Ok(CostReport::from_cost(net.cost(input)?))
}

pub fn count_ops_resnet18<T: Scalar>(net: &ResNet18<T>, input: Shape) -> Result<CostReport> {
    Ok(CostReport::from_cost(net.cost(input)?))
}

pub fn count_ops_bireal18<T: Scalar>(net: &BiReal18<T>, input: Shape) -> Result<CostReport> {
    Ok(CostReport::from_cost(net.cost(input)?))
}

// ---------------------------------------------------------------------------
// Local binary pattern statistics
// ---------------------------------------------------------------------------

/// Transition bound below which a circular code counts as uniform.
pub const UNIFORM_MAX_TRANSITIONS: u32 = 4;

/// Ring of eight 3x3 offsets, counter-clockwise from the top-left corner;
/// bit `i` of a code is the sign at ring position `i`.
const CODE_RING: [(usize, usize); 8] = [
    (0, 0),
    (0, 1),
    (0, 2),
    (1, 2),
    (2, 2),
    (2, 1),
    (2, 0),
    (1, 0),
];

/// Number of 0/1 changes walking the 8-bit code circularly.
pub fn code_transitions(code: u8) -> u32 {
    (code ^ code.rotate_left(1)).count_ones()
}

pub struct LbpStats {
    /// Count per 8-bit code over all kernels.
    pub histogram: Vec<u64>,
    pub max_transitions: u32,
}

impl LbpStats {
    pub fn uniform(&self, code: u8) -> bool {
        code_transitions(code) <= self.max_transitions
    }

    pub fn uniform_total(&self) -> u64 {
        (0..256)
            .filter(|&c| self.uniform(c as u8))
            .map(|c| self.histogram[c])
            .sum()
    }

    pub fn non_uniform_total(&self) -> u64 {
        self.histogram.iter().sum::<u64>() - self.uniform_total()
    }

    /// Codes by descending frequency (ties by code value).
    pub fn sorted(&self) -> Vec<(u8, u64)> {
        let mut rows: Vec<(u8, u64)> = (0..256).map(|c| (c as u8, self.histogram[c])).collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("code,count,uniform\n");
        for (code, count) in self.sorted() {
            out.push_str(&format!("{code},{count},{}\n", self.uniform(code) as u8));
        }
        out
    }
}

/// Code histogram of packed 3x3 kernels: the center bit is ignored, the
/// ring is read counter-clockwise from the top-left corner.
pub fn lbp_pattern_stats(bits: &BitTensor, max_transitions: u32) -> Result<LbpStats> {
    let s = bits.shape();
    if s.h != 3 || s.w != 3 {
        return Err(Error::Format(format!(
            "pattern statistics need 3x3 kernels, got {}x{}",
            s.h, s.w
        )));
    }
    let mut histogram = vec![0u64; 256];
    for o in 0..s.n {
        for c in 0..s.c {
            let mut code = 0u8;
            for (b, &(r, col)) in CODE_RING.iter().enumerate() {
                code |= (bits.get(s.idx(o, c, r, col)) as u8) << b;
            }
            histogram[code as usize] += 1;
        }
    }
    Ok(LbpStats {
        histogram,
        max_transitions,
    })
}
