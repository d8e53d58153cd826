//! Synthetic datasets: anti-aliased shape scenes with annotated boundaries
//! (edge detection) and ten parametric shape classes (classification).
//! Fully deterministic per seed; each sample draws from its own RNG stream
//! so generation order and parallelism cannot change the data.

use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

pub struct EdgeSample {
    /// `(1, 3, size, size)`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `(1, 1, size, size)`, annotator-consensus levels
    /// `{0, 0.25, 0.5, 0.75, 1}`.
    pub gt: Tensor<f32>,
}

pub struct ClsSample {
    /// `(1, 3, size, size)`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub label: usize,
}

pub const GT_LEVELS: [f32; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(index as u64);
    r
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

// --- signed distance functions ----------------------------------------------

enum ShapeSdf {
    Circle { cx: f64, cy: f64, r: f64 },
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, rot: f64 },
    Rect { cx: f64, cy: f64, hx: f64, hy: f64, rot: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl ShapeSdf {
    fn eval(&self, x: f64, y: f64) -> f64 {
        match *self {
            ShapeSdf::Circle { cx, cy, r } => ((x - cx).hypot(y - cy)) - r,
            ShapeSdf::Ellipse { cx, cy, rx, ry, rot } => {
                let (dx, dy) = rotate(x - cx, y - cy, -rot);
                // Scaled-space approximation: exact enough for anti-aliasing
                // and thin boundary bands.
                ((dx / rx).hypot(dy / ry) - 1.0) * rx.min(ry)
            }
            ShapeSdf::Rect { cx, cy, hx, hy, rot } => {
                let (dx, dy) = rotate(x - cx, y - cy, -rot);
                let qx = dx.abs() - hx;
                let qy = dy.abs() - hy;
                qx.max(0.0).hypot(qy.max(0.0)) + qx.max(qy).min(0.0)
            }
            ShapeSdf::Triangle { p } => triangle_sdf(x, y, p),
        }
    }
}

fn rotate(x: f64, y: f64, a: f64) -> (f64, f64) {
    let (s, c) = a.sin_cos();
    (c * x - s * y, s * x + c * y)
}

fn triangle_sdf(px: f64, py: f64, p: [(f64, f64); 3]) -> f64 {
    // Distance to each edge segment; sign from half-plane tests.
    let mut d = f64::INFINITY;
    let mut sign_acc = 1.0f64;
    let mut neg = 0;
    for i in 0..3 {
        let (ax, ay) = p[i];
        let (bx, by) = p[(i + 1) % 3];
        let (ex, ey) = (bx - ax, by - ay);
        let (wx, wy) = (px - ax, py - ay);
        let t = ((wx * ex + wy * ey) / (ex * ex + ey * ey)).clamp(0.0, 1.0);
        let (dx, dy) = (wx - ex * t, wy - ey * t);
        d = d.min(dx.hypot(dy));
        if ex * wy - ey * wx < 0.0 {
            neg += 1;
        }
    }
    // Inside when all cross products share a sign.
    if neg == 0 || neg == 3 {
        sign_acc = -1.0;
    }
    sign_acc * d
}

// --- edge scenes --------------------------------------------------------------

struct Scene {
    shapes: Vec<ShapeSdf>,
    colors: Vec<[f64; 3]>,
    levels: Vec<f32>,
}

fn draw_scene(r: &mut ChaCha8Rng, size: f64) -> Scene {
    let n_shapes = r.gen_range(1..=3);
    let mut shapes = Vec::new();
    let mut colors = Vec::new();
    let mut levels = Vec::new();
    for _ in 0..n_shapes {
        let cx = r.gen_range(0.25 * size..0.75 * size);
        let cy = r.gen_range(0.25 * size..0.75 * size);
        let radius = r.gen_range(size / 8.0..size / 4.5);
        let shape = match r.gen_range(0..4) {
            0 => ShapeSdf::Circle { cx, cy, r: radius },
            1 => ShapeSdf::Ellipse {
                cx,
                cy,
                rx: radius,
                ry: radius * r.gen_range(0.5..0.9),
                rot: r.gen_range(0.0..std::f64::consts::PI),
            },
            2 => ShapeSdf::Rect {
                cx,
                cy,
                hx: radius,
                hy: radius * r.gen_range(0.5..1.0),
                rot: r.gen_range(0.0..std::f64::consts::PI),
            },
            _ => {
                let base = r.gen_range(0.0..std::f64::consts::TAU);
                let p: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let ang = base
                            + k as f64 * std::f64::consts::TAU / 3.0
                            + r.gen_range(-0.3..0.3);
                        let rr = radius * r.gen_range(0.8..1.2);
                        (cx + rr * ang.cos(), cy + rr * ang.sin())
                    })
                    .collect();
                ShapeSdf::Triangle { p: [p[0], p[1], p[2]] }
            }
        };
        shapes.push(shape);
        colors.push([r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..1.0)]);
        // Simulated annotator consensus: strong edges dominate, a few fall
        // below the loss dead band.
        levels.push(match r.gen_range(0..10) {
            0..=4 => 1.0,
            5..=6 => 0.75,
            7..=8 => 0.5,
            _ => 0.25,
        });
    }
    Scene {
        shapes,
        colors,
        levels,
    }
}

fn render_edge_sample(r: &mut ChaCha8Rng, size: usize) -> EdgeSample {
    let h = size;
    let fsize = size as f64;
    let noise = Normal::new(0.0, 0.02).expect("positive std");
    // Smooth background shading.
    let base: [f64; 3] = [r.gen_range(0.25..0.75), r.gen_range(0.25..0.75), r.gen_range(0.25..0.75)];
    let gx: [f64; 3] = [r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2)];
    let gy: [f64; 3] = [r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2), r.gen_range(-0.2..0.2)];
    let scene = draw_scene(r, fsize);

    let mut image = Tensor::zeros(Shape::new(1, 3, h, h));
    let mut gt = Tensor::zeros(Shape::new(1, 1, h, h));
    const AA: f64 = 0.8;
    const BAND: f64 = 1.0;
    for py in 0..h {
        for px in 0..h {
            let x = px as f64 + 0.5;
            let y = py as f64 + 0.5;
            let mut color = [0.0f64; 3];
            for ch in 0..3 {
                color[ch] = base[ch] + gx[ch] * (x / fsize - 0.5) + gy[ch] * (y / fsize - 0.5);
            }
            let mut label = 0.0f32;
            for (k, shape) in scene.shapes.iter().enumerate() {
                let d = shape.eval(x, y);
                let cov = smoothstep(-AA, AA, -d);
                for ch in 0..3 {
                    color[ch] = color[ch] * (1.0 - cov) + scene.colors[k][ch] * cov;
                }
                if cov > 0.6 {
                    // Interior occludes boundaries painted earlier.
                    label = 0.0;
                }
                if d.abs() <= BAND {
                    label = scene.levels[k];
                }
            }
            for ch in 0..3 {
                let v = color[ch] + noise.sample(r);
                image.data_mut()[(ch * h + py) * h + px] = v.clamp(0.0, 1.0) as f32;
            }
            gt.data_mut()[py * h + px] = label;
        }
    }
    EdgeSample { image, gt }
}

/// Deterministic scenes of anti-aliased shapes with 5-level boundary
/// annotations. Scenes whose boundary density falls outside `[0.5%, 15%]`
/// are redrawn (bounded retries keep it deterministic and total).
pub fn synth_edge_dataset(seed: u64, count: usize, size: usize) -> Vec<EdgeSample> {
    (0..count)
        .map(|i| {
            let mut r = sample_rng(seed, i);
            for _ in 0..50 {
                let s = render_edge_sample(&mut r, size);
                let pos = s.gt.data().iter().filter(|&&v| v > 0.0).count() as f64
                    / s.gt.len() as f64;
                if (0.005..=0.15).contains(&pos) {
                    return s;
                }
            }
            render_edge_sample(&mut r, size)
        })
        .collect()
}

// --- classification ------------------------------------------------------------

pub const CLS_CLASSES: usize = 10;
pub const CLS_CLASS_NAMES: [&str; CLS_CLASSES] = [
    "circle",
    "ring",
    "square",
    "diamond",
    "triangle",
    "plus",
    "cross",
    "h-stripes",
    "v-stripes",
    "checker",
];

/// Foreground mask of one class instance at `(x, y)`; geometry jittered by
/// the sample's RNG draws.
struct ClsShape {
    class: usize,
    cx: f64,
    cy: f64,
    scale: f64,
    rot: f64,
    period: f64,
}

impl ClsShape {
    fn mask(&self, x: f64, y: f64) -> f64 {
        let s = self.scale;
        match self.class {
            0 => coverage((x - self.cx).hypot(y - self.cy) - s),
            1 => {
                let d = (x - self.cx).hypot(y - self.cy);
                coverage((d - s).max(0.55 * s - d))
            }
            2 => coverage(
                ShapeSdf::Rect {
                    cx: self.cx,
                    cy: self.cy,
                    hx: s * 0.9,
                    hy: s * 0.9,
                    rot: self.rot * 0.1,
                }
                .eval(x, y),
            ),
            3 => coverage(
                ShapeSdf::Rect {
                    cx: self.cx,
                    cy: self.cy,
                    hx: s * 0.9,
                    hy: s * 0.9,
                    rot: std::f64::consts::FRAC_PI_4 + self.rot * 0.1,
                }
                .eval(x, y),
            ),
            4 => {
                let p: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let ang = -std::f64::consts::FRAC_PI_2
                            + self.rot * 0.2
                            + k as f64 * std::f64::consts::TAU / 3.0;
                        (self.cx + 1.2 * s * ang.cos(), self.cy + 1.2 * s * ang.sin())
                    })
                    .collect();
                coverage(triangle_sdf(x, y, [p[0], p[1], p[2]]))
            }
            5 => {
                let bar = |rot: f64| {
                    ShapeSdf::Rect {
                        cx: self.cx,
                        cy: self.cy,
                        hx: s,
                        hy: s * 0.28,
                        rot,
                    }
                    .eval(x, y)
                };
                coverage(bar(0.0).min(bar(std::f64::consts::FRAC_PI_2)))
            }
            6 => {
                let bar = |rot: f64| {
                    ShapeSdf::Rect {
                        cx: self.cx,
                        cy: self.cy,
                        hx: s * 1.1,
                        hy: s * 0.25,
                        rot,
                    }
                    .eval(x, y)
                };
                coverage(
                    bar(std::f64::consts::FRAC_PI_4).min(bar(-std::f64::consts::FRAC_PI_4)),
                )
            }
            7 => f64::from((y / self.period).floor() as i64 % 2 == 0),
            8 => f64::from((x / self.period).floor() as i64 % 2 == 0),
            _ => f64::from(
                ((x / self.period).floor() as i64 + (y / self.period).floor() as i64) % 2 == 0,
            ),
        }
    }
}

fn coverage(sdf: f64) -> f64 {
    smoothstep(-0.8, 0.8, -sdf)
}

fn render_cls_sample(r: &mut ChaCha8Rng, size: usize, class: usize) -> ClsSample {
    let h = size;
    let fsize = size as f64;
    let noise = Normal::new(0.0, 0.05).expect("positive std");
    // Contrasting foreground/background colors.
    let bg: [f64; 3] = [r.gen_range(0.0..0.45), r.gen_range(0.0..0.45), r.gen_range(0.0..0.45)];
    let fg: [f64; 3] = [r.gen_range(0.55..1.0), r.gen_range(0.55..1.0), r.gen_range(0.55..1.0)];
    let shape = ClsShape {
        class,
        cx: fsize / 2.0 + r.gen_range(-fsize / 10.0..fsize / 10.0),
        cy: fsize / 2.0 + r.gen_range(-fsize / 10.0..fsize / 10.0),
        scale: fsize * r.gen_range(0.22..0.34),
        rot: r.gen_range(-1.0..1.0),
        period: fsize / (2.0 * r.gen_range(2.0..4.0)),
    };
    let mut image = Tensor::zeros(Shape::new(1, 3, h, h));
    for py in 0..h {
        for px in 0..h {
            let m = shape.mask(px as f64 + 0.5, py as f64 + 0.5);
            for ch in 0..3 {
                let v = bg[ch] * (1.0 - m) + fg[ch] * m + noise.sample(r);
                image.data_mut()[(ch * h + py) * h + px] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    ClsSample {
        image,
        label: class,
    }
}

/// Balanced labeled shape images; `classes <= 10`. Deterministic per seed.
pub fn synth_cls_dataset(
    seed: u64,
    count: usize,
    size: usize,
    classes: usize,
) -> Result<Vec<ClsSample>> {
    if classes < 2 || classes > CLS_CLASSES {
        shape_err!("classes must lie in 2..={CLS_CLASSES}, got {classes}");
    }
    // Round-robin labels keep the balance exact; a seeded shuffle mixes the
    // order so contiguous batches stay class-diverse.
    let mut samples: Vec<ClsSample> = (0..count)
        .map(|i| {
            let mut r = sample_rng(seed, i);
            render_cls_sample(&mut r, size, i % classes)
        })
        .collect();
    let mut r = sample_rng(seed, usize::MAX);
    for i in (1..samples.len()).rev() {
        samples.swap(i, r.gen_range(0..=i));
    }
    Ok(samples)
}

// --- batching ------------------------------------------------------------------

/// Stack per-sample images (all `(1, c, h, w)`) into one `(n, c, h, w)`
/// batch.
pub fn stack_images(images: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = match images.first() {
        Some(t) => t.shape(),
        None => shape_err!("cannot stack an empty batch"),
    };
    let mut out = Tensor::zeros(Shape::new(images.len(), first.c, first.h, first.w));
    let stride = first.len();
    for (i, img) in images.iter().enumerate() {
        if img.shape() != first {
            shape_err!("batch mixes shapes {} and {}", first, img.shape());
        }
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(img.data());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let a = synth_edge_dataset(11, 4, 32);
        let b = synth_edge_dataset(11, 4, 32);
        for (sa, sb) in a.iter().zip(&b) {
            assert_eq!(sa.image.data(), sb.image.data());
            assert_eq!(sa.gt.data(), sb.gt.data());
        }
        let ca = synth_cls_dataset(12, 20, 16, 10).unwrap();
        let cb = synth_cls_dataset(12, 20, 16, 10).unwrap();
        for (sa, sb) in ca.iter().zip(&cb) {
            assert_eq!(sa.image.data(), sb.image.data());
            assert_eq!(sa.label, sb.label);
        }
    }

    #[test]
    fn gt_sticks_to_the_five_level_grid_and_density_budget() {
        let ds = synth_edge_dataset(13, 200, 48);
        for s in &ds {
            for &v in s.gt.data() {
                assert!(GT_LEVELS.contains(&v), "level {v}");
            }
            let pos =
                s.gt.data().iter().filter(|&&v| v > 0.0).count() as f64 / s.gt.len() as f64;
            assert!((0.005..=0.15).contains(&pos), "positive fraction {pos}");
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn class_labels_balanced_and_images_bounded() {
        let ds = synth_cls_dataset(14, 500, 16, 10).unwrap();
        let mut counts = [0usize; 10];
        for s in &ds {
            counts[s.label] += 1;
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for &c in &counts {
            assert!((c as f64 - 50.0).abs() / 50.0 <= 0.10, "{counts:?}");
        }
        assert!(synth_cls_dataset(1, 10, 16, 1).is_err());
        assert!(synth_cls_dataset(1, 10, 16, 11).is_err());
    }

    #[test]
    fn shuffle_mixes_classes_within_prefixes() {
        let ds = synth_cls_dataset(15, 100, 8, 10).unwrap();
        let first: Vec<usize> = ds[..20].iter().map(|s| s.label).collect();
        let distinct = {
            let mut f = first.clone();
            f.sort_unstable();
            f.dedup();
            f.len()
        };
        assert!(distinct >= 5, "prefix labels {first:?}");
    }

    #[test]
    fn stacking_concatenates_along_batch() {
        let ds = synth_edge_dataset(16, 3, 16);
        let refs: Vec<&Tensor<f32>> = ds.iter().map(|s| &s.image).collect();
        let batch = stack_images(&refs).unwrap();
        assert_eq!(batch.shape(), Shape::new(3, 3, 16, 16));
        assert_eq!(&batch.data()[..ds[0].image.len()], ds[0].image.data());
        assert!(stack_images(&[]).is_err());
    }

    #[test]
    fn triangle_sdf_sign_convention() {
        let p = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)];
        assert!(triangle_sdf(2.0, 2.0, p) < 0.0, "inside is negative");
        assert!(triangle_sdf(20.0, 20.0, p) > 0.0, "outside is positive");
        // Winding order must not matter.
        let q = [(0.0, 0.0), (0.0, 10.0), (10.0, 0.0)];
        assert!(triangle_sdf(2.0, 2.0, q) < 0.0);
    }
}
