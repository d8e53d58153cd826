//! End-to-end checks of the library's load-bearing numerical claims, from
//! kernel folding and packed-bit equality up to desk-scale training quality.

use std::time::{Duration, Instant};

use pidinet::analysis::{
    count_ops_bireal18, count_ops_resnet18, layer_feature_spectrum, shifting_filter_spectra,
    sign_test_p,
};
use pidinet::binary::{bconv, bipdc_float, sign, BinaryConvSpec, BitTensor};
use pidinet::blocks::{build_bipidinet, build_pidinet, bireal18, resnet18, Cdcm, Csam, NetworkSpec};
use pidinet::layers::{
    BatchNormLayer, BinaryConvLayer, BiPdcLayer, Conv2dLayer, Layer, Pool2x2Layer, PreluLayer,
    ReluLayer, ReplicaPoolLayer, SigmoidLayer, UpsampleLayer,
};
use pidinet::ops::{conv2d, conv2d_direct, ConvSpec, PoolMode};
use pidinet::pdc::{pdc_forward_pairs, reparameterize, PdcKind, ProbePattern};
use pidinet::pnm::PnmImage;
use pidinet::synth::{synth_cls_dataset, synth_edge_dataset};
use pidinet::train::{
    cross_entropy, edge_loss, eval_accuracy, eval_edge_f1, train_classifier, train_edge, TrainCfg,
};
use pidinet::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIFF_KINDS: [PdcKind; 3] = [PdcKind::Central, PdcKind::Angular, PdcKind::Radial];

fn rand_tensor(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(lo..hi);
    }
    t
}

/// Training-time budgets below are stated for a four-core box; stretch them
/// proportionally when fewer cores serve the suite.
fn scaled_minutes(minutes: u64) -> Duration {
    let cores = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .clamp(1, 4) as u64;
    Duration::from_secs(minutes * 60 * 4 / cores)
}

// ---------------------------------------------------------------------------
// Folding a difference convolution into a vanilla kernel
// ---------------------------------------------------------------------------

#[test]
fn difference_conv_folds_into_vanilla_kernel() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in DIFF_KINDS {
        let pattern = ProbePattern::of(kind).unwrap();
        let window = pattern.window;
        for _ in 0..500 {
            let n = rng.gen_range(1..=2);
            let in_c = rng.gen_range(1..=2);
            let out_c = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=2);
            let h = rng.gen_range(window..window + 4);
            let w = rng.gen_range(window..window + 4);
            // Half-unit draws: the pair walk and the folded kernel sum the
            // same products in different orders, and at this scale their
            // f32 rounding gap stays well under the gate while a structural
            // mistake in the fold would still show up at O(1).
            let x = rand_tensor(Shape::new(n, in_c, h, w), -0.5, 0.5, &mut rng);
            let wt = rand_tensor(
                Shape::new(out_c, in_c, 1, pattern.m()),
                -0.5,
                0.5,
                &mut rng,
            );
            let spec = ConvSpec::new(window).stride(stride).padding(pad);

            let pairs = pdc_forward_pairs(&x, &wt, &pattern, &spec).unwrap();
            let folded = conv2d(&x, &reparameterize(&wt, &pattern).unwrap(), None, &spec).unwrap();
            assert!(pairs.max_abs_diff(&folded).unwrap() < 1e-12, "{kind:?} f64");

            let x32: Tensor<f32> = Tensor::from_f64_tensor(&x);
            let w32: Tensor<f32> = Tensor::from_f64_tensor(&wt);
            let pairs32 = pdc_forward_pairs(&x32, &w32, &pattern, &spec).unwrap();
            let folded32 =
                conv2d(&x32, &reparameterize(&w32, &pattern).unwrap(), None, &spec).unwrap();
            assert!(pairs32.max_abs_diff(&folded32).unwrap() < 1e-6, "{kind:?} f32");
        }
    }
    assert!(start.elapsed() < Duration::from_secs(60));
}

#[test]
fn folded_kernels_are_zero_sum_and_reject_constants() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for kind in DIFF_KINDS {
        let pattern = ProbePattern::of(kind).unwrap();
        let k = pattern.window;

        // Integer-valued pair weights keep every addition exact, so the
        // folded kernel must sum to literal zero, filter by filter.
        let mut wt = Tensor::zeros(Shape::new(3, 2, 1, pattern.m()));
        for v in wt.data_mut() {
            *v = rng.gen_range(-8i32..=8) as f64;
        }
        let folded = reparameterize(&wt, &pattern).unwrap();
        for filter in folded.data().chunks(k * k) {
            assert_eq!(filter.iter().sum::<f64>(), 0.0);
        }

        // Arbitrary real weights: zero up to accumulated rounding.
        let wt = rand_tensor(Shape::new(4, 3, 1, pattern.m()), -1.0, 1.0, &mut rng);
        let folded = reparameterize(&wt, &pattern).unwrap();
        for filter in folded.data().chunks(k * k) {
            assert!(filter.iter().sum::<f64>().abs() < 1e-12);
        }

        // Every probe pair's shifting filter has a dead DC bin.
        for n in [8, 9, 16] {
            for spectrum in shifting_filter_spectra(kind, k, n).unwrap() {
                assert!(spectrum.mag[(n / 2) * n + n / 2].abs() < 1e-12, "{kind:?} n={n}");
            }
        }

        // A constant image produces a zero response on the valid region,
        // through both the pair path and the folded kernel.
        let x = Tensor::full(Shape::new(1, 2, k + 3, k + 3), 0.7f64);
        let wt = rand_tensor(Shape::new(3, 2, 1, pattern.m()), -1.0, 1.0, &mut rng);
        let spec = ConvSpec::new(k);
        let y = pdc_forward_pairs(&x, &wt, &pattern, &spec).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
        let y = conv2d(&x, &reparameterize(&wt, &pattern).unwrap(), None, &spec).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }
}

// ---------------------------------------------------------------------------
// Packed binary kernels
// ---------------------------------------------------------------------------

/// Float reference for the packed binary conv: binarize explicitly, embed in
/// a border of `Sign(0 − τ)` values, and run the dense convolution unpadded.
fn bconv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, tau: f64, spec: &ConvSpec) -> Tensor<f64> {
    let xs = x.shape();
    let p = spec.padding;
    let padval = if 0.0 >= tau { 1.0 } else { -1.0 };
    let mut wide = Tensor::full(Shape::new(xs.n, xs.c, xs.h + 2 * p, xs.w + 2 * p), padval);
    let sx = sign(x, tau);
    for n in 0..xs.n {
        for c in 0..xs.c {
            for y in 0..xs.h {
                for xq in 0..xs.w {
                    wide.set(n, c, y + p, xq + p, sx.at(n, c, y, xq));
                }
            }
        }
    }
    let inner = ConvSpec::new(spec.kernel)
        .stride(spec.stride)
        .groups(spec.groups);
    conv2d_direct(&wide, &sign(w, 0.0), None, &inner).unwrap()
}

#[test]
fn packed_binary_conv_equals_float_oracle_exactly() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..1000 {
        let n = rng.gen_range(1..=2);
        let c = rng.gen_range(1..=4);
        let k = [1, 3, 3, 5][rng.gen_range(0..4)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=2);
        let h = rng.gen_range(k + 1..k + 6);
        let w = rng.gen_range(k + 1..k + 6);
        let groups = if case % 5 == 0 { c } else { 1 };
        let out_c = groups * rng.gen_range(1..=3);
        let tau = [0.0, 0.0, 0.25, -0.4][rng.gen_range(0..4)];

        let mut x = rand_tensor(Shape::new(n, c, h, w), -1.0, 1.0, &mut rng);
        for v in x.data_mut() {
            // Sprinkle exact threshold hits and exact zeros so the
            // Sign(0) = +1 boundary is exercised, borders included.
            match rng.gen_range(0..10) {
                0 => *v = tau,
                1 => *v = 0.0,
                _ => {}
            }
        }
        let wt = rand_tensor(Shape::new(out_c, c / groups, k, k), -1.0, 1.0, &mut rng);
        let spec = ConvSpec::new(k).stride(stride).padding(pad).groups(groups);
        let bspec = BinaryConvSpec::new(spec).threshold(tau);

        let xb = BitTensor::pack(&x, tau);
        let wb = BitTensor::pack(&wt, 0.0);
        let packed: Tensor<f64> = bconv(&xb, &wb, &bspec).unwrap();
        let oracle = bconv_oracle(&x, &wt, tau, &spec);
        assert_eq!(packed.data(), oracle.data(), "case {case}");
    }
    assert!(start.elapsed() < Duration::from_secs(60));
}

#[test]
fn local_texture_survives_difference_binarization() {
    // A checkerboard riding on a positive plateau: every sample clears the
    // global threshold, so plain binarization flattens the patch, while the
    // neighbor-difference bits keep the texture.
    let mut x = Tensor::zeros(Shape::new(1, 1, 6, 6));
    for y in 0..6 {
        for q in 0..6 {
            x.set(0, 0, y, q, if (y + q) % 2 == 0 { 0.6f64 } else { 0.4 });
        }
    }
    let bits = BitTensor::pack(&x, 0.0);
    assert!((0..36).all(|i| bits.get(i)), "plateau binarizes constant");

    let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
    let spec = BinaryConvSpec::new(ConvSpec::new(3));
    let flat: Tensor<f64> = bconv(&bits, &BitTensor::pack(&w, 0.0), &spec).unwrap();
    assert!(flat.data().iter().all(|&v| v == flat.data()[0]));

    let pattern = ProbePattern::of(PdcKind::Central).unwrap();
    let wp = Tensor::full(Shape::new(1, 1, 1, pattern.m()), 1.0);
    let textured: Tensor<f64> = bipdc_float(&x, &wp, &pattern, &spec).unwrap();
    assert!(textured.data().iter().any(|&v| v != textured.data()[0]));
}

// ---------------------------------------------------------------------------
// Finite-difference audit of every differentiable block
// ---------------------------------------------------------------------------

fn spread_probes(len: usize, cap: usize) -> Vec<usize> {
    if len <= cap {
        (0..len).collect()
    } else {
        (0..cap).map(|i| i * len / cap).collect()
    }
}

/// Inputs for the checks: shuffled, evenly spaced magnitudes in ±[0.1, 1.0)
/// so no sample sits near a ReLU/PReLU kink and no pooling window ties.
fn kink_free_input(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.len();
    let mut vals: Vec<f64> = (0..len)
        .map(|i| {
            let mag = 0.1 + 0.9 * (i as f64 + 1.0) / (len as f64 + 1.0);
            if i % 2 == 0 {
                mag
            } else {
                -mag
            }
        })
        .collect();
    for i in (1..len).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, vals).unwrap()
}

fn fd_scalar(a: f64, n: f64) {
    let scale = a.abs().max(n.abs());
    if scale < 1e-9 {
        assert!((a - n).abs() < 1e-9, "analytic {a} vs numeric {n}");
    } else {
        assert!((a - n).abs() / scale < 1e-4, "analytic {a} vs numeric {n}");
    }
}

fn fd_audit_layer(mut build: impl FnMut(&mut ChaCha8Rng) -> Box<dyn Layer<f64>>, in_shape: Shape) {
    const H: f64 = 1e-5;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut layer = build(&mut rng);
        let x = kink_free_input(in_shape, &mut rng);
        let y = layer.forward(&x, true).unwrap();
        let dir = rand_tensor(y.shape(), -1.0, 1.0, &mut rng);
        let objective = |l: &mut dyn Layer<f64>, xin: &Tensor<f64>| -> f64 {
            let out = l.forward(xin, true).unwrap();
            out.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum()
        };

        let analytic_j = objective(layer.as_mut(), &x);
        layer.visit_params(&mut |p| p.zero_grad());
        layer.forward(&x, true).unwrap();
        let gx = layer.backward(&dir).unwrap();
        assert!(analytic_j.is_finite());

        for i in spread_probes(x.len(), 48) {
            let mut xp = x.clone();
            xp.data_mut()[i] += H;
            let up = objective(layer.as_mut(), &xp);
            xp.data_mut()[i] -= 2.0 * H;
            let down = objective(layer.as_mut(), &xp);
            fd_scalar(gx.data()[i], (up - down) / (2.0 * H));
        }

        let mut n_params = 0;
        layer.visit_params(&mut |_| n_params += 1);
        for pi in 0..n_params {
            let (mut len, mut grads) = (0, Vec::new());
            let mut k = 0;
            layer.visit_params(&mut |p| {
                if k == pi {
                    len = p.value.len();
                    grads = p.grad.data().to_vec();
                }
                k += 1;
            });
            fn nudge(layer: &mut dyn Layer<f64>, pi: usize, i: usize, delta: f64) {
                let mut k = 0;
                layer.visit_params(&mut |p| {
                    if k == pi {
                        p.value.data_mut()[i] += delta;
                    }
                    k += 1;
                });
            }
            for i in spread_probes(len, 48) {
                nudge(layer.as_mut(), pi, i, H);
                let up = objective(layer.as_mut(), &x);
                nudge(layer.as_mut(), pi, i, -2.0 * H);
                let down = objective(layer.as_mut(), &x);
                nudge(layer.as_mut(), pi, i, H);
                fd_scalar(grads[i], (up - down) / (2.0 * H));
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let start = Instant::now();
    let s = Shape::new;

    fd_audit_layer(
        |r| Box::new(Conv2dLayer::new("c", 2, 3, ConvSpec::new(3).padding(1), true, r)),
        s(1, 2, 6, 6),
    );
    fd_audit_layer(
        |r| Box::new(Conv2dLayer::new("c", 3, 2, ConvSpec::new(1), false, r)),
        s(1, 3, 5, 5),
    );
    fd_audit_layer(
        |r| {
            Box::new(Conv2dLayer::new(
                "c",
                2,
                2,
                ConvSpec::new(3).stride(2).padding(1).groups(2),
                false,
                r,
            ))
        },
        s(1, 2, 6, 6),
    );
    for (kind, in_c, out_c, stride, shape) in [
        (PdcKind::Central, 2, 2, 1, s(1, 2, 6, 6)),
        (PdcKind::Angular, 1, 2, 2, s(1, 1, 7, 7)),
        (PdcKind::Radial, 1, 1, 1, s(1, 1, 8, 8)),
        (PdcKind::Vanilla, 2, 2, 1, s(1, 2, 6, 6)),
    ] {
        fd_audit_layer(
            move |r| {
                Box::new(pidinet::layers::PdcConvLayer::new(
                    "p", kind, in_c, out_c, stride, 1, true, r,
                ))
            },
            shape,
        );
    }
    fd_audit_layer(|_| Box::new(Pool2x2Layer::new(PoolMode::Max)), s(1, 3, 6, 6));
    fd_audit_layer(|_| Box::new(Pool2x2Layer::new(PoolMode::Avg)), s(1, 3, 6, 6));
    fd_audit_layer(|_| Box::new(ReplicaPoolLayer::new(2, 2)), s(1, 4, 4, 4));
    fd_audit_layer(|_| Box::new(ReluLayer::new()), s(1, 2, 5, 5));
    fd_audit_layer(|_| Box::new(PreluLayer::new("a", 3)), s(1, 3, 5, 5));
    fd_audit_layer(|_| Box::new(SigmoidLayer::new()), s(1, 2, 4, 4));
    fd_audit_layer(|_| Box::new(BatchNormLayer::new("b", 3)), s(2, 3, 4, 4));
    fd_audit_layer(|r| Box::new(Cdcm::new("d", 4, 2, r).unwrap()), s(1, 4, 8, 8));
    fd_audit_layer(|r| Box::new(Csam::new("s", 4, r)), s(1, 4, 6, 6));
    fd_audit_layer(|_| Box::new(UpsampleLayer::new(2)), s(1, 2, 4, 4));

    // Loss heads, probed directly on their scalar outputs.
    const H: f64 = 1e-6;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let shape = s(2, 1, 4, 4);
        let mut gt = Tensor::zeros(shape);
        for v in gt.data_mut() {
            *v = [0.0, 0.0, 0.2, 0.6, 1.0][rng.gen_range(0..5)];
        }
        let pred = rand_tensor(shape, 0.05, 0.95, &mut rng);
        let out = edge_loss(&[pred.clone()], &gt, 1.1, 0.3).unwrap();
        for i in spread_probes(shape.len(), 32) {
            let mut p2 = pred.clone();
            p2.data_mut()[i] += H;
            let up = edge_loss(&[p2.clone()], &gt, 1.1, 0.3).unwrap().loss;
            p2.data_mut()[i] -= 2.0 * H;
            let down = edge_loss(&[p2], &gt, 1.1, 0.3).unwrap().loss;
            fd_scalar(out.grads[0].data()[i], (up - down) / (2.0 * H));
        }

        let logits = rand_tensor(s(3, 5, 1, 1), -1.5, 1.5, &mut rng);
        let labels = [0usize, 3, 4];
        let ce = cross_entropy(&logits, &labels).unwrap();
        for i in 0..logits.len() {
            let mut l2 = logits.clone();
            l2.data_mut()[i] += H;
            let up = cross_entropy(&l2, &labels).unwrap().loss;
            l2.data_mut()[i] -= 2.0 * H;
            let down = cross_entropy(&l2, &labels).unwrap().loss;
            fd_scalar(ce.grad.data()[i], (up - down) / (2.0 * H));
        }
    }
    assert!(start.elapsed() < Duration::from_secs(300));
}

// ---------------------------------------------------------------------------
// Replica pooling
// ---------------------------------------------------------------------------

fn replica_pool_reference(x: &Tensor<f64>, m: usize, nseg: usize) -> Tensor<f64> {
    let s = x.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut pooled = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for q in 0..ow {
                    let sum = x.at(n, c, 2 * y, 2 * q)
                        + x.at(n, c, 2 * y, 2 * q + 1)
                        + x.at(n, c, 2 * y + 1, 2 * q)
                        + x.at(n, c, 2 * y + 1, 2 * q + 1);
                    pooled.set(n, c, y, q, sum / 4.0);
                }
            }
        }
    }
    // Aggregates average `nseg` consecutive channels, so c/nseg of them.
    let groups = s.c / nseg;
    let mut out = Tensor::zeros(Shape::new(s.n, m * s.c + groups, oh, ow));
    for n in 0..s.n {
        for rep in 0..m {
            for c in 0..s.c {
                for y in 0..oh {
                    for q in 0..ow {
                        out.set(n, rep * s.c + c, y, q, pooled.at(n, c, y, q));
                    }
                }
            }
        }
        for g in 0..groups {
            for y in 0..oh {
                for q in 0..ow {
                    let mut acc = 0.0;
                    for c in g * nseg..(g + 1) * nseg {
                        acc += pooled.at(n, c, y, q);
                    }
                    out.set(n, m * s.c + g, y, q, acc / nseg as f64);
                }
            }
        }
    }
    out
}

#[test]
fn replica_pool_matches_hand_trace_and_brute_force() {
    let mut x = Tensor::zeros(Shape::new(1, 4, 4, 4));
    for c in 0..4 {
        for y in 0..4 {
            for q in 0..4 {
                x.set(0, c, y, q, c as f64);
            }
        }
    }
    let mut layer = ReplicaPoolLayer::new(2, 2);
    let y = layer.forward(&x, false).unwrap();
    assert_eq!(y.shape(), Shape::new(1, 10, 2, 2));
    let want = [0.0, 1.0, 2.0, 3.0, 0.0, 1.0, 2.0, 3.0, 0.5, 2.5];
    for (c, &v) in want.iter().enumerate() {
        for i in 0..4 {
            assert_eq!(y.data()[c * 4 + i], v, "channel {c}");
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(29);
    for _ in 0..200 {
        let m = rng.gen_range(1..=3);
        let nseg = rng.gen_range(1..=3);
        let c = nseg * rng.gen_range(1..=4);
        let shape = Shape::new(
            rng.gen_range(1..=2),
            c,
            2 * rng.gen_range(1..=4),
            2 * rng.gen_range(1..=4),
        );
        let x = rand_tensor(shape, -2.0, 2.0, &mut rng);
        let mut layer = ReplicaPoolLayer::new(m, nseg);
        let got = layer.forward(&x, false).unwrap();
        let want = replica_pool_reference(&x, m, nseg);
        assert_eq!(got.shape(), want.shape());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }
}

// ---------------------------------------------------------------------------
// Cost model against the published complexity numbers
// ---------------------------------------------------------------------------

#[test]
fn cost_counter_matches_published_rows() {
    let start = Instant::now();
    let input = Shape::new(1, 3, 224, 224);
    let mut rng = ChaCha8Rng::seed_from_u64(31);

    let net = resnet18::<f32>(1000, &mut rng);
    let report = count_ops_resnet18(&net, input).unwrap();
    let flops = report.flops as f64;
    assert!((flops - 17.70e8).abs() / 17.70e8 < 0.05, "flops {flops:.3e}");
    let params = report.fp_params as f64;
    assert!((params - 11.18e6).abs() / 11.18e6 < 0.02, "params {params:.3e}");
    let mem = report.memory_bits as f64;
    assert!((mem - 358e6).abs() / 358e6 < 0.02, "memory {mem:.3e}");

    let net = bireal18::<f32>(1000, &mut rng);
    let report = count_ops_bireal18(&net, input).unwrap();
    let flops = report.flops as f64;
    let bops = report.bops as f64;
    assert!((flops - 1.42e8).abs() / 1.42e8 < 0.10, "flops {flops:.3e}");
    assert!((bops - 16.76e8).abs() / 16.76e8 < 0.10, "bops {bops:.3e}");
    assert!((report.ops - 1.69e8).abs() / 1.69e8 < 0.10, "ops {:.3e}", report.ops);
    assert_eq!(report.ops, flops + bops / 64.0);

    assert!(start.elapsed() < Duration::from_secs(10));
}

// ---------------------------------------------------------------------------
// Edge loss hand values
// ---------------------------------------------------------------------------

#[test]
fn edge_loss_reproduces_hand_values() {
    // Five pixels, four unannotated and one certain edge: the zero fraction
    // is 0.8, so the negative weight is 1.1 * (1 - 0.8) = 0.22 and each
    // p = 0.5 miss costs 0.22 * ln 2. The near-perfect positive contributes
    // only through the 1e-7 probability clamp.
    let gt = Tensor::from_vec(Shape::new(1, 1, 1, 5), vec![0.0f64, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let pred = Tensor::from_vec(Shape::new(1, 1, 1, 5), vec![0.5, 0.5, 0.5, 0.5, 1.0]).unwrap();
    let out = edge_loss(&[pred], &gt, 1.1, 0.3).unwrap();
    let clamp_term = -0.8 * (1.0f64 - 1e-7).ln();
    let want = 4.0 * 0.22 * 2.0f64.ln() + clamp_term;
    assert!((out.loss - want).abs() < 1e-10, "{} vs {want}", out.loss);
    assert!(clamp_term < 1e-6, "a perfect positive costs nothing");

    // Values inside the disputed band (0, 0.3) contribute neither loss nor
    // gradient, no matter the prediction.
    let gt = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.0f64, 0.2, 1.0]).unwrap();
    let pred = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![0.3, 0.9, 0.6]).unwrap();
    let out = edge_loss(&[pred.clone()], &gt, 1.1, 0.3).unwrap();
    let g = out.grads[0].data();
    assert_ne!(g[0], 0.0);
    assert_eq!(g[1], 0.0);
    assert_ne!(g[2], 0.0);

    let mut flipped = pred.clone();
    flipped.data_mut()[1] = 0.05;
    let out2 = edge_loss(&[flipped], &gt, 1.1, 0.3).unwrap();
    assert_eq!(out.loss, out2.loss);

    let gt = Tensor::full(Shape::new(1, 1, 2, 2), 0.25f64);
    let pred = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.1, 0.5, 0.9, 0.99]).unwrap();
    let out = edge_loss(&[pred], &gt, 1.1, 0.3).unwrap();
    assert_eq!(out.loss, 0.0);
    assert!(out.grads[0].data().iter().all(|&v| v == 0.0));
}

// ---------------------------------------------------------------------------
// Desk-scale training
// ---------------------------------------------------------------------------

#[test]
fn tiny_edge_network_learns_synthetic_boundaries() {
    let start = Instant::now();
    let train = synth_edge_dataset(11, 512, 64);
    let held = synth_edge_dataset(12, 64, 64);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = build_pidinet::<f32>(&NetworkSpec::edge_tiny(), &mut rng).unwrap();
    let cfg = TrainCfg {
        epochs: 10,
        batch: 8,
        seed: 3,
        schedule: (0.02, vec![8], 0.1),
        eval_cap: 0,
    };
    let hist = train_edge(&mut net, &train, &cfg).unwrap();
    assert!(
        hist[9].loss < 0.5 * hist[0].loss,
        "loss {} -> {}",
        hist[0].loss,
        hist[9].loss
    );
    let f1 = eval_edge_f1(&mut net, &held, 0.5).unwrap();
    assert!(f1 >= 0.70, "held-out F1 {f1}");

    // Same seeds, fresh state: the first epoch must replay bit for bit.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net2 = build_pidinet::<f32>(&NetworkSpec::edge_tiny(), &mut rng).unwrap();
    let rerun = train_edge(&mut net2, &train, &TrainCfg { epochs: 1, ..cfg }).unwrap();
    assert_eq!(rerun[0].loss, hist[0].loss);

    assert!(start.elapsed() < scaled_minutes(15));
}

#[test]
fn binary_classifier_reaches_accuracy_and_hybrid_is_not_worse() {
    let start = Instant::now();
    let train = synth_cls_dataset(21, 8000, 32, 10).unwrap();
    let test = synth_cls_dataset(22, 1000, 32, 10).unwrap();

    let run = |xi: f64, seed: u64| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = build_bipidinet::<f32>(&NetworkSpec::classify_small(xi, 10), &mut rng).unwrap();
        let cfg = TrainCfg {
            epochs: 10,
            batch: 32,
            seed,
            schedule: (0.001, vec![], 0.1),
            eval_cap: 0,
        };
        train_classifier(&mut net, &train, &cfg).unwrap();
        eval_accuracy(&mut net, &test).unwrap()
    };

    let hybrid: Vec<f64> = (1..=3).map(|s| run(0.2, s)).collect();
    let plain: Vec<f64> = (1..=3).map(|s| run(0.0, s)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mh, mp) = (mean(&hybrid), mean(&plain));
    assert!(mh >= 0.90, "hybrid accuracies {hybrid:?}");
    assert!(mh >= mp - 0.005, "hybrid {mh} vs plain {mp}");

    assert!(start.elapsed() < scaled_minutes(20));
}

// ---------------------------------------------------------------------------
// Feature spectra
// ---------------------------------------------------------------------------

#[test]
fn difference_features_keep_more_high_frequency_energy() {
    let images = synth_edge_dataset(41, 100, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut diff = BiPdcLayer::<f32>::new("d", PdcKind::Central, 3, 8, 1, &mut rng).unwrap();
    let spec = BinaryConvSpec::new(ConvSpec::new(3).padding(1));
    let mut van = BinaryConvLayer::<f32>::new("v", 3, 8, spec, &mut rng);

    let mut wins = 0;
    for sample in &images {
        let hf_diff = layer_feature_spectrum(&mut diff, &sample.image)
            .unwrap()
            .high_freq_ratio();
        let hf_van = layer_feature_spectrum(&mut van, &sample.image)
            .unwrap()
            .high_freq_ratio();
        if hf_diff > hf_van {
            wins += 1;
        }
    }
    let p = sign_test_p(wins, images.len());
    assert!(p < 0.05, "wins {wins}/100, p = {p:.3e}");
}

// ---------------------------------------------------------------------------
// Export fidelity
// ---------------------------------------------------------------------------

#[test]
fn folded_export_reproduces_edge_maps_to_one_gray_level() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut net = build_pidinet::<f32>(&NetworkSpec::edge_tiny(), &mut rng).unwrap();
    let images = synth_edge_dataset(48, 20, 32);

    let originals: Vec<Tensor<f32>> = images
        .iter()
        .map(|s| net.forward(&s.image, false).unwrap().pop().unwrap())
        .collect();

    let (folded_spec, params) = net.export_reparam().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut folded = build_pidinet::<f32>(&folded_spec, &mut rng).unwrap();
    folded.load_params(&params).unwrap();

    for (sample, orig) in images.iter().zip(&originals) {
        let redone = folded.forward(&sample.image, false).unwrap().pop().unwrap();
        let a = PnmImage::from_gray_tensor(orig).unwrap();
        let b = PnmImage::from_gray_tensor(&redone).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!(x.abs_diff(*y) <= 1, "{x} vs {y}");
        }
    }
}
