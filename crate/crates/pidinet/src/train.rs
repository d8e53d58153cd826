//! Training: the annotator-robust edge loss, softmax cross-entropy, Adam
//! with a multi-step schedule, deterministic train loops with NaN
//! diagnostics, and the evaluation metrics used by the acceptance gates.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{BiPiDiNet, PiDiNet};
use crate::error::{shape_err, Error, Result};
use crate::layers::Param;
use crate::synth::{stack_images, ClsSample, EdgeSample};
use crate::tensor::{Scalar, Tensor};

/// Loss weighting for positive-vs-negative imbalance.
pub const EDGE_LAMBDA: f64 = 1.1;
/// Consensus threshold: pixels with `0 < y < eta` are disputed and ignored.
pub const EDGE_ETA: f64 = 0.3;
/// Probability clamp before logarithms.
pub const PROB_EPS: f64 = 1e-7;

// ---------------------------------------------------------------------------
// Edge loss
// ---------------------------------------------------------------------------

pub struct EdgeLoss<T: Scalar> {
    pub loss: f64,
    /// One gradient per prediction map, same shapes.
    pub grads: Vec<Tensor<T>>,
}

/// Class-balanced edge loss over several sigmoid maps against one ground
/// truth. Per image: `beta` is the fraction of strictly-negative pixels,
/// `alpha = lambda * (1 - beta)`; negatives contribute `-alpha*ln(1-p)`,
/// confident positives (`y >= eta`) contribute `-beta*ln(p)`, disputed
/// pixels contribute exactly zero. Summed over pixels and maps, averaged
/// over the batch.
pub fn edge_loss<T: Scalar>(
    preds: &[Tensor<T>],
    gt: &Tensor<T>,
    lambda: f64,
    eta: f64,
) -> Result<EdgeLoss<T>> {
    if preds.is_empty() {
        shape_err!("edge loss needs at least one prediction map");
    }
    let gs = gt.shape();
    for p in preds {
        if p.shape() != gs {
            shape_err!("prediction shape {} vs ground truth {}", p.shape(), gs);
        }
    }
    if gs.c != 1 {
        shape_err!("edge maps are single-channel, got {}", gs.c);
    }
    let plane = gs.h * gs.w;
    let inv_n = 1.0 / gs.n as f64;
    // Per-image negative fraction.
    let mut beta = vec![0.0f64; gs.n];
    for n in 0..gs.n {
        let base = gs.idx(n, 0, 0, 0);
        let negs = gt.data()[base..base + plane]
            .iter()
            .filter(|&&y| y.to_f64() == 0.0)
            .count();
        beta[n] = negs as f64 / plane as f64;
    }
    let mut loss = 0.0f64;
    let mut grads = Vec::with_capacity(preds.len());
    for pred in preds {
        let mut g = Tensor::zeros(gs);
        for n in 0..gs.n {
            let alpha = lambda * (1.0 - beta[n]);
            let b = beta[n];
            let base = gs.idx(n, 0, 0, 0);
            for i in 0..plane {
                let y = gt.data()[base + i].to_f64();
                let p = pred.data()[base + i].to_f64().clamp(PROB_EPS, 1.0 - PROB_EPS);
                if y == 0.0 {
                    loss -= alpha * (1.0 - p).ln() * inv_n;
                    g.data_mut()[base + i] = T::from_f64(alpha / (1.0 - p) * inv_n);
                } else if y < eta {
                    // Disputed annotation: no contribution at all.
                } else {
                    loss -= b * p.ln() * inv_n;
                    g.data_mut()[base + i] = T::from_f64(-b / p * inv_n);
                }
            }
        }
        grads.push(g);
    }
    Ok(EdgeLoss { loss, grads })
}

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

pub struct CrossEntropy<T: Scalar> {
    pub loss: f64,
    pub grad: Tensor<T>,
}

/// Softmax cross-entropy on `(n, k, 1, 1)` logits, mean over the batch.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<CrossEntropy<T>> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 {
        shape_err!("logits must be (n, k, 1, 1), got {s}");
    }
    if labels.len() != s.n {
        shape_err!("{} labels for a batch of {}", labels.len(), s.n);
    }
    let k = s.c;
    let inv_n = 1.0 / s.n as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(s);
    for n in 0..s.n {
        let label = labels[n];
        if label >= k {
            shape_err!("label {label} out of range for {k} classes");
        }
        let row: Vec<f64> = (0..k).map(|c| logits.data()[n * k + c].to_f64()).collect();
        let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - maxv).exp()).sum();
        loss += (sum.ln() + maxv - row[label]) * inv_n;
        for c in 0..k {
            let soft = (row[c] - maxv).exp() / sum;
            let delta = if c == label { 1.0 } else { 0.0 };
            grad.data_mut()[n * k + c] = T::from_f64((soft - delta) * inv_n);
        }
    }
    Ok(CrossEntropy { loss, grad })
}

// ---------------------------------------------------------------------------
// Adam + schedule
// ---------------------------------------------------------------------------

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// One bias-corrected update over every parameter the visitor yields.
    /// Moments are keyed by parameter name and kept in f64.
    pub fn step<T: Scalar>(&mut self, visit: impl FnOnce(&mut dyn FnMut(&mut Param<T>))) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let moments = &mut self.moments;
        visit(&mut |p: &mut Param<T>| {
            let len = p.value.len();
            let (m, v) = moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; len], vec![0.0; len]));
            for i in 0..len {
                let g = p.grad.data()[i].to_f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                let cur = p.value.data()[i].to_f64();
                p.value.data_mut()[i] = T::from_f64(cur - update);
            }
        });
    }
}

/// Learning rate decayed by `gamma` at each milestone epoch (0-indexed).
pub struct MultiStepLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl MultiStepLr {
    pub fn new(base: f64, milestones: Vec<usize>, gamma: f64) -> MultiStepLr {
        MultiStepLr {
            base,
            milestones,
            gamma,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.base * self.gamma.powi(hits as i32)
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Running pixel counts for F1 at a fixed 0.5 decision threshold. Disputed
/// ground-truth pixels (`0 < y < eta`) are excluded from every count.
#[derive(Default)]
pub struct F1Tally {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl F1Tally {
    pub fn update<T: Scalar>(&mut self, pred: &Tensor<T>, gt: &Tensor<T>, eta: f64) -> Result<()> {
        if pred.shape() != gt.shape() {
            shape_err!("pred shape {} vs gt {}", pred.shape(), gt.shape());
        }
        for (p, y) in pred.data().iter().zip(gt.data()) {
            let y = y.to_f64();
            if y > 0.0 && y < eta {
                continue;
            }
            let hit = p.to_f64() >= 0.5;
            let pos = y >= eta;
            match (hit, pos) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            return 0.0;
        }
        2.0 * self.tp as f64 / denom as f64
    }
}

pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if labels.len() != s.n {
        shape_err!("{} labels for a batch of {}", labels.len(), s.n);
    }
    let mut hits = 0usize;
    for n in 0..s.n {
        let row = &logits.data()[n * s.c..(n + 1) * s.c];
        let mut best = 0;
        for c in 1..s.c {
            if row[c] > row[best] {
                best = c;
            }
        }
        hits += (best == labels[n]) as usize;
    }
    Ok(hits as f64 / s.n.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Train loops
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    /// Cumulative optimizer steps at the end of the epoch.
    pub step: usize,
    /// Mean step loss over the epoch.
    pub loss: f64,
    /// Task metric (F1 for edges, accuracy for classification) on a capped
    /// sample of the training data.
    pub metric: f64,
    pub lr: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("epoch,step,loss,metric,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.step, r.loss, r.metric, r.lr
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainCfg {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub schedule: (f64, Vec<usize>, f64),
    /// Cap on samples used for the per-epoch metric (0 disables it).
    pub eval_cap: usize,
}

impl TrainCfg {
    pub fn edge_default() -> TrainCfg {
        TrainCfg {
            epochs: 20,
            batch: 8,
            seed: 1,
            schedule: (0.005, vec![10, 16], 0.1),
            eval_cap: 64,
        }
    }

    pub fn classify_default() -> TrainCfg {
        TrainCfg {
            epochs: 10,
            batch: 32,
            seed: 1,
            schedule: (0.001, vec![], 0.1),
            eval_cap: 256,
        }
    }
}

fn shuffled_indices(len: usize, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        idx.swap(i, r.gen_range(0..=i));
    }
    idx
}

/// Abort diagnostics: name the first tensor holding a non-finite value.
fn nan_diagnostic<T: Scalar>(
    step_loss: f64,
    outputs: &[(&str, &Tensor<T>)],
    visit: impl FnOnce(&mut dyn FnMut(&mut Param<T>)),
) -> Error {
    for (name, t) in outputs {
        if let Some(i) = t.first_non_finite() {
            return Error::Numeric(format!(
                "loss {step_loss} is not finite; tensor '{name}' non-finite at flat index {i}"
            ));
        }
    }
    let mut found: Option<String> = None;
    visit(&mut |p: &mut Param<T>| {
        if found.is_some() {
            return;
        }
        if let Some(i) = p.value.first_non_finite() {
            found = Some(format!("parameter '{}' non-finite at flat index {i}", p.name));
        } else if let Some(i) = p.grad.first_non_finite() {
            found = Some(format!(
                "gradient of '{}' non-finite at flat index {i}",
                p.name
            ));
        }
    });
    Error::Numeric(match found {
        Some(m) => format!("loss {step_loss} is not finite; {m}"),
        None => format!("loss {step_loss} is not finite"),
    })
}

pub fn train_edge(
    net: &mut PiDiNet<f32>,
    data: &[EdgeSample],
    cfg: &TrainCfg,
) -> Result<Vec<HistoryRow>> {
    if data.is_empty() || cfg.batch == 0 || cfg.epochs == 0 {
        shape_err!("edge training needs data, a batch size and at least one epoch");
    }
    let schedule = MultiStepLr::new(cfg.schedule.0, cfg.schedule.1.clone(), cfg.schedule.2);
    let mut opt = Adam::new(schedule.base);
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        opt.lr = schedule.lr_at(epoch);
        let idx = shuffled_indices(data.len(), &mut r);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in idx.chunks(cfg.batch) {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data[i].image).collect();
            let gts: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data[i].gt).collect();
            let x = stack_images(&images)?;
            let y = stack_images(&gts)?;
            net.visit_params(&mut |p| p.zero_grad());
            let maps = net.forward(&x, true)?;
            let out = edge_loss(&maps, &y, EDGE_LAMBDA, EDGE_ETA)?;
            if !out.loss.is_finite() {
                let named: Vec<(&str, &Tensor<f32>)> = maps
                    .iter()
                    .enumerate()
                    .map(|(i, m)| (["side1", "side2", "side3", "side4", "fused"][i], m))
                    .collect();
                return Err(nan_diagnostic(out.loss, &named, |f| net.visit_params(f)));
            }
            net.backward(&out.grads)?;
            opt.step(|f| net.visit_params(f));
            epoch_loss += out.loss;
            epoch_steps += 1;
            steps += 1;
        }
        let metric = if cfg.eval_cap > 0 {
            let cap = cfg.eval_cap.min(data.len());
            let mut tally = F1Tally::default();
            for s in &data[..cap] {
                let maps = net.forward(&s.image, false)?;
                tally.update(maps.last().expect("five maps"), &s.gt, EDGE_ETA)?;
            }
            tally.f1()
        } else {
            0.0
        };
        history.push(HistoryRow {
            epoch,
            step: steps,
            loss: epoch_loss / epoch_steps.max(1) as f64,
            metric,
            lr: opt.lr,
        });
    }
    Ok(history)
}

pub fn train_classifier(
    net: &mut BiPiDiNet<f32>,
    data: &[ClsSample],
    cfg: &TrainCfg,
) -> Result<Vec<HistoryRow>> {
    if data.is_empty() || cfg.batch == 0 || cfg.epochs == 0 {
        shape_err!("classifier training needs data, a batch size and at least one epoch");
    }
    let schedule = MultiStepLr::new(cfg.schedule.0, cfg.schedule.1.clone(), cfg.schedule.2);
    let mut opt = Adam::new(schedule.base);
    let mut r = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut steps = 0usize;
    for epoch in 0..cfg.epochs {
        opt.lr = schedule.lr_at(epoch);
        let idx = shuffled_indices(data.len(), &mut r);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for chunk in idx.chunks(cfg.batch) {
            let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let x = stack_images(&images)?;
            net.visit_params(&mut |p| p.zero_grad());
            let logits = net.forward(&x, true)?;
            let out = cross_entropy(&logits, &labels)?;
            if !out.loss.is_finite() {
                return Err(nan_diagnostic(
                    out.loss,
                    &[("logits", &logits)],
                    |f| net.visit_params(f),
                ));
            }
            net.backward(&out.grad)?;
            opt.step(|f| net.visit_params(f));
            epoch_loss += out.loss;
            epoch_steps += 1;
            steps += 1;
        }
        let metric = if cfg.eval_cap > 0 {
            let cap = cfg.eval_cap.min(data.len());
            eval_accuracy(net, &data[..cap])?
        } else {
            0.0
        };
        history.push(HistoryRow {
            epoch,
            step: steps,
            loss: epoch_loss / epoch_steps.max(1) as f64,
            metric,
            lr: opt.lr,
        });
    }
    Ok(history)
}

/// Dataset F1 of the fused map at threshold 0.5.
pub fn eval_edge_f1(net: &mut PiDiNet<f32>, data: &[EdgeSample], eta: f64) -> Result<f64> {
    let mut tally = F1Tally::default();
    for s in data {
        let maps = net.forward(&s.image, false)?;
        tally.update(maps.last().expect("five maps"), &s.gt, eta)?;
    }
    Ok(tally.f1())
}

pub fn eval_accuracy(net: &mut BiPiDiNet<f32>, data: &[ClsSample]) -> Result<f64> {
    let mut hits = 0.0;
    let mut total = 0.0;
    for chunk in data.chunks(64) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.image).collect();
        let labels: Vec<usize> = chunk.iter().map(|s| s.label).collect();
        let logits = net.forward(&stack_images(&images)?, false)?;
        hits += accuracy(&logits, &labels)? * chunk.len() as f64;
        total += chunk.len() as f64;
    }
    Ok(hits / total.max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{build_bipidinet, build_pidinet, NetworkSpec};
    use crate::synth::{synth_cls_dataset, synth_edge_dataset};
    use crate::tensor::Shape;

    #[test]
    fn edge_loss_matches_hand_values() {
        // One pixel, y = 0, p = 0.5, beta forced to 0.8 by padding with
        // positives: use a 5-pixel map with four positives and one negative.
        let gt = Tensor::from_vec(Shape::new(1, 1, 1, 5), vec![0.0f64, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let pred = Tensor::from_vec(Shape::new(1, 1, 1, 5), vec![0.5f64, 1.0, 1.0, 1.0, 1.0]).unwrap();
        // beta = 1/5 = 0.2 here; easier: direct single-pixel checks below.
        let out = edge_loss(&[pred], &gt, EDGE_LAMBDA, EDGE_ETA).unwrap();
        // Negative pixel: alpha = 1.1 * (1 - 0.2) = 0.88 -> 0.88*ln2.
        // Positives at p=1 clamp to 1-1e-7: -0.2*ln(1-1e-7) each, ~2e-8.
        let expect = 0.88 * std::f64::consts::LN_2 + 4.0 * (0.2 * 1e-7);
        assert!((out.loss - expect).abs() < 1e-8, "{} vs {expect}", out.loss);

        // The stated single-pixel case: beta = 0.8 over a 5-pixel image
        // with four negatives... construct exactly: 4 zeros, 1 positive.
        let gt = Tensor::from_vec(Shape::new(1, 1, 1, 5), vec![0.0f64, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let pred =
            Tensor::from_vec(Shape::new(1, 1, 1, 5), vec![0.5f64, 1e-9, 1e-9, 1e-9, 0.5]).unwrap();
        let out = edge_loss(&[pred], &gt, 1.1, 0.3).unwrap();
        // beta = 0.8, alpha = 0.22. The p=0.5 negative contributes
        // 0.22*ln2; the p~0 negatives clamp to 1e-7 and contribute ~0;
        // the positive adds 0.8*ln2.
        let expect = 0.22 * std::f64::consts::LN_2 + 0.8 * std::f64::consts::LN_2
            - 3.0 * 0.22 * (1.0 - 1e-7_f64).ln();
        assert!((out.loss - expect).abs() < 1e-10, "{} vs {expect}", out.loss);
    }

    #[test]
    fn disputed_pixels_contribute_exactly_zero() {
        let gt = Tensor::from_vec(
            Shape::new(1, 1, 1, 6),
            vec![0.0f64, 0.25, 0.25, 0.5, 0.75, 1.0],
        )
        .unwrap();
        let p1 = Tensor::from_vec(
            Shape::new(1, 1, 1, 6),
            vec![0.3f64, 0.1, 0.9, 0.6, 0.7, 0.8],
        )
        .unwrap();
        // Perturb only the disputed pixels (gt = 0.25 < eta).
        let mut p2 = p1.clone();
        p2.data_mut()[1] = 0.99;
        p2.data_mut()[2] = 0.01;
        let a = edge_loss(&[p1], &gt, EDGE_LAMBDA, EDGE_ETA).unwrap();
        let b = edge_loss(&[p2], &gt, EDGE_LAMBDA, EDGE_ETA).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads[0].data()[1], 0.0);
        assert_eq!(a.grads[0].data()[2], 0.0);
    }

    #[test]
    fn edge_loss_gradient_matches_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let shape = Shape::new(2, 1, 4, 4);
        let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
        let gt = Tensor::from_vec(
            shape,
            (0..shape.len()).map(|_| levels[r.gen_range(0..5)]).collect(),
        )
        .unwrap();
        let pred: Tensor<f64> = Tensor::from_vec(
            shape,
            (0..shape.len()).map(|_| r.gen_range(0.05..0.95)).collect(),
        )
        .unwrap();
        let out = edge_loss(&[pred.clone()], &gt, EDGE_LAMBDA, EDGE_ETA).unwrap();
        let h = 1e-6;
        for i in 0..shape.len() {
            let mut plus = pred.clone();
            plus.data_mut()[i] += h;
            let mut minus = pred.clone();
            minus.data_mut()[i] -= h;
            let lp = edge_loss(&[plus], &gt, EDGE_LAMBDA, EDGE_ETA).unwrap().loss;
            let lm = edge_loss(&[minus], &gt, EDGE_LAMBDA, EDGE_ETA).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let an = out.grads[0].data()[i];
            let denom = fd.abs().max(an.abs()).max(1e-3);
            assert!(
                ((fd - an) / denom).abs() < 1e-4,
                "pixel {i}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn negative_disputed_positive_fractions_partition() {
        let mut r = ChaCha8Rng::seed_from_u64(22);
        let shape = Shape::new(1, 1, 8, 8);
        let levels = [0.0, 0.25, 0.5, 0.75, 1.0];
        let gt: Tensor<f64> = Tensor::from_vec(
            shape,
            (0..shape.len()).map(|_| levels[r.gen_range(0..5)]).collect(),
        )
        .unwrap();
        let total = shape.len() as f64;
        let neg = gt.data().iter().filter(|&&y| y == 0.0).count() as f64 / total;
        let disputed = gt
            .data()
            .iter()
            .filter(|&&y| y > 0.0 && y < EDGE_ETA)
            .count() as f64
            / total;
        let pos = gt.data().iter().filter(|&&y| y >= EDGE_ETA).count() as f64 / total;
        assert!((neg + disputed + pos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_and_matching_cases() {
        let k = 7;
        let logits = Tensor::full(Shape::new(2, k, 1, 1), 0.3f64);
        let out = cross_entropy(&logits, &[0, 5]).unwrap();
        assert!((out.loss - (k as f64).ln()).abs() < 1e-12);

        let mut hot = Tensor::zeros(Shape::new(1, 3, 1, 1));
        hot.data_mut()[1] = 50.0f64;
        let out = cross_entropy(&hot, &[1]).unwrap();
        assert!(out.loss < 1e-10, "{}", out.loss);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let mut r = ChaCha8Rng::seed_from_u64(23);
        let (n, k) = (4, 6);
        let logits: Tensor<f64> = Tensor::from_vec(
            Shape::new(n, k, 1, 1),
            (0..n * k).map(|_| r.gen_range(-3.0..3.0)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
        let out = cross_entropy(&logits, &labels).unwrap();
        let mut oracle = 0.0;
        for i in 0..n {
            let row: Vec<f64> = (0..k).map(|c| logits.data()[i * k + c]).collect();
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            oracle += (lse - row[labels[i]]) / n as f64;
        }
        assert!((out.loss - oracle).abs() < 1e-10);

        // Gradient check against finite differences.
        let h = 1e-6;
        for i in 0..n * k {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let fd = (cross_entropy(&plus, &labels).unwrap().loss
                - cross_entropy(&minus, &labels).unwrap().loss)
                / (2.0 * h);
            let an = out.grad.data()[i];
            assert!((fd - an).abs() < 1e-6, "{i}: {fd} vs {an}");
        }
    }

    #[test]
    fn adam_zero_grad_keeps_params_and_first_step_is_lr_sized() {
        let mut p = Param::new("p", Tensor::full(Shape::new(1, 1, 1, 4), 1.0f64));
        let mut opt = Adam::new(0.01);
        opt.step(|f| f(&mut p));
        assert!(p.value.data().iter().all(|&v| v == 1.0));

        let mut p = Param::new("p", Tensor::full(Shape::new(1, 1, 1, 4), 1.0f64));
        p.grad = Tensor::full(Shape::new(1, 1, 1, 4), 0.5f64);
        let mut opt = Adam::new(0.01);
        opt.step(|f| f(&mut p));
        for &v in p.value.data() {
            let moved = 1.0 - v;
            assert!((moved - 0.01).abs() / 0.01 < 1e-3, "step {moved}");
        }
    }

    #[test]
    fn schedule_decays_at_milestones() {
        let s = MultiStepLr::new(0.005, vec![10, 16], 0.1);
        assert_eq!(s.lr_at(0), 0.005);
        assert_eq!(s.lr_at(9), 0.005);
        assert!((s.lr_at(10) - 0.0005).abs() < 1e-15);
        assert!((s.lr_at(15) - 0.0005).abs() < 1e-15);
        assert!((s.lr_at(16) - 0.00005).abs() < 1e-15);
        assert!((s.lr_at(10) - 0.1 * s.lr_at(9)).abs() < 1e-15);
    }

    #[test]
    fn f1_counts_respect_the_dead_band() {
        let gt = Tensor::from_vec(
            Shape::new(1, 1, 1, 5),
            vec![0.0f64, 0.25, 0.5, 1.0, 0.0],
        )
        .unwrap();
        let pred = Tensor::from_vec(
            Shape::new(1, 1, 1, 5),
            vec![0.9f64, 0.9, 0.9, 0.1, 0.1],
        )
        .unwrap();
        let mut tally = F1Tally::default();
        tally.update(&pred, &gt, EDGE_ETA).unwrap();
        // Pixel 0: FP. Pixel 1: excluded. Pixel 2: TP. Pixel 3: FN.
        // Pixel 4: TN.
        assert_eq!((tally.tp, tally.fp, tally.fn_), (1, 1, 1));
        assert!((tally.f1() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn train_loops_are_deterministic_and_abort_on_poison() {
        let data = synth_edge_dataset(30, 8, 16);
        let mut spec = NetworkSpec::edge_tiny();
        spec.channels = 8;
        let cfg = TrainCfg {
            epochs: 2,
            batch: 4,
            seed: 5,
            schedule: (0.003, vec![1], 0.1),
            eval_cap: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = build_pidinet::<f32>(&spec, &mut rng).unwrap();
        let h1 = train_edge(&mut net, &data, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net2 = build_pidinet::<f32>(&spec, &mut rng).unwrap();
        let h2 = train_edge(&mut net2, &data, &cfg).unwrap();
        assert_eq!(h1, h2);
        assert!(h1.iter().all(|row| row.loss.is_finite()));
        assert!((h1[1].lr - 0.0003).abs() < 1e-12, "schedule applied");

        // Poison one parameter: the loop must abort naming a tensor.
        net.visit_params(&mut |p| {
            if p.name == "fusion.w" {
                p.value.data_mut()[0] = f32::NAN;
            }
        });
        let err = train_edge(&mut net, &data, &cfg).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("non-finite"), "{msg}");
    }

    #[test]
    fn classifier_loop_runs_and_improves_loss() {
        let data = synth_cls_dataset(31, 64, 16, 4).unwrap();
        let mut spec = NetworkSpec::classify_small(0.2, 4);
        spec.stage_widths = vec![8, 16, 32];
        spec.init_channels = 8;
        let cfg = TrainCfg {
            epochs: 3,
            batch: 16,
            seed: 7,
            schedule: (0.01, vec![], 0.1),
            eval_cap: 32,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net = build_bipidinet::<f32>(&spec, &mut rng).unwrap();
        let hist = train_classifier(&mut net, &data, &cfg).unwrap();
        assert_eq!(hist.len(), 3);
        assert!(hist.iter().all(|row| row.loss.is_finite()));
        assert!(
            hist.last().unwrap().loss < hist[0].loss,
            "{} -> {}",
            hist[0].loss,
            hist.last().unwrap().loss
        );
    }

    #[test]
    fn history_csv_has_the_documented_columns() {
        let rows = vec![HistoryRow {
            epoch: 0,
            step: 12,
            loss: 1.5,
            metric: 0.25,
            lr: 0.005,
        }];
        let csv = history_csv(&rows);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("epoch,step,loss,metric,lr"));
        assert_eq!(lines.next(), Some("0,12,1.5,0.25,0.005"));
    }
}
