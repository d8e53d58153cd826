//! Trainable layers: forward caches, hand-derived backward passes,
//! parameter visitors, and per-layer cost accounting.
//!
//! Every layer implements [`Layer`]: `forward` caches whatever `backward`
//! needs, `backward` *accumulates* into each parameter's `.grad` and
//! returns the gradient w.r.t. the input. Parameters carry stable names so
//! optimizers and checkpoints can key them.
//!
//! Cost accounting follows the convention used throughout: full-precision
//! convolutions and linear layers count multiply–accumulates, batch norm
//! counts 2 ops per element, binary convolutions count their binary MACs
//! (pixel-difference variants count one MAC per probe pair), and
//! activations/pooling/elementwise adds are free.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binary::{bipdc_backward, bipdc_float, sign, ste_backward, BinaryConvSpec};
use crate::error::{shape_err, Result};
use crate::ops::{
    conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward, pool2x2, prelu,
    prelu_backward, relu, relu_backward, sigmoid, sigmoid_backward, upsample_bilinear,
    upsample_bilinear_backward, ConvSpec, Pool2x2, PoolMode,
};
use crate::pdc::{
    pdc_forward_reparam, pdc_reparam_backward, reparameterize, same_padding, PdcKind,
    ProbePattern,
};
use crate::tensor::{Scalar, Shape, Tensor};

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }
}

/// Operation/parameter counts contributed by one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub flops: u64,
    pub bops: u64,
    pub fp_params: u64,
    pub b_params: u64,
}

impl LayerCost {
    pub fn add(&mut self, other: LayerCost) {
        self.flops += other.flops;
        self.bops += other.bops;
        self.fp_params += other.fp_params;
        self.b_params += other.b_params;
    }
}

pub trait Layer<T: Scalar> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>>;
    /// Gradient w.r.t. the input; parameter gradients accumulate in place.
    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        let _ = f;
    }
    /// Non-trainable tensors that still belong in checkpoints
    /// (e.g. batch-norm running statistics).
    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let _ = f;
    }
    /// Cost of one forward pass on `in_shape` plus the resulting shape.
    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)>;
}

pub fn he_normal<T: Scalar>(shape: Shape, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("std > 0");
    let data: Vec<T> = (0..shape.len())
        .map(|_| T::from_f64(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("lengths match")
}

fn take<C>(cache: &mut Option<C>, who: &str) -> Result<C> {
    match cache.take() {
        Some(c) => Ok(c),
        None => shape_err!("{who}: backward called without a cached forward"),
    }
}

// ---------------------------------------------------------------------------
// Full-precision convolution
// ---------------------------------------------------------------------------

pub struct Conv2dLayer<T: Scalar> {
    pub spec: ConvSpec,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        spec: ConvSpec,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cg = in_c / spec.groups;
        let wshape = Shape::new(out_c, cg, spec.kernel, spec.kernel);
        let weight = Param::new(format!("{name}.w"), he_normal(wshape, cg * spec.kernel * spec.kernel, rng));
        let bias = bias.then(|| Param::new(format!("{name}.b"), Tensor::zeros(Shape::new(out_c, 1, 1, 1))));
        Conv2dLayer {
            spec,
            weight,
            bias,
            cache: None,
        }
    }

    /// Multiply the freshly drawn weights by `gain`. He scaling assumes a
    /// ReLU follows; layers that feed a plain sum (residual branches,
    /// linear shortcuts) need smaller draws to keep activations bounded.
    pub fn init_gain(mut self, gain: f64) -> Self {
        let g = T::from_f64(gain);
        for w in self.weight.value.data_mut() {
            *w = *w * g;
        }
        self
    }
}

impl<T: Scalar> Layer<T> for Conv2dLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let y = conv2d(x, &self.weight.value, self.bias.as_ref().map(|b| &b.value), &self.spec)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.cache, "conv2d")?;
        let grads = conv2d_backward(&x, &self.weight.value, &self.spec, grad_out, self.bias.is_some())?;
        self.weight.grad.add_assign(&grads.w)?;
        if let (Some(b), Some(gb)) = (&mut self.bias, grads.bias) {
            b.grad.add_assign(&gb)?;
        }
        Ok(grads.x)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let (oh, ow) = self.spec.out_hw(in_shape.h, in_shape.w)?;
        let ws = self.weight.value.shape();
        let macs = (ws.n * oh * ow * ws.c * ws.h * ws.w) as u64;
        let mut fp = self.weight.value.len() as u64;
        if let Some(b) = &self.bias {
            fp += b.value.len() as u64;
        }
        Ok((
            LayerCost {
                flops: macs,
                fp_params: fp,
                ..Default::default()
            },
            Shape::new(in_shape.n, ws.n, oh, ow),
        ))
    }
}

// ---------------------------------------------------------------------------
// Pixel-difference convolution (and its vanilla cousin) as a layer
// ---------------------------------------------------------------------------

pub struct PdcConvLayer<T: Scalar> {
    pub kind: PdcKind,
    pub spec: ConvSpec,
    /// Pair weights `(outC, inC/g, 1, m)` for difference kinds, a full
    /// `(outC, inC/g, k, k)` kernel for the vanilla kind.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> PdcConvLayer<T> {
    pub fn new(
        name: &str,
        kind: PdcKind,
        in_c: usize,
        out_c: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let window = match ProbePattern::of(kind) {
            Some(p) => p.window,
            None => 3,
        };
        let spec = ConvSpec::new(window)
            .stride(stride)
            .padding(same_padding(kind))
            .groups(groups);
        let cg = in_c / groups;
        let wshape = match ProbePattern::of(kind) {
            Some(p) => Shape::new(out_c, cg, 1, p.m()),
            None => Shape::new(out_c, cg, window, window),
        };
        let weight = Param::new(format!("{name}.w"), he_normal(wshape, cg * window * window, rng));
        let bias = bias.then(|| Param::new(format!("{name}.b"), Tensor::zeros(Shape::new(out_c, 1, 1, 1))));
        PdcConvLayer {
            kind,
            spec,
            weight,
            bias,
            cache: None,
        }
    }

    /// A plain convolution sized for an already-folded difference kernel:
    /// explicit window with same-padding. Used when rebuilding a network
    /// from a re-parameterized export.
    pub fn vanilla_window(
        name: &str,
        window: usize,
        in_c: usize,
        out_c: usize,
        stride: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let spec = ConvSpec::new(window)
            .stride(stride)
            .padding(window / 2)
            .groups(groups);
        let cg = in_c / groups;
        let wshape = Shape::new(out_c, cg, window, window);
        let weight = Param::new(format!("{name}.w"), he_normal(wshape, cg * window * window, rng));
        let bias = bias.then(|| Param::new(format!("{name}.b"), Tensor::zeros(Shape::new(out_c, 1, 1, 1))));
        PdcConvLayer {
            kind: PdcKind::Vanilla,
            spec,
            weight,
            bias,
            cache: None,
        }
    }

    /// The equivalent vanilla kernel (difference kinds fold; vanilla is a
    /// copy).
    pub fn folded_kernel(&self) -> Result<Tensor<T>> {
        match ProbePattern::of(self.kind) {
            Some(p) => reparameterize(&self.weight.value, &p),
            None => Ok(self.weight.value.clone()),
        }
    }

    fn add_bias(&self, y: &mut Tensor<T>) {
        if let Some(b) = &self.bias {
            let ys = y.shape();
            let bd = b.value.data();
            let yd = y.data_mut();
            for n in 0..ys.n {
                for c in 0..ys.c {
                    let base = ys.idx(n, c, 0, 0);
                    for i in 0..ys.h * ys.w {
                        yd[base + i] += bd[c];
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Layer<T> for PdcConvLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let mut y = match ProbePattern::of(self.kind) {
            Some(p) => pdc_forward_reparam(x, &self.weight.value, &p, &self.spec)?,
            None => conv2d(x, &self.weight.value, None, &self.spec)?,
        };
        self.add_bias(&mut y);
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.cache, "pdc conv")?;
        let gx = match ProbePattern::of(self.kind) {
            Some(p) => {
                let (gx, gw) =
                    pdc_reparam_backward(&x, &self.weight.value, &p, &self.spec, grad_out)?;
                self.weight.grad.add_assign(&gw)?;
                gx
            }
            None => {
                let grads = conv2d_backward(&x, &self.weight.value, &self.spec, grad_out, false)?;
                self.weight.grad.add_assign(&grads.w)?;
                grads.x
            }
        };
        if let Some(b) = &mut self.bias {
            let gs = grad_out.shape();
            let gd = grad_out.data();
            let bg = b.grad.data_mut();
            for n in 0..gs.n {
                for c in 0..gs.c {
                    let base = gs.idx(n, c, 0, 0);
                    let mut acc = T::ZERO;
                    for i in 0..gs.h * gs.w {
                        acc += gd[base + i];
                    }
                    bg[c] += acc;
                }
            }
        }
        Ok(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let (oh, ow) = self.spec.out_hw(in_shape.h, in_shape.w)?;
        let ws = self.weight.value.shape();
        // Deployment cost: the folded kernel is a vanilla k×k conv.
        let macs = (ws.n * oh * ow * ws.c * self.spec.kernel * self.spec.kernel) as u64;
        let mut fp = self.weight.value.len() as u64;
        if let Some(b) = &self.bias {
            fp += b.value.len() as u64;
        }
        Ok((
            LayerCost {
                flops: macs,
                fp_params: fp,
                ..Default::default()
            },
            Shape::new(in_shape.n, ws.n, oh, ow),
        ))
    }
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

pub struct BatchNormLayer<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    name: String,
    cache: Option<BnCache<T>>,
}

struct BnCache<T: Scalar> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    train: bool,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(name: &str, c: usize) -> Self {
        let cs = Shape::new(1, c, 1, 1);
        BatchNormLayer {
            gamma: Param::new(format!("{name}.gamma"), Tensor::full(cs, T::ONE)),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros(cs)),
            running_mean: Tensor::zeros(cs),
            running_var: Tensor::full(cs, T::ONE),
            momentum: 0.1,
            eps: 1e-5,
            name: name.to_string(),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BatchNormLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let xs = x.shape();
        let c = self.gamma.value.len();
        if xs.c != c {
            shape_err!("batch norm expects {} channels, got {}", c, xs.c);
        }
        let m = (xs.n * xs.h * xs.w) as f64;
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        if train {
            for ch in 0..c {
                let mut acc = T::ZERO;
                for n in 0..xs.n {
                    let base = xs.idx(n, ch, 0, 0);
                    for i in 0..xs.h * xs.w {
                        acc += x.data()[base + i];
                    }
                }
                mean[ch] = acc * T::from_f64(1.0 / m);
                let mut vacc = T::ZERO;
                for n in 0..xs.n {
                    let base = xs.idx(n, ch, 0, 0);
                    for i in 0..xs.h * xs.w {
                        let d = x.data()[base + i] - mean[ch];
                        vacc += d * d;
                    }
                }
                var[ch] = vacc * T::from_f64(1.0 / m);
            }
            let mom = T::from_f64(self.momentum);
            let keep = T::from_f64(1.0 - self.momentum);
            for ch in 0..c {
                self.running_mean.data_mut()[ch] =
                    self.running_mean.data()[ch] * keep + mean[ch] * mom;
                self.running_var.data_mut()[ch] =
                    self.running_var.data()[ch] * keep + var[ch] * mom;
            }
        } else {
            mean.copy_from_slice(self.running_mean.data());
            var.copy_from_slice(self.running_var.data());
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::ONE / (v + T::from_f64(self.eps)).sqrt())
            .collect();
        let mut xhat = Tensor::zeros(xs);
        {
            let xd = x.data();
            let hd = xhat.data_mut();
            for n in 0..xs.n {
                for ch in 0..c {
                    let base = xs.idx(n, ch, 0, 0);
                    for i in 0..xs.h * xs.w {
                        hd[base + i] = (xd[base + i] - mean[ch]) * inv_std[ch];
                    }
                }
            }
        }
        let mut y = Tensor::zeros(xs);
        {
            let hd = xhat.data();
            let yd = y.data_mut();
            let g = self.gamma.value.data();
            let b = self.beta.value.data();
            for n in 0..xs.n {
                for ch in 0..c {
                    let base = xs.idx(n, ch, 0, 0);
                    for i in 0..xs.h * xs.w {
                        yd[base + i] = hd[base + i] * g[ch] + b[ch];
                    }
                }
            }
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            train,
        });
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let BnCache {
            xhat,
            inv_std,
            train,
        } = take(&mut self.cache, "batch norm")?;
        let xs = xhat.shape();
        let c = self.gamma.value.len();
        let m = T::from_f64((xs.n * xs.h * xs.w) as f64);
        let mut gx = Tensor::zeros(xs);
        for ch in 0..c {
            let mut sum_g = T::ZERO;
            let mut sum_gx = T::ZERO;
            for n in 0..xs.n {
                let base = xs.idx(n, ch, 0, 0);
                for i in 0..xs.h * xs.w {
                    let g = grad_out.data()[base + i];
                    sum_g += g;
                    sum_gx += g * xhat.data()[base + i];
                }
            }
            self.beta.grad.data_mut()[ch] += sum_g;
            self.gamma.grad.data_mut()[ch] += sum_gx;
            let gamma = self.gamma.value.data()[ch];
            let scale = gamma * inv_std[ch];
            for n in 0..xs.n {
                let base = xs.idx(n, ch, 0, 0);
                for i in 0..xs.h * xs.w {
                    let g = grad_out.data()[base + i];
                    gx.data_mut()[base + i] = if train {
                        scale * (g - sum_g / m - xhat.data()[base + i] * sum_gx / m)
                    } else {
                        scale * g
                    };
                }
            }
        }
        Ok(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        let rm = format!("{}.running_mean", self.name);
        let rv = format!("{}.running_var", self.name);
        f(&rm, &mut self.running_mean);
        f(&rv, &mut self.running_var);
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        Ok((
            LayerCost {
                flops: 2 * in_shape.len() as u64 / in_shape.n as u64,
                fp_params: 2 * self.gamma.value.len() as u64,
                ..Default::default()
            },
            in_shape,
        ))
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub struct ReluLayer<T: Scalar> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> ReluLayer<T> {
    pub fn new() -> Self {
        ReluLayer { cache: None }
    }
}

impl<T: Scalar> Default for ReluLayer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for ReluLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        self.cache = Some(x.clone());
        Ok(relu(x))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.cache, "relu")?;
        relu_backward(grad_out, &x)
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        Ok((LayerCost::default(), in_shape))
    }
}

pub struct PreluLayer<T: Scalar> {
    pub alpha: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> PreluLayer<T> {
    pub fn new(name: &str, c: usize) -> Self {
        PreluLayer {
            alpha: Param::new(
                format!("{name}.alpha"),
                Tensor::full(Shape::new(c, 1, 1, 1), T::from_f64(0.25)),
            ),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for PreluLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        self.cache = Some(x.clone());
        prelu(x, &self.alpha.value)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.cache, "prelu")?;
        let (gx, ga) = prelu_backward(grad_out, &x, &self.alpha.value)?;
        self.alpha.grad.add_assign(&ga)?;
        Ok(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.alpha);
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        Ok((
            LayerCost {
                // Compare-and-scale per element; unlike a plain ReLU this
                // cannot fold into a preceding binary convolution.
                flops: 2 * in_shape.len() as u64 / in_shape.n as u64,
                fp_params: self.alpha.value.len() as u64,
                ..Default::default()
            },
            in_shape,
        ))
    }
}

pub struct SigmoidLayer<T: Scalar> {
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> SigmoidLayer<T> {
    pub fn new() -> Self {
        SigmoidLayer { cache: None }
    }
}

impl<T: Scalar> Default for SigmoidLayer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for SigmoidLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let y = sigmoid(x);
        self.cache = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let y = take(&mut self.cache, "sigmoid")?;
        sigmoid_backward(grad_out, &y)
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        Ok((LayerCost::default(), in_shape))
    }
}

// ---------------------------------------------------------------------------
// Pooling / resampling
// ---------------------------------------------------------------------------

pub struct Pool2x2Layer<T: Scalar> {
    pub mode: PoolMode,
    cache: Option<Pool2x2<T>>,
}

impl<T: Scalar> Pool2x2Layer<T> {
    pub fn new(mode: PoolMode) -> Self {
        Pool2x2Layer { mode, cache: None }
    }
}

impl<T: Scalar> Layer<T> for Pool2x2Layer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let pooled = pool2x2(x, self.mode)?;
        let y = pooled.y.clone();
        self.cache = Some(pooled);
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = take(&mut self.cache, "pool2x2")?;
        pooled.backward(grad_out)
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        if in_shape.h % 2 != 0 || in_shape.w % 2 != 0 {
            shape_err!("pool2x2 needs even spatial dims, got {}", in_shape);
        }
        Ok((
            LayerCost::default(),
            Shape::new(in_shape.n, in_shape.c, in_shape.h / 2, in_shape.w / 2),
        ))
    }
}

pub struct UpsampleLayer<T: Scalar> {
    pub factor: usize,
    in_shape: Option<Shape>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> UpsampleLayer<T> {
    pub fn new(factor: usize) -> Self {
        UpsampleLayer {
            factor,
            in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Layer<T> for UpsampleLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let s = x.shape();
        self.in_shape = Some(s);
        if self.factor == 1 {
            return Ok(x.clone());
        }
        upsample_bilinear(x, s.h * self.factor, s.w * self.factor)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let s = take(&mut self.in_shape, "upsample")?;
        if self.factor == 1 {
            return Ok(grad_out.clone());
        }
        upsample_bilinear_backward(grad_out, s.h, s.w)
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        Ok((
            LayerCost::default(),
            Shape::new(
                in_shape.n,
                in_shape.c,
                in_shape.h * self.factor,
                in_shape.w * self.factor,
            ),
        ))
    }
}

pub struct GlobalAvgPoolLayer<T: Scalar> {
    in_shape: Option<Shape>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> GlobalAvgPoolLayer<T> {
    pub fn new() -> Self {
        GlobalAvgPoolLayer {
            in_shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Default for GlobalAvgPoolLayer<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPoolLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        self.in_shape = Some(x.shape());
        Ok(global_avg_pool(x))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let s = take(&mut self.in_shape, "global avg pool")?;
        global_avg_pool_backward(grad_out, s)
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        Ok((
            LayerCost::default(),
            Shape::new(in_shape.n, in_shape.c, 1, 1),
        ))
    }
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

pub struct LinearLayer<T: Scalar> {
    /// Weight as `(out, in, 1, 1)`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    /// Whether this layer participates in cost totals (classifier heads
    /// conventionally do not).
    pub counted: bool,
    cache: Option<Tensor<T>>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(name: &str, in_f: usize, out_f: usize, counted: bool, rng: &mut ChaCha8Rng) -> Self {
        LinearLayer {
            weight: Param::new(
                format!("{name}.w"),
                he_normal(Shape::new(out_f, in_f, 1, 1), in_f, rng),
            ),
            bias: Param::new(format!("{name}.b"), Tensor::zeros(Shape::new(out_f, 1, 1, 1))),
            counted,
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for LinearLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let xs = x.shape();
        let ws = self.weight.value.shape();
        if xs.c != ws.c || xs.h != 1 || xs.w != 1 {
            shape_err!("linear expects (n,{},1,1), got {}", ws.c, xs);
        }
        let mut y = Tensor::zeros(Shape::new(xs.n, ws.n, 1, 1));
        for n in 0..xs.n {
            for o in 0..ws.n {
                let mut acc = self.bias.value.data()[o];
                for i in 0..ws.c {
                    acc += x.data()[n * xs.c + i] * self.weight.value.data()[o * ws.c + i];
                }
                y.data_mut()[n * ws.n + o] = acc;
            }
        }
        self.cache = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = take(&mut self.cache, "linear")?;
        let xs = x.shape();
        let ws = self.weight.value.shape();
        let mut gx = Tensor::zeros(xs);
        for n in 0..xs.n {
            for o in 0..ws.n {
                let g = grad_out.data()[n * ws.n + o];
                self.bias.grad.data_mut()[o] += g;
                for i in 0..ws.c {
                    self.weight.grad.data_mut()[o * ws.c + i] += g * x.data()[n * xs.c + i];
                    gx.data_mut()[n * xs.c + i] += g * self.weight.value.data()[o * ws.c + i];
                }
            }
        }
        Ok(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let ws = self.weight.value.shape();
        let cost = if self.counted {
            LayerCost {
                flops: (ws.n * ws.c) as u64,
                fp_params: (self.weight.value.len() + self.bias.value.len()) as u64,
                ..Default::default()
            }
        } else {
            LayerCost::default()
        };
        Ok((cost, Shape::new(in_shape.n, ws.n, 1, 1)))
    }
}

// ---------------------------------------------------------------------------
// Binary convolution layers (latent full-precision weights, STE backward)
// ---------------------------------------------------------------------------

pub struct BinaryConvLayer<T: Scalar> {
    pub spec: BinaryConvSpec,
    /// Latent full-precision weights, binarized on every forward pass.
    pub weight: Param<T>,
    cache: Option<(Tensor<T>, Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> BinaryConvLayer<T> {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        spec: BinaryConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cg = in_c / spec.conv.groups;
        let k = spec.conv.kernel;
        let wshape = Shape::new(out_c, cg, k, k);
        BinaryConvLayer {
            spec,
            weight: Param::new(format!("{name}.w"), he_normal(wshape, cg * k * k, rng)),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for BinaryConvLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let tau = T::from_f64(self.spec.threshold);
        let sx = sign(x, tau);
        let sw = sign(&self.weight.value, T::ZERO);
        let y = conv2d(&sx, &sw, None, &self.spec.conv)?;
        self.cache = Some((x.clone(), sx, sw));
        match self.spec.scale_mode {
            crate::binary::ScaleMode::None => Ok(y),
            crate::binary::ScaleMode::PerChannelMeanAbs => {
                let ws = self.weight.value.shape();
                let per = ws.c * ws.h * ws.w;
                let mut scaled = y;
                let ys = scaled.shape();
                for o in 0..ws.n {
                    let mut s = T::ZERO;
                    for i in 0..per {
                        s += self.weight.value.data()[o * per + i].abs();
                    }
                    s = s * T::from_f64(1.0 / per as f64);
                    for n in 0..ys.n {
                        let base = ys.idx(n, o, 0, 0);
                        for i in 0..ys.h * ys.w {
                            scaled.data_mut()[base + i] *= s;
                        }
                    }
                }
                Ok(scaled)
            }
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, sx, sw) = take(&mut self.cache, "binary conv")?;
        let clip = T::from_f64(self.spec.ste_clip);
        let tau = T::from_f64(self.spec.threshold);
        match self.spec.scale_mode {
            crate::binary::ScaleMode::None => {
                let grads = conv2d_backward(&sx, &sw, &self.spec.conv, grad_out, false)?;
                // STE through sign(x - tau) and through weight binarization.
                let pre = x.map(|v| v - tau);
                let gx = ste_backward(&grads.x, &pre, clip)?;
                let gw = ste_backward(&grads.w, &self.weight.value, clip)?;
                self.weight.grad.add_assign(&gw)?;
                Ok(gx)
            }
            crate::binary::ScaleMode::PerChannelMeanAbs => {
                // y = s_o * u, with u the binary conv output and
                // s_o = mean|w_o|. Chain through both factors.
                let u = conv2d(&sx, &sw, None, &self.spec.conv)?;
                let ws = self.weight.value.shape();
                let per = ws.c * ws.h * ws.w;
                let mut scales = vec![T::ZERO; ws.n];
                for o in 0..ws.n {
                    let mut s = T::ZERO;
                    for i in 0..per {
                        s += self.weight.value.data()[o * per + i].abs();
                    }
                    scales[o] = s * T::from_f64(1.0 / per as f64);
                }
                let gs = grad_out.shape();
                let mut grad_u = Tensor::zeros(gs);
                let mut grad_scale = vec![T::ZERO; ws.n];
                for n in 0..gs.n {
                    for o in 0..gs.c {
                        let base = gs.idx(n, o, 0, 0);
                        for i in 0..gs.h * gs.w {
                            let g = grad_out.data()[base + i];
                            grad_u.data_mut()[base + i] = g * scales[o];
                            grad_scale[o] += g * u.data()[base + i];
                        }
                    }
                }
                let grads = conv2d_backward(&sx, &sw, &self.spec.conv, &grad_u, false)?;
                let pre = x.map(|v| v - tau);
                let gx = ste_backward(&grads.x, &pre, clip)?;
                let mut gw = ste_backward(&grads.w, &self.weight.value, clip)?;
                // d s_o / d w = sign(w) / per: a true (non-STE) gradient.
                for o in 0..ws.n {
                    let gsc = grad_scale[o] * T::from_f64(1.0 / per as f64);
                    for i in 0..per {
                        let w = self.weight.value.data()[o * per + i];
                        let sgn = if w >= T::ZERO { T::ONE } else { -T::ONE };
                        gw.data_mut()[o * per + i] += gsc * sgn;
                    }
                }
                self.weight.grad.add_assign(&gw)?;
                Ok(gx)
            }
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let (oh, ow) = self.spec.conv.out_hw(in_shape.h, in_shape.w)?;
        let ws = self.weight.value.shape();
        let macs = (ws.n * oh * ow * ws.c * ws.h * ws.w) as u64;
        Ok((
            LayerCost {
                bops: macs,
                b_params: self.weight.value.len() as u64,
                ..Default::default()
            },
            Shape::new(in_shape.n, ws.n, oh, ow),
        ))
    }
}

pub struct BiPdcLayer<T: Scalar> {
    pub spec: BinaryConvSpec,
    pub pattern: ProbePattern,
    /// Latent full-precision pair weights `(outC, inC/g, 1, m)`.
    pub weight: Param<T>,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> BiPdcLayer<T> {
    pub fn new(
        name: &str,
        kind: PdcKind,
        in_c: usize,
        out_c: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let pattern = match ProbePattern::of(kind) {
            Some(p) => p,
            None => shape_err!("binary pixel-difference layer needs a difference kind"),
        };
        let spec = BinaryConvSpec::new(
            ConvSpec::new(pattern.window)
                .stride(stride)
                .padding(same_padding(kind)),
        );
        let m = pattern.m();
        let wshape = Shape::new(out_c, in_c, 1, m);
        Ok(BiPdcLayer {
            spec,
            pattern,
            weight: Param::new(format!("{name}.w"), he_normal(wshape, in_c * m, rng)),
            cache: None,
        })
    }
}

impl<T: Scalar> Layer<T> for BiPdcLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let sw = sign(&self.weight.value, T::ZERO);
        let y = bipdc_float(x, &sw, &self.pattern, &self.spec)?;
        self.cache = Some((x.clone(), sw));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, sw) = take(&mut self.cache, "binary pdc")?;
        let (gx, gsw) = bipdc_backward(&x, &sw, &self.pattern, &self.spec, grad_out)?;
        let clip = T::from_f64(self.spec.ste_clip);
        let gw = ste_backward(&gsw, &self.weight.value, clip)?;
        self.weight.grad.add_assign(&gw)?;
        Ok(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let (oh, ow) = self.spec.conv.out_hw(in_shape.h, in_shape.w)?;
        let ws = self.weight.value.shape();
        // One binary MAC per probe pair per channel.
        let macs = (ws.n * oh * ow * ws.c * ws.w) as u64;
        Ok((
            LayerCost {
                bops: macs,
                b_params: self.weight.value.len() as u64,
                ..Default::default()
            },
            Shape::new(in_shape.n, ws.n, oh, ow),
        ))
    }
}

// ---------------------------------------------------------------------------
// Hybrid split layer: pixel-difference branch on the first channels,
// vanilla binary branch on the rest, each normalized and activated, summed.
// ---------------------------------------------------------------------------

/// Round-half-up channel split: `split_channels(0.2, 32) == 6`
/// (ties go up: `split_channels(0.5, 5) == 3`).
pub fn split_channels(xi: f64, c: usize) -> usize {
    ((xi * c as f64) + 0.5).floor() as usize
}

pub struct HybridLayer<T: Scalar> {
    pub xi: f64,
    pub split: usize,
    pub in_c: usize,
    diff: Option<(BiPdcLayer<T>, BatchNormLayer<T>, PreluLayer<T>)>,
    van: Option<(BinaryConvLayer<T>, BatchNormLayer<T>, PreluLayer<T>)>,
}

impl<T: Scalar> HybridLayer<T> {
    pub fn new(
        name: &str,
        kind: PdcKind,
        in_c: usize,
        out_c: usize,
        stride: usize,
        xi: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&xi) {
            shape_err!("hybrid split fraction must lie in [0,1], got {xi}");
        }
        let split = split_channels(xi, in_c).min(in_c);
        let diff = if split > 0 {
            Some((
                BiPdcLayer::new(&format!("{name}.diff"), kind, split, out_c, stride, rng)?,
                BatchNormLayer::new(&format!("{name}.diff.bn"), out_c),
                PreluLayer::new(&format!("{name}.diff.act"), out_c),
            ))
        } else {
            None
        };
        let van = if split < in_c {
            let spec = BinaryConvSpec::new(ConvSpec::new(3).stride(stride).padding(1));
            Some((
                BinaryConvLayer::new(&format!("{name}.van"), in_c - split, out_c, spec, rng),
                BatchNormLayer::new(&format!("{name}.van.bn"), out_c),
                PreluLayer::new(&format!("{name}.van.act"), out_c),
            ))
        } else {
            None
        };
        Ok(HybridLayer {
            xi,
            split,
            in_c,
            diff,
            van,
        })
    }
}

impl<T: Scalar> Layer<T> for HybridLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        if x.shape().c != self.in_c {
            shape_err!("hybrid layer expects {} channels, got {}", self.in_c, x.shape().c);
        }
        let mut acc: Option<Tensor<T>> = None;
        if let Some((conv, bn, act)) = &mut self.diff {
            let part = x.slice_channels(0, self.split)?;
            let y = act.forward(&bn.forward(&conv.forward(&part, train)?, train)?, train)?;
            acc = Some(y);
        }
        if let Some((conv, bn, act)) = &mut self.van {
            let part = x.slice_channels(self.split, self.in_c)?;
            let y = act.forward(&bn.forward(&conv.forward(&part, train)?, train)?, train)?;
            acc = Some(match acc {
                Some(a) => a.add(&y)?,
                None => y,
            });
        }
        match acc {
            Some(y) => Ok(y),
            None => shape_err!("hybrid layer has no branches"),
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut gx: Option<Tensor<T>> = None;
        let in_c = self.in_c;
        let split = self.split;
        if let Some((conv, bn, act)) = &mut self.diff {
            let g = conv.backward(&bn.backward(&act.backward(grad_out)?)?)?;
            let gs = g.shape();
            let mut full = Tensor::zeros(Shape::new(gs.n, in_c, gs.h, gs.w));
            full.add_into_channels(0, &g)?;
            gx = Some(full);
        }
        if let Some((conv, bn, act)) = &mut self.van {
            let g = conv.backward(&bn.backward(&act.backward(grad_out)?)?)?;
            let gs = g.shape();
            let mut full = match gx {
                Some(f) => f,
                None => Tensor::zeros(Shape::new(gs.n, in_c, gs.h, gs.w)),
            };
            full.add_into_channels(split, &g)?;
            gx = Some(full);
        }
        match gx {
            Some(g) => Ok(g),
            None => shape_err!("hybrid layer has no branches"),
        }
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some((conv, bn, act)) = &mut self.diff {
            conv.visit_params(f);
            bn.visit_params(f);
            act.visit_params(f);
        }
        if let Some((conv, bn, act)) = &mut self.van {
            conv.visit_params(f);
            bn.visit_params(f);
            act.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        if let Some((_, bn, _)) = &mut self.diff {
            bn.visit_buffers(f);
        }
        if let Some((_, bn, _)) = &mut self.van {
            bn.visit_buffers(f);
        }
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let mut total = LayerCost::default();
        let mut out = None;
        if let Some((conv, bn, act)) = &self.diff {
            let part = Shape::new(in_shape.n, self.split, in_shape.h, in_shape.w);
            let (c1, s1) = conv.cost(part)?;
            let (c2, s2) = bn.cost(s1)?;
            let (c3, s3) = act.cost(s2)?;
            total.add(c1);
            total.add(c2);
            total.add(c3);
            out = Some(s3);
        }
        if let Some((conv, bn, act)) = &self.van {
            let part = Shape::new(in_shape.n, self.in_c - self.split, in_shape.h, in_shape.w);
            let (c1, s1) = conv.cost(part)?;
            let (c2, s2) = bn.cost(s1)?;
            let (c3, s3) = act.cost(s2)?;
            total.add(c1);
            total.add(c2);
            total.add(c3);
            out = Some(s3);
        }
        match out {
            Some(s) => Ok((total, s)),
            None => shape_err!("hybrid layer has no branches"),
        }
    }
}

// ---------------------------------------------------------------------------
// ReplicaPool: parameter-free downsampling + channel expansion
// ---------------------------------------------------------------------------

pub struct ReplicaPoolLayer<T: Scalar> {
    pub m: usize,
    pub n_seg: usize,
    /// Optional exact output width; overshoot truncates trailing channels.
    pub truncate_to: Option<usize>,
    cache: Option<(Pool2x2<T>, Shape)>,
}

impl<T: Scalar> ReplicaPoolLayer<T> {
    pub fn new(m: usize, n_seg: usize) -> Self {
        ReplicaPoolLayer {
            m,
            n_seg,
            truncate_to: None,
            cache: None,
        }
    }

    pub fn truncate_to(mut self, width: usize) -> Self {
        self.truncate_to = Some(width);
        self
    }

    pub fn out_channels(&self, c: usize) -> Result<usize> {
        if self.m == 0 || self.n_seg == 0 {
            shape_err!("replica pool needs M >= 1 and N >= 1");
        }
        if c % self.n_seg != 0 {
            shape_err!("replica pool: {} channels not divisible by N = {}", c, self.n_seg);
        }
        let full = self.m * c + c / self.n_seg;
        match self.truncate_to {
            Some(t) if t > full => {
                shape_err!("replica pool: cannot truncate {} channels to {}", full, t)
            }
            Some(t) => Ok(t),
            None => Ok(full),
        }
    }
}

impl<T: Scalar> Layer<T> for ReplicaPoolLayer<T> {
    fn forward(&mut self, x: &Tensor<T>, _train: bool) -> Result<Tensor<T>> {
        let c = x.shape().c;
        let out_c = self.out_channels(c)?;
        let pooled = pool2x2(x, PoolMode::Avg)?;
        let p = &pooled.y;
        let ps = p.shape();
        let mut y = Tensor::zeros(Shape::new(ps.n, out_c, ps.h, ps.w));
        let hw = ps.h * ps.w;
        let inv = T::from_f64(1.0 / self.n_seg as f64);
        for n in 0..ps.n {
            for oc in 0..out_c {
                let dst = y.shape().idx(n, oc, 0, 0);
                if oc < self.m * c {
                    let src = ps.idx(n, oc % c, 0, 0);
                    let (pd, yd) = (p.data(), y.data_mut());
                    yd[dst..dst + hw].copy_from_slice(&pd[src..src + hw]);
                } else {
                    // Mean over one consecutive group of N channels.
                    let seg = oc - self.m * c;
                    for j in 0..self.n_seg {
                        let src = ps.idx(n, seg * self.n_seg + j, 0, 0);
                        for i in 0..hw {
                            y.data_mut()[dst + i] += p.data()[src + i] * inv;
                        }
                    }
                }
            }
        }
        self.cache = Some((pooled, Shape::new(ps.n, out_c, ps.h, ps.w)));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (pooled, out_shape) = take(&mut self.cache, "replica pool")?;
        if grad_out.shape() != out_shape {
            shape_err!("replica pool grad shape {} vs {}", grad_out.shape(), out_shape);
        }
        let ps = pooled.y.shape();
        let c = ps.c;
        let hw = ps.h * ps.w;
        let mut gp = Tensor::zeros(ps);
        let inv = T::from_f64(1.0 / self.n_seg as f64);
        for n in 0..ps.n {
            for oc in 0..out_shape.c {
                let src = out_shape.idx(n, oc, 0, 0);
                if oc < self.m * c {
                    let dst = ps.idx(n, oc % c, 0, 0);
                    for i in 0..hw {
                        gp.data_mut()[dst + i] += grad_out.data()[src + i];
                    }
                } else {
                    let seg = oc - self.m * c;
                    for j in 0..self.n_seg {
                        let dst = ps.idx(n, seg * self.n_seg + j, 0, 0);
                        for i in 0..hw {
                            gp.data_mut()[dst + i] += grad_out.data()[src + i] * inv;
                        }
                    }
                }
            }
        }
        pooled.backward(&gp)
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        if in_shape.h % 2 != 0 || in_shape.w % 2 != 0 {
            shape_err!("replica pool needs even spatial dims, got {}", in_shape);
        }
        let out_c = self.out_channels(in_shape.c)?;
        Ok((
            LayerCost::default(),
            Shape::new(in_shape.n, out_c, in_shape.h / 2, in_shape.w / 2),
        ))
    }
}

// ---------------------------------------------------------------------------
// Sequential container
// ---------------------------------------------------------------------------

pub struct Sequential<T: Scalar> {
    pub layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) {
        self.layers.push(Box::new(layer));
    }
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = grad_out.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur)?;
        }
        Ok(cur)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for layer in &mut self.layers {
            layer.visit_buffers(f);
        }
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let mut total = LayerCost::default();
        let mut shape = in_shape;
        for layer in &self.layers {
            let (c, s) = layer.cost(shape)?;
            total.add(c);
            shape = s;
        }
        Ok((total, shape))
    }
}
