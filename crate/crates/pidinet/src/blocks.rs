//! Network builders.
//!
//! Edge detection: a 16-block pixel-difference backbone in four stages
//! (C, 2C, 4C, 4C channels), per-stage side heads with optional dilation
//! (CDCM) and spatial-attention (CSAM) modules, and a fusion head — five
//! sigmoid edge maps at input resolution.
//!
//! Classification: a binary residual network whose convolutions are hybrid
//! split layers (sign-difference branch + vanilla binary branch) with
//! parameter-free ReplicaPool shortcuts at reductions, plus two reference
//! architectures (full-precision ResNet-18 and its binary Bi-Real-style
//! counterpart) used for cost comparisons.

use rand_chacha::ChaCha8Rng;

use crate::binary::BinaryConvSpec;
use crate::config::{parse_blocks, render_blocks, EDGE_BLOCKS};
use crate::error::{shape_err, Error, Result};
use crate::layers::{
    BatchNormLayer, BinaryConvLayer, Conv2dLayer, GlobalAvgPoolLayer, HybridLayer, Layer,
    LayerCost, LinearLayer, Param, PdcConvLayer, Pool2x2Layer, ReluLayer, ReplicaPoolLayer,
    SigmoidLayer, UpsampleLayer,
};
use crate::ops::{ConvSpec, PoolMode};
use crate::pdc::PdcKind;
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Edge,
    Classify,
}

impl Task {
    pub fn token(self) -> &'static str {
        match self {
            Task::Edge => "edge",
            Task::Classify => "classify",
        }
    }

    pub fn from_token(s: &str) -> Option<Task> {
        match s {
            "edge" => Some(Task::Edge),
            "classify" | "cls" => Some(Task::Classify),
            _ => None,
        }
    }
}

/// Everything needed to rebuild a network: used for construction and stored
/// verbatim (as `key = value` text) inside checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub task: Task,
    // --- edge task ---
    pub block_kinds: Vec<PdcKind>,
    pub channels: usize,
    pub with_csam: bool,
    pub with_cdcm: bool,
    /// Side-head working width M (must stay below the stage width).
    pub cdcm_mid: usize,
    /// Build difference blocks as already-folded vanilla kernels (the
    /// deployment form produced by re-parameterization export).
    pub reparam: bool,
    // --- classification task ---
    pub xi: f64,
    pub stage_widths: Vec<usize>,
    pub stage_units: Vec<usize>,
    /// ReplicaPool (M, N) per reduction (one per stage transition).
    pub replica_mn: Vec<(usize, usize)>,
    pub classes: usize,
    pub bipdc_kind: PdcKind,
    pub init_channels: usize,
    pub init_stride: usize,
    /// Optional ReplicaPool right after the initial convolution.
    pub init_replica: Option<(usize, usize)>,
}

impl NetworkSpec {
    /// The adopted edge configuration: 60 channels, `[CARV]x4`, both side
    /// modules on.
    pub fn edge_default() -> NetworkSpec {
        let channels = 60;
        NetworkSpec {
            task: Task::Edge,
            block_kinds: parse_blocks("[CARV]x4").expect("valid"),
            channels,
            with_csam: true,
            with_cdcm: true,
            cdcm_mid: default_cdcm_mid(channels),
            reparam: false,
            xi: 0.0,
            stage_widths: Vec::new(),
            stage_units: Vec::new(),
            replica_mn: Vec::new(),
            classes: 0,
            bipdc_kind: PdcKind::Central,
            init_channels: 0,
            init_stride: 2,
            init_replica: None,
        }
    }

    /// Small edge network for fast experiments: 20 channels, side modules
    /// off.
    pub fn edge_tiny() -> NetworkSpec {
        let mut s = Self::edge_default();
        s.channels = 20;
        s.with_csam = false;
        s.with_cdcm = false;
        s.cdcm_mid = default_cdcm_mid(20);
        s
    }

    /// ResNet-18-shaped binary classification network: slim initial layer
    /// (40 channels) expanded to 128 by a ReplicaPool, widened stages.
    pub fn classify_r18(xi: f64, classes: usize) -> NetworkSpec {
        NetworkSpec {
            task: Task::Classify,
            block_kinds: Vec::new(),
            channels: 0,
            with_csam: false,
            with_cdcm: false,
            cdcm_mid: 0,
            reparam: false,
            xi,
            stage_widths: vec![128, 192, 384, 768],
            stage_units: vec![4, 4, 4, 4],
            replica_mn: vec![(1, 2), (1, 1), (1, 1)],
            classes,
            bipdc_kind: PdcKind::Central,
            init_channels: 40,
            init_stride: 2,
            init_replica: Some((3, 5)),
        }
    }

    /// Desk-scale three-stage classifier for 32x32 inputs.
    pub fn classify_small(xi: f64, classes: usize) -> NetworkSpec {
        NetworkSpec {
            task: Task::Classify,
            block_kinds: Vec::new(),
            channels: 0,
            with_csam: false,
            with_cdcm: false,
            cdcm_mid: 0,
            reparam: false,
            xi,
            stage_widths: vec![32, 64, 128],
            stage_units: vec![1, 1, 1],
            replica_mn: vec![(1, 1), (1, 1)],
            classes,
            bipdc_kind: PdcKind::Central,
            init_channels: 32,
            init_stride: 2,
            init_replica: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::Edge => {
                if self.block_kinds.len() != EDGE_BLOCKS {
                    shape_err!("edge task needs {} block kinds", EDGE_BLOCKS);
                }
                if self.channels == 0 {
                    shape_err!("edge task needs base channels >= 1");
                }
                if self.with_cdcm && self.cdcm_mid >= self.channels {
                    shape_err!(
                        "side-head width {} must stay below stage width {}",
                        self.cdcm_mid,
                        self.channels
                    );
                }
            }
            Task::Classify => {
                if self.stage_widths.is_empty() || self.stage_widths.len() != self.stage_units.len()
                {
                    shape_err!("classify task needs matching stage widths/units");
                }
                if self.replica_mn.len() + 1 != self.stage_widths.len() {
                    shape_err!("need one ReplicaPool (M,N) per stage transition");
                }
                if !(0.0..=1.0).contains(&self.xi) {
                    shape_err!("split fraction must lie in [0,1], got {}", self.xi);
                }
                if self.classes < 2 {
                    shape_err!("need at least two classes");
                }
                if self.init_channels == 0 {
                    shape_err!("initial convolution needs channels >= 1");
                }
            }
        }
        Ok(())
    }

    /// Render to the `key = value` text stored in checkpoints.
    pub fn to_kv(&self) -> String {
        let mut kv: Vec<(String, String)> = vec![("task".into(), self.task.token().into())];
        match self.task {
            Task::Edge => {
                kv.push(("arch".into(), render_blocks(&self.block_kinds)));
                kv.push(("channels".into(), self.channels.to_string()));
                kv.push(("csam".into(), (self.with_csam as u8).to_string()));
                kv.push(("cdcm".into(), (self.with_cdcm as u8).to_string()));
                kv.push(("cdcm_mid".into(), self.cdcm_mid.to_string()));
                kv.push(("reparam".into(), (self.reparam as u8).to_string()));
            }
            Task::Classify => {
                kv.push(("xi".into(), format!("{}", self.xi)));
                kv.push((
                    "widths".into(),
                    self.stage_widths
                        .iter()
                        .map(|w| w.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                ));
                kv.push((
                    "units".into(),
                    self.stage_units
                        .iter()
                        .map(|u| u.to_string())
                        .collect::<Vec<_>>()
                        .join(","),
                ));
                kv.push((
                    "replica".into(),
                    self.replica_mn
                        .iter()
                        .map(|(m, n)| format!("{m}:{n}"))
                        .collect::<Vec<_>>()
                        .join(","),
                ));
                kv.push(("classes".into(), self.classes.to_string()));
                kv.push(("kind".into(), self.bipdc_kind.token().to_string()));
                kv.push(("init_channels".into(), self.init_channels.to_string()));
                kv.push(("init_stride".into(), self.init_stride.to_string()));
                if let Some((m, n)) = self.init_replica {
                    kv.push(("init_replica".into(), format!("{m}:{n}")));
                }
            }
        }
        crate::config::render_kv(&kv)
    }

    /// Parse back from checkpoint `key = value` text.
    pub fn from_kv(text: &str) -> Result<NetworkSpec> {
        let entries = crate::config::parse_kv(text)?;
        let get = |k: &str| crate::config::kv_get(&entries, k);
        let need = |k: &str| {
            get(k).ok_or_else(|| Error::Config {
                pos: 0,
                msg: format!("missing key '{k}'"),
            })
        };
        let task = Task::from_token(need("task")?).ok_or_else(|| Error::Config {
            pos: 0,
            msg: "unknown task".into(),
        })?;
        let parse_usize = |k: &str, v: &str| {
            v.parse::<usize>().map_err(|_| Error::Config {
                pos: 0,
                msg: format!("bad integer for '{k}': {v}"),
            })
        };
        let spec = match task {
            Task::Edge => {
                let channels = parse_usize("channels", need("channels")?)?;
                let mut s = NetworkSpec::edge_default();
                s.block_kinds = parse_blocks(need("arch")?)?;
                s.channels = channels;
                s.with_csam = get("csam").map(|v| v == "1").unwrap_or(true);
                s.with_cdcm = get("cdcm").map(|v| v == "1").unwrap_or(true);
                s.cdcm_mid = match get("cdcm_mid") {
                    Some(v) => parse_usize("cdcm_mid", v)?,
                    None => default_cdcm_mid(channels),
                };
                s.reparam = get("reparam").map(|v| v == "1").unwrap_or(false);
                s
            }
            Task::Classify => {
                let parse_list = |k: &str, v: &str| -> Result<Vec<usize>> {
                    v.split(',').map(|p| parse_usize(k, p.trim())).collect()
                };
                let parse_mn = |v: &str| -> Result<Vec<(usize, usize)>> {
                    v.split(',')
                        .map(|p| {
                            let (a, b) = p.split_once(':').ok_or_else(|| Error::Config {
                                pos: 0,
                                msg: format!("bad M:N pair '{p}'"),
                            })?;
                            Ok((parse_usize("replica", a.trim())?, parse_usize("replica", b.trim())?))
                        })
                        .collect()
                };
                let mut s = NetworkSpec::classify_small(0.0, 10);
                s.xi = need("xi")?.parse::<f64>().map_err(|_| Error::Config {
                    pos: 0,
                    msg: "bad xi".into(),
                })?;
                s.stage_widths = parse_list("widths", need("widths")?)?;
                s.stage_units = parse_list("units", need("units")?)?;
                s.replica_mn = parse_mn(need("replica")?)?;
                s.classes = parse_usize("classes", need("classes")?)?;
                s.bipdc_kind = need("kind")?
                    .chars()
                    .next()
                    .and_then(PdcKind::from_token)
                    .ok_or_else(|| Error::Config {
                        pos: 0,
                        msg: "bad kind".into(),
                    })?;
                s.init_channels = parse_usize("init_channels", need("init_channels")?)?;
                s.init_stride = parse_usize("init_stride", need("init_stride")?)?;
                s.init_replica = match get("init_replica") {
                    Some(v) => Some(parse_mn(v)?[0]),
                    None => None,
                };
                s
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Default side-head working width: `max(1, 2C/5)`.
pub fn default_cdcm_mid(channels: usize) -> usize {
    (2 * channels / 5).max(1)
}

// ---------------------------------------------------------------------------
// CDCM: multi-scale dilation module (entirely bias-free so that zero input
// maps to zero output).
// ---------------------------------------------------------------------------

pub struct Cdcm<T: Scalar> {
    reduce: Conv2dLayer<T>,
    relu: ReluLayer<T>,
    branches: Vec<Conv2dLayer<T>>,
}

pub const CDCM_DILATIONS: [usize; 4] = [5, 7, 9, 11];

impl<T: Scalar> Cdcm<T> {
    pub fn new(name: &str, in_c: usize, mid: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if mid >= in_c {
            shape_err!("dilation module width {mid} must stay below input width {in_c}");
        }
        let reduce = Conv2dLayer::new(&format!("{name}.reduce"), in_c, mid, ConvSpec::new(1), false, rng);
        let branches = CDCM_DILATIONS
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                Conv2dLayer::new(
                    &format!("{name}.dil{i}"),
                    mid,
                    mid,
                    ConvSpec::new(3).dilation(d).padding(d),
                    false,
                    rng,
                )
            })
            .collect();
        Ok(Cdcm {
            reduce,
            relu: ReluLayer::new(),
            branches,
        })
    }
}

impl<T: Scalar> Layer<T> for Cdcm<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let u = self.relu.forward(&self.reduce.forward(x, train)?, train)?;
        let mut acc: Option<Tensor<T>> = None;
        for b in &mut self.branches {
            let y = b.forward(&u, train)?;
            acc = Some(match acc {
                Some(a) => a.add(&y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one branch"))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut gu: Option<Tensor<T>> = None;
        for b in self.branches.iter_mut() {
            let g = b.backward(grad_out)?;
            gu = Some(match gu {
                Some(a) => a.add(&g)?,
                None => g,
            });
        }
        let gu = gu.expect("at least one branch");
        self.reduce.backward(&self.relu.backward(&gu)?)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.reduce.visit_params(f);
        for b in &mut self.branches {
            b.visit_params(f);
        }
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let (mut total, mid_shape) = self.reduce.cost(in_shape)?;
        let mut out = mid_shape;
        for b in &self.branches {
            let (c, s) = b.cost(mid_shape)?;
            total.add(c);
            out = s;
        }
        Ok((total, out))
    }
}

// ---------------------------------------------------------------------------
// CSAM: single-channel spatial attention gate.
// ---------------------------------------------------------------------------

pub struct Csam<T: Scalar> {
    conv1: Conv2dLayer<T>,
    relu: ReluLayer<T>,
    conv2: Conv2dLayer<T>,
    sig: SigmoidLayer<T>,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Csam<T> {
    pub fn new(name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = (c / 4).max(1);
        Csam {
            conv1: Conv2dLayer::new(&format!("{name}.c1"), c, mid, ConvSpec::new(1), true, rng),
            relu: ReluLayer::new(),
            conv2: Conv2dLayer::new(&format!("{name}.c2"), mid, 1, ConvSpec::new(3).padding(1), false, rng),
            sig: SigmoidLayer::new(),
            cache: None,
        }
    }
}

impl<T: Scalar> Layer<T> for Csam<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let a = self.sig.forward(
            &self
                .conv2
                .forward(&self.relu.forward(&self.conv1.forward(x, train)?, train)?, train)?,
            train,
        )?;
        // Broadcast the single-channel gate across x's channels.
        let xs = x.shape();
        let mut y = Tensor::zeros(xs);
        let plane = xs.h * xs.w;
        for n in 0..xs.n {
            let abase = a.shape().idx(n, 0, 0, 0);
            for c in 0..xs.c {
                let base = xs.idx(n, c, 0, 0);
                for i in 0..plane {
                    y.data_mut()[base + i] = x.data()[base + i] * a.data()[abase + i];
                }
            }
        }
        self.cache = Some((x.clone(), a));
        Ok(y)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, a) = match self.cache.take() {
            Some(c) => c,
            None => shape_err!("attention gate: backward without forward"),
        };
        let xs = x.shape();
        let plane = xs.h * xs.w;
        let mut gx = Tensor::zeros(xs);
        let mut ga = Tensor::zeros(a.shape());
        for n in 0..xs.n {
            let abase = a.shape().idx(n, 0, 0, 0);
            for c in 0..xs.c {
                let base = xs.idx(n, c, 0, 0);
                for i in 0..plane {
                    let g = grad_out.data()[base + i];
                    gx.data_mut()[base + i] = g * a.data()[abase + i];
                    ga.data_mut()[abase + i] += g * x.data()[base + i];
                }
            }
        }
        let g1 = self.sig.backward(&ga)?;
        let g2 = self.conv1.backward(&self.relu.backward(&self.conv2.backward(&g1)?)?)?;
        gx.add_assign(&g2)?;
        Ok(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_params(f);
        self.conv2.visit_params(f);
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let (mut total, s1) = self.conv1.cost(in_shape)?;
        let (c2, _) = self.conv2.cost(s1)?;
        total.add(c2);
        Ok((total, in_shape))
    }
}

// ---------------------------------------------------------------------------
// Edge network
// ---------------------------------------------------------------------------

struct PdcBlock<T: Scalar> {
    dw: PdcConvLayer<T>,
    relu: ReluLayer<T>,
    pw: Conv2dLayer<T>,
    proj: Option<Conv2dLayer<T>>,
}

impl<T: Scalar> PdcBlock<T> {
    fn new(
        name: &str,
        kind: PdcKind,
        in_c: usize,
        out_c: usize,
        stage_entry: bool,
        reparam: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dw = if reparam {
            PdcConvLayer::vanilla_window(
                &format!("{name}.dw"),
                kind_window(kind),
                in_c,
                in_c,
                1,
                in_c,
                false,
                rng,
            )
        } else {
            PdcConvLayer::new(&format!("{name}.dw"), kind, in_c, in_c, 1, in_c, false, rng)
        };
        // The trunk has no normalization, so it is a running sum of branch
        // outputs: He-scaled branches would double the activation variance
        // at every block and saturate the deeper side heads before the
        // first step. Scaling each branch's closing conv by 1/sqrt(blocks)
        // keeps the end-to-end growth near constant.
        let pw = Conv2dLayer::new(&format!("{name}.pw"), in_c, out_c, ConvSpec::new(1), true, rng)
            .init_gain(1.0 / ((EDGE_BLOCKS - 1) as f64).sqrt());
        // Every stage entry gets a projection shortcut, including the last
        // stage where the width happens not to change. No ReLU follows the
        // shortcut, so He draws are downscaled to variance-preserving ones.
        let proj = (stage_entry || in_c != out_c).then(|| {
            Conv2dLayer::new(&format!("{name}.proj"), in_c, out_c, ConvSpec::new(1), true, rng)
                .init_gain(std::f64::consts::FRAC_1_SQRT_2)
        });
        PdcBlock {
            dw,
            relu: ReluLayer::new(),
            pw,
            proj,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let u = self.dw.forward(x, train)?;
        let v = self.relu.forward(&u, train)?;
        let w = self.pw.forward(&v, train)?;
        match &mut self.proj {
            Some(p) => w.add(&p.forward(x, train)?),
            None => w.add(x),
        }
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.pw.backward(grad_out)?;
        let g = self.relu.backward(&g)?;
        let mut gx = self.dw.backward(&g)?;
        match &mut self.proj {
            Some(p) => gx.add_assign(&p.backward(grad_out)?)?,
            None => gx.add_assign(grad_out)?,
        }
        Ok(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.dw.visit_params(f);
        self.pw.visit_params(f);
        if let Some(p) = &mut self.proj {
            p.visit_params(f);
        }
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let (mut total, s) = self.dw.cost(in_shape)?;
        let (c, out) = self.pw.cost(s)?;
        total.add(c);
        if let Some(p) = &self.proj {
            let (cp, _) = p.cost(in_shape)?;
            total.add(cp);
        }
        Ok((total, out))
    }
}

fn kind_window(kind: PdcKind) -> usize {
    match crate::pdc::ProbePattern::of(kind) {
        Some(p) => p.window,
        None => 3,
    }
}

struct SideHead<T: Scalar> {
    cdcm: Option<Cdcm<T>>,
    csam: Option<Csam<T>>,
    conv: Conv2dLayer<T>,
    up: UpsampleLayer<T>,
    sig: SigmoidLayer<T>,
}

impl<T: Scalar> SideHead<T> {
    fn new(
        name: &str,
        in_c: usize,
        spec: &NetworkSpec,
        factor: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cdcm = if spec.with_cdcm {
            Some(Cdcm::new(&format!("{name}.cdcm"), in_c, spec.cdcm_mid, rng)?)
        } else {
            None
        };
        let width = if spec.with_cdcm { spec.cdcm_mid } else { in_c };
        let csam = spec
            .with_csam
            .then(|| Csam::new(&format!("{name}.csam"), width, rng));
        let conv = Conv2dLayer::new(&format!("{name}.out"), width, 1, ConvSpec::new(1), true, rng);
        Ok(SideHead {
            cdcm,
            csam,
            conv,
            up: UpsampleLayer::new(factor),
            sig: SigmoidLayer::new(),
        })
    }

    /// Returns `(upsampled logit, sigmoid side map)`.
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut cur = x.clone();
        if let Some(cdcm) = &mut self.cdcm {
            cur = cdcm.forward(&cur, train)?;
        }
        if let Some(csam) = &mut self.csam {
            cur = csam.forward(&cur, train)?;
        }
        let logit = self.up.forward(&self.conv.forward(&cur, train)?, train)?;
        let side = self.sig.forward(&logit, train)?;
        Ok((logit, side))
    }

    /// `g_side` flows through the sigmoid; `g_logit` arrives directly from
    /// the fusion head (which consumes pre-sigmoid logits).
    fn backward(&mut self, g_side: &Tensor<T>, g_logit: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.sig.backward(g_side)?;
        g.add_assign(g_logit)?;
        let mut g = self.conv.backward(&self.up.backward(&g)?)?;
        if let Some(csam) = &mut self.csam {
            g = csam.backward(&g)?;
        }
        if let Some(cdcm) = &mut self.cdcm {
            g = cdcm.backward(&g)?;
        }
        Ok(g)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(cdcm) = &mut self.cdcm {
            cdcm.visit_params(f);
        }
        if let Some(csam) = &mut self.csam {
            csam.visit_params(f);
        }
        self.conv.visit_params(f);
    }

    fn cost(&self, in_shape: Shape) -> Result<LayerCost> {
        let mut total = LayerCost::default();
        let mut s = in_shape;
        if let Some(cdcm) = &self.cdcm {
            let (c, ns) = cdcm.cost(s)?;
            total.add(c);
            s = ns;
        }
        if let Some(csam) = &self.csam {
            let (c, ns) = csam.cost(s)?;
            total.add(c);
            s = ns;
        }
        let (c, _) = self.conv.cost(s)?;
        total.add(c);
        Ok(total)
    }
}

/// Stage boundaries: block index ranges of the 16-block backbone.
const STAGE_ENDS: [usize; 4] = [3, 7, 11, 15];
const UPSAMPLE_FACTORS: [usize; 4] = [2, 4, 8, 8];

pub struct PiDiNet<T: Scalar> {
    pub spec: NetworkSpec,
    init: PdcConvLayer<T>,
    blocks: Vec<PdcBlock<T>>,
    pools: Vec<Pool2x2Layer<T>>,
    heads: Vec<SideHead<T>>,
    fusion: Conv2dLayer<T>,
    fusion_sig: SigmoidLayer<T>,
    fusion_cache: Option<Vec<Shape>>,
}

/// Channel width entering each block (index 1..=15) given base width C.
fn block_in_channels(c: usize, idx: usize) -> usize {
    match idx {
        1..=4 => c,
        5..=8 => 2 * c,
        _ => 4 * c,
    }
}

fn block_out_channels(c: usize, idx: usize) -> usize {
    match idx {
        1..=3 => c,
        4..=7 => 2 * c,
        _ => 4 * c,
    }
}

pub fn build_pidinet<T: Scalar>(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<PiDiNet<T>> {
    spec.validate()?;
    if spec.task != Task::Edge {
        shape_err!("edge builder got a {} spec", spec.task.token());
    }
    let c = spec.channels;
    let init = if spec.reparam {
        PdcConvLayer::vanilla_window(
            "block0",
            kind_window(spec.block_kinds[0]),
            3,
            c,
            2,
            1,
            true,
            rng,
        )
    } else {
        PdcConvLayer::new("block0", spec.block_kinds[0], 3, c, 2, 1, true, rng)
    };
    let mut blocks = Vec::new();
    for i in 1..EDGE_BLOCKS {
        blocks.push(PdcBlock::new(
            &format!("block{i}"),
            spec.block_kinds[i],
            block_in_channels(c, i),
            block_out_channels(c, i),
            matches!(i, 4 | 8 | 12),
            spec.reparam,
            rng,
        ));
    }
    let heads = STAGE_ENDS
        .iter()
        .zip(UPSAMPLE_FACTORS)
        .enumerate()
        .map(|(si, (&end, factor))| {
            SideHead::new(
                &format!("head{}", si + 1),
                block_out_channels(c, end),
                spec,
                factor,
                rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let fusion = Conv2dLayer::new("fusion", 4, 1, ConvSpec::new(1), true, rng);
    Ok(PiDiNet {
        spec: spec.clone(),
        init,
        blocks,
        pools: vec![
            Pool2x2Layer::new(PoolMode::Max),
            Pool2x2Layer::new(PoolMode::Max),
        ],
        heads,
        fusion,
        fusion_sig: SigmoidLayer::new(),
        fusion_cache: None,
    })
}

impl<T: Scalar> PiDiNet<T> {
    /// Five edge maps: four side outputs then the fused map, all at input
    /// resolution, all in (0,1).
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Vec<Tensor<T>>> {
        let s = x.shape();
        if s.c != 3 {
            shape_err!("edge network expects 3 input channels, got {}", s.c);
        }
        if s.h % 8 != 0 || s.w % 8 != 0 {
            shape_err!("input spatial dims must be divisible by 8, got {}", s);
        }
        let mut cur = self.init.forward(x, train)?;
        let mut logits = Vec::with_capacity(4);
        let mut sides = Vec::with_capacity(5);
        let mut stage = 0;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let idx = i + 1;
            // Pools sit between stages 1->2 and 2->3.
            if idx == 4 || idx == 8 {
                cur = self.pools[(idx == 8) as usize].forward(&cur, train)?;
            }
            cur = block.forward(&cur, train)?;
            if STAGE_ENDS.contains(&idx) {
                let (logit, side) = self.heads[stage].forward(&cur, train)?;
                logits.push(logit);
                sides.push(side);
                stage += 1;
            }
        }
        let refs: Vec<&Tensor<T>> = logits.iter().collect();
        let cat = Tensor::concat_channels(&refs)?;
        let fused = self
            .fusion_sig
            .forward(&self.fusion.forward(&cat, train)?, train)?;
        self.fusion_cache = Some(logits.iter().map(|l| l.shape()).collect());
        sides.push(fused);
        Ok(sides)
    }

    /// Trunk features at a named tap (`init` or `block1`..`block15`),
    /// bypassing the side heads. Used by the spectrum analyses.
    pub fn forward_to(&mut self, x: &Tensor<T>, tap: &str) -> Result<Tensor<T>> {
        let upto = if tap == "init" {
            0
        } else {
            match tap.strip_prefix("block").and_then(|s| s.parse::<usize>().ok()) {
                Some(i) if (1..=self.blocks.len()).contains(&i) => i,
                _ => {
                    return Err(Error::Format(format!(
                        "unknown feature tap '{tap}' (use init or block1..block{})",
                        self.blocks.len()
                    )))
                }
            }
        };
        let mut cur = self.init.forward(x, false)?;
        for i in 1..=upto {
            if i == 4 || i == 8 {
                cur = self.pools[(i == 8) as usize].forward(&cur, false)?;
            }
            cur = self.blocks[i - 1].forward(&cur, false)?;
        }
        Ok(cur)
    }

    /// Backward for all five maps; returns the input gradient.
    pub fn backward(&mut self, grads: &[Tensor<T>]) -> Result<Tensor<T>> {
        if grads.len() != 5 {
            shape_err!("edge backward expects 5 map gradients, got {}", grads.len());
        }
        let shapes = match self.fusion_cache.take() {
            Some(s) => s,
            None => shape_err!("edge backward without forward"),
        };
        // Fusion head first: its gradient reaches each side logit.
        let g_flogit = self.fusion_sig.backward(&grads[4])?;
        let g_cat = self.fusion.backward(&g_flogit)?;
        let mut g_logits = Vec::with_capacity(shapes.len());
        for i in 0..shapes.len() {
            g_logits.push(g_cat.slice_channels(i, i + 1)?);
        }
        // Heads, deepest stage last so we can walk the trunk backwards.
        let mut g_stage: Vec<Tensor<T>> = Vec::with_capacity(4);
        for (si, head) in self.heads.iter_mut().enumerate() {
            g_stage.push(head.backward(&grads[si], &g_logits[si])?);
        }
        let mut cur: Option<Tensor<T>> = None;
        for (i, block) in self.blocks.iter_mut().enumerate().rev() {
            let idx = i + 1;
            if let Some(pos) = STAGE_ENDS.iter().position(|&e| e == idx) {
                let g = g_stage[pos].clone();
                cur = Some(match cur {
                    Some(c) => c.add(&g)?,
                    None => g,
                });
            }
            let mut g = block.backward(cur.as_ref().expect("stage 4 tap seeds the walk"))?;
            if idx == 4 || idx == 8 {
                g = self.pools[(idx == 8) as usize].backward(&g)?;
            }
            cur = Some(g);
        }
        self.init.backward(cur.as_ref().expect("nonempty"))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.init.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        for h in &mut self.heads {
            h.visit_params(f);
        }
        self.fusion.visit_params(f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    pub fn cost(&self, input: Shape) -> Result<LayerCost> {
        let mut total = LayerCost::default();
        let (c0, mut s) = self.init.cost(input)?;
        total.add(c0);
        for (i, b) in self.blocks.iter().enumerate() {
            let idx = i + 1;
            if idx == 4 || idx == 8 {
                s = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
            }
            let (c, ns) = b.cost(s)?;
            total.add(c);
            s = ns;
            if let Some(pos) = STAGE_ENDS.iter().position(|&e| e == idx) {
                total.add(self.heads[pos].cost(s)?);
            }
        }
        let (cf, _) = self.fusion.cost(Shape::new(input.n, 4, input.h, input.w))?;
        total.add(cf);
        Ok(total)
    }

    /// Fold every difference block into its vanilla deployment kernel.
    /// Returns the updated spec plus `(param name, tensor)` pairs where the
    /// pair-weight tensors have been replaced by their folded kernels (same
    /// names, `k x k` shapes); everything else is copied verbatim.
    pub fn export_reparam(&mut self) -> Result<(NetworkSpec, Vec<(String, Tensor<T>)>)> {
        let mut folded: Vec<(String, Tensor<T>)> = Vec::new();
        folded.push((self.init.weight.name.clone(), self.init.folded_kernel()?));
        for block in &self.blocks {
            folded.push((block.dw.weight.name.clone(), block.dw.folded_kernel()?));
        }
        let mut out: Vec<(String, Tensor<T>)> = Vec::new();
        self.visit_params(&mut |p| {
            let t = match folded.iter().find(|(n, _)| *n == p.name) {
                Some((_, f)) => f.clone(),
                None => p.value.clone(),
            };
            out.push((p.name.clone(), t));
        });
        let mut spec = self.spec.clone();
        spec.reparam = true;
        Ok((spec, out))
    }

    /// Assign parameter tensors by name (shapes must match the built
    /// network exactly).
    pub fn load_params(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        load_named_params(tensors, |f| self.visit_params(f))
    }

    pub fn dump_params(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
        out
    }
}

/// Assign parameter tensors to a network by name. Every network parameter
/// must be present with a matching shape, and every provided tensor must be
/// consumed — anything else means the checkpoint and the architecture
/// disagree.
pub fn load_named_params<T: Scalar>(
    tensors: &[(String, Tensor<T>)],
    visit: impl FnOnce(&mut dyn FnMut(&mut Param<T>)),
) -> Result<()> {
    let mut err: Option<Error> = None;
    let mut used = vec![false; tensors.len()];
    visit(&mut |p| {
        if err.is_some() {
            return;
        }
        match tensors.iter().position(|(n, _)| *n == p.name) {
            Some(i) => {
                let t = &tensors[i].1;
                if t.shape() != p.value.shape() {
                    err = Some(Error::Format(format!(
                        "tensor '{}' has shape {}, network expects {}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )));
                } else {
                    p.value = t.clone();
                    used[i] = true;
                }
            }
            None => {
                err = Some(Error::Format(format!(
                    "missing tensor '{}' for this architecture",
                    p.name
                )))
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(i) = used.iter().position(|&u| !u) {
        return Err(Error::Format(format!(
            "tensor '{}' does not belong to this architecture",
            tensors[i].0
        )));
    }
    Ok(())
}

/// Same contract as [`load_named_params`] for named non-parameter buffers
/// (normalization running statistics). Extra stored buffers are rejected;
/// buffers the network has but the store lacks are left at their defaults.
pub fn load_named_buffers<T: Scalar>(
    tensors: &[(String, Tensor<T>)],
    visit: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor<T>)),
) -> Result<()> {
    let mut err: Option<Error> = None;
    let mut used = vec![false; tensors.len()];
    visit(&mut |name, buf| {
        if err.is_some() {
            return;
        }
        if let Some(i) = tensors.iter().position(|(n, _)| n == name) {
            let t = &tensors[i].1;
            if t.shape() != buf.shape() {
                err = Some(Error::Format(format!(
                    "buffer '{}' has shape {}, network expects {}",
                    name,
                    t.shape(),
                    buf.shape()
                )));
            } else {
                *buf = t.clone();
                used[i] = true;
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some(i) = used.iter().position(|&u| !u) {
        return Err(Error::Format(format!(
            "buffer '{}' does not belong to this architecture",
            tensors[i].0
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Binary classification network
// ---------------------------------------------------------------------------

enum Shortcut<T: Scalar> {
    Identity,
    Replica(ReplicaPoolLayer<T>),
}

struct BiUnit<T: Scalar> {
    conv: HybridLayer<T>,
    shortcut: Shortcut<T>,
}

impl<T: Scalar> BiUnit<T> {
    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let s = match &mut self.shortcut {
            Shortcut::Identity => x.clone(),
            Shortcut::Replica(rp) => rp.forward(x, train)?,
        };
        self.conv.forward(x, train)?.add(&s)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut gx = self.conv.backward(grad_out)?;
        match &mut self.shortcut {
            Shortcut::Identity => gx.add_assign(grad_out)?,
            Shortcut::Replica(rp) => gx.add_assign(&rp.backward(grad_out)?)?,
        }
        Ok(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.conv.visit_buffers(f);
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        self.conv.cost(in_shape)
    }
}

pub struct BiPiDiNet<T: Scalar> {
    pub spec: NetworkSpec,
    init: Conv2dLayer<T>,
    init_bn: BatchNormLayer<T>,
    init_rp: Option<ReplicaPoolLayer<T>>,
    units: Vec<BiUnit<T>>,
    gap: GlobalAvgPoolLayer<T>,
    fc: LinearLayer<T>,
}

pub fn build_bipidinet<T: Scalar>(
    spec: &NetworkSpec,
    rng: &mut ChaCha8Rng,
) -> Result<BiPiDiNet<T>> {
    spec.validate()?;
    if spec.task != Task::Classify {
        shape_err!("classification builder got a {} spec", spec.task.token());
    }
    let init = Conv2dLayer::new(
        "init",
        3,
        spec.init_channels,
        ConvSpec::new(3).stride(spec.init_stride).padding(1),
        false,
        rng,
    );
    let init_bn = BatchNormLayer::new("init.bn", spec.init_channels);
    let init_rp = match spec.init_replica {
        Some((m, n)) => {
            let rp = ReplicaPoolLayer::new(m, n).truncate_to(spec.stage_widths[0]);
            rp.out_channels(spec.init_channels)?;
            Some(rp)
        }
        None => {
            if spec.init_channels != spec.stage_widths[0] {
                shape_err!(
                    "initial width {} must match first stage width {}",
                    spec.init_channels,
                    spec.stage_widths[0]
                );
            }
            None
        }
    };
    let mut units = Vec::new();
    for (si, (&width, &count)) in spec.stage_widths.iter().zip(&spec.stage_units).enumerate() {
        for u in 0..count {
            let name = format!("s{}u{}", si + 1, u);
            if si > 0 && u == 0 {
                let prev = spec.stage_widths[si - 1];
                let (m, n) = spec.replica_mn[si - 1];
                let conv = HybridLayer::new(&name, spec.bipdc_kind, prev, width, 2, spec.xi, rng)?;
                let rp = ReplicaPoolLayer::new(m, n).truncate_to(width);
                rp.out_channels(prev)?;
                units.push(BiUnit {
                    conv,
                    shortcut: Shortcut::Replica(rp),
                });
            } else {
                let conv = HybridLayer::new(&name, spec.bipdc_kind, width, width, 1, spec.xi, rng)?;
                units.push(BiUnit {
                    conv,
                    shortcut: Shortcut::Identity,
                });
            }
        }
    }
    let fc = LinearLayer::new(
        "fc",
        *spec.stage_widths.last().expect("validated"),
        spec.classes,
        false,
        rng,
    );
    Ok(BiPiDiNet {
        spec: spec.clone(),
        init,
        init_bn,
        init_rp,
        units,
        gap: GlobalAvgPoolLayer::new(),
        fc,
    })
}

impl<T: Scalar> BiPiDiNet<T> {
    /// Class logits `(n, classes, 1, 1)`.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut cur = self.init_bn.forward(&self.init.forward(x, train)?, train)?;
        if let Some(rp) = &mut self.init_rp {
            cur = rp.forward(&cur, train)?;
        }
        for unit in &mut self.units {
            cur = unit.forward(&cur, train)?;
        }
        self.fc.forward(&self.gap.forward(&cur, train)?, train)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.gap.backward(&self.fc.backward(grad_out)?)?;
        for unit in self.units.iter_mut().rev() {
            g = unit.backward(&g)?;
        }
        if let Some(rp) = &mut self.init_rp {
            g = rp.backward(&g)?;
        }
        self.init.backward(&self.init_bn.backward(&g)?)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.init.visit_params(f);
        self.init_bn.visit_params(f);
        for u in &mut self.units {
            u.visit_params(f);
        }
        self.fc.visit_params(f);
    }

    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.init_bn.visit_buffers(f);
        for u in &mut self.units {
            u.visit_buffers(f);
        }
    }

    pub fn load_params(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        load_named_params(tensors, |f| self.visit_params(f))
    }

    pub fn load_buffers(&mut self, tensors: &[(String, Tensor<T>)]) -> Result<()> {
        load_named_buffers(tensors, |f| self.visit_buffers(f))
    }

    pub fn dump_params(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
        out
    }

    pub fn dump_buffers(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_buffers(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    pub fn cost(&self, input: Shape) -> Result<LayerCost> {
        let mut total = LayerCost::default();
        let (c, mut s) = self.init.cost(input)?;
        total.add(c);
        let (c, ns) = self.init_bn.cost(s)?;
        total.add(c);
        s = ns;
        if let Some(rp) = &self.init_rp {
            let (c, ns) = rp.cost(s)?;
            total.add(c);
            s = ns;
        }
        for u in &self.units {
            let (c, ns) = u.cost(s)?;
            total.add(c);
            s = ns;
        }
        // Global pool free; classifier excluded by its `counted` flag.
        let (c, _) = self.fc.cost(Shape::new(s.n, s.c, 1, 1))?;
        total.add(c);
        Ok(total)
    }
}

// ---------------------------------------------------------------------------
// Reference architectures for cost comparison
// ---------------------------------------------------------------------------

struct ResBasicBlock<T: Scalar> {
    conv1: Conv2dLayer<T>,
    bn1: BatchNormLayer<T>,
    relu1: ReluLayer<T>,
    conv2: Conv2dLayer<T>,
    bn2: BatchNormLayer<T>,
    relu2: ReluLayer<T>,
    proj: Option<(Conv2dLayer<T>, BatchNormLayer<T>)>,
}

impl<T: Scalar> ResBasicBlock<T> {
    fn new(name: &str, in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        ResBasicBlock {
            conv1: Conv2dLayer::new(
                &format!("{name}.c1"),
                in_c,
                out_c,
                ConvSpec::new(3).stride(stride).padding(1),
                false,
                rng,
            ),
            bn1: BatchNormLayer::new(&format!("{name}.bn1"), out_c),
            relu1: ReluLayer::new(),
            conv2: Conv2dLayer::new(
                &format!("{name}.c2"),
                out_c,
                out_c,
                ConvSpec::new(3).padding(1),
                false,
                rng,
            ),
            bn2: BatchNormLayer::new(&format!("{name}.bn2"), out_c),
            relu2: ReluLayer::new(),
            proj: (stride != 1 || in_c != out_c).then(|| {
                (
                    Conv2dLayer::new(
                        &format!("{name}.proj"),
                        in_c,
                        out_c,
                        ConvSpec::new(1).stride(stride),
                        false,
                        rng,
                    ),
                    BatchNormLayer::new(&format!("{name}.projbn"), out_c),
                )
            }),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let u = self
            .relu1
            .forward(&self.bn1.forward(&self.conv1.forward(x, train)?, train)?, train)?;
        let v = self.bn2.forward(&self.conv2.forward(&u, train)?, train)?;
        let s = match &mut self.proj {
            Some((c, bn)) => bn.forward(&c.forward(x, train)?, train)?,
            None => x.clone(),
        };
        self.relu2.forward(&v.add(&s)?, train)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.relu2.backward(grad_out)?;
        let mut gx = self
            .conv1
            .backward(&self.bn1.backward(&self.relu1.backward(&self.conv2.backward(&self.bn2.backward(&g)?)?)?)?)?;
        match &mut self.proj {
            Some((c, bn)) => gx.add_assign(&c.backward(&bn.backward(&g)?)?)?,
            None => gx.add_assign(&g)?,
        }
        Ok(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((c, bn)) = &mut self.proj {
            c.visit_params(f);
            bn.visit_params(f);
        }
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let (mut total, s1) = self.conv1.cost(in_shape)?;
        let (c, s1) = self.bn1.cost(s1)?;
        total.add(c);
        let (c, s2) = self.conv2.cost(s1)?;
        total.add(c);
        let (c, s2) = self.bn2.cost(s2)?;
        total.add(c);
        if let Some((pc, pbn)) = &self.proj {
            let (c, ps) = pc.cost(in_shape)?;
            total.add(c);
            let (c, _) = pbn.cost(ps)?;
            total.add(c);
        }
        Ok((total, s2))
    }
}

/// Full-precision 18-layer residual classifier (the cost baseline).
pub struct ResNet18<T: Scalar> {
    stem: Conv2dLayer<T>,
    stem_bn: BatchNormLayer<T>,
    stem_relu: ReluLayer<T>,
    pool: Pool2x2Layer<T>,
    blocks: Vec<ResBasicBlock<T>>,
    gap: GlobalAvgPoolLayer<T>,
    fc: LinearLayer<T>,
}

pub fn resnet18<T: Scalar>(classes: usize, rng: &mut ChaCha8Rng) -> ResNet18<T> {
    let widths = [64usize, 128, 256, 512];
    let mut blocks = Vec::new();
    let mut in_c = 64;
    for (si, &w) in widths.iter().enumerate() {
        for b in 0..2 {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            blocks.push(ResBasicBlock::new(
                &format!("l{}b{}", si + 1, b),
                in_c,
                w,
                stride,
                rng,
            ));
            in_c = w;
        }
    }
    ResNet18 {
        stem: Conv2dLayer::new("stem", 3, 64, ConvSpec::new(7).stride(2).padding(3), false, rng),
        stem_bn: BatchNormLayer::new("stem.bn", 64),
        stem_relu: ReluLayer::new(),
        pool: Pool2x2Layer::new(PoolMode::Max),
        blocks,
        gap: GlobalAvgPoolLayer::new(),
        fc: LinearLayer::new("fc", 512, classes, false, rng),
    }
}

impl<T: Scalar> ResNet18<T> {
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut cur = self.pool.forward(
            &self
                .stem_relu
                .forward(&self.stem_bn.forward(&self.stem.forward(x, train)?, train)?, train)?,
            train,
        )?;
        for b in &mut self.blocks {
            cur = b.forward(&cur, train)?;
        }
        self.fc.forward(&self.gap.forward(&cur, train)?, train)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.gap.backward(&self.fc.backward(grad_out)?)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        self.stem
            .backward(&self.stem_bn.backward(&self.stem_relu.backward(&self.pool.backward(&g)?)?)?)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_params(f);
        self.stem_bn.visit_params(f);
        for b in &mut self.blocks {
            b.visit_params(f);
        }
        self.fc.visit_params(f);
    }

    pub fn cost(&self, input: Shape) -> Result<LayerCost> {
        let mut total = LayerCost::default();
        let (c, s) = self.stem.cost(input)?;
        total.add(c);
        let (c, s) = self.stem_bn.cost(s)?;
        total.add(c);
        let (_, mut s) = self.pool.cost(s)?;
        for b in &self.blocks {
            let (c, ns) = b.cost(s)?;
            total.add(c);
            s = ns;
        }
        let (c, _) = self.fc.cost(Shape::new(s.n, s.c, 1, 1))?;
        total.add(c);
        Ok(total)
    }
}

/// One binary 3x3 convolution with its own shortcut (the double-skip
/// pattern): `y = shortcut(x) + BN(binary_conv(x))`.
struct BiRealUnit<T: Scalar> {
    conv: BinaryConvLayer<T>,
    bn: BatchNormLayer<T>,
    down: Option<(Pool2x2Layer<T>, Conv2dLayer<T>, BatchNormLayer<T>)>,
}

impl<T: Scalar> BiRealUnit<T> {
    fn new(name: &str, in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let spec = BinaryConvSpec::new(ConvSpec::new(3).stride(stride).padding(1));
        BiRealUnit {
            conv: BinaryConvLayer::new(&format!("{name}.conv"), in_c, out_c, spec, rng),
            bn: BatchNormLayer::new(&format!("{name}.bn"), out_c),
            down: (stride != 1 || in_c != out_c).then(|| {
                (
                    Pool2x2Layer::new(PoolMode::Avg),
                    Conv2dLayer::new(&format!("{name}.down"), in_c, out_c, ConvSpec::new(1), false, rng),
                    BatchNormLayer::new(&format!("{name}.downbn"), out_c),
                )
            }),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let u = self.bn.forward(&self.conv.forward(x, train)?, train)?;
        let s = match &mut self.down {
            Some((pool, conv, bn)) => {
                bn.forward(&conv.forward(&pool.forward(x, train)?, train)?, train)?
            }
            None => x.clone(),
        };
        u.add(&s)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut gx = self.conv.backward(&self.bn.backward(grad_out)?)?;
        match &mut self.down {
            Some((pool, conv, bn)) => {
                gx.add_assign(&pool.backward(&conv.backward(&bn.backward(grad_out)?)?)?)?
            }
            None => gx.add_assign(grad_out)?,
        }
        Ok(gx)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
        if let Some((_, conv, bn)) = &mut self.down {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }

    fn cost(&self, in_shape: Shape) -> Result<(LayerCost, Shape)> {
        let (mut total, out) = self.conv.cost(in_shape)?;
        let (c, out) = self.bn.cost(out)?;
        total.add(c);
        if let Some((_, conv, bn)) = &self.down {
            let half = Shape::new(in_shape.n, in_shape.c, in_shape.h / 2, in_shape.w / 2);
            let (c, ds) = conv.cost(half)?;
            total.add(c);
            let (c, _) = bn.cost(ds)?;
            total.add(c);
        }
        Ok((total, out))
    }
}

/// Binary 18-layer residual classifier with full-precision stem and
/// downsample shortcuts (the binary cost baseline).
pub struct BiReal18<T: Scalar> {
    stem: Conv2dLayer<T>,
    stem_bn: BatchNormLayer<T>,
    pool: Pool2x2Layer<T>,
    units: Vec<BiRealUnit<T>>,
    gap: GlobalAvgPoolLayer<T>,
    fc: LinearLayer<T>,
}

pub fn bireal18<T: Scalar>(classes: usize, rng: &mut ChaCha8Rng) -> BiReal18<T> {
    let widths = [64usize, 128, 256, 512];
    let mut units = Vec::new();
    let mut in_c = 64;
    for (si, &w) in widths.iter().enumerate() {
        for u in 0..4 {
            let stride = if si > 0 && u == 0 { 2 } else { 1 };
            units.push(BiRealUnit::new(&format!("l{}u{}", si + 1, u), in_c, w, stride, rng));
            in_c = w;
        }
    }
    BiReal18 {
        stem: Conv2dLayer::new("stem", 3, 64, ConvSpec::new(7).stride(2).padding(3), false, rng),
        stem_bn: BatchNormLayer::new("stem.bn", 64),
        pool: Pool2x2Layer::new(PoolMode::Max),
        units,
        gap: GlobalAvgPoolLayer::new(),
        fc: LinearLayer::new("fc", 512, classes, false, rng),
    }
}

impl<T: Scalar> BiReal18<T> {
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut cur = self
            .pool
            .forward(&self.stem_bn.forward(&self.stem.forward(x, train)?, train)?, train)?;
        for u in &mut self.units {
            cur = u.forward(&cur, train)?;
        }
        self.fc.forward(&self.gap.forward(&cur, train)?, train)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.gap.backward(&self.fc.backward(grad_out)?)?;
        for u in self.units.iter_mut().rev() {
            g = u.backward(&g)?;
        }
        self.stem
            .backward(&self.stem_bn.backward(&self.pool.backward(&g)?)?)
    }

    pub fn cost(&self, input: Shape) -> Result<LayerCost> {
        let mut total = LayerCost::default();
        let (c, s) = self.stem.cost(input)?;
        total.add(c);
        let (c, s) = self.stem_bn.cost(s)?;
        total.add(c);
        let (_, mut s) = self.pool.cost(s)?;
        for u in &self.units {
            let (c, ns) = u.cost(s)?;
            total.add(c);
            s = ns;
        }
        let (c, _) = self.fc.cost(Shape::new(s.n, s.c, 1, 1))?;
        total.add(c);
        Ok(total)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem.visit_params(f);
        self.stem_bn.visit_params(f);
        for u in &mut self.units {
            u.visit_params(f);
        }
        self.fc.visit_params(f);
    }
}
