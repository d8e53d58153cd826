//! `pidi`: train, run and analyze pixel-difference networks.
//!
//! Exit codes: 0 success, 2 user error (bad flags, config, files),
//! 3 numeric failure (training aborted on non-finite values).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pidinet::analysis::{
    count_ops_bireal18, count_ops_classifier, count_ops_edge, count_ops_resnet18,
    lbp_pattern_stats, shifting_filter_spectra, CostReport, UNIFORM_MAX_TRANSITIONS,
};
use pidinet::binary::BitTensor;
use pidinet::blocks::{
    bireal18, build_bipidinet, build_pidinet, resnet18, NetworkSpec, Task,
};
use pidinet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use pidinet::config::parse_kv;
use pidinet::error::Error;
use pidinet::pdc::PdcKind;
use pidinet::pnm::{decode_pnm, encode_pnm, PnmImage};
use pidinet::synth::{synth_cls_dataset, synth_edge_dataset, CLS_CLASS_NAMES};
use pidinet::train::{
    eval_accuracy, eval_edge_f1, history_csv, train_classifier, train_edge, TrainCfg, EDGE_ETA,
};
use pidinet::{Shape, Tensor};

type CmdResult = Result<(), (i32, String)>;

const USER_ERROR: i32 = 2;
const NUMERIC_ERROR: i32 = 3;

fn user<S: Into<String>>(msg: S) -> (i32, String) {
    (USER_ERROR, msg.into())
}

fn lib_err(e: Error) -> (i32, String) {
    let code = match e {
        Error::Numeric(_) => NUMERIC_ERROR,
        _ => USER_ERROR,
    };
    (code, e.to_string())
}

#[derive(Parser)]
#[command(
    name = "pidi",
    version,
    about = "Pixel-difference convolution networks: training, inference, export, analysis"
)]
struct Cli {
    /// Worker threads for convolutions (0 = one per core). The
    /// PIDI_THREADS environment variable applies when the flag is absent;
    /// results are identical for every setting.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on the built-in synthetic datasets and write a checkpoint.
    Train(TrainArgs),
    /// Run a checkpoint on an image (edge map out) or print class scores.
    Infer(InferArgs),
    /// Fold difference kernels into plain convolutions in a checkpoint.
    ReparamExport(ExportArgs),
    /// Emit spectra of shifting filters and kernel pattern histograms.
    Analyze(AnalyzeArgs),
    /// Report FLOPs/BOPs/OPs, parameter counts and model memory.
    CountOps(CountOpsArgs),
    /// Time forward passes; prints mean/stddev and an output checksum.
    Bench(BenchArgs),
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// `edge` or `cls`.
    #[arg(long)]
    task: Option<String>,
    /// Edge block layout, e.g. "[CARV]x4".
    #[arg(long)]
    config: Option<String>,
    /// key=value file with the same keys as the flags; flags win.
    #[arg(long)]
    config_file: Option<PathBuf>,
    /// Base width of the edge network.
    #[arg(long)]
    channels: Option<usize>,
    /// Full-precision channel fraction of hybrid layers (cls).
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Synthetic training samples to generate.
    #[arg(long)]
    samples: Option<usize>,
    /// Square sample size in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Classes of the synthetic classification set (2..=10).
    #[arg(long)]
    classes: Option<usize>,
    /// Output directory for checkpoint.pidn and history.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct TrainSettings {
    task: Task,
    config: String,
    channels: usize,
    xi: f64,
    epochs: usize,
    seed: u64,
    batch: usize,
    lr: f64,
    samples: usize,
    size: usize,
    classes: usize,
    out: PathBuf,
}

const TRAIN_KEYS: [&str; 12] = [
    "task", "config", "channels", "xi", "epochs", "seed", "batch", "lr", "samples", "size",
    "classes", "out",
];

fn parse_flag<T: std::str::FromStr>(v: &str, key: &str) -> Result<T, (i32, String)> {
    v.parse()
        .map_err(|_| user(format!("cannot parse {key} value '{v}'")))
}

fn resolve_train(a: &TrainArgs) -> Result<TrainSettings, (i32, String)> {
    // Config file first, flags on top.
    let mut file: Vec<(String, String)> = Vec::new();
    if let Some(path) = &a.config_file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| user(format!("config file {}: {e}", path.display())))?;
        let entries = parse_kv(&text).map_err(lib_err)?;
        let allowed: BTreeSet<&str> = TRAIN_KEYS.into_iter().collect();
        for e in &entries {
            if !allowed.contains(e.key.as_str()) {
                return Err(user(format!(
                    "config file {}: unknown key '{}'",
                    path.display(),
                    e.key
                )));
            }
        }
        file = entries.into_iter().map(|e| (e.key, e.value)).collect();
    }
    let from_file = |key: &str| file.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
    let pick = |flag: Option<String>, key: &str| flag.or_else(|| from_file(key));

    let task_text = pick(a.task.clone(), "task").unwrap_or_else(|| "edge".into());
    let task = Task::from_token(&task_text)
        .ok_or_else(|| user(format!("unknown task '{task_text}' (want edge or cls)")))?;
    let edge = task == Task::Edge;

    macro_rules! num {
        ($flag:expr, $key:literal, $default:expr) => {
            match $flag.map(Ok).or_else(|| {
                from_file($key).map(|v| parse_flag(&v, $key))
            }) {
                Some(v) => v?,
                None => $default,
            }
        };
    }

    Ok(TrainSettings {
        task,
        config: pick(a.config.clone(), "config").unwrap_or_else(|| "[CARV]x4".into()),
        channels: num!(a.channels, "channels", 60),
        xi: num!(a.xi, "xi", 0.2),
        epochs: num!(a.epochs, "epochs", if edge { 20 } else { 10 }),
        seed: num!(a.seed, "seed", 1),
        batch: num!(a.batch, "batch", if edge { 8 } else { 32 }),
        lr: num!(a.lr, "lr", if edge { 0.02 } else { 0.001 }),
        samples: num!(a.samples, "samples", if edge { 256 } else { 512 }),
        size: num!(a.size, "size", if edge { 64 } else { 32 }),
        classes: num!(a.classes, "classes", 10),
        out: a
            .out
            .clone()
            .or_else(|| from_file("out").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("pidi-out")),
    })
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let s = resolve_train(&a)?;
    println!(
        "settings: task={} config={} channels={} xi={} epochs={} seed={} batch={} lr={} \
         samples={} size={} classes={} out={}",
        s.task.token(),
        s.config,
        s.channels,
        s.xi,
        s.epochs,
        s.seed,
        s.batch,
        s.lr,
        s.samples,
        s.size,
        s.classes,
        s.out.display()
    );
    std::fs::create_dir_all(&s.out)
        .map_err(|e| user(format!("cannot create {}: {e}", s.out.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let cfg = TrainCfg {
        epochs: s.epochs,
        batch: s.batch,
        seed: s.seed,
        schedule: (
            s.lr,
            if s.task == Task::Edge { vec![10, 16] } else { vec![] },
            0.1,
        ),
        eval_cap: 64.min(s.samples),
    };
    let (history, checkpoint, metric_name, metric) = match s.task {
        Task::Edge => {
            let mut spec = NetworkSpec::edge_default();
            spec.channels = s.channels;
            spec.block_kinds = pidinet::config::parse_blocks(&s.config).map_err(lib_err)?;
            spec.cdcm_mid = pidinet::blocks::default_cdcm_mid(s.channels);
            let mut net = build_pidinet::<f32>(&spec, &mut rng).map_err(lib_err)?;
            let data = synth_edge_dataset(s.seed, s.samples, s.size);
            let history = train_edge(&mut net, &data, &cfg).map_err(lib_err)?;
            let f1 = eval_edge_f1(&mut net, &data[..cfg.eval_cap.max(1).min(data.len())], EDGE_ETA)
                .map_err(lib_err)?;
            let ck = Checkpoint {
                spec,
                params: net.dump_params(),
                buffers: Vec::new(),
            };
            (history, ck, "f1", f1)
        }
        Task::Classify => {
            let spec = NetworkSpec::classify_small(s.xi, s.classes);
            let mut net = build_bipidinet::<f32>(&spec, &mut rng).map_err(lib_err)?;
            let data = synth_cls_dataset(s.seed, s.samples, s.size, s.classes).map_err(lib_err)?;
            let history = train_classifier(&mut net, &data, &cfg).map_err(lib_err)?;
            let acc = eval_accuracy(&mut net, &data[..cfg.eval_cap.max(1).min(data.len())])
                .map_err(lib_err)?;
            let ck = Checkpoint {
                spec,
                params: net.dump_params(),
                buffers: net.dump_buffers(),
            };
            (history, ck, "accuracy", acc)
        }
    };
    let ck_path = s.out.join("checkpoint.pidn");
    save_checkpoint(&ck_path, &checkpoint).map_err(lib_err)?;
    let csv_path = s.out.join("history.csv");
    std::fs::write(&csv_path, history_csv(&history))
        .map_err(|e| user(format!("cannot write {}: {e}", csv_path.display())))?;
    let last = history.last().expect("at least one epoch");
    println!(
        "trained {} epochs; final loss {:.6}; {metric_name} {:.4}",
        history.len(),
        last.loss,
        metric
    );
    println!("wrote {} and {}", ck_path.display(), csv_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image: PGM or PPM, plain or raw (P2/P3/P5/P6).
    #[arg(long)]
    image: PathBuf,
    /// Output edge map (PGM), edge task only.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Classes to print, classification task only.
    #[arg(long, default_value_t = 5)]
    top_k: usize,
}

fn read_image_tensor(path: &Path) -> Result<Tensor<f32>, (i32, String)> {
    let bytes =
        std::fs::read(path).map_err(|e| user(format!("image {}: {e}", path.display())))?;
    let img = decode_pnm(&bytes).map_err(lib_err)?;
    let t = img.to_tensor();
    if img.channels == 3 {
        return Ok(t);
    }
    // Replicate gray to the three input channels.
    Tensor::concat_channels(&[&t, &t, &t]).map_err(lib_err)
}

fn cmd_infer(a: InferArgs) -> CmdResult {
    let ck: Checkpoint<f32> = load_checkpoint(&a.checkpoint).map_err(lib_err)?;
    let x = read_image_tensor(&a.image)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    match ck.spec.task {
        Task::Edge => {
            let mut net = build_pidinet::<f32>(&ck.spec, &mut rng).map_err(lib_err)?;
            net.load_params(&ck.params).map_err(lib_err)?;
            let maps = net.forward(&x, false).map_err(lib_err)?;
            let fused = maps.last().expect("five maps");
            let img = PnmImage::from_gray_tensor(fused).map_err(lib_err)?;
            let out = a.out.unwrap_or_else(|| PathBuf::from("edge.pgm"));
            std::fs::write(&out, encode_pnm(&img).map_err(lib_err)?)
                .map_err(|e| user(format!("cannot write {}: {e}", out.display())))?;
            println!("wrote {}", out.display());
        }
        Task::Classify => {
            let mut net = build_bipidinet::<f32>(&ck.spec, &mut rng).map_err(lib_err)?;
            net.load_params(&ck.params).map_err(lib_err)?;
            net.load_buffers(&ck.buffers).map_err(lib_err)?;
            let logits = net.forward(&x, false).map_err(lib_err)?;
            let k = logits.shape().c;
            let row: Vec<f64> = (0..k).map(|c| logits.data()[c] as f64).collect();
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - maxv).exp()).sum();
            let mut scored: Vec<(usize, f64)> = row
                .iter()
                .enumerate()
                .map(|(i, v)| (i, (v - maxv).exp() / z))
                .collect();
            scored.sort_by(|x, y| y.1.total_cmp(&x.1));
            for &(i, p) in scored.iter().take(a.top_k.max(1)) {
                let name = if k == CLS_CLASS_NAMES.len() {
                    CLS_CLASS_NAMES[i].to_string()
                } else {
                    format!("class{i}")
                };
                println!("{name} {p:.4}");
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// reparam-export
// ---------------------------------------------------------------------------

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_reparam_export(a: ExportArgs) -> CmdResult {
    let ck: Checkpoint<f32> = load_checkpoint(&a.checkpoint).map_err(lib_err)?;
    if ck.spec.task != Task::Edge {
        return Err(user(
            "only edge checkpoints re-parameterize; binary difference kernels have no \
             equivalent folded convolution",
        ));
    }
    if ck.spec.reparam {
        return Err(user("checkpoint is already re-parameterized"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut net = build_pidinet::<f32>(&ck.spec, &mut rng).map_err(lib_err)?;
    net.load_params(&ck.params).map_err(lib_err)?;
    let (spec, params) = net.export_reparam().map_err(lib_err)?;
    save_checkpoint(
        &a.out,
        &Checkpoint {
            spec,
            params,
            buffers: Vec::new(),
        },
    )
    .map_err(lib_err)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Args)]
struct AnalyzeArgs {
    /// Filter kind to decompose: vanilla, central, angular or radial.
    #[arg(long)]
    kind: Option<String>,
    /// Window for the vanilla decomposition.
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Embedding grid for the spectra.
    #[arg(long, default_value_t = 16)]
    grid: usize,
    /// Checkpoint whose 3x3 kernel signs get a pattern histogram.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for CSV files.
    #[arg(long)]
    out: PathBuf,
}

fn parse_kind(s: &str) -> Result<PdcKind, (i32, String)> {
    match s.to_ascii_lowercase().as_str() {
        "v" | "vanilla" => Ok(PdcKind::Vanilla),
        "c" | "central" => Ok(PdcKind::Central),
        "a" | "angular" => Ok(PdcKind::Angular),
        "r" | "radial" => Ok(PdcKind::Radial),
        _ => Err(user(format!(
            "unknown kind '{s}' (want vanilla, central, angular or radial)"
        ))),
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> CmdResult {
    if a.kind.is_none() && a.checkpoint.is_none() {
        return Err(user("nothing to analyze: pass --kind and/or --checkpoint"));
    }
    std::fs::create_dir_all(&a.out)
        .map_err(|e| user(format!("cannot create {}: {e}", a.out.display())))?;
    if let Some(kind) = &a.kind {
        let kind = parse_kind(kind)?;
        let spectra = shifting_filter_spectra(kind, a.window, a.grid).map_err(lib_err)?;
        let tag = format!("{kind:?}").to_ascii_lowercase();
        for (i, sp) in spectra.iter().enumerate() {
            let raw = a.out.join(format!("{tag}_filter{i}_raw.csv"));
            let log = a.out.join(format!("{tag}_filter{i}_log.csv"));
            std::fs::write(&raw, sp.to_csv())
                .map_err(|e| user(format!("cannot write {}: {e}", raw.display())))?;
            std::fs::write(&log, sp.log_scaled().to_csv())
                .map_err(|e| user(format!("cannot write {}: {e}", log.display())))?;
        }
        println!("wrote {} spectra to {}", spectra.len(), a.out.display());
    }
    if let Some(path) = &a.checkpoint {
        let ck: Checkpoint<f32> = load_checkpoint(path).map_err(lib_err)?;
        let mut histogram = None;
        for (_, t) in &ck.params {
            let s = t.shape();
            if s.h != 3 || s.w != 3 {
                continue;
            }
            let stats =
                lbp_pattern_stats(&BitTensor::pack(t, 0.0), UNIFORM_MAX_TRANSITIONS)
                    .map_err(lib_err)?;
            let acc: &mut Vec<u64> = histogram.get_or_insert_with(|| vec![0u64; 256]);
            for (code, n) in stats.histogram.iter().enumerate() {
                acc[code] += n;
            }
        }
        let histogram = histogram.ok_or_else(|| {
            user("checkpoint holds no 3x3 kernels; re-parameterize it first")
        })?;
        let stats = pidinet::analysis::LbpStats {
            histogram,
            max_transitions: UNIFORM_MAX_TRANSITIONS,
        };
        let path = a.out.join("lbp_histogram.csv");
        std::fs::write(&path, stats.to_csv())
            .map_err(|e| user(format!("cannot write {}: {e}", path.display())))?;
        println!(
            "wrote {} ({} uniform, {} non-uniform kernels)",
            path.display(),
            stats.uniform_total(),
            stats.non_uniform_total()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// count-ops / bench
// ---------------------------------------------------------------------------

#[derive(Args)]
struct CountOpsArgs {
    /// edge, cls-small, cls-r18, resnet18 or bireal18.
    #[arg(long)]
    net: String,
    #[arg(long, default_value_t = 224)]
    size: usize,
    #[arg(long, default_value_t = 60)]
    channels: usize,
    #[arg(long, default_value_t = 0.0)]
    xi: f64,
}

fn report_for(
    net: &str,
    size: usize,
    channels: usize,
    xi: f64,
) -> Result<CostReport, (i32, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Shape::new(1, 3, size, size);
    match net {
        "edge" => {
            let mut spec = NetworkSpec::edge_default();
            spec.channels = channels;
            spec.cdcm_mid = pidinet::blocks::default_cdcm_mid(channels);
            let net = build_pidinet::<f32>(&spec, &mut rng).map_err(lib_err)?;
            count_ops_edge(&net, input).map_err(lib_err)
        }
        "cls-small" => {
            let spec = NetworkSpec::classify_small(xi, 10);
            let net = build_bipidinet::<f32>(&spec, &mut rng).map_err(lib_err)?;
            count_ops_classifier(&net, input).map_err(lib_err)
        }
        "cls-r18" => {
            let spec = NetworkSpec::classify_r18(xi, 1000);
            let net = build_bipidinet::<f32>(&spec, &mut rng).map_err(lib_err)?;
            count_ops_classifier(&net, input).map_err(lib_err)
        }
        "resnet18" => count_ops_resnet18(&resnet18::<f32>(1000, &mut rng), input).map_err(lib_err),
        "bireal18" => count_ops_bireal18(&bireal18::<f32>(1000, &mut rng), input).map_err(lib_err),
        other => Err(user(format!(
            "unknown net '{other}' (want edge, cls-small, cls-r18, resnet18 or bireal18)"
        ))),
    }
}

fn cmd_count_ops(a: CountOpsArgs) -> CmdResult {
    let r = report_for(&a.net, a.size, a.channels, a.xi)?;
    print!("{}", r.table());
    print!("{}", r.kv_lines());
    Ok(())
}

#[derive(Args)]
struct BenchArgs {
    /// edge, cls-small, cls-r18, resnet18 or bireal18.
    #[arg(long)]
    net: String,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 60)]
    channels: usize,
    #[arg(long, default_value_t = 0.0)]
    xi: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    if a.iters == 0 {
        return Err(user("--iters must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let input = Shape::new(1, 3, a.size, a.size);
    let x = pidinet::layers::he_normal::<f32>(input, 3 * a.size * a.size, &mut rng);
    // One unmeasured warm-up pass; the checksum doubles as a determinism
    // probe across --threads settings.
    let mut checksum = 0.0f64;
    let mut times = Vec::with_capacity(a.iters);
    let mut forward: Box<dyn FnMut(&Tensor<f32>) -> Result<f64, (i32, String)>> = match a
        .net
        .as_str()
    {
        "edge" => {
            let mut spec = NetworkSpec::edge_default();
            spec.channels = a.channels;
            spec.cdcm_mid = pidinet::blocks::default_cdcm_mid(a.channels);
            let mut net = build_pidinet::<f32>(&spec, &mut rng).map_err(lib_err)?;
            Box::new(move |x| {
                let maps = net.forward(x, false).map_err(lib_err)?;
                Ok(maps
                    .iter()
                    .flat_map(|m| m.data())
                    .map(|&v| v as f64)
                    .sum())
            })
        }
        "cls-small" | "cls-r18" => {
            let spec = if a.net == "cls-small" {
                NetworkSpec::classify_small(a.xi, 10)
            } else {
                NetworkSpec::classify_r18(a.xi, 1000)
            };
            let mut net = build_bipidinet::<f32>(&spec, &mut rng).map_err(lib_err)?;
            Box::new(move |x| {
                let y = net.forward(x, false).map_err(lib_err)?;
                Ok(y.data().iter().map(|&v| v as f64).sum())
            })
        }
        "resnet18" => {
            let mut net = resnet18::<f32>(1000, &mut rng);
            Box::new(move |x| {
                let y = net.forward(x, false).map_err(lib_err)?;
                Ok(y.data().iter().map(|&v| v as f64).sum())
            })
        }
        "bireal18" => {
            let mut net = bireal18::<f32>(1000, &mut rng);
            Box::new(move |x| {
                let y = net.forward(x, false).map_err(lib_err)?;
                Ok(y.data().iter().map(|&v| v as f64).sum())
            })
        }
        other => {
            return Err(user(format!(
                "unknown net '{other}' (want edge, cls-small, cls-r18, resnet18 or bireal18)"
            )))
        }
    };
    forward(&x)?;
    for _ in 0..a.iters {
        let t0 = std::time::Instant::now();
        checksum = forward(&x)?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = times.iter().sum::<f64>() / times.len() as f64;
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / times.len() as f64;
    println!("forward {} iters: mean {mean:.3} ms, stddev {:.3} ms", a.iters, var.sqrt());
    println!("checksum {checksum:.9e}");
    Ok(())
}

// ---------------------------------------------------------------------------
// entry
// ---------------------------------------------------------------------------

fn thread_cap(flag: Option<usize>) -> Result<Option<usize>, (i32, String)> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("PIDI_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(user(format!("PIDI_THREADS='{v}' is not a thread count"))),
        },
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = thread_cap(cli.threads)? {
        if n > 0 {
            // Ignore the error: the pool can only be set once per process.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Infer(a) => cmd_infer(a),
        Cmd::ReparamExport(a) => cmd_reparam_export(a),
        Cmd::Analyze(a) => cmd_analyze(a),
        Cmd::CountOps(a) => cmd_count_ops(a),
        Cmd::Bench(a) => cmd_bench(a),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err((code, msg)) = run(cli) {
        eprintln!("pidi: {msg}");
        std::process::exit(code);
    }
}
