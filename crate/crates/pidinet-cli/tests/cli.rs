use std::path::Path;
use std::process::{Command, Output};

use pidinet::pnm::{decode_pnm, encode_pnm, PnmImage};

fn pidi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pidi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = pidi(args);
    assert!(
        out.status.success(),
        "pidi {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 output")
}

fn write_ramp_image(path: &Path, size: usize) {
    let data: Vec<u8> = (0..size * size)
        .map(|i| (((i % size) * 255) / (size - 1)) as u8)
        .collect();
    let img = PnmImage {
        width: size,
        height: size,
        channels: 1,
        maxval: 255,
        data,
    };
    std::fs::write(path, encode_pnm(&img).unwrap()).unwrap();
}

fn train_tiny_edge(out_dir: &Path) {
    run_ok(&[
        "train",
        "--task",
        "edge",
        "--config",
        "[CARV]x4",
        "--channels",
        "8",
        "--samples",
        "10",
        "--size",
        "16",
        "--epochs",
        "1",
        "--batch",
        "4",
        "--seed",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
}

#[test]
fn train_then_infer_writes_an_edge_map() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny_edge(dir.path());
    let ck = dir.path().join("checkpoint.pidn");
    assert!(ck.exists());
    let history = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,step,loss,metric,lr\n"));
    assert_eq!(history.lines().count(), 2);

    let image = dir.path().join("in.pgm");
    write_ramp_image(&image, 16);
    let edge = dir.path().join("edge.pgm");
    run_ok(&[
        "infer",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--out",
        edge.to_str().unwrap(),
    ]);
    let img = decode_pnm(&std::fs::read(&edge).unwrap()).unwrap();
    assert_eq!((img.width, img.height, img.channels), (16, 16, 1));
}

#[test]
fn flags_override_config_file_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        "task=edge\nchannels=10\nepochs=1\nsamples=8\nsize=16\nbatch=4\nseed=3\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let stdout = run_ok(&[
        "train",
        "--config-file",
        cfg.to_str().unwrap(),
        "--channels",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    let settings = stdout.lines().next().unwrap();
    assert!(settings.contains("channels=8"), "{settings}");
    assert!(settings.contains("epochs=1"), "{settings}");
    assert!(settings.contains("seed=3"), "{settings}");
}

#[test]
fn bad_inputs_exit_2() {
    // Unknown block letter in the layout string.
    let out = pidi(&["train", "--config", "[CXRV]x4", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    // Unknown key in a config file.
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "task=edge\nmomentum=0.9\n").unwrap();
    let out = pidi(&["train", "--config-file", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));

    // Malformed image.
    let junk = dir.path().join("junk.pgm");
    std::fs::write(&junk, b"not a pnm").unwrap();
    let ckdir = dir.path().join("net");
    train_tiny_edge(&ckdir);
    let out = pidi(&[
        "infer",
        "--checkpoint",
        ckdir.join("checkpoint.pidn").to_str().unwrap(),
        "--image",
        junk.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    // Bad thread environment variable.
    let out = Command::new(env!("CARGO_BIN_EXE_pidi"))
        .env("PIDI_THREADS", "many")
        .args(["count-ops", "--net", "resnet18"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergent_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = pidi(&[
        "train",
        "--task",
        "edge",
        "--channels",
        "8",
        "--samples",
        "8",
        "--size",
        "16",
        "--epochs",
        "2",
        "--batch",
        "4",
        "--lr",
        "1e25",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn reparam_export_preserves_edge_maps_within_one_gray_level() {
    let dir = tempfile::tempdir().unwrap();
    train_tiny_edge(dir.path());
    let ck = dir.path().join("checkpoint.pidn");
    let folded = dir.path().join("folded.pidn");
    run_ok(&[
        "reparam-export",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        folded.to_str().unwrap(),
    ]);

    let image = dir.path().join("in.pgm");
    write_ramp_image(&image, 16);
    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    for (ckpt, out) in [(&ck, &a), (&folded, &b)] {
        run_ok(&[
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    let ia = decode_pnm(&std::fs::read(&a).unwrap()).unwrap();
    let ib = decode_pnm(&std::fs::read(&b).unwrap()).unwrap();
    for (x, y) in ia.data.iter().zip(&ib.data) {
        assert!(x.abs_diff(*y) <= 1, "{x} vs {y}");
    }

    // Folding twice is refused, as is folding a classifier.
    let out = pidi(&[
        "reparam-export",
        "--checkpoint",
        folded.to_str().unwrap(),
        "--out",
        dir.path().join("x.pidn").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn classifier_train_and_infer_print_scores() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "train",
        "--task",
        "cls",
        "--samples",
        "24",
        "--classes",
        "3",
        "--size",
        "16",
        "--epochs",
        "1",
        "--batch",
        "8",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let ck = dir.path().join("checkpoint.pidn");

    // A classifier checkpoint cannot be re-parameterized.
    let out = pidi(&[
        "reparam-export",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        dir.path().join("x.pidn").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("edge"));

    let image = dir.path().join("in.pgm");
    write_ramp_image(&image, 16);
    let stdout = run_ok(&[
        "infer",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
    ]);
    let mut total = 0.0f64;
    let mut lines = 0;
    for line in stdout.lines() {
        let (_, p) = line.rsplit_once(' ').expect("name prob");
        total += p.parse::<f64>().unwrap();
        lines += 1;
    }
    assert_eq!(lines, 3);
    assert!(total <= 1.0 + 1e-6 && total > 0.99, "{total}");
}

#[test]
fn count_ops_reports_published_scale_flops() {
    let stdout = run_ok(&["count-ops", "--net", "resnet18", "--size", "224"]);
    let flops: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("flops="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((16.8e8..=18.6e8).contains(&flops), "{flops}");
    assert!(stdout.contains("ops="));
    assert!(stdout.contains("memory_bits="));
}

#[test]
fn analyze_writes_spectra_with_zero_dc_and_histograms() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(&[
        "analyze",
        "--kind",
        "central",
        "--grid",
        "8",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(dir.path().join("central_filter0_raw.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 8);
    let dc: f64 = rows[4].split(',').nth(4).unwrap().parse().unwrap();
    assert!(dc.abs() < 1e-12, "{dc}");
    assert!(dir.path().join("central_filter7_log.csv").exists());

    // Kernel histogram needs 3x3 kernels: fold an edge checkpoint first.
    let net = dir.path().join("net");
    train_tiny_edge(&net);
    let folded = dir.path().join("folded.pidn");
    run_ok(&[
        "reparam-export",
        "--checkpoint",
        net.join("checkpoint.pidn").to_str().unwrap(),
        "--out",
        folded.to_str().unwrap(),
    ]);
    run_ok(&[
        "analyze",
        "--checkpoint",
        folded.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let hist = std::fs::read_to_string(dir.path().join("lbp_histogram.csv")).unwrap();
    assert!(hist.starts_with("code,count,uniform\n"));
    assert_eq!(hist.lines().count(), 257);
}

#[test]
fn bench_checksum_is_identical_across_thread_counts() {
    let args = [
        "bench",
        "--net",
        "cls-small",
        "--size",
        "16",
        "--iters",
        "2",
        "--seed",
        "7",
    ];
    let checksum = |stdout: String| -> String {
        stdout
            .lines()
            .find(|l| l.starts_with("checksum"))
            .expect("checksum line")
            .to_string()
    };
    let one = checksum(run_ok(&[&args[..], &["--threads", "1"][..]].concat()));
    let four = checksum(run_ok(&[&args[..], &["--threads", "4"][..]].concat()));
    assert_eq!(one, four);

    // The environment variable form is accepted too.
    let out = Command::new(env!("CARGO_BIN_EXE_pidi"))
        .env("PIDI_THREADS", "2")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        checksum(String::from_utf8(out.stdout).unwrap()),
        one
    );
}
