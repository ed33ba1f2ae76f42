use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use afss::episodic::Dataset;
use afss::iocli::{read_npy, read_pgm, write_npy, write_pgm};
use afss::metrics::MetricsRow;
use afss::tensorkit::Tensor;
use serde_json::Value;

const SMALL: &str = r#"{
  "episodes": 4,
  "heldout_every": 2,
  "encoder": {"channels": [8, 8, 8, 8]},
  "decoder": {"level_channels": [8, 8, 8, 8], "gate_channels": 4}
}"#;

fn afss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afss"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = afss(args);
    assert!(
        out.status.success(),
        "afss {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    afss(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data plus a briefly trained checkpoint in `root`.
fn trained(root: &Path) {
    let (data, cfg) = (root.join("data"), root.join("small.json"));
    fs::write(&cfg, SMALL).unwrap();
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--classes",
        "4",
        "--test-classes",
        "2",
        "--per-class",
        "3",
    ]);
    ok(&[
        "train-toy",
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&root.join("ckpt")),
        "--log",
        s(&root.join("log.jsonl")),
    ]);
}

/// Episode directory with one support (image and mask) and a query of
/// held-out class 2.
fn episode_dir(root: &Path, with_query_mask: bool) -> std::path::PathBuf {
    let ds = Dataset::load(root.join("data")).unwrap();
    let dir = root.join("episode");
    fs::create_dir_all(&dir).unwrap();
    let (support, query) = (&ds.samples[&2][0], &ds.samples[&2][1]);
    write_npy(dir.join("support_0.npy"), &support.image).unwrap();
    write_pgm(dir.join("support_0.pgm"), &support.mask).unwrap();
    write_npy(dir.join("query.npy"), &query.image).unwrap();
    if with_query_mask {
        write_pgm(dir.join("query.pgm"), &query.mask).unwrap();
    }
    dir
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synth", "--out", "/tmp/x", "--bogus"]), 1);
    assert_eq!(
        code(&["decompose", "--features", "f.npy", "--out", "o", "--mode", "sideways"]),
        1
    );
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["eval", "--help"]), 0);
}

#[test]
fn bad_inputs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.npy");
    let out = afss(&["decompose", "--features", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.npy"));
    assert_eq!(
        code(&[
            "synth",
            "--out",
            s(&dir.path().join("d")),
            "--classes",
            "4",
            "--test-classes",
            "4"
        ]),
        1
    );
    let odd = dir.path().join("odd.npy");
    write_npy(&odd, &Tensor::<f64>::zeros(&[7, 3]).unwrap()).unwrap();
    assert_eq!(code(&["decompose", "--features", s(&odd), "--out", s(dir.path())]), 1);
}

#[test]
fn constant_features_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("flat.npy");
    write_npy(&f, &Tensor::<f64>::full(&[3, 6, 6], 1.0).unwrap()).unwrap();
    let out = afss(&["decompose", "--features", s(&f), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("degenerate partition"));
}

#[test]
fn decompose_writes_the_spectrum_and_finds_the_block() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("block.npy");
    // two feature directions: a 3x4 block on an 8x8 grid against the rest
    let block = |r: usize, c: usize| (2..5).contains(&r) && (1..5).contains(&c);
    let t = Tensor::<f64>::from_fn(&[2, 8, 8], |i| {
        let (ch, p) = (i / 64, i % 64);
        let inside = block(p / 8, p % 8);
        let base = if (ch == 0) == inside { 1.0 } else { 0.05 };
        base + 0.01 * ((p * 7 + ch * 3) % 5) as f64
    })
    .unwrap();
    write_npy(&f, &t).unwrap();
    let out = dir.path().join("o");
    ok(&[
        "decompose",
        "--features",
        s(&f),
        "--out",
        s(&out),
        "--vectors",
        "4",
        "--mode",
        "rw",
    ]);

    let ev: Value = serde_json::from_str(&fs::read_to_string(out.join("eigenvalues.json")).unwrap()).unwrap();
    assert_eq!(ev["mode"], "random_walk");
    assert_eq!((ev["grid_h"].as_u64(), ev["grid_w"].as_u64()), (Some(8), Some(8)));
    let vals: Vec<f64> = ev["eigenvalues"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert_eq!(vals.len(), 4);
    assert!(vals.windows(2).all(|w| w[0] <= w[1]));
    assert!(vals[0].abs() < 1e-8);
    for i in 0..4 {
        let v: Tensor<f64> = read_npy(out.join(format!("eigvec_{i}.npy"))).unwrap();
        assert_eq!(v.shape(), &[8, 8]);
    }
    let part = read_pgm(out.join("partition.pgm")).unwrap();
    assert_eq!(part.count(), 12);
    assert!((0..64).all(|p| part.data()[p] == block(p / 8, p % 8)));
    let bbox: Value = serde_json::from_str(&fs::read_to_string(out.join("bbox.json")).unwrap()).unwrap();
    assert_eq!(
        [&bbox["row_min"], &bbox["row_max"], &bbox["col_min"], &bbox["col_max"]].map(|v| v.as_u64().unwrap()),
        [2, 4, 1, 4]
    );
}

#[test]
fn toy_pipeline_train_eval_infer() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    trained(root);

    let log = fs::read_to_string(root.join("log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    assert_eq!(records[3]["episode"], 4);
    assert!(records[0].get("heldout_miou").is_none());
    assert!(records[1]["heldout_miou"].is_f64());
    assert!(root.join("ckpt/manifest.json").exists());
    assert!(root.join("ckpt/train_config.json").exists());

    let report = root.join("report.json");
    let out = ok(&[
        "eval",
        "--ckpt",
        s(&root.join("ckpt")),
        "--data",
        s(&root.join("data")),
        "--k",
        "2",
        "--report",
        s(&report),
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean"));
    let rep: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let ids: Vec<u64> = rep["classes"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["id"].as_u64().unwrap())
        .collect();
    assert_eq!(ids, vec![2, 3]);
    assert!((0.0..=1.0).contains(&rep["overall"]["miou"].as_f64().unwrap()));

    // inference is deterministic and scores the query when its mask exists
    let ep = episode_dir(root, true);
    let ckpt = root.join("ckpt");
    let infer = |name: &str, extra: &[&str]| {
        let pred = root.join(name);
        let mut args = vec!["infer", "--ckpt", s(&ckpt), "--episode-dir", s(&ep), "--out", s(&pred)];
        args.extend_from_slice(extra);
        let out = ok(&args);
        (fs::read(&pred).unwrap(), String::from_utf8(out.stdout).unwrap())
    };
    let (a, stdout) = infer("a.pgm", &[]);
    let (b, _) = infer("b.pgm", &[]);
    assert_eq!(a, b);
    let row: MetricsRow = serde_json::from_str(stdout.trim()).unwrap();
    let pred = read_pgm(root.join("a.pgm")).unwrap();
    assert_eq!((pred.height(), pred.width()), (64, 64));
    let gt = read_pgm(ep.join("query.pgm")).unwrap();
    assert_eq!(row.counts, MetricsRow::compute(0, &pred, &gt).unwrap().counts);

    // a prototype exported once gives the same mask as the supports it came from
    let proto = root.join("proto.npy");
    ok(&[
        "prototype",
        "--support-dir",
        s(&ep),
        "--ckpt",
        s(&root.join("ckpt")),
        "--out",
        s(&proto),
    ]);
    let flat: Tensor<f64> = read_npy(&proto).unwrap();
    assert_eq!(flat.shape(), &[32]);
    let (c, _) = infer("c.pgm", &["--prototype", s(&proto)]);
    assert_eq!(c, a);

    // oracle-mode prototypes use the support mask and still run
    let (_, stdout) = infer("d.pgm", &["--mode", "oracle"]);
    assert!(stdout.contains("\"iou\""));
}

#[test]
fn infer_without_query_mask_prints_nothing() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    trained(root);
    let ep = episode_dir(root, false);
    let out = ok(&[
        "infer",
        "--ckpt",
        s(&root.join("ckpt")),
        "--episode-dir",
        s(&ep),
        "--out",
        s(&root.join("p.pgm")),
    ]);
    assert!(out.stdout.is_empty());
    assert!(root.join("p.pgm").exists());
}

#[test]
fn seed_flag_changes_training_reproducibly() {
    let root = tempfile::tempdir().unwrap();
    let root = root.path();
    let (data, cfg) = (root.join("data"), root.join("small.json"));
    fs::write(&cfg, SMALL).unwrap();
    ok(&[
        "synth",
        "--out",
        s(&data),
        "--classes",
        "3",
        "--test-classes",
        "1",
        "--per-class",
        "3",
    ]);
    let train = |seed: &str, name: &str| {
        let log = root.join(name);
        ok(&[
            "--seed",
            seed,
            "train-toy",
            "--data",
            s(&data),
            "--config",
            s(&cfg),
            "--out",
            s(&root.join(format!("{name}.ckpt"))),
            "--log",
            s(&log),
        ]);
        fs::read(log).unwrap()
    };
    assert_eq!(train("5", "a"), train("5", "b"));
    assert_ne!(train("5", "c"), train("6", "d"));
}
