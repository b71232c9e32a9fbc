use std::path::Path;
use std::process::{Command, Output};

use collab_core::metrics::{read_report, ReportFormat};

const BIN: &str = env!("CARGO_BIN_EXE_collab");

fn collab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

/// Small enough to train in well under a second.
const TINY: &[&str] = &[
    "--set",
    "split.sizes={train = 20, val = 10, test = 10}",
    "--set",
    "train.iterations=4",
    "--set",
    "train.eval_every=2",
    "--set",
    "train.batch_size=2",
];

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

const OUTPUTS: [&str; 5] = ["checkpoint.bin", "history.csv", "report.csv", "ledger.csv", "config.toml"];

fn read_outputs(dir: &Path) -> Vec<Vec<u8>> {
    OUTPUTS.iter().map(|f| std::fs::read(dir.join(f)).unwrap()).collect()
}

#[test]
fn train_twice_gives_identical_outputs_and_creates_the_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("nested/run");
    let mut runs = Vec::new();
    for _ in 0..2 {
        let o = collab(&with_tiny(&[
            "train",
            "--setting",
            "hidden-target",
            "--seed",
            "7",
            "--out",
            path_str(&dir),
        ]));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(read_outputs(&dir));
        std::fs::remove_dir_all(&dir).unwrap();
    }
    for (f, (a, b)) in OUTPUTS.iter().zip(runs[0].iter().zip(&runs[1])) {
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn frozen_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let o = collab(&with_tiny(&["train", "--seed", "3", "--out", path_str(&a)]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = read_outputs(&a);
    let frozen = tmp.path().join("frozen.toml");
    std::fs::copy(a.join("config.toml"), &frozen).unwrap();
    std::fs::remove_dir_all(&a).unwrap();
    let o = collab(&["train", "--config", path_str(&frozen)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_outputs(&a), first);
}

#[test]
fn invalid_setting_is_a_usage_error() {
    let o = collab(&["train", "--setting", "hidden-targte"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let o = collab(&["train", "--set", "train.iteratoins=3"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("iteratoins"));
}

#[test]
fn scaled_dot_with_unequal_sizes_is_rejected_before_work() {
    let o = collab(&["train", "--set", "model.attention=scaled-dot", "--set", "model.key_size=64"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_with_numeric_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let o = collab(&with_tiny(&["train", "--set", "train.lr=1e300", "--out", path_str(tmp.path())]));
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn export_import_export_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.bin");
    let b = tmp.path().join("b.bin");
    let o = collab(&with_tiny(&["export", "--setting", "accurate-pose", "--out", path_str(&a)]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = collab(&["import", "--input", path_str(&a), "--out", path_str(&b)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn damaged_containers_are_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.bin");
    assert_eq!(code(&collab(&with_tiny(&["export", "--out", path_str(&a)]))), 0);
    let bytes = std::fs::read(&a).unwrap();

    let cut = tmp.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = collab(&["import", "--input", path_str(&cut)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));

    let mut bumped = bytes.clone();
    bumped[8] += 1;
    let newer = tmp.path().join("newer.bin");
    std::fs::write(&newer, &bumped).unwrap();
    let o = collab(&["import", "--input", path_str(&newer)]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
}

#[test]
fn trained_on_an_exported_dataset_matches_generated() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d.bin");
    assert_eq!(code(&collab(&with_tiny(&["export", "--out", path_str(&data)]))), 0);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&collab(&with_tiny(&["train", "--out", path_str(&a)]))), 0);
    let o = collab(&with_tiny(&["train", "--dataset", path_str(&data), "--out", path_str(&b)]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(a.join("checkpoint.bin")).unwrap(),
        std::fs::read(b.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn eval_reports_every_checkpoint_with_bis() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ckpts = Vec::new();
    for method in ["single-normal", "single-degraded", "cat-all", "ours-with-msg"] {
        let dir = tmp.path().join(method);
        let set = format!("model.method={method}");
        let o = collab(&with_tiny(&["train", "--set", &set, "--out", path_str(&dir)]));
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        ckpts.push(dir.join("checkpoint.bin"));
    }
    let report = tmp.path().join("out/report.json");
    let mut args = vec!["eval", "--out", path_str(&report), "--set", "metrics.format=json"];
    for c in &ckpts {
        args.push("--checkpoint");
        args.push(path_str(c));
    }
    let o = collab(&with_tiny(&args));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let records = read_report(&report, ReportFormat::Json).unwrap();
    let methods: Vec<&str> = records.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(methods, ["single-normal", "single-degraded", "cat-all", "ours-with-msg"]);
    let ours = &records[3];
    let cat = &records[2];
    assert_eq!(ours.kbpf, Some(1168.0 / 1024.0));
    assert_eq!(cat.kbpf, Some(4.0));
    assert!(ours.selection_acc.is_some() && cat.selection_acc.is_none());
    assert!(records[0].bis.is_none() && ours.bis.is_some());
}

#[test]
fn incompatible_checkpoint_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("m");
    let o = collab(&with_tiny(&["train", "--out", path_str(&dir)]));
    assert_eq!(code(&o), 0);
    let ckpt = dir.join("checkpoint.bin");
    let o = collab(&with_tiny(&[
        "eval",
        "--checkpoint",
        path_str(&ckpt),
        "--out",
        path_str(&tmp.path().join("r.csv")),
        "--set",
        "scenario.agents=4",
        "--set",
        "model.agents=4",
        "--set",
        "scenario.overlap_ranges=[[0.5, 0.9], [0.1, 0.5], [0.0, 0.3]]",
    ]));
    assert_eq!(code(&o), 3);
    assert!(
        String::from_utf8_lossy(&o.stderr).contains("model.agents"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn bis_table_needs_bounds_and_flags_zero_bandwidth() {
    let tmp = tempfile::tempdir().unwrap();
    let no_lower = tmp.path().join("a.csv");
    std::fs::write(&no_lower, "method,setting,accuracy,kbpf\nsingle-normal,s,90,\nOurs,s,80,1024\n").unwrap();
    let o = collab(&["bis-table", "--input", path_str(&no_lower)]);
    assert_eq!(code(&o), 3);

    let zero = tmp.path().join("b.csv");
    std::fs::write(
        &zero,
        "method,setting,accuracy,kbpf\nsingle-normal,s,90,\nsingle-degraded,s,70,\nOurs,s,80,1024\nFree,s,80,0\n",
    )
    .unwrap();
    let out = tmp.path().join("bis.csv");
    let o = collab(&["bis-table", "--input", path_str(&zero), "--out", path_str(&out)]);
    assert_eq!(code(&o), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "method,setting,accuracy,kbpf,BIS,error");
    assert_eq!(lines[1], "Ours,s,80.0,1024.0,0.5,");
    assert!(lines[2].starts_with("Free,s,80.0,0.0,,\"undefined metric"), "{}", lines[2]);
}

#[test]
fn sweep_rows_are_sorted_and_scaled_dot_rejects_unequal_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep.csv");
    let o = collab(&with_tiny(&[
        "sweep",
        "--m",
        "8,2",
        "--k",
        "8,4",
        "--set",
        "model.attention=scaled-dot",
        "--set",
        "model.key_size=8",
        "--out",
        path_str(&out),
    ]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["m", "k", "selection_acc", "overall_acc", "error"]);
    let cells: Vec<(&str, &str)> = rows[1..].iter().map(|r| (r[0], r[1])).collect();
    assert_eq!(cells, [("2", "4"), ("2", "8"), ("8", "4"), ("8", "8")]);
    for r in &rows[1..] {
        let errored = r[4].contains("configuration error");
        assert_eq!(errored, r[0] != r[1], "{r:?}");
        assert_eq!(r[2].is_empty(), errored);
    }
}
