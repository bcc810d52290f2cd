use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn reltrans(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reltrans"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = reltrans(args, cwd);
    assert!(
        out.status.success(),
        "reltrans {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: &[&str] = &[
    "--layers",
    "1",
    "--d-model",
    "16",
    "--heads",
    "2",
    "--d-text",
    "16",
    "--context-length",
    "24",
    "--batch-size",
    "4",
    "--steps",
    "12",
    "--seed",
    "5",
];

fn synth_copy(dir: &Path) {
    ok(
        &[
            "synth",
            "--spec",
            "copy",
            "--entities",
            "120",
            "--seed",
            "3",
            "--out",
            "db",
        ],
        dir,
    );
}

fn train_tiny(dir: &Path, out: &str, extra: &[&str]) {
    let mut args = vec!["train", "--db", "db", "--out", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args, dir);
}

#[test]
fn every_subcommand_documents_its_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: &[(&str, &[&str])] = &[
        ("ingest", &["--data", "--schema", "--out"]),
        ("synth", &["--spec", "--entities", "--noise", "--seed", "--out"]),
        (
            "sample",
            &[
                "--db",
                "--split",
                "--count",
                "--context-length",
                "--width-bound",
                "--mask-dir",
            ],
        ),
        (
            "train",
            &[
                "--db",
                "--config",
                "--seed",
                "--workers",
                "--steps",
                "--lr",
                "--init",
                "--resume",
                "--without",
            ],
        ),
        (
            "eval",
            &[
                "--checkpoint",
                "--ablation",
                "--baseline",
                "--refit-stats",
                "--max-seeds",
            ],
        ),
        (
            "ablate",
            &["--checkpoint", "--context", "--remove-layer", "--retrain", "--steps"],
        ),
        ("gradcheck", &["--coords", "--epsilon", "--tolerance", "--layers"]),
    ];
    for (cmd, flags) in cases {
        let out = ok(&[cmd, "--help"], tmp.path());
        let text = String::from_utf8(out.stdout).unwrap();
        for flag in *flags {
            assert!(text.contains(flag), "`{cmd} --help` does not mention {flag}");
        }
    }
}

#[test]
fn synth_train_eval_pipeline_reports_auroc() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_copy(dir);
    train_tiny(dir, "run", &["--checkpoint-every", "6", "--val-every", "6"]);
    for f in [
        "config.toml",
        "config.sha256",
        "train_log.jsonl",
        "final.ckpt",
        "best.ckpt",
        "run-5/step-6.ckpt",
        "run-5/step-12.ckpt",
    ] {
        assert!(dir.join("run").join(f).exists(), "missing run/{f}");
    }
    let log = fs::read_to_string(dir.join("run/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 12);

    let out = ok(
        &[
            "eval",
            "--db",
            "db",
            "--checkpoint",
            "run/final.ckpt",
            "--out",
            "ev",
            "--baseline",
        ],
        dir,
    );
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("entity_mean"));
    let report = fs::read_to_string(dir.join("ev/report.jsonl")).unwrap();
    let rows: Vec<serde_json::Value> = report.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for row in &rows {
        assert_eq!(row["metric"], "AUROC");
        let v = row["value"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn identical_commands_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_copy(dir);
    for run in ["a", "b"] {
        train_tiny(dir, run, &[]);
        let ck = format!("{run}/final.ckpt");
        ok(
            &["eval", "--db", "db", "--checkpoint", &ck, "--out", &format!("{run}-ev")],
            dir,
        );
    }
    let read = |p: &str| fs::read(dir.join(p)).unwrap();
    assert_eq!(read("a/final.ckpt"), read("b/final.ckpt"));
    assert_eq!(read("a/config.sha256"), read("b/config.sha256"));
    assert_eq!(read("a-ev/report.jsonl"), read("b-ev/report.jsonl"));
}

#[test]
fn sample_writes_tokens_and_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_copy(dir);
    ok(
        &[
            "sample",
            "--db",
            "db",
            "--count",
            "2",
            "--context-length",
            "10",
            "--out",
            "w.tsv",
            "--mask-dir",
            "m",
        ],
        dir,
    );
    let tsv = fs::read_to_string(dir.join("w.tsv")).unwrap();
    let rows: Vec<&str> = tsv.lines().skip(1).collect();
    assert!(!rows.is_empty() && rows.len() <= 20);
    let masked = rows.iter().filter(|r| r.split('\t').nth(6) == Some("true")).count();
    assert_eq!(masked, 2);
    assert!(rows
        .iter()
        .all(|r| r.split('\t').nth(6) != Some("true") || r.ends_with("\t?")));
    for kind in ["col", "feat", "nbr", "full"] {
        let pgm = fs::read(dir.join(format!("m/window-0.{kind}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5"));
    }
}

#[test]
fn fine_tuning_and_resuming_start_from_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_copy(dir);
    train_tiny(dir, "base", &[]);
    // Architecture flags are ignored in favour of the checkpoint's config.
    ok(
        &[
            "train",
            "--db",
            "db",
            "--out",
            "ft",
            "--init",
            "base/final.ckpt",
            "--steps",
            "3",
            "--layers",
            "4",
        ],
        dir,
    );
    let cfg = fs::read_to_string(dir.join("ft/config.toml")).unwrap();
    assert!(cfg.contains("layers = 1"), "{cfg}");
    ok(
        &[
            "train",
            "--db",
            "db",
            "--out",
            "rs",
            "--resume",
            "base/final.ckpt",
            "--steps",
            "3",
        ],
        dir,
    );
    assert!(dir.join("rs/final.ckpt").exists());
}

#[test]
fn ablate_reports_context_and_layer_ablations() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_copy(dir);
    train_tiny(dir, "run", &[]);
    ok(
        &[
            "ablate",
            "--db",
            "db",
            "--checkpoint",
            "run/final.ckpt",
            "--out",
            "ab",
            "--remove-layer",
            "nbr",
            "--steps",
            "4",
        ],
        dir,
    );
    let report = fs::read_to_string(dir.join("ab/report.jsonl")).unwrap();
    let labels: Vec<String> = report
        .lines()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["ablation"]
                .as_str()
                .unwrap()
                .to_string()
        })
        .collect();
    assert_eq!(
        labels,
        [
            "",
            "shuffle_names",
            "drop_self_labels",
            "drop_other_labels",
            "without_nbr"
        ]
    );

    ok(
        &[
            "ablate",
            "--db",
            "db",
            "--checkpoint",
            "run/final.ckpt",
            "--out",
            "rt",
            "--context",
            "drop_self_labels",
            "--retrain",
            "--steps",
            "3",
        ],
        dir,
    );
    assert!(dir.join("rt/context-drop_self_labels/final.ckpt").exists());
    assert_eq!(
        fs::read_to_string(dir.join("rt/report.jsonl")).unwrap().lines().count(),
        2
    );
}

#[test]
fn gradcheck_passes_on_the_default_model() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &["gradcheck", "--coords", "80", "--layers", "1", "--out", "g.json"],
        tmp.path(),
    );
    let g: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("g.json")).unwrap()).unwrap();
    assert!(g["max_rel_error"].as_f64().unwrap() < 1e-5);
    assert_eq!(g["tensors_covered"], g["tensors_total"]);
}

#[test]
fn failures_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_copy(dir);
    let code = |args: &[&str]| reltrans(args, dir).status.code();

    assert_eq!(code(&["train", "--db", "db", "--out", "o", "--no-such-flag"]), Some(2));
    assert_eq!(code(&["train", "--db", "db", "--out", "o", "--heads", "3"]), Some(2));
    fs::write(dir.join("bad.toml"), "[model]\nlayerz = 2\n").unwrap();
    assert_eq!(
        code(&["train", "--db", "db", "--out", "o", "--config", "bad.toml"]),
        Some(2)
    );
    assert_eq!(code(&["eval", "--db", "db", "--out", "o"]), Some(2));

    assert_eq!(
        code(&["eval", "--db", "missing", "--baseline-only", "--out", "o"]),
        Some(3)
    );
    assert_eq!(
        code(&["eval", "--db", "db", "--checkpoint", "missing.ckpt", "--out", "o"]),
        Some(3)
    );
    fs::write(dir.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(
        code(&["eval", "--db", "db", "--checkpoint", "junk.ckpt", "--out", "o"]),
        Some(3)
    );

    let mut diverge = vec!["train", "--db", "db", "--out", "d", "--lr", "1e38"];
    diverge.extend_from_slice(TINY);
    assert_eq!(code(&diverge), Some(4));
    assert!(fs::read_dir(dir.join("d/run-5")).unwrap().any(|e| e
        .unwrap()
        .file_name()
        .to_string_lossy()
        .starts_with("diverged")));
    assert_eq!(
        code(&[
            "gradcheck",
            "--coords",
            "20",
            "--layers",
            "1",
            "--tolerance",
            "1e-12",
            "--out",
            "g.json"
        ]),
        Some(4)
    );
}
