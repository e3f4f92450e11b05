use std::path::Path;
use std::process::{Command, Output};

use attn_disagree::attention::Network;
use attn_disagree::checkpoint::Checkpoint;
use attn_disagree::config::ExperimentConfig;
use attn_disagree::data::generate;
use attn_disagree::diagnostics::{measure_disagreement, DisagreementReport, Measure};
use attn_disagree::model::Model;
use attn_disagree::train::METRICS_HEADER;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attn-disagree"))
        .args(args)
        .env("DISAGREE_ATTN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

// Small but valid training setup shared by several tests.
const SMALL: [&str; 8] = [
    "--set",
    "task.train_size=40",
    "--set",
    "task.valid_size=8",
    "--set",
    "training.batch_size=4",
    "--set",
    "training.eval_every=5",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", path(out)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    bin(&args)
}

#[test]
fn zero_steps_writes_initial_checkpoint_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--set", "training.steps=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["config.resolved", "metrics.csv", "report.csv", "checkpoint.bin", "report.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics, format!("{METRICS_HEADER}\n"));

    let resolved = ExperimentConfig::load(&out.join("config.resolved")).unwrap();
    assert_eq!(resolved.training.steps, 0);
    assert_eq!(resolved.out, out);
    let ck = Checkpoint::load(&out.join("checkpoint.bin")).unwrap();
    assert_eq!(ck.config, resolved);
    let fresh = Model::new(resolved.model.clone()).unwrap();
    assert_eq!(ck.into_model().unwrap().params, fresh.params);
}

#[test]
fn identical_invocations_give_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = train(&out, &["--set", "training.steps=12", "--set", "disagreement.terms=[\"output\",\"position\"]", "--seed", "11"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = run("a");
    let b = run("b");
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(text.lines().nth(5).unwrap().split(',').next_back().unwrap().len() > 1);
}

#[test]
fn seed_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = train(&out, &["--set", "training.steps=3", "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_ne!(run("a", "1"), run("b", "2"));
}

#[test]
fn analyze_recomputes_the_measurement() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--set", "training.steps=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = dir.path().join("analysis");
    let o = bin(&["analyze", "--checkpoint", path(&out.join("checkpoint.bin")), "--out", path(&rep)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("Sub.") && stdout.contains("layer 1"));

    let cfg = ExperimentConfig::load(&out.join("config.resolved")).unwrap();
    let model = Model::new(cfg.model.clone()).unwrap();
    let oracle = measure_disagreement(&model, &generate(&cfg.task).unwrap().valid, &Network::ALL).unwrap();
    let written = std::fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(written, oracle.to_csv());
    assert_eq!(written, std::fs::read_to_string(out.join("report.csv")).unwrap());
}

#[test]
fn analyze_single_head_closed_form() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(
        &out,
        &["--set", "training.steps=2", "--set", "model.heads=1", "--set", "model.d_head=32"],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep = dir.path().join("analysis");
    let o = bin(&["analyze", "--checkpoint", path(&out.join("checkpoint.bin")), "--out", path(&rep)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = DisagreementReport::from_csv(&std::fs::read_to_string(rep.join("report.csv")).unwrap()).unwrap();
    for net in Network::ALL {
        for m in [Measure::Subspace, Measure::Output] {
            let v = r.aggregate_exp(net, m).unwrap();
            assert!((v - 0.3679).abs() < 1e-4 && (v - (-1f64).exp()).abs() < 1e-9, "{net} {m} {v}");
        }
    }
}

#[test]
fn analyze_reads_corpus_files_and_dumps_attention() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(code(&train(&out, &["--set", "training.steps=0"])), 0);
    let src = dir.path().join("src.txt");
    let tgt = dir.path().join("tgt.txt");
    std::fs::write(&src, "3 1 4 1\n5 9 2 6 5\n").unwrap();
    std::fs::write(&tgt, "3 1 4 1\n5 9 2 6 5\n").unwrap();
    let rep = dir.path().join("analysis");
    let o = bin(&[
        "analyze",
        "--checkpoint",
        path(&out.join("checkpoint.bin")),
        "--source",
        path(&src),
        "--target",
        path(&tgt),
        "--out",
        path(&rep),
        "--dump-attention",
        "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let dumped = rep.join("attention/example0/encoder-self.layer0.head3.csv");
    let a = attn_disagree::tensor::Tensor::from_csv(&std::fs::read_to_string(dumped).unwrap()).unwrap();
    assert_eq!(a.shape(), &[6, 6]);
    assert!(!rep.join("attention/example1").exists());

    std::fs::write(&tgt, "3 1 4 1\n").unwrap();
    let o = bin(&["analyze", "--checkpoint", path(&out.join("checkpoint.bin")), "--source", path(&src), "--target", path(&tgt)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn analyze_rejects_missing_and_corrupt_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-checkpoint.bin");
    let o = bin(&["analyze", "--checkpoint", path(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no-such-checkpoint.bin"), "{}", stderr(&o));

    let corrupt = dir.path().join("corrupt.bin");
    std::fs::write(&corrupt, b"ADISCKPT\x01\x00\x00\x00garbage").unwrap();
    let o = bin(&["analyze", "--checkpoint", path(&corrupt)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("corrupt.bin"));
}

#[test]
fn gradcheck_exit_codes() {
    let o = bin(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = bin(&["gradcheck", "--set", "gradcheck.tolerance=0"]);
    assert_eq!(code(&o), 1);
    let o = bin(&["gradcheck", "--no-such-flag"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn invalid_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--set", "model.d_head=5"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("d_model"));
    let o = train(&out, &["--set", "training.nonsense=1"]);
    assert_eq!(code(&o), 2);
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nheads = \"four\"\n").unwrap();
    let o = bin(&["train", "--config", path(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad.toml"));
    let o = bin(&["train", "--config", path(&dir.path().join("absent.toml"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-file");
    let cfg = dir.path().join("exp.toml");
    std::fs::write(
        &cfg,
        format!(
            "out = {:?}\n[task]\nkind = \"reverse\"\ntrain_size = 30\nvalid_size = 5\n\
             [disagreement]\nterms = [\"subspace\"]\nlambda = 0.5\n[training]\nsteps = 2\nbatch_size = 3\n",
            path(&out)
        ),
    )
    .unwrap();
    let o = bin(&["train", "--config", path(&cfg), "--set", "disagreement.lambda=0.25"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resolved = ExperimentConfig::load(&out.join("config.resolved")).unwrap();
    assert_eq!(resolved.disagreement.lambda, 0.25);
    assert_eq!(resolved.task.train_size, 30);
    assert_eq!(resolved.training.batch_size, 3);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(
        &dir.path().join("run"),
        &["--set", "training.steps=20", "--set", "training.lr=1e300"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn ablation_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin(&["ablate", "--grid", "", "--out", path(dir.path())]);
    assert_eq!(code(&o), 2);

    let out = dir.path().join("t2");
    let mut args = vec!["ablate", "--grid", "table2", "--out", path(&out), "--set", "training.steps=2"];
    args.extend_from_slice(&SMALL);
    let o = bin(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 1 + 5);
    assert!(rows[1].starts_with("baseline,,,"));
    assert!(rows[5].starts_with("out@enc+dec+ed,output,encoder-self+decoder-self+encoder-decoder,"));
    for cell in ["baseline", "out@enc", "out@enc+ed", "out@enc+dec", "out@enc+dec+ed"] {
        assert!(out.join(cell).join("metrics.csv").exists(), "{cell}");
    }
}
