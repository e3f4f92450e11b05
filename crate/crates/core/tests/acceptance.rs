//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any gated criterion fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use attn_disagree::attention::{AttentionTrace, HeadTrace, Network, Site};
use attn_disagree::autodiff::Graph;
use attn_disagree::config::ExperimentConfig;
use attn_disagree::data::{generate, Example};
use attn_disagree::diagnostics::{gradcheck, measure_disagreement, GradCheckOptions, Measure};
use attn_disagree::disagreement::{
    d_output, d_position, d_position_sos, d_subspace, DisagreementConfig, PositionNormalization,
    Term,
};
use attn_disagree::model::Model;
use attn_disagree::tensor::Tensor;
use attn_disagree::train::{fit, Trainer};

struct Outcome {
    gated: bool,
    pass: bool,
}

fn report(id: &str, title: &str, pass: bool, detail: String) -> Outcome {
    println!("{} [{id}] {title}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { gated: true, pass }
}

fn info(id: &str, title: &str, holds: bool, detail: String) -> Outcome {
    println!(
        "INFO [{id}] {title} (not gated): {} {detail}",
        if holds { "observed" } else { "not observed" }
    );
    Outcome {
        gated: false,
        pass: holds,
    }
}

fn trace(g: &mut Graph, attn: &[Tensor], values: &[Tensor], outputs: &[Tensor]) -> AttentionTrace {
    let heads = (0..attn.len())
        .map(|h| HeadTrace {
            attn: g.constant(attn[h].clone()),
            values: g.constant(values[h].clone()),
            output: g.constant(outputs[h].clone()),
        })
        .collect();
    AttentionTrace {
        site: Site {
            network: Network::EncoderSelf,
            layer: 0,
        },
        heads,
    }
}

fn m(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

// --- 1 -------------------------------------------------------------------

fn gradient_validity() -> Outcome {
    let start = Instant::now();
    let base = ExperimentConfig::gradcheck_default();
    let data = generate(&base.task).unwrap();
    let examples: Vec<Example> = data.valid.iter().take(2).cloned().collect();
    let opts = GradCheckOptions {
        tolerance: 1e-4,
        step: 1e-5,
        ..GradCheckOptions::default()
    };
    let mut cells: Vec<(String, DisagreementConfig)> = Term::ALL
        .into_iter()
        .map(|t| (t.to_string(), DisagreementConfig::single(t, &Network::ALL, 1.0)))
        .collect();
    let mut all = DisagreementConfig::single(Term::Subspace, &Network::ALL, 1.0);
    all.terms.extend(Term::ALL);
    cells.push(("all".into(), all));

    let mut pass = base.model.d_model == 8
        && base.model.heads == 2
        && base.model.encoder_layers == 1
        && base.model.decoder_layers == 1
        && base.model.vocab_size == 8;
    let mut parts = Vec::new();
    for (name, cfg) in &cells {
        match gradcheck(&base.model, cfg, &examples, &opts) {
            Ok(r) => {
                let w = r.worst().unwrap();
                pass &= r.passed() && r.params.iter().all(|p| p.checked > 0);
                parts.push(format!("{name} max {:.1e} ({})", w.max_rel_error, w.name));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name} error {e}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 120.0;
    report(
        "1",
        "gradient validity",
        pass,
        format!("{}; tol 1e-4, h 1e-5, {secs:.1}s (< 120s)", parts.join("; ")),
    )
}

// --- 2 -------------------------------------------------------------------

fn closed_forms() -> Outcome {
    let mut g = Graph::no_grad();
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();
    let a = m(&[&[0.3, -1.2, 2.0], &[1.0, 0.5, -0.7]]);
    let attn2 = vec![m(&[&[1.0]]), m(&[&[1.0]])];

    // identical heads → −1 (subspace and output)
    let t = trace(&mut g, &[m(&[&[1.0, 0.0]]), m(&[&[1.0, 0.0]])], &[a.clone(), a.clone()], &[a.clone(), a.clone()]);
    let v = d_subspace(&mut g, &t).unwrap();
    checks.push(("identical V -> -1", g.item(v), -1.0));
    let v = d_output(&mut g, &t).unwrap();
    checks.push(("identical O -> -1", g.item(v), -1.0));

    // orthogonal rows → −0.5
    let p = m(&[&[1.0, 0.0, 0.0], &[0.0, 2.0, 0.0]]);
    let q = m(&[&[0.0, 3.0, 0.0], &[0.0, 0.0, -1.0]]);
    let t = trace(&mut g, &attn2, &[p.clone(), q.clone()], &[p.clone(), q.clone()]);
    let v = d_subspace(&mut g, &t).unwrap();
    checks.push(("orthogonal V -> -0.5", g.item(v), -0.5));
    let v = d_output(&mut g, &t).unwrap();
    checks.push(("orthogonal O -> -0.5", g.item(v), -0.5));

    // disjoint one-hot attention → −0.5 (per-query mean)
    let a1 = m(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
    let a2 = m(&[&[0.0, 0.0, 1.0, 0.0], &[0.0, 0.0, 0.0, 1.0]]);
    let vv = m(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
    let oo = m(&[&[1.0], &[1.0]]);
    let t = trace(&mut g, &[a1, a2], &[vv.clone(), vv.clone()], &[oo.clone(), oo.clone()]);
    let v = d_position(&mut g, &t, PositionNormalization::PerQueryMean).unwrap();
    checks.push(("disjoint one-hots -> -0.5", g.item(v), -0.5));
    let v = d_position_sos(&mut g, &t, PositionNormalization::PerQueryMean).unwrap();
    checks.push(("SOS disjoint -> 1", g.item(v), 1.0));

    // uniform over M=4, H=1 → −0.25
    let u = m(&[&[0.25; 4], &[0.25; 4], &[0.25; 4]]);
    let t = trace(&mut g, std::slice::from_ref(&u), std::slice::from_ref(&vv), &[m(&[&[1.0], &[1.0], &[1.0]])]);
    let v = d_position(&mut g, &t, PositionNormalization::PerQueryMean).unwrap();
    checks.push(("uniform M=4 -> -0.25", g.item(v), -0.25));

    // SOS identical → 0
    let r = m(&[&[0.1, 0.2, 0.7], &[0.5, 0.25, 0.25]]);
    let o3 = m(&[&[1.0], &[1.0]]);
    let v3 = m(&[&[1.0], &[2.0], &[3.0]]);
    let t = trace(&mut g, &[r.clone(), r.clone(), r], &[v3.clone(), v3.clone(), v3], &[o3.clone(), o3.clone(), o3]);
    let v = d_position_sos(&mut g, &t, PositionNormalization::PerQueryMean).unwrap();
    checks.push(("SOS identical -> 0", g.item(v), 0.0));

    let worst = checks
        .iter()
        .map(|(_, got, want)| (got - want).abs())
        .fold(0.0, f64::max);
    let failed: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| (got - want).abs() > 1e-12)
        .map(|(n, got, _)| format!("{n} got {got}"))
        .collect();
    report(
        "2",
        "closed-form regularizer values",
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} cases, max |error| {worst:.1e} (<= 1e-12)", checks.len())
        } else {
            failed.join("; ")
        },
    )
}

// --- 3 -------------------------------------------------------------------

fn oracle_cos(a: &Tensor, b: &Tensor) -> f64 {
    let mut s = 0.0;
    for r in 0..a.rows() {
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for c in 0..a.cols() {
            dot += a.at(r, c) * b.at(r, c);
            na += a.at(r, c) * a.at(r, c);
            nb += b.at(r, c) * b.at(r, c);
        }
        s += dot / (na.sqrt().max(1e-8) * nb.sqrt().max(1e-8));
    }
    s / a.rows() as f64
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn random_stochastic(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let w: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = w.iter().sum();
        for c in 0..cols {
            t.data_mut()[r * cols + c] = w[c] / s;
        }
    }
    t
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut shapes = BTreeSet::new();
    for _ in 0..100 {
        let h = [1usize, 2, 4][rng.random_range(0..3)];
        let n = rng.random_range(1..=6);
        let mm = rng.random_range(1..=6);
        let dk = rng.random_range(1..=5);
        shapes.insert(h);
        let attn: Vec<Tensor> = (0..h).map(|_| random_stochastic(&mut rng, n, mm)).collect();
        let vals: Vec<Tensor> = (0..h).map(|_| random_matrix(&mut rng, mm, dk)).collect();
        let outs: Vec<Tensor> = (0..h).map(|_| random_matrix(&mut rng, n, dk)).collect();

        let (mut sub, mut out, mut pos, mut sos) = (0.0, 0.0, 0.0, 0.0);
        for i in 0..h {
            for j in 0..h {
                sub += oracle_cos(&vals[i], &vals[j]);
                out += oracle_cos(&outs[i], &outs[j]);
                for r in 0..n {
                    for c in 0..mm {
                        let (x, y) = (attn[i].at(r, c), attn[j].at(r, c));
                        pos += x * y;
                        sos += (x - y) * (x - y);
                    }
                }
            }
        }
        let hh = (h * h) as f64;
        let nf = n as f64;
        let want = [
            -sub / hh,
            -out / hh,
            -pos / (hh * nf),
            -pos / hh,
            sos / (hh * nf),
            sos / hh,
        ];

        let mut g = Graph::no_grad();
        let t = trace(&mut g, &attn, &vals, &outs);
        let got = [
            d_subspace(&mut g, &t).unwrap(),
            d_output(&mut g, &t).unwrap(),
            d_position(&mut g, &t, PositionNormalization::PerQueryMean).unwrap(),
            d_position(&mut g, &t, PositionNormalization::RowSum).unwrap(),
            d_position_sos(&mut g, &t, PositionNormalization::PerQueryMean).unwrap(),
            d_position_sos(&mut g, &t, PositionNormalization::RowSum).unwrap(),
        ];
        for (v, w) in got.iter().zip(want) {
            worst = worst.max((g.item(*v) - w).abs());
        }
    }
    report(
        "3",
        "oracle equivalence",
        worst <= 1e-12 && shapes.len() == 3,
        format!("100 random traces, H in {shapes:?}, max |vectorized - loop| {worst:.1e} (<= 1e-12)"),
    )
}

// --- 5 -------------------------------------------------------------------

fn no_new_parameters() -> Outcome {
    let base = ExperimentConfig::default();
    let data = generate(&base.task).unwrap();
    let batch: Vec<&Example> = data.train.iter().take(2).collect();
    let mut counts = BTreeSet::new();
    let mut leaves = BTreeSet::new();
    let mut settings = 0;
    let term_sets: Vec<Vec<Term>> = (0u32..16)
        .map(|mask| Term::ALL.into_iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, t)| t).collect())
        .collect();
    let net_sets: [&[Network]; 4] = [
        &[Network::EncoderSelf],
        &[Network::EncoderSelf, Network::EncoderDecoder],
        &[Network::EncoderSelf, Network::DecoderSelf],
        &Network::ALL,
    ];
    for terms in &term_sets {
        for nets in net_sets {
            for lambda in [0.0, 1.0] {
                let cfg = DisagreementConfig {
                    terms: terms.iter().copied().collect(),
                    networks: nets.iter().copied().collect(),
                    lambda,
                    ..DisagreementConfig::default()
                };
                let mut t = Trainer::new(Model::new(base.model.clone()).unwrap(), cfg.clone(), 1e-3).unwrap();
                t.step(&batch).unwrap();
                counts.insert(t.model.num_parameters());
                // trainable leaves actually recorded on a graph
                let mut g = Graph::new();
                let bound = t.model.bind(&mut g);
                t.model.batch_objective(&mut g, &bound, &batch, &cfg, false).unwrap();
                leaves.insert(
                    (0..g.len())
                        .map(|i| g.var_at(i))
                        .filter(|&v| g.is_leaf(v) && g.requires_grad(v))
                        .map(|v| g.value(v).numel())
                        .sum::<usize>(),
                );
                settings += 1;
            }
        }
    }
    let pass = counts.len() == 1 && leaves == counts;
    report(
        "5",
        "no new parameters",
        pass,
        format!("{settings} settings, parameter counts {counts:?}, trainable graph leaves {leaves:?}"),
    )
}

// --- 4, 6, 7, 8 ------------------------------------------------------------

struct Run {
    accuracy: f64,
    enc: [f64; 4],
    secs: f64,
    rows_ok: Result<(), String>,
}

fn train_copy(term: Option<Term>) -> Run {
    let cfg = ExperimentConfig::default();
    let data = generate(&cfg.task).unwrap();
    let d = match term {
        Some(t) => DisagreementConfig::single(t, &[Network::EncoderSelf], 1.0),
        None => DisagreementConfig::baseline(),
    };
    let mut trainer = Trainer::new(Model::new(cfg.model.clone()).unwrap(), d, cfg.training.lr).unwrap();
    trainer.check_rows = true;
    let start = Instant::now();
    let result = fit(&mut trainer, &data.train, &data.valid, &cfg.training, |_| Ok(()));
    let secs = start.elapsed().as_secs_f64();
    match result {
        Ok(s) => {
            let r = measure_disagreement(&trainer.model, &data.valid, &[Network::EncoderSelf]).unwrap();
            let mut enc = [0.0; 4];
            for (i, m) in Measure::ALL.into_iter().enumerate() {
                enc[i] = r.aggregate_exp(Network::EncoderSelf, m).unwrap();
            }
            Run {
                accuracy: s.final_accuracy,
                enc,
                secs,
                rows_ok: Ok(()),
            }
        }
        Err(e) => Run {
            accuracy: 0.0,
            enc: [f64::NAN; 4],
            secs,
            rows_ok: Err(e.to_string()),
        },
    }
}

fn training_criteria() -> Vec<Outcome> {
    let cfg = ExperimentConfig::default();
    let setup = format!(
        "copy, content vocab {}, lengths {}-{}, d={}, H={}, {} steps, seed {}",
        cfg.task.content_vocab,
        cfg.task.min_len,
        cfg.task.max_len,
        cfg.model.d_model,
        cfg.model.heads,
        cfg.training.steps,
        cfg.training.seed
    );
    println!("      criterion 6/7 setup: {setup}; regularizer on encoder self-attention, λ=1");
    let base = train_copy(None);
    let out = train_copy(Some(Term::Output));
    let sub = train_copy(Some(Term::Subspace));
    let pos = train_copy(Some(Term::Position));
    let runs = [("baseline", &base), ("output", &out), ("subspace", &sub), ("position", &pos)];
    let mut results = Vec::new();

    let row_errors: Vec<String> = runs
        .iter()
        .filter_map(|(n, r)| r.rows_ok.as_ref().err().map(|e| format!("{n}: {e}")))
        .collect();
    results.push(report(
        "4",
        "row-stochasticity",
        row_errors.is_empty(),
        if row_errors.is_empty() {
            format!("every attention row of every step of 4 x {} step runs sums to 1 within 1e-9", cfg.training.steps)
        } else {
            row_errors.join("; ")
        },
    ));

    let idx = |m: Measure| Measure::ALL.iter().position(|&x| x == m).unwrap();
    let (io, is, ip) = (idx(Measure::Output), idx(Measure::Subspace), idx(Measure::PositionRowSum));
    let d_out = out.enc[io] - base.enc[io];
    let d_sub = sub.enc[is] - base.enc[is];
    let d_pos = pos.enc[ip] - base.enc[ip];
    let slowest = runs.iter().map(|(_, r)| r.secs).fold(0.0, f64::max);
    results.push(report(
        "6",
        "exp(D) direction at toy scale",
        d_out > 0.05 && d_sub > 0.05 && d_pos > 0.05 && slowest < 600.0,
        format!(
            "Out. {:.4} -> {:.4} (+{d_out:.4}); Sub. {:.4} -> {:.4} (+{d_sub:.4}); \
             Pos.(row-sum) {:.4} -> {:.4} (+{d_pos:.4}); need > 0.05 each; slowest run {slowest:.0}s (< 600s)",
            base.enc[io], out.enc[io], base.enc[is], sub.enc[is], base.enc[ip], pos.enc[ip]
        ),
    ));

    let worst_gap = [&out, &sub, &pos]
        .iter()
        .map(|r| base.accuracy - r.accuracy)
        .fold(f64::NEG_INFINITY, f64::max);
    let floor_ok = [&out, &sub, &pos].iter().all(|r| r.accuracy >= 0.95);
    results.push(report(
        "7",
        "no task-performance collapse",
        floor_ok && worst_gap <= 0.02,
        format!(
            "accuracy baseline {:.4}, output {:.4}, subspace {:.4}, position {:.4}; floor 0.95, max drop {:.4} (<= 0.02)",
            base.accuracy, out.accuracy, sub.accuracy, pos.accuracy, worst_gap.max(0.0)
        ),
    ));

    results.push(info(
        "8",
        "subspace regularization raises exp(D_out)",
        sub.enc[io] > base.enc[io],
        format!("Out. baseline {:.4} vs subspace-regularized {:.4}", base.enc[io], sub.enc[io]),
    ));
    results
}

// --- 9, 10 -----------------------------------------------------------------

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_attn-disagree"))
        .args(args)
        .env("DISAGREE_ATTN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn determinism(dir: &Path) -> Outcome {
    let common = ["--set", "training.steps=60", "--set", "disagreement.terms=[\"subspace\",\"position\",\"output\"]", "--seed", "5"];
    let mut ok = true;
    let mut notes = Vec::new();
    let compare = |what: &str, a: Vec<u8>, b: Vec<u8>, ok: &mut bool, notes: &mut Vec<String>| {
        let same = a == b && !a.is_empty();
        *ok &= same;
        notes.push(format!("{what} {}", if same { "identical" } else { "DIFFERS" }));
    };

    let mut train_metrics = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(format!("train-{run}"));
        let mut args = vec!["train", "--out", p(&out)];
        args.extend_from_slice(&common);
        let o = cli(&args);
        ok &= o.status.success();
        train_metrics.push(std::fs::read(out.join("metrics.csv")).unwrap_or_default());
    }
    let b = train_metrics.pop().unwrap();
    compare("train metrics.csv", train_metrics.pop().unwrap(), b, &mut ok, &mut notes);

    let mut ablate = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(format!("ablate-{run}"));
        let o = cli(&["ablate", "--grid", "none;output", "--out", p(&out), "--set", "training.steps=20", "--seed", "5"]);
        ok &= o.status.success();
        let mut all = std::fs::read(out.join("baseline/metrics.csv")).unwrap_or_default();
        all.extend(std::fs::read(out.join("out@enc/metrics.csv")).unwrap_or_default());
        ablate.push(all);
    }
    let b = ablate.pop().unwrap();
    compare("ablate per-cell metrics.csv", ablate.pop().unwrap(), b, &mut ok, &mut notes);

    let ck = dir.join("train-a/checkpoint.bin");
    let mut analyze = Vec::new();
    for run in ["a", "b"] {
        let out = dir.join(format!("analyze-{run}"));
        let o = cli(&["analyze", "--checkpoint", p(&ck), "--out", p(&out)]);
        ok &= o.status.success();
        analyze.push(std::fs::read(out.join("report.csv")).unwrap_or_default());
    }
    let b = analyze.pop().unwrap();
    compare("analyze report.csv", analyze.pop().unwrap(), b, &mut ok, &mut notes);

    let g1 = cli(&["gradcheck", "--seed", "5"]);
    let g2 = cli(&["gradcheck", "--seed", "5"]);
    ok &= g1.status.success() && g2.status.success();
    compare("gradcheck output", g1.stdout, g2.stdout, &mut ok, &mut notes);

    report("9", "determinism", ok, notes.join("; "))
}

fn ablation_harness(dir: &Path) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for (grid, expect) in [("table1", 7usize), ("table2", 5usize)] {
        let out = dir.join(grid);
        let o = cli(&["ablate", "--grid", grid, "--out", p(&out), "--set", "training.steps=300"]);
        let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap_or_default();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        let finite = rows.iter().all(|r| {
            r.split(',').skip(3).all(|f| f.parse::<f64>().is_ok_and(f64::is_finite))
        });
        let good = o.status.success() && rows.len() == expect && finite;
        ok &= good;
        let ids: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap_or("")).collect();
        notes.push(format!("{grid}: {} rows [{}] exit {:?}", rows.len(), ids.join(" "), o.status.code()));
    }
    report("10", "ablation harness", ok, notes.join("; "))
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut outcomes = vec![gradient_validity(), closed_forms(), oracle_equivalence(), no_new_parameters()];
    outcomes.extend(training_criteria());
    outcomes.push(determinism(dir.path()));
    outcomes.push(ablation_harness(dir.path()));

    let failed = outcomes.iter().filter(|o| o.gated && !o.pass).count();
    let gated = outcomes.iter().filter(|o| o.gated).count();
    println!("acceptance: {}/{gated} gated criteria passed", gated - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
