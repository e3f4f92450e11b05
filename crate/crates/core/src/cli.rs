//! Command-line front end: `train`, `ablate`, `analyze` and `gradcheck`.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 invalid input
//! (usage, config, unreadable or corrupt files), 3 training diverged.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use crate::attention::Network;
use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{generate, read_parallel, Example, Vocab};
use crate::diagnostics::{
    gradcheck, measure_disagreement, per_layer_table, DisagreementReport, GradCheckOptions,
    Measure,
};
use crate::disagreement::{DisagreementConfig, Term};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::{fit, Trainer, METRICS_HEADER};

pub const THREADS_ENV: &str = "DISAGREE_ATTN_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "attn-disagree",
    version,
    about = "Multi-head attention with disagreement regularization on toy transduction tasks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write metrics, checkpoint and report.
    Train(ConfigArgs),
    /// Train a grid of regularization settings and compare them.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// `table1`, `table2`, or `;`-separated cells of the form
        /// `TERMS@NETWORKS` (comma lists, `none` for no terms).
        #[arg(long, default_value = "table1")]
        grid: String,
    },
    /// Measure exp(D) disagreement of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Source-side corpus file; defaults to the validation split
        /// recorded in the checkpoint config.
        #[arg(long, requires = "target")]
        source: Option<PathBuf>,
        #[arg(long, requires = "source")]
        target: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write attention matrices of the first N instances under
        /// `OUT/attention/`.
        #[arg(long, requires = "out")]
        dump_attention: Option<usize>,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck(ConfigArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `disagreement.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self, base: ExperimentConfig) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => base,
        };
        for s in &self.set {
            cfg.set(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => 3,
        _ => 2,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| 0),
        Command::Ablate { config, grid } => cmd_ablate(&config, &grid).map(|_| 0),
        Command::Analyze {
            checkpoint,
            source,
            target,
            out,
            dump_attention,
        } => cmd_analyze(
            &checkpoint,
            source.as_deref().zip(target.as_deref()),
            out.as_deref(),
            dump_attention,
        )
        .map(|_| 0),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn report_text(report: &DisagreementReport) -> String {
    let mut s = format!(
        "corpus: {}\ncheckpoint: {}\n\nexp(D) per network\n{}",
        report.corpus,
        report.checkpoint,
        report.summary_table()
    );
    for net in report.networks() {
        write!(s, "\nexp(D) per layer\n{}", per_layer_table(report, net)).unwrap();
    }
    s
}

fn write_report(dir: &Path, report: &DisagreementReport) -> Result<()> {
    write_file(&dir.join("report.csv"), report.to_csv())?;
    write_file(&dir.join("report.txt"), report_text(report))
}

/// Outcome of one training run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub accuracy: f64,
    pub report: DisagreementReport,
    pub steps_per_sec: f64,
}

/// Trains per `cfg` and writes `config.resolved`, `metrics.csv`,
/// `checkpoint.bin` and `report.csv` into `cfg.out`.
pub fn train_run(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    create_dir(&cfg.out)?;
    write_file(&cfg.out.join("config.resolved"), cfg.to_toml())?;
    let data = generate(&cfg.task)?;
    let model = Model::new(cfg.model.clone())?;
    let mut trainer = Trainer::new(model, cfg.disagreement.clone(), cfg.training.lr)?;

    let metrics_path = cfg.out.join("metrics.csv");
    let file = std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = std::io::BufWriter::new(file);
    writeln!(metrics, "{METRICS_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
    let outcome = fit(&mut trainer, &data.train, &data.valid, &cfg.training, |row| {
        writeln!(metrics, "{}", row.to_csv_line()).map_err(|e| Error::io(&metrics_path, e))
    });
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    drop(metrics);
    let summary = outcome?;

    Checkpoint::from_model(cfg, &trainer.model).save(&cfg.out.join("checkpoint.bin"))?;
    let report = measure_disagreement(&trainer.model, &data.valid, &Network::ALL)?;
    write_report(&cfg.out, &report)?;
    Ok(RunResult {
        accuracy: summary.final_accuracy,
        report,
        steps_per_sec: summary.steps_per_sec(),
    })
}

pub fn cmd_train(args: &ConfigArgs) -> Result<RunResult> {
    let cfg = args.resolve(ExperimentConfig::default())?;
    let r = train_run(&cfg)?;
    println!("validation token accuracy: {:.4}", r.accuracy);
    print!("{}", report_text(&r.report));
    println!("wrote {}", cfg.out.display());
    Ok(r)
}

/// One ablation cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub id: String,
    pub terms: BTreeSet<Term>,
    pub networks: BTreeSet<Network>,
}

fn short_term(t: Term) -> &'static str {
    match t {
        Term::Subspace => "sub",
        Term::Position => "pos",
        Term::PositionSos => "pos-sos",
        Term::Output => "out",
    }
}

fn short_network(n: Network) -> &'static str {
    match n {
        Network::EncoderSelf => "enc",
        Network::EncoderDecoder => "ed",
        Network::DecoderSelf => "dec",
    }
}

impl Cell {
    pub fn new(terms: &[Term], networks: &[Network]) -> Self {
        let terms: BTreeSet<Term> = terms.iter().copied().collect();
        let networks: BTreeSet<Network> = networks.iter().copied().collect();
        let id = if terms.is_empty() {
            "baseline".to_string()
        } else {
            let t: Vec<&str> = terms.iter().map(|&t| short_term(t)).collect();
            let n: Vec<&str> = networks.iter().map(|&n| short_network(n)).collect();
            format!("{}@{}", t.join("+"), n.join("+"))
        };
        Cell { id, terms, networks }
    }

    fn disagreement(&self, lambda: f64, base: &DisagreementConfig) -> DisagreementConfig {
        if self.terms.is_empty() {
            return DisagreementConfig {
                lambda: 0.0,
                ..base.clone()
            };
        }
        DisagreementConfig {
            terms: self.terms.clone(),
            networks: self.networks.clone(),
            lambda,
            position_normalization: base.position_normalization,
        }
    }
}

/// Baseline and the six term combinations, all on encoder self-attention.
pub fn table1_grid() -> Vec<Cell> {
    use Term::*;
    let enc = [Network::EncoderSelf];
    vec![
        Cell::new(&[], &enc),
        Cell::new(&[Subspace], &enc),
        Cell::new(&[Position], &enc),
        Cell::new(&[Output], &enc),
        Cell::new(&[Subspace, Output], &enc),
        Cell::new(&[Subspace, Position], &enc),
        Cell::new(&[Subspace, Position, Output], &enc),
    ]
}

/// Baseline and the output term on four network selections.
pub fn table2_grid() -> Vec<Cell> {
    use Network::*;
    vec![
        Cell::new(&[], &[EncoderSelf]),
        Cell::new(&[Term::Output], &[EncoderSelf]),
        Cell::new(&[Term::Output], &[EncoderSelf, EncoderDecoder]),
        Cell::new(&[Term::Output], &[EncoderSelf, DecoderSelf]),
        Cell::new(&[Term::Output], &[EncoderSelf, EncoderDecoder, DecoderSelf]),
    ]
}

fn parse_list<T>(s: &str, what: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            let x = x.trim();
            parse(x).ok_or_else(|| Error::config(format!("unknown {what} {x:?} in grid")))
        })
        .collect()
}

pub fn parse_grid(spec: &str) -> Result<Vec<Cell>> {
    let cells = match spec.trim() {
        "table1" => table1_grid(),
        "table2" => table2_grid(),
        custom => custom
            .split(';')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(|c| {
                let (terms, nets) = c.split_once('@').unwrap_or((c, "encoder-self"));
                let terms = if terms.trim() == "none" {
                    Vec::new()
                } else {
                    parse_list(terms, "term", Term::parse)?
                };
                let nets = parse_list(nets, "network", Network::parse)?;
                Ok(Cell::new(&terms, &nets))
            })
            .collect::<Result<Vec<Cell>>>()?,
    };
    if cells.is_empty() {
        return Err(Error::config("ablation grid has no cells"));
    }
    Ok(cells)
}

pub const ABLATION_HEADER: &str = "cell,terms,networks,val_accuracy,\
exp_d_subspace,exp_d_position_mean,exp_d_position_row_sum,exp_d_output,steps_per_sec";

fn ablation_line(cell: &Cell, r: &RunResult) -> String {
    let terms: Vec<&str> = cell.terms.iter().map(|t| t.as_str()).collect();
    let nets: Vec<&str> = if cell.terms.is_empty() {
        Vec::new()
    } else {
        cell.networks.iter().map(|n| n.as_str()).collect()
    };
    let mut s = format!(
        "{},{},{},{:.6}",
        cell.id,
        terms.join("+"),
        nets.join("+"),
        r.accuracy
    );
    for m in Measure::ALL {
        let v = r
            .report
            .aggregate_exp(Network::EncoderSelf, m)
            .unwrap_or(f64::NAN);
        write!(s, ",{v:.6}").unwrap();
    }
    write!(s, ",{:.3}", r.steps_per_sec).unwrap();
    s
}

fn thread_cap() -> usize {
    let hw = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(n) if n >= 1 => n.min(hw.max(1)).max(1),
        _ => hw,
    }
}

/// Runs every cell with the same seed and data, in parallel up to the
/// thread cap, and writes `ablation.csv` plus one run directory per cell.
pub fn cmd_ablate(args: &ConfigArgs, grid: &str) -> Result<Vec<(Cell, RunResult)>> {
    let base = args.resolve(ExperimentConfig::default())?;
    let cells = parse_grid(grid)?;
    let lambda = if base.disagreement.lambda > 0.0 {
        base.disagreement.lambda
    } else {
        1.0
    };
    let configs: Vec<ExperimentConfig> = cells
        .iter()
        .map(|c| {
            let mut cfg = base.clone();
            cfg.disagreement = c.disagreement(lambda, &base.disagreement);
            cfg.out = base.out.join(&c.id);
            cfg
        })
        .collect();
    create_dir(&base.out)?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunResult>>>> =
        Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = thread_cap().min(cells.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= configs.len() {
                    break;
                }
                let r = train_run(&configs[i]);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });

    let mut csv = format!("{ABLATION_HEADER}\n");
    let mut out = Vec::with_capacity(cells.len());
    for (cell, r) in cells.into_iter().zip(results.into_inner().expect("workers joined")) {
        let r = r.expect("every cell ran").map_err(|e| match e {
            Error::Diverged { step, term } => Error::Diverged {
                step,
                term: format!("{term} (cell {})", cell.id),
            },
            other => other,
        })?;
        csv.push_str(&ablation_line(&cell, &r));
        csv.push('\n');
        out.push((cell, r));
    }
    write_file(&base.out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(out)
}

pub fn cmd_analyze(
    checkpoint: &Path,
    corpus: Option<(&Path, &Path)>,
    out: Option<&Path>,
    dump_attention: Option<usize>,
) -> Result<DisagreementReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = ck.config.clone();
    let model = ck
        .into_model()
        .map_err(|e| Error::parse(format!("{}: {e}", checkpoint.display())))?;
    let examples: Vec<Example> = match corpus {
        Some((src, tgt)) => {
            let vocab = Vocab::for_model(cfg.model.vocab_size)?;
            read_parallel(src, tgt, &vocab)?
        }
        None => generate(&cfg.task)?.valid,
    };
    if examples.is_empty() {
        return Err(Error::config("analysis corpus is empty"));
    }
    let report = measure_disagreement(&model, &examples, &Network::ALL)?;
    print!("{}", report_text(&report));
    if let Some(dir) = out {
        create_dir(dir)?;
        write_report(dir, &report)?;
        if let Some(n) = dump_attention {
            for (i, ex) in examples.iter().take(n).enumerate() {
                let mut g = Graph::no_grad();
                let bound = model.bind(&mut g);
                let fp = model.forward(&mut g, &bound, &ex.source, &ex.target)?;
                let sub = dir.join("attention").join(format!("example{i}"));
                for t in &fp.traces {
                    t.dump_csv(&g, &sub)?;
                }
            }
        }
    }
    Ok(report)
}

/// Exit 0 when every parameter passes, 1 otherwise.
pub fn cmd_gradcheck(args: &ConfigArgs) -> Result<i32> {
    let cfg = args.resolve(ExperimentConfig::gradcheck_default())?;
    let data = generate(&cfg.task)?;
    let examples: Vec<Example> = data
        .valid
        .iter()
        .take(cfg.gradcheck.examples)
        .cloned()
        .collect();
    let opts = GradCheckOptions {
        tolerance: cfg.gradcheck.tolerance,
        step: cfg.gradcheck.step,
        seed: cfg.training.seed,
        ..GradCheckOptions::default()
    };
    let report = gradcheck(&cfg.model, &cfg.disagreement, &examples, &opts)?;
    print!("{report}");
    let worst = report.worst().map_or(0.0, |p| p.max_rel_error);
    if report.passed() {
        println!("gradcheck passed: max relative error {worst:.3e} < {:e}", opts.tolerance);
        Ok(0)
    } else {
        let names: Vec<&str> = report.failures().iter().map(|p| p.name.as_str()).collect();
        println!(
            "gradcheck FAILED at tolerance {:e}: {}",
            opts.tolerance,
            names.join(", ")
        );
        Ok(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_the_published_shape() {
        let t1 = parse_grid("table1").unwrap();
        assert_eq!(t1.len(), 7);
        assert_eq!(t1[0].id, "baseline");
        assert_eq!(t1[6].id, "sub+pos+out@enc");
        let t2 = parse_grid("table2").unwrap();
        assert_eq!(t2.len(), 5);
        assert_eq!(t2[4].networks.len(), 3);
        assert!(t2[1..].iter().all(|c| c.terms == BTreeSet::from([Term::Output])));
    }

    #[test]
    fn custom_grids() {
        let g = parse_grid("none; output@encoder-self,decoder-self ;subspace,position").unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[0].id, "baseline");
        assert_eq!(g[1].id, "out@enc+dec");
        assert_eq!(g[2].networks, BTreeSet::from([Network::EncoderSelf]));
        assert!(parse_grid("").is_err());
        assert!(parse_grid(" ; ").is_err());
        assert!(parse_grid("bogus@encoder-self").is_err());
        assert!(parse_grid("output@nowhere").is_err());
    }

    #[test]
    fn baseline_cell_has_zero_lambda() {
        let c = Cell::new(&[], &[Network::EncoderSelf]);
        let d = c.disagreement(1.0, &DisagreementConfig::default());
        assert_eq!(d.lambda, 0.0);
        assert!(d.terms.is_empty());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["attn-disagree", "gradcheck", "--bogus"]), 2);
        assert_eq!(run(["attn-disagree"]), 2);
        assert_eq!(run(["attn-disagree", "--help"]), 0);
    }

    #[test]
    fn diverged_maps_to_3() {
        let e = Error::Diverged {
            step: 4,
            term: "loss".into(),
        };
        assert_eq!(exit_code(&e), 3);
        assert_eq!(exit_code(&Error::config("x")), 2);
    }
}
