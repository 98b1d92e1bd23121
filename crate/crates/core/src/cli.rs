//! Subcommands behind the `fscil` binary. Each `cmd_*` function writes its
//! report to `out` and its files under the configured output directory.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{Overrides, RunConfig};
use crate::data::{
    export_embeddings_csv, generate_synthetic, load_embeddings_csv, split_sessions,
    write_provenance, DatasetProvenance, LabeledSample, SessionDataset,
};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;
use crate::losses::{
    grad_check, random_grad_check_case, GradCheckOptions, Objective, GRAD_TOLERANCE,
};
use crate::mathcore::RandomStream;
use crate::metrics::{emit_comparison, emit_table, final_improvement, ResultRow, TableFormat};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::protocol::{
    run_from_base, seen_test_samples, sweep_hyperparams, train_base, train_base_ce, Strategy,
    TrainedState,
};

#[derive(Debug, Parser)]
#[command(
    name = "fscil",
    version,
    about = "Few-shot class-incremental learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train every configured strategy and write result tables.
    Run(CommonArgs),
    /// Check analytic gradients of every objective against finite differences.
    Gradcheck(GradcheckArgs),
    /// Write extracted features of a dataset to CSV.
    Export(ExportArgs),
    /// Compare incremental strategies on one shared base model.
    Compare(CommonArgs),
    /// Final-session accuracy over the gamma and alpha grids.
    Sweep(CommonArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "NAME")]
    pub strategy: Option<String>,
    #[arg(long, value_name = "F")]
    pub gamma: Option<f64>,
    #[arg(long, value_name = "F")]
    pub alpha: Option<f64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// text, csv or json
    #[arg(long, value_name = "FORMAT")]
    pub format: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Random networks checked per objective.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    /// Doubles this analytic gradient coordinate before comparing.
    #[arg(long, hide = true, value_name = "INDEX")]
    pub corrupt_coordinate: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Embedding CSV to run through the extractor; the synthetic test split
    /// of the first seed is used when omitted.
    #[arg(long, value_name = "PATH")]
    pub dataset: Option<PathBuf>,
    /// Output CSV path.
    #[arg(long = "output", value_name = "PATH")]
    pub output: PathBuf,
}

impl CommonArgs {
    pub fn overrides(&self) -> Result<Overrides> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        Ok(Overrides {
            seed: self.seed,
            strategy: self
                .strategy
                .as_deref()
                .map(str::parse)
                .transpose()
                .map_err(cfg_err)?,
            gamma: self.gamma,
            alpha: self.alpha,
            out: self.out.clone(),
            format: self
                .format
                .as_deref()
                .map(str::parse)
                .transpose()
                .map_err(cfg_err)?,
        })
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&self.overrides()?)?;
        Ok(cfg)
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(text.as_bytes())
            } else {
                err.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match dispatch(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: &Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Run(a) => cmd_run(&a.resolve()?, out),
        Command::Compare(a) => cmd_compare(&a.resolve()?, out),
        Command::Sweep(a) => cmd_sweep(&a.resolve()?, out),
        Command::Gradcheck(a) => {
            cmd_gradcheck(&a.common.resolve()?, a.cases, a.corrupt_coordinate, out)
        }
        Command::Export(a) => {
            let cfg = a.common.resolve()?;
            let n = cmd_export(&cfg, &a.checkpoint, a.dataset.as_deref(), &a.output)?;
            writeln!(out, "wrote {n} rows to {}", a.output.display())
                .map_err(|e| Error::io(&a.output, e))
        }
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Generated dataset and session split for one seed.
pub fn sessions_for(cfg: &RunConfig, seed: u64) -> Result<Vec<SessionDataset>> {
    let data = generate_synthetic(&cfg.synthetic_for(seed))?;
    split_sessions(&data, &cfg.split_for(seed))
}

fn base_tag(gamma: f64) -> &'static str {
    if gamma > 0.0 {
        "ccl"
    } else {
        "ce"
    }
}

pub const BASELINE_METHOD: &str = "ce+prototype";

/// One method's outcome for one seed.
#[derive(Debug, Clone)]
pub struct MethodRun {
    pub row: ResultRow,
    pub state: TrainedState,
}

/// Runs the baseline (when enabled) and every configured strategy from one
/// shared base model. Non-baseline rows carry the final-session improvement
/// over the baseline.
pub fn run_methods(
    cfg: &RunConfig,
    seed: u64,
    sessions: &[SessionDataset],
) -> Result<Vec<MethodRun>> {
    let train = cfg.train_for(seed);
    let mut runs: Vec<MethodRun> = Vec::new();
    let tag = base_tag(train.gamma);
    if cfg.experiment.baseline {
        let base = train_base_ce(&train, &sessions[0])?;
        let (reports, state) = run_from_base(&base, sessions, &train, Strategy::Prototype)?;
        runs.push(MethodRun {
            row: ResultRow::new(BASELINE_METHOD, seed, &reports)?,
            state,
        });
    }
    let base = train_base(&train, &sessions[0])?;
    for &strategy in &cfg.experiment.strategies {
        let method = format!("{tag}+{}", strategy.name());
        if runs.iter().any(|r| r.row.method == method) {
            continue;
        }
        let (reports, state) = run_from_base(&base, sessions, &train, strategy)?;
        runs.push(MethodRun {
            row: ResultRow::new(method, seed, &reports)?,
            state,
        });
    }
    if cfg.experiment.baseline {
        let baseline_last = runs[0].row.summary.last;
        for r in runs.iter_mut().skip(1) {
            r.row.summary.final_improv = Some(final_improvement(r.row.summary.last, baseline_last));
        }
    }
    Ok(runs)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    code_version: String,
    command: &'static str,
    created_unix: u64,
    files: Vec<String>,
    config: &'a RunConfig,
}

fn code_version() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Writes `manifest.toml` next to the given result files.
fn write_manifest(cfg: &RunConfig, command: &'static str, files: &[PathBuf]) -> Result<()> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        code_version: code_version(),
        command,
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        files: files
            .iter()
            .map(|p| {
                p.strip_prefix(&cfg.output.dir)
                    .unwrap_or(p)
                    .display()
                    .to_string()
            })
            .collect(),
        config: cfg,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    write_atomic(&cfg.output.dir.join("manifest.toml"), text.as_bytes())
}

fn write_tables(
    cfg: &RunConfig,
    stem: &str,
    render: impl Fn(TableFormat) -> Result<String>,
    files: &mut Vec<PathBuf>,
) -> Result<String> {
    let mut primary = String::new();
    for format in [TableFormat::Text, TableFormat::Csv, TableFormat::Json] {
        let text = render(format)?;
        let path = cfg
            .output
            .dir
            .join(format!("{stem}.{}", format.extension()));
        write_atomic(&path, text.as_bytes())?;
        files.push(path);
        if format == cfg.output.format {
            primary = text;
        }
    }
    Ok(primary)
}

/// Full experiment over every seed: result tables, dataset provenance,
/// one checkpoint per method and seed, and the manifest.
pub fn cmd_run(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = &cfg.output.dir;
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let sessions = sessions_for(cfg, seed)?;
        let prov_path = dir.join("datasets").join(format!("seed-{seed}.toml"));
        write_provenance(
            &DatasetProvenance {
                generator: "gaussian-blobs".into(),
                data_seed: seed,
                split_seed: seed,
                synthetic: cfg.synthetic_for(seed),
                split: cfg.split_for(seed),
            },
            &prov_path,
        )?;
        files.push(prov_path);
        for run in run_methods(cfg, seed, &sessions)? {
            let ckpt = dir
                .join("checkpoints")
                .join(format!("{}-seed-{seed}.ckpt", run.row.method));
            save_checkpoint(&run.state.network(), &ckpt)?;
            files.push(ckpt);
            rows.push(run.row);
        }
    }
    let primary = write_tables(cfg, "results", |f| emit_table(&rows, f), &mut files)?;
    write_manifest(cfg, "run", &files)?;
    emit(out, &primary)
}

/// Every configured strategy from one shared base model per seed, reported
/// as Base / Old / New / Avg / PD / H.
pub fn cmd_compare(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let mut rows = Vec::new();
    for &seed in &cfg.experiment.seeds {
        let sessions = sessions_for(cfg, seed)?;
        let train = cfg.train_for(seed);
        let base = train_base(&train, &sessions[0])?;
        for &strategy in &cfg.experiment.strategies {
            let (reports, _) = run_from_base(&base, &sessions, &train, strategy)?;
            rows.push(ResultRow::new(strategy.name(), seed, &reports)?);
        }
    }
    let mut files = Vec::new();
    let primary = write_tables(cfg, "compare", |f| emit_comparison(&rows, f), &mut files)?;
    write_manifest(cfg, "compare", &files)?;
    emit(out, &primary)
}

/// Final-session accuracy for every (γ, α) pair and seed, using
/// `train.strategy`.
pub fn cmd_sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let mut csv = String::from("seed,gamma,alpha,final_acc\n");
    let mut text = String::new();
    for &seed in &cfg.experiment.seeds {
        let sessions = sessions_for(cfg, seed)?;
        let grid = sweep_hyperparams(
            &cfg.train_for(seed),
            &sessions,
            &cfg.experiment.gamma_grid,
            &cfg.experiment.alpha_grid,
        )?;
        for line in grid.to_csv().lines().skip(1) {
            csv.push_str(&format!("{seed},{line}\n"));
        }
        text.push_str(&format!(
            "seed {seed}, strategy {}: final-session accuracy (%), rows gamma, columns alpha\n",
            cfg.train.strategy.name()
        ));
        text.push_str(&format!("{:>8}", "γ \\ α"));
        for a in &grid.alphas {
            text.push_str(&format!("{a:>9}"));
        }
        text.push('\n');
        for (g, row) in grid.gammas.iter().zip(&grid.final_acc) {
            text.push_str(&format!("{g:>8}"));
            for v in row {
                text.push_str(&format!("{:>9.2}", 100.0 * v));
            }
            text.push('\n');
        }
    }
    let mut files = Vec::new();
    for (name, body) in [("sweep.csv", &csv), ("sweep.txt", &text)] {
        let path = cfg.output.dir.join(name);
        write_atomic(&path, body.as_bytes())?;
        files.push(path);
    }
    write_manifest(cfg, "sweep", &files)?;
    emit(
        out,
        if cfg.output.format == TableFormat::Text {
            &text
        } else {
            &csv
        },
    )
}

/// The objectives exercised by `gradcheck`, each with the strategy path it
/// trains.
pub fn gradcheck_objectives(cfg: &RunConfig) -> Vec<(&'static str, Objective)> {
    let gamma = if cfg.train.gamma > 0.0 {
        cfg.train.gamma
    } else {
        0.01
    };
    let alpha = if cfg.train.alpha > 0.0 {
        cfg.train.alpha
    } else {
        0.01
    };
    vec![
        ("cross_entropy", Objective::CrossEntropy),
        ("covariance_constraint", Objective::CovarianceConstraint),
        ("base", Objective::Base { gamma }),
        ("kl_to_prior", Objective::Kl),
        ("incremental", Objective::Incremental { alpha }),
    ]
}

/// Finite-difference check over `cases` random networks per objective.
/// Prints one line per objective; fails when any error reaches the tolerance.
pub fn cmd_gradcheck(
    cfg: &RunConfig,
    cases: usize,
    corrupt_coordinate: Option<usize>,
    out: &mut dyn Write,
) -> Result<()> {
    if cases == 0 {
        return Err(Error::Config("--cases must be >= 1".into()));
    }
    let seed = cfg.experiment.seeds[0];
    let mut failures = Vec::new();
    let mut report = String::new();
    for (name, objective) in gradcheck_objectives(cfg) {
        let mut stream = RandomStream::new(seed, &format!("gradcheck/{name}"));
        let mut worst = (0.0_f64, String::new());
        for case in 0..cases {
            let (net, batch) = random_grad_check_case(objective, &mut stream)?;
            let corrupt = corrupt_coordinate.map(|i| i % net.parameter_count());
            let r = grad_check(
                &net,
                objective,
                &batch,
                GradCheckOptions {
                    corrupt_coordinate: corrupt,
                    ..GradCheckOptions::default()
                },
            )?;
            if r.max_rel_error >= worst.0 || worst.1.is_empty() {
                let coord = net.parameter_name(r.worst_index).map_or_else(
                    || format!("#{}", r.worst_index),
                    |(n, o)| format!("{n}[{o}]"),
                );
                worst = (
                    r.max_rel_error,
                    format!(
                        "case {case} coordinate {} ({coord}) analytic {:e} numeric {:e}",
                        r.worst_index, r.analytic, r.numeric
                    ),
                );
            }
        }
        let status = if worst.0 < GRAD_TOLERANCE {
            "ok"
        } else {
            "FAIL"
        };
        report.push_str(&format!(
            "{name:<22} max_rel_error {:.3e}  cases {cases}  {status}\n",
            worst.0
        ));
        if status == "FAIL" {
            report.push_str(&format!("  worst: {}\n", worst.1));
            failures.push(format!("{name}: {}", worst.1));
        }
    }
    emit(out, &report)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "gradient error >= {GRAD_TOLERANCE:e} in {}",
            failures.join("; ")
        )))
    }
}

/// Writes `label,f0,…` rows of extracted features; returns the row count.
pub fn cmd_export(
    cfg: &RunConfig,
    checkpoint: &Path,
    dataset: Option<&Path>,
    output: &Path,
) -> Result<usize> {
    let net = load_checkpoint(checkpoint)?;
    let samples: Vec<LabeledSample> = match dataset {
        Some(path) => load_embeddings_csv(path)?,
        None => {
            let sessions = sessions_for(cfg, cfg.experiment.seeds[0])?;
            seen_test_samples(&sessions, sessions.len() - 1)
        }
    };
    export_embeddings_csv(&net.extractor, &samples, output)?;
    Ok(samples.len())
}
