//! `gaets` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use gaets::config::{RunConfig, RunDirs};
use gaets::data::{load_many, make_windows_multi, DatasetCache, NormStats, WindowedDataset};
use gaets::gradcheck::{check_model, GradcheckOptions};
use gaets::metrics::{aggregate_seeds, evaluate, EvalOptions, MetricsReport};
use gaets::structure::edge_probabilities;
use gaets::synthetic::{benchmark_graph, generate, random_graph, Nonlinearity};
use gaets::train::{train, write_log, Checkpoint, TrainStatus};
use gaets::{GaetsError, Result};

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "gaets", version, about = "Graph-structure learning forecaster with an SEM autoencoder regularizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Window CSV logs into a dataset cache.
    Ingest(IngestArgs),
    /// Generate a synthetic series from a known graph.
    Synth(SynthArgs),
    /// Train one model per seed.
    Train(TrainArgs),
    /// Score checkpoints on held-out windows.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a small probe.
    Gradcheck(GradcheckArgs),
    /// Write learned edge probabilities.
    ExportGraph(ExportArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// CSV logs; windows never cross file boundaries.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Comma-separated column names, in node order.
    #[arg(long, value_delimiter = ',')]
    columns: Option<Vec<String>>,
    #[arg(long, default_value_t = 80)]
    input_len: usize,
    #[arg(long, default_value_t = 40)]
    horizon: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Trailing moving-average width applied before windowing.
    #[arg(long)]
    smooth: Option<usize>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 6)]
    nodes: usize,
    #[arg(long, default_value_t = 8)]
    edges: usize,
    #[arg(long, default_value_t = 4000)]
    length: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Use the fixed 6-node benchmark graph instead of a random one.
    #[arg(long)]
    benchmark: bool,
    #[arg(long, default_value_t = 0.5)]
    self_coef: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Linear instead of tanh dynamics.
    #[arg(long)]
    linear: bool,
    /// Output directory for `series.csv` and `truth_edges.csv`.
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, short)]
    config: PathBuf,
    /// `GAETS` or `GTS`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Output root; overrides the config and `GAETS_OUT`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint files; two or more are aggregated across seeds.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    /// Run config naming the data.
    #[arg(long, short)]
    config: PathBuf,
    #[arg(long)]
    horizon: Option<usize>,
    /// Split to score: `test` or `val`.
    #[arg(long, default_value = "test")]
    split: String,
    /// Also report metrics under this many sampled graphs.
    #[arg(long)]
    mc_eval: Option<usize>,
    /// Append per-variable SEM reconstruction errors.
    #[arg(long)]
    report_ae: bool,
    /// Report directory; defaults to the run's `reports/`.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 3)]
    per_matrix: usize,
}

#[derive(Args)]
struct ExportArgs {
    checkpoint: PathBuf,
    /// Output directory for `edge_probabilities.csv` and `edges.csv`.
    #[arg(long, short, default_value = ".")]
    out: PathBuf,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<GaetsError> for Failure {
    fn from(e: GaetsError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::ExportGraph(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GaetsError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| GaetsError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_ingest(a: IngestArgs) -> CmdResult {
    let columns = a
        .columns
        .unwrap_or_else(|| gaets::data::BATTERY_COLUMNS.iter().map(|s| s.to_string()).collect());
    let mut segments = load_many(&a.inputs, &columns)?;
    if let Some(k) = a.smooth {
        segments = segments.iter().map(|s| s.smoothed(k)).collect::<Result<_>>()?;
    }
    let windowed = make_windows_multi(&segments, a.input_len, a.horizon, a.stride)?;
    if windowed.too_short {
        log::warn!("some logs are shorter than one window and were skipped");
    }
    let n = windowed.dataset.len();
    DatasetCache::new(windowed.dataset, columns, None).save(&a.out)?;
    println!("{n} windows written to {}", a.out.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> CmdResult {
    let nl = if a.linear { Nonlinearity::Linear } else { Nonlinearity::Tanh };
    let graph = if a.benchmark {
        benchmark_graph()
    } else {
        random_graph(a.nodes, a.edges, a.self_coef, a.noise, nl, a.seed)?
    };
    let series = generate(&graph, a.length, a.seed)?;
    create_dir(&a.out)?;
    let csv = a.out.join("series.csv");
    let edges = a.out.join("truth_edges.csv");
    gaets::data::write_csv(&csv, &series)?;
    graph.write_edge_list(&edges, &series.var_names)?;
    println!("{} × {} series written to {}", series.n_vars(), series.len(), csv.display());
    println!("{} true edges written to {}", graph.edges().len(), edges.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(m) = a.mode {
        cfg.train.mode = m.to_ascii_lowercase();
    }
    if let Some(h) = a.horizon {
        cfg.window.horizon = h;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.seeds = vec![s];
    }
    if let Some(s) = a.seeds {
        cfg.seeds = s;
    }
    if let Some(t) = a.temperature {
        cfg.model.temperature = t;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    if a.run_id.is_some() {
        cfg.run_id = a.run_id;
    }
    cfg.validate()?;
    // Unknown modes are rejected before any data is read.
    cfg.train.objective()?;

    let data = cfg.prepare_data()?;
    let dirs = RunDirs::new(cfg.out_root().join(cfg.run_name()));
    dirs.create()?;
    dirs.write_config(&cfg)?;
    let hash = cfg.hash();
    info!(
        "run {}: {} train / {} val / {} test windows",
        dirs.root.display(),
        data.train.len(),
        data.val.len(),
        data.test.len()
    );

    let mut aborted = Vec::new();
    for seed in cfg.seed_list() {
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let outcome = train(&cfg.model, &tc, &data, &hash)?;
        outcome.checkpoint.save(dirs.checkpoint(seed))?;
        write_log(dirs.log(seed), &outcome.log)?;
        match &outcome.status {
            TrainStatus::Completed => info!(
                "seed {seed}: best epoch {} val {:.6}",
                outcome.checkpoint.epoch,
                outcome.checkpoint.val_base.unwrap_or(f64::NAN)
            ),
            TrainStatus::Aborted { .. } => {
                let path = dirs.logs.join(format!("seed{seed}.diagnostics.json"));
                let body = serde_json::json!({
                    "seed": seed,
                    "status": outcome.status,
                    "last_epoch": outcome.log.last(),
                    "checkpoint_epoch": outcome.checkpoint.epoch,
                });
                write_text(&path, &serde_json::to_string_pretty(&body).expect("json"))?;
                aborted.push((seed, path));
            }
        }
    }
    println!("{}", dirs.root.display());
    if let Some((seed, path)) = aborted.first() {
        return Err(Failure {
            code: 4,
            message: format!(
                "training stopped on a non-finite value (seed {seed}); diagnostics in {}",
                path.display()
            ),
        });
    }
    Ok(())
}

/// Re-expresses a split normalised with `from` in the units of `to`.
fn renormalize(ds: &WindowedDataset, from: &NormStats, to: &NormStats) -> WindowedDataset {
    if from == to {
        ds.clone()
    } else {
        ds.denormalized(from).normalized(to)
    }
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(h) = a.horizon {
        cfg.window.horizon = h;
    }
    cfg.validate()?;
    let checkpoints = a.checkpoints.iter().map(Checkpoint::load).collect::<Result<Vec<_>>>()?;
    let data = cfg.prepare_data()?;
    let split = match a.split.as_str() {
        "test" => &data.test,
        "val" => &data.val,
        other => {
            return Err(GaetsError::Config(format!("unknown split `{other}`, expected test or val")).into());
        }
    };
    let out = match a.out {
        Some(o) => o,
        None => a.checkpoints[0]
            .parent()
            .and_then(Path::parent)
            .map(|run| run.join("reports"))
            .unwrap_or_else(|| PathBuf::from("reports")),
    };
    create_dir(&out)?;
    let opts = EvalOptions {
        mc_graphs: a.mc_eval,
        report_reconstruction: a.report_ae,
        ..EvalOptions::default()
    };
    let mut reports: Vec<MetricsReport> = Vec::new();
    for ck in &checkpoints {
        let ds = renormalize(split, &data.stats, &ck.stats);
        let (report, fc) = evaluate(ck, &ds, &opts)?;
        fc.save_csv(out.join(format!("forecasts_seed{}.csv", ck.seed)), &ck.var_names)?;
        reports.push(report);
    }
    let report = if reports.len() >= 2 {
        aggregate_seeds(&reports)?
    } else {
        reports.pop().expect("at least one checkpoint")
    };
    report.save_json(out.join("metrics.json"))?;
    report.save_csv(out.join("metrics.csv"))?;
    for e in &report.per_seed {
        let fmt = |name: &str| {
            e.metrics
                .get(name)
                .and_then(|m| m.value)
                .map_or("undefined".to_string(), |v| format!("{v:.6}"))
        };
        println!(
            "{} seed {} horizon {}: mae {} rmse {} mape {}",
            report.mode,
            e.seed,
            e.horizon,
            fmt("mae"),
            fmt("rmse"),
            fmt("mape")
        );
        if let Some(rec) = &e.reconstruction {
            for (name, err) in rec {
                println!("  reconstruction {name}: {err:.6}");
            }
        }
    }
    for g in &report.aggregate {
        match (g.mean, g.half_width) {
            (Some(m), Some(h)) => println!("{} horizon {} {}: {m:.6} ± {h:.6} ({} seeds)", report.mode, g.horizon, g.metric, g.seeds),
            _ => println!("{} horizon {} {}: undefined", report.mode, g.horizon, g.metric),
        }
    }
    info!("reports written to {}", out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let opts = GradcheckOptions {
        epsilon: a.epsilon,
        per_matrix: a.per_matrix,
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    let report = check_model(a.seed, &opts)?;
    for (group, g) in &report.groups {
        println!("{group}: {} entries, max relative error {:.3e}", g.probed, g.max_rel_error);
    }
    println!("max relative error {:.3e} over {} entries", report.max_rel_error, report.probed);
    if report.passed(GRADCHECK_TOLERANCE) {
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            message: format!(
                "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
                report.max_rel_error
            ),
        })
    }
}

fn cmd_export(a: ExportArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let p = edge_probabilities(&ck.logits());
    create_dir(&a.out)?;
    let mut matrix = format!("source,{}\n", ck.var_names.join(","));
    for (i, row) in p.rows().into_iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        matrix.push_str(&format!("{},{}\n", ck.var_names[i], cells.join(",")));
    }
    let mut edges = String::from("source,target,probability\n");
    for ((i, j), v) in p.indexed_iter() {
        if i != j {
            edges.push_str(&format!("{},{},{v:?}\n", ck.var_names[i], ck.var_names[j]));
        }
    }
    let mp = a.out.join("edge_probabilities.csv");
    let ep = a.out.join("edges.csv");
    write_text(&mp, &matrix)?;
    write_text(&ep, &edges)?;
    println!("{}", mp.display());
    println!("{}", ep.display());
    Ok(())
}
