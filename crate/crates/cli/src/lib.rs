//! `hywu` command-line driver.
//!
//! Every subcommand stages its outputs in memory and writes them in one go,
//! so a failing run leaves the output directory untouched.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hywu_core::checkpoint::{load_checkpoint, Checkpoint};
use hywu_core::config::RunConfig;
use hywu_core::conflict::AdapterPoint;
use hywu_core::experiment::{conflict_suite, curves_csv, gradient_analysis, manifold_analysis, run_method};
use hywu_core::report::{fmt_f64, svg_curves, unix_ms, Csv, Format, Outputs, RunManifest};
use hywu_core::selfcheck::run_selfcheck;
use hywu_core::train::{eval, EvalShuffle, Method, TrainedModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "hywu", version, about = "Conditional adapter generation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the arm named by `train.method` and save its checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the configured tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train all six arms and emit the comparison table.
    ConflictSuite(Common),
    /// Per-sample gradient cosine statistics, at an adapter checkpoint or
    /// the configured point.
    AnalyzeGradients {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Geometry of generated updates. Trains a generator when no checkpoint
    /// is given.
    AnalyzeManifold {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Round trip, zero-init and gradient-check invariants. Exits 1 on failure.
    Selfcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config; omitted keys take their defaults (see `hywu defaults`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Output formats to keep. Repeatable or comma separated; all by default.
    #[arg(long, value_enum, value_delimiter = ',')]
    format: Vec<FormatArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormatArg {
    Csv,
    Json,
    Svg,
}

impl From<FormatArg> for Format {
    fn from(f: FormatArg) -> Format {
        match f {
            FormatArg::Csv => Format::Csv,
            FormatArg::Json => Format::Json,
            FormatArg::Svg => Format::Svg,
        }
    }
}

/// Errors that map to exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_toml(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    Ok(cfg)
}

fn commit(common: &Common, command: &str, cfg: &RunConfig, started: u128, mut outputs: Outputs) -> anyhow::Result<()> {
    if !common.format.is_empty() {
        let keep: Vec<Format> = common.format.iter().map(|f| (*f).into()).collect();
        outputs.retain_formats(&keep);
    }
    let manifest = RunManifest {
        command: command.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        started_unix_ms: started,
        finished_unix_ms: 0,
        outputs: Vec::new(),
    };
    let written = outputs.commit(&common.out, manifest)?;
    log::info!("wrote {} files to {}", written.len(), common.out.display());
    Ok(())
}

fn checkpoint_bytes(ckpt: &Checkpoint) -> anyhow::Result<Vec<u8>> {
    Ok(hywu_core::checkpoint::encode(ckpt)?)
}

fn cmd_train(common: &Common) -> anyhow::Result<i32> {
    let started = unix_ms();
    let cfg = load_config(common)?;
    let exp = cfg.experiment()?;
    let (result, model) = run_method(&cfg, &exp)?;
    let mut out = Outputs::new();
    out.add_json("result.json", &result)?;
    out.add_csv("curves.csv", &curves_csv(&result)?);
    let series: Vec<(String, Vec<f64>)> = result
        .curves
        .iter()
        .enumerate()
        .map(|(t, c)| (format!("task {t}"), c.clone()))
        .collect();
    out.add("curves.svg", svg_curves(&format!("{} training loss", result.method.name()), &series, true));
    match model {
        TrainedModel::Generator(state) => out.add("generator.hywu", checkpoint_bytes(&Checkpoint::Generator(state))?),
        TrainedModel::Fixed(set) => out.add(
            "adapters.hywu",
            checkpoint_bytes(&Checkpoint::Adapters {
                layout: exp.layout.clone(),
                set,
            })?,
        ),
        TrainedModel::PerTask(sets) => {
            for (t, set) in sets.into_iter().enumerate() {
                out.add(
                    format!("adapters_task{t}.hywu"),
                    checkpoint_bytes(&Checkpoint::Adapters {
                        layout: exp.layout.clone(),
                        set,
                    })?,
                );
            }
        }
        TrainedModel::FullWeights(_) => log::warn!("sft weights have no checkpoint form; only reports are written"),
    }
    println!("{} mean eval loss {}", result.method.name(), fmt_f64(result.mean_eval_loss()));
    commit(common, "train", &cfg, started, out)?;
    Ok(EXIT_OK)
}

fn model_from_checkpoint(path: &Path, cfg: &RunConfig) -> anyhow::Result<TrainedModel> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    let exp_layout = cfg.experiment()?.layout;
    let (layout, model) = match ckpt {
        Checkpoint::Generator(state) => (state.layout.clone(), TrainedModel::Generator(state)),
        Checkpoint::Adapters { layout, set } => (layout, TrainedModel::Fixed(set)),
    };
    if *layout != *exp_layout {
        bail!(
            "checkpoint token shape {:?} does not match the configured backbone {:?}",
            layout.token_shape(),
            exp_layout.token_shape()
        );
    }
    Ok(model)
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> anyhow::Result<i32> {
    let started = unix_ms();
    let cfg = load_config(common)?;
    let model = model_from_checkpoint(checkpoint, &cfg)?;
    let exp = cfg.experiment()?;
    let data = exp.eval_set(cfg.train.eval_per_task);
    let losses = eval(&model, &exp, &data, EvalShuffle::None)?;
    let mut csv = Csv::new(&["task", "loss"]);
    for (t, l) in losses.iter().enumerate() {
        csv.row(vec![t.to_string(), fmt_f64(*l)])?;
    }
    let mut out = Outputs::new();
    out.add_csv("eval.csv", &csv);
    out.add_json("eval.json", &losses)?;
    for (t, l) in losses.iter().enumerate() {
        println!("task {t} loss {}", fmt_f64(*l));
    }
    commit(common, "eval", &cfg, started, out)?;
    Ok(EXIT_OK)
}

fn cmd_conflict_suite(common: &Common) -> anyhow::Result<i32> {
    let started = unix_ms();
    let cfg = load_config(common)?;
    let (report, out) = conflict_suite(&cfg)?;
    println!("{:<11} {:>14}", "method", "mean loss");
    for row in &report.rows {
        println!("{:<11} {:>14.6e}", row.method.name(), row.mean_loss);
    }
    if let Some(b) = &report.bound {
        println!("compromise bound per task {}", fmt_f64(b.per_task));
    }
    if let Some(o) = &report.ordering {
        println!(
            "pg < shuffle-pg: {}  pg < avg-pg: {}  controls at or above 0.8 bound: {}",
            o.pg_below_shuffle, o.pg_below_avg, o.controls_collapse
        );
    }
    commit(common, "conflict-suite", &cfg, started, out)?;
    Ok(EXIT_OK)
}

fn cmd_analyze_gradients(common: &Common, checkpoint: Option<&Path>) -> anyhow::Result<i32> {
    let started = unix_ms();
    let cfg = load_config(common)?;
    let point = match checkpoint {
        None => None,
        Some(p) => match model_from_checkpoint(p, &cfg)? {
            TrainedModel::Fixed(set) => Some(AdapterPoint::Given(set)),
            _ => bail!("analyze-gradients needs an adapter checkpoint, {} holds a generator", p.display()),
        },
    };
    let (report, out) = gradient_analysis(&cfg, point)?;
    let k = report.stats.tasks;
    for i in 0..k {
        for j in i..k {
            println!(
                "tasks {i},{j}: mean cos {}  conflict ratio {}",
                fmt_f64(report.stats.mean_cos[i][j]),
                fmt_f64(report.stats.conflict_ratio[i][j])
            );
        }
    }
    commit(common, "analyze-gradients", &cfg, started, out)?;
    Ok(EXIT_OK)
}

fn cmd_analyze_manifold(common: &Common, checkpoint: Option<&Path>) -> anyhow::Result<i32> {
    let started = unix_ms();
    let cfg = load_config(common)?;
    let exp = cfg.experiment()?;
    let state = match checkpoint {
        Some(p) => match model_from_checkpoint(p, &cfg)? {
            TrainedModel::Generator(state) => state,
            _ => bail!("analyze-manifold needs a generator checkpoint"),
        },
        None => {
            let mut tc = cfg.train.clone();
            tc.method = Method::Pg;
            hywu_core::train::train_pg(&tc, &exp)?.1
        }
    };
    let (report, out) = manifold_analysis(&cfg, &exp, &state, exp.tasks.len() >= 2)?;
    println!("k-means purity {}", fmt_f64(report.purity));
    println!(
        "knn margin {} (knn {}, random {})",
        fmt_f64(report.knn.margin),
        fmt_f64(report.knn.knn_mean),
        fmt_f64(report.knn.random_mean)
    );
    if let Some(s) = &report.spread {
        println!(
            "separation ratio generated {} optimized {}",
            fmt_f64(s.generated.separation_ratio),
            fmt_f64(s.optimized.separation_ratio)
        );
    }
    commit(common, "analyze-manifold", &cfg, started, out)?;
    Ok(EXIT_OK)
}

fn cmd_selfcheck(seed: u64) -> anyhow::Result<i32> {
    let lines = run_selfcheck(seed)?;
    let mut ok = true;
    for l in &lines {
        println!("[{}] {}: {}", if l.passed { "pass" } else { "FAIL" }, l.name, l.detail);
        ok &= l.passed;
    }
    Ok(if ok { EXIT_OK } else { EXIT_FAILURE })
}

fn dispatch(cli: Cli) -> anyhow::Result<i32> {
    match &cli.command {
        Command::Train(c) => cmd_train(c),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::ConflictSuite(c) => cmd_conflict_suite(c),
        Command::AnalyzeGradients { common, checkpoint } => cmd_analyze_gradients(common, checkpoint.as_deref()),
        Command::AnalyzeManifold { common, checkpoint } => cmd_analyze_manifold(common, checkpoint.as_deref()),
        Command::Selfcheck { seed, .. } => cmd_selfcheck(*seed),
        Command::Defaults => {
            print!("{}", RunConfig::default().to_toml()?);
            Ok(EXIT_OK)
        }
    }
}

fn threads(cli: &Cli) -> Option<usize> {
    match &cli.command {
        Command::Train(c) | Command::ConflictSuite(c) => c.threads,
        Command::Eval { common, .. }
        | Command::AnalyzeGradients { common, .. }
        | Command::AnalyzeManifold { common, .. } => common.threads,
        Command::Selfcheck { threads, .. } => *threads,
        Command::Defaults => None,
    }
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<S: AsRef<str>>(argv: &[S]) -> i32 {
    let _ = env_logger::Builder::from_default_env()
        .filter_level(log::LevelFilter::Warn)
        .try_init();
    let cli = match Cli::try_parse_from(argv.iter().map(|s| s.as_ref())) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match threads(&cli) {
        Some(0) => Err(anyhow!(UsageError("--threads must be positive".into()))),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(cli)),
            Err(e) => Err(anyhow!(e)),
        },
        None => dispatch(cli),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                EXIT_USAGE
            } else {
                EXIT_FAILURE
            }
        }
    }
}
