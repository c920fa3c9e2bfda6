//! `tfps` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure (training diverged).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde_json::json;

use tfps::data::{load_csv, make_windows, split, synth_generate, write_csv, CsvSchema, MultivariateSeries, SynthSpec};
use tfps::drift::{patch_distance_matrix, Domain};
use tfps::eval::{evaluate, report_table, routing_report, ResultRow};
use tfps::train::{grid_search, prepare, train, GridSpace};
use tfps::{Checkpoint, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "tfps", version, about = "Pattern-specific experts for time-series forecasting")]
struct Cli {
    /// Overrides the seed of the config or synthetic spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the worker threads used for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DomainArg {
    Time,
    Frequency,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pairwise patch Wasserstein matrices, one CSV per channel and domain.
    AnalyzeDrift {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        patch_len: usize,
        #[arg(long, default_value_t = 8)]
        stride: usize,
        #[arg(long, value_enum, default_value_t = DomainArg::Both)]
        domain: DomainArg,
        /// First row of the analysed window.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Rows in the analysed window (the rest of the series when absent).
        #[arg(long)]
        length: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains one model and writes a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains every cell of a hyper-parameter grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// JSON object from dotted config paths to candidate values.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Train at most this many cells.
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Also report errors in original units.
        #[arg(long)]
        denormalized: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Forecasts the horizon following the last lookback rows of a CSV.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a regime-switching synthetic series.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional CSV of the regime index of every row.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Core(tfps::Error),
}

impl From<tfps::Error> for Failure {
    fn from(e: tfps::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl Failure {
    fn code(&self) -> u8 {
        use tfps::Error as E;
        match self {
            Failure::Usage(_) | Failure::Core(E::Config(_) | E::Json(_)) => 1,
            Failure::Core(e) if e.is_numeric() => 3,
            Failure::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Relative paths that do not exist locally are looked up under `TFPS_DATA_DIR`.
fn data_path(p: &Path) -> PathBuf {
    if p.is_relative() && !p.exists() {
        if let Some(root) = std::env::var_os("TFPS_DATA_DIR") {
            let candidate = PathBuf::from(root).join(p);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    p.to_path_buf()
}

fn read_text(p: &Path) -> Outcome<String> {
    fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))
}

fn write_text(p: &Path, text: &str) -> Outcome<()> {
    fs::write(p, text).map_err(|e| Failure::Core(tfps::Error::Io { path: p.to_path_buf(), source: e }))
}

fn make_dir(p: &Path) -> Outcome<()> {
    fs::create_dir_all(p).map_err(|e| Failure::Core(tfps::Error::Io { path: p.to_path_buf(), source: e }))
}

fn load_config(p: &Path, seed: Option<u64>) -> Outcome<TrainConfig> {
    let mut cfg = TrainConfig::from_json(&read_text(p)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_series(p: &Path, cfg: &TrainConfig) -> Outcome<MultivariateSeries> {
    let schema = CsvSchema {
        timestamp_column: cfg.timestamp_column.clone(),
        channels: cfg.channels.clone(),
    };
    Ok(load_csv(data_path(p), &schema)?)
}

fn dataset_name(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into())
}

fn matrix_csv(m: &Array2<f64>) -> String {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn run(cli: Cli) -> Outcome<()> {
    match cli.command {
        Command::AnalyzeDrift { data, patch_len, stride, domain, start, length, out } => {
            let series = load_csv(data_path(&data), &CsvSchema::default())?;
            let end = length.map_or(series.len(), |l| start.saturating_add(l));
            if start >= end || end > series.len() {
                return Err(Failure::Usage(format!("window [{start}, {end}) is outside the {} rows of the series", series.len())));
            }
            let window = series.slice(start, end);
            let domains = match domain {
                DomainArg::Time => vec![Domain::Time],
                DomainArg::Frequency => vec![Domain::Frequency],
                DomainArg::Both => vec![Domain::Time, Domain::Frequency],
            };
            make_dir(&out)?;
            let mut summary = Vec::new();
            for d in domains {
                for (c, name) in window.channel_names().iter().enumerate() {
                    let m = patch_distance_matrix(window.values().column(c), patch_len, stride, d)?;
                    write_text(&out.join(format!("{name}_{}.csv", d.name())), &matrix_csv(&m.distances))?;
                    let max_pair = m.max_pair().map(|(i, j, v)| json!({"i": i, "j": j, "distance": v}));
                    summary.push(json!({"channel": name, "domain": d.name(), "average": m.upper_mean(), "max_pair": max_pair}));
                }
            }
            write_text(&out.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
            log::info!("wrote {} drift matrices to {}", summary.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let series = load_series(&data, &cfg)?;
            let prepared = prepare(&series, &cfg)?;
            let outcome = train(&cfg, &prepared.train, &prepared.val)?;
            let test = evaluate(&outcome.model, &prepared.test, cfg.batch_size, None)?;
            println!(
                "{}",
                json!({"best_epoch": outcome.best_epoch, "best_val_mse": outcome.best_val_mse, "test": test.normalized})
            );
            Checkpoint {
                config: cfg,
                scaler: Some(prepared.scaler),
                channel_names: series.channel_names().to_vec(),
                history: outcome.history,
                model: outcome.model,
            }
            .save(&out)?;
        }
        Command::Grid { config, grid, data, budget, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let space: GridSpace = serde_json::from_str(&read_text(&grid)?)?;
            let series = load_series(&data, &cfg)?;
            let prepared = prepare(&series, &cfg)?;
            let result = grid_search(&cfg, &space, budget, &prepared)?;
            make_dir(&out)?;
            write_text(&out.join("leaderboard.json"), &serde_json::to_string_pretty(&result.leaderboard)?)?;
            write_text(&out.join("best_config.json"), &serde_json::to_string_pretty(&result.best_config)?)?;
            let test = evaluate(&result.best.model, &prepared.test, cfg.batch_size, Some(&prepared.scaler))?;
            write_text(&out.join("best_test.json"), &serde_json::to_string_pretty(&test)?)?;
            Checkpoint {
                config: result.best_config,
                scaler: Some(prepared.scaler),
                channel_names: series.channel_names().to_vec(),
                history: result.best.history,
                model: result.best.model,
            }
            .save(out.join("best.ckpt"))?;
        }
        Command::Eval { ckpt, data, split: which, denormalized, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let cfg = &ck.config;
            let series = load_series(&data, cfg)?;
            let scaler = ck.scaler.clone().ok_or_else(|| Failure::Usage("checkpoint has no scaler".into()))?;
            let (l, h) = (cfg.model.lookback, cfg.model.horizon);
            let part = if which == SplitArg::All {
                series
            } else {
                let (tr, va, te) = split(&series, cfg.split, l + h)?;
                match which {
                    SplitArg::Train => tr,
                    SplitArg::Val => va,
                    _ => te,
                }
            };
            let windows = make_windows(&scaler.apply(&part)?, l, h, cfg.eval_stride)?;
            let report = evaluate(&ck.model, &windows, cfg.batch_size, denormalized.then_some(&scaler))?;
            let routing = routing_report(&ck.model, &windows, cfg.batch_size)?;
            let metrics = report.denormalized.filter(|_| denormalized).unwrap_or(report.normalized);
            let table = report_table(vec![ResultRow {
                dataset: dataset_name(&data),
                horizon: h,
                mse: metrics.mse,
                mae: metrics.mae,
                imp: None,
            }]);
            make_dir(&out)?;
            write_text(&out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
            write_text(&out.join("routing.json"), &serde_json::to_string_pretty(&routing)?)?;
            write_text(&out.join("results.csv"), &table.to_csv()?)?;
            print!("{}", table.to_text());
        }
        Command::Predict { ckpt, input, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let series = load_series(&input, &ck.config)?;
            let (l, h) = (ck.config.model.lookback, ck.config.model.horizon);
            if series.len() < l {
                return Err(Failure::Core(tfps::Error::TooShort { what: "input".into(), len: series.len(), required: l }));
            }
            let tail = series.slice(series.len() - l, series.len());
            let tail = match &ck.scaler {
                Some(sc) => sc.apply(&tail)?,
                None => tail,
            };
            let mut forecast = ck.model.predict_window(tail.values())?;
            if let Some(sc) = &ck.scaler {
                sc.inverse_transform(&mut forecast)?;
            }
            let ts = series.timestamps();
            let last = ts[ts.len() - 1];
            let step = if ts.len() > 1 { last - ts[ts.len() - 2] } else { 1 };
            let stamps = (1..=h as i64).map(|k| last + k * step).collect();
            let result = MultivariateSeries::new(stamps, forecast, series.channel_names().to_vec())?;
            write_csv(&out, &result)?;
        }
        Command::Synth { spec, out, labels } => {
            let mut spec: SynthSpec = serde_json::from_str(&read_text(&spec)?)?;
            if let Some(s) = cli.seed {
                spec.seed = s;
            }
            let generated = synth_generate(&spec)?;
            write_csv(&out, &generated.series)?;
            if let Some(p) = labels {
                let mut text = String::from("row,regime\n");
                for (i, r) in generated.labels.iter().enumerate() {
                    text.push_str(&format!("{i},{r}\n"));
                }
                write_text(&p, &text)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<OsString> = std::env::args_os().collect();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
