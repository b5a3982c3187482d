//! Command-line runner: single runs, sweeps, CSV summaries and SVG curves.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::autodiff::{grad_check, Graph, ParamStore, Tensor, DEFAULT_STEP};
use crate::cells::{Cell, CellKind};
use crate::config::{ConfigOverrides, ExperimentConfig, OptimizerKind, Profile, TaskKind, WrapperKind};
use crate::error::{Error, Result};
use crate::tasks::{addition_oracle, dump_samples, AdditionTask, Targets, Task};
use crate::training::train_run_with;

pub use crate::training::{MetricsRecord, TrainReport};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "PONDERBENCH_OUT";
const DEFAULT_OUT: &str = "runs";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;

/// Appends one record as a single JSON line.
pub fn emit_metrics<W: Write>(out: &mut W, record: &MetricsRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, record)?;
    out.write_all(b"\n").map_err(|e| io_err("<metrics>", e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn model_name(cfg: &ExperimentConfig) -> String {
    let cell = match cfg.cell {
        CellKind::Rnn => "RNN",
        CellKind::Lstm => "LSTM",
    };
    match cfg.wrapper {
        WrapperKind::None => cell.to_string(),
        WrapperKind::Repeat => format!("Repeat-{cell}"),
        WrapperKind::Act => format!("ACT-{cell}"),
    }
}

fn hyper_value(cfg: &ExperimentConfig) -> f64 {
    match cfg.wrapper {
        WrapperKind::None => 0.0,
        WrapperKind::Repeat => cfg.rho.unwrap_or(1) as f64,
        WrapperKind::Act => cfg.tau.unwrap_or(0.0),
    }
}

/// One CSV row per report, sorted by task, wrapper, hyperparameter and seed.
pub fn export_summary(reports: &[TrainReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::Usage("summary needs at least one report".into()));
    }
    let mut rows: Vec<&TrainReport> = reports.iter().collect();
    rows.sort_by(|a, b| {
        let (ca, cb) = (&a.config, &b.config);
        (ca.task, ca.wrapper)
            .cmp(&(cb.task, cb.wrapper))
            .then(hyper_value(ca).total_cmp(&hyper_value(cb)))
            .then(ca.seed.cmp(&cb.seed))
    });
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "task",
        "model",
        "wrapper",
        "hyperparameter",
        "seed",
        "solved",
        "training_steps",
        "average_repetitions",
    ];
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        let c = &r.config;
        w.write_record([
            c.task.to_string(),
            model_name(c),
            c.wrapper.to_string(),
            c.hyperparameter(),
            c.seed.to_string(),
            if r.solved { "yes" } else { "no" }.to_string(),
            r.steps_to_solve.map(|s| s.to_string()).unwrap_or_default(),
            format!("{:.3}", r.mean_repetitions),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

fn io_err(path: impl Into<PathBuf>, e: io::Error) -> Error {
    Error::io(path, e)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("csv: {e}"))
}

/// A labelled metrics curve.
#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub records: Vec<MetricsRecord>,
}

/// Legend label for a run: `ρ=…`, `τ=…` or the bare model name.
pub fn series_label(cfg: &ExperimentConfig) -> String {
    match cfg.wrapper {
        WrapperKind::None => model_name(cfg),
        WrapperKind::Repeat => format!("ρ={}", cfg.rho.unwrap_or(1)),
        WrapperKind::Act => format!("τ={}", cfg.tau.unwrap_or(0.0)),
    }
}

/// Loads a metrics file, labelled from the `config.json` next to it when
/// present. Repeated labels get the seed appended.
pub fn load_series(paths: &[PathBuf]) -> Result<Vec<Series>> {
    let mut out = Vec::new();
    let mut seeds = Vec::new();
    for path in paths {
        let records = read_metrics(path)?;
        let cfg_path = path.with_file_name("config.json");
        let cfg = fs::read_to_string(&cfg_path)
            .ok()
            .and_then(|s| serde_json::from_str::<ExperimentConfig>(&s).ok());
        let label = match &cfg {
            Some(c) => series_label(c),
            None => path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        };
        seeds.push(cfg.map(|c| c.seed));
        out.push(Series { label, records });
    }
    let labels: Vec<String> = out.iter().map(|s| s.label.clone()).collect();
    for (i, s) in out.iter_mut().enumerate() {
        if labels.iter().filter(|l| **l == s.label).count() > 1 {
            match seeds[i] {
                Some(seed) => s.label = format!("{} seed {seed}", s.label),
                None => s.label = format!("{} #{}", s.label, i + 1),
            }
        }
    }
    Ok(out)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 760.0;
const PANEL_H: f64 = 300.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 30.0;
const GAP: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn tick_label(v: f64) -> String {
    if v >= 1000.0 && v % 1000.0 == 0.0 {
        format!("{}k", v / 1000.0)
    } else if v.fract() == 0.0 {
        format!("{v}")
    } else {
        format!("{v:.2}")
    }
}

struct Panel<'a> {
    top: f64,
    title: &'a str,
    y_max: f64,
    y_ticks: Vec<f64>,
}

/// Accuracy-vs-step line chart, one series per run. With `ponder` set and
/// ponder data present, a second panel shows mean ponder cost.
pub fn plot_curves(series: &[Series], ponder: bool) -> Result<String> {
    if series.is_empty() || series.iter().all(|s| s.records.is_empty()) {
        return Err(Error::Usage("nothing to plot".into()));
    }
    let x_max = series
        .iter()
        .flat_map(|s| s.records.iter().map(|r| r.step))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let ponder_max = series
        .iter()
        .flat_map(|s| s.records.iter().filter_map(|r| r.mean_ponder))
        .filter(|v| v.is_finite())
        .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
    let mut panels = vec![Panel {
        top: TOP,
        title: "eval accuracy",
        y_max: 1.0,
        y_ticks: vec![0.0, 0.25, 0.5, 0.75, 1.0],
    }];
    if let (true, Some(pm)) = (ponder, ponder_max) {
        let y_max = pm.ceil().max(1.0);
        let step = (y_max / 4.0).max(0.25);
        panels.push(Panel {
            top: TOP + PANEL_H + GAP,
            title: "mean ponder",
            y_max,
            y_ticks: (0..=4).map(|i| i as f64 * step).filter(|v| *v <= y_max + 1e-9).collect(),
        });
    }
    let height = TOP + panels.len() as f64 * (PANEL_H + GAP);
    let plot_w = WIDTH - LEFT - RIGHT;
    let x_of = |step: f64| LEFT + step / x_max * plot_w;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (pi, panel) in panels.iter().enumerate() {
        let y_of = |v: f64| panel.top + PANEL_H - v / panel.y_max * PANEL_H;
        let bottom = panel.top + PANEL_H;
        let _ = writeln!(
            svg,
            r#"<text x="{LEFT}" y="{:.1}" font-size="13">{}</text>"#,
            panel.top - 10.0,
            panel.title
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{LEFT}" y="{:.1}" width="{plot_w:.1}" height="{PANEL_H:.1}" fill="none" stroke="#444"/>"##,
            panel.top
        );
        for &t in &panel.y_ticks {
            let y = y_of(t);
            let _ = writeln!(
                svg,
                r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
                LEFT + plot_w,
                LEFT - 6.0,
                y + 4.0,
                tick_label(t)
            );
        }
        for i in 0..=4 {
            let step = (x_max * i as f64 / 4.0).round();
            let _ = writeln!(
                svg,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x_of(step),
                bottom + 16.0,
                tick_label(step)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">training step</text>"#,
            LEFT + plot_w / 2.0,
            bottom + 34.0
        );
        for (si, s) in series.iter().enumerate() {
            let pts: Vec<String> = s
                .records
                .iter()
                .filter_map(|r| {
                    let v = if pi == 0 { Some(r.eval_accuracy) } else { r.mean_ponder };
                    v.filter(|v| v.is_finite())
                        .map(|v| format!("{:.2},{:.2}", x_of(r.step as f64), y_of(v.clamp(0.0, panel.y_max))))
                })
                .collect();
            if pts.is_empty() {
                continue;
            }
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
                PALETTE[si % PALETTE.len()],
                pts.join(" ")
            );
        }
    }
    for (si, s) in series.iter().enumerate() {
        let y = TOP + 10.0 + si as f64 * 18.0;
        let x = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x + 20.0,
            PALETTE[si % PALETTE.len()],
            x + 26.0,
            y + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes `config.json`, `metrics.jsonl` and `report.json` into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainReport> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_json(&dir.join("config.json"), cfg)?;
    let metrics_path = dir.join("metrics.jsonl");
    let file = File::create(&metrics_path).map_err(|e| io_err(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let (report, _) = train_run_with(cfg, |r| {
        emit_metrics(&mut metrics, r)?;
        metrics.flush().map_err(|e| io_err(&metrics_path, e))
    })?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Collects `report.json` files from the given files or directories.
pub fn collect_reports(paths: &[PathBuf]) -> Result<Vec<TrainReport>> {
    let mut files = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Error::Input(format!("{} does not exist", p.display())));
        }
        if p.is_file() {
            files.push(p.clone());
            continue;
        }
        for entry in walkdir::WalkDir::new(p).sort_by_file_name() {
            let entry = entry.map_err(|e| Error::Input(e.to_string()))?;
            if entry.file_type().is_file() && entry.file_name() == "report.json" {
                files.push(entry.into_path());
            }
        }
    }
    files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).map_err(|e| io_err(f, e))?;
            Ok(serde_json::from_str(&text)?)
        })
        .collect()
}

#[derive(Parser, Debug)]
#[command(name = "ponderbench", version, about = "Repeat-RNN and ACT benchmarks on parity and addition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one configuration.
    Run(RunArgs),
    /// Train the cross product of comma-separated ρ/τ/seed lists.
    Sweep(SweepArgs),
    /// Summarize report.json files as CSV.
    Report(ReportArgs),
    /// Plot accuracy curves from metrics.jsonl files as SVG.
    Plot(PlotArgs),
    /// Gradient checks and oracle cross-checks.
    Selftest,
    /// Dump generated samples as JSON lines.
    Samples(SampleArgs),
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON file with config values; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    cell: Option<CellKind>,
    #[arg(long)]
    wrapper: Option<WrapperKind>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    eval_interval: Option<u64>,
    #[arg(long)]
    eval_batches: Option<usize>,
    /// Disable gradient-norm clipping.
    #[arg(long)]
    no_clip: bool,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Count −1 entries as ones in parity.
    #[arg(long)]
    parity_count_all: bool,
    /// Keep training after reaching the solved threshold.
    #[arg(long)]
    keep_going: bool,
    /// Output root (default: $PONDERBENCH_OUT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            task: self.task,
            cell: self.cell,
            wrapper: self.wrapper,
            epsilon: self.epsilon,
            max_steps: self.max_steps,
            hidden: self.hidden,
            lr: self.lr,
            batch: self.batch,
            budget: self.budget,
            eval_interval: self.eval_interval,
            eval_batches: self.eval_batches,
            clip: self.no_clip.then_some(false),
            clip_norm: self.clip_norm,
            profile: self.profile,
            optimizer: self.optimizer,
            parity_count_all: self.parity_count_all.then_some(true),
            stop_on_solve: self.keep_going.then_some(false),
            ..Default::default()
        }
    }

    fn base(&self) -> Result<ConfigOverrides> {
        let file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => ConfigOverrides::default(),
        };
        Ok(file.merge(self.overrides()))
    }

    fn out_root(&self) -> PathBuf {
        self.out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    rho: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Comma-separated ρ values.
    #[arg(long, value_delimiter = ',')]
    rho: Vec<usize>,
    /// Comma-separated τ values.
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// report.json files or directories to search.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// metrics.jsonl files.
    paths: Vec<PathBuf>,
    #[arg(long, default_value = "curves.svg")]
    output: PathBuf,
    /// Add a mean-ponder panel for ACT runs.
    #[arg(long)]
    ponder: bool,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long, default_value = "parity")]
    task: TaskKind,
    #[arg(long)]
    profile: Option<Profile>,
    #[arg(long)]
    parity_count_all: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Output file (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
    }
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Report(args) => {
            let csv = export_summary(&collect_reports(&args.paths)?)?;
            write_or_print(args.output.as_deref(), &csv)?;
            Ok(EXIT_OK)
        }
        Command::Plot(args) => {
            if args.paths.is_empty() {
                return Err(Error::Usage("plot needs at least one metrics file".into()));
            }
            let svg = plot_curves(&load_series(&args.paths)?, args.ponder)?;
            fs::write(&args.output, svg).map_err(|e| io_err(&args.output, e))?;
            println!("wrote {}", args.output.display());
            Ok(EXIT_OK)
        }
        Command::Selftest => selftest(),
        Command::Samples(args) => {
            let cfg = ConfigOverrides {
                task: Some(args.task),
                profile: args.profile,
                parity_count_all: args.parity_count_all.then_some(true),
                ..Default::default()
            }
            .resolve()?;
            let mut buf = Vec::new();
            dump_samples(&cfg.build_task(), args.seed, args.count, &mut buf)?;
            write_or_print(args.output.as_deref(), &String::from_utf8_lossy(&buf))?;
            Ok(EXIT_OK)
        }
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_err(p, e)),
        None => io::stdout().write_all(text.as_bytes()).map_err(|e| io_err("<stdout>", e)),
    }
}

fn report_line(r: &TrainReport) -> String {
    let steps = r.steps_to_solve.map_or("-".to_string(), |s| s.to_string());
    format!(
        "{}: solved={} steps={} final_acc={:.4} reps={:.3} diverged={}",
        r.config.run_name(),
        r.solved,
        steps,
        r.final_accuracy,
        r.mean_repetitions,
        r.diverged
    )
}

fn exit_code(reports: &[TrainReport]) -> i32 {
    if reports.iter().any(|r| r.diverged && !r.solved) {
        EXIT_DIVERGED
    } else {
        EXIT_OK
    }
}

fn cmd_run(args: RunArgs) -> Result<i32> {
    let over = args.common.base()?.merge(ConfigOverrides {
        rho: args.rho,
        tau: args.tau,
        seed: args.seed,
        ..Default::default()
    });
    let cfg = over.resolve()?;
    let dir = args.common.out_root().join(cfg.run_name());
    let report = run_experiment(&cfg, &dir)?;
    println!("{}", report_line(&report));
    println!("outputs in {}", dir.display());
    Ok(exit_code(&[report]))
}

fn cmd_sweep(args: SweepArgs) -> Result<i32> {
    let base = args.common.base()?;
    let opt = |v: &[usize]| if v.is_empty() { vec![None] } else { v.iter().copied().map(Some).collect() };
    let rhos = opt(&args.rho);
    let taus: Vec<Option<f64>> = if args.tau.is_empty() { vec![None] } else { args.tau.iter().copied().map(Some).collect() };
    let seeds: Vec<Option<u64>> = if args.seed.is_empty() { vec![None] } else { args.seed.iter().copied().map(Some).collect() };
    let mut configs = Vec::new();
    for &rho in &rhos {
        for &tau in &taus {
            for &seed in &seeds {
                let o = base.clone().merge(ConfigOverrides {
                    rho,
                    tau,
                    seed,
                    ..Default::default()
                });
                configs.push(o.resolve()?);
            }
        }
    }
    let root = args.common.out_root();
    let jobs = args
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, configs.len().max(1));
    let reports = run_parallel(&configs, &root, jobs)?;
    for r in &reports {
        println!("{}", report_line(r));
    }
    let summary = root.join("summary.csv");
    fs::write(&summary, export_summary(&reports)?).map_err(|e| io_err(&summary, e))?;
    println!("summary in {}", summary.display());
    Ok(exit_code(&reports))
}

/// Runs each config in its own directory under `root` using `jobs` worker
/// threads. Reports come back in config order.
pub fn run_parallel(configs: &[ExperimentConfig], root: &Path, jobs: usize) -> Result<Vec<TrainReport>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<TrainReport>>>> = Mutex::new((0..configs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cfg) = configs.get(i) else { break };
                let r = run_experiment(cfg, &root.join(cfg.run_name()));
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every config ran"))
        .collect()
}

const SELFTEST_TOL: f64 = 1e-4;

/// Schoolbook decimal addition on digit strings, independent of the
/// integer arithmetic in the task oracle.
fn add_decimal(a: &str, b: &str) -> String {
    let (a, b) = (a.as_bytes(), b.as_bytes());
    let mut out = Vec::new();
    let mut carry = 0;
    for i in 0..a.len().max(b.len()) {
        let da = a.len().checked_sub(i + 1).map_or(0, |j| a[j] - b'0');
        let db = b.len().checked_sub(i + 1).map_or(0, |j| b[j] - b'0');
        let s = da + db + carry;
        out.push(b'0' + s % 10);
        carry = s / 10;
    }
    if carry > 0 {
        out.push(b'0' + carry);
    }
    out.reverse();
    String::from_utf8(out).expect("ascii digits")
}

fn selftest() -> Result<i32> {
    use rand::SeedableRng;
    let mut failures = 0;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);

    for kind in [CellKind::Rnn, CellKind::Lstm] {
        let mut params = ParamStore::new();
        Cell::init(kind, &mut params, "c", 3, 4, &mut rng)?;
        let x = Tensor::uniform(&[2, 3], 1.0, &mut rng);
        let report = grad_check(
            |g: &mut Graph, p: &ParamStore| {
                let cell = Cell::bind(kind, g, p, "c")?;
                let s0 = cell.zero_state(g, 2);
                let xv = g.constant(x.clone());
                let s1 = cell.step(g, &s0, xv)?;
                let s2 = cell.step(g, &s1, xv)?;
                Ok(g.sum(s2.h))
            },
            &params,
            DEFAULT_STEP,
        )?;
        let ok = report.max_rel_error < SELFTEST_TOL;
        failures += usize::from(!ok);
        println!("gradcheck {kind}: max rel error {:.2e} {}", report.max_rel_error, verdict(ok));
    }

    let task = AdditionTask::full();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let sample = task.generate(&mut rng);
        let Targets::Addition(targets) = &sample.targets else { unreachable!() };
        let values: Vec<u64> = sample
            .inputs
            .iter()
            .map(|x| task.decode_number(x.values()))
            .collect::<Result<_>>()?;
        let oracle = addition_oracle(&values, task.heads)?;
        let mut sum = "0".to_string();
        let mut expected = Vec::new();
        for v in &values {
            sum = add_decimal(&sum, &v.to_string());
            let digits: Vec<usize> = sum.bytes().rev().map(|b| usize::from(b - b'0')).collect();
            expected.push((0..task.heads).map(|i| digits.get(i).copied().unwrap_or(10)).collect::<Vec<_>>());
        }
        if oracle != expected || &oracle != targets {
            mismatches += 1;
        }
    }
    let ok = mismatches == 0;
    failures += usize::from(!ok);
    println!("addition oracle vs decimal adder: {mismatches} mismatches in 1000 {}", verdict(ok));

    let parity = Task::Parity(Default::default());
    let mut wrong = 0;
    for _ in 0..1000 {
        let s = parity.generate(&mut rng);
        let ones = s.inputs[0].values().iter().filter(|v| **v == 1.0).count();
        if s.targets != Targets::Parity((ones % 2) as u8) {
            wrong += 1;
        }
    }
    let ok = wrong == 0;
    failures += usize::from(!ok);
    println!("parity targets vs count of +1 entries: {wrong} mismatches in 1000 {}", verdict(ok));

    Ok(if failures == 0 { EXIT_OK } else { EXIT_CONFIG })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: u64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            step,
            train_loss: Some(0.5),
            eval_accuracy: acc,
            mean_repetitions: 1.0,
            mean_ponder: None,
            diverged: false,
        }
    }

    #[test]
    fn decimal_adder() {
        assert_eq!(add_decimal("0", "0"), "0");
        assert_eq!(add_decimal("999", "1"), "1000");
        assert_eq!(add_decimal("12345", "98765"), "111110");
    }

    #[test]
    fn metrics_lines() {
        let mut buf = Vec::new();
        emit_metrics(&mut buf, &record(1000, 0.5)).unwrap();
        emit_metrics(&mut buf, &record(2000, 0.75)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut expected = vec!["step", "train_loss", "eval_accuracy", "mean_repetitions", "mean_ponder", "diverged"];
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
        assert_eq!(v["step"], 1000);
    }

    #[test]
    fn non_finite_loss_is_null() {
        let mut r = record(1, 0.5);
        r.train_loss = None;
        r.diverged = true;
        let mut buf = Vec::new();
        emit_metrics(&mut buf, &r).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("\"train_loss\":null"));
    }

    #[test]
    fn plot_is_deterministic_and_labels_series() {
        let series: Vec<Series> = [1, 2, 3, 5]
            .iter()
            .map(|rho| Series {
                label: format!("ρ={rho}"),
                records: (1..=5).map(|i| record(i * 1000, 0.5 + 0.1 * i as f64 / *rho as f64)).collect(),
            })
            .collect();
        let a = plot_curves(&series, false).unwrap();
        assert_eq!(a, plot_curves(&series, false).unwrap());
        assert_eq!(a.matches("<polyline").count(), 4);
        for rho in [1, 2, 3, 5] {
            assert!(a.contains(&format!("ρ={rho}")));
        }
        assert!(plot_curves(&[], false).is_err());
    }

    #[test]
    fn ponder_panel_only_with_data() {
        let mut s = Series {
            label: "τ=0.01".into(),
            records: vec![record(1000, 0.6)],
        };
        assert!(!plot_curves(std::slice::from_ref(&s), true).unwrap().contains("mean ponder"));
        s.records[0].mean_ponder = Some(1.8);
        let svg = plot_curves(&[s], true).unwrap();
        assert!(svg.contains("mean ponder"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        assert_eq!(run_cli(["ponderbench", "run", "--bogus"]), EXIT_CONFIG);
        assert_eq!(run_cli(["ponderbench", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(run_cli(["ponderbench", "run", "--wrapper", "repeat"]), EXIT_CONFIG);
        assert_eq!(run_cli(["ponderbench", "--help"]), EXIT_OK);
    }
}
