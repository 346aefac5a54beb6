//! Command-line front end: data generation, GAF encoding, classifier and agent
//! training, backtests and transfer evaluation.
//!
//! Every subcommand reads an optional `--config` key=value file. Typed flags
//! and `--set key=value` pairs override it, in that order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gafrl::backtest::{BacktestError, Mode, RunConfig};
use gafrl::classifier::{train_classifier, ClassifierError, TrainConfig};
use gafrl::config::{ConfigError, KeyValueConfig};
use gafrl::gaf::{encode_window, GafError, GafTensor, CHANNEL_NAMES};
use gafrl::market_data::{make_windows, write_csv_file, MarketDataError};
use gafrl::neural::NeuralError;
use gafrl::patterns::{generate_balanced, label_window, read_corpus, write_corpus, PatternClass, PatternError};
use gafrl::pipeline::{backtest_files, load_classifier, load_series, train_agent_files};
use gafrl::ppo::{PpoConfig, PpoError};
use gafrl::synthetic::{constant, random_walk, Sawtooth};
use gafrl::trading_env::EnvError;
use image::{GrayImage, Luma};

#[derive(Parser, Debug)]
#[command(name = "gafrl", version, about = "GAF candlestick patterns and a PPO trading agent")]
struct Cli {
    /// key=value configuration file
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; repeatable
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic OHLC CSV (`kind` = sawtooth, walk or constant)
    GenMarket(GenMarket),
    /// Write a balanced synthetic pattern corpus
    GenCorpus(GenCorpus),
    /// Encode one window as per-channel GAF CSVs and a PNG grid
    Encode(Encode),
    /// Train the pattern classifier
    TrainCnn(TrainCnn),
    /// Print rule label and predicted distribution for every window of a series
    Classify(Classify),
    /// Train a PPO agent on a price series
    TrainAgent(TrainAgent),
    /// Evaluate a trained agent and write the report files
    Backtest(Backtest),
    /// Evaluate a trained agent unchanged on another asset
    TransferEval(TransferEval),
    /// Print the metrics of a written report
    Report(Report),
    /// Dispatch on the configuration's `mode` key
    Run,
}

#[derive(Args, Debug)]
struct GenMarket {
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    bars: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV (config key `data`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenCorpus {
    /// Total number of windows
    #[arg(long)]
    total: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    window: Option<usize>,
    /// Output CSV (config key `corpus`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Encode {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    /// Index of the window's first bar; the last full window by default
    #[arg(long)]
    start: Option<usize>,
    /// Output directory (config key `out_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainCnn {
    /// Corpus CSV; generated from `total` and `corpus_seed` when absent
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint (config key `classifier`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Classify {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Output CSV; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainAgent {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint (config key `agent`)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training log CSV (config key `train_log`)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Backtest {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    agent: Option<PathBuf>,
    /// Report directory (config key `report_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TransferEval {
    /// Target asset CSV (config key `target_data`)
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    target_asset: Option<String>,
    #[arg(long)]
    classifier: Option<PathBuf>,
    #[arg(long)]
    agent: Option<PathBuf>,
    /// Report directory (config key `report_dir`)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Report {
    /// Report directory (config key `report_dir`)
    #[arg(long)]
    dir: Option<PathBuf>,
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn num<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(T::to_string)
}

impl Command {
    /// Flag values as configuration keys.
    fn overrides(&self) -> Vec<(&'static str, Option<String>)> {
        match self {
            Self::GenMarket(a) => vec![
                ("kind", a.kind.clone()),
                ("bars", num(&a.bars)),
                ("seed", num(&a.seed)),
                ("data", path_str(&a.out)),
            ],
            Self::GenCorpus(a) => vec![
                ("total", num(&a.total)),
                ("corpus_seed", num(&a.seed)),
                ("window", num(&a.window)),
                ("corpus", path_str(&a.out)),
            ],
            Self::Encode(a) => vec![
                ("data", path_str(&a.data)),
                ("window", num(&a.window)),
                ("start", num(&a.start)),
                ("out_dir", path_str(&a.out)),
            ],
            Self::TrainCnn(a) => vec![
                ("corpus", path_str(&a.corpus)),
                ("epochs", num(&a.epochs)),
                ("seed", num(&a.seed)),
                ("classifier", path_str(&a.out)),
            ],
            Self::Classify(a) => vec![
                ("data", path_str(&a.data)),
                ("classifier", path_str(&a.classifier)),
                ("classify_out", path_str(&a.out)),
            ],
            Self::TrainAgent(a) => vec![
                ("data", path_str(&a.data)),
                ("classifier", path_str(&a.classifier)),
                ("episodes", num(&a.episodes)),
                ("seed", num(&a.seed)),
                ("agent", path_str(&a.out)),
                ("train_log", path_str(&a.log)),
            ],
            Self::Backtest(a) => vec![
                ("data", path_str(&a.data)),
                ("classifier", path_str(&a.classifier)),
                ("agent", path_str(&a.agent)),
                ("report_dir", path_str(&a.out)),
            ],
            Self::TransferEval(a) => vec![
                ("target_data", path_str(&a.target)),
                ("target_asset", a.target_asset.clone()),
                ("classifier", path_str(&a.classifier)),
                ("agent", path_str(&a.agent)),
                ("report_dir", path_str(&a.out)),
            ],
            Self::Report(a) => vec![("report_dir", path_str(&a.dir))],
            Self::Run => vec![],
        }
    }
}

fn load_config(cli: &Cli) -> Result<KeyValueConfig> {
    let mut cfg = match &cli.config {
        Some(path) => KeyValueConfig::load(path)?,
        None => KeyValueConfig::new(),
    };
    for (key, value) in cli.command.overrides() {
        if let Some(v) = value {
            cfg.set(key, v);
        }
    }
    for pair in &cli.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!(ConfigError::Syntax { line: 0, text: pair.clone() }))?;
        cfg.set(k.trim(), v.trim());
    }
    Ok(cfg)
}

fn required_path(cfg: &KeyValueConfig, key: &str) -> Result<PathBuf> {
    cfg.get(key)
        .map(PathBuf::from)
        .ok_or_else(|| anyhow!(BacktestError::Config(format!("missing `{key}`"))))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn gen_market(cfg: &KeyValueConfig) -> Result<()> {
    let out = required_path(cfg, "data")?;
    let bars = cfg.parse_or("bars", 1000usize)?;
    let seed = cfg.parse_or("seed", 0u64)?;
    let kind = cfg.get("kind").unwrap_or("sawtooth");
    let series = match kind {
        "sawtooth" => {
            let d = Sawtooth::default();
            Sawtooth {
                period: cfg.parse_or("period", d.period)?,
                amplitude: cfg.parse_or("amplitude", d.amplitude)?,
                base: cfg.parse_or("base", d.base)?,
                phase: cfg.parse_or("phase", d.phase)?,
                wick: cfg.parse_or("wick", d.wick)?,
                noise: cfg.parse_or("noise", d.noise)?,
                ..d
            }
            .generate(bars, seed)?
        }
        "walk" => random_walk(bars, cfg.parse_or("price", 100.0)?, cfg.parse_or("vol", 0.01)?, seed)?,
        "constant" => constant(bars, cfg.parse_or("price", 100.0)?)?,
        other => bail!(ConfigError::Value {
            key: "kind".into(),
            value: other.into(),
            reason: "expected sawtooth, walk or constant".into(),
        }),
    };
    write_csv_file(&series, &out)?;
    log::info!("wrote {bars} {kind} bars to {}", out.display());
    Ok(())
}

fn gen_corpus(cfg: &KeyValueConfig) -> Result<()> {
    let out = required_path(cfg, "corpus")?;
    let total = cfg.parse_or("total", 8000usize)?;
    let samples = generate_balanced(total, cfg.parse_or("corpus_seed", 42u64)?, cfg.parse_or("window", 10usize)?);
    write_corpus(&samples, create(&out)?)?;
    log::info!("wrote {total} windows to {}", out.display());
    Ok(())
}

fn write_gaf_csv(m: &gafrl::gaf::GafMatrix, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Channels in a 2x2 grid, `scale` pixels per cell, -1 black and +1 white.
fn gaf_png(x: &GafTensor, scale: u32) -> GrayImage {
    const GAP: u32 = 2;
    let n = x.size() as u32;
    let tile = n * scale;
    let side = 2 * tile + GAP;
    let mut img = GrayImage::from_pixel(side, side, Luma([128]));
    for (c, m) in x.channels().iter().enumerate() {
        let (ox, oy) = ((c as u32 % 2) * (tile + GAP), (c as u32 / 2) * (tile + GAP));
        for py in 0..tile {
            for px in 0..tile {
                let v = m.get((py / scale) as usize, (px / scale) as usize);
                let level = ((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0) as u8;
                img.put_pixel(ox + px, oy + py, Luma([level]));
            }
        }
    }
    img
}

fn encode(cfg: &KeyValueConfig) -> Result<()> {
    let run = RunConfig::from_config(cfg)?;
    let out = required_path(cfg, "out_dir")?;
    let series = load_series(&run, (None, None))?;
    let windows = make_windows(&series, run.window)?;
    let window = match cfg.parse::<usize>("start")? {
        Some(start) => windows
            .iter()
            .find(|w| w.origin_index() == start)
            .ok_or_else(|| anyhow!(BacktestError::Config(format!("no usable window starts at bar {start}"))))?,
        None => windows.last().ok_or_else(|| anyhow!(BacktestError::Config("series has no usable window".into())))?,
    };
    let x = encode_window(window)?;
    std::fs::create_dir_all(&out)?;
    for (name, m) in CHANNEL_NAMES.iter().zip(x.channels()) {
        write_gaf_csv(m, &out.join(format!("gaf_{name}.csv")))?;
    }
    gaf_png(&x, cfg.parse_or("png_scale", 16u32)?).save(out.join("gaf.png"))?;
    println!(
        "window_start={} label={} out_dir={}",
        window.origin_index(),
        label_window(window).name(),
        out.display()
    );
    Ok(())
}

fn train_cnn(cfg: &KeyValueConfig) -> Result<()> {
    let out = required_path(cfg, "classifier")?;
    let window = cfg.parse_or("window", 10usize)?;
    let samples = match cfg.get("corpus") {
        Some(path) => read_corpus(File::open(path).with_context(|| format!("opening corpus {path}"))?)?,
        None => generate_balanced(cfg.parse_or("total", 8000usize)?, cfg.parse_or("corpus_seed", 42u64)?, window),
    };
    let encoded = samples
        .iter()
        .map(|(w, c)| Ok((encode_window(w)?, *c)))
        .collect::<Result<Vec<_>, GafError>>()?;
    let (model, _) = train_classifier(&encoded, &TrainConfig::from_config(cfg)?)?;
    model.save(&out)?;
    print!("{}", model.metadata_text());
    Ok(())
}

fn classify(cfg: &KeyValueConfig) -> Result<()> {
    let run = RunConfig::from_config(cfg)?;
    let model = load_classifier(&run)?;
    let series = load_series(&run, (None, None))?;
    let sink: Box<dyn Write> = match cfg.get("classify_out") {
        Some(path) => Box::new(create(Path::new(path))?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut wtr = csv::Writer::from_writer(sink);
    let mut header = vec!["window_start".to_string(), "timestamp".into(), "rule".into(), "predicted".into()];
    header.extend(PatternClass::ALL.iter().map(|c| format!("p_{}", c.name())));
    wtr.write_record(&header)?;
    for w in make_windows(&series, run.window)? {
        let d = model.predict_distribution(&encode_window(&w)?)?;
        let mut row = vec![
            w.origin_index().to_string(),
            w.last().timestamp.to_string(),
            label_window(&w).name().to_string(),
            d.argmax().name().to_string(),
        ];
        row.extend(d.as_slice().iter().map(f64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

fn train_agent(cfg: &KeyValueConfig) -> Result<()> {
    let run = RunConfig::from_config(cfg)?;
    let out = required_path(cfg, "agent")?;
    let log_path = cfg.get("train_log").map(PathBuf::from);
    for path in std::iter::once(&out).chain(&log_path) {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
    }
    let log = train_agent_files(&run, &PpoConfig::from_config(cfg)?, &out, log_path.as_deref())?;
    let returns = log.returns();
    println!(
        "episodes={} updates={} last_return={} agent={}",
        returns.len(),
        log.updates(),
        returns.last().copied().unwrap_or(0.0),
        out.display()
    );
    Ok(())
}

fn print_metrics(dir: &Path) -> Result<()> {
    let path = dir.join("report.csv");
    let mut rdr = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = std::io::stdout().lock();
    for record in rdr.records() {
        let record = record?;
        writeln!(out, "{}={}", &record[0], &record[1])?;
    }
    Ok(())
}

fn backtest(cfg: &KeyValueConfig) -> Result<()> {
    let run = RunConfig::from_config(cfg)?;
    let out = required_path(cfg, "report_dir")?;
    backtest_files(&run, &out, None)?;
    print_metrics(&out)
}

fn transfer_eval(cfg: &KeyValueConfig) -> Result<()> {
    let mut run = RunConfig::from_config(cfg)?;
    run.data = Some(required_path(cfg, "target_data")?);
    let out = required_path(cfg, "report_dir")?;
    let target = cfg.get("target_asset").unwrap_or("target");
    backtest_files(&run, &out, Some(target))?;
    print_metrics(&out)
}

fn report(cfg: &KeyValueConfig) -> Result<()> {
    print_metrics(&required_path(cfg, "report_dir")?)
}

fn run_mode(cfg: &KeyValueConfig) -> Result<()> {
    match RunConfig::from_config(cfg)?.mode {
        Some(Mode::TrainCnn) => train_cnn(cfg),
        Some(Mode::TrainAgent) => train_agent(cfg),
        Some(Mode::Backtest) => backtest(cfg),
        Some(Mode::TransferEval) => transfer_eval(cfg),
        None => Err(anyhow!(BacktestError::Config("missing `mode`".into()))),
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenMarket(_) => gen_market(&cfg),
        Command::GenCorpus(_) => gen_corpus(&cfg),
        Command::Encode(_) => encode(&cfg),
        Command::TrainCnn(_) => train_cnn(&cfg),
        Command::Classify(_) => classify(&cfg),
        Command::TrainAgent(_) => train_agent(&cfg),
        Command::Backtest(_) => backtest(&cfg),
        Command::TransferEval(_) => transfer_eval(&cfg),
        Command::Report(_) => report(&cfg),
        Command::Run => run_mode(&cfg),
    }
}

/// Stable category of the innermost library error in the chain.
fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<BacktestError>() {
            return match e {
                BacktestError::Config(_) | BacktestError::KeyValue(_) => "config",
                BacktestError::Overlap { .. } => "overlap",
                BacktestError::ShortCurve(_) => "report",
                BacktestError::MarketData(_) => "market_data",
                BacktestError::Classifier(_) => "classifier",
                BacktestError::Env(_) => "env",
                BacktestError::Ppo(_) => "ppo",
                BacktestError::Csv(_) => "csv",
                BacktestError::Io(_) => "io",
            };
        }
        let kind = if cause.is::<ConfigError>() {
            "config"
        } else if cause.is::<MarketDataError>() {
            "market_data"
        } else if cause.is::<PatternError>() {
            "corpus"
        } else if cause.is::<GafError>() {
            "gaf"
        } else if cause.is::<ClassifierError>() {
            "classifier"
        } else if cause.is::<NeuralError>() {
            "neural"
        } else if cause.is::<EnvError>() {
            "env"
        } else if cause.is::<PpoError>() {
            "ppo"
        } else if cause.is::<image::ImageError>() {
            "image"
        } else if cause.is::<csv::Error>() {
            "csv"
        } else if cause.is::<std::io::Error>() {
            "io"
        } else {
            continue;
        };
        return kind;
    }
    "error"
}

/// The reader of stdout went away; not worth reporting.
fn is_broken_pipe(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        let io = cause.downcast_ref::<std::io::Error>().or_else(|| match cause.downcast_ref::<csv::Error>()?.kind() {
            csv::ErrorKind::Io(e) => Some(e),
            _ => None,
        });
        io.is_some_and(|e| e.kind() == std::io::ErrorKind::BrokenPipe)
    })
}

fn error_line(kind: &str, message: &str) -> String {
    let message = message.split_whitespace().collect::<Vec<_>>().join(" ");
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_line("usage", &e.kind().to_string()));
            return ExitCode::from(2);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
