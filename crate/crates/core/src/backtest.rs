//! Greedy evaluation of a trained agent, performance metrics and report files.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::classifier::{ClassifierError, ClassifierModel};
use crate::config::{ConfigError, KeyValueConfig};
use crate::market_data::{CandleSeries, CsvSchema, MarketDataError};
use crate::ppo::{self, ActorCritic, AgentCheckpoint, PpoAgent, PpoConfig, PpoError, TrainingLog};
use crate::trading_env::{
    write_trace, Action, EnvConfig, EnvError, ObservationMode, PatternFeed, TraceRow, TradingEnv, AUGMENTED_OBSERVATION,
};

const SECONDS_PER_WEEK: f64 = 7.0 * 24.0 * 3600.0;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("config: {0}")]
    Config(String),
    #[error("evaluation range [{eval_from}, {eval_to}] overlaps training range [{train_from}, {train_to}]")]
    Overlap {
        train_from: i64,
        train_to: i64,
        eval_from: i64,
        eval_to: i64,
    },
    #[error("equity curve needs at least 2 points, got {0}")]
    ShortCurve(usize),
    #[error(transparent)]
    KeyValue(#[from] ConfigError),
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Percent of initial equity.
    pub total_return_pct: f64,
    /// Largest peak-to-trough decline, percent of the peak.
    pub max_drawdown_pct: f64,
    /// Number of fills.
    pub trade_count: usize,
    pub trades_per_week: f64,
    /// Share of position-reducing fills with positive realized PnL; `None`
    /// when nothing was closed.
    pub win_rate: Option<f64>,
}

/// Whether a fill moved the position toward zero.
pub fn is_closing(row: &TraceRow) -> bool {
    let delta = match row.action {
        Action::Buy => 1,
        Action::Sell => -1,
        Action::Hold => 0,
    };
    row.fill_price.is_some() && (row.position - delta).abs() > row.position.abs()
}

pub fn compute_metrics(equity: &[f64], trades: &[TraceRow], bar_interval: i64) -> Result<Metrics, BacktestError> {
    if equity.len() < 2 {
        return Err(BacktestError::ShortCurve(equity.len()));
    }
    let initial = equity[0];
    let total_return_pct = 100.0 * (equity[equity.len() - 1] - initial) / initial;
    let mut peak = f64::NEG_INFINITY;
    let mut max_dd: f64 = 0.0;
    for &e in equity {
        peak = peak.max(e);
        if peak > 0.0 {
            max_dd = max_dd.max((peak - e) / peak);
        }
    }
    let fills: Vec<&TraceRow> = trades.iter().filter(|r| r.fill_price.is_some()).collect();
    let weeks = (equity.len() - 1) as f64 * bar_interval as f64 / SECONDS_PER_WEEK;
    let closes: Vec<&&TraceRow> = fills.iter().filter(|r| is_closing(r)).collect();
    let win_rate =
        (!closes.is_empty()).then(|| closes.iter().filter(|r| r.realized > 0.0).count() as f64 / closes.len() as f64);
    Ok(Metrics {
        total_return_pct,
        max_drawdown_pct: 100.0 * max_dd,
        trade_count: fills.len(),
        trades_per_week: if weeks > 0.0 { fills.len() as f64 / weeks } else { 0.0 },
        win_rate,
    })
}

/// Source and target of an evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source_asset: String,
    pub target_asset: String,
    pub train_range: (i64, i64),
    pub eval_range: (i64, i64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub provenance: Provenance,
    pub window: usize,
    pub bar_interval: i64,
    /// Initial equity followed by the equity after every step.
    pub equity: Vec<f64>,
    /// Full step trace; fills are the rows with a fill price.
    pub trace: Vec<TraceRow>,
    pub metrics: Metrics,
}

impl BacktestReport {
    pub fn steps(&self) -> usize {
        self.trace.len()
    }

    pub fn trades(&self) -> impl Iterator<Item = &TraceRow> {
        self.trace.iter().filter(|r| r.fill_price.is_some())
    }

    /// `report.csv`, `equity.csv`, `trades.csv` and `equity.svg` in `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, BacktestError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let paths: Vec<PathBuf> = ["report.csv", "equity.csv", "trades.csv", "equity.svg"]
            .iter()
            .map(|f| dir.join(f))
            .collect();
        self.write_metrics(std::fs::File::create(&paths[0])?)?;
        write_trace(&self.trace, self.equity[0], std::fs::File::create(&paths[1])?)?;
        self.write_trades(std::fs::File::create(&paths[2])?)?;
        std::fs::write(&paths[3], equity_svg(&self.equity))?;
        Ok(paths)
    }

    pub fn write_metrics<W: Write>(&self, writer: W) -> Result<(), BacktestError> {
        let m = &self.metrics;
        let p = &self.provenance;
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["metric", "value"])?;
        let rows = [
            ("source_asset", p.source_asset.clone()),
            ("target_asset", p.target_asset.clone()),
            ("train_from", p.train_range.0.to_string()),
            ("train_to", p.train_range.1.to_string()),
            ("eval_from", p.eval_range.0.to_string()),
            ("eval_to", p.eval_range.1.to_string()),
            ("window", self.window.to_string()),
            ("bar_interval", self.bar_interval.to_string()),
            ("steps", self.steps().to_string()),
            ("initial_equity", self.equity[0].to_string()),
            ("final_equity", self.equity[self.equity.len() - 1].to_string()),
            ("total_return_pct", m.total_return_pct.to_string()),
            ("max_drawdown_pct", m.max_drawdown_pct.to_string()),
            ("trade_count", m.trade_count.to_string()),
            ("trades_per_week", m.trades_per_week.to_string()),
            ("win_rate", m.win_rate.map(|w| w.to_string()).unwrap_or_default()),
        ];
        for (k, v) in rows {
            wtr.write_record([k, v.as_str()])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// `step,timestamp,action,fill_price,position,realized` for every fill.
    pub fn write_trades<W: Write>(&self, writer: W) -> Result<(), BacktestError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["step", "timestamp", "action", "fill_price", "position", "realized"])?;
        for r in self.trades() {
            wtr.write_record([
                r.step.to_string(),
                r.timestamp.to_string(),
                r.action.to_string(),
                r.fill_price.map(|p| p.to_string()).unwrap_or_default(),
                r.position.to_string(),
                r.realized.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Minimal line plot of the equity curve.
pub fn equity_svg(equity: &[f64]) -> String {
    let (w, h, pad) = (800.0, 300.0, 20.0);
    let lo = equity.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = equity.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let n = (equity.len().max(2) - 1) as f64;
    let mut points = String::new();
    for (i, e) in equity.iter().enumerate() {
        let x = pad + (w - 2.0 * pad) * i as f64 / n;
        let y = h - pad - (h - 2.0 * pad) * (e - lo) / span;
        let _ = write!(points, "{x:.2},{y:.2} ");
    }
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"14\" font-size=\"12\" font-family=\"monospace\">equity {lo:.2} .. {hi:.2}</text>\n\
         <polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>\n</svg>\n",
        points.trim_end()
    )
}

/// What to do when evaluation and training ranges overlap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverlapPolicy {
    #[default]
    Error,
    Warn,
    Allow,
}

impl FromStr for OverlapPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "error" => Ok(Self::Error),
            "warn" => Ok(Self::Warn),
            "allow" => Ok(Self::Allow),
            other => Err(format!("unknown overlap policy `{other}` (error|warn|allow)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestOptions {
    pub fee_per_unit: f64,
    pub overlap: OverlapPolicy,
    /// Sample actions with this seed instead of taking the argmax.
    pub sample_seed: Option<u64>,
    pub target_asset: String,
}

impl Default for BacktestOptions {
    fn default() -> Self {
        Self {
            fee_per_unit: 0.0,
            overlap: OverlapPolicy::Error,
            sample_seed: None,
            target_asset: String::new(),
        }
    }
}

pub fn observation_mode(agent: &AgentCheckpoint) -> Result<ObservationMode, BacktestError> {
    match agent.observation_size {
        AUGMENTED_OBSERVATION => Ok(ObservationMode::Augmented),
        n if n == ObservationMode::PatternOnly.size() => Ok(ObservationMode::PatternOnly),
        n => Err(BacktestError::Config(format!("agent observation size {n} matches no environment mode"))),
    }
}

fn check_window(agent: &AgentCheckpoint, classifier: &ClassifierModel) -> Result<(), BacktestError> {
    if agent.window != classifier.window() {
        return Err(BacktestError::Config(format!(
            "window mismatch: agent W={} classifier W={}",
            agent.window,
            classifier.window()
        )));
    }
    Ok(())
}

/// Rolls the agent over `series` (greedy unless a sample seed is given) and
/// builds the report. The date-range check runs only when the target asset
/// matches the source asset.
pub fn run_backtest(
    agent: &AgentCheckpoint,
    classifier: &ClassifierModel,
    series: CandleSeries,
    options: &BacktestOptions,
) -> Result<BacktestReport, BacktestError> {
    check_window(agent, classifier)?;
    let target_asset = if options.target_asset.is_empty() {
        agent.asset.clone()
    } else {
        options.target_asset.clone()
    };
    let eval_range = (series.first_timestamp(), series.last_timestamp());
    let (train_from, train_to) = agent.train_range;
    if target_asset == agent.asset && eval_range.0 <= train_to && train_from <= eval_range.1 {
        let err = BacktestError::Overlap {
            train_from,
            train_to,
            eval_from: eval_range.0,
            eval_to: eval_range.1,
        };
        match options.overlap {
            OverlapPolicy::Error => return Err(err),
            OverlapPolicy::Warn => log::warn!("{err}"),
            OverlapPolicy::Allow => {}
        }
    }
    let bar_interval = series.bar_interval();
    let env_config = EnvConfig {
        initial_equity: None,
        fee_per_unit: options.fee_per_unit,
        observation: observation_mode(agent)?,
    };
    let mut env = TradingEnv::new(series, classifier, env_config)?;
    let policy = PpoAgent::from_model(agent.model.clone(), agent.config.clone());
    let mut sampler = options.sample_seed.map(|seed| {
        let cfg = PpoConfig {
            seed,
            ..agent.config.clone()
        };
        PpoAgent::from_model(agent.model.clone(), cfg)
    });
    let mut state = env.reset();
    while !env.is_done() {
        let action = match sampler.as_mut() {
            Some(s) => s.act(&state.observation)?.0,
            None => policy.act_greedy(&state.observation)?,
        };
        state = env.step(action)?.next_state;
    }
    let trace = env.trace().to_vec();
    let mut equity = vec![env.account().initial_equity()];
    equity.extend(trace.iter().map(|r| r.equity));
    let metrics = compute_metrics(&equity, &trace, bar_interval)?;
    Ok(BacktestReport {
        provenance: Provenance {
            source_asset: agent.asset.clone(),
            target_asset,
            train_range: agent.train_range,
            eval_range,
        },
        window: agent.window,
        bar_interval,
        equity,
        trace,
        metrics,
    })
}

/// The unchanged pipeline applied to another asset.
pub fn transfer_eval(
    agent: &AgentCheckpoint,
    classifier: &ClassifierModel,
    target: CandleSeries,
    target_asset: &str,
    options: &BacktestOptions,
) -> Result<BacktestReport, BacktestError> {
    let options = BacktestOptions {
        target_asset: target_asset.to_string(),
        ..options.clone()
    };
    run_backtest(agent, classifier, target, &options)
}

/// Trains a fresh agent on `series`.
pub fn train_agent(
    series: CandleSeries,
    classifier: &ClassifierModel,
    env_config: EnvConfig,
    ppo_config: PpoConfig,
    episodes: usize,
    asset: &str,
) -> Result<(AgentCheckpoint, TrainingLog), BacktestError> {
    let train_range = (series.first_timestamp(), series.last_timestamp());
    let feed = Arc::new(PatternFeed::new(Arc::new(series), classifier)?);
    let mut env = TradingEnv::from_feed(feed, env_config);
    let mut agent = PpoAgent::new(env.observation_size(), ppo_config.clone())?;
    let log = ppo::train(&mut agent, &mut env, episodes, None)?;
    Ok((
        AgentCheckpoint {
            model: agent.model().clone(),
            config: ppo_config,
            window: classifier.window(),
            observation_size: env.observation_size(),
            asset: asset.to_string(),
            train_range,
        },
        log,
    ))
}

/// Untrained agent that always prefers `action`; for baselines and tests.
pub fn fixed_policy(
    action: Action,
    observation_size: usize,
    window: usize,
    asset: &str,
    train_range: (i64, i64),
) -> Result<AgentCheckpoint, BacktestError> {
    let mut model = ActorCritic::new(observation_size, 4, &mut ChaCha8Rng::seed_from_u64(0)).map_err(PpoError::from)?;
    let mut params = model.params_mut();
    let n = params.len();
    for p in params.iter_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    // parameter order ends with policy weight, policy bias, value weight, value bias
    params[n - 3].data_mut()[action.index()] = 1.0;
    Ok(AgentCheckpoint {
        model,
        config: PpoConfig::default(),
        window,
        observation_size,
        asset: asset.to_string(),
        train_range,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    TrainCnn,
    TrainAgent,
    Backtest,
    TransferEval,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train-cnn" => Ok(Self::TrainCnn),
            "train-agent" => Ok(Self::TrainAgent),
            "backtest" => Ok(Self::Backtest),
            "transfer-eval" => Ok(Self::TransferEval),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

/// Run settings from a key=value file.
///
/// Keys: `data`, `window`, `classifier`, `agent`, `mode`, `seed`, `fee`,
/// `episodes`, `asset`, `train_from`, `train_to`, `eval_from`, `eval_to`,
/// `overlap`, `observation`, `sample`, plus the CSV schema keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub window: usize,
    pub classifier: Option<PathBuf>,
    pub agent: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub seed: u64,
    pub fee: f64,
    pub episodes: usize,
    pub asset: String,
    pub train_range: (Option<i64>, Option<i64>),
    pub eval_range: (Option<i64>, Option<i64>),
    pub overlap: OverlapPolicy,
    pub observation: ObservationMode,
    /// Sample actions during evaluation instead of taking the argmax.
    pub sample: bool,
    pub schema: CsvSchema,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: None,
            window: crate::gaf::DEFAULT_WINDOW,
            classifier: None,
            agent: None,
            mode: None,
            seed: 0,
            fee: 0.0,
            episodes: 100,
            asset: "asset".to_string(),
            train_range: (None, None),
            eval_range: (None, None),
            overlap: OverlapPolicy::Error,
            observation: ObservationMode::Augmented,
            sample: false,
            schema: CsvSchema::default(),
        }
    }
}

impl RunConfig {
    pub fn from_config(cfg: &KeyValueConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        Ok(Self {
            data: cfg.get("data").map(PathBuf::from),
            window: cfg.parse_or("window", d.window)?,
            classifier: cfg.get("classifier").map(PathBuf::from),
            agent: cfg.get("agent").map(PathBuf::from),
            mode: cfg.parse("mode")?,
            seed: cfg.parse_or("seed", d.seed)?,
            fee: cfg.parse_or("fee", d.fee)?,
            episodes: cfg.parse_or("episodes", d.episodes)?,
            asset: cfg.get("asset").map_or(d.asset, str::to_string),
            train_range: (cfg.parse("train_from")?, cfg.parse("train_to")?),
            eval_range: (cfg.parse("eval_from")?, cfg.parse("eval_to")?),
            overlap: cfg.parse_or("overlap", d.overlap)?,
            observation: cfg.parse_or("observation", d.observation)?,
            sample: cfg.parse_or("sample", d.sample)?,
            schema: CsvSchema::from_config(cfg)?,
        })
    }

    /// Every referenced input file exists.
    pub fn check_inputs(&self) -> Result<(), BacktestError> {
        for (key, path) in [("data", &self.data), ("classifier", &self.classifier)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(BacktestError::Config(format!("{key} file {} does not exist", p.display())));
                }
            }
        }
        if matches!(self.mode, Some(Mode::Backtest | Mode::TransferEval)) {
            if let Some(p) = &self.agent {
                if !p.exists() {
                    return Err(BacktestError::Config(format!("agent file {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: usize, action: Action, fill: Option<f64>, position: i32, realized: f64) -> TraceRow {
        TraceRow {
            step,
            timestamp: step as i64,
            action,
            fill_price: fill,
            position,
            reward: 0.0,
            equity: 0.0,
            realized,
        }
    }

    #[test]
    fn hand_computed_curve() {
        let m = compute_metrics(&[100.0, 110.0, 99.0], &[], 900).unwrap();
        assert!((m.total_return_pct + 1.0).abs() < 1e-12);
        assert!((m.max_drawdown_pct - 10.0).abs() < 1e-12);
        assert_eq!(m.trade_count, 0);
        assert_eq!(m.win_rate, None);
    }

    #[test]
    fn rising_curve_has_no_drawdown() {
        let m = compute_metrics(&[1.0, 2.0, 3.0, 3.0, 4.0], &[], 60).unwrap();
        assert_eq!(m.max_drawdown_pct, 0.0);
        assert!(compute_metrics(&[1.0], &[], 60).is_err());
    }

    #[test]
    fn closing_fills_and_win_rate() {
        let trades = vec![
            row(0, Action::Buy, Some(10.0), 1, 0.0),
            row(1, Action::Hold, None, 1, 0.0),
            row(2, Action::Sell, Some(12.0), 0, 2.0),
            row(3, Action::Sell, Some(12.0), -1, 0.0),
            row(4, Action::Buy, Some(13.0), 0, -1.0),
        ];
        assert!(!is_closing(&trades[0]));
        assert!(is_closing(&trades[2]));
        assert!(!is_closing(&trades[3]));
        assert!(is_closing(&trades[4]));
        // one week of 15-minute bars
        let bars = 7 * 24 * 4;
        let curve = vec![100.0; bars + 1];
        let m = compute_metrics(&curve, &trades, 900).unwrap();
        assert_eq!(m.trade_count, 4);
        assert!((m.trades_per_week - 4.0).abs() < 1e-12);
        assert_eq!(m.win_rate, Some(0.5));
    }

    #[test]
    fn overlap_and_mode_parsing() {
        assert_eq!("warn".parse::<OverlapPolicy>().unwrap(), OverlapPolicy::Warn);
        assert!("maybe".parse::<OverlapPolicy>().is_err());
        assert_eq!("transfer-eval".parse::<Mode>().unwrap(), Mode::TransferEval);
    }

    #[test]
    fn run_config_from_text() {
        let cfg: KeyValueConfig = "window=12\nseed=7\nfee=0.5\nasset=eth\ntrain_from=10\noverlap=allow\n"
            .parse()
            .unwrap();
        let rc = RunConfig::from_config(&cfg).unwrap();
        assert_eq!(rc.window, 12);
        assert_eq!(rc.seed, 7);
        assert_eq!(rc.fee, 0.5);
        assert_eq!(rc.asset, "eth");
        assert_eq!(rc.train_range, (Some(10), None));
        assert_eq!(rc.overlap, OverlapPolicy::Allow);
    }

    #[test]
    fn svg_is_well_formed() {
        let svg = equity_svg(&[1.0, 2.0, 1.5]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("polyline").count(), 1);
    }
}
