//! File-level train-agent and backtest steps driven by a [`RunConfig`].

use std::path::Path;

use crate::backtest::{run_backtest, train_agent, BacktestError, BacktestOptions, BacktestReport, RunConfig};
use crate::classifier::ClassifierModel;
use crate::market_data::{parse_csv, CandleSeries};
use crate::ppo::{AgentCheckpoint, PpoConfig, TrainingLog};
use crate::trading_env::EnvConfig;

fn required<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T, BacktestError> {
    value.as_ref().ok_or_else(|| BacktestError::Config(format!("missing `{key}`")))
}

/// The `data` file restricted to `range`.
pub fn load_series(cfg: &RunConfig, range: (Option<i64>, Option<i64>)) -> Result<CandleSeries, BacktestError> {
    let series = parse_csv(required(&cfg.data, "data")?, &cfg.schema)?;
    Ok(if range == (None, None) {
        series
    } else {
        series.slice_time(range.0, range.1)?
    })
}

/// The `classifier` checkpoint, checked against the configured window.
pub fn load_classifier(cfg: &RunConfig) -> Result<ClassifierModel, BacktestError> {
    let model = ClassifierModel::load(required(&cfg.classifier, "classifier")?)?;
    if model.window() != cfg.window {
        return Err(BacktestError::Config(format!(
            "window mismatch: config W={} classifier W={}",
            cfg.window,
            model.window()
        )));
    }
    Ok(model)
}

/// Trains on the `train_from..train_to` slice and writes the agent checkpoint
/// (plus sidecar) and, if asked, the training log.
pub fn train_agent_files(
    cfg: &RunConfig,
    ppo: &PpoConfig,
    agent_out: &Path,
    log_out: Option<&Path>,
) -> Result<TrainingLog, BacktestError> {
    cfg.check_inputs()?;
    let classifier = load_classifier(cfg)?;
    let series = load_series(cfg, cfg.train_range)?;
    let env = EnvConfig {
        initial_equity: None,
        fee_per_unit: cfg.fee,
        observation: cfg.observation,
    };
    let (agent, log) = train_agent(series, &classifier, env, ppo.clone(), cfg.episodes, &cfg.asset)?;
    agent.save(agent_out)?;
    if let Some(path) = log_out {
        log.write_csv(std::fs::File::create(path)?)?;
    }
    Ok(log)
}

/// Evaluates the `agent` checkpoint on the `eval_from..eval_to` slice and
/// writes the report files into `out_dir`. A `target_asset` tags the run as
/// a transfer evaluation.
pub fn backtest_files(
    cfg: &RunConfig,
    out_dir: &Path,
    target_asset: Option<&str>,
) -> Result<BacktestReport, BacktestError> {
    cfg.check_inputs()?;
    let classifier = load_classifier(cfg)?;
    let agent = AgentCheckpoint::load(required(&cfg.agent, "agent")?)?;
    let series = load_series(cfg, cfg.eval_range)?;
    let options = BacktestOptions {
        fee_per_unit: cfg.fee,
        overlap: cfg.overlap,
        sample_seed: cfg.sample.then_some(cfg.seed),
        target_asset: target_asset.unwrap_or_default().to_string(),
    };
    let report = run_backtest(&agent, &classifier, series, &options)?;
    report.write(out_dir)?;
    Ok(report)
}
