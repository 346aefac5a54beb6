//! Episodic single-asset trading environment.
//!
//! Step `i` observes window `i` (bars `[o, o + W)`), fills the chosen action
//! at the open of bar `o + W` and marks the book at the next observation's
//! reference close. The reward is the change in mark-to-market equity, so the
//! rewards of an episode sum to its total PnL.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{ClassifierError, ClassifierModel, PatternDistribution, NUM_CLASSES};
use crate::gaf::{encode_window, GafError};
use crate::market_data::{make_windows, CandleSeries, MarketDataError, Window};

/// Maximum absolute position, in units.
pub const MAX_POSITION: i32 = 3;
/// Pattern distribution plus position and unrealized-PnL features.
pub const AUGMENTED_OBSERVATION: usize = NUM_CLASSES + 2;
/// Gain on the relative unrealized PnL before squashing.
pub const PNL_FEATURE_SCALE: f64 = 10.0;

/// `tanh(PNL_FEATURE_SCALE * x)`, kept strictly inside (-1, 1) where tanh rounds to 1.
pub fn squash_pnl(x: f64) -> f64 {
    let bound = 1.0 - f64::EPSILON / 2.0;
    (PNL_FEATURE_SCALE * x).tanh().clamp(-bound, bound)
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error(transparent)]
    Gaf(#[from] GafError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error("step called after the episode finished")]
    EpisodeFinished,
    #[error("step called before reset")]
    NotReset,
    #[error("no usable windows in series")]
    NoWindows,
    #[error("invalid action code {0}")]
    InvalidAction(usize),
    #[error("{0}")]
    Other(String),
    #[error("trace export: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Buy = 0,
    Sell = 1,
    Hold = 2,
}

impl Action {
    pub const COUNT: usize = 3;
    pub const ALL: [Action; 3] = [Action::Buy, Action::Sell, Action::Hold];

    pub fn from_index(i: usize) -> Result<Self, EnvError> {
        Self::ALL.get(i).copied().ok_or(EnvError::InvalidAction(i))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Buy => "buy",
            Self::Sell => "sell",
            Self::Hold => "hold",
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Action {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| EnvError::Other(format!("unknown action `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ObservationMode {
    /// Pattern distribution ++ [position / 3, tanh(unrealized % per unit)].
    #[default]
    Augmented,
    /// Pattern distribution only.
    PatternOnly,
}

impl ObservationMode {
    pub fn size(self) -> usize {
        match self {
            Self::Augmented => AUGMENTED_OBSERVATION,
            Self::PatternOnly => NUM_CLASSES,
        }
    }
}

impl FromStr for ObservationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "augmented" => Ok(Self::Augmented),
            "pattern_only" | "strict" => Ok(Self::PatternOnly),
            other => Err(format!("unknown observation mode `{other}` (augmented|pattern_only)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    /// Starting equity; defaults to `MAX_POSITION` times the first reference close.
    pub initial_equity: Option<f64>,
    /// Charged per unit filled.
    pub fee_per_unit: f64,
    pub observation: ObservationMode,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            initial_equity: None,
            fee_per_unit: 0.0,
            observation: ObservationMode::Augmented,
        }
    }
}

/// Open units, realized PnL and marked equity.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountState {
    position: i32,
    /// Fill prices of open units, oldest first; all longs or all shorts.
    entry_prices: VecDeque<f64>,
    realized_pnl: f64,
    equity: f64,
    initial_equity: f64,
}

impl AccountState {
    pub fn new(initial_equity: f64) -> Self {
        Self {
            position: 0,
            entry_prices: VecDeque::new(),
            realized_pnl: 0.0,
            equity: initial_equity,
            initial_equity,
        }
    }

    pub fn position(&self) -> i32 {
        self.position
    }

    pub fn entry_prices(&self) -> impl Iterator<Item = &f64> {
        self.entry_prices.iter()
    }

    pub fn realized_pnl(&self) -> f64 {
        self.realized_pnl
    }

    pub fn equity(&self) -> f64 {
        self.equity
    }

    pub fn initial_equity(&self) -> f64 {
        self.initial_equity
    }

    pub fn unrealized(&self, mark: f64) -> f64 {
        let sign = f64::from(self.position.signum());
        self.entry_prices.iter().map(|e| sign * (mark - e)).sum()
    }

    /// Applies one action at `price`. Returns the PnL realized by the fill,
    /// or `None` when the action did not trade.
    fn apply(&mut self, action: Action, price: f64, fee: f64) -> Option<f64> {
        let delta = match action {
            Action::Buy if self.position < MAX_POSITION => 1,
            Action::Sell if self.position > -MAX_POSITION => -1,
            _ => return None,
        };
        let mut realized = -fee;
        if self.position == 0 || self.position.signum() == delta {
            self.entry_prices.push_back(price);
        } else {
            let entry = self.entry_prices.pop_front().expect("open unit");
            realized += f64::from(self.position.signum()) * (price - entry);
        }
        self.position += delta;
        self.realized_pnl += realized;
        Some(realized)
    }

    fn mark(&mut self, price: f64) {
        self.equity = self.initial_equity + self.realized_pnl + self.unrealized(price);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub step_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
}

/// One row of the episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Timestamp of the fill bar.
    pub timestamp: i64,
    pub action: Action,
    /// Present only when the action traded.
    pub fill_price: Option<f64>,
    pub position: i32,
    pub reward: f64,
    pub equity: f64,
    /// PnL realized by this fill (net of fees); zero without a fill.
    pub realized: f64,
}

/// Classifier outputs for every usable window of a series, computed once and
/// shared read-only between environment instances.
#[derive(Debug, Clone)]
pub struct PatternFeed {
    series: Arc<CandleSeries>,
    window: usize,
    origins: Vec<usize>,
    distributions: Vec<PatternDistribution>,
    /// Distribution of the window one bar past the last usable one.
    terminal: PatternDistribution,
}

impl PatternFeed {
    pub fn new(series: Arc<CandleSeries>, classifier: &ClassifierModel) -> Result<Self, EnvError> {
        Self::build(series, classifier.window(), |w| {
            Ok(classifier.predict_distribution(&encode_window(w)?)?)
        })
    }

    /// Feed from an arbitrary window classifier.
    pub fn build<F>(series: Arc<CandleSeries>, window: usize, classify: F) -> Result<Self, EnvError>
    where
        F: Fn(&Window) -> Result<PatternDistribution, EnvError> + Sync,
    {
        let windows = make_windows(&series, window)?;
        if windows.is_empty() {
            return Err(EnvError::NoWindows);
        }
        let distributions = windows.par_iter().map(&classify).collect::<Result<Vec<_>, _>>()?;
        let last = windows.last().expect("non-empty").origin_index() + 1;
        let terminal = classify(&Window::new(series.bars()[last..last + window].to_vec(), last)?)?;
        Ok(Self {
            origins: windows.iter().map(Window::origin_index).collect(),
            series,
            window,
            distributions,
            terminal,
        })
    }

    pub fn series(&self) -> &CandleSeries {
        &self.series
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Number of steps in a full episode.
    pub fn steps(&self) -> usize {
        self.origins.len()
    }

    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    pub fn distribution(&self, step: usize) -> &PatternDistribution {
        self.distributions.get(step).unwrap_or(&self.terminal)
    }

    /// Close of the last bar of the observation at `step` (terminal for `step == steps()`).
    fn reference_close(&self, step: usize) -> f64 {
        let bar = match self.origins.get(step) {
            Some(o) => o + self.window - 1,
            None => self.origins[self.origins.len() - 1] + self.window,
        };
        self.series.bars()[bar].close
    }
}

pub struct TradingEnv {
    feed: Arc<PatternFeed>,
    config: EnvConfig,
    account: AccountState,
    step_index: usize,
    started: bool,
    trace: Vec<TraceRow>,
}

impl TradingEnv {
    /// Classifies every window of `series` and wraps the result.
    pub fn new(series: CandleSeries, classifier: &ClassifierModel, config: EnvConfig) -> Result<Self, EnvError> {
        let feed = PatternFeed::new(Arc::new(series), classifier)?;
        Ok(Self::from_feed(Arc::new(feed), config))
    }

    pub fn from_feed(feed: Arc<PatternFeed>, config: EnvConfig) -> Self {
        Self {
            feed,
            config,
            account: AccountState::new(0.0),
            step_index: 0,
            started: false,
            trace: Vec::new(),
        }
    }

    pub fn feed(&self) -> &Arc<PatternFeed> {
        &self.feed
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn account(&self) -> &AccountState {
        &self.account
    }

    pub fn max_steps(&self) -> usize {
        self.feed.steps()
    }

    pub fn observation_size(&self) -> usize {
        self.config.observation.size()
    }

    pub fn is_done(&self) -> bool {
        self.started && self.step_index >= self.feed.steps()
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn reset(&mut self) -> EnvState {
        let initial = self
            .config
            .initial_equity
            .unwrap_or_else(|| f64::from(MAX_POSITION) * self.feed.reference_close(0));
        self.account = AccountState::new(initial);
        self.step_index = 0;
        self.started = true;
        self.trace.clear();
        self.state()
    }

    fn state(&self) -> EnvState {
        EnvState {
            observation: self.observation(),
            step_index: self.step_index,
        }
    }

    fn observation(&self) -> Vec<f64> {
        let mut obs = self.feed.distribution(self.step_index).as_slice().to_vec();
        if self.config.observation == ObservationMode::Augmented {
            let pos = self.account.position;
            let mark = self.feed.reference_close(self.step_index);
            let pnl_feature = if pos == 0 {
                0.0
            } else {
                let per_unit = self.account.unrealized(mark) / f64::from(pos.abs());
                squash_pnl(per_unit / mark)
            };
            obs.push(f64::from(pos) / f64::from(MAX_POSITION));
            obs.push(pnl_feature);
        }
        obs
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, EnvError> {
        if !self.started {
            return Err(EnvError::NotReset);
        }
        if self.is_done() {
            return Err(EnvError::EpisodeFinished);
        }
        let i = self.step_index;
        let fill_bar = &self.feed.series.bars()[self.feed.origins[i] + self.feed.window];
        let before = self.account.equity;
        let realized = self.account.apply(action, fill_bar.open, self.config.fee_per_unit);
        self.step_index += 1;
        self.account.mark(self.feed.reference_close(self.step_index));
        let reward = self.account.equity - before;
        self.trace.push(TraceRow {
            step: i,
            timestamp: fill_bar.timestamp,
            action,
            fill_price: realized.map(|_| fill_bar.open),
            position: self.account.position,
            reward,
            equity: self.account.equity,
            realized: realized.unwrap_or(0.0),
        });
        Ok(StepResult {
            next_state: self.state(),
            reward,
            done: self.is_done(),
        })
    }
}

/// Writes `step,timestamp,action,fill_price,position,reward,equity,realized`.
pub fn write_trace<W: Write>(rows: &[TraceRow], initial_equity: f64, writer: W) -> Result<(), EnvError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["step", "timestamp", "action", "fill_price", "position", "reward", "equity", "realized"])?;
    wtr.write_record(["-1", "", "", "", "0", "0", &initial_equity.to_string(), "0"])?;
    for r in rows {
        wtr.write_record([
            r.step.to_string(),
            r.timestamp.to_string(),
            r.action.to_string(),
            r.fill_price.map(|p| p.to_string()).unwrap_or_default(),
            r.position.to_string(),
            r.reward.to_string(),
            r.equity.to_string(),
            r.realized.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_unit_marks_to_close() {
        let mut acct = AccountState::new(1000.0);
        assert_eq!(acct.apply(Action::Buy, 100.0, 0.0), Some(0.0));
        acct.mark(101.0);
        assert_eq!(acct.equity() - 1000.0, 1.0);
        assert_eq!(acct.position(), 1);
    }

    #[test]
    fn position_is_clamped() {
        let mut acct = AccountState::new(0.0);
        for _ in 0..5 {
            acct.apply(Action::Buy, 10.0, 0.0);
        }
        assert_eq!(acct.position(), MAX_POSITION);
        assert_eq!(acct.apply(Action::Buy, 10.0, 0.0), None);
        for _ in 0..10 {
            acct.apply(Action::Sell, 10.0, 0.0);
        }
        assert_eq!(acct.position(), -MAX_POSITION);
        assert_eq!(acct.entry_prices().count(), 3);
    }

    #[test]
    fn closing_realizes_fifo() {
        let mut acct = AccountState::new(0.0);
        acct.apply(Action::Buy, 10.0, 0.0);
        acct.apply(Action::Buy, 12.0, 0.0);
        assert_eq!(acct.apply(Action::Sell, 15.0, 0.0), Some(5.0));
        assert_eq!(acct.entry_prices().copied().collect::<Vec<_>>(), vec![12.0]);
        // short side
        let mut acct = AccountState::new(0.0);
        acct.apply(Action::Sell, 20.0, 0.5);
        assert_eq!(acct.apply(Action::Buy, 18.0, 0.5), Some(1.5));
        assert_eq!(acct.realized_pnl(), 1.0);
        assert_eq!(acct.position(), 0);
    }

    #[test]
    fn action_codes() {
        for (i, a) in Action::ALL.iter().enumerate() {
            assert_eq!(Action::from_index(i).unwrap(), *a);
            assert_eq!(a.name().parse::<Action>().unwrap(), *a);
        }
        assert!(Action::from_index(3).is_err());
    }
}
