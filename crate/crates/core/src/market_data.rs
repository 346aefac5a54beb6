//! OHLCV ingestion, validation and windowing.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KeyValueConfig};

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}` in header")]
    MissingColumn(String),
    #[error("malformed row at line {line}: {reason}")]
    Malformed { line: u64, reason: String },
    #[error("{reason} at line {line}")]
    Validation { line: u64, reason: String },
    #[error("invalid candle: {0}")]
    InvalidCandle(String),
    #[error("timestamps not strictly increasing at line {line} ({prev} then {next})")]
    Ordering { line: u64, prev: i64, next: i64 },
    #[error("empty series")]
    Empty,
    #[error("insufficient data: {len} bars cannot form a window of {window} plus a next bar")]
    InsufficientData { len: usize, window: usize },
    #[error("window size must be at least 2, got {0}")]
    WindowTooSmall(usize),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// One OHLCV bar.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candle {
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Candle {
    /// Builds a candle, rejecting OHLC bound violations. Bounds are exact.
    pub fn new(
        timestamp: i64,
        open: f64,
        high: f64,
        low: f64,
        close: f64,
        volume: f64,
    ) -> Result<Self, MarketDataError> {
        let candle = Self {
            timestamp,
            open,
            high,
            low,
            close,
            volume,
        };
        candle.validate().map_err(MarketDataError::InvalidCandle)?;
        Ok(candle)
    }

    pub fn validate(&self) -> Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err("prices must be finite and positive".to_string());
        }
        if !self.volume.is_finite() || self.volume < 0.0 {
            return Err("volume must be finite and non-negative".to_string());
        }
        if self.high < self.low {
            return Err("high < low".to_string());
        }
        if self.low > self.open.min(self.close) {
            return Err("low above min(open, close)".to_string());
        }
        if self.high < self.open.max(self.close) {
            return Err("high below max(open, close)".to_string());
        }
        Ok(())
    }

    pub fn body(&self) -> f64 {
        (self.close - self.open).abs()
    }

    pub fn range(&self) -> f64 {
        self.high - self.low
    }

    pub fn upper_shadow(&self) -> f64 {
        self.high - self.open.max(self.close)
    }

    pub fn lower_shadow(&self) -> f64 {
        self.open.min(self.close) - self.low
    }

    pub fn body_top(&self) -> f64 {
        self.open.max(self.close)
    }

    pub fn body_bottom(&self) -> f64 {
        self.open.min(self.close)
    }

    pub fn is_bullish(&self) -> bool {
        self.close > self.open
    }

    pub fn is_bearish(&self) -> bool {
        self.close < self.open
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GapPolicy {
    /// Windows whose bars (or next bar) straddle a gap are dropped.
    #[default]
    Exclude,
    Include,
}

impl FromStr for GapPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exclude" => Ok(Self::Exclude),
            "include" => Ok(Self::Include),
            other => Err(format!("unknown gap policy `{other}` (exclude|include)")),
        }
    }
}

impl fmt::Display for GapPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exclude => "exclude",
            Self::Include => "include",
        })
    }
}

/// Column mapping and series-level policy for CSV ingestion.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub timestamp: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub volume: String,
    /// Expected bar spacing in seconds; inferred from the first two bars when unset.
    pub bar_interval: Option<i64>,
    pub gap_policy: GapPolicy,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            timestamp: "timestamp".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            volume: "volume".into(),
            bar_interval: None,
            gap_policy: GapPolicy::Exclude,
        }
    }
}

impl CsvSchema {
    /// Reads `col_timestamp`, `col_open`, ..., `bar_interval` and `gap_policy`.
    pub fn from_config(cfg: &KeyValueConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let col = |key: &str, default: String| cfg.get(key).map(str::to_string).unwrap_or(default);
        Ok(Self {
            timestamp: col("col_timestamp", d.timestamp),
            open: col("col_open", d.open),
            high: col("col_high", d.high),
            low: col("col_low", d.low),
            close: col("col_close", d.close),
            volume: col("col_volume", d.volume),
            bar_interval: cfg.parse("bar_interval")?,
            gap_policy: cfg.parse_or("gap_policy", d.gap_policy)?,
        })
    }
}

/// A validated, time-ordered run of candles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandleSeries {
    bars: Vec<Candle>,
    bar_interval: i64,
    gap_policy: GapPolicy,
    /// Indices `i` such that bars `i-1` and `i` are not one interval apart.
    gaps: Vec<usize>,
}

impl CandleSeries {
    /// Validates every bar and the ordering. Irregular spacing is recorded as a gap.
    pub fn new(bars: Vec<Candle>, bar_interval: Option<i64>) -> Result<Self, MarketDataError> {
        Self::with_policy(bars, bar_interval, GapPolicy::default())
    }

    pub fn with_policy(
        bars: Vec<Candle>,
        bar_interval: Option<i64>,
        gap_policy: GapPolicy,
    ) -> Result<Self, MarketDataError> {
        if bars.is_empty() {
            return Err(MarketDataError::Empty);
        }
        for (i, bar) in bars.iter().enumerate() {
            bar.validate().map_err(|reason| MarketDataError::Validation {
                line: i as u64 + 1,
                reason: format!("bar {i}: {reason}"),
            })?;
        }
        for (i, pair) in bars.windows(2).enumerate() {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(MarketDataError::Ordering {
                    line: i as u64 + 2,
                    prev: pair[0].timestamp,
                    next: pair[1].timestamp,
                });
            }
        }
        let bar_interval = bar_interval
            .or_else(|| bars.get(1).map(|b| b.timestamp - bars[0].timestamp))
            .unwrap_or(1);
        let gaps: Vec<usize> = (1..bars.len())
            .filter(|&i| bars[i].timestamp - bars[i - 1].timestamp != bar_interval)
            .collect();
        for &i in &gaps {
            log::warn!(
                "gap between bar {} (t={}) and bar {} (t={})",
                i - 1,
                bars[i - 1].timestamp,
                i,
                bars[i].timestamp
            );
        }
        Ok(Self {
            bars,
            bar_interval,
            gap_policy,
            gaps,
        })
    }

    pub fn bars(&self) -> &[Candle] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn bar_interval(&self) -> i64 {
        self.bar_interval
    }

    pub fn gap_policy(&self) -> GapPolicy {
        self.gap_policy
    }

    pub fn set_gap_policy(&mut self, policy: GapPolicy) {
        self.gap_policy = policy;
    }

    pub fn gaps(&self) -> &[usize] {
        &self.gaps
    }

    pub fn first_timestamp(&self) -> i64 {
        self.bars[0].timestamp
    }

    pub fn last_timestamp(&self) -> i64 {
        self.bars[self.bars.len() - 1].timestamp
    }

    /// Bars whose timestamps fall in `[from, to]`, keeping interval and policy.
    pub fn slice_time(&self, from: Option<i64>, to: Option<i64>) -> Result<Self, MarketDataError> {
        let bars: Vec<Candle> = self
            .bars
            .iter()
            .filter(|b| from.is_none_or(|f| b.timestamp >= f) && to.is_none_or(|t| b.timestamp <= t))
            .copied()
            .collect();
        Self::with_policy(bars, Some(self.bar_interval), self.gap_policy)
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    /// Whether bars `[start, end]` (inclusive) cross a recorded gap.
    fn spans_gap(&self, start: usize, end: usize) -> bool {
        self.gaps.iter().any(|&g| g > start && g <= end)
    }
}

/// A fixed-length run of bars cut from a series.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    bars: Vec<Candle>,
    origin_index: usize,
}

impl Window {
    pub fn new(bars: Vec<Candle>, origin_index: usize) -> Result<Self, MarketDataError> {
        if bars.len() < 2 {
            return Err(MarketDataError::WindowTooSmall(bars.len()));
        }
        Ok(Self { bars, origin_index })
    }

    pub fn bars(&self) -> &[Candle] {
        &self.bars
    }

    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn origin_index(&self) -> usize {
        self.origin_index
    }

    pub fn last(&self) -> &Candle {
        &self.bars[self.bars.len() - 1]
    }

    pub fn opens(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.open).collect()
    }

    pub fn highs(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.high).collect()
    }

    pub fn lows(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.low).collect()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.bars.iter().map(|b| b.close).collect()
    }

    /// Same shape with every price multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let bars = self
            .bars
            .iter()
            .map(|b| Candle {
                open: b.open * factor,
                high: b.high * factor,
                low: b.low * factor,
                close: b.close * factor,
                ..*b
            })
            .collect();
        Self {
            bars,
            origin_index: self.origin_index,
        }
    }
}

/// Cuts every window that still has a following bar.
///
/// Window `k` covers bars `[k, k + window)`; bar `k + window` is its "next" bar.
/// Under [`GapPolicy::Exclude`] windows whose bars or next bar cross a gap are
/// skipped, so on a gap-free series the result always has `len - window` entries.
pub fn make_windows(series: &CandleSeries, window: usize) -> Result<Vec<Window>, MarketDataError> {
    if window < 2 {
        return Err(MarketDataError::WindowTooSmall(window));
    }
    let len = series.len();
    if len <= window {
        return Err(MarketDataError::InsufficientData { len, window });
    }
    let bars = series.bars();
    Ok((0..len - window)
        .filter(|&k| series.gap_policy() == GapPolicy::Include || !series.spans_gap(k, k + window))
        .map(|k| Window {
            bars: bars[k..k + window].to_vec(),
            origin_index: k,
        })
        .collect())
}

pub fn parse_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<CandleSeries, MarketDataError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| MarketDataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(file, schema)
}

/// Parses CSV from any reader. Line numbers in errors count the header as line 1.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<CandleSeries, MarketDataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| MarketDataError::MissingColumn(name.to_string()))
    };
    let cols = [
        find(&schema.timestamp)?,
        find(&schema.open)?,
        find(&schema.high)?,
        find(&schema.low)?,
        find(&schema.close)?,
        find(&schema.volume)?,
    ];

    let mut bars: Vec<Candle> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize| {
            record.get(idx).map(str::trim).ok_or_else(|| MarketDataError::Malformed {
                line,
                reason: format!("missing field {idx}"),
            })
        };
        let num = |idx: usize| -> Result<f64, MarketDataError> {
            let raw = field(idx)?;
            raw.parse::<f64>().map_err(|_| MarketDataError::Malformed {
                line,
                reason: format!("`{raw}` is not a number"),
            })
        };
        let ts_raw = field(cols[0])?;
        let timestamp = ts_raw.parse::<i64>().map_err(|_| MarketDataError::Malformed {
            line,
            reason: format!("`{ts_raw}` is not an integer timestamp"),
        })?;
        let candle = Candle {
            timestamp,
            open: num(cols[1])?,
            high: num(cols[2])?,
            low: num(cols[3])?,
            close: num(cols[4])?,
            volume: num(cols[5])?,
        };
        candle
            .validate()
            .map_err(|reason| MarketDataError::Validation { line, reason })?;
        if let Some(prev) = bars.last() {
            if candle.timestamp <= prev.timestamp {
                return Err(MarketDataError::Ordering {
                    line,
                    prev: prev.timestamp,
                    next: candle.timestamp,
                });
            }
        }
        bars.push(candle);
    }
    CandleSeries::with_policy(bars, schema.bar_interval, schema.gap_policy)
}

/// Writes the series with the default column names. Reals use the shortest
/// representation that parses back to the identical `f64`.
pub fn write_csv<W: Write>(series: &CandleSeries, writer: W) -> Result<(), MarketDataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["timestamp", "open", "high", "low", "close", "volume"])?;
    for b in series.bars() {
        wtr.write_record([
            b.timestamp.to_string(),
            b.open.to_string(),
            b.high.to_string(),
            b.low.to_string(),
            b.close.to_string(),
            b.volume.to_string(),
        ])?;
    }
    wtr.flush().map_err(|source| MarketDataError::Io {
        path: "<writer>".into(),
        source,
    })?;
    Ok(())
}

pub fn write_csv_file(series: &CandleSeries, path: impl AsRef<Path>) -> Result<(), MarketDataError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|source| MarketDataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    write_csv(series, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar(t: i64, c: f64) -> Candle {
        Candle {
            timestamp: t,
            open: c,
            high: c + 1.0,
            low: c - 1.0,
            close: c,
            volume: 1.0,
        }
    }

    fn series(n: usize) -> CandleSeries {
        CandleSeries::new((0..n).map(|i| bar(i as i64 * 60, 100.0 + i as f64)).collect(), None).unwrap()
    }

    #[test]
    fn parses_single_row() {
        let csv = "timestamp,open,high,low,close,volume\n1577836800,130.0,132.0,129.5,131.0,500\n";
        let s = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s.bars()[0].open, 130.0);
        assert_eq!(s.bars()[0].timestamp, 1_577_836_800);
    }

    #[test]
    fn high_below_low_names_line() {
        let csv = "timestamp,open,high,low,close,volume\n1,129.5,129.0,130.0,129.5,5\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert_eq!(err.to_string(), "high < low at line 2");
    }

    #[test]
    fn malformed_row_reports_line() {
        let csv = "timestamp,open,high,low,close,volume\n1,1,2,0.5,1,1\n2,abc,2,0.5,1,1\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, MarketDataError::Malformed { line: 3, .. }), "{err}");
    }

    #[test]
    fn non_monotonic_timestamps_rejected() {
        let csv = "timestamp,open,high,low,close,volume\n5,1,2,0.5,1,1\n5,1,2,0.5,1,1\n";
        let err = read_csv(csv.as_bytes(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(err, MarketDataError::Ordering { line: 3, .. }));
    }

    #[test]
    fn custom_column_mapping() {
        let cfg: KeyValueConfig = "col_timestamp=time\ncol_volume=vol".parse().unwrap();
        let schema = CsvSchema::from_config(&cfg).unwrap();
        let csv = "time,open,high,low,close,vol\n1,1,2,0.5,1.5,0\n";
        assert_eq!(read_csv(csv.as_bytes(), &schema).unwrap().len(), 1);
        let missing = read_csv("timestamp,open\n".as_bytes(), &schema).unwrap_err();
        assert!(matches!(missing, MarketDataError::MissingColumn(c) if c == "time"));
    }

    #[test]
    fn window_counts() {
        let w = make_windows(&series(12), 10).unwrap();
        assert_eq!(w.iter().map(Window::origin_index).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!(make_windows(&series(11), 10).unwrap().len(), 1);
        assert!(matches!(
            make_windows(&series(10), 10),
            Err(MarketDataError::InsufficientData { len: 10, window: 10 })
        ));
        assert!(matches!(make_windows(&series(5), 1), Err(MarketDataError::WindowTooSmall(1))));
    }

    #[test]
    fn gaps_exclude_spanning_windows() {
        let mut bars: Vec<Candle> = (0..8).map(|i| bar(i * 60, 10.0)).collect();
        for b in bars.iter_mut().skip(5) {
            b.timestamp += 600;
        }
        let mut s = CandleSeries::new(bars, Some(60)).unwrap();
        assert_eq!(s.gaps(), &[5]);
        // windows of 2 with next bar: origins 0..=5; those touching bars 4->5 are dropped
        let kept: Vec<usize> = make_windows(&s, 2).unwrap().iter().map(Window::origin_index).collect();
        assert_eq!(kept, vec![0, 1, 2, 5]);
        s.set_gap_policy(GapPolicy::Include);
        assert_eq!(make_windows(&s, 2).unwrap().len(), 6);
    }

    #[test]
    fn candle_constructor_checks_bounds() {
        assert!(Candle::new(0, 10.0, 11.0, 9.0, 10.5, 0.0).is_ok());
        assert!(Candle::new(0, 10.0, 10.2, 9.0, 10.5, 0.0).is_err());
        assert!(Candle::new(0, 10.0, 11.0, 10.1, 10.5, 0.0).is_err());
        assert!(Candle::new(0, -1.0, 11.0, 9.0, 10.5, 0.0).is_err());
        assert!(Candle::new(0, 10.0, 11.0, 9.0, 10.5, -1.0).is_err());
    }
}
