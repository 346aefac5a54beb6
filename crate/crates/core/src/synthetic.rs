//! Synthetic OHLC markets for experiments and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::market_data::{Candle, CandleSeries, MarketDataError};
use crate::patterns::SYNTHETIC_BAR_INTERVAL;

/// 2020-01-01T00:00:00Z
pub const DEFAULT_START: i64 = 1_577_836_800;

/// Linear ramp of `amplitude` (relative) over `period` bars, then a one-bar
/// reset to the base level. Each open equals the previous close.
#[derive(Debug, Clone, PartialEq)]
pub struct Sawtooth {
    pub period: usize,
    pub amplitude: f64,
    pub base: f64,
    /// Ramp position of the first bar.
    pub phase: usize,
    /// Relative high/low excursion beyond the body.
    pub wick: f64,
    /// Standard deviation of multiplicative close noise; zero is deterministic.
    pub noise: f64,
    pub start: i64,
    pub interval: i64,
}

impl Default for Sawtooth {
    fn default() -> Self {
        Self {
            period: 20,
            amplitude: 0.05,
            base: 100.0,
            phase: 0,
            wick: 0.001,
            noise: 0.0,
            start: DEFAULT_START,
            interval: SYNTHETIC_BAR_INTERVAL,
        }
    }
}

impl Sawtooth {
    /// Noise-free close at ramp position `p`.
    pub fn level(&self, p: usize) -> f64 {
        let p = p % self.period;
        self.base * (1.0 + self.amplitude * p as f64 / (self.period - 1) as f64)
    }

    pub fn generate(&self, bars: usize, seed: u64) -> Result<CandleSeries, MarketDataError> {
        assert!(self.period >= 2, "sawtooth period must be at least 2");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let close_at = |p: usize, rng: &mut ChaCha8Rng| {
            let eps: f64 = if self.noise > 0.0 { normal.sample(rng) } else { 0.0 };
            self.level(p) * (1.0 + self.noise * eps).max(0.5)
        };
        let mut prev = close_at(self.phase + self.period - 1, &mut rng);
        let mut out = Vec::with_capacity(bars);
        for i in 0..bars {
            let close = close_at(self.phase + i, &mut rng);
            out.push(candle(self.start + i as i64 * self.interval, prev, close, self.wick));
            prev = close;
        }
        CandleSeries::new(out, Some(self.interval))
    }
}

fn candle(timestamp: i64, open: f64, close: f64, wick: f64) -> Candle {
    Candle {
        timestamp,
        open,
        high: open.max(close) * (1.0 + wick),
        low: open.min(close) * (1.0 - wick),
        close,
        volume: 1.0,
    }
}

/// Geometric random walk with per-bar log-volatility `vol` and random wicks.
pub fn random_walk(bars: usize, start_price: f64, vol: f64, seed: u64) -> Result<CandleSeries, MarketDataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, vol.max(0.0)).expect("finite volatility");
    let mut prev = start_price;
    let mut out = Vec::with_capacity(bars);
    for i in 0..bars {
        let close = prev * normal.sample(&mut rng).exp();
        let wick = vol * rng.random::<f64>();
        out.push(candle(DEFAULT_START + i as i64 * SYNTHETIC_BAR_INTERVAL, prev, close, wick));
        prev = close;
    }
    CandleSeries::new(out, Some(SYNTHETIC_BAR_INTERVAL))
}

pub fn constant(bars: usize, price: f64) -> Result<CandleSeries, MarketDataError> {
    CandleSeries::new(
        (0..bars)
            .map(|i| candle(DEFAULT_START + i as i64 * SYNTHETIC_BAR_INTERVAL, price, price, 0.0))
            .collect(),
        Some(SYNTHETIC_BAR_INTERVAL),
    )
}
