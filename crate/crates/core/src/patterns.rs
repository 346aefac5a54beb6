//! Candlestick pattern rules, window labelling and a labelled-window generator.
//!
//! All predicates compare prices against other prices (or positive multiples
//! of body/range), so labels do not change when a window is rescaled.
//!
//! | quantity            | rule                                                       |
//! |---------------------|------------------------------------------------------------|
//! | small body          | `body < 0.3 * range`                                       |
//! | long body           | `body >= 0.6 * range`                                      |
//! | hammer shape        | `lower >= 2 * body`, `upper <= 0.1 * range`, small body    |
//! | engulfs             | strict body containment of the previous body               |
//! | harami              | long first body strictly containing an opposite-colour body |
//! | star                | long first body, small-bodied star gapping away from it,   |
//! |                     | third candle closing past the first body's midpoint         |
//! | trend               | the 3 closes before the pattern strictly monotone          |

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{Candle, MarketDataError, Window};

pub const SMALL_BODY_RATIO: f64 = 0.3;
pub const LONG_BODY_RATIO: f64 = 0.6;
pub const HAMMER_SHADOW_MULTIPLE: f64 = 2.0;
pub const HAMMER_UPPER_RATIO: f64 = 0.1;
pub const STAR_PENETRATION: f64 = 0.5;
/// Closes before the first pattern candle that must be strictly monotone.
pub const TREND_LOOKBACK: usize = 3;
/// Shortest window on which every rule can be evaluated.
pub const MIN_WINDOW: usize = 3 + TREND_LOOKBACK;

/// Bar spacing stamped on generated windows (15 minutes).
pub const SYNTHETIC_BAR_INTERVAL: i64 = 900;

#[derive(Debug, Error)]
pub enum PatternError {
    #[error("unknown pattern code {0}")]
    UnknownCode(u8),
    #[error("unknown pattern name `{0}`")]
    UnknownName(String),
    #[error("corpus csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("corpus line {line}: {reason}")]
    Corpus { line: u64, reason: String },
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum PatternClass {
    BullishEngulfing = 0,
    BearishEngulfing = 1,
    MorningStar = 2,
    EveningStar = 3,
    BullishHarami = 4,
    BearishHarami = 5,
    Hammer = 6,
    HangingMan = 7,
    None = 8,
}

impl PatternClass {
    pub const COUNT: usize = 9;

    pub const ALL: [PatternClass; Self::COUNT] = [
        Self::BullishEngulfing,
        Self::BearishEngulfing,
        Self::MorningStar,
        Self::EveningStar,
        Self::BullishHarami,
        Self::BearishHarami,
        Self::Hammer,
        Self::HangingMan,
        Self::None,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Result<Self, PatternError> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or(PatternError::UnknownCode(code))
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BullishEngulfing => "bullish_engulfing",
            Self::BearishEngulfing => "bearish_engulfing",
            Self::MorningStar => "morning_star",
            Self::EveningStar => "evening_star",
            Self::BullishHarami => "bullish_harami",
            Self::BearishHarami => "bearish_harami",
            Self::Hammer => "hammer",
            Self::HangingMan => "hanging_man",
            Self::None => "none",
        }
    }

    /// Number of candles the rule inspects (0 for `None`).
    pub fn candle_count(self) -> usize {
        match self {
            Self::MorningStar | Self::EveningStar => 3,
            Self::BullishEngulfing | Self::BearishEngulfing | Self::BullishHarami | Self::BearishHarami => 2,
            Self::Hammer | Self::HangingMan => 1,
            Self::None => 0,
        }
    }

    pub fn trend(self) -> Trend {
        match self {
            Self::BullishEngulfing | Self::MorningStar | Self::BullishHarami | Self::Hammer => Trend::Down,
            Self::BearishEngulfing | Self::EveningStar | Self::BearishHarami | Self::HangingMan => Trend::Up,
            Self::None => Trend::Any,
        }
    }
}

impl fmt::Display for PatternClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PatternClass {
    type Err = PatternError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(code) = s.parse::<u8>() {
            return Self::from_code(code);
        }
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| PatternError::UnknownName(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trend {
    Up,
    Down,
    Any,
}

/// A pattern predicate over the final `candles` bars of a window, preceded by
/// a trend over [`TREND_LOOKBACK`] closes.
#[derive(Debug, Clone, Copy)]
pub struct PatternRule {
    pub class: PatternClass,
    pub candles: usize,
    pub trend: Trend,
    shape: fn(&[Candle]) -> bool,
}

impl PatternRule {
    pub fn matches(&self, w: &Window) -> bool {
        let bars = w.bars();
        if bars.len() < self.candles + TREND_LOOKBACK {
            return false;
        }
        let start = bars.len() - self.candles;
        trend_holds(&bars[start - TREND_LOOKBACK..start], self.trend) && (self.shape)(&bars[start..])
    }
}

fn trend_holds(bars: &[Candle], trend: Trend) -> bool {
    match trend {
        Trend::Any => true,
        Trend::Up => bars.windows(2).all(|p| p[1].close > p[0].close),
        Trend::Down => bars.windows(2).all(|p| p[1].close < p[0].close),
    }
}

fn small_body(c: &Candle) -> bool {
    c.body() < SMALL_BODY_RATIO * c.range()
}

fn long_body(c: &Candle) -> bool {
    c.body() > 0.0 && c.body() >= LONG_BODY_RATIO * c.range()
}

fn hammer_shape(c: &[Candle]) -> bool {
    let c = &c[0];
    c.body() > 0.0
        && small_body(c)
        && c.lower_shadow() >= HAMMER_SHADOW_MULTIPLE * c.body()
        && c.upper_shadow() <= HAMMER_UPPER_RATIO * c.range()
}

fn bullish_engulfing(c: &[Candle]) -> bool {
    let (a, b) = (&c[0], &c[1]);
    a.is_bearish() && b.is_bullish() && b.open < a.close && b.close > a.open
}

fn bearish_engulfing(c: &[Candle]) -> bool {
    let (a, b) = (&c[0], &c[1]);
    a.is_bullish() && b.is_bearish() && b.open > a.close && b.close < a.open
}

fn bullish_harami(c: &[Candle]) -> bool {
    let (a, b) = (&c[0], &c[1]);
    a.is_bearish() && long_body(a) && b.is_bullish() && b.open > a.close && b.close < a.open
}

fn bearish_harami(c: &[Candle]) -> bool {
    let (a, b) = (&c[0], &c[1]);
    a.is_bullish() && long_body(a) && b.is_bearish() && b.open < a.close && b.close > a.open
}

fn morning_star(c: &[Candle]) -> bool {
    let (a, star, third) = (&c[0], &c[1], &c[2]);
    let midpoint = a.close + STAR_PENETRATION * (a.open - a.close);
    a.is_bearish()
        && long_body(a)
        && small_body(star)
        && star.body_top() < a.close
        && third.is_bullish()
        && third.close > midpoint
}

fn evening_star(c: &[Candle]) -> bool {
    let (a, star, third) = (&c[0], &c[1], &c[2]);
    let midpoint = a.close - STAR_PENETRATION * (a.close - a.open);
    a.is_bullish()
        && long_body(a)
        && small_body(star)
        && star.body_bottom() > a.close
        && third.is_bearish()
        && third.close < midpoint
}

/// Rules in precedence order: longer patterns first, then enum order.
pub const RULES: [PatternRule; 8] = [
    PatternRule {
        class: PatternClass::MorningStar,
        candles: 3,
        trend: Trend::Down,
        shape: morning_star,
    },
    PatternRule {
        class: PatternClass::EveningStar,
        candles: 3,
        trend: Trend::Up,
        shape: evening_star,
    },
    PatternRule {
        class: PatternClass::BullishEngulfing,
        candles: 2,
        trend: Trend::Down,
        shape: bullish_engulfing,
    },
    PatternRule {
        class: PatternClass::BearishEngulfing,
        candles: 2,
        trend: Trend::Up,
        shape: bearish_engulfing,
    },
    PatternRule {
        class: PatternClass::BullishHarami,
        candles: 2,
        trend: Trend::Down,
        shape: bullish_harami,
    },
    PatternRule {
        class: PatternClass::BearishHarami,
        candles: 2,
        trend: Trend::Up,
        shape: bearish_harami,
    },
    PatternRule {
        class: PatternClass::Hammer,
        candles: 1,
        trend: Trend::Down,
        shape: hammer_shape,
    },
    PatternRule {
        class: PatternClass::HangingMan,
        candles: 1,
        trend: Trend::Up,
        shape: hammer_shape,
    },
];

pub fn rule_for(class: PatternClass) -> Option<&'static PatternRule> {
    RULES.iter().find(|r| r.class == class)
}

/// First matching rule in precedence order, or `None`.
pub fn label_window(w: &Window) -> PatternClass {
    RULES
        .iter()
        .find(|r| r.matches(w))
        .map_or(PatternClass::None, |r| r.class)
}

/// Every class whose rule fires, in precedence order.
pub fn matching_classes(w: &Window) -> Vec<PatternClass> {
    RULES.iter().filter(|r| r.matches(w)).map(|r| r.class).collect()
}

// ---------------------------------------------------------------------------
// generator

struct BarMaker<'a> {
    rng: &'a mut ChaCha8Rng,
    /// per-bar return scale
    sigma: f64,
}

impl BarMaker<'_> {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    fn normal(&mut self, sd: f64) -> f64 {
        Normal::new(0.0, sd).expect("positive sd").sample(self.rng)
    }

    /// Bar with the given body and shadows expressed in price units.
    fn bar(open: f64, close: f64, upper: f64, lower: f64) -> Candle {
        Candle {
            timestamp: 0,
            open,
            high: open.max(close) + upper,
            low: open.min(close) - lower,
            close,
            volume: 0.0,
        }
    }

    /// Ordinary bar drifting by `ret` from `prev_close`.
    fn walk_bar(&mut self, prev_close: f64, ret: f64) -> Candle {
        let open = prev_close * (1.0 + self.normal(0.15 * self.sigma));
        let close = open * (1.0 + ret);
        let upper = open.max(close) * self.normal(0.6 * self.sigma).abs();
        let lower = open.min(close) * self.normal(0.6 * self.sigma).abs();
        Self::bar(open, close, upper, lower)
    }

    /// `n` bars whose closes follow `trend`; the final transitions are forced
    /// so that the trend predicate has a margin.
    fn lead_in(&mut self, n: usize, trend: Trend, start: f64) -> Vec<Candle> {
        let dir = match trend {
            Trend::Up => 1.0,
            Trend::Down => -1.0,
            Trend::Any => 0.0,
        };
        let drift = dir * self.uniform(0.3, 1.0) * self.sigma;
        let mut bars = Vec::with_capacity(n);
        let mut prev = start;
        for i in 0..n {
            let forced = trend != Trend::Any && i + TREND_LOOKBACK + 1 >= n;
            let ret = if forced {
                dir * self.uniform(0.4, 1.5) * self.sigma
            } else {
                drift + self.normal(self.sigma)
            };
            let b = self.walk_bar(prev, ret);
            prev = b.close;
            bars.push(b);
        }
        bars
    }

    fn pattern(&mut self, class: PatternClass, last_close: f64) -> Vec<Candle> {
        let unit = last_close * self.sigma * self.uniform(1.5, 3.0);
        let open0 = last_close * (1.0 + self.normal(0.1 * self.sigma));
        match class {
            PatternClass::BullishEngulfing | PatternClass::BearishEngulfing => {
                let dir = if class == PatternClass::BullishEngulfing { 1.0 } else { -1.0 };
                let body_a = unit * self.uniform(0.5, 1.2);
                let close_a = open0 - dir * body_a;
                let (ua, la) = (body_a * self.uniform(0.0, 0.5), body_a * self.uniform(0.0, 0.5));
                let a = Self::bar(open0, close_a, ua, la);
                let open_b = close_a - dir * unit * self.uniform(0.05, 0.5);
                let close_b = open0 + dir * unit * self.uniform(0.1, 0.8);
                let body_b = (close_b - open_b).abs();
                let (ub, lb) = (body_b * self.uniform(0.0, 0.3), body_b * self.uniform(0.0, 0.3));
                vec![a, Self::bar(open_b, close_b, ub, lb)]
            }
            PatternClass::BullishHarami | PatternClass::BearishHarami => {
                let dir = if class == PatternClass::BullishHarami { 1.0 } else { -1.0 };
                let body_a = unit * self.uniform(1.5, 3.0);
                let close_a = open0 - dir * body_a;
                let (ua, la) = (body_a * self.uniform(0.0, 0.25), body_a * self.uniform(0.0, 0.25));
                let a = Self::bar(open0, close_a, ua, la);
                let open_b = close_a + dir * body_a * self.uniform(0.1, 0.35);
                let close_b = open_b + dir * body_a * self.uniform(0.1, 0.4);
                let body_b = (close_b - open_b).abs();
                let (ub, lb) = (body_b * self.uniform(0.0, 0.8), body_b * self.uniform(0.0, 0.8));
                vec![a, Self::bar(open_b, close_b, ub, lb)]
            }
            PatternClass::MorningStar | PatternClass::EveningStar => {
                let dir = if class == PatternClass::MorningStar { 1.0 } else { -1.0 };
                let body_a = unit * self.uniform(1.5, 3.0);
                let close_a = open0 - dir * body_a;
                let (ua, la) = (body_a * self.uniform(0.0, 0.25), body_a * self.uniform(0.0, 0.25));
                let a = Self::bar(open0, close_a, ua, la);
                // star body sits beyond the first close, away from the first body
                let near_edge = close_a - dir * body_a * self.uniform(0.05, 0.3);
                let star_body = body_a * self.uniform(0.02, 0.08);
                let far_edge = near_edge - dir * star_body;
                let (star_open, star_close) = if self.rng.random_bool(0.5) {
                    (near_edge, far_edge)
                } else {
                    (far_edge, near_edge)
                };
                let (us, ls) = (body_a * self.uniform(0.15, 0.4), body_a * self.uniform(0.15, 0.4));
                let star = Self::bar(star_open, star_close, us, ls);
                let open_c = near_edge + dir * body_a * self.uniform(0.0, 0.2);
                let midpoint = close_a + dir * 0.5 * body_a;
                let close_c = midpoint + dir * body_a * self.uniform(0.05, 0.45);
                let body_c = (close_c - open_c).abs();
                let (uc, lc) = (body_c * self.uniform(0.0, 0.3), body_c * self.uniform(0.0, 0.3));
                vec![a, star, Self::bar(open_c, close_c, uc, lc)]
            }
            PatternClass::Hammer | PatternClass::HangingMan => {
                let body = unit * self.uniform(0.3, 0.8);
                let lower = body * self.uniform(2.2, 4.0);
                let upper = body * self.uniform(0.0, 0.25);
                let top = open0;
                let (open, close) = if self.rng.random_bool(0.5) {
                    (top - body, top)
                } else {
                    (top, top - body)
                };
                vec![Self::bar(open, close, upper, lower)]
            }
            PatternClass::None => Vec::new(),
        }
    }
}

fn candidate(rng: &mut ChaCha8Rng, class: PatternClass, window: usize) -> Window {
    let start = 10f64.powf(rng.random_range(1.0..3.0));
    let sigma = rng.random_range(0.004..0.02);
    let mut maker = BarMaker { rng, sigma };
    let k = class.candle_count();
    let mut bars = maker.lead_in(window - k, class.trend(), start);
    let last = bars.last().map_or(start, |b| b.close);
    bars.extend(maker.pattern(class, last));
    for (i, b) in bars.iter_mut().enumerate() {
        b.timestamp = i as i64 * SYNTHETIC_BAR_INTERVAL;
    }
    Window::new(bars, 0).expect("window >= 2")
}

/// Deterministic labelled windows of `class`. Candidates are redrawn until
/// [`label_window`] agrees with the intended class (and for `None`, until no
/// rule fires), so every returned pair is consistent.
///
/// Panics if `window < MIN_WINDOW`.
pub fn generate_synthetic(class: PatternClass, count: usize, seed: u64, window: usize) -> Vec<(Window, PatternClass)> {
    assert!(window >= MIN_WINDOW, "window {window} below minimum {MIN_WINDOW}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut rejected = 0usize;
    while out.len() < count {
        let w = candidate(&mut rng, class, window);
        let valid = w.bars().iter().all(|b| b.validate().is_ok());
        if valid && label_window(&w) == class {
            out.push((w, class));
        } else {
            rejected += 1;
        }
    }
    log::debug!("generated {count} {class} windows, {rejected} candidates rejected");
    out
}

/// Balanced corpus: `per_class` windows of each of the nine classes, grouped
/// by class. Each class draws from its own stream derived from `seed`.
pub fn generate_corpus(per_class: usize, seed: u64, window: usize) -> Vec<(Window, PatternClass)> {
    PatternClass::ALL
        .iter()
        .flat_map(|&c| generate_synthetic(c, per_class, class_seed(seed, c), window))
        .collect()
}

/// `total` samples split as evenly as possible; earlier classes take the remainder.
pub fn generate_balanced(total: usize, seed: u64, window: usize) -> Vec<(Window, PatternClass)> {
    let (base, extra) = (total / PatternClass::COUNT, total % PatternClass::COUNT);
    PatternClass::ALL
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| generate_synthetic(c, base + usize::from(i < extra), class_seed(seed, c), window))
        .collect()
}

fn class_seed(seed: u64, class: PatternClass) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(class.code() as u64 + 1)
}

// ---------------------------------------------------------------------------
// corpus csv: class code followed by open_i,high_i,low_i,close_i for each bar

pub fn write_corpus<W: Write>(samples: &[(Window, PatternClass)], writer: W) -> Result<(), PatternError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let width = samples.first().map_or(0, |(w, _)| w.len());
    let mut header = vec!["class".to_string()];
    for i in 0..width {
        for f in ["open", "high", "low", "close"] {
            header.push(format!("{f}_{i}"));
        }
    }
    wtr.write_record(&header)?;
    for (w, class) in samples {
        let mut row = vec![class.code().to_string()];
        for b in w.bars() {
            row.extend([b.open, b.high, b.low, b.close].iter().map(f64::to_string));
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus`]; bars get synthetic timestamps.
pub fn read_corpus<R: Read>(reader: R) -> Result<Vec<(Window, PatternClass)>, PatternError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let corpus_err = |reason: String| PatternError::Corpus { line, reason };
        if record.len() < 1 + 4 * 2 || (record.len() - 1) % 4 != 0 {
            return Err(corpus_err(format!("{} fields is not 1 + 4*W", record.len())));
        }
        let class: PatternClass = record[0].parse()?;
        let nums: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|f| f.trim().parse::<f64>().map_err(|_| corpus_err(format!("`{f}` is not a number"))))
            .collect::<Result<_, _>>()?;
        let bars = nums
            .chunks(4)
            .enumerate()
            .map(|(i, c)| {
                Candle::new(i as i64 * SYNTHETIC_BAR_INTERVAL, c[0], c[1], c[2], c[3], 0.0)
                    .map_err(|e| corpus_err(format!("bar {i}: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push((Window::new(bars, 0)?, class));
    }
    Ok(out)
}
