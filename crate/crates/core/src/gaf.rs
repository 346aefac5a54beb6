//! Gramian Angular (summation) Field encoding.
//!
//! A series is min-max scaled into `[0, 1]`, each value is mapped to an angle
//! `phi_i = arccos(x_i)` in `[0, pi/2]`, and the field is the matrix
//! `cos(phi_i + phi_j)`. OHLC windows are encoded one channel per price
//! series, each with its own min and max.

use thiserror::Error;

use crate::market_data::Window;

/// Channel order of a [`GafTensor`].
pub const CHANNEL_NAMES: [&str; 4] = ["open", "high", "low", "close"];
pub const CHANNELS: usize = 4;
pub const DEFAULT_WINDOW: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum GafError {
    #[error("empty series")]
    Empty,
    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("series length {0} is below the minimum of 2")]
    TooShort(usize),
}

/// Scales to `[0, 1]`. A constant series maps to 0.5 everywhere.
pub fn minmax_scale(x: &[f64]) -> Result<Vec<f64>, GafError> {
    if x.is_empty() {
        return Err(GafError::Empty);
    }
    if let Some((index, &value)) = x.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(GafError::NonFinite { index, value });
    }
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    if span == 0.0 {
        return Ok(vec![0.5; x.len()]);
    }
    // clamp guards the last ulp so scaled values never leave [0, 1]
    Ok(x.iter().map(|v| ((v - min) / span).clamp(0.0, 1.0)).collect())
}

/// Symmetric `n x n` field, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GafMatrix {
    values: Vec<f64>,
    n: usize,
}

impl GafMatrix {
    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.n)
    }
}

/// Angles `arccos(scaled x)`, each in `[0, pi/2]`; the field is `cos(phi_i + phi_j)`.
pub fn polar_angles(x: &[f64]) -> Result<Vec<f64>, GafError> {
    Ok(minmax_scale(x)?.into_iter().map(f64::acos).collect())
}

pub fn encode_gaf(x: &[f64]) -> Result<GafMatrix, GafError> {
    if x.len() < 2 {
        return Err(if x.is_empty() {
            GafError::Empty
        } else {
            GafError::TooShort(x.len())
        });
    }
    let scaled = minmax_scale(x)?;
    // cos(phi_i + phi_j) with cos(phi) = x and sin(phi) = sqrt(1 - x^2) on
    // [0, pi/2]; exact at the endpoints, where cos(pi/2) would leave 6e-17.
    let sines: Vec<f64> = scaled.iter().map(|v| (1.0 - v * v).sqrt()).collect();
    let n = scaled.len();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = scaled[i] * scaled[j] - sines[i] * sines[j];
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(GafMatrix { values, n })
}

/// Four stacked fields in [`CHANNEL_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct GafTensor {
    channels: [GafMatrix; CHANNELS],
}

impl GafTensor {
    pub fn size(&self) -> usize {
        self.channels[0].n
    }

    pub fn channel(&self, idx: usize) -> &GafMatrix {
        &self.channels[idx]
    }

    pub fn channels(&self) -> &[GafMatrix; CHANNELS] {
        &self.channels
    }

    /// Channel-major `[channel][row][col]` buffer, the neural input layout.
    pub fn to_chw(&self) -> Vec<f64> {
        self.channels.iter().flat_map(|m| m.values.iter().copied()).collect()
    }
}

pub fn encode_window(w: &Window) -> Result<GafTensor, GafError> {
    Ok(GafTensor {
        channels: [
            encode_gaf(&w.opens())?,
            encode_gaf(&w.highs())?,
            encode_gaf(&w.lows())?,
            encode_gaf(&w.closes())?,
        ],
    })
}
