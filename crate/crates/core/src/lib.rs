//! GAF-encoded candlestick pattern recognition feeding a PPO trading agent.

pub mod backtest;
pub mod classifier;
pub mod config;
pub mod gaf;
pub mod market_data;
pub mod neural;
pub mod patterns;
pub mod pipeline;
pub mod ppo;
pub mod synthetic;
pub mod trading_env;
