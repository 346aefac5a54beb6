mod common;

use common::{series_from, small_classifier, uniform_env};
use gafrl::gaf::encode_window;
use gafrl::market_data::{make_windows, Candle, CandleSeries, GapPolicy};
use gafrl::synthetic::{constant, random_walk};
use gafrl::trading_env::*;
use proptest::prelude::*;

fn cfg() -> EnvConfig {
    EnvConfig::default()
}

#[test]
fn flat_buy_earns_one_unit_move() {
    // W = 2: step 0 observes bars 0..2 and fills at bar 2
    let series = series_from(&[(99.0, 99.5), (99.5, 100.0), (100.0, 101.0)]);
    let mut env = uniform_env(series, 2, cfg());
    env.reset();
    let r = env.step(Action::Buy).unwrap();
    assert_eq!(env.account().position(), 1);
    assert_eq!(r.reward, 1.0);
    assert!(r.done);
    assert_eq!(env.trace()[0].fill_price, Some(100.0));
}

#[test]
fn buy_at_cap_is_a_hold() {
    let oc: Vec<(f64, f64)> = (0..12).map(|i| (100.0 + i as f64, 101.0 + i as f64)).collect();
    let series = series_from(&oc);
    let closes = series.closes();
    let mut env = uniform_env(series, 2, cfg());
    env.reset();
    for _ in 0..3 {
        env.step(Action::Buy).unwrap();
    }
    assert_eq!(env.account().position(), 3);
    // step 3 observes bars 3..5 (reference close of bar 4), marks at bar 5
    let r = env.step(Action::Buy).unwrap();
    assert_eq!(env.account().position(), 3);
    assert_eq!(env.trace()[3].fill_price, None);
    assert!((r.reward - 3.0 * (closes[5] - closes[4])).abs() < 1e-12);
}

#[test]
fn hold_on_flat_book_is_exactly_zero() {
    let series = random_walk(60, 100.0, 0.02, 4).unwrap();
    let mut env = uniform_env(series, 10, cfg());
    env.reset();
    while !env.is_done() {
        assert_eq!(env.step(Action::Hold).unwrap().reward, 0.0);
    }
}

#[test]
fn constant_prices_give_zero_total() {
    let series = constant(40, 25.0).unwrap();
    for seed in 0..20u64 {
        let mut env = uniform_env(series.clone(), 10, cfg());
        env.reset();
        let mut total = 0.0;
        let mut k = seed;
        while !env.is_done() {
            k = k.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            total += env.step(Action::ALL[(k >> 33) as usize % 3]).unwrap().reward;
        }
        assert_eq!(total, 0.0);
    }
}

#[test]
fn lifecycle_errors() {
    let series = random_walk(12, 10.0, 0.01, 1).unwrap();
    let mut env = uniform_env(series, 10, cfg());
    assert!(matches!(env.step(Action::Hold), Err(EnvError::NotReset)));
    env.reset();
    assert_eq!(env.max_steps(), 2);
    env.step(Action::Buy).unwrap();
    assert!(env.step(Action::Buy).unwrap().done);
    assert!(matches!(env.step(Action::Hold), Err(EnvError::EpisodeFinished)));
}

#[test]
fn fresh_state_and_reset_determinism() {
    let series = random_walk(50, 10.0, 0.01, 2).unwrap();
    let mut env = TradingEnv::new(series, small_classifier(), cfg()).unwrap();
    let a = env.reset();
    assert_eq!(a.step_index, 0);
    assert_eq!(env.account().position(), 0);
    assert_eq!(env.account().realized_pnl(), 0.0);
    assert_eq!(env.account().equity(), env.account().initial_equity());
    env.step(Action::Buy).unwrap();
    let b = env.reset();
    assert_eq!(a, b);
    assert_eq!(env.trace().len(), 0);
}

#[test]
fn reset_observation_is_first_window_distribution() {
    let series = random_walk(40, 50.0, 0.01, 8).unwrap();
    let model = small_classifier();
    let expected = model
        .predict_distribution(&encode_window(&make_windows(&series, 10).unwrap()[0]).unwrap())
        .unwrap();
    let mut env = TradingEnv::new(series, model, cfg()).unwrap();
    let obs = env.reset().observation;
    assert_eq!(obs.len(), AUGMENTED_OBSERVATION);
    assert_eq!(&obs[..9], expected.as_slice());
    assert_eq!(&obs[9..], &[0.0, 0.0]);
}

#[test]
fn pattern_only_mode_has_nine_components() {
    let series = random_walk(30, 50.0, 0.01, 8).unwrap();
    let config = EnvConfig {
        observation: ObservationMode::PatternOnly,
        ..cfg()
    };
    let mut env = uniform_env(series, 10, config);
    assert_eq!(env.observation_size(), 9);
    let s = env.reset();
    assert_eq!(s.observation.len(), 9);
    assert_eq!(env.step(Action::Buy).unwrap().next_state.observation.len(), 9);
    assert_eq!("strict".parse::<ObservationMode>().unwrap(), ObservationMode::PatternOnly);
}

#[test]
fn fees_are_charged_per_fill() {
    let series = constant(30, 10.0).unwrap();
    let config = EnvConfig {
        fee_per_unit: 0.25,
        ..cfg()
    };
    let mut env = uniform_env(series, 10, config);
    env.reset();
    let r1 = env.step(Action::Buy).unwrap().reward;
    let r2 = env.step(Action::Sell).unwrap().reward;
    let r3 = env.step(Action::Hold).unwrap().reward;
    assert_eq!((r1, r2, r3), (-0.25, -0.25, 0.0));
    assert_eq!(env.account().realized_pnl(), -0.5);
}

#[test]
fn default_initial_equity_covers_full_position() {
    let series = series_from(&[(9.0, 10.0), (10.0, 11.0), (11.0, 12.0), (12.0, 13.0)]);
    let mut env = uniform_env(series, 2, cfg());
    env.reset();
    // reference close of the first observation is bar 1
    assert_eq!(env.account().initial_equity(), 33.0);
    let mut fixed = uniform_env(series_from(&[(9.0, 10.0), (10.0, 11.0), (11.0, 12.0)]), 2, EnvConfig {
        initial_equity: Some(1000.0),
        ..cfg()
    });
    fixed.reset();
    assert_eq!(fixed.account().equity(), 1000.0);
}

#[test]
fn trace_export_has_initial_row() {
    let series = random_walk(20, 10.0, 0.01, 3).unwrap();
    let mut env = uniform_env(series, 10, cfg());
    env.reset();
    while !env.is_done() {
        env.step(Action::Buy).unwrap();
    }
    let mut buf = Vec::new();
    write_trace(env.trace(), env.account().initial_equity(), &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,timestamp,action,fill_price,position,reward,equity,realized");
    assert!(lines[1].starts_with("-1,"));
    assert_eq!(lines.len(), env.max_steps() + 2);
}

#[test]
fn gap_spanning_windows_are_skipped_and_accounting_holds() {
    let mut bars: Vec<Candle> = random_walk(40, 10.0, 0.01, 6).unwrap().bars().to_vec();
    for b in bars.iter_mut().skip(20) {
        b.timestamp += 3600;
    }
    let series = CandleSeries::with_policy(bars.clone(), Some(900), GapPolicy::Exclude).unwrap();
    let mut env = uniform_env(series, 5, cfg());
    // windows [k, k+5] that contain the 19 -> 20 boundary are dropped
    assert_eq!(env.max_steps(), 35 - 5);
    env.reset();
    let mut total = 0.0;
    while !env.is_done() {
        total += env.step(Action::Buy).unwrap().reward;
    }
    let acct = env.account();
    assert!((acct.equity() - acct.initial_equity() - total).abs() < 1e-9);
    let include = CandleSeries::with_policy(bars, Some(900), GapPolicy::Include).unwrap();
    assert_eq!(uniform_env(include, 5, cfg()).max_steps(), 35);
}

fn action_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..3, 60)
}

proptest! {
    #[test]
    fn accounting_is_conserved(seed in 0u64..10_000, actions in action_strategy(), fee in prop_oneof![Just(0.0), 0.0f64..0.5]) {
        let series = random_walk(70, 100.0, 0.02, seed).unwrap();
        let closes = series.closes();
        let mut env = uniform_env(series, 10, EnvConfig { fee_per_unit: fee, ..cfg() });
        let mut state = env.reset();
        let mut total = 0.0;
        for &a in &actions {
            if env.is_done() {
                break;
            }
            let r = env.step(Action::from_index(a).unwrap()).unwrap();
            total += r.reward;
            let acct = env.account();
            prop_assert!(acct.position().abs() <= MAX_POSITION);
            prop_assert_eq!(acct.entry_prices().count(), acct.position().unsigned_abs() as usize);
            let mark = closes[r.next_state.step_index + 9];
            let rebuilt = acct.initial_equity() + acct.realized_pnl() + acct.unrealized(mark);
            prop_assert!((acct.equity() - rebuilt).abs() < 1e-9);
            let obs = &r.next_state.observation;
            prop_assert!(obs.iter().all(|v| v.is_finite()));
            prop_assert!((obs[..9].iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(obs[9].abs() <= 1.0 && obs[10].abs() < 1.0);
            state = r.next_state;
        }
        let acct = env.account();
        prop_assert!((acct.equity() - acct.initial_equity() - total).abs() < 1e-9);
        prop_assert!(state.step_index <= env.max_steps());
    }
}
