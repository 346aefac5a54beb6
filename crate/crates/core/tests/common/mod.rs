#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use gafrl::classifier::{train_classifier, ClassifierModel, PatternDistribution, TrainConfig};
use gafrl::gaf::{encode_window, GafTensor};
use gafrl::market_data::{Candle, CandleSeries};
use gafrl::patterns::{generate_balanced, generate_corpus, PatternClass};
use gafrl::trading_env::{EnvConfig, PatternFeed, TradingEnv};

pub fn bar(t: i64, open: f64, high: f64, low: f64, close: f64) -> Candle {
    Candle {
        timestamp: t,
        open,
        high,
        low,
        close,
        volume: 1.0,
    }
}

/// Bars from `(open, close)` pairs with a small wick, 60 s apart.
pub fn series_from(oc: &[(f64, f64)]) -> CandleSeries {
    let bars = oc
        .iter()
        .enumerate()
        .map(|(i, &(o, c))| bar(i as i64 * 60, o, o.max(c) * 1.001, o.min(c) * 0.999, c))
        .collect();
    CandleSeries::new(bars, Some(60)).unwrap()
}

/// Environment whose pattern feed is the uniform distribution everywhere.
pub fn uniform_env(series: CandleSeries, window: usize, config: EnvConfig) -> TradingEnv {
    let feed = PatternFeed::build(Arc::new(series), window, |_| Ok(PatternDistribution::uniform())).unwrap();
    TradingEnv::from_feed(Arc::new(feed), config)
}

pub fn encode_all(samples: Vec<(gafrl::market_data::Window, PatternClass)>) -> Vec<(GafTensor, PatternClass)> {
    samples.into_iter().map(|(w, c)| (encode_window(&w).unwrap(), c)).collect()
}

/// Quickly trained classifier, good enough for plumbing tests.
pub fn small_classifier() -> &'static ClassifierModel {
    static MODEL: OnceLock<ClassifierModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus = encode_all(generate_corpus(30, 3, 10));
        let config = TrainConfig {
            max_epochs: 3,
            ..TrainConfig::default()
        };
        train_classifier(&corpus, &config).unwrap().0
    })
}

/// Default-configured classifier on the 8,000-window corpus (seed 42).
pub fn full_classifier() -> &'static ClassifierModel {
    static MODEL: OnceLock<ClassifierModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let corpus = encode_all(generate_balanced(8000, 42, 10));
        train_classifier(&corpus, &TrainConfig::default()).unwrap().0
    })
}

pub mod gradcheck {
    use gafrl::neural::{LayerSpec, Network, Tensor};
    use gafrl::ppo::{evaluate, loss_and_gradients, ppo_loss_with_advantages, ActorCritic, PpoConfig};
    use gafrl::trading_env::Action;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub const STEP: f64 = 1e-5;
    pub const TOLERANCE: f64 = 1e-4;

    /// Relative error with an absolute floor for entries that are zero on both sides.
    pub fn relative_error(fd: f64, analytic: f64) -> f64 {
        let diff = (fd - analytic).abs();
        if diff < 1e-9 {
            0.0
        } else {
            diff / fd.abs().max(analytic.abs())
        }
    }

    fn central<F: FnMut(f64) -> f64>(orig: f64, mut f: F) -> f64 {
        (f(orig + STEP) - f(orig - STEP)) / (2.0 * STEP)
    }

    /// Max relative error of parameter and input gradients of `sum(out * probe)`.
    pub fn network_error(input_shape: &[usize], specs: &[LayerSpec], seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Network::new(input_shape, specs, &mut rng).unwrap();
        let n: usize = input_shape.iter().product();
        let x = Tensor::new(input_shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out_len: usize = net.output_shape().unwrap().iter().product();
        let probe: Vec<f64> = (0..out_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |net: &Network, x: &Tensor| -> f64 {
            net.predict(x).unwrap().data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let (out, cache) = net.forward(&x).unwrap();
        let grads = net.backward(&cache, &Tensor::new(out.shape().to_vec(), probe.clone()).unwrap()).unwrap();
        let mut worst: f64 = 0.0;
        for p in 0..grads.params.len() {
            for i in 0..grads.params[p].len() {
                let orig = net.params()[p].data()[i];
                let fd = central(orig, |v| {
                    net.params_mut()[p].data_mut()[i] = v;
                    objective(&net, &x)
                });
                net.params_mut()[p].data_mut()[i] = orig;
                worst = worst.max(relative_error(fd, grads.params[p].data()[i]));
            }
        }
        let mut xm = x.clone();
        for i in 0..n {
            let orig = x.data()[i];
            let fd = central(orig, |v| {
                xm.data_mut()[i] = v;
                objective(&net, &xm)
            });
            xm.data_mut()[i] = orig;
            worst = worst.max(relative_error(fd, grads.input.data()[i]));
        }
        worst
    }

    /// Random batch for the actor-critic loss.
    pub struct Batch {
        pub states: Vec<Vec<f64>>,
        pub actions: Vec<Action>,
        pub logp_old: Vec<f64>,
        pub returns: Vec<f64>,
    }

    pub fn random_batch(model: &ActorCritic, size: usize, rng: &mut ChaCha8Rng) -> Batch {
        let dim = model.observation_size();
        let states: Vec<Vec<f64>> = (0..size).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let actions: Vec<Action> = (0..size).map(|_| Action::ALL[rng.random_range(0..3)]).collect();
        let eval = evaluate(model, &states, &actions).unwrap();
        // ratios spread on both sides of the clip range
        let logp_old = eval.log_probs.iter().map(|lp| lp - rng.random_range(-0.5..0.5)).collect();
        let returns = (0..size).map(|_| rng.random_range(-2.0..2.0)).collect();
        Batch {
            states,
            actions,
            logp_old,
            returns,
        }
    }

    /// Max relative error of the full PPO loss gradient (advantages frozen at
    /// the unperturbed values) over every actor-critic parameter.
    pub fn actor_critic_error(seed: u64, hidden: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = ActorCritic::new(11, hidden, &mut rng).unwrap();
        // larger policy weights than the near-uniform init, so the entropy and ratio terms are exercised
        for p in model.params_mut() {
            p.scale(2.0);
        }
        let b = random_batch(&model, 6, &mut rng);
        let config = PpoConfig::default();
        let eval = evaluate(&model, &b.states, &b.actions).unwrap();
        let adv: Vec<f64> = b.returns.iter().zip(&eval.values).map(|(r, v)| r - v).collect();
        let (_, grads) =
            loss_and_gradients(&model, &b.states, &b.actions, &b.logp_old, &b.returns, Some(&adv), &config).unwrap();
        let loss = |m: &ActorCritic| -> f64 {
            let e = evaluate(m, &b.states, &b.actions).unwrap();
            ppo_loss_with_advantages(&e.log_probs, &b.logp_old, &adv, &b.returns, &e.values, &e.entropies, &config)
                .unwrap()
                .total
        };
        let mut worst: f64 = 0.0;
        for p in 0..grads.len() {
            for i in 0..grads[p].len() {
                let orig = model.params()[p].data()[i];
                let fd = central(orig, |v| {
                    model.params_mut()[p].data_mut()[i] = v;
                    loss(&model)
                });
                model.params_mut()[p].data_mut()[i] = orig;
                worst = worst.max(relative_error(fd, grads[p].data()[i]));
            }
        }
        worst
    }
}
