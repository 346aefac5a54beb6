use gafrl::gaf::*;
use gafrl::market_data::{Candle, Window};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn scaled_extremes_over_random_draws() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-50.0..50.0)).collect();
        let s = minmax_scale(&x).unwrap();
        assert_eq!(s.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(s.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }
}

#[test]
fn field_matches_trig_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..10.0)).collect();
        let phi = polar_angles(&x).unwrap();
        let m = encode_gaf(&x).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let oracle = phi[i].cos() * phi[j].cos() - phi[i].sin() * phi[j].sin();
                assert!((m.get(i, j) - oracle).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn constant_series_angles_are_a_third_of_pi() {
    let phi = polar_angles(&[5.0, 5.0, 5.0]).unwrap();
    for p in phi {
        assert!((p - std::f64::consts::FRAC_PI_3).abs() < 1e-15);
    }
    assert!(encode_gaf(&[1.0, f64::NAN]).is_err());
}

fn random_window(rng: &mut ChaCha8Rng, w: usize) -> Window {
    let mut price: f64 = 100.0;
    let bars = (0..w)
        .map(|i| {
            let open = price;
            price *= 1.0 + rng.random_range(-0.02..0.02);
            let hi = open.max(price) * (1.0 + rng.random_range(0.0..0.01));
            let lo = open.min(price) * (1.0 - rng.random_range(0.0..0.01));
            Candle { timestamp: i as i64, open, high: hi, low: lo, close: price, volume: 1.0 }
        })
        .collect();
    Window::new(bars, 0).unwrap()
}

#[test]
fn channels_are_independent_encodings() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let w = random_window(&mut rng, 10);
        let t = encode_window(&w).unwrap();
        let series = [w.opens(), w.highs(), w.lows(), w.closes()];
        for (c, s) in series.iter().enumerate() {
            assert_eq!(t.channel(c), &encode_gaf(s).unwrap(), "channel {}", CHANNEL_NAMES[c]);
        }
        assert_eq!(&t.to_chw()[300..], encode_gaf(&series[3]).unwrap().as_slice());
    }
}

proptest! {
    #[test]
    fn symmetric_bounded_with_cosine_diagonal(x in prop::collection::vec(-1e4f64..1e4, 2..32)) {
        let m = encode_gaf(&x).unwrap();
        let phi = polar_angles(&x).unwrap();
        let n = m.size();
        for i in 0..n {
            prop_assert!((m.get(i, i) - (2.0 * phi[i]).cos()).abs() < 1e-12);
            for j in 0..n {
                prop_assert!((m.get(i, j) - m.get(j, i)).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&m.get(i, j)));
            }
        }
    }
}
