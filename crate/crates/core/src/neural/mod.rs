//! Small dense/convolutional network core with hand-written backward passes.
//!
//! Tensors are single samples in channel-major layout (`[channels, rows,
//! cols]` for images, `[n]` for vectors); batching is done by the callers.

mod loss;
mod network;
mod optim;
mod tensor;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use loss::{log_softmax, log_sum_exp, softmax, softmax_cross_entropy};
pub use network::{Cache, Gradients, Layer, LayerSpec, Network};
pub use optim::{clip_grad_norm, Adam};
pub use tensor::Tensor;

/// Gradient-norm ceiling applied before every optimizer step in training loops.
pub const DEFAULT_MAX_GRAD_NORM: f64 = 5.0;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("buffer of {len} values does not fit shape {shape:?}")]
    BufferSize { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at layer {layer} ({kind}): {detail}")]
    Shape {
        layer: usize,
        kind: &'static str,
        detail: String,
    },
    #[error("activation cache does not belong to the current network parameters")]
    StaleCache,
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: usize },
    #[error("parameter/gradient mismatch: {detail}")]
    ParamMismatch { detail: String },
    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("networks have different architectures")]
    ArchitectureMismatch,
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: String, detail: String },
}

pub const CHECKPOINT_FORMAT: &str = "gafrl-network";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile<T> {
    format: String,
    version: u32,
    payload: T,
}

/// Writes `payload` as versioned, self-describing JSON. Reals are printed in
/// shortest round-trip form, so reloading is bit-exact.
pub fn save_checkpoint<T: Serialize>(path: impl AsRef<Path>, payload: &T) -> Result<(), NeuralError> {
    let path = path.as_ref();
    let err = |detail: String| NeuralError::Checkpoint {
        path: path.display().to_string(),
        detail,
    };
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        payload,
    };
    let text = serde_json::to_string(&file).map_err(|e| err(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| err(e.to_string()))
}

pub fn load_checkpoint<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T, NeuralError> {
    let path = path.as_ref();
    let err = |detail: String| NeuralError::Checkpoint {
        path: path.display().to_string(),
        detail,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let file: CheckpointFile<T> = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported format {} v{}", file.format, file.version)));
    }
    Ok(file.payload)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let layer = Layer::Conv2d {
            weight: Tensor::filled(&[1, 1, 2, 2], 1.0),
            bias: Tensor::zeros(&[1]),
        };
        let net = Network::from_layers(&[1, 3, 3], vec![layer]).unwrap();
        let (y, _) = net.forward(&Tensor::filled(&[1, 3, 3], 1.0)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), &[4.0; 4]);
    }

    #[test]
    fn identity_dense_passes_input() {
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let net = Network::from_layers(
            &[3],
            vec![Layer::Dense {
                weight: w,
                bias: Tensor::zeros(&[3]),
            }],
        )
        .unwrap();
        let x = Tensor::vector(vec![0.5, -2.0, 7.0]);
        assert_eq!(net.forward(&x).unwrap().0, x);
    }

    #[test]
    fn half_squared_norm_gives_outer_product() {
        let net = Network::new(&[4], &[LayerSpec::Dense { units: 3 }], &mut rng(1)).unwrap();
        let x = Tensor::vector(vec![1.0, -0.5, 2.0, 0.25]);
        let (y, cache) = net.forward(&x).unwrap();
        // d(0.5 |y|^2)/dy = y
        let g = net.backward(&cache, &y).unwrap();
        let gw = &g.params[0];
        for r in 0..3 {
            for c in 0..4 {
                assert!((gw.data()[r * 4 + c] - y.data()[r] * x.data()[c]).abs() < 1e-14);
            }
        }
        assert_eq!(g.params[1].data(), y.data());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let specs = [
            LayerSpec::Conv2d { filters: 2, kernel: 2 },
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 3 },
        ];
        let net = Network::new(&[1, 4, 4], &specs, &mut rng(2)).unwrap();
        let (y, cache) = net.forward(&Tensor::filled(&[1, 4, 4], 0.3)).unwrap();
        let g = net.backward(&cache, &Tensor::zeros(y.shape())).unwrap();
        assert!(g.params.iter().all(|t| t.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn stale_cache_is_refused() {
        let mut net = Network::new(&[2], &[LayerSpec::Dense { units: 2 }], &mut rng(3)).unwrap();
        let (y, cache) = net.forward(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        net.params_mut()[0].data_mut()[0] += 1.0;
        assert!(matches!(net.backward(&cache, &y), Err(NeuralError::StaleCache)));
        let other = net.clone();
        let (y, cache) = other.forward(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(net.backward(&cache, &y), Err(NeuralError::StaleCache)));
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let err = Network::new(&[3], &[LayerSpec::Conv2d { filters: 1, kernel: 2 }], &mut rng(0)).unwrap_err();
        assert!(matches!(err, NeuralError::Shape { layer: 0, kind: "conv2d", .. }), "{err}");
        let net = Network::new(&[3], &[LayerSpec::Dense { units: 2 }], &mut rng(0)).unwrap();
        let err = net.forward(&Tensor::vector(vec![1.0; 4])).unwrap_err();
        assert!(err.to_string().contains("dense"));
    }

    #[test]
    fn forward_is_deterministic_and_shaped() {
        let specs = [
            LayerSpec::Conv2d { filters: 3, kernel: 3 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 5 },
            LayerSpec::Softmax,
        ];
        let net = Network::new(&[2, 7, 7], &specs, &mut rng(4)).unwrap();
        assert_eq!(net.output_shape().unwrap(), vec![5]);
        let x = Tensor::new(vec![2, 7, 7], (0..98).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let a = net.predict(&x).unwrap();
        let b = net.forward(&x).unwrap().0;
        assert_eq!(a.data(), b.data());
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    /// Central differences of `sum(out * probe)` against backward, all layer kinds.
    #[test]
    fn backward_matches_finite_differences() {
        let specs = [
            LayerSpec::Conv2d { filters: 3, kernel: 2 },
            LayerSpec::Relu,
            LayerSpec::MaxPool2x2,
            LayerSpec::Flatten,
            LayerSpec::Dense { units: 4 },
            LayerSpec::Softmax,
        ];
        let mut net = Network::new(&[2, 5, 5], &specs, &mut rng(5)).unwrap();
        let x = Tensor::new(vec![2, 5, 5], (0..50).map(|i| ((i * 7919) % 97) as f64 / 50.0 - 1.0).collect()).unwrap();
        let probe = Tensor::vector(vec![0.3, -1.1, 0.8, 2.0]);
        let objective = |n: &Network| -> f64 {
            n.predict(&x).unwrap().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = net.forward(&x).unwrap();
        let grads = net.backward(&cache, &probe).unwrap();
        let h = 1e-5;
        for p in 0..grads.params.len() {
            for i in 0..grads.params[p].len() {
                let orig = net.params()[p].data()[i];
                net.params_mut()[p].data_mut()[i] = orig + h;
                let up = objective(&net);
                net.params_mut()[p].data_mut()[i] = orig - h;
                let dn = objective(&net);
                net.params_mut()[p].data_mut()[i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads.params[p].data()[i];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(rel < 1e-4 || (fd - an).abs() < 1e-9, "param {p}[{i}]: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let specs = [LayerSpec::Dense { units: 7 }, LayerSpec::Relu, LayerSpec::Dense { units: 2 }];
        let net = Network::new(&[5], &specs, &mut rng(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        save_checkpoint(&path, &net).unwrap();
        let back: Network = load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        for (a, b) in back.params().iter().zip(net.params()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        std::fs::write(&path, r#"{"format":"other","version":1,"payload":null}"#).unwrap();
        assert!(load_checkpoint::<Network>(&path).is_err());
    }
}
