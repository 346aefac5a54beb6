//! GAF-CNN pattern classifier.
//!
//! Input is a `[4, W, W]` GAF tensor; the network is
//! conv(16, 3x3) -> relu -> conv(32, 3x3) -> relu -> maxpool 2x2 -> flatten
//! -> dense 64 -> relu -> dense 9, and a softmax over the nine logits gives
//! the [`PatternDistribution`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, KeyValueConfig};
use crate::gaf::{GafTensor, CHANNELS};
use crate::neural::{
    clip_grad_norm, load_checkpoint, save_checkpoint, softmax, softmax_cross_entropy, Adam, LayerSpec, Network,
    NeuralError, Tensor, DEFAULT_MAX_GRAD_NORM,
};
use crate::patterns::PatternClass;

pub const NUM_CLASSES: usize = PatternClass::COUNT;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("corpus has {count} examples of class {class}; at least 2 are required")]
    MissingClass { class: PatternClass, count: usize },
    #[error("corpus mixes window sizes {0} and {1}")]
    MixedWindows(usize, usize),
    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },
    #[error("input is {got}x{got}, model expects {expected}x{expected}")]
    InputSize { expected: usize, got: usize },
    #[error("metadata sidecar {path}: {detail}")]
    Metadata { path: String, detail: String },
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Probability over the nine pattern classes, indexed by class code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternDistribution {
    probabilities: [f64; NUM_CLASSES],
}

impl PatternDistribution {
    /// Normalised softmax of `logits`.
    pub fn from_logits(logits: &[f64]) -> Self {
        let p = softmax(logits);
        let mut probabilities = [0.0; NUM_CLASSES];
        probabilities.copy_from_slice(&p);
        Self { probabilities }
    }

    pub fn uniform() -> Self {
        Self {
            probabilities: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
        }
    }

    /// All mass on `class`.
    pub fn certain(class: PatternClass) -> Self {
        let mut probabilities = [0.0; NUM_CLASSES];
        probabilities[class.index()] = 1.0;
        Self { probabilities }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn probability(&self, class: PatternClass) -> f64 {
        self.probabilities[class.index()]
    }

    pub fn argmax(&self) -> PatternClass {
        let idx = Tensor::vector(self.probabilities.to_vec()).argmax();
        PatternClass::ALL[idx]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    pub validation_fraction: f64,
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 42,
            patience: Some(5),
            validation_fraction: 0.2,
            max_grad_norm: DEFAULT_MAX_GRAD_NORM,
        }
    }
}

impl TrainConfig {
    /// Overrides from `epochs`, `batch_size`, `lr`, `seed`, `patience` (0 disables).
    pub fn from_config(cfg: &KeyValueConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        let patience: Option<usize> = cfg.parse("patience")?;
        Ok(Self {
            max_epochs: cfg.parse_or("epochs", d.max_epochs)?,
            batch_size: cfg.parse_or("batch_size", d.batch_size)?,
            learning_rate: cfg.parse_or("lr", d.learning_rate)?,
            seed: cfg.parse_or("seed", d.seed)?,
            patience: match patience {
                Some(0) => None,
                Some(p) => Some(p),
                None => d.patience,
            },
            validation_fraction: cfg.parse_or("validation_fraction", d.validation_fraction)?,
            max_grad_norm: d.max_grad_norm,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub window: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub corpus_hash: String,
    pub train_accuracy: f64,
    pub validation_accuracy: f64,
    pub per_class_validation_accuracy: [f64; NUM_CLASSES],
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    network: Network,
    metadata: TrainingMetadata,
}

pub fn architecture() -> [LayerSpec; 9] {
    [
        LayerSpec::Conv2d { filters: 16, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::Conv2d { filters: 32, kernel: 3 },
        LayerSpec::Relu,
        LayerSpec::MaxPool2x2,
        LayerSpec::Flatten,
        LayerSpec::Dense { units: 64 },
        LayerSpec::Relu,
        LayerSpec::Dense { units: NUM_CLASSES },
    ]
}

pub fn gaf_input(x: &GafTensor) -> Tensor {
    let n = x.size();
    Tensor::new(vec![CHANNELS, n, n], x.to_chw()).expect("gaf tensor is 4 x n x n")
}

/// SHA-256 over labels and tensor bit patterns, hex encoded.
pub fn corpus_hash(corpus: &[(GafTensor, PatternClass)]) -> String {
    let mut h = Sha256::new();
    for (x, class) in corpus {
        h.update([class.code()]);
        for v in x.to_chw() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Per-class 80/20 (by default) split; every class keeps at least one
/// example on each side.
fn stratified_split(corpus: &[(GafTensor, PatternClass)], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for class in PatternClass::ALL {
        let mut idx: Vec<usize> = (0..corpus.len()).filter(|&i| corpus[i].1 == class).collect();
        idx.shuffle(rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    (train, val)
}

pub fn train_classifier(
    corpus: &[(GafTensor, PatternClass)],
    config: &TrainConfig,
) -> Result<(ClassifierModel, Vec<EpochStats>), ClassifierError> {
    for class in PatternClass::ALL {
        let count = corpus.iter().filter(|(_, c)| *c == class).count();
        if count < 2 {
            return Err(ClassifierError::MissingClass { class, count });
        }
    }
    let window = corpus[0].0.size();
    if let Some((x, _)) = corpus.iter().find(|(x, _)| x.size() != window) {
        return Err(ClassifierError::MixedWindows(window, x.size()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = Network::new(&[CHANNELS, window, window], &architecture(), &mut rng)?;
    let (mut train_idx, val_idx) = stratified_split(corpus, config.validation_fraction, &mut rng);
    let inputs: Vec<Tensor> = corpus.iter().map(|(x, _)| gaf_input(x)).collect();
    let labels: Vec<usize> = corpus.iter().map(|(_, c)| c.index()).collect();

    let mut adam = Adam::new(config.learning_rate);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, Network)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=config.max_epochs {
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in train_idx.chunks(config.batch_size.max(1)) {
            let net = &network;
            let per_example: Vec<_> = batch
                .par_iter()
                .map(|&i| -> Result<_, NeuralError> {
                    let (logits, cache) = net.forward(&inputs[i])?;
                    let (loss, dlogits) = softmax_cross_entropy(&logits, labels[i])?;
                    let grads = net.backward(&cache, &dlogits)?;
                    Ok((loss, logits.argmax() == labels[i], grads))
                })
                .collect::<Result<_, _>>()?;
            // reduce in batch order so the sum is deterministic
            let mut total = network.zero_gradients();
            for (loss, hit, grads) in &per_example {
                loss_sum += loss;
                correct += usize::from(*hit);
                total.accumulate(grads);
            }
            if !loss_sum.is_finite() {
                return Err(ClassifierError::Diverged { epoch });
            }
            let mut grads = total.params;
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().for_each(|g| g.scale(scale));
            clip_grad_norm(&mut grads, config.max_grad_norm);
            adam.step(network.params_mut(), &grads)?;
        }
        let validation_accuracy = accuracy(&network, &inputs, &labels, &val_idx)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy: correct as f64 / train_idx.len() as f64,
            validation_accuracy,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train acc {:.4} val acc {:.4}",
            stats.train_loss,
            stats.train_accuracy,
            stats.validation_accuracy
        );
        history.push(stats);
        if best.as_ref().is_none_or(|(acc, _, _)| validation_accuracy > *acc) {
            best = Some((validation_accuracy, epoch, network.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience.is_some_and(|p| since_best >= p) {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }

    let (validation_accuracy, best_epoch, network) = best.expect("at least one epoch");
    let train_accuracy = accuracy(&network, &inputs, &labels, &train_idx)?;
    let mut per_class = [0.0; NUM_CLASSES];
    for class in PatternClass::ALL {
        let idx: Vec<usize> = val_idx.iter().copied().filter(|&i| labels[i] == class.index()).collect();
        per_class[class.index()] = accuracy(&network, &inputs, &labels, &idx)?;
    }
    let metadata = TrainingMetadata {
        window,
        seed: config.seed,
        epochs_run: history.len(),
        best_epoch,
        corpus_hash: corpus_hash(corpus),
        train_accuracy,
        validation_accuracy,
        per_class_validation_accuracy: per_class,
        history: history.clone(),
    };
    Ok((ClassifierModel { network, metadata }, history))
}

fn accuracy(net: &Network, inputs: &[Tensor], labels: &[usize], idx: &[usize]) -> Result<f64, NeuralError> {
    if idx.is_empty() {
        return Ok(0.0);
    }
    let hits = idx
        .par_iter()
        .map(|&i| net.predict(&inputs[i]).map(|y| usize::from(y.argmax() == labels[i])))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / idx.len() as f64)
}

impl ClassifierModel {
    pub fn window(&self) -> usize {
        self.metadata.window
    }

    pub fn metadata(&self) -> &TrainingMetadata {
        &self.metadata
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn predict_distribution(&self, x: &GafTensor) -> Result<PatternDistribution, ClassifierError> {
        if x.size() != self.window() {
            return Err(ClassifierError::InputSize {
                expected: self.window(),
                got: x.size(),
            });
        }
        let logits = self.network.predict(&gaf_input(x))?;
        Ok(PatternDistribution::from_logits(logits.data()))
    }

    /// Fraction of `samples` whose argmax matches the label.
    pub fn evaluate(&self, samples: &[(GafTensor, PatternClass)]) -> Result<f64, ClassifierError> {
        let hits = samples
            .par_iter()
            .map(|(x, c)| self.predict_distribution(x).map(|d| usize::from(d.argmax() == *c)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(hits.iter().sum::<usize>() as f64 / samples.len().max(1) as f64)
    }

    /// Network checkpoint at `path`, metadata sidecar at `path.meta`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClassifierError> {
        let path = path.as_ref();
        save_checkpoint(path, &self.network)?;
        let sidecar = sidecar_path(path);
        std::fs::write(&sidecar, self.metadata_text()).map_err(|e| ClassifierError::Metadata {
            path: sidecar.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClassifierError> {
        let path = path.as_ref();
        let network: Network = load_checkpoint(path)?;
        let sidecar = sidecar_path(path);
        let meta_err = |detail: String| ClassifierError::Metadata {
            path: sidecar.display().to_string(),
            detail,
        };
        let cfg = KeyValueConfig::load(&sidecar)?;
        let need = |key: &str| cfg.get(key).ok_or_else(|| meta_err(format!("missing `{key}`")));
        let window: usize = cfg.parse("window")?.ok_or_else(|| meta_err("missing `window`".into()))?;
        if network.input_shape() != [CHANNELS, window, window] || network.output_shape()? != [NUM_CLASSES] {
            return Err(meta_err(format!(
                "network shape {:?} does not match window {window}",
                network.input_shape()
            )));
        }
        let mut per_class = [0.0; NUM_CLASSES];
        for class in PatternClass::ALL {
            per_class[class.index()] = cfg.parse_or(&format!("val_accuracy.{}", class.name()), 0.0)?;
        }
        let metadata = TrainingMetadata {
            window,
            seed: cfg.parse_or("seed", 0)?,
            epochs_run: cfg.parse_or("epochs_run", 0)?,
            best_epoch: cfg.parse_or("best_epoch", 0)?,
            corpus_hash: need("corpus_hash")?.to_string(),
            train_accuracy: cfg.parse_or("train_accuracy", 0.0)?,
            validation_accuracy: cfg.parse_or("validation_accuracy", 0.0)?,
            per_class_validation_accuracy: per_class,
            history: Vec::new(),
        };
        Ok(Self { network, metadata })
    }

    pub fn metadata_text(&self) -> String {
        let m = &self.metadata;
        let mut cfg = KeyValueConfig::new();
        cfg.set("window", m.window.to_string());
        cfg.set("seed", m.seed.to_string());
        cfg.set("epochs_run", m.epochs_run.to_string());
        cfg.set("best_epoch", m.best_epoch.to_string());
        cfg.set("corpus_hash", m.corpus_hash.clone());
        cfg.set("train_accuracy", m.train_accuracy.to_string());
        cfg.set("validation_accuracy", m.validation_accuracy.to_string());
        for class in PatternClass::ALL {
            cfg.set(
                format!("val_accuracy.{}", class.name()),
                m.per_class_validation_accuracy[class.index()].to_string(),
            );
        }
        cfg.to_string()
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta");
    PathBuf::from(s)
}
