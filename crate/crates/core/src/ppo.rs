//! Proximal policy optimization with a clipped surrogate, a value baseline
//! and an entropy bonus.
//!
//! Rollouts sample from the frozen parameters `theta_old`; every `U`
//! recorded transitions the current parameters `theta` take `K` full-batch
//! gradient steps on
//!
//! ```text
//! L = mean(-min(q A, clip(q, 1-C, 1+C) A)) + c1 mean((V - R)^2) - c2 mean(H)
//! ```
//!
//! with `q = exp(log pi_theta(a|s) - log pi_old(a|s))` and `A = R - V(s)`
//! held constant inside the policy term. Afterwards `theta_old <- theta` and
//! the buffer is cleared.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, KeyValueConfig};
use crate::neural::{
    clip_grad_norm, log_softmax, softmax, Adam, Cache, LayerSpec, Network, NeuralError, Tensor, DEFAULT_MAX_GRAD_NORM,
};
use crate::trading_env::{Action, EnvError, TradingEnv};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid ppo config: {0}")]
    InvalidConfig(String),
    #[error("non-finite {component} in loss")]
    NonFinite { component: &'static str },
    #[error("update diverged at epoch {epoch}; last finite statistics: {last:?}")]
    Diverged { epoch: usize, last: Option<LossBreakdown> },
    #[error("buffer holds {len} transitions, update expects {expected}")]
    BufferLength { len: usize, expected: usize },
    #[error("input vectors are misaligned: {0}")]
    Misaligned(String),
    #[error("log csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    /// Discount in (0, 1].
    pub gamma: f64,
    /// Ratio clip C.
    pub clip: f64,
    /// Gradient steps K per update.
    pub epochs: usize,
    /// Transitions U collected between updates.
    pub update_timestep: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Standardize returns per update batch before computing advantages.
    pub normalize_returns: bool,
    pub max_grad_norm: f64,
    pub hidden: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip: 0.2,
            epochs: 4,
            update_timestep: 2048,
            value_coef: 0.5,
            entropy_coef: 0.01,
            learning_rate: 3e-4,
            seed: 0,
            normalize_returns: true,
            max_grad_norm: DEFAULT_MAX_GRAD_NORM,
            hidden: 64,
        }
    }
}

impl PpoConfig {
    /// Only the literal loss: no return normalization.
    pub fn strict() -> Self {
        Self {
            normalize_returns: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::InvalidConfig(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) && self.gamma != 0.0 {
            return bad("gamma must lie in (0, 1]");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.update_timestep == 0 {
            return bad("update_timestep must be at least 1");
        }
        if self.hidden == 0 {
            return bad("hidden must be at least 1");
        }
        Ok(())
    }

    /// Overrides from `gamma`, `clip`, `ppo_epochs`, `update_timestep`,
    /// `value_coef`, `entropy_coef`, `lr`, `seed`, `normalize_returns`, `hidden`.
    pub fn from_config(cfg: &KeyValueConfig) -> Result<Self, ConfigError> {
        let d = Self::default();
        Ok(Self {
            gamma: cfg.parse_or("gamma", d.gamma)?,
            clip: cfg.parse_or("clip", d.clip)?,
            epochs: cfg.parse_or("ppo_epochs", d.epochs)?,
            update_timestep: cfg.parse_or("update_timestep", d.update_timestep)?,
            value_coef: cfg.parse_or("value_coef", d.value_coef)?,
            entropy_coef: cfg.parse_or("entropy_coef", d.entropy_coef)?,
            learning_rate: cfg.parse_or("lr", d.learning_rate)?,
            seed: cfg.parse_or("seed", d.seed)?,
            normalize_returns: cfg.parse_or("normalize_returns", d.normalize_returns)?,
            max_grad_norm: d.max_grad_norm,
            hidden: cfg.parse_or("hidden", d.hidden)?,
        })
    }

    pub fn to_config(&self) -> KeyValueConfig {
        let mut cfg = KeyValueConfig::new();
        cfg.set("gamma", self.gamma.to_string());
        cfg.set("clip", self.clip.to_string());
        cfg.set("ppo_epochs", self.epochs.to_string());
        cfg.set("update_timestep", self.update_timestep.to_string());
        cfg.set("value_coef", self.value_coef.to_string());
        cfg.set("entropy_coef", self.entropy_coef.to_string());
        cfg.set("lr", self.learning_rate.to_string());
        cfg.set("seed", self.seed.to_string());
        cfg.set("normalize_returns", self.normalize_returns.to_string());
        cfg.set("hidden", self.hidden.to_string());
        cfg
    }
}

/// Shared trunk (two rectified dense layers) with a 3-logit action head and
/// a scalar value head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    trunk: Network,
    policy_head: Network,
    value_head: Network,
}

/// Caches of one forward pass, needed for [`ActorCritic::backward`].
pub struct ActorCriticCache {
    trunk: Cache,
    policy: Cache,
    value: Cache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorCriticGradients {
    pub trunk: Vec<Tensor>,
    pub policy_head: Vec<Tensor>,
    pub value_head: Vec<Tensor>,
}

impl ActorCriticGradients {
    fn into_flat(self) -> Vec<Tensor> {
        self.trunk.into_iter().chain(self.policy_head).chain(self.value_head).collect()
    }
}

impl ActorCritic {
    pub fn new<R: Rng + ?Sized>(observation_size: usize, hidden: usize, rng: &mut R) -> Result<Self, NeuralError> {
        let trunk = Network::new(
            &[observation_size],
            &[
                LayerSpec::Dense { units: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { units: hidden },
                LayerSpec::Relu,
            ],
            rng,
        )?;
        let mut policy_head = Network::new(&[hidden], &[LayerSpec::Dense { units: Action::COUNT }], rng)?;
        let value_head = Network::new(&[hidden], &[LayerSpec::Dense { units: 1 }], rng)?;
        // start near the uniform policy
        for p in policy_head.params_mut() {
            p.scale(0.01);
        }
        Ok(Self {
            trunk,
            policy_head,
            value_head,
        })
    }

    pub fn observation_size(&self) -> usize {
        self.trunk.input_shape()[0]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = self.trunk.params();
        p.extend(self.policy_head.params());
        p.extend(self.value_head.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.trunk.params_mut();
        p.extend(self.policy_head.params_mut());
        p.extend(self.value_head.params_mut());
        p
    }

    pub fn policy_head_params(&self) -> Vec<&Tensor> {
        self.policy_head.params()
    }

    pub fn copy_params_from(&mut self, other: &ActorCritic) -> Result<(), NeuralError> {
        self.trunk.copy_params_from(&other.trunk)?;
        self.policy_head.copy_params_from(&other.policy_head)?;
        self.value_head.copy_params_from(&other.value_head)
    }

    /// Action logits and state value.
    pub fn predict(&self, observation: &[f64]) -> Result<(Vec<f64>, f64), NeuralError> {
        let h = self.trunk.predict(&Tensor::vector(observation.to_vec()))?;
        let logits = self.policy_head.predict(&h)?.into_data();
        let value = self.value_head.predict(&h)?.data()[0];
        Ok((logits, value))
    }

    pub fn forward(&self, observation: &[f64]) -> Result<(Vec<f64>, f64, ActorCriticCache), NeuralError> {
        let (h, trunk) = self.trunk.forward(&Tensor::vector(observation.to_vec()))?;
        let (logits, policy) = self.policy_head.forward(&h)?;
        let (value, value_cache) = self.value_head.forward(&h)?;
        Ok((
            logits.into_data(),
            value.data()[0],
            ActorCriticCache {
                trunk,
                policy,
                value: value_cache,
            },
        ))
    }

    /// Gradients of a loss with the given derivatives w.r.t. the logits and value.
    pub fn backward(
        &self,
        cache: &ActorCriticCache,
        dlogits: &[f64],
        dvalue: f64,
    ) -> Result<ActorCriticGradients, NeuralError> {
        let gp = self.policy_head.backward(&cache.policy, &Tensor::vector(dlogits.to_vec()))?;
        let gv = self.value_head.backward(&cache.value, &Tensor::vector(vec![dvalue]))?;
        let mut dh = gp.input;
        dh.add_assign(&gv.input);
        let gt = self.trunk.backward(&cache.trunk, &dh)?;
        Ok(ActorCriticGradients {
            trunk: gt.params,
            policy_head: gp.params,
            value_head: gv.params,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    /// `log pi(action | state; theta_old)` at sampling time.
    pub log_prob_old: f64,
    pub reward: f64,
}

/// Transitions in arrival order with episode-end markers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryBuffer {
    transitions: Vec<Transition>,
    episode_end: Vec<bool>,
}

impl TrajectoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, transition: Transition, episode_end: bool) {
        debug_assert!(transition.log_prob_old <= 0.0);
        self.transitions.push(transition);
        self.episode_end.push(episode_end);
    }

    /// Marks the latest transition as the last of its episode.
    pub fn end_episode(&mut self) {
        if let Some(last) = self.episode_end.last_mut() {
            *last = true;
        }
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn is_episode_end(&self, i: usize) -> bool {
        self.episode_end[i]
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
        self.episode_end.clear();
    }
}

/// `R_t = r_t + gamma R_{t+1}`, restarting at every episode end. The buffer's
/// final transition is treated as an episode end.
pub fn discounted_returns(buffer: &TrajectoryBuffer, gamma: f64) -> Vec<f64> {
    let n = buffer.len();
    let mut out = vec![0.0; n];
    let mut running = 0.0;
    for i in (0..n).rev() {
        if buffer.is_episode_end(i) {
            running = 0.0;
        }
        running = buffer.transitions[i].reward + gamma * running;
        out[i] = running;
    }
    out
}

/// Per-transition log-probability, value and policy entropy under one
/// parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub entropies: Vec<f64>,
}

pub fn entropy_of(probabilities: &[f64]) -> f64 {
    -probabilities
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

pub fn evaluate(model: &ActorCritic, states: &[Vec<f64>], actions: &[Action]) -> Result<Evaluation, PpoError> {
    if states.len() != actions.len() {
        return Err(PpoError::Misaligned(format!("{} states, {} actions", states.len(), actions.len())));
    }
    let mut eval = Evaluation {
        log_probs: Vec::with_capacity(states.len()),
        values: Vec::with_capacity(states.len()),
        entropies: Vec::with_capacity(states.len()),
    };
    for (s, a) in states.iter().zip(actions) {
        let (logits, value) = model.predict(s)?;
        let logp = log_softmax(&logits);
        eval.log_probs.push(logp[a.index()]);
        eval.values.push(value);
        eval.entropies.push(entropy_of(&softmax(&logits)));
    }
    Ok(eval)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `mean(-min(surr1, surr2))`
    pub policy: f64,
    /// `mean((V - R)^2)`, before the coefficient
    pub value: f64,
    /// `mean(H)`, before the coefficient
    pub entropy: f64,
}

/// The clipped-surrogate loss with `A = R - V`.
pub fn ppo_loss(
    logp_new: &[f64],
    logp_old: &[f64],
    returns: &[f64],
    values: &[f64],
    entropy: &[f64],
    config: &PpoConfig,
) -> Result<LossBreakdown, PpoError> {
    let advantages: Vec<f64> = returns.iter().zip(values).map(|(r, v)| r - v).collect();
    ppo_loss_with_advantages(logp_new, logp_old, &advantages, returns, values, entropy, config)
}

/// Same loss with explicitly supplied advantages.
pub fn ppo_loss_with_advantages(
    logp_new: &[f64],
    logp_old: &[f64],
    advantages: &[f64],
    returns: &[f64],
    values: &[f64],
    entropy: &[f64],
    config: &PpoConfig,
) -> Result<LossBreakdown, PpoError> {
    let n = logp_new.len();
    if [logp_old.len(), advantages.len(), returns.len(), values.len(), entropy.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(PpoError::Misaligned("loss inputs differ in length".into()));
    }
    if n == 0 {
        return Err(PpoError::Misaligned("empty batch".into()));
    }
    let mut policy = 0.0;
    for i in 0..n {
        let q = (logp_new[i] - logp_old[i]).exp();
        let surr1 = q * advantages[i];
        let surr2 = q.clamp(1.0 - config.clip, 1.0 + config.clip) * advantages[i];
        policy -= surr1.min(surr2);
    }
    let inv = 1.0 / n as f64;
    let policy = policy * inv;
    let value = values.iter().zip(returns).map(|(v, r)| (v - r).powi(2)).sum::<f64>() * inv;
    let entropy = entropy.iter().sum::<f64>() * inv;
    for (component, v) in [("policy term", policy), ("value term", value), ("entropy term", entropy)] {
        if !v.is_finite() {
            return Err(PpoError::NonFinite { component });
        }
    }
    Ok(LossBreakdown {
        total: policy + config.value_coef * value - config.entropy_coef * entropy,
        policy,
        value,
        entropy,
    })
}

/// Loss and its exact gradient with advantages frozen at `advantages`.
pub fn loss_and_gradients(
    model: &ActorCritic,
    states: &[Vec<f64>],
    actions: &[Action],
    logp_old: &[f64],
    returns: &[f64],
    advantages: Option<&[f64]>,
    config: &PpoConfig,
) -> Result<(LossBreakdown, Vec<Tensor>), PpoError> {
    let n = states.len();
    if actions.len() != n || logp_old.len() != n || returns.len() != n || advantages.is_some_and(|a| a.len() != n) {
        return Err(PpoError::Misaligned("batch vectors differ in length".into()));
    }
    let inv = 1.0 / n as f64;
    let mut grads: Option<Vec<Tensor>> = None;
    let (mut logp_new, mut values, mut entropies, mut adv) =
        (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (logits, value, cache) = model.forward(&states[i])?;
        let logp = log_softmax(&logits);
        let p = softmax(&logits);
        let h = entropy_of(&p);
        let a = actions[i].index();
        let advantage = advantages.map_or(returns[i] - value, |adv| adv[i]);
        let q = (logp[a] - logp_old[i]).exp();
        let surr1 = q * advantage;
        let surr2 = q.clamp(1.0 - config.clip, 1.0 + config.clip) * advantage;
        // d(-min)/d(log pi_a): the unclipped branch carries q*A, the clipped one is constant
        let dpolicy_dlogp = if surr1 <= surr2 { -q * advantage } else { 0.0 };
        let dlogits: Vec<f64> = (0..Action::COUNT)
            .map(|j| {
                let indicator = if j == a { 1.0 } else { 0.0 };
                let policy = dpolicy_dlogp * (indicator - p[j]);
                // d(-c2 H)/dz_j = c2 p_j (log p_j + H)
                let ent = config.entropy_coef * p[j] * (logp[j] + h);
                inv * (policy + ent)
            })
            .collect();
        let dvalue = inv * 2.0 * config.value_coef * (value - returns[i]);
        let g = model.backward(&cache, &dlogits, dvalue)?.into_flat();
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
        }
        logp_new.push(logp[a]);
        values.push(value);
        entropies.push(h);
        adv.push(advantage);
    }
    let loss = ppo_loss_with_advantages(&logp_new, logp_old, &adv, returns, &values, &entropies, config)?;
    Ok((loss, grads.unwrap_or_default()))
}

/// Anything with the reset/step contract of the trading environment.
pub trait Environment {
    fn observation_size(&self) -> usize;
    /// Steps in a full episode.
    fn max_steps(&self) -> usize;
    fn reset(&mut self) -> Result<Vec<f64>, EnvError>;
    /// Next observation, reward and done flag.
    fn step(&mut self, action: Action) -> Result<(Vec<f64>, f64, bool), EnvError>;
}

impl Environment for TradingEnv {
    fn observation_size(&self) -> usize {
        TradingEnv::observation_size(self)
    }

    fn max_steps(&self) -> usize {
        TradingEnv::max_steps(self)
    }

    fn reset(&mut self) -> Result<Vec<f64>, EnvError> {
        Ok(TradingEnv::reset(self).observation)
    }

    fn step(&mut self, action: Action) -> Result<(Vec<f64>, f64, bool), EnvError> {
        let r = TradingEnv::step(self, action)?;
        Ok((r.next_state.observation, r.reward, r.done))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Loss components before each of the K gradient steps.
    pub epochs: Vec<LossBreakdown>,
}

/// Current and rollout parameter sets with their optimizer.
#[derive(Debug, Clone)]
pub struct PpoAgent {
    model: ActorCritic,
    model_old: ActorCritic,
    optimizer: Adam,
    config: PpoConfig,
    rng: ChaCha8Rng,
    buffer: TrajectoryBuffer,
}

impl PpoAgent {
    pub fn new(observation_size: usize, config: PpoConfig) -> Result<Self, PpoError> {
        config.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = ActorCritic::new(observation_size, config.hidden, &mut init_rng)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: ActorCritic, config: PpoConfig) -> Self {
        Self {
            model_old: model.clone(),
            model,
            optimizer: Adam::new(config.learning_rate),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x005E_ED0F_AC71),
            config,
            buffer: TrajectoryBuffer::new(),
        }
    }

    pub fn config(&self) -> &PpoConfig {
        &self.config
    }

    /// Parameters `theta`.
    pub fn model(&self) -> &ActorCritic {
        &self.model
    }

    /// Parameters `theta_old`.
    pub fn model_old(&self) -> &ActorCritic {
        &self.model_old
    }

    pub fn buffer(&self) -> &TrajectoryBuffer {
        &self.buffer
    }

    pub fn buffer_mut(&mut self) -> &mut TrajectoryBuffer {
        &mut self.buffer
    }

    /// Samples from `pi(.|s; theta_old)`; returns the action and its log-probability.
    pub fn act(&mut self, observation: &[f64]) -> Result<(Action, f64), PpoError> {
        let (logits, _) = self.model_old.predict(observation)?;
        let p = softmax(&logits);
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut idx = Action::COUNT - 1;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if u < acc {
                idx = i;
                break;
            }
        }
        let logp = log_softmax(&logits)[idx];
        Ok((Action::ALL[idx], logp))
    }

    /// Most probable action under `theta`.
    pub fn act_greedy(&self, observation: &[f64]) -> Result<Action, PpoError> {
        let (logits, _) = self.model.predict(observation)?;
        Ok(Action::ALL[Tensor::vector(logits).argmax()])
    }

    pub fn action_probabilities(&self, observation: &[f64]) -> Result<Vec<f64>, PpoError> {
        Ok(softmax(&self.model.predict(observation)?.0))
    }

    /// K gradient steps on the buffered trajectory, then `theta_old <- theta`
    /// and the buffer is cleared.
    pub fn update(&mut self) -> Result<UpdateStats, PpoError> {
        if self.buffer.len() != self.config.update_timestep {
            return Err(PpoError::BufferLength {
                len: self.buffer.len(),
                expected: self.config.update_timestep,
            });
        }
        let mut returns = discounted_returns(&self.buffer, self.config.gamma);
        if self.config.normalize_returns {
            standardize(&mut returns);
        }
        let states: Vec<Vec<f64>> = self.buffer.transitions().iter().map(|t| t.state.clone()).collect();
        let actions: Vec<Action> = self.buffer.transitions().iter().map(|t| t.action).collect();
        let logp_old: Vec<f64> = self.buffer.transitions().iter().map(|t| t.log_prob_old).collect();

        let mut stats = UpdateStats { epochs: Vec::new() };
        for epoch in 1..=self.config.epochs {
            let (loss, mut grads) =
                loss_and_gradients(&self.model, &states, &actions, &logp_old, &returns, None, &self.config).map_err(
                    |e| match e {
                        PpoError::NonFinite { .. } => PpoError::Diverged {
                            epoch,
                            last: stats.epochs.last().copied(),
                        },
                        other => other,
                    },
                )?;
            if !loss.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(PpoError::Diverged {
                    epoch,
                    last: stats.epochs.last().copied(),
                });
            }
            clip_grad_norm(&mut grads, self.config.max_grad_norm);
            self.optimizer.step(self.model.params_mut(), &grads)?;
            stats.epochs.push(loss);
        }
        self.model_old.copy_params_from(&self.model)?;
        self.buffer.clear();
        Ok(stats)
    }
}

/// In-place zero-mean, unit-variance rescaling (no-op on a constant vector
/// beyond centering).
pub fn standardize(x: &mut [f64]) {
    if x.is_empty() {
        return;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for v in x.iter_mut() {
        *v = if sd > 1e-12 { (*v - mean) / sd } else { *v - mean };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub steps: usize,
    pub total_reward: f64,
    pub updates: usize,
    /// Components from the last gradient step of the most recent update in
    /// this episode, if any.
    pub loss: Option<LossBreakdown>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub episodes: Vec<EpisodeLog>,
}

impl TrainingLog {
    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.total_reward).collect()
    }

    pub fn updates(&self) -> usize {
        self.episodes.iter().map(|e| e.updates).sum()
    }

    /// `episode,return,policy_loss,value_loss,entropy`; loss columns are empty
    /// for episodes without an update.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), PpoError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["episode", "return", "policy_loss", "value_loss", "entropy"])?;
        for e in &self.episodes {
            let (p, v, h) = e.loss.map_or((String::new(), String::new(), String::new()), |l| {
                (l.policy.to_string(), l.value.to_string(), l.entropy.to_string())
            });
            wtr.write_record([e.episode.to_string(), e.total_reward.to_string(), p, v, h])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Runs `episodes` episodes of at most `max_steps` steps (the environment's
/// full length when `None`), updating every `update_timestep` transitions.
pub fn train<E: Environment>(
    agent: &mut PpoAgent,
    env: &mut E,
    episodes: usize,
    max_steps: Option<usize>,
) -> Result<TrainingLog, PpoError> {
    let steps = max_steps.unwrap_or_else(|| env.max_steps());
    let mut log = TrainingLog::default();
    for episode in 1..=episodes {
        let mut state = env.reset()?;
        let mut entry = EpisodeLog {
            episode,
            steps: 0,
            total_reward: 0.0,
            updates: 0,
            loss: None,
        };
        for _ in 0..steps {
            let (action, log_prob_old) = agent.act(&state)?;
            let (next, reward, done) = env.step(action)?;
            agent.buffer.push(
                Transition {
                    state,
                    action,
                    log_prob_old,
                    reward,
                },
                done,
            );
            entry.steps += 1;
            entry.total_reward += reward;
            state = next;
            if agent.buffer.len() == agent.config.update_timestep {
                let stats = agent.update()?;
                entry.updates += 1;
                entry.loss = stats.epochs.last().copied();
            }
            if done {
                break;
            }
        }
        agent.buffer.end_episode();
        log::debug!("episode {episode}: return {:.6}", entry.total_reward);
        log.episodes.push(entry);
    }
    Ok(log)
}

/// Greedy rollout of `theta` over one full episode; returns the total reward.
pub fn run_greedy<E: Environment>(agent: &PpoAgent, env: &mut E) -> Result<f64, PpoError> {
    let mut state = env.reset()?;
    let mut total = 0.0;
    for _ in 0..env.max_steps() {
        let (next, reward, done) = env.step(agent.act_greedy(&state)?)?;
        total += reward;
        state = next;
        if done {
            break;
        }
    }
    Ok(total)
}

/// Agent parameters plus everything needed to rebuild its environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    pub model: ActorCritic,
    pub config: PpoConfig,
    pub window: usize,
    pub observation_size: usize,
    pub asset: String,
    /// First and last timestamps of the training series.
    pub train_range: (i64, i64),
}

impl AgentCheckpoint {
    /// Parameters at `path`, config and provenance sidecar at `path.meta`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PpoError> {
        let path = path.as_ref();
        crate::neural::save_checkpoint(path, self)?;
        let mut meta = self.config.to_config();
        meta.set("window", self.window.to_string());
        meta.set("observation_size", self.observation_size.to_string());
        meta.set("asset", self.asset.clone());
        meta.set("train_from", self.train_range.0.to_string());
        meta.set("train_to", self.train_range.1.to_string());
        std::fs::write(crate::classifier::sidecar_path(path), meta.to_string())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PpoError> {
        Ok(crate::neural::load_checkpoint(path)?)
    }
}
