//! Clipped-surrogate PPO over the portfolio environment: Dirichlet rollouts
//! with a carried memory trajectory, GAE advantages, minibatch updates with
//! Adam and global gradient-norm clipping.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::FeaturePanel;
use crate::migt_policy::{forward_graph, MemoryTensor, PolicyConfig, PolicyError, PolicyParameters};
use crate::portfolio_env::{EnvConfig, EnvError, PortfolioEnv, StateTensor};
use crate::tensor::{softplus, Graph, Tensor, TensorError, Var};

/// Smallest action component kept after sampling, so log-densities stay finite.
const MIN_ACTION: f64 = 1e-12;
/// Below this standard deviation advantages are only centred.
const ADV_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid ppo config: {0}")]
    Config(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite probability ratio at sample {index}")]
    NonFiniteRatio { index: usize },
    #[error("training diverged at update {update}: {reason}")]
    Diverged {
        update: usize,
        reason: String,
        last_good: Box<PolicyParameters>,
        log: TrainingLog,
    },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_eps: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Environment steps collected per update.
    pub rollout_steps: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    /// Scale `κ` in the Dirichlet concentration `softplus(logits)·κ + 1`.
    pub concentration: f64,
    /// Multiplies rewards before advantage estimation; logged rewards stay raw.
    pub reward_scale: f64,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_eps: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 4,
            minibatch_size: 64,
            rollout_steps: 256,
            learning_rate: 3e-4,
            total_steps: 10_000,
            value_coef: 0.5,
            entropy_coef: 0.001,
            max_grad_norm: 0.5,
            concentration: 10.0,
            reward_scale: 100.0,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field: &str, msg: String| Err(TrainError::Config(format!("{field}: {msg}")));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps", format!("must be in (0, 1), got {}", self.clip_eps));
        }
        for (field, v) in [("gamma", self.gamma), ("gae_lambda", self.gae_lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(field, format!("must be in [0, 1], got {v}"));
            }
        }
        for (field, v) in [
            ("epochs", self.epochs),
            ("minibatch_size", self.minibatch_size),
            ("rollout_steps", self.rollout_steps),
        ] {
            if v == 0 {
                return bad(field, "must be >= 1".into());
            }
        }
        for (field, v) in [
            ("learning_rate", self.learning_rate),
            ("max_grad_norm", self.max_grad_norm),
            ("concentration", self.concentration),
            ("reward_scale", self.reward_scale),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(field, format!("must be > 0, got {v}"));
            }
        }
        for (field, v) in [("value_coef", self.value_coef), ("entropy_coef", self.entropy_coef)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, format!("must be >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Dirichlet concentration `softplus(logits)·κ + 1`.
pub fn concentration(logits: &[f64], kappa: f64) -> Vec<f64> {
    logits.iter().map(|&l| softplus(l) * kappa + 1.0).collect()
}

fn concentration_graph(g: &mut Graph, logits: Var, kappa: f64) -> Var {
    let sp = g.softplus(logits);
    let scaled = g.scale(sp, kappa);
    g.add_scalar(scaled, 1.0)
}

/// Dirichlet log-density of `action` under the policy's concentration.
pub fn dirichlet_log_prob(g: &mut Graph, logits: Var, action: &[f64], kappa: f64) -> Result<Var, TensorError> {
    let alpha = concentration_graph(g, logits, kappa);
    let total = g.sum(alpha);
    let norm = g.ln_gamma(total);
    let lg = g.ln_gamma(alpha);
    let lg = g.sum(lg);
    let ln_a = g.constant(Tensor::new(g.shape(logits).to_vec(), action.iter().map(|a| a.ln()).collect())?);
    let am1 = g.add_scalar(alpha, -1.0);
    let kernel = g.mul(am1, ln_a)?;
    let kernel = g.sum(kernel);
    let out = g.sub(norm, lg)?;
    g.add(out, kernel)
}

/// Differential entropy of the policy's Dirichlet.
pub fn dirichlet_entropy(g: &mut Graph, logits: Var, kappa: f64) -> Result<Var, TensorError> {
    let k = g.value(logits).numel() as f64;
    let alpha = concentration_graph(g, logits, kappa);
    let total = g.sum(alpha);
    let lg = g.ln_gamma(alpha);
    let lg = g.sum(lg);
    let lg_total = g.ln_gamma(total);
    let dg_total = g.digamma(total);
    let tk = g.add_scalar(total, -k);
    let middle = g.mul(tk, dg_total)?;
    let am1 = g.add_scalar(alpha, -1.0);
    let dg = g.digamma(alpha);
    let last = g.mul(am1, dg)?;
    let last = g.sum(last);
    let out = g.sub(lg, lg_total)?;
    let out = g.add(out, middle)?;
    g.sub(out, last)
}

/// Draws an allocation from `Dir(alpha)`; components are floored at a tiny
/// positive value and renormalized.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("concentration > 0").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    for d in &mut draws {
        *d = (*d / total).max(MIN_ACTION);
    }
    let total: f64 = draws.iter().sum();
    draws.iter().map(|d| d / total).collect()
}

/// Greedy evaluation action: `softmax(logits)`.
pub fn greedy_action(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// One element of the clipped surrogate: `min(rÂ, clip(r, 1−ε, 1+ε)Â)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Steps collected under a fixed behavior policy.
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub states: Vec<Tensor>,
    /// Memory trajectory seen by each step's forward pass.
    pub memories: Vec<MemoryTensor>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the state after the last step; unused when that step ended an episode.
    pub bootstrap_value: f64,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub normalized_advantages: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Environment plus the observation and memory carried between rollouts.
#[derive(Clone, Debug)]
pub struct RolloutWorker {
    env: PortfolioEnv,
    state: StateTensor,
    memory: MemoryTensor,
    episode_return: f64,
    finished_returns: Vec<f64>,
}

impl RolloutWorker {
    pub fn new(panel: Arc<FeaturePanel>, env_config: EnvConfig, policy: &PolicyConfig) -> Result<Self, TrainError> {
        let (env, state) = PortfolioEnv::reset(panel, env_config)?;
        Ok(RolloutWorker {
            env,
            state,
            memory: empty_memory(policy),
            episode_return: 0.0,
            finished_returns: Vec::new(),
        })
    }

    pub fn env(&self) -> &PortfolioEnv {
        &self.env
    }

    /// Returns of episodes completed since the last call.
    pub fn take_finished_returns(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.finished_returns)
    }

    fn restart(&mut self, policy: &PolicyConfig) -> Result<(), TrainError> {
        let (env, state) = PortfolioEnv::reset(self.env.panel().clone(), self.env.config().clone())?;
        self.env = env;
        self.state = state;
        self.memory = empty_memory(policy);
        self.finished_returns.push(self.episode_return);
        self.episode_return = 0.0;
        Ok(())
    }
}

pub fn empty_memory(policy: &PolicyConfig) -> MemoryTensor {
    MemoryTensor::new(policy.attention.memory_len, policy.attention.d_model)
}

/// Logits, value and first-row embedding for one observation.
struct Evaluation {
    logits: Vec<f64>,
    value: f64,
    oldest_embedding: Vec<f64>,
}

fn evaluate(
    params: &PolicyParameters,
    policy: &PolicyConfig,
    state: &Tensor,
    memory: &MemoryTensor,
) -> Result<(Graph, Var, Evaluation), TensorError> {
    let mut g = Graph::new();
    let p = params.bind_constant(&mut g);
    let out = forward_graph(&mut g, &p, policy, state, memory)?;
    let d = policy.attention.d_model;
    let eval = Evaluation {
        logits: g.value(out.logits).data().to_vec(),
        value: g.value(out.value).item(),
        oldest_embedding: g.value(out.embeddings).data()[..d].to_vec(),
    };
    Ok((g, out.logits, eval))
}

/// Memory for the next step: the row leaving the window is appended.
pub fn advance_memory(memory: &MemoryTensor, oldest_embedding: &[f64]) -> MemoryTensor {
    memory.extended(oldest_embedding)
}

/// Runs the policy greedily for one observation and returns the action and
/// the memory for the next step.
pub fn greedy_step(
    params: &PolicyParameters,
    policy: &PolicyConfig,
    state: &StateTensor,
    memory: &MemoryTensor,
) -> Result<(Vec<f64>, MemoryTensor), TensorError> {
    let (_, _, eval) = evaluate(params, policy, &state.to_tensor(), memory)?;
    Ok((greedy_action(&eval.logits), advance_memory(memory, &eval.oldest_embedding)))
}

/// Samples `steps` transitions, restarting the episode whenever it ends.
pub fn collect_rollout(
    worker: &mut RolloutWorker,
    params: &PolicyParameters,
    policy: &PolicyConfig,
    kappa: f64,
    steps: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch, TrainError> {
    let mut batch = RolloutBatch::default();
    for _ in 0..steps {
        let state = worker.state.to_tensor();
        let (mut g, logits, eval) = evaluate(params, policy, &state, &worker.memory)?;
        let action = sample_dirichlet(&concentration(&eval.logits, kappa), rng);
        let lp = dirichlet_log_prob(&mut g, logits, &action, kappa)?;
        let lp = g.value(lp).item();
        let outcome = worker.env.step(&action)?;
        worker.episode_return += outcome.reward;
        batch.states.push(state);
        batch.memories.push(worker.memory.clone());
        batch.actions.push(action);
        batch.log_probs.push(lp);
        batch.rewards.push(outcome.reward);
        batch.values.push(eval.value);
        batch.dones.push(outcome.done);
        if outcome.done {
            worker.restart(policy)?;
        } else {
            worker.memory = advance_memory(&worker.memory, &eval.oldest_embedding);
            worker.state = outcome.state;
        }
    }
    let last_done = batch.dones.last().copied().unwrap_or(true);
    batch.bootstrap_value = if last_done {
        0.0
    } else {
        evaluate(params, policy, &worker.state.to_tensor(), &worker.memory)?.2.value
    };
    Ok(batch)
}

/// Fills GAE advantages, return targets and normalized advantages.
///
/// Normalized advantages are always centred; they are divided by the batch
/// standard deviation only when it is at least `1e-8`.
pub fn compute_advantages(batch: &mut RolloutBatch, gamma: f64, lambda: f64) {
    let n = batch.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let live = if batch.dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { batch.values[t + 1] } else { batch.bootstrap_value };
        let delta = batch.rewards[t] + gamma * next_value * live - batch.values[t];
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
    }
    batch.returns = adv.iter().zip(&batch.values).map(|(a, v)| a + v).collect();
    batch.normalized_advantages = normalize(&adv);
    batch.advantages = adv;
}

fn normalize(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let std = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = if std >= ADV_STD_FLOOR { std } else { 1.0 };
    x.iter().map(|v| (v - mean) / scale).collect()
}

/// Graph handles of the PPO objective over one minibatch.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// `−L^CLIP + c_v·MSE − c_e·entropy`.
    pub total: Var,
    /// Mean clipped surrogate `L^CLIP`.
    pub surrogate: Var,
    pub value_loss: Var,
    pub entropy: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Fraction of samples with `|r − 1| > ε`.
    pub clip_fraction: f64,
    /// Mean of `log π_old − log π_new`.
    pub approx_kl: f64,
}

/// Per-sample clipped surrogate on the graph.
pub fn surrogate_term(g: &mut Graph, new_log_prob: Var, old_log_prob: f64, advantage: f64, eps: f64) -> Var {
    let diff = g.add_scalar(new_log_prob, -old_log_prob);
    let ratio = g.exp(diff);
    let unclipped = g.scale(ratio, advantage);
    let clipped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = g.scale(clipped, advantage);
    g.minimum(unclipped, clipped).expect("equal shapes")
}

/// Builds the PPO loss over `indices` of `batch` with parameters bound on `g`.
pub fn ppo_loss(
    g: &mut Graph,
    params: &crate::migt_policy::Bound,
    policy: &PolicyConfig,
    batch: &RolloutBatch,
    indices: &[usize],
    config: &PpoConfig,
) -> Result<(LossTerms, LossStats), TrainError> {
    if indices.is_empty() {
        return Err(TrainError::Config("empty minibatch".into()));
    }
    let eps = config.clip_eps;
    let mut surr_sum: Option<Var> = None;
    let mut value_sum: Option<Var> = None;
    let mut entropy_sum: Option<Var> = None;
    let (mut clipped, mut kl) = (0usize, 0.0);
    let acc = |g: &mut Graph, slot: &mut Option<Var>, v: Var| -> Result<(), TensorError> {
        *slot = Some(match *slot {
            Some(s) => g.add(s, v)?,
            None => v,
        });
        Ok(())
    };
    for &i in indices {
        let out = forward_graph(g, params, policy, &batch.states[i], &batch.memories[i])?;
        let lp = dirichlet_log_prob(g, out.logits, &batch.actions[i], config.concentration)?;
        let new_lp = g.value(lp).item();
        let ratio = (new_lp - batch.log_probs[i]).exp();
        if !ratio.is_finite() {
            return Err(TrainError::NonFiniteRatio { index: i });
        }
        if (ratio - 1.0).abs() > eps {
            clipped += 1;
        }
        kl += batch.log_probs[i] - new_lp;
        let s = surrogate_term(g, lp, batch.log_probs[i], batch.normalized_advantages[i], eps);
        acc(g, &mut surr_sum, s)?;
        let v = g.sum(out.value);
        let err = g.add_scalar(v, -batch.returns[i]);
        let sq = g.square(err);
        acc(g, &mut value_sum, sq)?;
        let h = dirichlet_entropy(g, out.logits, config.concentration)?;
        acc(g, &mut entropy_sum, h)?;
    }
    let m = indices.len() as f64;
    let surrogate = g.scale(surr_sum.expect("non-empty"), 1.0 / m);
    let value_loss = g.scale(value_sum.expect("non-empty"), 1.0 / m);
    let entropy = g.scale(entropy_sum.expect("non-empty"), 1.0 / m);
    let neg_surr = g.neg(surrogate);
    let vl = g.scale(value_loss, config.value_coef);
    let ent = g.scale(entropy, -config.entropy_coef);
    let total = g.add(neg_surr, vl)?;
    let total = g.add(total, ent)?;
    let stats = LossStats {
        loss: g.value(total).item(),
        surrogate: g.value(surrogate).item(),
        value_loss: g.value(value_loss).item(),
        entropy: g.value(entropy).item(),
        clip_fraction: clipped as f64 / m,
        approx_kl: kl / m,
    };
    Ok((
        LossTerms {
            total,
            surrogate,
            value_loss,
            entropy,
        },
        stats,
    ))
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &PolicyParameters, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.entries().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut PolicyParameters, grads: &[Tensor]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, (t, grad)) in params.tensors_mut().zip(grads).enumerate() {
            for (i, (x, g)) in t.data_mut().iter_mut().zip(grad.data()).enumerate() {
                let m = &mut self.m[k][i];
                let v = &mut self.v[k][i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.iter_mut() {
            for g in t.data_mut() {
                *g *= k;
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingLogRow {
    pub update: usize,
    pub steps: usize,
    pub mean_reward: f64,
    pub loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<TrainingLogRow>,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("update,steps,mean_reward,loss,clip_fraction,approx_kl\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.update, r.steps, r.mean_reward, r.loss, r.clip_fraction, r.approx_kl
            ));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let io = |source| TrainError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_csv().as_bytes()).map_err(io)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: PolicyParameters,
    pub log: TrainingLog,
}

/// Training progress handed to observers after every update.
pub struct UpdateProgress<'a> {
    pub update: usize,
    pub steps: usize,
    pub params: &'a PolicyParameters,
}

/// Trains from a fresh initialization seeded by `ppo.seed`.
pub fn train(
    panel: Arc<FeaturePanel>,
    env_config: &EnvConfig,
    policy: &PolicyConfig,
    ppo: &PpoConfig,
) -> Result<TrainOutcome, TrainError> {
    let init = PolicyParameters::init(policy, ppo.seed)?;
    train_from(panel, env_config, policy, ppo, init, |_| {})
}

/// Trains from `init`, calling `observe` after each update.
pub fn train_from(
    panel: Arc<FeaturePanel>,
    env_config: &EnvConfig,
    policy: &PolicyConfig,
    ppo: &PpoConfig,
    init: PolicyParameters,
    mut observe: impl FnMut(&UpdateProgress),
) -> Result<TrainOutcome, TrainError> {
    ppo.validate()?;
    policy.validate()?;
    init.check_layout(policy)?;
    let mut params = init;
    let mut log = TrainingLog::default();
    if ppo.total_steps == 0 {
        return Ok(TrainOutcome { params, log });
    }
    let mut worker = RolloutWorker::new(panel, env_config.clone(), policy)?;
    if worker.env().n_assets() + 1 != policy.action_dim() {
        return Err(PolicyError::Mismatch(format!(
            "panel has {} assets, policy expects {}",
            worker.env().n_assets(),
            policy.n_assets
        ))
        .into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(ppo.seed ^ 0x5050_4f5f_7472_6169);
    let mut adam = Adam::new(&params, ppo.learning_rate);
    let mut steps = 0;
    let mut update = 0;
    while steps < ppo.total_steps {
        update += 1;
        let n = ppo.rollout_steps.min(ppo.total_steps - steps);
        let diverged = |reason: String, last_good: &PolicyParameters, log: &TrainingLog| TrainError::Diverged {
            update,
            reason,
            last_good: Box::new(last_good.clone()),
            log: log.clone(),
        };
        let mut batch = match collect_rollout(&mut worker, &params, policy, ppo.concentration, n, &mut rng) {
            Ok(b) => b,
            Err(TrainError::Tensor(e)) => return Err(diverged(e.to_string(), &params, &log)),
            Err(e) => return Err(e),
        };
        steps += n;
        let raw_mean = batch.rewards.iter().sum::<f64>() / batch.len() as f64;
        batch.rewards.iter_mut().for_each(|r| *r *= ppo.reward_scale);
        compute_advantages(&mut batch, ppo.gamma, ppo.gae_lambda);
        let last_good = params.clone();
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut totals = LossStats::default();
        let mut minibatches = 0;
        for _ in 0..ppo.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(ppo.minibatch_size) {
                let mut g = Graph::new();
                let bound = params.bind(&mut g);
                let (terms, stats) = match ppo_loss(&mut g, &bound, policy, &batch, chunk, ppo) {
                    Ok(r) => r,
                    Err(e @ (TrainError::NonFiniteRatio { .. } | TrainError::Tensor(_))) => {
                        return Err(diverged(e.to_string(), &last_good, &log))
                    }
                    Err(e) => return Err(e),
                };
                if !stats.loss.is_finite() {
                    return Err(diverged("non-finite loss".into(), &last_good, &log));
                }
                let grads = g.backward(terms.total)?;
                let mut grads: Vec<Tensor> = bound
                    .vars()
                    .iter()
                    .zip(params.entries())
                    .map(|(v, (_, t))| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                    .collect();
                clip_grad_norm(&mut grads, ppo.max_grad_norm);
                adam.step(&mut params, &grads);
                if !params.is_finite() {
                    return Err(diverged("non-finite parameters".into(), &last_good, &log));
                }
                totals.loss += stats.loss;
                totals.clip_fraction += stats.clip_fraction;
                totals.approx_kl += stats.approx_kl;
                minibatches += 1;
            }
        }
        let k = minibatches as f64;
        log.rows.push(TrainingLogRow {
            update,
            steps,
            mean_reward: raw_mean,
            loss: totals.loss / k,
            clip_fraction: totals.clip_fraction / k,
            approx_kl: totals.approx_kl / k,
        });
        observe(&UpdateProgress {
            update,
            steps,
            params: &params,
        });
    }
    Ok(TrainOutcome { params, log })
}
