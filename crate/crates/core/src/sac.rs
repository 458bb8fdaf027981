//! Soft actor-critic trainer shared by both policies.
//!
//! Off-policy training with twin critics, target networks, a squashed
//! Gaussian actor, and automatic entropy temperature tuning. The planner
//! and the executor use separate trainer instances with no shared state;
//! composition happens only at deployment.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{polyak, Activation, Adam, AdamScalar, DenseNetwork, GaussianPolicy, Gradients};

/// One off-policy experience record. Actions are stored in policy space,
/// i.e. componentwise in (-1, 1) before environment scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub goal: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-capacity FIFO ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay buffer capacity must be positive");
        Self { data: Vec::with_capacity(capacity.min(1 << 20)), capacity, next: 0 }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Append, evicting the oldest transition once at capacity.
    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.data[i]
    }

    /// Uniform sample with replacement; errors when underfilled.
    pub fn sample_indices(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
        if self.data.len() < batch_size {
            return Err(Error::BufferUnderfilled { have: self.data.len(), need: batch_size });
        }
        Ok((0..batch_size).map(|_| rng.random_range(0..self.data.len())).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SacConfig {
    /// Discount factor in [0, 1].
    pub gamma: f64,
    /// Polyak averaging rate in [0, 1].
    pub tau: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Entropy target; `-action_dim` when absent.
    pub entropy_target: Option<f64>,
    pub initial_alpha: f64,
    pub total_steps: u64,
    /// Uniform-random warmup actions before the policy takes over.
    pub start_steps: u64,
    /// One update round every this many environment steps.
    pub update_every: u64,
    pub hidden: Vec<usize>,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.005,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            lr_alpha: 3e-4,
            batch_size: 256,
            buffer_capacity: 100_000,
            entropy_target: None,
            initial_alpha: 0.2,
            total_steps: 200_000,
            start_steps: 1_000,
            update_every: 1,
            hidden: vec![64, 64],
            eval_interval: 5_000,
            checkpoint_interval: 50_000,
            eval_episodes: 10,
            seed: 0,
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidValue(format!("gamma must be in [0,1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidValue(format!("tau must be in [0,1], got {}", self.tau)));
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return Err(Error::InvalidValue("batch_size and buffer_capacity must be positive".into()));
        }
        if !(self.initial_alpha > 0.0) {
            return Err(Error::InvalidValue("initial_alpha must be positive".into()));
        }
        if self.update_every == 0 || self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return Err(Error::InvalidValue(
                "update_every, eval_interval and checkpoint_interval must be positive".into(),
            ));
        }
        if self.hidden.is_empty() {
            return Err(Error::InvalidValue("at least one hidden layer is required".into()));
        }
        Ok(())
    }
}

/// Goal-conditioned environment as seen by the trainer. Actions arrive in
/// policy space (each component in (-1, 1)); implementations scale to their
/// own action box.
pub trait GoalEnv {
    fn state_dim(&self) -> usize;
    fn goal_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, rng: &mut ChaCha8Rng) -> Result<(Vec<f64>, Vec<f64>)>;
    fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool)>;
}

/// Materialized minibatch: observations are `[state || goal]` rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub dones: Array1<f64>,
}

/// Bootstrap targets with the quantities they were computed from.
#[derive(Debug, Clone)]
pub struct CriticTargets {
    pub y: Array1<f64>,
    pub target_q1: Array1<f64>,
    pub target_q2: Array1<f64>,
    pub next_log_prob: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CollectOutcome {
    pub reward: f64,
    pub done: bool,
}

/// One line of the training metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub alpha: f64,
    pub eval: BTreeMap<String, f64>,
}

pub struct SacTrainer {
    pub cfg: SacConfig,
    pub actor: GaussianPolicy,
    pub critics: [DenseNetwork; 2],
    pub targets: [DenseNetwork; 2],
    pub buffer: ReplayBuffer,
    pub log_alpha: f64,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    alpha_opt: AdamScalar,
    entropy_target: f64,
    state_dim: usize,
    goal_dim: usize,
    action_dim: usize,
    current: Option<(Vec<f64>, Vec<f64>)>,
}

impl SacTrainer {
    pub fn new(cfg: SacConfig, state_dim: usize, goal_dim: usize, action_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let obs_dim = state_dim + goal_dim;
        let actor = GaussianPolicy::new(obs_dim, &cfg.hidden, action_dim, &mut rng);
        let critic_dims: Vec<usize> = std::iter::once(obs_dim + action_dim)
            .chain(cfg.hidden.iter().copied())
            .chain(std::iter::once(1))
            .collect();
        let critics = [
            DenseNetwork::new(&critic_dims, Activation::Relu, Activation::Identity, &mut rng),
            DenseNetwork::new(&critic_dims, Activation::Relu, Activation::Identity, &mut rng),
        ];
        let targets = critics.clone();
        let actor_opt = Adam::new(&actor.net, cfg.lr_actor);
        let critic_opts = [Adam::new(&critics[0], cfg.lr_critic), Adam::new(&critics[1], cfg.lr_critic)];
        let alpha_opt = AdamScalar::new(cfg.lr_alpha);
        let entropy_target = cfg.entropy_target.unwrap_or(-(action_dim as f64));
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            log_alpha: cfg.initial_alpha.ln(),
            actor,
            critics,
            targets,
            rng,
            env_steps: 0,
            actor_opt,
            critic_opts,
            alpha_opt,
            entropy_target,
            state_dim,
            goal_dim,
            action_dim,
            current: None,
            cfg,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.state_dim, self.goal_dim, self.action_dim)
    }

    fn obs_row(state: &[f64], goal: &[f64]) -> Array2<f64> {
        let mut row = Vec::with_capacity(state.len() + goal.len());
        row.extend_from_slice(state);
        row.extend_from_slice(goal);
        Array2::from_shape_vec((1, row.len()), row).expect("row shape")
    }

    /// Policy action for a single (state, goal) pair, in (-1, 1)^k.
    pub fn select_action(&mut self, state: &[f64], goal: &[f64], deterministic: bool) -> Result<Vec<f64>> {
        let obs = Self::obs_row(state, goal);
        if deterministic {
            Ok(self.actor.deterministic(obs.view())?.row(0).to_vec())
        } else {
            let sample = self.actor.sample(obs.view(), &mut self.rng)?;
            Ok(sample.action.row(0).to_vec())
        }
    }

    /// Interact with the environment for one step, storing the transition.
    /// Uses uniform random actions for the first `start_steps` steps.
    pub fn collect_step(&mut self, env: &mut dyn GoalEnv) -> Result<CollectOutcome> {
        if self.current.is_none() {
            self.current = Some(env.reset(&mut self.rng)?);
        }
        let (state, goal) = self.current.clone().expect("current episode");
        let action: Vec<f64> = if self.env_steps < self.cfg.start_steps {
            (0..self.action_dim).map(|_| self.rng.random_range(-1.0..1.0)).collect()
        } else {
            self.select_action(&state, &goal, false)?
        };
        let (next_state, reward, done) = env.step(&action)?;
        self.buffer.push(Transition {
            state: state.clone(),
            goal: goal.clone(),
            action,
            reward,
            next_state: next_state.clone(),
            done,
        });
        self.env_steps += 1;
        if done {
            self.current = Some(env.reset(&mut self.rng)?);
        } else {
            self.current = Some((next_state, goal));
        }
        Ok(CollectOutcome { reward, done })
    }

    /// Materialize a uniform minibatch from the buffer.
    pub fn sample_batch(&mut self) -> Result<Batch> {
        let idx = self.buffer.sample_indices(self.cfg.batch_size, &mut self.rng)?;
        let b = idx.len();
        let obs_dim = self.state_dim + self.goal_dim;
        let mut obs = Array2::zeros((b, obs_dim));
        let mut next_obs = Array2::zeros((b, obs_dim));
        let mut actions = Array2::zeros((b, self.action_dim));
        let mut rewards = Array1::zeros(b);
        let mut dones = Array1::zeros(b);
        for (row, &i) in idx.iter().enumerate() {
            let t = self.buffer.get(i);
            for (c, v) in t.state.iter().chain(t.goal.iter()).enumerate() {
                obs[(row, c)] = *v;
            }
            for (c, v) in t.next_state.iter().chain(t.goal.iter()).enumerate() {
                next_obs[(row, c)] = *v;
            }
            for (c, v) in t.action.iter().enumerate() {
                actions[(row, c)] = *v;
            }
            rewards[row] = t.reward;
            dones[row] = t.done as u8 as f64;
        }
        Ok(Batch { obs, actions, rewards, next_obs, dones })
    }

    fn critic_input(obs: &Array2<f64>, actions: &Array2<f64>) -> Array2<f64> {
        ndarray::concatenate(ndarray::Axis(1), &[obs.view(), actions.view()])
            .expect("critic input concat")
    }

    /// Bootstrap targets `y = r + gamma (1 - done) (min(Q'1, Q'2)(s', a') -
    /// alpha log pi(a'|s'))` with `a'` freshly sampled from the actor.
    pub fn compute_targets(&mut self, batch: &Batch) -> Result<CriticTargets> {
        let next_sample = self.actor.sample(batch.next_obs.view(), &mut self.rng)?;
        let input = Self::critic_input(&batch.next_obs, &next_sample.action);
        let q1 = self.targets[0].forward(input.view())?.column(0).to_owned();
        let q2 = self.targets[1].forward(input.view())?.column(0).to_owned();
        let alpha = self.alpha();
        let mut y = Array1::zeros(batch.rewards.len());
        for i in 0..y.len() {
            let min_q = q1[i].min(q2[i]);
            y[i] = batch.rewards[i]
                + self.cfg.gamma
                    * (1.0 - batch.dones[i])
                    * (min_q - alpha * next_sample.log_prob[i]);
        }
        Ok(CriticTargets { y, target_q1: q1, target_q2: q2, next_log_prob: next_sample.log_prob })
    }

    /// One MSE regression step of both critics toward the bootstrap targets.
    /// Returns the summed critic loss.
    pub fn critic_update(&mut self, batch: &Batch) -> Result<f64> {
        let targets = self.compute_targets(batch)?;
        let input = Self::critic_input(&batch.obs, &batch.actions);
        let b = batch.rewards.len() as f64;
        let mut total_loss = 0.0;
        for (critic, opt) in self.critics.iter_mut().zip(self.critic_opts.iter_mut()) {
            let cache = critic.forward_cached(input.view())?;
            let q = cache.output().column(0).to_owned();
            let mut upstream = Array2::zeros((batch.rewards.len(), 1));
            for i in 0..q.len() {
                let err = q[i] - targets.y[i];
                total_loss += err * err / b;
                upstream[(i, 0)] = 2.0 * err / b;
            }
            let grads = critic.backward(&cache, upstream.view());
            opt.step(critic, &grads);
        }
        Ok(total_loss)
    }

    /// One step minimizing `E[alpha log pi(a|s) - min(Q1, Q2)(s, a)]` with
    /// reparameterized actions. Returns the loss at the sampled actions.
    pub fn actor_update(&mut self, batch: &Batch) -> Result<f64> {
        let sample = self.actor.sample(batch.obs.view(), &mut self.rng)?;
        let input = Self::critic_input(&batch.obs, &sample.action);
        let caches =
            [self.critics[0].forward_cached(input.view())?, self.critics[1].forward_cached(input.view())?];
        let q1 = caches[0].output().column(0).to_owned();
        let q2 = caches[1].output().column(0).to_owned();
        let b = batch.rewards.len();
        let alpha = self.alpha();

        let mut loss = 0.0;
        // route -dqmin/da through the argmin critic, per row
        let mut upstreams = [Array2::zeros((b, 1)), Array2::zeros((b, 1))];
        for i in 0..b {
            let (min_q, which) = if q1[i] <= q2[i] { (q1[i], 0) } else { (q2[i], 1) };
            loss += (alpha * sample.log_prob[i] - min_q) / b as f64;
            upstreams[which][(i, 0)] = -1.0 / b as f64;
        }
        let obs_dim = self.state_dim + self.goal_dim;
        let mut d_action = Array2::zeros((b, self.action_dim));
        for (critic, upstream) in self.critics.iter().zip(&upstreams) {
            let cache = critic.forward_cached(input.view())?;
            let grads = critic.backward(&cache, upstream.view());
            for i in 0..b {
                for a in 0..self.action_dim {
                    d_action[(i, a)] += grads.dinput[(i, obs_dim + a)];
                }
            }
        }
        let d_logp = Array1::from_elem(b, alpha / b as f64);
        let grads: Gradients = self.actor.backward(&sample, &d_action, &d_logp);
        self.actor_opt.step(&mut self.actor.net, &grads);
        Ok(loss)
    }

    /// Gradient step on `log alpha` toward the entropy target; the
    /// temperature stays positive by construction. Returns the new alpha.
    pub fn temperature_update(&mut self, batch: &Batch) -> Result<f64> {
        let sample = self.actor.sample(batch.obs.view(), &mut self.rng)?;
        let mean_term = sample
            .log_prob
            .iter()
            .map(|lp| lp + self.entropy_target)
            .sum::<f64>()
            / sample.log_prob.len() as f64;
        let grad = -self.alpha() * mean_term;
        self.alpha_opt.step(&mut self.log_alpha, grad);
        Ok(self.alpha())
    }

    /// Polyak-average both online critics into their targets.
    pub fn polyak_step(&mut self) {
        for (target, online) in self.targets.iter_mut().zip(&self.critics) {
            polyak(target, online, self.cfg.tau);
        }
    }

    /// One full update round: critic, actor, temperature, target averaging.
    pub fn update(&mut self) -> Result<UpdateStats> {
        let batch = self.sample_batch()?;
        let critic_loss = self.critic_update(&batch)?;
        let actor_loss = self.actor_update(&batch)?;
        let alpha = self.temperature_update(&batch)?;
        self.polyak_step();
        Ok(UpdateStats { critic_loss, actor_loss, alpha })
    }

    pub fn ready_to_update(&self) -> bool {
        self.buffer.len() >= self.cfg.batch_size
    }
}
