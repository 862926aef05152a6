//! Clipped-surrogate PPO with GAE over the randomized door domain.
//!
//! Rollouts are collected worker by worker: each worker owns a simulator and
//! an RNG seeded from the run seed, and runs `horizon` consecutive steps
//! across episode boundaries. Both episode ends (time limit, hinge stop) are
//! truncations, so every segment end bootstraps from the critic.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{HistoryWindow, TemporalNet, DEFAULT_WINDOW, STEP_DIM};
use crate::doorsim::{DoorSim, Observation, SimConfig};
use crate::envdomain::{mean_env, sample_env, EnvParams};
use crate::error::{invalid, Error, Result};
use crate::kinematics::twist_from_action;
use crate::neural::{
    clip_global_grad_norm, gaussian_log_prob, gaussian_log_prob_grad, sigmoid, Checkpoint, GroupAdam, TensorBuffer,
};
use crate::policy::{reward, reward_6dof, ActionSpace, PolicyNet, RewardWeights};
use crate::vae::{Vae, LATENT_DIM};

/// Which base-policy variant to train.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Always the mean door.
    SingleDoor,
    /// A fresh door every episode.
    DomainRandomized,
    /// Randomized doors; the latent comes from a history feature network
    /// trained end to end instead of the encoder.
    NoEncoder,
    /// Randomized doors; the actor outputs a gripper twist directly.
    SixDof,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] =
        [TrainMode::SingleDoor, TrainMode::DomainRandomized, TrainMode::NoEncoder, TrainMode::SixDof];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::SingleDoor => "single",
            TrainMode::DomainRandomized => "dr",
            TrainMode::NoEncoder => "no-encoder",
            TrainMode::SixDof => "6dof",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {name:?}; expected single|dr|no-encoder|6dof")))
    }

    pub fn space(self) -> ActionSpace {
        match self {
            TrainMode::SixDof => ActionSpace::Twist6,
            _ => ActionSpace::RTheta,
        }
    }

    pub fn needs_encoder(self) -> bool {
        self != TrainMode::NoEncoder
    }

    pub fn randomized(self) -> bool {
        self != TrainMode::SingleDoor
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub lr: f64,
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Steps per worker per update.
    pub horizon: usize,
    pub workers: usize,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: usize,
    /// History length for the no-encoder feature network.
    pub window: usize,
    /// Divide rewards by a running standard deviation of discounted returns.
    pub reward_scaling: bool,
    /// Supervise the two-parameter policy through its commanded twist
    /// instead of `(r, theta)` directly.
    pub velocity_supervised: bool,
    pub weights: RewardWeights,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            epochs: 4,
            minibatch: 256,
            horizon: 2048,
            workers: 8,
            ent_coef: 0.0,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            total_steps: 2_000_000,
            window: DEFAULT_WINDOW,
            reward_scaling: true,
            velocity_supervised: false,
            weights: RewardWeights::default(),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return invalid("clip must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) || !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return invalid("gamma and lambda must lie in (0, 1]");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.horizon == 0 || self.workers == 0 {
            return invalid("epochs, minibatch, horizon and workers must be positive");
        }
        if !(self.lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.horizon * self.workers
    }
}

/// A trained base policy and, for the end-to-end variant, its history
/// feature network.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPolicy {
    pub mode: TrainMode,
    pub policy: PolicyNet,
    pub feature_net: Option<TemporalNet>,
}

impl TrainedPolicy {
    pub fn new<R: Rng + ?Sized>(mode: TrainMode, window: usize, rng: &mut R) -> Result<Self> {
        let policy = PolicyNet::new(mode.space(), rng)?;
        let feature_net = match mode {
            TrainMode::NoEncoder => Some(TemporalNet::new(window, LATENT_DIM, rng)?),
            _ => None,
        };
        Ok(Self { mode, policy, feature_net })
    }

    fn buffers_mut(&mut self) -> Vec<&mut TensorBuffer> {
        let mut v = vec![&mut self.policy.actor.params, &mut self.policy.critic.params, &mut self.policy.sigma_raw];
        if let Some(f) = self.feature_net.as_mut() {
            v.extend(f.buffers_mut());
        }
        v
    }

    fn buffers(&self) -> Vec<&TensorBuffer> {
        let mut v = vec![&self.policy.actor.params, &self.policy.critic.params, &self.policy.sigma_raw];
        if let Some(f) = self.feature_net.as_ref() {
            v.extend(f.buffers());
        }
        v
    }

    fn zero_grad(&mut self) {
        self.buffers_mut().into_iter().for_each(|b| b.zero_grad());
    }

    pub fn window(&self) -> Option<usize> {
        self.feature_net.as_ref().map(|f| f.window)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(format!("base-policy/v1 mode={}", self.mode.name()));
        self.policy.write_checkpoint(&mut c, "policy.");
        if let Some(f) = &self.feature_net {
            f.write_checkpoint(&mut c, "features.");
        }
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let mode = c
            .descriptor
            .strip_prefix("base-policy/v1 mode=")
            .ok_or_else(|| Error::Checkpoint(format!("not a base-policy checkpoint: {:?}", c.descriptor)))
            .and_then(|m| TrainMode::from_name(m).map_err(|e| Error::Checkpoint(e.to_string())))?;
        let policy = PolicyNet::read_checkpoint(mode.space(), c, "policy.")?;
        let feature_net = match mode {
            TrainMode::NoEncoder => Some(TemporalNet::read_checkpoint(c, "features.")?),
            _ => None,
        };
        Ok(Self { mode, policy, feature_net })
    }
}

/// Where each episode's door comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum EnvSampler {
    Fixed(EnvParams),
    Randomized,
}

impl EnvSampler {
    pub fn for_mode(mode: TrainMode) -> Self {
        if mode.randomized() {
            EnvSampler::Randomized
        } else {
            EnvSampler::Fixed(mean_env())
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvParams {
        match self {
            EnvSampler::Fixed(e) => *e,
            EnvSampler::Randomized => sample_env(rng),
        }
    }
}

/// Implied `(r_hat, theta_hat)` of a gripper twist, assuming the door turns
/// with negative angular velocity.
pub fn implied_estimate(action: &[f64]) -> (f64, f64) {
    let w = (action[3] * action[3] + action[4] * action[4] + action[5] * action[5]).sqrt();
    let r = if w > 1e-9 { action[0].abs() / w } else { 0.0 };
    (r, (-action[5]).atan2(action[4]))
}

/// One update's worth of experience, stored worker-major.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub input_dim: usize,
    pub action_dim: usize,
    pub window_len: usize,
    /// Policy inputs `[z, s, a_prev]`, `input_dim` values per step.
    pub inputs: Vec<f64>,
    /// History features, only for the end-to-end variant.
    pub windows: Vec<f64>,
    pub raw_actions: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Rewards as seen by the optimizer (after scaling).
    pub train_rewards: Vec<f64>,
    /// True where the worker's segment stops after this step.
    pub segment_end: Vec<bool>,
    /// Critic value of the state following a segment end.
    pub bootstrap: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub r_errors: Vec<f64>,
    pub theta_errors: Vec<f64>,
    /// Fingerprint of every door started during collection.
    pub episode_doors: Vec<u64>,
    pub finished_episodes: usize,
    pub successes: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn raw_action(&self, i: usize) -> &[f64] {
        &self.raw_actions[i * self.action_dim..(i + 1) * self.action_dim]
    }

    pub fn window(&self, i: usize) -> &[f64] {
        let n = self.window_len * STEP_DIM;
        &self.windows[i * n..(i + 1) * n]
    }

    pub fn mean_reward(&self) -> f64 {
        mean(&self.rewards)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Generalized advantage estimates and value targets. A segment end cuts
/// the recursion and bootstraps from `bootstrap[t]`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    segment_end: &[bool],
    bootstrap: &[f64],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || segment_end.len() != n || bootstrap.len() != n {
        return invalid("GAE inputs must have equal lengths");
    }
    if n > 0 && !segment_end[n - 1] {
        return invalid("the last step must end a segment");
    }
    let mut adv = vec![0.0; n];
    let mut gae = 0.0;
    for t in (0..n).rev() {
        let next_value = if segment_end[t] { bootstrap[t] } else { values[t + 1] };
        let carry = if segment_end[t] { 0.0 } else { gae };
        let delta = rewards[t] + gamma * next_value - values[t];
        gae = delta + gamma * lambda * carry;
        adv[t] = gae;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Running variance of discounted returns, merged batch by batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnScaler {
    pub count: f64,
    pub mean: f64,
    pub var: f64,
}

impl Default for ReturnScaler {
    fn default() -> Self {
        Self { count: 1e-4, mean: 0.0, var: 1.0 }
    }
}

impl ReturnScaler {
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let m = mean(xs);
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        let delta = m - self.mean;
        let total = self.count + n;
        let m2 = self.var * self.count + v * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }

    pub fn scale(&self) -> f64 {
        (self.var + 1e-8).sqrt()
    }
}

struct Worker {
    sim: DoorSim,
    e: EnvParams,
    z: Vec<f64>,
    a_prev: Vec<f64>,
    obs: Observation,
    window: Option<HistoryWindow>,
    discounted: f64,
    rng: ChaCha8Rng,
}

/// Read-only view of everything rollouts need.
pub struct RolloutContext<'a> {
    pub agent: &'a TrainedPolicy,
    pub vae: Option<&'a Vae>,
    pub sampler: &'a EnvSampler,
    pub sim_config: &'a SimConfig,
    pub weights: &'a RewardWeights,
    pub velocity_supervised: bool,
}

impl RolloutContext<'_> {
    fn start_episode(&self, w: &mut Worker, doors: &mut Vec<u64>) -> Result<()> {
        w.e = self.sampler.sample(&mut w.rng);
        doors.push(w.e.fingerprint());
        w.obs = w.sim.reset(&w.e)?;
        w.a_prev = vec![0.0; self.agent.policy.action_dim()];
        w.z = match self.agent.mode {
            TrainMode::NoEncoder => vec![0.0; LATENT_DIM],
            _ => {
                let vae = self.vae.ok_or_else(|| Error::MissingCheckpoint("encoder".into()))?;
                vae.sample_latent(&w.e, &mut w.rng)?.z
            }
        };
        if let Some(win) = w.window.as_mut() {
            win.clear();
            win.push(&w.obs.s, &w.a_prev)?;
        }
        Ok(())
    }

    fn new_worker(&self, seed: u64, doors: &mut Vec<u64>) -> Result<Worker> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = self.sampler.sample(&mut rng);
        let sim = DoorSim::new(self.sim_config.clone(), &e)?;
        let obs = sim.observation();
        let window = self.agent.window().map(HistoryWindow::new).transpose()?;
        let mut w = Worker { sim, e, z: vec![], a_prev: vec![], obs, window, discounted: 0.0, rng };
        self.start_episode(&mut w, doors)?;
        Ok(w)
    }

    /// Current policy input; for the end-to-end variant also the window features.
    fn input(&self, w: &Worker) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let (z, feats) = match (&self.agent.feature_net, &w.window) {
            (Some(net), Some(win)) => {
                let f = win.features();
                (net.forward(&f)?, Some(f))
            }
            _ => (w.z.clone(), None),
        };
        let mut x = z;
        x.extend_from_slice(&w.obs.s);
        x.extend_from_slice(&w.a_prev);
        Ok((x, feats))
    }
}

/// Persistent rollout state across updates.
pub struct RolloutCollector {
    workers: Vec<Worker>,
    scaler: ReturnScaler,
    reward_scaling: bool,
    gamma: f64,
    pending_doors: Vec<u64>,
}

impl RolloutCollector {
    pub fn new(ctx: &RolloutContext<'_>, config: &PpoConfig, seed: u64) -> Result<Self> {
        let mut seeder = ChaCha8Rng::seed_from_u64(seed);
        let mut doors = Vec::new();
        let workers = (0..config.workers)
            .map(|_| ctx.new_worker(seeder.random(), &mut doors))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            workers,
            scaler: ReturnScaler::default(),
            reward_scaling: config.reward_scaling,
            gamma: config.gamma,
            pending_doors: doors,
        })
    }

    /// Runs every worker for `horizon` steps with the current policy.
    pub fn collect(&mut self, ctx: &RolloutContext<'_>, horizon: usize) -> Result<Trajectory> {
        let agent = ctx.agent;
        let space = agent.policy.space;
        let mut traj = Trajectory {
            input_dim: agent.policy.input_dim(),
            action_dim: agent.policy.action_dim(),
            window_len: agent.window().unwrap_or(0),
            ..Default::default()
        };
        traj.episode_doors.append(&mut self.pending_doors);
        let mut discounted = Vec::with_capacity(horizon * self.workers.len());
        for w in self.workers.iter_mut() {
            for t in 0..horizon {
                let (x, feats) = ctx.input(w)?;
                let out = agent.policy.forward(&x)?;
                let (raw, lp) = agent.policy.sample(&out, &mut w.rng)?;
                let action = space.squash(&raw);
                let omega = w.e.target_speed;
                let command = space.command(&action, omega)?;
                let (r_true, theta_true) = w.sim.ground_truth();
                let (next, done, info) = w.sim.step(&command)?;
                let wrench = next.wrench();
                let (r_hat, theta_hat) = match space {
                    ActionSpace::RTheta => (action[0], action[1]),
                    ActionSpace::Twist6 => implied_estimate(&action),
                };
                let rew = if space == ActionSpace::Twist6 || ctx.velocity_supervised {
                    let ideal = twist_from_action(r_true, theta_true, omega)?;
                    reward_6dof(&command, &ideal, theta_true, &wrench, ctx.weights)
                } else {
                    reward(r_true, theta_true, r_hat, theta_hat, &wrench, ctx.weights)
                };
                traj.inputs.extend_from_slice(&x);
                if let Some(f) = feats {
                    traj.windows.extend_from_slice(&f);
                }
                traj.raw_actions.extend_from_slice(&raw);
                traj.log_probs.push(lp);
                traj.values.push(out.value);
                traj.rewards.push(rew);
                traj.r_errors.push((r_hat - r_true).abs());
                traj.theta_errors.push((theta_hat - theta_true).abs());
                w.discounted = w.discounted * self.gamma + rew;
                discounted.push(w.discounted);

                w.obs = next;
                w.a_prev = action;
                if let Some(win) = w.window.as_mut() {
                    win.push(&w.obs.s, &w.a_prev)?;
                }
                let cut = done || t + 1 == horizon;
                traj.segment_end.push(cut);
                traj.bootstrap.push(if cut { agent.policy.value(&ctx.input(w)?.0)? } else { 0.0 });
                if done {
                    traj.finished_episodes += 1;
                    traj.successes += usize::from(info.success);
                    w.discounted = 0.0;
                    ctx.start_episode(w, &mut traj.episode_doors)?;
                }
            }
        }
        let scale = if self.reward_scaling {
            self.scaler.update(&discounted);
            self.scaler.scale()
        } else {
            1.0
        };
        traj.train_rewards = traj.rewards.iter().map(|r| r / scale).collect();
        Ok(traj)
    }

    pub fn scaler(&self) -> &ReturnScaler {
        &self.scaler
    }
}

/// Diagnostics of one PPO update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    /// Likelihood ratios of the first minibatch before any step.
    pub initial_ratio_max_dev: f64,
}

/// Clipped-surrogate update over `epochs` passes of shuffled minibatches.
/// `batch.advantages` and `batch.returns` must already be filled.
pub fn ppo_update<R: Rng + ?Sized>(
    agent: &mut TrainedPolicy,
    opt: &mut GroupAdam,
    batch: &Trajectory,
    config: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let n = batch.len();
    if n == 0 {
        return invalid("empty batch");
    }
    if batch.advantages.len() != n || batch.returns.len() != n {
        return invalid("advantages and returns must be computed before the update");
    }
    let adv_mean = mean(&batch.advantages);
    let adv_std = (batch.advantages.iter().map(|a| (a - adv_mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let adv: Vec<f64> = batch.advantages.iter().map(|a| (a - adv_mean) / (adv_std + 1e-8)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut count = 0usize;
    let mut first = true;
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for mb in order.chunks(config.minibatch) {
            agent.zero_grad();
            let wgt = 1.0 / mb.len() as f64;
            let sigma = agent.policy.sigma();
            let sigma_raw = agent.policy.sigma_raw.values.clone();
            let mut g_sigma_raw = vec![0.0; sigma.len()];
            for &i in mb {
                let (x, fcache) = match &agent.feature_net {
                    Some(net) => {
                        let c = net.forward_cached(batch.window(i))?;
                        let mut x = c.output().to_vec();
                        x.extend_from_slice(&batch.input(i)[LATENT_DIM..]);
                        (x, Some(c))
                    }
                    None => (batch.input(i).to_vec(), None),
                };
                let f = agent.policy.features(&x)?;
                let ac = agent.policy.actor.forward_cached(&f)?;
                let mean_raw = ac.output().to_vec();
                let raw = batch.raw_action(i);
                let lp = gaussian_log_prob(&mean_raw, &sigma, raw)?;
                let ratio = (lp - batch.log_probs[i]).exp();
                if first {
                    stats.initial_ratio_max_dev = stats.initial_ratio_max_dev.max((ratio - 1.0).abs());
                }
                let a = adv[i];
                let clipped = ratio.clamp(1.0 - config.clip, 1.0 + config.clip);
                let surr = (ratio * a).min(clipped * a);
                stats.policy_loss -= surr;
                stats.approx_kl += (ratio - 1.0) - (lp - batch.log_probs[i]);
                stats.clip_fraction += f64::from(u8::from((ratio - 1.0).abs() > config.clip));
                count += 1;

                // d(-surr)/d(log p): the unclipped branch is active unless the
                // clipped value is strictly smaller
                let g_lp = if ratio * a <= clipped * a { -a * ratio * wgt } else { 0.0 };
                let (dmu, dsig) = gaussian_log_prob_grad(&mean_raw, &sigma, raw)?;
                let g_mean: Vec<f64> = dmu.iter().map(|d| d * g_lp).collect();
                for k in 0..sigma.len() {
                    let g = dsig[k] * g_lp - config.ent_coef * wgt / sigma[k];
                    g_sigma_raw[k] += g * sigmoid(sigma_raw[k]);
                }
                let g_in = agent.policy.actor.backward(&ac, &g_mean)?;
                if let (Some(net), Some(c)) = (agent.feature_net.as_mut(), fcache) {
                    net.backward(&c, &g_in[..LATENT_DIM])?;
                }

                let vc = agent.policy.critic.forward_cached(&f)?;
                let v = vc.output()[0];
                let err = v - batch.returns[i];
                stats.value_loss += 0.5 * err * err;
                agent.policy.critic.backward(&vc, &[config.vf_coef * err * wgt])?;
            }
            first = false;
            stats.entropy += sigma.iter().map(|s| 0.5 + 0.5 * (2.0 * std::f64::consts::PI).ln() + s.ln()).sum::<f64>();
            agent.policy.sigma_raw.gradient.copy_from_slice(&g_sigma_raw);
            let mut bufs = agent.buffers_mut();
            clip_global_grad_norm(&mut bufs, config.max_grad_norm);
            opt.step(&mut bufs)?;
        }
    }
    let c = count as f64;
    let minibatches = (config.epochs * n.div_ceil(config.minibatch)) as f64;
    stats.policy_loss /= c;
    stats.value_loss /= c;
    stats.approx_kl /= c;
    stats.clip_fraction /= c;
    stats.entropy /= minibatches;
    Ok(stats)
}

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub update: usize,
    pub env_steps: usize,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub mean_r_error: f64,
    pub mean_theta_error: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from(
        "update,env_steps,episodes,success_rate,mean_reward,mean_r_error,mean_theta_error,approx_kl,clip_fraction,value_loss,entropy\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
            r.update,
            r.env_steps,
            r.episodes,
            r.success_rate,
            r.mean_reward,
            r.mean_r_error,
            r.mean_theta_error,
            r.approx_kl,
            r.clip_fraction,
            r.value_loss,
            r.entropy
        ));
    }
    s
}

/// Result of [`train_base_policy`].
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub agent: TrainedPolicy,
    pub curve: Vec<CurveRow>,
    /// Door fingerprints in the order episodes were started.
    pub episode_doors: Vec<u64>,
}

/// Trains a base policy from scratch. Deterministic in `seed`.
pub fn train_base_policy(mode: TrainMode, vae: Option<&Vae>, config: &PpoConfig, seed: u64) -> Result<TrainingRun> {
    train_base_policy_with(mode, vae, config, &SimConfig::default(), seed, |_, _| {})
}

/// As [`train_base_policy`], calling `progress` with the curve row and the
/// updated agent after every update.
pub fn train_base_policy_with(
    mode: TrainMode,
    vae: Option<&Vae>,
    config: &PpoConfig,
    sim_config: &SimConfig,
    seed: u64,
    mut progress: impl FnMut(&CurveRow, &TrainedPolicy),
) -> Result<TrainingRun> {
    config.validate()?;
    if mode.needs_encoder() && vae.is_none() {
        return Err(Error::MissingCheckpoint(format!("mode {} needs a trained encoder", mode.name())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = TrainedPolicy::new(mode, config.window, &mut rng)?;
    let mut opt = GroupAdam::new(&agent.buffers(), config.lr);
    let sampler = EnvSampler::for_mode(mode);
    let rollout_seed = rng.random();
    let mut collector = {
        let ctx = RolloutContext { agent: &agent, vae, sampler: &sampler, sim_config, weights: &config.weights, velocity_supervised: config.velocity_supervised };
        RolloutCollector::new(&ctx, config, rollout_seed)?
    };
    let mut curve = Vec::new();
    let mut doors = Vec::new();
    let mut steps = 0;
    let mut update = 0;
    while steps < config.total_steps {
        let mut batch = {
            let ctx = RolloutContext { agent: &agent, vae, sampler: &sampler, sim_config, weights: &config.weights, velocity_supervised: config.velocity_supervised };
            collector.collect(&ctx, config.horizon)?
        };
        let (adv, ret) = compute_gae(
            &batch.train_rewards,
            &batch.values,
            &batch.segment_end,
            &batch.bootstrap,
            config.gamma,
            config.lambda,
        )?;
        batch.advantages = adv;
        batch.returns = ret;
        let stats = ppo_update(&mut agent, &mut opt, &batch, config, &mut rng)?;
        steps += batch.len();
        doors.extend_from_slice(&batch.episode_doors);
        let row = CurveRow {
            update,
            env_steps: steps,
            episodes: batch.finished_episodes,
            success_rate: if batch.finished_episodes > 0 {
                batch.successes as f64 / batch.finished_episodes as f64
            } else {
                f64::NAN
            },
            mean_reward: batch.mean_reward(),
            mean_r_error: mean(&batch.r_errors),
            mean_theta_error: mean(&batch.theta_errors),
            approx_kl: stats.approx_kl,
            clip_fraction: stats.clip_fraction,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
        };
        progress(&row, &agent);
        curve.push(row);
        update += 1;
    }
    agent.zero_grad();
    Ok(TrainingRun { agent, curve, episode_doors: doors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_matches_hand_recursion() {
        // gamma = 0.5, lambda = 1: advantages are discounted returns minus values
        let r = [1.0, 2.0, 3.0];
        let v = [0.0, 0.0, 0.0];
        let (adv, ret) = compute_gae(&r, &v, &[false, false, true], &[4.0, 0.0, 4.0], 0.5, 1.0).unwrap();
        assert_eq!(adv, vec![1.0 + 0.5 * 2.0 + 0.25 * 3.0 + 0.125 * 4.0, 2.0 + 0.5 * 3.0 + 0.25 * 4.0, 3.0 + 0.5 * 4.0]);
        assert_eq!(ret, adv);
        // a segment end stops propagation
        let (adv, _) = compute_gae(&r, &v, &[false, true, true], &[0.0, 0.0, 0.0], 0.5, 1.0).unwrap();
        assert_eq!(adv, vec![2.0, 2.0, 3.0]);
        assert!(compute_gae(&r, &v, &[false, false, false], &[0.0; 3], 0.5, 1.0).is_err());
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let r = [0.5, -1.0];
        let v = [0.2, 0.7];
        let (adv, _) = compute_gae(&r, &v, &[false, true], &[0.0, 1.5], 0.9, 1e-12).unwrap();
        assert!((adv[0] - (0.5 + 0.9 * 0.7 - 0.2)).abs() < 1e-9);
        assert!((adv[1] - (-1.0 + 0.9 * 1.5 - 0.7)).abs() < 1e-12);
    }

    #[test]
    fn return_scaler_matches_pooled_variance() {
        let mut s = ReturnScaler { count: 0.0, mean: 0.0, var: 0.0 };
        let a = [1.0, 2.0, 3.0];
        let b = [10.0, -4.0];
        s.update(&a);
        s.update(&b);
        let all: Vec<f64> = a.iter().chain(&b).copied().collect();
        let m = mean(&all);
        let v = all.iter().map(|x| (x - m).powi(2)).sum::<f64>() / all.len() as f64;
        assert!((s.mean - m).abs() < 1e-12 && (s.var - v).abs() < 1e-12);
    }

    #[test]
    fn implied_estimate_inverts_ideal_twist() {
        let t = twist_from_action(0.42, -0.17, -0.2).unwrap().to_array();
        let (r, th) = implied_estimate(&t);
        assert!((r - 0.42).abs() < 1e-12 && (th + 0.17).abs() < 1e-12);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TrainMode::ALL {
            assert_eq!(TrainMode::from_name(m.name()).unwrap(), m);
        }
        assert!(TrainMode::from_name("bogus").is_err());
        assert_eq!(TrainMode::SixDof.space().dim(), 6);
        assert_eq!(TrainMode::DomainRandomized.space().dim(), 2);
    }

    #[test]
    fn missing_encoder_is_an_error() {
        let err = train_base_policy(TrainMode::DomainRandomized, None, &PpoConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)));
    }

    fn small_config() -> PpoConfig {
        PpoConfig { horizon: 64, workers: 2, minibatch: 32, epochs: 2, total_steps: 256, ..PpoConfig::default() }
    }

    fn tiny_vae() -> Vae {
        Vae::new(crate::vae::DEFAULT_INPUT_GAIN, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    fn collect_batch(agent: &TrainedPolicy, vae: Option<&Vae>, config: &PpoConfig) -> Trajectory {
        let sampler = EnvSampler::for_mode(agent.mode);
        let sim = SimConfig::default();
        let ctx = RolloutContext {
            agent,
            vae,
            sampler: &sampler,
            sim_config: &sim,
            weights: &config.weights,
            velocity_supervised: false,
        };
        let mut col = RolloutCollector::new(&ctx, config, 5).unwrap();
        let mut b = col.collect(&ctx, config.horizon).unwrap();
        let (adv, ret) =
            compute_gae(&b.train_rewards, &b.values, &b.segment_end, &b.bootstrap, config.gamma, config.lambda)
                .unwrap();
        b.advantages = adv;
        b.returns = ret;
        b
    }

    #[test]
    fn ratio_is_one_at_collection_params() {
        let vae = tiny_vae();
        for mode in [TrainMode::DomainRandomized, TrainMode::NoEncoder, TrainMode::SixDof] {
            let config = PpoConfig { window: 40, ..small_config() };
            let mut agent = TrainedPolicy::new(mode, config.window, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let batch = collect_batch(&agent, Some(&vae), &config);
            assert_eq!(batch.len(), 128);
            let mut opt = GroupAdam::new(&agent.buffers(), config.lr);
            let stats = ppo_update(&mut agent, &mut opt, &batch, &config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert!(stats.initial_ratio_max_dev < 1e-9, "{mode:?}: {}", stats.initial_ratio_max_dev);
        }
    }

    #[test]
    fn zero_advantage_leaves_actor_unchanged() {
        let vae = tiny_vae();
        let config = small_config();
        let mut agent = TrainedPolicy::new(TrainMode::DomainRandomized, config.window, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut batch = collect_batch(&agent, Some(&vae), &config);
        batch.advantages.iter_mut().for_each(|a| *a = 0.0);
        let actor = agent.policy.actor.params.values.clone();
        let sigma = agent.policy.sigma_raw.values.clone();
        let critic = agent.policy.critic.params.values.clone();
        let mut opt = GroupAdam::new(&agent.buffers(), config.lr);
        ppo_update(&mut agent, &mut opt, &batch, &config, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(agent.policy.actor.params.values, actor);
        assert_eq!(agent.policy.sigma_raw.values, sigma);
        assert_ne!(agent.policy.critic.params.values, critic);
    }

    #[test]
    fn randomized_mode_draws_a_door_per_episode() {
        let vae = tiny_vae();
        let config = PpoConfig { horizon: 600, workers: 1, ..small_config() };
        let agent = TrainedPolicy::new(TrainMode::DomainRandomized, config.window, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let batch = collect_batch(&agent, Some(&vae), &config);
        assert!(batch.finished_episodes >= 1);
        assert_eq!(batch.episode_doors.len(), batch.finished_episodes + 1);
        let mut unique = batch.episode_doors.clone();
        unique.sort_unstable();
        unique.dedup();
        assert_eq!(unique.len(), batch.episode_doors.len());

        let single = TrainedPolicy::new(TrainMode::SingleDoor, config.window, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let batch = collect_batch(&single, Some(&vae), &config);
        assert!(batch.episode_doors.iter().all(|d| *d == mean_env().fingerprint()));
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_round_trip() {
        let vae = tiny_vae();
        let config = small_config();
        let a = train_base_policy(TrainMode::DomainRandomized, Some(&vae), &config, 3).unwrap();
        let b = train_base_policy(TrainMode::DomainRandomized, Some(&vae), &config, 3).unwrap();
        assert_eq!(a.agent, b.agent);
        assert_eq!(a.curve.len(), 2);
        assert!(a.curve.iter().all(|r| r.mean_reward.is_finite() && r.approx_kl.is_finite()));
        let c = train_base_policy(TrainMode::DomainRandomized, Some(&vae), &config, 4).unwrap();
        assert_ne!(a.agent, c.agent);

        let bytes = a.agent.to_checkpoint().to_bytes();
        let back = TrainedPolicy::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, a.agent);

        let config = PpoConfig { window: 40, ..small_config() };
        let ne = train_base_policy(TrainMode::NoEncoder, None, &config, 3).unwrap();
        let back = TrainedPolicy::from_checkpoint(&ne.agent.to_checkpoint()).unwrap();
        assert_eq!(back, ne.agent);
        assert_eq!(curve_csv(&ne.curve).lines().count(), 3);
    }
}
