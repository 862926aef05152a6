//! History-based latent estimation: the adaptation module, its fine-tuned
//! variant, and the temporal feature network they share with the
//! end-to-end policy.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::doorsim::{DoorSim, SimConfig, STATE_DIM};
use crate::envdomain::sample_env;
use crate::error::{invalid, Result};
use crate::neural::{
    checksum, conv1d_backward, conv1d_forward, kl_standard_normal, sigma_from_raw, sigma_from_raw_grad,
    squared_error, Activation, Checkpoint, Conv1DLayerSpec, DenseLayerSpec, GroupAdam, Mlp, MlpCache, TensorBuffer,
};
use crate::policy::{state_features, ActionSpace, PolicyNet, R_BOUNDS, THETA_BOUND};
use crate::rollout::{run_episode, DoorEnv, EpisodeTrace, LatentSource};
use crate::vae::{Vae, LATENT_DIM};

/// Per-step row: `[s_t(12), a_{t-1}(2)]`.
pub const STEP_DIM: usize = STATE_DIM + 2;
pub const DEFAULT_WINDOW: usize = 50;
pub const CHANNELS: usize = 32;
/// `(kernel, stride)` of the three temporal convolutions.
pub const CONV_STACK: [(usize, usize); 3] = [(8, 4), (5, 1), (5, 1)];

/// The last `n` per-step rows, oldest first. Before `n` rows exist the
/// leading rows are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    n: usize,
    rows: VecDeque<[f64; STEP_DIM]>,
}

impl HistoryWindow {
    pub fn new(n: usize) -> Result<Self> {
        if n < min_window_len() {
            return invalid(format!("window length {n} too short for the conv stack"));
        }
        Ok(Self { n, rows: VecDeque::with_capacity(n) })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Number of real (non-padding) rows.
    pub fn filled(&self) -> usize {
        self.rows.len()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
    }

    pub fn push(&mut self, s: &[f64; STATE_DIM], a_prev: &[f64]) -> Result<()> {
        if a_prev.len() != 2 {
            return invalid("window rows take a 2-dimensional previous action");
        }
        let mut row = [0.0; STEP_DIM];
        row[..STATE_DIM].copy_from_slice(s);
        row[STATE_DIM..].copy_from_slice(a_prev);
        if self.rows.len() == self.n {
            self.rows.pop_front();
        }
        self.rows.push_back(row);
        Ok(())
    }

    /// Raw rows, time-major, `n * STEP_DIM` values.
    pub fn raw(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * STEP_DIM];
        let pad = self.n - self.rows.len();
        for (i, r) in self.rows.iter().enumerate() {
            out[(pad + i) * STEP_DIM..(pad + i + 1) * STEP_DIM].copy_from_slice(r);
        }
        out
    }

    /// Network input: compressed rows, padding rows left at zero.
    pub fn features(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n * STEP_DIM];
        write_features(self.rows.iter(), self.n, &mut out);
        out
    }
}

/// Network input for the window ending at row `end` (inclusive) of an
/// episode's recorded rows.
pub fn window_features(rows: &[[f64; STEP_DIM]], end: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * STEP_DIM];
    let start = (end + 1).saturating_sub(n);
    write_features(rows[start..=end].iter(), n, &mut out);
    out
}

fn write_features<'a>(rows: impl ExactSizeIterator<Item = &'a [f64; STEP_DIM]>, n: usize, out: &mut [f64]) {
    let pad = n - rows.len();
    for (i, r) in rows.enumerate() {
        step_features(r, &mut out[(pad + i) * STEP_DIM..(pad + i + 1) * STEP_DIM]);
    }
}

/// Smallest window the conv stack accepts.
pub fn min_window_len() -> usize {
    // invert L_out = floor((L - k)/s) + 1 >= 1 from the last layer back
    let mut len = 1;
    for &(k, s) in CONV_STACK.iter().rev() {
        len = (len - 1) * s + k;
    }
    len
}

fn step_features(row: &[f64; STEP_DIM], out: &mut [f64]) {
    out[..STATE_DIM].copy_from_slice(&state_features(&row[..STATE_DIM]));
    let mid = 0.5 * (R_BOUNDS.0 + R_BOUNDS.1);
    out[STATE_DIM] = 2.0 * (row[STATE_DIM] - mid) / (R_BOUNDS.1 - R_BOUNDS.0);
    out[STATE_DIM + 1] = row[STATE_DIM + 1] / THETA_BOUND;
}

/// Per-step MLP `14 -> 32 -> 32`, three tanh convolutions over time, then a
/// linear head on the flattened map.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalNet {
    pub window: usize,
    pub step_mlp: Mlp,
    pub convs: Vec<Conv1DLayerSpec>,
    pub conv_params: TensorBuffer,
    pub head: Mlp,
}

/// Forward intermediates needed by [`TemporalNet::backward`].
#[derive(Debug, Clone)]
pub struct TemporalCache {
    step: Vec<MlpCache>,
    /// Conv inputs (channel-major), then the final conv output.
    maps: Vec<Vec<f64>>,
    head: MlpCache,
}

impl TemporalCache {
    pub fn output(&self) -> &[f64] {
        self.head.output()
    }
}

fn step_layers() -> Vec<DenseLayerSpec> {
    vec![
        DenseLayerSpec { in_dim: STEP_DIM, out_dim: CHANNELS, activation: Activation::Tanh },
        DenseLayerSpec { in_dim: CHANNELS, out_dim: CHANNELS, activation: Activation::Tanh },
    ]
}

fn conv_specs() -> Vec<Conv1DLayerSpec> {
    CONV_STACK.iter().map(|&(k, s)| Conv1DLayerSpec { in_channels: CHANNELS, out_channels: CHANNELS, kernel: k, stride: s }).collect()
}

fn conv_out_len(window: usize) -> Result<usize> {
    conv_specs().iter().try_fold(window, |len, c| c.output_len(len))
}

fn head_layers(window: usize, out: usize) -> Result<Vec<DenseLayerSpec>> {
    Ok(vec![DenseLayerSpec { in_dim: CHANNELS * conv_out_len(window)?, out_dim: out, activation: Activation::Identity }])
}

impl TemporalNet {
    pub fn new<R: Rng + ?Sized>(window: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        let convs = conv_specs();
        let total: usize = convs.iter().map(|c| c.param_count()).sum();
        let mut conv_params = TensorBuffer::zeros(&[total]);
        let mut off = 0;
        for c in &convs {
            let fan_in = c.in_channels * c.kernel;
            let w = crate::neural::orthogonal(c.out_channels, fan_in, 1.0, rng);
            conv_params.values[off..off + w.len()].copy_from_slice(&w);
            off += c.param_count();
        }
        Ok(Self {
            window,
            step_mlp: Mlp::new(step_layers(), 1.0, rng)?,
            convs,
            conv_params,
            head: Mlp::new(head_layers(window, out_dim)?, 1.0, rng)?,
        })
    }

    pub fn from_parts(window: usize, out_dim: usize, step: Vec<f64>, conv: Vec<f64>, head: Vec<f64>) -> Result<Self> {
        let convs = conv_specs();
        let total: usize = convs.iter().map(|c| c.param_count()).sum();
        Ok(Self {
            window,
            step_mlp: Mlp::from_params(step_layers(), step)?,
            convs,
            conv_params: TensorBuffer::from_values(&[total], conv)?,
            head: Mlp::from_params(head_layers(window, out_dim)?, head)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.head.out_dim()
    }

    fn conv_slices(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.convs
            .iter()
            .map(|c| {
                let r = (off, off + c.param_count());
                off = r.1;
                r
            })
            .collect()
    }

    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(features)?.output().to_vec())
    }

    /// `features` holds `window` time-major rows of [`STEP_DIM`] values.
    pub fn forward_cached(&self, features: &[f64]) -> Result<TemporalCache> {
        if features.len() != self.window * STEP_DIM {
            return invalid(format!("expected {} window values, got {}", self.window * STEP_DIM, features.len()));
        }
        let mut step = Vec::with_capacity(self.window);
        let mut map = vec![0.0; CHANNELS * self.window];
        for t in 0..self.window {
            let c = self.step_mlp.forward_cached(&features[t * STEP_DIM..(t + 1) * STEP_DIM])?;
            for (ch, v) in c.output().iter().enumerate() {
                map[ch * self.window + t] = *v;
            }
            step.push(c);
        }
        let mut maps = vec![map];
        for (spec, (a, b)) in self.convs.iter().zip(self.conv_slices()) {
            let (mut y, _) = conv1d_forward(spec, &self.conv_params.values[a..b], maps.last().unwrap())?;
            y.iter_mut().for_each(|v| *v = v.tanh());
            maps.push(y);
        }
        let head = self.head.forward_cached(maps.last().unwrap())?;
        Ok(TemporalCache { step, maps, head })
    }

    /// Backpropagates `grad_output`, accumulating into all three parameter
    /// buffers.
    pub fn backward(&mut self, cache: &TemporalCache, grad_output: &[f64]) -> Result<()> {
        let mut g = self.head.backward(&cache.head, grad_output)?;
        let slices = self.conv_slices();
        for i in (0..self.convs.len()).rev() {
            let y = &cache.maps[i + 1];
            for (gv, yv) in g.iter_mut().zip(y) {
                *gv *= 1.0 - yv * yv;
            }
            let (a, b) = slices[i];
            let TensorBuffer { values, gradient, .. } = &mut self.conv_params;
            g = conv1d_backward(&self.convs[i], &values[a..b], &cache.maps[i], &g, Some(&mut gradient[a..b]))?;
        }
        let mut g_step = vec![0.0; CHANNELS];
        for t in 0..self.window {
            for ch in 0..CHANNELS {
                g_step[ch] = g[ch * self.window + t];
            }
            self.step_mlp.backward(&cache.step[t], &g_step)?;
        }
        Ok(())
    }

    pub fn buffers_mut(&mut self) -> [&mut TensorBuffer; 3] {
        [&mut self.step_mlp.params, &mut self.conv_params, &mut self.head.params]
    }

    pub fn buffers(&self) -> [&TensorBuffer; 3] {
        [&self.step_mlp.params, &self.conv_params, &self.head.params]
    }

    pub fn zero_grad(&mut self) {
        self.buffers_mut().into_iter().for_each(|b| b.zero_grad());
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.buffers().iter().flat_map(|b| b.values.iter().copied()).collect()
    }

    pub fn write_checkpoint(&self, c: &mut Checkpoint, prefix: &str) {
        c.push(format!("{prefix}window"), &[self.window as f64]);
        c.push(format!("{prefix}out_dim"), &[self.out_dim() as f64]);
        c.push(format!("{prefix}step_mlp"), &self.step_mlp.params.values);
        c.push(format!("{prefix}conv"), &self.conv_params.values);
        c.push(format!("{prefix}head"), &self.head.params.values);
    }

    pub fn read_checkpoint(c: &Checkpoint, prefix: &str) -> Result<Self> {
        let scalar = |name: &str| -> Result<usize> {
            let v = c.get(&format!("{prefix}{name}"))?;
            match v {
                [x] if *x >= 1.0 && x.fract() == 0.0 => Ok(*x as usize),
                _ => Err(crate::Error::Checkpoint(format!("{prefix}{name} is malformed"))),
            }
        };
        Self::from_parts(
            scalar("window")?,
            scalar("out_dim")?,
            c.get(&format!("{prefix}step_mlp"))?.to_vec(),
            c.get(&format!("{prefix}conv"))?.to_vec(),
            c.get(&format!("{prefix}head"))?.to_vec(),
        )
    }
}

/// Estimates `(mu, sigma)` of the environment latent from a history window.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptNet {
    pub net: TemporalNet,
}

const ADAPT_DESCRIPTOR: &str = "adaptnet/v1 step=14x32:tanh,32x32:tanh conv=[32,32,8,4],[32,32,5,1],[32,32,5,1] head=linear->(8,8)";

impl AdaptNet {
    pub fn new<R: Rng + ?Sized>(window: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { net: TemporalNet::new(window, 2 * LATENT_DIM, rng)? })
    }

    pub fn window(&self) -> usize {
        self.net.window
    }

    pub fn forward(&self, window: &HistoryWindow) -> Result<(Vec<f64>, Vec<f64>)> {
        if window.len() != self.net.window {
            return invalid(format!("window length {} does not match model length {}", window.len(), self.net.window));
        }
        self.forward_features(&window.features())
    }

    pub fn forward_features(&self, features: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(crate::vae::split_head(&self.net.forward(features)?))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(ADAPT_DESCRIPTOR);
        self.net.write_checkpoint(&mut c, "");
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_descriptor(ADAPT_DESCRIPTOR)?;
        let net = TemporalNet::read_checkpoint(c, "")?;
        if net.out_dim() != 2 * LATENT_DIM {
            return Err(crate::Error::Checkpoint("adaptation head has the wrong width".into()));
        }
        Ok(Self { net })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptLoss {
    pub total: f64,
    pub rec: f64,
    pub reg: f64,
}

/// `||mu - mu_hat||^2 + ||sigma - sigma_hat||^2 + KL(N(mu_hat, sigma_hat^2) || N(0, I))`.
pub fn adapt_loss(mu: &[f64], sigma: &[f64], mu_hat: &[f64], sigma_hat: &[f64]) -> Result<AdaptLoss> {
    if [mu.len(), sigma.len(), mu_hat.len(), sigma_hat.len()].iter().any(|&l| l != LATENT_DIM) {
        return invalid("adapt_loss expects four 8-vectors");
    }
    if sigma.iter().any(|s| !(*s > 0.0)) {
        return invalid("target sigma must be positive");
    }
    let rec = squared_error(mu, mu_hat)? + squared_error(sigma, sigma_hat)?;
    let reg = kl_standard_normal(mu_hat, sigma_hat)?;
    Ok(AdaptLoss { total: rec + reg, rec, reg })
}

/// Gradient of [`adapt_loss`] with respect to the raw head `[mu_hat, raw_sigma_hat]`.
pub fn adapt_loss_head_grad(mu: &[f64], sigma: &[f64], head: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; 2 * LATENT_DIM];
    for i in 0..LATENT_DIM {
        let mh = head[i];
        let sh = sigma_from_raw(head[LATENT_DIM + i]);
        g[i] = 2.0 * (mh - mu[i]) + mh;
        let gs = 2.0 * (sh - sigma[i]) + sh - 1.0 / sh;
        g[LATENT_DIM + i] = gs * sigma_from_raw_grad(head[LATENT_DIM + i]);
    }
    g
}

/// Training and fine-tuning settings for the adaptation module.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub window: usize,
    pub lr: f64,
    pub batch: usize,
    /// Base-policy episodes collected as training data.
    pub episodes: usize,
    pub epochs: usize,
    /// Every `stride`-th step of an episode becomes a training window.
    pub stride: usize,
    /// Episodes held out to measure estimate and action error.
    pub heldout_episodes: usize,
    /// Fine-tuning only: gather episodes with the module being tuned in the
    /// loop, labelled with the base policy's action on the same history.
    pub closed_loop: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { window: DEFAULT_WINDOW, lr: 1e-4, batch: 256, episodes: 200, epochs: 20, stride: 5, heldout_episodes: 20, closed_loop: false }
    }
}

impl AdaptConfig {
    /// Defaults for fine-tuning: 500 closed-loop doors.
    pub fn finetune() -> Self {
        Self { episodes: 500, epochs: 4, lr: 3e-4, closed_loop: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < min_window_len() {
            return invalid(format!("window must be at least {}", min_window_len()));
        }
        if self.batch == 0 || self.episodes == 0 || self.epochs == 0 || self.stride == 0 {
            return invalid("batch, episodes, epochs and stride must be positive");
        }
        if !(self.lr > 0.0) {
            return invalid("learning rate must be positive");
        }
        Ok(())
    }
}

/// One base-policy episode driven by the encoder's mean latent.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseEpisode {
    pub door: u64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// `[s_t, a_{t-1}]` per step.
    pub rows: Vec<[f64; STEP_DIM]>,
    /// The base policy's action at each step.
    pub actions: Vec<[f64; 2]>,
}

impl BaseEpisode {
    /// Policy input `[z, s_t, a_{t-1}]` at step `t` for a given latent.
    pub fn policy_input(&self, t: usize, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        x.extend_from_slice(&self.rows[t]);
        x
    }
}

/// Rolls out the base policy on `episodes` randomized doors.
pub fn collect_base_episodes<R: Rng + ?Sized>(
    policy: &PolicyNet,
    vae: &Vae,
    episodes: usize,
    sim_config: &SimConfig,
    rng: &mut R,
) -> Result<Vec<BaseEpisode>> {
    if policy.space != ActionSpace::RTheta {
        return invalid("the adaptation module serves the two-parameter policy");
    }
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let e = sample_env(rng);
        let (mu, sigma) = vae.encode_env(&e)?;
        let mut sim = DoorSim::new(sim_config.clone(), &e)?;
        let trace = run_episode(policy, LatentSource::Given(&mu), &mut sim, rng)?;
        out.push(BaseEpisode {
            door: e.fingerprint(),
            rows: trace.steps.iter().map(|s| s.row).collect(),
            actions: trace.steps.iter().map(|s| [s.action[0], s.action[1]]).collect(),
            mu,
            sigma,
        });
    }
    Ok(out)
}

/// Runs the policy with `rho`'s mean estimate on `episodes` randomized
/// doors, recording at every step the action the base policy would take
/// given the encoder's latent and the same history.
pub fn collect_relabeled_episodes<R: Rng + ?Sized>(
    rho: &AdaptNet,
    policy: &PolicyNet,
    vae: &Vae,
    episodes: usize,
    sim_config: &SimConfig,
    rng: &mut R,
) -> Result<Vec<BaseEpisode>> {
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let e = sample_env(rng);
        let (mu, sigma) = vae.encode_env(&e)?;
        let mut sim = DoorSim::new(sim_config.clone(), &e)?;
        let trace = run_adaptive_policy(rho, policy, &mut sim, false, rng)?;
        let mut ep = BaseEpisode {
            door: e.fingerprint(),
            rows: trace.steps.iter().map(|s| s.row).collect(),
            actions: Vec::with_capacity(trace.steps.len()),
            mu,
            sigma,
        };
        for t in 0..ep.rows.len() {
            let a = policy.mean_action(&ep.policy_input(t, &ep.mu))?;
            ep.actions.push([a[0], a[1]]);
        }
        out.push(ep);
    }
    Ok(out)
}

fn window_index(episodes: &[BaseEpisode], stride: usize) -> Vec<(usize, usize)> {
    episodes
        .iter()
        .enumerate()
        .flat_map(|(i, ep)| (0..ep.rows.len()).step_by(stride).map(move |t| (i, t)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub rec: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptReport {
    pub curve: Vec<AdaptEpoch>,
    /// Held-out mean `||mu_hat - mu||^2`.
    pub heldout_mu_error: f64,
    /// Held-out mean `||mean(mu) - mu||^2`: the predict-the-mean baseline.
    pub baseline_mu_error: f64,
}

impl AdaptReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,loss,rec,reg\n");
        for r in &self.curve {
            s.push_str(&format!("{},{:?},{:?},{:?}\n", r.epoch, r.loss, r.rec, r.reg));
        }
        s
    }
}

/// Regresses the adaptation module onto the encoder's `(mu, sigma)` from
/// windows of base-policy rollouts. Deterministic in `seed`.
pub fn train_adaptation(
    policy: &PolicyNet,
    vae: &Vae,
    config: &AdaptConfig,
    sim_config: &SimConfig,
    seed: u64,
) -> Result<(AdaptNet, AdaptReport)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rho = AdaptNet::new(config.window, &mut rng)?;
    let data = collect_base_episodes(policy, vae, config.episodes, sim_config, &mut rng)?;
    let heldout = collect_base_episodes(policy, vae, config.heldout_episodes, sim_config, &mut rng)?;
    let mut index = window_index(&data, config.stride);
    let mut opt = GroupAdam::new(&rho.net.buffers(), config.lr);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        index.shuffle(&mut rng);
        let (mut loss, mut rec, mut reg) = (0.0, 0.0, 0.0);
        for batch in index.chunks(config.batch) {
            rho.net.zero_grad();
            let w = 1.0 / batch.len() as f64;
            for &(i, t) in batch {
                let ep = &data[i];
                let cache = rho.net.forward_cached(&window_features(&ep.rows, t, config.window))?;
                let (mu_hat, sigma_hat) = crate::vae::split_head(cache.output());
                let l = adapt_loss(&ep.mu, &ep.sigma, &mu_hat, &sigma_hat)?;
                loss += l.total;
                rec += l.rec;
                reg += l.reg;
                let g: Vec<f64> = adapt_loss_head_grad(&ep.mu, &ep.sigma, cache.output()).iter().map(|g| g * w).collect();
                rho.net.backward(&cache, &g)?;
            }
            opt.step(&mut rho.net.buffers_mut())?;
        }
        let n = index.len() as f64;
        curve.push(AdaptEpoch { epoch, loss: loss / n, rec: rec / n, reg: reg / n });
    }
    rho.net.zero_grad();
    let (heldout_mu_error, baseline_mu_error) = latent_errors(&rho, &data, &heldout, config.stride)?;
    Ok((rho, AdaptReport { curve, heldout_mu_error, baseline_mu_error }))
}

/// Held-out `mu` estimation error of `rho` and of the training-set mean.
fn latent_errors(rho: &AdaptNet, train: &[BaseEpisode], heldout: &[BaseEpisode], stride: usize) -> Result<(f64, f64)> {
    let mut mean_mu = vec![0.0; LATENT_DIM];
    for ep in train {
        mean_mu.iter_mut().zip(&ep.mu).for_each(|(m, v)| *m += v / train.len() as f64);
    }
    let (mut err, mut base, mut n) = (0.0, 0.0, 0.0_f64);
    for (i, t) in window_index(heldout, stride) {
        let ep = &heldout[i];
        let (mu_hat, _) = rho.forward_features(&window_features(&ep.rows, t, rho.window()))?;
        err += squared_error(&mu_hat, &ep.mu)?;
        base += squared_error(&mean_mu, &ep.mu)?;
        n += 1.0;
    }
    Ok((err / n.max(1.0), base / n.max(1.0)))
}

/// Mean `||a - a*||^2` over windows, where `a` uses the encoder's latent and
/// `a*` the module's mean estimate.
pub fn action_discrepancy(rho: &AdaptNet, policy: &PolicyNet, episodes: &[BaseEpisode], stride: usize) -> Result<f64> {
    let (mut total, mut n) = (0.0, 0.0_f64);
    for (i, t) in window_index(episodes, stride) {
        let ep = &episodes[i];
        let (mu_hat, _) = rho.forward_features(&window_features(&ep.rows, t, rho.window()))?;
        let a_star = policy.mean_action(&ep.policy_input(t, &mu_hat))?;
        total += squared_error(&a_star, &ep.actions[t])?;
        n += 1.0;
    }
    Ok(total / n.max(1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    /// Mean training `l_f` per epoch.
    pub curve: Vec<f64>,
    /// Held-out `l_f` before and after, on episodes gathered the same way as
    /// the training data.
    pub heldout_before: f64,
    pub heldout_after: f64,
    /// Held-out `l_f` on base-policy episodes.
    pub base_heldout_before: f64,
    pub base_heldout_after: f64,
    pub policy_checksum: u64,
}

impl FinetuneReport {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,action_loss\n");
        for (i, l) in self.curve.iter().enumerate() {
            s.push_str(&format!("{i},{l:?}\n"));
        }
        s
    }

    pub fn reduction(&self) -> f64 {
        1.0 - self.heldout_after / self.heldout_before
    }
}

/// Fine-tunes a copy of `rho` so the frozen policy's actions under its
/// estimate match the actions under the encoder's latent. Gradients pass
/// through the policy into the module only. Deterministic in `seed`.
pub fn finetune_adaptation(
    rho: &AdaptNet,
    policy: &PolicyNet,
    vae: &Vae,
    config: &AdaptConfig,
    sim_config: &SimConfig,
    seed: u64,
) -> Result<(AdaptNet, FinetuneReport)> {
    config.validate()?;
    if config.window != rho.window() {
        return invalid(format!("config window {} differs from the module's {}", config.window, rho.window()));
    }
    let frozen = checksum(&policy.flat_params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = if config.closed_loop {
        Vec::new()
    } else {
        collect_base_episodes(policy, vae, config.episodes, sim_config, &mut rng)?
    };
    let heldout_seed: u64 = rng.random();
    let base_heldout = collect_base_episodes(policy, vae, config.heldout_episodes, sim_config, &mut rng)?;
    // closed-loop held-out episodes are rerun per module on the same doors
    let heldout_for = |m: &AdaptNet| -> Result<Vec<BaseEpisode>> {
        if config.closed_loop {
            let mut rng = ChaCha8Rng::seed_from_u64(heldout_seed);
            collect_relabeled_episodes(m, policy, vae, config.heldout_episodes, sim_config, &mut rng)
        } else {
            Ok(base_heldout.clone())
        }
    };
    let heldout_before = action_discrepancy(rho, policy, &heldout_for(rho)?, config.stride)?;
    let base_heldout_before = action_discrepancy(rho, policy, &base_heldout, config.stride)?;
    let mut tuned = rho.clone();
    let mut opt = GroupAdam::new(&tuned.net.buffers(), config.lr);
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.closed_loop {
            // the episode budget is spread over the epochs and aggregated
            let share = config.episodes * (epoch + 1) / config.epochs - config.episodes * epoch / config.epochs;
            data.extend(collect_relabeled_episodes(&tuned, policy, vae, share, sim_config, &mut rng)?);
        }
        let mut index = window_index(&data, config.stride);
        index.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in index.chunks(config.batch) {
            tuned.net.zero_grad();
            let w = 1.0 / batch.len() as f64;
            for &(i, t) in batch {
                let ep = &data[i];
                let cache = tuned.net.forward_cached(&window_features(&ep.rows, t, config.window))?;
                let x = ep.policy_input(t, &cache.output()[..LATENT_DIM]);
                let a_star = policy.mean_action(&x)?;
                let diff: Vec<f64> = a_star.iter().zip(&ep.actions[t]).map(|(s, a)| s - a).collect();
                total += diff.iter().map(|d| d * d).sum::<f64>();
                let g_action: Vec<f64> = diff.iter().map(|d| 2.0 * d * w).collect();
                let (_, dz) = policy.action_latent_gradient(&x, &g_action)?;
                let mut g_head = vec![0.0; 2 * LATENT_DIM];
                g_head[..LATENT_DIM].copy_from_slice(&dz);
                tuned.net.backward(&cache, &g_head)?;
            }
            opt.step(&mut tuned.net.buffers_mut())?;
        }
        curve.push(total / index.len() as f64);
    }
    tuned.net.zero_grad();
    if checksum(&policy.flat_params()) != frozen {
        return Err(crate::Error::InvalidArgument("policy parameters changed during fine-tuning".into()));
    }
    let heldout_after = action_discrepancy(&tuned, policy, &heldout_for(&tuned)?, config.stride)?;
    let base_heldout_after = action_discrepancy(&tuned, policy, &base_heldout, config.stride)?;
    let report = FinetuneReport {
        curve,
        heldout_before,
        heldout_after,
        base_heldout_before,
        base_heldout_after,
        policy_checksum: frozen,
    };
    Ok((tuned, report))
}

/// Runs the policy with latents estimated online from the door's history.
/// Only observations and the commanded speed are visible to either network.
pub fn run_adaptive_policy<R: Rng + ?Sized>(
    rho: &AdaptNet,
    policy: &PolicyNet,
    env: &mut dyn DoorEnv,
    sample_latent: bool,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    if policy.space != ActionSpace::RTheta {
        return invalid("the adaptation module serves the two-parameter policy");
    }
    run_episode(policy, LatentSource::Adaptation { net: rho, sample: sample_latent }, env, rng)
}
