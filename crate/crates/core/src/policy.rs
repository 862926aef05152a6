//! The base policy network, action squashing and the shaped reward.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::doorsim::STATE_DIM;
use crate::error::{invalid, Result};
use crate::kinematics::{twist_from_action, Frame, Twist, Wrench};
use crate::neural::{
    gaussian_log_prob, sigma_from_raw, Activation, Checkpoint, DenseLayerSpec, Mlp, TensorBuffer,
};
use crate::vae::LATENT_DIM;

/// `[z(8), s(12), a_prev(2)]`.
pub const POLICY_INPUT_DIM: usize = LATENT_DIM + STATE_DIM + 2;
pub const HIDDEN: usize = 64;
/// Open interval for the hinge-radius estimate, metres.
pub const R_BOUNDS: (f64, f64) = (0.05, 1.0);
/// Grasp-angle estimates lie in `(-THETA_BOUND, THETA_BOUND)`.
pub const THETA_BOUND: f64 = 0.45;
/// Per-component bound on the six-DoF twist command (m/s and rad/s).
pub const TWIST_BOUND: f64 = 0.5;
/// Smallest `|tau_y|` used in the torque-ratio reward term.
pub const TAU_Y_FLOOR: f64 = 1e-3;
const INITIAL_SIGMA: f64 = 0.5;

// Input scaling: wrenches span five orders of magnitude between smooth
// tracking and a misaligned grasp, so they are asinh-compressed.
const FORCE_SCALE: f64 = 0.5;
const TORQUE_SCALE: f64 = 0.05;
const TWIST_GAIN: f64 = 5.0;

/// What the actor head parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionSpace {
    /// `(r_hat, theta_hat)`, converted to a twist with the door's target speed.
    RTheta,
    /// A gripper-frame twist commanded directly.
    Twist6,
}

impl ActionSpace {
    pub fn dim(self) -> usize {
        match self {
            ActionSpace::RTheta => 2,
            ActionSpace::Twist6 => 6,
        }
    }

    pub fn input_dim(self) -> usize {
        LATENT_DIM + STATE_DIM + self.dim()
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionSpace::RTheta => "rtheta",
            ActionSpace::Twist6 => "twist6",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "rtheta" => Ok(ActionSpace::RTheta),
            "twist6" => Ok(ActionSpace::Twist6),
            other => invalid(format!("unknown action space {other:?}")),
        }
    }

    /// Maps an unconstrained actor sample into the bounded action.
    pub fn squash(self, raw: &[f64]) -> Vec<f64> {
        match self {
            ActionSpace::RTheta => {
                let a = squash_rtheta(raw[0], raw[1]);
                vec![a.r_hat, a.theta_hat]
            }
            ActionSpace::Twist6 => raw.iter().map(|u| TWIST_BOUND * u.tanh()).collect(),
        }
    }

    /// Elementwise derivative of [`squash`](Self::squash).
    pub fn squash_derivative(self, raw: &[f64]) -> Vec<f64> {
        match self {
            ActionSpace::RTheta => {
                let s = crate::neural::sigmoid(raw[0]);
                let t = raw[1].tanh();
                vec![(R_BOUNDS.1 - R_BOUNDS.0) * s * (1.0 - s), THETA_BOUND * (1.0 - t * t)]
            }
            ActionSpace::Twist6 => raw.iter().map(|u| TWIST_BOUND * (1.0 - u.tanh().powi(2))).collect(),
        }
    }

    /// Gripper-frame command for a squashed action.
    pub fn command(self, action: &[f64], omega: f64) -> Result<Twist> {
        match self {
            ActionSpace::RTheta => twist_from_action(action[0], action[1], omega),
            ActionSpace::Twist6 => {
                let v: [f64; 6] = action.try_into().map_err(|_| crate::Error::InvalidArgument("twist action needs 6 values".into()))?;
                Ok(Twist::from_array(v, Frame::Gripper))
            }
        }
    }

    /// The action channel of the input features.
    fn action_features(self, a: &[f64], out: &mut [f64]) {
        match self {
            ActionSpace::RTheta => {
                let mid = 0.5 * (R_BOUNDS.0 + R_BOUNDS.1);
                out[0] = 2.0 * (a[0] - mid) / (R_BOUNDS.1 - R_BOUNDS.0);
                out[1] = a[1] / THETA_BOUND;
            }
            ActionSpace::Twist6 => {
                for (o, v) in out.iter_mut().zip(a) {
                    *o = v / TWIST_BOUND;
                }
            }
        }
    }
}

/// Bounded estimate of the grasp geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action {
    pub r_hat: f64,
    pub theta_hat: f64,
}

/// `r_hat = r_lo + (r_hi - r_lo) sigmoid(u0)`, `theta_hat = THETA_BOUND tanh(u1)`.
pub fn squash_rtheta(u_r: f64, u_theta: f64) -> Action {
    let s = crate::neural::sigmoid(u_r);
    Action { r_hat: R_BOUNDS.0 + (R_BOUNDS.1 - R_BOUNDS.0) * s, theta_hat: THETA_BOUND * u_theta.tanh() }
}

/// Policy input `[z, s, a_prev]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInput {
    pub z: Vec<f64>,
    pub s: [f64; STATE_DIM],
    pub a_prev: Vec<f64>,
}

impl PolicyInput {
    pub fn new(z: &[f64], s: &[f64; STATE_DIM], a_prev: &[f64]) -> Result<Self> {
        if z.len() != LATENT_DIM {
            return invalid(format!("latent must have {LATENT_DIM} values, got {}", z.len()));
        }
        if a_prev.len() != 2 && a_prev.len() != 6 {
            return invalid(format!("previous action must have 2 or 6 values, got {}", a_prev.len()));
        }
        Ok(Self { z: z.to_vec(), s: *s, a_prev: a_prev.to_vec() })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(LATENT_DIM + STATE_DIM + self.a_prev.len());
        v.extend_from_slice(&self.z);
        v.extend_from_slice(&self.s);
        v.extend_from_slice(&self.a_prev);
        v
    }
}

/// Compressed state channels shared by the policy and the history windows.
pub fn state_features(s: &[f64]) -> [f64; STATE_DIM] {
    let mut f = [0.0; STATE_DIM];
    for i in 0..3 {
        f[i] = (s[i] / FORCE_SCALE).asinh();
        f[3 + i] = (s[3 + i] / TORQUE_SCALE).asinh();
    }
    for i in 6..STATE_DIM {
        f[i] = s[i] * TWIST_GAIN;
    }
    f
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardWeights {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k4: f64,
    pub k5: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { k1: 1.0, k2: 0.7, k3: 0.7, k4: 0.7, k5: 0.3 }
    }
}

/// Wrench terms shared by both rewards: `k2|F_y| + k3|F_z| + k4|tau_x| + k5|tau_z/tau_y + tan(theta)|`.
fn wrench_penalty(theta: f64, wrench: &Wrench, w: &RewardWeights) -> f64 {
    let tau_y = wrench.torque.y;
    let tau_y = if tau_y.abs() < TAU_Y_FLOOR { TAU_Y_FLOOR.copysign(tau_y) } else { tau_y };
    let ratio = wrench.torque.z / tau_y;
    let tan = theta.tan();
    // residuals within a few ulps of the operands are rounding, not misalignment
    let mut misalignment = (ratio + tan).abs();
    if misalignment <= 4.0 * f64::EPSILON * ratio.abs().max(tan.abs()) {
        misalignment = 0.0;
    }
    w.k2 * wrench.force.y.abs() + w.k3 * wrench.force.z.abs() + w.k4 * wrench.torque.x.abs() + w.k5 * misalignment
}

/// Shaped reward: negative squared estimate error plus wrench penalties.
/// `theta` is the true grasp angle.
pub fn reward(r: f64, theta: f64, r_hat: f64, theta_hat: f64, wrench: &Wrench, weights: &RewardWeights) -> f64 {
    -(weights.k1 * ((r - r_hat).powi(2) + (theta - theta_hat).powi(2)) + wrench_penalty(theta, wrench, weights))
}

/// Reward for the six-DoF variant, supervising the commanded twist instead.
pub fn reward_6dof(v_g: &Twist, v_ideal: &Twist, theta: f64, wrench: &Wrench, weights: &RewardWeights) -> f64 {
    let a = v_g.to_array();
    let b = v_ideal.to_array();
    let err: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    -(weights.k1 * err + wrench_penalty(theta, wrench, weights))
}

/// Gaussian actor and value critic with separate 64-64 tanh trunks. The
/// action noise scale is state-independent.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub space: ActionSpace,
    pub actor: Mlp,
    pub critic: Mlp,
    /// Raw standard deviations; `sigma = softplus(raw) + 1e-6`.
    pub sigma_raw: TensorBuffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    /// Mean of the unsquashed action distribution.
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pub value: f64,
}

fn trunk(input: usize, out: usize) -> Vec<DenseLayerSpec> {
    vec![
        DenseLayerSpec { in_dim: input, out_dim: HIDDEN, activation: Activation::Tanh },
        DenseLayerSpec { in_dim: HIDDEN, out_dim: HIDDEN, activation: Activation::Tanh },
        DenseLayerSpec { in_dim: HIDDEN, out_dim: out, activation: Activation::Identity },
    ]
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(space: ActionSpace, rng: &mut R) -> Result<Self> {
        let d = space.input_dim();
        let raw0 = INITIAL_SIGMA.exp_m1().ln();
        Ok(Self {
            space,
            actor: Mlp::new(trunk(d, space.dim()), 0.01, rng)?,
            critic: Mlp::new(trunk(d, 1), 1.0, rng)?,
            sigma_raw: TensorBuffer::from_values(&[space.dim()], vec![raw0; space.dim()])?,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.space.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.space.dim()
    }

    /// Network features for a raw `[z, s, a_prev]` vector. The latent block
    /// passes through unchanged.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return invalid(format!("policy expects {} inputs, got {}", self.input_dim(), x.len()));
        }
        let mut f = x.to_vec();
        f[LATENT_DIM..LATENT_DIM + STATE_DIM].copy_from_slice(&state_features(&x[LATENT_DIM..LATENT_DIM + STATE_DIM]));
        self.space.action_features(&x[LATENT_DIM + STATE_DIM..], &mut f[LATENT_DIM + STATE_DIM..]);
        Ok(f)
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.sigma_raw.values.iter().map(|&r| sigma_from_raw(r)).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<PolicyOutput> {
        let f = self.features(x)?;
        Ok(PolicyOutput { mean: self.actor.forward(&f)?, sigma: self.sigma(), value: self.critic.forward(&f)?[0] })
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(&self.features(x)?)?[0])
    }

    /// Deterministic (mean) action after squashing.
    pub fn mean_action(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.space.squash(&self.actor.forward(&self.features(x)?)?))
    }

    /// Samples an unsquashed action; returns `(raw, log_prob)`.
    pub fn sample<R: Rng + ?Sized>(&self, out: &PolicyOutput, rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let raw: Vec<f64> =
            out.mean.iter().zip(&out.sigma).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
        let lp = gaussian_log_prob(&out.mean, &out.sigma, &raw)?;
        Ok((raw, lp))
    }

    /// Squashed mean action and the gradient of `sum(grad_action * action)`
    /// with respect to the latent block of `x`. Parameters are not touched.
    pub fn action_latent_gradient(&self, x: &[f64], grad_action: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.features(x)?;
        let cache = self.actor.forward_cached(&f)?;
        let raw = cache.output();
        let action = self.space.squash(raw);
        let d = self.space.squash_derivative(raw);
        let g_raw: Vec<f64> = grad_action.iter().zip(&d).map(|(g, d)| g * d).collect();
        let g_in = self.actor.input_gradient(&cache, &g_raw)?;
        Ok((action, g_in[..LATENT_DIM].to_vec()))
    }

    /// Concatenation of all parameters, for checksums.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.actor.params.values.clone();
        v.extend_from_slice(&self.critic.params.values);
        v.extend_from_slice(&self.sigma_raw.values);
        v
    }

    pub fn zero_grad(&mut self) {
        self.actor.params.zero_grad();
        self.critic.params.zero_grad();
        self.sigma_raw.zero_grad();
    }

    pub fn descriptor(space: ActionSpace) -> String {
        format!("policy/v1 space={} actor={} critic={}", space.name(),
            Mlp::zeros(trunk(space.input_dim(), space.dim())).map(|m| m.descriptor()).unwrap_or_default(),
            Mlp::zeros(trunk(space.input_dim(), 1)).map(|m| m.descriptor()).unwrap_or_default())
    }

    pub fn write_checkpoint(&self, c: &mut Checkpoint, prefix: &str) {
        c.push(format!("{prefix}actor"), &self.actor.params.values);
        c.push(format!("{prefix}critic"), &self.critic.params.values);
        c.push(format!("{prefix}sigma_raw"), &self.sigma_raw.values);
    }

    pub fn read_checkpoint(space: ActionSpace, c: &Checkpoint, prefix: &str) -> Result<Self> {
        let d = space.input_dim();
        Ok(Self {
            space,
            actor: Mlp::from_params(trunk(d, space.dim()), c.get(&format!("{prefix}actor"))?.to_vec())?,
            critic: Mlp::from_params(trunk(d, 1), c.get(&format!("{prefix}critic"))?.to_vec())?,
            sigma_raw: TensorBuffer::from_values(&[space.dim()], c.get(&format!("{prefix}sigma_raw"))?.to_vec())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::ideal_wrench;
    use crate::neural::gradcheck::{max_rel_error, numeric_grad};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ideal_tracking_and_wrench_give_zero_reward() {
        let w = RewardWeights::default();
        for theta in [-0.3, -0.05, 0.0, 0.2, 0.3] {
            let wr = ideal_wrench(theta, 3.0, 0.5).unwrap();
            assert_eq!(reward(0.4, theta, 0.4, theta, &wr, &w), 0.0);
        }
    }

    #[test]
    fn worked_reward_examples() {
        let w = RewardWeights::default();
        let wr = ideal_wrench(0.1, 2.0, 1.0).unwrap();
        assert!((reward(0.5, 0.1, 0.6, 0.1, &wr, &w) + 0.01).abs() < 1e-12);
        // tau_z/tau_y = -tan(0) needs tau_z = 0 with any nonzero tau_y
        let wr = Wrench::from_array([5.0, 1.0, 2.0, 1.0, 0.7, 0.0], Frame::Gripper);
        assert!((reward(0.5, 0.0, 0.5, 0.0, &wr, &w) + 2.8).abs() < 1e-12);
    }

    #[test]
    fn tau_y_clamp_keeps_reward_finite() {
        let w = RewardWeights::default();
        let wr = Wrench::from_array([0.0, 0.0, 0.0, 0.0, 0.0, 1e-4], Frame::Gripper);
        let r = reward(0.5, 0.0, 0.5, 0.0, &wr, &w);
        assert!((r + 0.3 * 0.1).abs() < 1e-12);
        let wr = Wrench::from_array([0.0, 0.0, 0.0, 0.0, -0.0, 1e-4], Frame::Gripper);
        assert!((reward(0.5, 0.0, 0.5, 0.0, &wr, &w) + 0.3 * 0.1).abs() < 1e-12);
    }

    #[test]
    fn six_dof_reward_examples() {
        let w = RewardWeights::default();
        let ideal = twist_from_action(0.4, 0.2, -0.2).unwrap();
        let wr = ideal_wrench(0.2, 1.0, 1.0).unwrap();
        assert_eq!(reward_6dof(&ideal, &ideal, 0.2, &wr, &w), 0.0);
        let mut off = ideal;
        off.linear.y += 1.0;
        assert!((reward_6dof(&off, &ideal, 0.2, &wr, &w) + 1.0).abs() < 1e-12);
        // squared twist error 0.01 matches an r_hat error of 0.1 in the 2-DoF reward
        let mut off = ideal;
        off.angular.z += 0.1;
        assert!((reward_6dof(&off, &ideal, 0.2, &wr, &w) - reward(0.4, 0.2, 0.5, 0.2, &wr, &w)).abs() < 1e-12);
    }

    #[test]
    fn squashed_actions_stay_in_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let u = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
            let a = squash_rtheta(u[0], u[1]);
            assert!(a.r_hat >= R_BOUNDS.0 && a.r_hat <= R_BOUNDS.1);
            assert!(a.theta_hat.abs() <= THETA_BOUND);
        }
        let a = squash_rtheta(0.3, -0.2);
        assert!(a.r_hat > R_BOUNDS.0 && a.r_hat < R_BOUNDS.1 && a.theta_hat.abs() < THETA_BOUND);
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = PolicyNet::new(ActionSpace::RTheta, &mut rng).unwrap();
        let x: Vec<f64> = (0..POLICY_INPUT_DIM).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = net.forward(&x).unwrap();
        assert_eq!(a, net.forward(&x).unwrap());
        assert_eq!(a.mean.len(), 2);
        assert!(a.sigma.iter().all(|s| *s > 0.0));
        assert!(net.forward(&x[..21]).is_err());
        let six = PolicyNet::new(ActionSpace::Twist6, &mut rng).unwrap();
        assert_eq!(six.forward(&[0.0; 26]).unwrap().mean.len(), 6);
    }

    #[test]
    fn latent_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = PolicyNet::new(ActionSpace::RTheta, &mut rng).unwrap();
        // larger output weights than the init so the check is not trivially flat
        net.actor.params.values.iter_mut().for_each(|v| *v *= 3.0);
        let x: Vec<f64> = (0..POLICY_INPUT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = [0.7, -1.3];
        let (_, gz) = net.action_latent_gradient(&x, &g).unwrap();
        let num = numeric_grad(
            &mut |z| {
                let mut xx = x.clone();
                xx[..LATENT_DIM].copy_from_slice(z);
                let a = net.mean_action(&xx).unwrap();
                a[0] * g[0] + a[1] * g[1]
            },
            &x[..LATENT_DIM],
            1e-5,
        );
        assert!(max_rel_error(&gz, &num) < 1e-4);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = PolicyNet::new(ActionSpace::Twist6, &mut rng).unwrap();
        let mut c = Checkpoint::new(PolicyNet::descriptor(ActionSpace::Twist6));
        net.write_checkpoint(&mut c, "");
        let back = PolicyNet::read_checkpoint(ActionSpace::Twist6, &c, "").unwrap();
        assert_eq!(back, net);
    }
}
