//! Closed-loop episodes of a trained policy against a door that exposes
//! only observations.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::adaptation::{AdaptNet, HistoryWindow, TemporalNet, STEP_DIM};
use crate::doorsim::{DoorSim, Observation, STATE_DIM};
use crate::error::{invalid, Result};
use crate::kinematics::{twist_from_action, Twist};
use crate::policy::PolicyNet;
use crate::vae::LATENT_DIM;

/// What a deployed controller may see of a door: observations and the
/// commanded opening speed, never its parameters.
pub trait DoorEnv {
    fn observation(&self) -> Observation;
    fn target_speed(&self) -> f64;
    fn step(&mut self, command: &Twist) -> Result<(Observation, bool)>;
}

impl DoorEnv for DoorSim {
    fn observation(&self) -> Observation {
        DoorSim::observation(self)
    }

    fn target_speed(&self) -> f64 {
        self.model().geometry.omega
    }

    fn step(&mut self, command: &Twist) -> Result<(Observation, bool)> {
        let (obs, done, _) = DoorSim::step(self, command)?;
        Ok((obs, done))
    }
}

/// Ground truth captured just before a command is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTruth {
    pub r: f64,
    pub theta: f64,
    pub ideal: Twist,
}

/// A simulator that logs ground truth for every step taken through the
/// [`DoorEnv`] interface.
pub struct Instrumented<'a> {
    pub sim: &'a mut DoorSim,
    pub truths: Vec<StepTruth>,
}

impl<'a> Instrumented<'a> {
    pub fn new(sim: &'a mut DoorSim) -> Self {
        Self { sim, truths: Vec::new() }
    }

    pub fn truth(&self) -> Result<StepTruth> {
        let (r, theta) = self.sim.ground_truth();
        let ideal = twist_from_action(r, theta, self.sim.model().geometry.omega)?;
        Ok(StepTruth { r, theta, ideal })
    }
}

impl DoorEnv for Instrumented<'_> {
    fn observation(&self) -> Observation {
        self.sim.observation()
    }

    fn target_speed(&self) -> f64 {
        self.sim.model().geometry.omega
    }

    fn step(&mut self, command: &Twist) -> Result<(Observation, bool)> {
        self.truths.push(self.truth()?);
        let (obs, done, _) = self.sim.step(command)?;
        Ok((obs, done))
    }
}

/// Where the policy's latent comes from during an episode.
#[derive(Debug, Clone, Copy)]
pub enum LatentSource<'a> {
    /// A latent fixed for the whole episode (the base policy's encoder output).
    Given(&'a [f64]),
    /// The adaptation module's estimate from the history window; `sample`
    /// draws `mu + eps * sigma` instead of using `mu`.
    Adaptation { net: &'a AdaptNet, sample: bool },
    /// The end-to-end policy's own history features.
    Features(&'a TemporalNet),
}

impl LatentSource<'_> {
    fn window(&self) -> Option<usize> {
        match self {
            LatentSource::Given(_) => None,
            LatentSource::Adaptation { net, .. } => Some(net.window()),
            LatentSource::Features(net) => Some(net.window),
        }
    }
}

/// One control step as seen by the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub observation: Observation,
    /// `[s, a_prev]` row of the history at decision time.
    pub row: [f64; STEP_DIM],
    pub z: Vec<f64>,
    /// Squashed action.
    pub action: Vec<f64>,
    pub command: Twist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub steps: Vec<StepRecord>,
    pub final_observation: Observation,
}

/// Runs one episode with the policy's mean action until the door reports done.
pub fn run_episode<R: Rng + ?Sized>(
    policy: &PolicyNet,
    latent: LatentSource<'_>,
    env: &mut dyn DoorEnv,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    if let LatentSource::Given(z) = latent {
        if z.len() != LATENT_DIM {
            return invalid(format!("latent must have {LATENT_DIM} entries, got {}", z.len()));
        }
    }
    let space = policy.space;
    let omega = env.target_speed();
    let mut window = latent.window().map(HistoryWindow::new).transpose()?;
    let mut obs = env.observation();
    let mut a_prev = vec![0.0; space.dim()];
    let mut steps = Vec::new();
    loop {
        let row = history_row(&obs.s, &a_prev);
        if let Some(w) = window.as_mut() {
            w.push(&obs.s, &a_prev)?;
        }
        let z = match (latent, window.as_ref()) {
            (LatentSource::Given(z), _) => z.to_vec(),
            (LatentSource::Adaptation { net, sample }, Some(w)) => {
                let (mu, sigma) = net.forward(w)?;
                if sample {
                    mu.iter().zip(&sigma).map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal)).collect()
                } else {
                    mu
                }
            }
            (LatentSource::Features(net), Some(w)) => net.forward(&w.features())?,
            _ => unreachable!("history sources always keep a window"),
        };
        let mut x = z.clone();
        x.extend_from_slice(&obs.s);
        x.extend_from_slice(&a_prev);
        let action = policy.mean_action(&x)?;
        let command = space.command(&action, omega)?;
        let (next, done) = env.step(&command)?;
        steps.push(StepRecord { observation: obs, row, z, action: action.clone(), command });
        obs = next;
        a_prev = action;
        if done {
            return Ok(EpisodeTrace { steps, final_observation: obs });
        }
    }
}

/// `[s, a_prev]` with a 2-dimensional action; wider actions are truncated.
fn history_row(s: &[f64; STATE_DIM], a_prev: &[f64]) -> [f64; STEP_DIM] {
    let mut row = [0.0; STEP_DIM];
    row[..STATE_DIM].copy_from_slice(s);
    for (dst, src) in row[STATE_DIM..].iter_mut().zip(a_prev) {
        *dst = *src;
    }
    row
}
