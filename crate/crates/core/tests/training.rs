use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hinge_rl::adaptation::DEFAULT_WINDOW;
use hinge_rl::doorsim::{DoorSim, Observation, SimConfig};
use hinge_rl::envdomain::mean_env;
use hinge_rl::kinematics::Twist;
use hinge_rl::ppo::{train_base_policy, PpoConfig, TrainMode, TrainedPolicy};
use hinge_rl::rollout::{run_episode, DoorEnv, LatentSource};
use hinge_rl::vae::{train_vae, Vae, VaeConfig};
use hinge_rl::Result;

/// Records the true handle radius before every step.
struct Recording {
    sim: DoorSim,
    radii: Vec<f64>,
}

impl DoorEnv for Recording {
    fn observation(&self) -> Observation {
        self.sim.observation()
    }

    fn target_speed(&self) -> f64 {
        self.sim.target_speed()
    }

    fn step(&mut self, command: &Twist) -> Result<(Observation, bool)> {
        self.radii.push(self.sim.ground_truth().0);
        let (obs, done, _) = self.sim.step(command)?;
        Ok((obs, done))
    }
}

/// Mean `|r_hat - r|` of the policy's mean action over one mean-door episode.
fn radius_error(agent: &TrainedPolicy, vae: &Vae) -> f64 {
    let e = mean_env();
    let z = vae.encode_env(&e).unwrap().0;
    let mut env = Recording { sim: DoorSim::new(SimConfig::default(), &e).unwrap(), radii: Vec::new() };
    let trace = run_episode(&agent.policy, LatentSource::Given(&z), &mut env, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let errors: Vec<f64> = trace.steps.iter().zip(&env.radii).map(|(s, r)| (s.action[0] - r).abs()).collect();
    errors.iter().sum::<f64>() / errors.len() as f64
}

#[test]
#[ignore = "fails: the trained single-door policy tracks the mean door worse than the untrained one; see README"]
fn mean_door_training_shrinks_radius_error_fivefold() {
    let (vae, _) = train_vae(&VaeConfig { samples: 4000, holdout: 500, epochs: 3, ..VaeConfig::default() }, 5).unwrap();
    let untrained = TrainedPolicy::new(TrainMode::SingleDoor, DEFAULT_WINDOW, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let config = PpoConfig { total_steps: 200 * 16384, ..PpoConfig::default() };
    let run = train_base_policy(TrainMode::SingleDoor, Some(&vae), &config, 5).unwrap();
    assert_eq!(run.curve.len(), 200);
    let before = radius_error(&untrained, &vae);
    let after = radius_error(&run.agent, &vae);
    assert!(after * 5.0 <= before, "|r_hat - r| went from {before} to {after}");
}
