//! Python bindings: door parameters, the simulator, reward, training entry
//! points and evaluation. Environment parameters cross the boundary as
//! `{field: value}` dicts; twists and wrenches as 6-element lists.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hinge_rl::adaptation::{self, AdaptConfig, AdaptNet};
use hinge_rl::doorsim::{DoorSim, SimConfig};
use hinge_rl::envdomain::{self, EnvParams, ENV_DIM, FIELD_NAMES};
use hinge_rl::harness::{self, EvalOptions, Evaluation, PolicyVariant};
use hinge_rl::kinematics::{self, Frame, Twist, Wrench};
use hinge_rl::neural::Checkpoint;
use hinge_rl::policy::{self, RewardWeights};
use hinge_rl::ppo::{self, PpoConfig, TrainMode, TrainedPolicy};
use hinge_rl::vae::{self, VaeConfig};

fn py_err(e: hinge_rl::Error) -> PyErr {
    match e {
        hinge_rl::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for hinge_rl::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn env_to_dict(e: &EnvParams) -> BTreeMap<String, f64> {
    FIELD_NAMES.iter().zip(e.to_array()).map(|(k, v)| (k.to_string(), v)).collect()
}

fn env_from_dict(d: &BTreeMap<String, f64>) -> PyResult<EnvParams> {
    let mut v = [0.0; ENV_DIM];
    for (i, name) in FIELD_NAMES.iter().enumerate() {
        v[i] = *d.get(*name).ok_or_else(|| PyValueError::new_err(format!("missing field {name:?}")))?;
    }
    if let Some(extra) = d.keys().find(|k| !FIELD_NAMES.contains(&k.as_str())) {
        return Err(PyValueError::new_err(format!("unknown field {extra:?}")));
    }
    EnvParams::from_array(v).py()
}

/// Door parameters drawn uniformly from the randomization ranges.
#[pyfunction]
fn sample_env(seed: u64) -> BTreeMap<String, f64> {
    env_to_dict(&envdomain::sample_env(&mut ChaCha8Rng::seed_from_u64(seed)))
}

#[pyfunction]
fn mean_env() -> BTreeMap<String, f64> {
    env_to_dict(&envdomain::mean_env())
}

#[pyfunction]
fn normalize_env(env: BTreeMap<String, f64>) -> PyResult<Vec<f64>> {
    Ok(envdomain::normalize(&env_from_dict(&env)?).py()?.to_vec())
}

#[pyfunction]
fn field_names() -> Vec<&'static str> {
    FIELD_NAMES.to_vec()
}

/// Gripper-frame twist `[v, w]` that opens a door of radius `r` held at
/// grasp angle `theta` at speed `omega`.
#[pyfunction]
fn twist_from_action(r: f64, theta: f64, omega: f64) -> PyResult<[f64; 6]> {
    Ok(kinematics::twist_from_action(r, theta, omega).py()?.to_array())
}

#[pyfunction]
fn transform_chain(r: f64, theta: f64, omega: f64) -> PyResult<[f64; 6]> {
    Ok(kinematics::transform_chain(r, theta, omega).py()?.to_array())
}

#[pyfunction]
fn ideal_wrench(theta: f64, force: f64, torque: f64) -> PyResult<[f64; 6]> {
    Ok(kinematics::ideal_wrench(theta, force, torque).py()?.to_array())
}

/// Shaped reward for an estimate `(r_hat, theta_hat)` under a gripper-frame wrench.
#[pyfunction]
#[pyo3(signature = (r, theta, r_hat, theta_hat, wrench, k=None))]
fn reward(r: f64, theta: f64, r_hat: f64, theta_hat: f64, wrench: [f64; 6], k: Option<[f64; 5]>) -> f64 {
    let weights = match k {
        Some([k1, k2, k3, k4, k5]) => RewardWeights { k1, k2, k3, k4, k5 },
        None => RewardWeights::default(),
    };
    policy::reward(r, theta, r_hat, theta_hat, &Wrench::from_array(wrench, Frame::Gripper), &weights)
}

#[pyclass(name = "DoorSim", module = "hingerl")]
struct PyDoorSim {
    sim: DoorSim,
}

#[pymethods]
impl PyDoorSim {
    #[new]
    #[pyo3(signature = (env, max_steps=None))]
    fn new(env: BTreeMap<String, f64>, max_steps: Option<usize>) -> PyResult<Self> {
        let mut config = SimConfig::default();
        if let Some(n) = max_steps {
            config.max_steps = n;
        }
        Ok(Self { sim: DoorSim::new(config, &env_from_dict(&env)?).py()? })
    }

    /// Resets to a new door and returns the first 12-value observation.
    fn reset(&mut self, env: BTreeMap<String, f64>) -> PyResult<Vec<f64>> {
        Ok(self.sim.reset(&env_from_dict(&env)?).py()?.s.to_vec())
    }

    /// Applies a gripper-frame twist for one control period.
    /// Returns `(observation, done)`.
    fn step(&mut self, twist: [f64; 6]) -> PyResult<(Vec<f64>, bool)> {
        let (obs, done, _) = self.sim.step(&Twist::from_array(twist, Frame::Gripper)).py()?;
        Ok((obs.s.to_vec(), done))
    }

    /// True `(r, theta)` of the current grasp.
    fn ground_truth(&self) -> (f64, f64) {
        self.sim.ground_truth()
    }

    #[getter]
    fn door_angle(&self) -> f64 {
        self.sim.door_state().angle
    }

    #[getter]
    fn target_speed(&self) -> f64 {
        self.sim.model().geometry.omega
    }

    #[getter]
    fn step_index(&self) -> usize {
        self.sim.step_index()
    }

    fn success(&self) -> bool {
        self.sim.success()
    }

    /// Door kinetic plus coupling potential energy.
    fn energy(&self) -> f64 {
        self.sim.kinetic_energy() + self.sim.coupling_energy()
    }
}

#[pyclass(name = "Vae", module = "hingerl")]
struct PyVae {
    vae: vae::Vae,
}

#[pymethods]
impl PyVae {
    /// Posterior `(mu, sigma)` of a door's latent.
    fn encode(&self, env: BTreeMap<String, f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        self.vae.encode_env(&env_from_dict(&env)?).py()
    }

    /// Decodes a latent into normalized door parameters.
    fn decode(&self, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.vae.decode(&z).py()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.vae.to_checkpoint().save(path).py()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { vae: vae::Vae::from_checkpoint(&Checkpoint::load(path).py()?).py()? })
    }
}

/// Trains the environment encoder. Returns `(vae, report)` where the report
/// holds the held-out reconstruction error and the latent probe R^2.
#[pyfunction]
#[pyo3(signature = (seed=0, samples=None, epochs=None))]
fn train_vae(seed: u64, samples: Option<usize>, epochs: Option<usize>) -> PyResult<(PyVae, BTreeMap<String, f64>)> {
    let mut config = VaeConfig::default();
    if let Some(n) = samples {
        config.samples = n;
        config.holdout = config.holdout.min(n / 4).max(1);
    }
    if let Some(n) = epochs {
        config.epochs = n;
    }
    let (vae, report) = vae::train_vae(&config, seed).py()?;
    let summary = BTreeMap::from([
        ("heldout_mse".to_string(), report.heldout_mse),
        ("probe_r2".to_string(), report.mean_probe_r2()),
    ]);
    Ok((PyVae { vae }, summary))
}

#[pyclass(name = "Policy", module = "hingerl")]
struct PyPolicy {
    agent: TrainedPolicy,
}

#[pymethods]
impl PyPolicy {
    #[getter]
    fn mode(&self) -> &'static str {
        self.agent.mode.name()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.agent.to_checkpoint().save(path).py()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { agent: TrainedPolicy::from_checkpoint(&Checkpoint::load(path).py()?).py()? })
    }
}

/// Trains a base policy with PPO. `mode` is single, dr, no-encoder or 6dof.
/// Returns `(policy, curve)` with one dict per update.
#[pyfunction]
#[pyo3(signature = (mode, vae=None, steps=None, seed=0, horizon=None, workers=None))]
fn train_policy(
    mode: &str,
    vae: Option<PyRef<'_, PyVae>>,
    steps: Option<usize>,
    seed: u64,
    horizon: Option<usize>,
    workers: Option<usize>,
) -> PyResult<(PyPolicy, Vec<BTreeMap<String, f64>>)> {
    let mode = TrainMode::from_name(mode).py()?;
    let mut config = PpoConfig::default();
    if let Some(n) = steps {
        config.total_steps = n;
    }
    if let Some(n) = horizon {
        config.horizon = n;
    }
    if let Some(n) = workers {
        config.workers = n;
    }
    config.minibatch = config.minibatch.min(config.batch_size());
    let run = ppo::train_base_policy(mode, vae.as_ref().map(|v| &v.vae), &config, seed).py()?;
    let curve = run
        .curve
        .iter()
        .map(|r| {
            BTreeMap::from([
                ("env_steps".to_string(), r.env_steps as f64),
                ("success_rate".to_string(), r.success_rate),
                ("mean_reward".to_string(), r.mean_reward),
                ("mean_r_error".to_string(), r.mean_r_error),
                ("mean_theta_error".to_string(), r.mean_theta_error),
            ])
        })
        .collect();
    Ok((PyPolicy { agent: run.agent }, curve))
}

#[pyclass(name = "AdaptationModule", module = "hingerl")]
struct PyAdapt {
    rho: AdaptNet,
}

#[pymethods]
impl PyAdapt {
    #[getter]
    fn window(&self) -> usize {
        self.rho.window()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.rho.to_checkpoint().save(path).py()
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { rho: AdaptNet::from_checkpoint(&Checkpoint::load(path).py()?).py()? })
    }
}

fn adapt_config(base: AdaptConfig, episodes: Option<usize>, epochs: Option<usize>, window: Option<usize>) -> AdaptConfig {
    AdaptConfig {
        episodes: episodes.unwrap_or(base.episodes),
        epochs: epochs.unwrap_or(base.epochs),
        window: window.unwrap_or(base.window),
        ..base
    }
}

/// Regresses an adaptation module onto the encoder's latents.
/// Returns `(module, heldout_mu_error)`.
#[pyfunction]
#[pyo3(signature = (policy, vae, seed=0, episodes=None, epochs=None, window=None))]
fn train_adaptation(
    policy: PyRef<'_, PyPolicy>,
    vae: PyRef<'_, PyVae>,
    seed: u64,
    episodes: Option<usize>,
    epochs: Option<usize>,
    window: Option<usize>,
) -> PyResult<(PyAdapt, f64)> {
    let config = adapt_config(AdaptConfig::default(), episodes, epochs, window);
    let (rho, report) =
        adaptation::train_adaptation(&policy.agent.policy, &vae.vae, &config, &SimConfig::default(), seed).py()?;
    Ok((PyAdapt { rho }, report.heldout_mu_error))
}

/// Fine-tunes a copy of `module` against the frozen policy. Returns
/// `(tuned, heldout_loss_before, heldout_loss_after)`.
#[pyfunction]
#[pyo3(signature = (module, policy, vae, seed=0, episodes=None, epochs=None))]
fn finetune_adaptation(
    module: PyRef<'_, PyAdapt>,
    policy: PyRef<'_, PyPolicy>,
    vae: PyRef<'_, PyVae>,
    seed: u64,
    episodes: Option<usize>,
    epochs: Option<usize>,
) -> PyResult<(PyAdapt, f64, f64)> {
    let config = adapt_config(AdaptConfig::finetune(), episodes, epochs, Some(module.rho.window()));
    let (rho, report) = adaptation::finetune_adaptation(
        &module.rho,
        &policy.agent.policy,
        &vae.vae,
        &config,
        &SimConfig::default(),
        seed,
    )
    .py()?;
    Ok((PyAdapt { rho }, report.heldout_before, report.heldout_after))
}

fn summary(e: &Evaluation) -> BTreeMap<String, f64> {
    e.report.rows().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Evaluates a policy on `episodes` doors drawn from `seed`. With `module`,
/// latents come from the adaptation module instead of the encoder.
/// `scripted` selects the oracle or random controller instead of a policy.
#[pyfunction]
#[pyo3(signature = (policy=None, vae=None, module=None, scripted=None, episodes=20, seed=0))]
fn evaluate(
    policy: Option<PyRef<'_, PyPolicy>>,
    vae: Option<PyRef<'_, PyVae>>,
    module: Option<PyRef<'_, PyAdapt>>,
    scripted: Option<&str>,
    episodes: usize,
    seed: u64,
) -> PyResult<BTreeMap<String, f64>> {
    let options = EvalOptions::new(episodes, seed);
    let variant = match (scripted, &policy, &module) {
        (Some("oracle"), None, None) => PolicyVariant::Oracle,
        (Some("random"), None, None) => PolicyVariant::Random,
        (Some(other), None, None) => return Err(PyValueError::new_err(format!("unknown scripted controller {other:?}"))),
        (None, Some(p), Some(m)) => PolicyVariant::Adaptive { policy: &p.agent.policy, rho: &m.rho },
        (None, Some(p), None) => PolicyVariant::Base { agent: &p.agent, vae: vae.as_ref().map(|v| &v.vae) },
        _ => return Err(PyValueError::new_err("pass either a policy or a scripted controller")),
    };
    Ok(summary(&harness::evaluate(variant, &options).py()?))
}

#[pymodule]
fn hingerl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sample_env, m)?)?;
    m.add_function(wrap_pyfunction!(mean_env, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_env, m)?)?;
    m.add_function(wrap_pyfunction!(field_names, m)?)?;
    m.add_function(wrap_pyfunction!(twist_from_action, m)?)?;
    m.add_function(wrap_pyfunction!(transform_chain, m)?)?;
    m.add_function(wrap_pyfunction!(ideal_wrench, m)?)?;
    m.add_function(wrap_pyfunction!(reward, m)?)?;
    m.add_function(wrap_pyfunction!(train_vae, m)?)?;
    m.add_function(wrap_pyfunction!(train_policy, m)?)?;
    m.add_function(wrap_pyfunction!(train_adaptation, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_adaptation, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_class::<PyDoorSim>()?;
    m.add_class::<PyVae>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyAdapt>()?;
    Ok(())
}
