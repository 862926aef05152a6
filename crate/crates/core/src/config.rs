//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Keys are dotted
//! (`ppo.lr`, `adapt.window`); every key must be one this crate knows.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::adaptation::AdaptConfig;
use crate::doorsim::SimConfig;
use crate::error::{Error, Result};
use crate::harness::{EvalOptions, Pooling};
use crate::policy::RewardWeights;
use crate::ppo::PpoConfig;
use crate::vae::VaeConfig;

const KNOWN_KEYS: &[&str] = &[
    "vae.samples",
    "vae.holdout",
    "vae.epochs",
    "vae.batch",
    "vae.lr",
    "vae.input_gain",
    "vae.ridge_lambda",
    "ppo.lr",
    "ppo.clip",
    "ppo.gamma",
    "ppo.lambda",
    "ppo.epochs",
    "ppo.minibatch",
    "ppo.horizon",
    "ppo.workers",
    "ppo.ent_coef",
    "ppo.vf_coef",
    "ppo.max_grad_norm",
    "ppo.total_steps",
    "ppo.window",
    "ppo.reward_scaling",
    "ppo.velocity_supervised",
    "reward.k1",
    "reward.k2",
    "reward.k3",
    "reward.k4",
    "reward.k5",
    "adapt.window",
    "adapt.lr",
    "adapt.batch",
    "adapt.episodes",
    "adapt.epochs",
    "adapt.stride",
    "adapt.heldout_episodes",
    "finetune.lr",
    "finetune.batch",
    "finetune.episodes",
    "finetune.epochs",
    "finetune.stride",
    "finetune.heldout_episodes",
    "finetune.closed_loop",
    "eval.episodes",
    "eval.pooling",
    "eval.sample_latent",
    "sim.substeps",
    "sim.max_steps",
    "sim.linear_stiffness",
    "sim.angular_stiffness",
    "sim.damping_ratio",
    "sim.friction_torque_scale",
    "experiment",
    "checkpoint.vae",
    "checkpoint.policy",
    "checkpoint.single",
    "checkpoint.dr",
    "checkpoint.no_encoder",
    "checkpoint.sixdof",
    "checkpoint.velocity",
    "checkpoint.adapt",
    "checkpoint.finetuned",
];

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Config {
    entries: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("config line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Parse(format!("config line {}: unknown key {key:?}", n + 1)));
            }
            if entries.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Parse(format!("config line {}: duplicate key {key:?}", n + 1)));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(Error::Parse(format!("unknown key {key:?}")));
        }
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| v.parse().map_err(|_| Error::Parse(format!("bad value {v:?} for {key}"))))
            .transpose()
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    /// Sorted `key = value` lines; the hashed form.
    pub fn canonical(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of [`Config::canonical`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    fn apply<T: FromStr>(&self, key: &str, field: &mut T) -> Result<()> {
        if let Some(v) = self.get(key)? {
            *field = v;
        }
        Ok(())
    }

    pub fn vae(&self) -> Result<VaeConfig> {
        let mut c = VaeConfig::default();
        self.apply("vae.samples", &mut c.samples)?;
        self.apply("vae.holdout", &mut c.holdout)?;
        self.apply("vae.epochs", &mut c.epochs)?;
        self.apply("vae.batch", &mut c.batch_size)?;
        self.apply("vae.lr", &mut c.lr)?;
        self.apply("vae.input_gain", &mut c.input_gain)?;
        self.apply("vae.ridge_lambda", &mut c.ridge_lambda)?;
        Ok(c)
    }

    pub fn weights(&self) -> Result<RewardWeights> {
        let mut w = RewardWeights::default();
        self.apply("reward.k1", &mut w.k1)?;
        self.apply("reward.k2", &mut w.k2)?;
        self.apply("reward.k3", &mut w.k3)?;
        self.apply("reward.k4", &mut w.k4)?;
        self.apply("reward.k5", &mut w.k5)?;
        if [w.k1, w.k2, w.k3, w.k4, w.k5].iter().any(|k| !(*k >= 0.0)) {
            return Err(Error::Parse("reward weights must be non-negative".into()));
        }
        Ok(w)
    }

    pub fn ppo(&self) -> Result<PpoConfig> {
        let mut c = PpoConfig { weights: self.weights()?, ..PpoConfig::default() };
        self.apply("ppo.lr", &mut c.lr)?;
        self.apply("ppo.clip", &mut c.clip)?;
        self.apply("ppo.gamma", &mut c.gamma)?;
        self.apply("ppo.lambda", &mut c.lambda)?;
        self.apply("ppo.epochs", &mut c.epochs)?;
        self.apply("ppo.minibatch", &mut c.minibatch)?;
        self.apply("ppo.horizon", &mut c.horizon)?;
        self.apply("ppo.workers", &mut c.workers)?;
        self.apply("ppo.ent_coef", &mut c.ent_coef)?;
        self.apply("ppo.vf_coef", &mut c.vf_coef)?;
        self.apply("ppo.max_grad_norm", &mut c.max_grad_norm)?;
        self.apply("ppo.total_steps", &mut c.total_steps)?;
        self.apply("ppo.window", &mut c.window)?;
        self.apply("ppo.reward_scaling", &mut c.reward_scaling)?;
        self.apply("ppo.velocity_supervised", &mut c.velocity_supervised)?;
        c.validate()?;
        Ok(c)
    }

    fn adapt_section(&self, section: &str, mut c: AdaptConfig) -> Result<AdaptConfig> {
        self.apply(&format!("{section}.lr"), &mut c.lr)?;
        self.apply(&format!("{section}.batch"), &mut c.batch)?;
        self.apply(&format!("{section}.episodes"), &mut c.episodes)?;
        self.apply(&format!("{section}.epochs"), &mut c.epochs)?;
        self.apply(&format!("{section}.stride"), &mut c.stride)?;
        self.apply(&format!("{section}.heldout_episodes"), &mut c.heldout_episodes)?;
        self.apply("adapt.window", &mut c.window)?;
        c.validate()?;
        Ok(c)
    }

    pub fn adapt(&self) -> Result<AdaptConfig> {
        self.adapt_section("adapt", AdaptConfig::default())
    }

    /// Fine-tuning settings; the window always follows `adapt.window`.
    pub fn finetune(&self) -> Result<AdaptConfig> {
        let mut c = self.adapt_section("finetune", AdaptConfig::finetune())?;
        self.apply("finetune.closed_loop", &mut c.closed_loop)?;
        Ok(c)
    }

    pub fn sim(&self) -> Result<SimConfig> {
        let mut c = SimConfig::default();
        self.apply("sim.substeps", &mut c.substeps)?;
        self.apply("sim.max_steps", &mut c.max_steps)?;
        self.apply("sim.linear_stiffness", &mut c.linear_stiffness)?;
        self.apply("sim.angular_stiffness", &mut c.angular_stiffness)?;
        self.apply("sim.damping_ratio", &mut c.damping_ratio)?;
        self.apply("sim.friction_torque_scale", &mut c.friction_torque_scale)?;
        Ok(c)
    }

    pub fn eval(&self, seed: u64) -> Result<EvalOptions> {
        let mut o = EvalOptions::new(20, seed);
        self.apply("eval.episodes", &mut o.episodes)?;
        self.apply("eval.sample_latent", &mut o.sample_latent)?;
        o.sim = self.sim()?;
        o.weights = self.weights()?;
        o.pooling = match self.raw("eval.pooling") {
            None | Some("steps") => Pooling::Steps,
            Some("episodes") => Pooling::Episodes,
            Some(other) => return Err(Error::Parse(format!("eval.pooling must be steps or episodes, got {other:?}"))),
        };
        Ok(o)
    }
}
