use std::collections::BTreeMap;
use std::path::PathBuf;

use super::eval::{evaluate, EvalOptions, Evaluation, PolicyVariant};
use crate::adaptation::AdaptNet;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::neural::Checkpoint;
use crate::ppo::{TrainMode, TrainedPolicy};
use crate::vae::Vae;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Experiment {
    SdVsDr,
    WeVsWoe,
    TwoDofVs6Dof,
    ApVsFap,
    RthetaVsVelocity,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::SdVsDr,
        Experiment::WeVsWoe,
        Experiment::TwoDofVs6Dof,
        Experiment::ApVsFap,
        Experiment::RthetaVsVelocity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::SdVsDr => "sd_vs_dr",
            Experiment::WeVsWoe => "we_vs_woe",
            Experiment::TwoDofVs6Dof => "2dof_vs_6dof",
            Experiment::ApVsFap => "ap_vs_fap",
            Experiment::RthetaVsVelocity => "rtheta_vs_velocity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|e| e.name() == name).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown experiment {name:?}; expected one of {}",
                Self::ALL.map(|e| e.name()).join(", ")
            ))
        })
    }

    pub fn description(self) -> &'static str {
        match self {
            Experiment::SdVsDr => "single-door training vs domain-randomized training",
            Experiment::WeVsWoe => "policy with environment encoder vs end-to-end policy without it",
            Experiment::TwoDofVs6Dof => "two-parameter action vs six-dimensional twist action",
            Experiment::ApVsFap => "adaptive policy vs fine-tuned adaptive policy",
            Experiment::RthetaVsVelocity => "(r, theta) supervised reward vs velocity supervised reward",
        }
    }

    /// Checkpoint config keys of the two arms, in column order.
    pub fn arms(self) -> [&'static str; 2] {
        match self {
            Experiment::SdVsDr => ["single", "dr"],
            Experiment::WeVsWoe => ["dr", "no_encoder"],
            Experiment::TwoDofVs6Dof => ["dr", "sixdof"],
            Experiment::ApVsFap => ["adapt", "finetuned"],
            Experiment::RthetaVsVelocity => ["dr", "velocity"],
        }
    }

    /// Every checkpoint key the experiment loads.
    pub fn required_checkpoints(self) -> Vec<&'static str> {
        let mut keys = vec!["vae"];
        if self == Experiment::ApVsFap {
            keys.push("dr");
        }
        keys.extend(self.arms());
        keys
    }
}

/// Metadata written at the top of every CSV report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub git_revision: String,
}

impl RunMeta {
    pub fn new(config: &Config, seed: u64) -> Self {
        Self { config_hash: config.hash(), seed, git_revision: git_revision() }
    }

    pub fn header(&self) -> String {
        format!("# config_sha256: {}\n# seed: {}\n# git_revision: {}\n", self.config_hash, self.seed, self.git_revision)
    }
}

/// Short revision of the enclosing git checkout, or `unknown`.
pub fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "--short=12", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Side-by-side metrics of evaluations that share a door sequence.
pub fn metrics_csv(meta: &RunMeta, title: &str, evals: &[(&str, &Evaluation)]) -> Result<String> {
    if let Some((_, first)) = evals.first() {
        if evals.iter().any(|(_, e)| e.doors != first.doors) {
            return Err(Error::InvalidArgument("paired evaluations saw different doors".into()));
        }
    }
    let mut s = format!("# experiment: {title}\n");
    s.push_str(&meta.header());
    if let Some((_, first)) = evals.first() {
        let doors: Vec<String> = first.doors.iter().map(|d| format!("{d:016x}")).collect();
        s.push_str(&format!("# doors: {}\n", doors.join(" ")));
    }
    s.push_str("metric");
    for (name, _) in evals {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    let rows: Vec<_> = evals.iter().map(|(_, e)| e.report.rows()).collect();
    if let Some(first) = rows.first() {
        for (i, (metric, _)) in first.iter().enumerate() {
            s.push_str(metric);
            for r in &rows {
                s.push_str(&format!(",{:?}", r[i].1));
            }
            s.push('\n');
        }
    }
    Ok(s)
}

/// One row per episode per evaluation, for distribution plots.
pub fn episodes_csv(meta: &RunMeta, evals: &[(&str, &Evaluation)]) -> String {
    let mut s = meta.header();
    s.push_str(
        "policy,episode,door,success,steps,final_angle,mean_reward,mean_r_error,mean_theta_error,mean_velocity_error,mean_force,mean_torque\n",
    );
    for (name, e) in evals {
        for (i, ep) in e.episodes.iter().enumerate() {
            s.push_str(&format!(
                "{name},{i},{:016x},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?}\n",
                ep.door,
                u8::from(ep.success),
                ep.steps,
                ep.final_angle,
                ep.mean_reward,
                ep.mean_r_error,
                ep.mean_theta_error,
                ep.mean_velocity_error,
                ep.mean_force,
                ep.mean_torque
            ));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub experiment: Experiment,
    pub options: EvalOptions,
    pub checkpoints: BTreeMap<String, PathBuf>,
}

impl ExperimentSpec {
    /// Reads the experiment name, evaluation options and `checkpoint.*` paths.
    pub fn from_config(config: &Config, seed: u64) -> Result<Self> {
        let name = config.raw("experiment").ok_or_else(|| Error::InvalidArgument("config lacks `experiment`".into()))?;
        let experiment = Experiment::from_name(name)?;
        let mut checkpoints = BTreeMap::new();
        for key in experiment.required_checkpoints() {
            let path = config
                .path(&format!("checkpoint.{key}"))
                .ok_or_else(|| Error::MissingCheckpoint(format!("config lacks checkpoint.{key}")))?;
            checkpoints.insert(key.to_string(), path);
        }
        Ok(Self { experiment, options: config.eval(seed)?, checkpoints })
    }

    fn load(&self, key: &str) -> Result<Checkpoint> {
        let path = self.checkpoints.get(key).ok_or_else(|| Error::MissingCheckpoint(format!("checkpoint.{key}")))?;
        Checkpoint::load(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationResult {
    pub experiment: Experiment,
    pub arms: Vec<(String, Evaluation)>,
}

impl AblationResult {
    pub fn to_csv(&self, meta: &RunMeta) -> Result<String> {
        let evals: Vec<(&str, &Evaluation)> = self.arms.iter().map(|(n, e)| (n.as_str(), e)).collect();
        let title = format!("{} ({})", self.experiment.name(), self.experiment.description());
        metrics_csv(meta, &title, &evals)
    }

    pub fn arm(&self, name: &str) -> Option<&Evaluation> {
        self.arms.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }
}

/// Evaluates named variants on the same doors.
pub fn compare(experiment: Experiment, arms: &[(&str, PolicyVariant<'_>)], options: &EvalOptions) -> Result<AblationResult> {
    let arms = arms.iter().map(|(n, v)| Ok((n.to_string(), evaluate(*v, options)?))).collect::<Result<Vec<_>>>()?;
    Ok(AblationResult { experiment, arms })
}

/// Loads both arms of `spec` and evaluates them on identical door sequences.
pub fn run_ablation(spec: &ExperimentSpec) -> Result<AblationResult> {
    let vae = Vae::from_checkpoint(&spec.load("vae")?)?;
    let [a, b] = spec.experiment.arms();
    if spec.experiment == Experiment::ApVsFap {
        let base = TrainedPolicy::from_checkpoint(&spec.load("dr")?)?;
        if base.mode.space() != TrainMode::DomainRandomized.space() {
            return Err(Error::Checkpoint("the adaptive policy needs a two-parameter base policy".into()));
        }
        let ap = AdaptNet::from_checkpoint(&spec.load(a)?)?;
        let fap = AdaptNet::from_checkpoint(&spec.load(b)?)?;
        let arms = [
            (a, PolicyVariant::Adaptive { policy: &base.policy, rho: &ap }),
            (b, PolicyVariant::Adaptive { policy: &base.policy, rho: &fap }),
        ];
        return compare(spec.experiment, &arms, &spec.options);
    }
    let pa = TrainedPolicy::from_checkpoint(&spec.load(a)?)?;
    let pb = TrainedPolicy::from_checkpoint(&spec.load(b)?)?;
    let arms = [(a, PolicyVariant::Base { agent: &pa, vae: Some(&vae) }), (b, PolicyVariant::Base { agent: &pb, vae: Some(&vae) })];
    compare(spec.experiment, &arms, &spec.options)
}

/// Base policy, adaptive policy and fine-tuned adaptive policy on identical doors.
#[derive(Debug, Clone, PartialEq)]
pub struct BpApFap {
    pub bp: Evaluation,
    pub ap: Evaluation,
    pub fap: Evaluation,
}

impl BpApFap {
    pub fn metrics_csv(&self, meta: &RunMeta) -> Result<String> {
        metrics_csv(meta, "base vs adaptive vs fine-tuned adaptive policy", &self.named())
    }

    /// `3 * episodes` rows, one per policy and episode.
    pub fn boxplot_csv(&self, meta: &RunMeta) -> String {
        episodes_csv(meta, &self.named())
    }

    fn named(&self) -> [(&str, &Evaluation); 3] {
        [("bp", &self.bp), ("ap", &self.ap), ("fap", &self.fap)]
    }
}

pub fn compare_bp_ap_fap(
    base: &TrainedPolicy,
    vae: &Vae,
    rho: &AdaptNet,
    rho_star: &AdaptNet,
    options: &EvalOptions,
) -> Result<BpApFap> {
    Ok(BpApFap {
        bp: evaluate(PolicyVariant::Base { agent: base, vae: Some(vae) }, options)?,
        ap: evaluate(PolicyVariant::Adaptive { policy: &base.policy, rho }, options)?,
        fap: evaluate(PolicyVariant::Adaptive { policy: &base.policy, rho: rho_star }, options)?,
    })
}
