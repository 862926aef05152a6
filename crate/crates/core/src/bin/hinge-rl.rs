use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hinge_rl::adaptation::{finetune_adaptation, train_adaptation, AdaptNet};
use hinge_rl::config::Config;
use hinge_rl::envdomain::{sample_env, FIELD_NAMES};
use hinge_rl::harness::{
    compare_bp_ap_fap, episodes_csv, evaluate, metrics_csv, run_ablation, Evaluation, Experiment, ExperimentSpec,
    PolicyVariant, RunMeta,
};
use hinge_rl::neural::Checkpoint;
use hinge_rl::ppo::{curve_csv, train_base_policy_with, TrainMode, TrainedPolicy};
use hinge_rl::vae::{train_vae, Vae};
use hinge_rl::{Error, Result};

#[derive(Parser)]
#[command(name = "hinge-rl", version, about = "Train and evaluate door-opening policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Run directory; created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Clone, Default)]
struct Checkpoints {
    /// Encoder checkpoint (overrides `checkpoint.vae`).
    #[arg(long)]
    vae: Option<PathBuf>,
    /// Base-policy checkpoint (overrides `checkpoint.policy`).
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Adaptation-module checkpoint (overrides `checkpoint.adapt`).
    #[arg(long)]
    adapt: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Draw random door parameters.
    SampleEnv {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Train the environment encoder.
    TrainVae {
        #[command(flatten)]
        common: Common,
    },
    /// Train a base policy with PPO.
    TrainPolicy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: Checkpoints,
        /// single | dr | no-encoder | 6dof
        #[arg(long, default_value = "dr")]
        mode: String,
        /// Environment steps (overrides `ppo.total_steps`).
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the adaptation module on base-policy rollouts.
    TrainAdapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: Checkpoints,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Fine-tune an adaptation module against the frozen base policy.
    FinetuneAdapt {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: Checkpoints,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
    },
    /// Evaluate a policy on a fixed door sequence.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: Checkpoints,
        /// Evaluate a scripted controller instead: oracle | random.
        #[arg(long)]
        scripted: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run a paired ablation.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// sd_vs_dr | we_vs_woe | 2dof_vs_6dof | ap_vs_fap | rtheta_vs_velocity (overrides `experiment`).
        #[arg(long)]
        experiment: Option<String>,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(common: &Common, ckpt: &Checkpoints) -> Result<Config> {
    let mut config = match &common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for (key, path) in [("checkpoint.vae", &ckpt.vae), ("checkpoint.policy", &ckpt.policy), ("checkpoint.adapt", &ckpt.adapt)]
    {
        if let Some(p) = path {
            config.set(key, p.display())?;
        }
    }
    fs::create_dir_all(&common.out)?;
    Ok(config)
}

fn checkpoint(config: &Config, key: &str) -> Result<Checkpoint> {
    let path = config
        .path(&format!("checkpoint.{key}"))
        .ok_or_else(|| Error::MissingCheckpoint(format!("pass --{key} or set checkpoint.{key}")))?;
    Checkpoint::load(path)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::write(dir.join(name), text)?;
    Ok(())
}

fn write_eval(dir: &Path, meta: &RunMeta, title: &str, eval: &Evaluation, extra: &str) -> Result<()> {
    let mut metrics = metrics_csv(meta, title, &[(eval.variant.as_str(), eval)])?;
    metrics.push_str(extra);
    write(dir, "metrics.csv", &metrics)?;
    write(dir, "trajectory.csv", &eval.trajectory.to_csv())?;
    write(dir, "episodes.csv", &episodes_csv(meta, &[(eval.variant.as_str(), eval)]))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::SampleEnv { common, count } => {
            let config = load_config(&common, &Checkpoints::default())?;
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let mut csv = RunMeta::new(&config, common.seed).header();
            csv.push_str(&format!("index,fingerprint,{}\n", FIELD_NAMES.join(",")));
            for i in 0..count {
                let e = sample_env(&mut rng);
                let values: Vec<String> = e.to_array().iter().map(|v| format!("{v:?}")).collect();
                csv.push_str(&format!("{i},{:016x},{}\n", e.fingerprint(), values.join(",")));
            }
            write(&common.out, "envs.csv", &csv)
        }
        Command::TrainVae { common } => {
            let config = load_config(&common, &Checkpoints::default())?;
            let meta = RunMeta::new(&config, common.seed);
            let (vae, report) = train_vae(&config.vae()?, common.seed)?;
            vae.to_checkpoint().save(common.out.join("vae.ckpt"))?;
            write(&common.out, "curve.csv", &format!("{}{}", meta.header(), report.curve_csv()))?;
            let mut metrics = meta.header();
            metrics.push_str("metric,value\n");
            metrics.push_str(&format!("heldout_mse,{:?}\nmean_probe_r2,{:?}\n", report.heldout_mse, report.mean_probe_r2()));
            for (i, r2) in report.probe_r2.iter().enumerate() {
                metrics.push_str(&format!("probe_r2_{},{:?}\n", FIELD_NAMES[i], r2));
            }
            write(&common.out, "metrics.csv", &metrics)
        }
        Command::TrainPolicy { common, ckpt, mode, steps } => {
            let config = load_config(&common, &ckpt)?;
            let meta = RunMeta::new(&config, common.seed);
            let mode = TrainMode::from_name(&mode)?;
            let mut ppo = config.ppo()?;
            if let Some(s) = steps {
                ppo.total_steps = s;
            }
            let vae = if mode.needs_encoder() { Some(Vae::from_checkpoint(&checkpoint(&config, "vae")?)?) } else { None };
            let run = train_base_policy_with(mode, vae.as_ref(), &ppo, &config.sim()?, common.seed, |row, _| {
                eprintln!(
                    "update {:4}  steps {:9}  reward {:10.4}  |r err| {:.4}  |theta err| {:.4}",
                    row.update, row.env_steps, row.mean_reward, row.mean_r_error, row.mean_theta_error
                )
            })?;
            run.agent.to_checkpoint().save(common.out.join("policy.ckpt"))?;
            write(&common.out, "curve.csv", &format!("{}{}", meta.header(), curve_csv(&run.curve)))?;
            let eval = evaluate(PolicyVariant::Base { agent: &run.agent, vae: vae.as_ref() }, &config.eval(common.seed)?)?;
            write_eval(&common.out, &meta, &format!("base policy, mode {}", mode.name()), &eval, "")
        }
        Command::TrainAdapt { common, ckpt, episodes, window } => {
            let mut config = load_config(&common, &ckpt)?;
            override_adapt(&mut config, "adapt", episodes, window)?;
            let meta = RunMeta::new(&config, common.seed);
            let vae = Vae::from_checkpoint(&checkpoint(&config, "vae")?)?;
            let base = two_parameter_policy(&config)?;
            let (rho, report) = train_adaptation(&base.policy, &vae, &config.adapt()?, &config.sim()?, common.seed)?;
            rho.to_checkpoint().save(common.out.join("adapt.ckpt"))?;
            write(&common.out, "curve.csv", &format!("{}{}", meta.header(), report.curve_csv()))?;
            let eval = evaluate(PolicyVariant::Adaptive { policy: &base.policy, rho: &rho }, &config.eval(common.seed)?)?;
            let extra = format!(
                "heldout_mu_error,{:?}\nbaseline_mu_error,{:?}\n",
                report.heldout_mu_error, report.baseline_mu_error
            );
            write_eval(&common.out, &meta, "adaptive policy", &eval, &extra)
        }
        Command::FinetuneAdapt { common, ckpt, episodes, window } => {
            let mut config = load_config(&common, &ckpt)?;
            override_adapt(&mut config, "finetune", episodes, window)?;
            let meta = RunMeta::new(&config, common.seed);
            let vae = Vae::from_checkpoint(&checkpoint(&config, "vae")?)?;
            let base = two_parameter_policy(&config)?;
            let rho = AdaptNet::from_checkpoint(&checkpoint(&config, "adapt")?)?;
            let (tuned, report) =
                finetune_adaptation(&rho, &base.policy, &vae, &config.finetune()?, &config.sim()?, common.seed)?;
            tuned.to_checkpoint().save(common.out.join("finetuned.ckpt"))?;
            write(&common.out, "curve.csv", &format!("{}{}", meta.header(), report.curve_csv()))?;
            let eval = evaluate(PolicyVariant::Adaptive { policy: &base.policy, rho: &tuned }, &config.eval(common.seed)?)?;
            let extra = format!(
                "heldout_action_loss_before,{:?}\nheldout_action_loss_after,{:?}\nbase_heldout_action_loss_before,{:?}\nbase_heldout_action_loss_after,{:?}\npolicy_checksum,{:016x}\n",
                report.heldout_before,
                report.heldout_after,
                report.base_heldout_before,
                report.base_heldout_after,
                report.policy_checksum
            );
            write_eval(&common.out, &meta, "fine-tuned adaptive policy", &eval, &extra)
        }
        Command::Eval { common, ckpt, scripted, episodes } => {
            let mut config = load_config(&common, &ckpt)?;
            if let Some(n) = episodes {
                config.set("eval.episodes", n)?;
            }
            let meta = RunMeta::new(&config, common.seed);
            let options = config.eval(common.seed)?;
            let eval = match scripted.as_deref() {
                Some("oracle") => evaluate(PolicyVariant::Oracle, &options)?,
                Some("random") => evaluate(PolicyVariant::Random, &options)?,
                Some(other) => return Err(Error::InvalidArgument(format!("unknown scripted controller {other:?}"))),
                None => {
                    let base = TrainedPolicy::from_checkpoint(&checkpoint(&config, "policy")?)?;
                    let vae = match config.path("checkpoint.vae") {
                        Some(p) => Some(Vae::from_checkpoint(&Checkpoint::load(p)?)?),
                        None => None,
                    };
                    match config.path("checkpoint.adapt") {
                        Some(p) => {
                            let rho = AdaptNet::from_checkpoint(&Checkpoint::load(p)?)?;
                            evaluate(PolicyVariant::Adaptive { policy: &base.policy, rho: &rho }, &options)?
                        }
                        None => evaluate(PolicyVariant::Base { agent: &base, vae: vae.as_ref() }, &options)?,
                    }
                }
            };
            write_eval(&common.out, &meta, &format!("evaluation of {}", eval.variant), &eval, "")
        }
        Command::Ablate { common, experiment, episodes } => {
            let mut config = load_config(&common, &Checkpoints::default())?;
            if let Some(e) = experiment {
                config.set("experiment", e)?;
            }
            if let Some(n) = episodes {
                config.set("eval.episodes", n)?;
            }
            let meta = RunMeta::new(&config, common.seed);
            let spec = ExperimentSpec::from_config(&config, common.seed)?;
            let result = run_ablation(&spec)?;
            write(&common.out, "metrics.csv", &result.to_csv(&meta)?)?;
            let evals: Vec<(&str, &Evaluation)> = result.arms.iter().map(|(n, e)| (n.as_str(), e)).collect();
            write(&common.out, "episodes.csv", &episodes_csv(&meta, &evals))?;
            write(&common.out, "trajectory.csv", &result.arms[0].1.trajectory.to_csv())?;
            if spec.experiment == Experiment::ApVsFap {
                let vae = Vae::from_checkpoint(&checkpoint(&config, "vae")?)?;
                let base = TrainedPolicy::from_checkpoint(&checkpoint(&config, "dr")?)?;
                let ap = AdaptNet::from_checkpoint(&checkpoint(&config, "adapt")?)?;
                let fap = AdaptNet::from_checkpoint(&checkpoint(&config, "finetuned")?)?;
                let all = compare_bp_ap_fap(&base, &vae, &ap, &fap, &spec.options)?;
                write(&common.out, "boxplot.csv", &all.boxplot_csv(&meta))?;
            }
            Ok(())
        }
    }
}

fn override_adapt(config: &mut Config, section: &str, episodes: Option<usize>, window: Option<usize>) -> Result<()> {
    if let Some(n) = episodes {
        config.set(&format!("{section}.episodes"), n)?;
    }
    if let Some(n) = window {
        config.set("adapt.window", n)?;
    }
    Ok(())
}

fn two_parameter_policy(config: &Config) -> Result<TrainedPolicy> {
    let base = TrainedPolicy::from_checkpoint(&checkpoint(config, "policy")?)?;
    if base.feature_net.is_some() || base.mode == TrainMode::SixDof {
        return Err(Error::InvalidArgument(format!(
            "the adaptation module needs an encoder-conditioned two-parameter policy, got mode {}",
            base.mode.name()
        )));
    }
    Ok(base)
}
