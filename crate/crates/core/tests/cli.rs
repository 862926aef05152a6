use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
vae.samples = 2000
vae.holdout = 500
vae.epochs = 2
ppo.horizon = 128
ppo.workers = 2
ppo.minibatch = 64
ppo.epochs = 1
ppo.total_steps = 256
adapt.episodes = 2
adapt.epochs = 1
adapt.heldout_episodes = 1
adapt.stride = 20
finetune.episodes = 2
finetune.epochs = 1
finetune.heldout_episodes = 1
finetune.stride = 20
eval.episodes = 2
sim.max_steps = 60
";

fn hinge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hinge-rl")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = hinge(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(path: impl AsRef<Path>) -> String {
    fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// Runs the whole pipeline into `dir` with small settings.
fn pipeline(dir: &Path) {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let config = p("run.conf");
    fs::write(&config, SMALL).unwrap();
    let common = |out: &str| vec!["--config".to_string(), config.clone(), "--seed".into(), "3".into(), "--out".into(), p(out)];
    let run = |cmd: &str, out: &str, extra: &[&str]| {
        let mut args = vec![cmd.to_string()];
        args.extend(common(out));
        args.extend(extra.iter().map(|s| s.to_string()));
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    };
    run("sample-env", "env", &["--count", "5"]);
    run("train-vae", "vae", &[]);
    let vae = p("vae/vae.ckpt");
    run("train-policy", "dr", &["--mode", "dr", "--vae", &vae]);
    run("train-policy", "single", &["--mode", "single", "--vae", &vae, "--steps", "256"]);
    let policy = p("dr/policy.ckpt");
    run("train-adapt", "adapt", &["--vae", &vae, "--policy", &policy, "--episodes", "2", "--window", "40"]);
    let adapt = p("adapt/adapt.ckpt");
    run("finetune-adapt", "fap", &["--vae", &vae, "--policy", &policy, "--adapt", &adapt, "--window", "40"]);
    run("eval", "eval", &["--vae", &vae, "--policy", &policy]);
    run("eval", "oracle", &["--scripted", "oracle", "--episodes", "3"]);
    let ablate = format!(
        "{SMALL}experiment = ap_vs_fap\ncheckpoint.vae = {vae}\ncheckpoint.dr = {policy}\ncheckpoint.adapt = {adapt}\ncheckpoint.finetuned = {}\ncheckpoint.single = {}\n",
        p("fap/finetuned.ckpt"),
        p("single/policy.ckpt")
    );
    let ablate_conf = p("ablate.conf");
    fs::write(&ablate_conf, ablate).unwrap();
    ok(&["ablate", "--config", &ablate_conf, "--seed", "3", "--out", &p("apfap")]);
    ok(&["ablate", "--config", &ablate_conf, "--seed", "3", "--out", &p("sddr"), "--experiment", "sd_vs_dr"]);
}

#[test]
fn pipeline_writes_reports_and_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());

    assert_eq!(read(a.path().join("env/envs.csv")).lines().filter(|l| !l.starts_with('#')).count(), 6);
    for run in ["vae", "dr", "single", "eval", "apfap", "sddr"] {
        assert!(a.path().join(run).join("metrics.csv").exists(), "{run} lacks metrics.csv");
    }
    for run in ["dr", "eval", "oracle", "apfap"] {
        assert!(a.path().join(run).join("trajectory.csv").exists(), "{run} lacks trajectory.csv");
    }
    assert!(a.path().join("dr/curve.csv").exists());

    let metrics = read(a.path().join("eval/metrics.csv"));
    assert!(metrics.starts_with('#') && metrics.contains("config_sha256") && metrics.contains("seed: 3"));

    let boxplot = read(a.path().join("apfap/boxplot.csv"));
    let rows = boxplot.lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 1 + 3 * 2, "header plus bp/ap/fap per episode");

    // everything except the config paths, which name the temp dirs, must match
    for file in [
        "env/envs.csv",
        "vae/curve.csv",
        "dr/curve.csv",
        "dr/trajectory.csv",
        "eval/trajectory.csv",
        "apfap/boxplot.csv",
        "sddr/episodes.csv",
    ] {
        let strip = |s: String| s.lines().filter(|l| !l.starts_with("# config")).collect::<Vec<_>>().join("\n");
        assert_eq!(strip(read(a.path().join(file))), strip(read(b.path().join(file))), "{file} differs between reruns");
    }
    assert_eq!(fs::read(a.path().join("dr/policy.ckpt")).unwrap(), fs::read(b.path().join("dr/policy.ckpt")).unwrap());
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let cases: Vec<Vec<&str>> = vec![
        vec!["train-policy", "--mode", "sideways", "--out", out_dir],
        vec!["train-policy", "--mode", "dr", "--out", out_dir, "--steps", "10"],
        vec!["eval", "--out", out_dir, "--policy", "/nonexistent/policy.ckpt"],
        vec!["ablate", "--out", out_dir],
        vec!["train-vae", "--config", "/nonexistent.conf", "--out", out_dir],
    ];
    for args in cases {
        let out = hinge(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("error"), "{args:?}: {err}");
    }
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "ppo.learning_rate = 1\n").unwrap();
    let out = hinge(&["train-vae", "--config", bad.to_str().unwrap(), "--out", out_dir]);
    assert!(!out.status.success() && String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}
