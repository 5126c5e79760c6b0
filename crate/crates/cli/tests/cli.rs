//! Drives the `fxda` binary on a small configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fxda::config::{Manifest, RunConfig};
use fxda::danet::NetConfig;
use fxda::dataset::{DataConfig, Dataset, Split};
use fxda::evalx::EvalConfig;
use fxda::obsmodel::{Crop, ObsConfig};
use fxda::perturbx::choose_targets;
use fxda::toyatm::{GridSpec, NatureConfig};
use fxda::training::TrainConfig;

fn small() -> RunConfig {
    let crop = Crop { row: 0, col: 16, h: 16, w: 16 };
    RunConfig {
        grid: GridSpec { h: 16, w: 32, ..GridSpec::default() },
        nature: NatureConfig { spinup: 5, ..NatureConfig::default() },
        obs: ObsConfig { crop, ..ObsConfig::default() },
        data: DataConfig { n_train: 4, n_valid: 2, n_test: 3, gap: 1, horizon: 3, ..DataConfig::default() },
        net: NetConfig { widths: [4, 8, 4], h: 16, w: 32, crop, ..NetConfig::default() },
        train: TrainConfig { warmup_steps: 1, total_iterations: 4, rollout: 2, batch_size: 2, checkpoint_every: 2, ..TrainConfig::desk() },
        eval: EvalConfig { leads: 3, bootstrap: 50, smoothing: 2, ..EvalConfig::default() },
        ..RunConfig::default()
    }
}

struct Work {
    tmp: tempfile::TempDir,
    config: PathBuf,
}

impl Work {
    fn new(cfg: &RunConfig) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("run.toml");
        fs::write(&config, cfg.to_toml()).unwrap();
        Self { tmp, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.tmp.path().join(rel)
    }

    fn fxda(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_fxda"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .output()
            .expect("run fxda")
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.fxda(args);
        assert!(out.status.success(), "fxda {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    fn p(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }
}

fn manifest(dir: &Path) -> Manifest {
    toml::from_str(&fs::read_to_string(dir.join("manifest.toml")).unwrap()).unwrap()
}

#[test]
fn generate_is_deterministic_and_recorded() {
    let w = Work::new(&small());
    w.ok(&["generate", "--out", &w.p("a")]);
    w.ok(&["generate", "--out", &w.p("b")]);
    let (ma, mb) = (manifest(&w.path("a")), manifest(&w.path("b")));
    let hash = Dataset::load(&w.path("a")).unwrap().content_hash();
    assert_eq!(ma.inputs["dataset"], hash);
    assert_eq!(mb.inputs["dataset"], hash);
    assert_eq!(RunConfig::load(&w.path("a").join("config.toml")).unwrap(), small());
}

#[test]
fn unknown_config_keys_fail() {
    let w = Work::new(&small());
    fs::write(&w.config, "[train]\nlearning_rate_typo = 1.0\n").unwrap();
    let out = w.fxda(&["generate", "--out", &w.p("d")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate_typo"));
}

#[test]
fn train_resume_evaluate_and_perturb() {
    let w = Work::new(&small());
    w.ok(&["generate", "--out", &w.p("data")]);
    // The corrector never reads observation files.
    let data_no_obs = w.path("data_no_obs");
    fs::create_dir_all(&data_no_obs).unwrap();
    copy_tree(&w.path("data"), &data_no_obs, &|n| !n.ends_with(".obs"));
    w.ok(&["train", "--data", &w.p("data_no_obs"), "--out", &w.p("corr"), "--mode", "corr"]);

    w.ok(&["train", "--data", &w.p("data"), "--out", &w.p("assi"), "--mode", "assi"]);
    let ck = w.path("assi/checkpoints/step000002.ckpt");
    // An interrupted run leaves its loss history behind; resuming keeps the rows up to the checkpoint.
    fs::create_dir_all(w.path("assi2")).unwrap();
    fs::copy(w.path("assi/loss.csv"), w.path("assi2/loss.csv")).unwrap();
    w.ok(&["train", "--data", &w.p("data"), "--out", &w.p("assi2"), "--mode", "assi", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(fs::read(w.path("assi/loss.csv")).unwrap(), fs::read(w.path("assi2/loss.csv")).unwrap());
    assert_eq!(fs::read(w.path("assi/final.ckpt")).unwrap(), fs::read(w.path("assi2/final.ckpt")).unwrap());

    let leak = w.fxda(&["evaluate", "--data", &w.p("data"), "--out", &w.p("leak"), "--split", "train"]);
    assert!(!leak.status.success());

    w.ok(&[
        "evaluate", "--data", &w.p("data"), "--out", &w.p("eval"),
        "--checkpoint", &w.p("assi/final.ckpt"), "--checkpoint", &w.p("corr/final.ckpt"),
    ]);
    let m = manifest(&w.path("eval"));
    assert!(m.values.contains_key("assi_gain_over_corr"));
    assert!(!m.outputs.is_empty());

    let ds = Dataset::load(&w.path("data")).unwrap();
    let s = ds.samples(Split::Test)[0];
    let t = choose_targets(ds.obs(s)).unwrap();
    let spec = format!(
        "[[perturbation]]\nid = \"zero\"\nrow = {}\ncol = {}\nchannel = 9\nmagnitude = 0.0\nwindow = \"end\"\nsky = \"clear\"\n",
        t.clear.0, t.clear.1
    );
    fs::write(w.path("spec.toml"), spec).unwrap();
    for (mode, ck) in [("network", Some(w.p("assi/final.ckpt"))), ("oracle", None)] {
        let out = w.p(&format!("zero_{mode}"));
        let mut args: Vec<String> = ["perturb", "--data", &w.p("data"), "--out", &out, "--mode", mode, "--spec", &w.p("spec.toml")]
            .iter()
            .map(|a| a.to_string())
            .collect();
        if let Some(ck) = ck {
            args.extend(["--checkpoint".to_string(), ck]);
        }
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        w.ok(&refs);
        let mut rd = csv::Reader::from_path(Path::new(&out).join("report.csv")).unwrap();
        let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r[2].parse::<f64>().unwrap() == 0.0), "{mode}: {rows:?}");
    }
}

fn copy_tree(from: &Path, to: &Path, keep: &dyn Fn(&str) -> bool) {
    for e in fs::read_dir(from).unwrap().flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        if !keep(&name) {
            continue;
        }
        let dest = to.join(&name);
        if e.path().is_dir() {
            fs::create_dir_all(&dest).unwrap();
            copy_tree(&e.path(), &dest, keep);
        } else {
            fs::copy(e.path(), dest).unwrap();
        }
    }
}

#[test]
fn oracle_runs_without_a_network_and_ignores_useless_observations() {
    let w = Work::new(&small());
    w.ok(&["generate", "--out", &w.p("data")]);
    w.ok(&["oracle", "--data", &w.p("data"), "--out", &w.p("oracle")]);
    let rows = rmse_rows(&w.path("oracle"));
    assert!(!rows.is_empty());
    assert!(rows.iter().any(|r| r.2 < r.1), "the analysis should improve on the background: {rows:?}");

    let mut noisy = small();
    noisy.oracle.obs_variance = vec![1e12; noisy.channels.len()];
    fs::write(&w.config, noisy.to_toml()).unwrap();
    w.ok(&["oracle", "--data", &w.p("data"), "--out", &w.p("noisy")]);
    for (name, bg, an) in rmse_rows(&w.path("noisy")) {
        assert!((bg - an).abs() <= 1e-6 * bg.max(1.0), "{name}: {bg} vs {an}");
    }
}

fn rmse_rows(dir: &Path) -> Vec<(String, f64, f64)> {
    let mut rd = csv::Reader::from_path(dir.join("oracle_rmse.csv")).unwrap();
    rd.records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap(), r[2].parse().unwrap())
        })
        .collect()
}
