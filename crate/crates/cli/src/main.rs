use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use fxda::config::{Manifest, RunConfig};
use fxda::danet::{DaNet, Variant};
use fxda::dataset::{generate, Dataset, Split};
use fxda::evalx::{regional_rmse, run_experiments, Experiment};
use fxda::exec::{self, Mode};
use fxda::formats;
use fxda::perturbx::{consistency_battery, crop_norm, oracle_increment, perturbed_increment, Outcome, PerturbSpec};
use fxda::toyatm::{GridState, ToyModel};
use fxda::training::{self, TrainState};
use fxda::obsmodel::Crop;
use fxda::varoracle::OracleProblem;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "fxda", version, about = "Desk-scale neural satellite data assimilation experiments")]
struct Cli {
    /// Run configuration (TOML). Defaults apply to every key it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the truth run, backgrounds and observations.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an assimilation (assi) or correction (corr) network.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: NetMode,
        /// Overrides `train.seed` (initialization and sample order).
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score CTRL, CORR and ASSI analyses and their forecasts.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Trained networks; the variant is read from each checkpoint. CTRL needs none.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Overrides `eval.seed` (bootstrap).
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `eval.split`.
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
    /// Single-observation perturbation experiments.
    Perturb {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "network")]
        mode: PerturbMode,
        /// Assimilation checkpoint (network mode).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// TOML file of `[[perturbation]]` entries; without it the consistency battery runs.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Classical variational analysis over the observation crop, compared with a network.
    Oracle {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sample index; defaults to the configured test sample.
        #[arg(long)]
        sample: Option<usize>,
        /// Assimilation checkpoint to compare against.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NetMode {
    Assi,
    Corr,
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbMode {
    Network,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    perturbation: Vec<PerturbSpec>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let args: Vec<String> = std::env::args().skip(1).collect();
    match cli.command {
        Command::Generate { out, seed } => {
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            cfg.validate()?;
            cmd_generate(&cfg, &out, args)
        }
        Command::Train { data, out, mode, seed, checkpoint } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            cmd_train(&cfg, &data, &out, mode, checkpoint.as_deref(), args)
        }
        Command::Evaluate { data, out, checkpoint, seed, split } => {
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            if let Some(s) = split {
                cfg.eval.split = s.into();
            }
            cfg.validate()?;
            cmd_evaluate(&cfg, &data, &out, &checkpoint, args)
        }
        Command::Perturb { data, out, mode, checkpoint, spec } => {
            cfg.validate()?;
            cmd_perturb(&cfg, &data, &out, mode, checkpoint.as_deref(), spec.as_deref(), args)
        }
        Command::Oracle { data, out, sample, checkpoint } => {
            cfg.validate()?;
            cmd_oracle(&cfg, &data, &out, sample, checkpoint.as_deref(), args)
        }
    }
}

fn load_net(path: &Path) -> Result<DaNet<f32>> {
    let ck = formats::read_checkpoint(path)?;
    Ok(training::restore(&ck).with_context(|| format!("restoring {}", path.display()))?.net)
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(formats::sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

fn finish(cfg: &RunConfig, out: &Path, mut manifest: Manifest) -> Result<()> {
    cfg.write_resolved(out)?;
    manifest.record_outputs(out)?;
    manifest.write(out)?;
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, out: &Path, args: Vec<String>) -> Result<()> {
    let ds = generate(cfg.recipe(), Mode::Parallel)?;
    ds.save(out)?;
    cfg.write_resolved(out)?;
    let hash = ds.content_hash();
    let mut m = Manifest::new("generate", args);
    m.inputs.insert("dataset".into(), hash.clone());
    m.write(out)?;
    for split in Split::ALL {
        let r = ds.splits.get(split);
        println!("{:<5} samples {}..{}", split.name(), r.start, r.end);
    }
    println!("dataset {hash}");
    Ok(())
}

/// Rows of an earlier loss CSV up to `step`, so a resumed run extends the same history.
fn previous_losses(path: &Path, step: u64) -> Result<Vec<training::LossRecord>> {
    if step == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    let mut rows = Vec::new();
    for r in csv::Reader::from_path(path)?.deserialize() {
        let r: training::LossRecord = r?;
        if r.step <= step {
            rows.push(r);
        }
    }
    if rows.len() as u64 != step {
        bail!("{} holds {} rows before step {step}; cannot splice the resumed history", path.display(), rows.len());
    }
    Ok(rows)
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, mode: NetMode, resume: Option<&Path>, args: Vec<String>) -> Result<()> {
    let variant = match mode {
        NetMode::Assi => Variant::Assimilation,
        NetMode::Corr => Variant::Correction,
    };
    let ds = match variant {
        Variant::Assimilation => Dataset::load(data)?,
        Variant::Correction => Dataset::load_without_obs(data)?,
    };
    if ds.grid != cfg.grid {
        bail!("dataset grid differs from the configured grid");
    }
    let model = ToyModel::new(&cfg.grid, &cfg.forecast)?;
    let mut m = Manifest::new("train", args);
    m.inputs.insert("dataset".into(), ds.content_hash());
    let mut state = match resume {
        Some(p) => {
            m.inputs.insert("resume".into(), file_digest(p)?);
            let s = training::restore(&formats::read_checkpoint(p)?)?;
            if s.net.variant() != variant {
                bail!("checkpoint holds a {:?} network, not {variant:?}", s.net.variant());
            }
            s
        }
        None => {
            let mut net = DaNet::<f32>::new(&cfg.net, variant, cfg.train.seed)?;
            net.set_normalization(&training::fit_normalization(&ds))?;
            TrainState::new(net)
        }
    };
    let loss_path = out.join("loss.csv");
    let mut history = previous_losses(&loss_path, state.step())?;
    let every = (cfg.train.total_iterations / 20).max(1);
    let rows = training::train(&mut state, &ds, &model, &cfg.train, Some(&out.join("checkpoints")), Mode::Parallel, |r| {
        if r.step % every == 0 {
            println!("step {:>6}  lr {:.3e}  l0 {:.5}  total {:.5}", r.step, r.lr, r.l0, r.total);
        }
    })?;
    history.extend(rows);
    training::write_loss_csv(&loss_path, &history)?;
    formats::write_checkpoint(&out.join("final.ckpt"), &training::checkpoint_of(&state))?;
    if let Some(last) = history.last() {
        m.values.insert("final_total_loss".into(), last.total);
    }
    finish(cfg, out, m)
}

fn cmd_evaluate(cfg: &RunConfig, data: &Path, out: &Path, checkpoints: &[PathBuf], args: Vec<String>) -> Result<()> {
    let ds = Dataset::load(data)?;
    let mut m = Manifest::new("evaluate", args);
    m.inputs.insert("dataset".into(), ds.content_hash());
    let (mut assi, mut corr) = (None, None);
    for p in checkpoints {
        let net = load_net(p)?;
        let slot = match net.variant() {
            Variant::Assimilation => &mut assi,
            Variant::Correction => &mut corr,
        };
        if slot.is_some() {
            bail!("more than one {:?} checkpoint given", net.variant());
        }
        m.inputs.insert(format!("{:?}", net.variant()).to_lowercase(), file_digest(p)?);
        *slot = Some(net);
    }
    let model = ToyModel::new(&cfg.grid, &cfg.forecast)?;
    let report = run_experiments(&ds, assi.as_ref(), corr.as_ref(), &model, &cfg.eval, Mode::Parallel)?;
    report.write(out)?;
    for r in &report.runs {
        let e = r.experiment;
        let q = report.q_crop(e, 0)?;
        m.values.insert(format!("{}_crop_q_rmse", e.label()), q);
        println!("{:<9} crop Q RMSE {q:.4}", e.label());
    }
    if assi.is_some() && corr.is_some() {
        let (mean, lo, hi) = report.q_crop_gain_ci(Experiment::Assi, Experiment::Corr, 0)?;
        m.values.insert("assi_gain_over_corr".into(), mean);
        m.values.insert("assi_gain_over_corr_ci_low".into(), lo);
        m.values.insert("assi_gain_over_corr_ci_high".into(), hi);
        println!("ASSI gain over CORR {mean:.4} [{lo:.4}, {hi:.4}]");
    }
    finish(cfg, out, m)
}

fn cmd_perturb(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    mode: PerturbMode,
    checkpoint: Option<&Path>,
    spec: Option<&Path>,
    args: Vec<String>,
) -> Result<()> {
    let ds = Dataset::load(data)?;
    let test = ds.samples(Split::Test);
    let s = *test
        .get(cfg.perturb.test_sample)
        .with_context(|| format!("test split has {} samples", test.len()))?;
    let (bg, obs) = (ds.background(s), ds.obs(s));
    let rad = cfg.radiometer()?;
    let (b, r) = (cfg.oracle_b(), cfg.oracle_r());
    let setup = cfg.oracle_setup(&rad, &b, &r);
    let mut m = Manifest::new("perturb", args);
    m.inputs.insert("dataset".into(), ds.content_hash());
    m.values.insert("sample".into(), s as f64);
    let net = match mode {
        PerturbMode::Network => {
            let p = checkpoint.context("network mode needs --checkpoint")?;
            m.inputs.insert("checkpoint".into(), file_digest(p)?);
            let net = load_net(p)?;
            if net.variant() != Variant::Assimilation {
                bail!("perturbation experiments need an assimilation network");
            }
            Some(net)
        }
        PerturbMode::Oracle => None,
    };
    let increment = |sp: &PerturbSpec| match &net {
        Some(n) => perturbed_increment(n, bg, obs, &rad, sp),
        None => oracle_increment(&setup, bg, obs, sp),
    };
    fs::create_dir_all(out)?;
    if let Some(spec) = spec {
        let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
        let file: SpecFile = toml::from_str(&text).with_context(|| format!("parsing {}", spec.display()))?;
        let lats = cfg.grid.latitudes();
        let mut w = csv::Writer::from_path(out.join("report.csv"))?;
        w.write_record(["case_id", "check_id", "value", "pass"])?;
        for sp in &file.perturbation {
            let inc = increment(sp)?;
            let norm = crop_norm(&inc, obs.crop, &lats);
            let max = inc.fields.max_abs();
            for (check, v) in [("norm", norm), ("max_abs", max)] {
                w.write_record([sp.id.as_str(), check, &v.to_string(), Outcome::Report.label()])?;
            }
            println!("{:<16} norm {norm:.6e}  max {max:.6e}", sp.id);
        }
        w.flush()?;
    } else {
        let exact = net.is_none();
        for &ch in &cfg.perturb.channels {
            let bat = consistency_battery(&increment, &cfg.grid, &rad, obs, ch, exact)?;
            bat.write(&out.join(format!("ch{ch:02}")))?;
            for row in &bat.rows {
                if row.check != "norm" {
                    m.values.insert(format!("ch{ch:02}.{}", row.check), row.value);
                    println!("ch{ch:02} {:<17} {:>12.5e}  {}", row.check, row.value, row.outcome.label());
                }
            }
        }
    }
    finish(cfg, out, m)
}

fn cmd_oracle(cfg: &RunConfig, data: &Path, out: &Path, sample: Option<usize>, checkpoint: Option<&Path>, args: Vec<String>) -> Result<()> {
    let ds = Dataset::load(data)?;
    let s = match sample {
        Some(s) if s < ds.len() => s,
        Some(s) => bail!("sample {s} outside the dataset ({} samples)", ds.len()),
        None => ds.samples(Split::Test)[cfg.perturb.test_sample],
    };
    let (bg, obs) = (ds.background(s), ds.obs(s));
    let rad = cfg.radiometer()?;
    let (b, r) = (cfg.oracle_b(), cfg.oracle_r());
    let crop = obs.crop;
    let n = cfg.oracle.window;
    let mut windows = Vec::new();
    for row in (crop.row..crop.row + crop.h).step_by(n) {
        for col in (crop.col..crop.col + crop.w).step_by(n) {
            windows.push(Crop { row, col, h: n.min(crop.row + crop.h - row), w: n.min(crop.col + crop.w - col) });
        }
    }
    let solved = exec::try_map(Mode::Parallel, &windows, |&w| {
        let p = OracleProblem::build(&cfg.grid, bg, obs, &rad, &b, &r, w)?;
        let a = p.solve()?;
        Ok::<_, fxda::varoracle::OracleError>((p, a))
    })?;
    let mut analysis = bg.cast::<f64>();
    let mut worst_condition: f64 = 0.0;
    for (p, a) in &solved {
        worst_condition = worst_condition.max(a.condition);
        let window = p.window;
        for (k, v) in a.xa.iter().enumerate() {
            let (c, i, j) = p.layout.decompose(k);
            analysis.fields.set3(c, window.row + i, window.col + j, *v);
        }
    }
    let mut m = Manifest::new("oracle", args);
    m.inputs.insert("dataset".into(), ds.content_hash());
    m.values.insert("sample".into(), s as f64);
    m.values.insert("worst_condition".into(), worst_condition);
    let network = match checkpoint {
        Some(p) => {
            m.inputs.insert("checkpoint".into(), file_digest(p)?);
            let net = load_net(p)?;
            let obs_in = (net.variant() == Variant::Assimilation).then_some(obs);
            Some(net.forward(bg, obs_in)?.cast::<f64>())
        }
        None => None,
    };
    fs::create_dir_all(out)?;
    formats::write_grid(&out.join("oracle_analysis.grd"), &analysis.fields.cast::<f32>())?;
    let lats = cfg.grid.latitudes();
    let truth = ds.truth(s, 0).fields.cast::<f64>();
    let bg64: GridState<f64> = bg.cast();
    let mut w = csv::Writer::from_path(out.join("oracle_rmse.csv"))?;
    w.write_record(["channel", "background", "oracle", "network"])?;
    let names = fxda::evalx::channel_names(&cfg.grid.levels);
    for (ch, name) in names.iter().enumerate() {
        let score = |x: &GridState<f64>| regional_rmse(&x.fields, &truth, crop, &lats, ch);
        let net = match &network {
            Some(x) => score(x)?.to_string(),
            None => String::new(),
        };
        w.write_record([name.clone(), score(&bg64)?.to_string(), score(&analysis)?.to_string(), net])?;
    }
    w.flush()?;
    finish(cfg, out, m)
}
