use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::danet::{DaNet, Variant};
use crate::dataset::{Dataset, Split};
use crate::exec::{self, Mode};
use crate::obsmodel::Crop;
use crate::toyatm::{GridState, ToyModel};

use super::{block_mean, bootstrap_mean_ci, moving_average, normalized_diff, regional_rmse, rmse, spearman, write_pgm, EvalError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Forecast leads `1..=leads` steps.
    pub leads: usize,
    /// Block extent of the RMSE maps (rows, cols).
    pub block: [usize; 2],
    pub bootstrap: usize,
    pub confidence: f64,
    /// Moving-average window of the smoothed lead columns.
    pub smoothing: usize,
    pub seed: u64,
    pub split: Split,
    /// Evaluate only the first this-many samples of the split (0 = all).
    pub max_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { leads: 8, block: [4, 4], bootstrap: 1000, confidence: 0.95, smoothing: 4, seed: 7, split: Split::Test, max_samples: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    #[serde(rename = "EXP_CTRL")]
    Ctrl,
    #[serde(rename = "EXP_CORR")]
    Corr,
    #[serde(rename = "EXP_ASSI")]
    Assi,
}

impl Experiment {
    pub fn label(self) -> &'static str {
        match self {
            Experiment::Ctrl => "EXP_CTRL",
            Experiment::Corr => "EXP_CORR",
            Experiment::Assi => "EXP_ASSI",
        }
    }
}

/// Per-sample scores of one experiment. Leads run `0..=L`, lead 0 being the analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub experiment: Experiment,
    pub samples: Vec<usize>,
    /// `[sample][lead][channel]` latitude-weighted RMSE over the grid.
    pub global: Vec<Vec<Vec<f64>>>,
    /// `[sample][lead][channel]` regional RMSE over the observation crop.
    pub crop: Vec<Vec<Vec<f64>>>,
    /// `[lead][channel]` squared error per cell `[H·W]`, averaged over samples.
    pub mse: Vec<Vec<Vec<f64>>>,
}

impl ExperimentRun {
    fn mean_over_samples(x: &[Vec<Vec<f64>>], lead: usize, ch: usize) -> f64 {
        x.iter().map(|s| s[lead][ch]).sum::<f64>() / x.len() as f64
    }

    pub fn global_rmse(&self, lead: usize, ch: usize) -> f64 {
        Self::mean_over_samples(&self.global, lead, ch)
    }

    pub fn crop_rmse(&self, lead: usize, ch: usize) -> f64 {
        Self::mean_over_samples(&self.crop, lead, ch)
    }

    fn per_sample(x: &[Vec<Vec<f64>>], lead: usize, chans: &[usize]) -> Vec<f64> {
        x.iter().map(|s| chans.iter().map(|&c| s[lead][c]).sum::<f64>() / chans.len() as f64).collect()
    }

    /// Per-sample crop RMSE averaged over `chans`.
    pub fn crop_per_sample(&self, lead: usize, chans: &[usize]) -> Vec<f64> {
        Self::per_sample(&self.crop, lead, chans)
    }

    pub fn global_per_sample(&self, lead: usize, chans: &[usize]) -> Vec<f64> {
        Self::per_sample(&self.global, lead, chans)
    }
}

/// All runs on one sample set plus what is needed to summarize them.
#[derive(Debug, Clone)]
pub struct Report {
    pub runs: Vec<ExperimentRun>,
    pub config: EvalConfig,
    pub crop: Crop,
    pub latitudes: Vec<f64>,
    pub channel_names: Vec<String>,
    pub humidity: Vec<usize>,
    pub extent: (usize, usize),
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl Report {
    pub fn run(&self, e: Experiment) -> Option<&ExperimentRun> {
        self.runs.iter().find(|r| r.experiment == e)
    }

    fn need(&self, e: Experiment) -> Result<&ExperimentRun, EvalError> {
        self.run(e).ok_or_else(|| EvalError::Config(format!("{} was not run", e.label())))
    }

    /// Mean crop RMSE over the humidity channels at `lead`.
    pub fn q_crop(&self, e: Experiment, lead: usize) -> Result<f64, EvalError> {
        Ok(mean(&self.need(e)?.crop_per_sample(lead, &self.humidity)))
    }

    /// Mean global RMSE over the humidity channels at `lead`.
    pub fn q_global(&self, e: Experiment, lead: usize) -> Result<f64, EvalError> {
        Ok(mean(&self.need(e)?.global_per_sample(lead, &self.humidity)))
    }

    /// Bootstrap mean and interval of the per-sample crop humidity RMSE of `b` minus `a`
    /// (positive when `a` is better).
    pub fn q_crop_gain_ci(&self, a: Experiment, b: Experiment, lead: usize) -> Result<(f64, f64, f64), EvalError> {
        let (ra, rb) = (self.need(a)?.crop_per_sample(lead, &self.humidity), self.need(b)?.crop_per_sample(lead, &self.humidity));
        let d: Vec<f64> = rb.iter().zip(&ra).map(|(y, x)| y - x).collect();
        Ok(bootstrap_mean_ci(&d, self.config.bootstrap, self.config.confidence, self.config.seed))
    }

    /// `normalized_diff` of the global humidity RMSE of `a` against `b` for leads `1..=L`.
    pub fn q_normalized_diffs(&self, a: Experiment, b: Experiment) -> Result<Vec<f64>, EvalError> {
        (1..=self.config.leads).map(|l| normalized_diff(self.q_global(a, l)?, self.q_global(b, l)?)).collect()
    }

    /// Spearman correlation of |normalized diff| against lead.
    pub fn decay_rank_correlation(&self, a: Experiment, b: Experiment) -> Result<f64, EvalError> {
        let d: Vec<f64> = self.q_normalized_diffs(a, b)?.iter().map(|v| v.abs()).collect();
        let leads: Vec<f64> = (1..=d.len()).map(|l| l as f64).collect();
        Ok(spearman(&leads, &d))
    }

    /// Share of the latitude-weighted humidity squared-error reduction of `a` over `b`
    /// at `lead` that falls inside the observation crop.
    pub fn crop_share_of_reduction(&self, a: Experiment, b: Experiment, lead: usize) -> Result<f64, EvalError> {
        let (ra, rb) = (self.need(a)?, self.need(b)?);
        let (h, w) = self.extent;
        let alpha = crate::toyatm::lat_weights(&self.latitudes);
        let (mut inside, mut total) = (0.0, 0.0);
        for &ch in &self.humidity {
            for i in 0..h {
                for j in 0..w {
                    let d = alpha[i] * (rb.mse[lead][ch][i * w + j] - ra.mse[lead][ch][i * w + j]);
                    total += d;
                    if self.crop.contains(i, j) {
                        inside += d;
                    }
                }
            }
        }
        if total <= 0.0 {
            return Ok(f64::NAN);
        }
        Ok(inside / total)
    }

    /// Mean over `leads` and all channels of the global RMSE of `e`, each channel scaled
    /// by the control run's analysis RMSE so temperature and humidity weigh alike.
    pub fn forecast_score(&self, e: Experiment, leads: std::ops::RangeInclusive<usize>) -> Result<f64, EvalError> {
        let (run, ctrl) = (self.need(e)?, self.need(Experiment::Ctrl)?);
        if *leads.end() > self.config.leads {
            return Err(EvalError::Config(format!("lead {} beyond the evaluated {}", leads.end(), self.config.leads)));
        }
        let c = self.channel_names.len();
        let mut vals = Vec::new();
        for l in leads {
            for ch in 0..c {
                let scale = ctrl.global_rmse(0, ch);
                if scale <= 0.0 {
                    return Err(EvalError::ZeroReference);
                }
                vals.push(run.global_rmse(l, ch) / scale);
            }
        }
        Ok(mean(&vals))
    }

    /// Block RMSE map of one experiment, channel and lead over all samples.
    pub fn map(&self, e: Experiment, lead: usize, ch: usize) -> Result<crate::diffcore::Tensor<f64>, EvalError> {
        let (h, w) = self.extent;
        let m = block_mean(&self.need(e)?.mse[lead][ch], h, w, (self.config.block[0], self.config.block[1]), &self.latitudes)?;
        Ok(m.map(f64::sqrt))
    }

    /// CSV tables, graymaps and a summary.
    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let l = self.config.leads;
        let names = &self.channel_names;

        let mut t = String::from("experiment,channel,global_rmse,crop_rmse\n");
        for r in &self.runs {
            for (c, n) in names.iter().enumerate() {
                writeln!(t, "{},{n},{},{}", r.experiment.label(), r.global_rmse(0, c), r.crop_rmse(0, c)).unwrap();
            }
        }
        let p = dir.join("analysis_rmse.csv");
        fs::write(&p, t).map_err(io(&p))?;

        let mut t = String::from("experiment,channel,lead,global_rmse,global_rmse_smoothed,ci_low,ci_high,crop_rmse\n");
        for r in &self.runs {
            for (c, n) in names.iter().enumerate() {
                let curve: Vec<f64> = (0..=l).map(|k| r.global_rmse(k, c)).collect();
                let smooth = moving_average(&curve, self.config.smoothing);
                for k in 0..=l {
                    let per: Vec<f64> = r.global.iter().map(|s| s[k][c]).collect();
                    let (_, lo, hi) = bootstrap_mean_ci(&per, self.config.bootstrap, self.config.confidence, self.config.seed);
                    writeln!(t, "{},{n},{k},{},{},{lo},{hi},{}", r.experiment.label(), curve[k], smooth[k], r.crop_rmse(k, c)).unwrap();
                }
            }
        }
        let p = dir.join("lead_rmse.csv");
        fs::write(&p, t).map_err(io(&p))?;

        use Experiment::*;
        let pairs = [(Assi, Corr), (Assi, Ctrl), (Corr, Ctrl)];
        let avail: Vec<_> = pairs.iter().filter(|(a, b)| self.run(*a).is_some() && self.run(*b).is_some()).collect();
        let mut t = String::from("channel,lead");
        for (a, b) in &avail {
            write!(t, ",{}_vs_{}", a.label(), b.label()).unwrap();
        }
        t.push('\n');
        for (c, n) in names.iter().enumerate() {
            for k in 1..=l {
                write!(t, "{n},{k}").unwrap();
                for (a, b) in &avail {
                    let d = normalized_diff(self.need(*a)?.global_rmse(k, c), self.need(*b)?.global_rmse(k, c))?;
                    write!(t, ",{d}").unwrap();
                }
                t.push('\n');
            }
        }
        let p = dir.join("normalized_diff.csv");
        fs::write(&p, t).map_err(io(&p))?;

        let mut t = String::from("region,channel");
        for r in &self.runs {
            write!(t, ",{}", r.experiment.label()).unwrap();
        }
        for (a, b) in &avail {
            write!(t, ",{}_vs_{}", a.label(), b.label()).unwrap();
        }
        t.push('\n');
        for (region, pick) in [("global", false), ("crop", true)] {
            for (c, n) in names.iter().enumerate() {
                let v = |e: &ExperimentRun| if pick { e.crop_rmse(0, c) } else { e.global_rmse(0, c) };
                write!(t, "{region},{n}").unwrap();
                for r in &self.runs {
                    write!(t, ",{}", v(r)).unwrap();
                }
                for (a, b) in &avail {
                    write!(t, ",{}", normalized_diff(v(self.need(*a)?), v(self.need(*b)?))?).unwrap();
                }
                t.push('\n');
            }
        }
        let p = dir.join("regional.csv");
        fs::write(&p, t).map_err(io(&p))?;

        for &lead in &[0, 1, l] {
            for &c in &self.humidity {
                let maps: Vec<_> = self.runs.iter().map(|r| self.map(r.experiment, lead, c)).collect::<Result<_, _>>()?;
                let max = maps.iter().map(|m| m.max_abs()).fold(0.0, f64::max);
                for (r, m) in self.runs.iter().zip(&maps) {
                    let name = format!("{}_{}_lead{lead}.pgm", r.experiment.label(), names[c]);
                    write_pgm(&dir.join("maps").join(name), m, max)?;
                }
            }
        }
        Ok(())
    }
}

fn io(p: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |e| EvalError::Io(format!("{}: {e}", p.display()))
}

/// `T200 .. T850, Q200 .. Q850` style labels, temperature first.
pub fn channel_names(levels: &[f64]) -> Vec<String> {
    let f = |p: f64| format!("{}", p.round() as i64);
    levels.iter().map(|&p| format!("T{}", f(p))).chain(levels.iter().map(|&p| format!("Q{}", f(p)))).collect()
}

struct Partial {
    global: Vec<Vec<f64>>,
    crop: Vec<Vec<f64>>,
    sq: Vec<Vec<Vec<f64>>>,
}

fn score(analysis: GridState<f64>, ds: &Dataset, s: usize, model: &ToyModel, leads: usize, crop: Crop, lats: &[f64]) -> Result<Partial, EvalError> {
    let c = ds.grid.channels();
    let (h, w) = (ds.grid.h, ds.grid.w);
    let mut out = Partial { global: Vec::new(), crop: Vec::new(), sq: Vec::new() };
    let mut x = analysis;
    for k in 0..=leads {
        if k > 0 {
            x = model.step(&x);
        }
        let truth = ds.truth(s, k).fields.cast::<f64>();
        out.global.push((0..c).map(|ch| rmse(&x.fields, &truth, lats, ch)).collect::<Result<_, _>>()?);
        out.crop.push((0..c).map(|ch| regional_rmse(&x.fields, &truth, crop, lats, ch)).collect::<Result<_, _>>()?);
        out.sq.push(
            (0..c)
                .map(|ch| x.fields.plane(ch).iter().zip(truth.plane(ch)).map(|(a, b)| (a - b) * (a - b)).collect::<Vec<f64>>())
                .collect(),
        );
        debug_assert_eq!(out.sq[k][0].len(), h * w);
    }
    Ok(out)
}

/// Scores the raw background (EXP_CTRL), the corrector (EXP_CORR) and the assimilator
/// (EXP_ASSI) on one split, with forecasts from each analysis. Either network may be
/// absent; the control run needs none.
pub fn run_experiments(
    ds: &Dataset,
    assimilator: Option<&DaNet<f32>>,
    corrector: Option<&DaNet<f32>>,
    forecast: &ToyModel,
    cfg: &EvalConfig,
    mode: Mode,
) -> Result<Report, EvalError> {
    ds.splits.check_disjoint()?;
    if cfg.split == Split::Train {
        return Err(crate::dataset::DataError::Leakage("evaluation on the training split".into()).into());
    }
    if cfg.leads > ds.horizon {
        return Err(EvalError::Config(format!("{} leads exceed the dataset horizon {}", cfg.leads, ds.horizon)));
    }
    for (net, v) in [(assimilator, Variant::Assimilation), (corrector, Variant::Correction)] {
        if net.is_some_and(|n| n.variant() != v) {
            return Err(EvalError::Config(format!("expected a {v:?} network")));
        }
    }
    let crop = assimilator.map_or_else(|| ds.obs.first().map(|o| o.crop), |n| Some(n.config().crop));
    let crop = crop.ok_or_else(|| EvalError::Config("empty dataset".into()))?;
    let mut samples = ds.samples(cfg.split);
    if cfg.max_samples > 0 {
        samples.truncate(cfg.max_samples);
    }
    if samples.is_empty() {
        return Err(EvalError::Config("no samples to evaluate".into()));
    }
    let lats = ds.grid.latitudes();
    let mut exps = vec![Experiment::Ctrl];
    if corrector.is_some() {
        exps.push(Experiment::Corr);
    }
    if assimilator.is_some() {
        exps.push(Experiment::Assi);
    }
    let (c, hw) = (ds.grid.channels(), ds.grid.h * ds.grid.w);
    let mut runs: Vec<ExperimentRun> = exps
        .iter()
        .map(|&e| ExperimentRun {
            experiment: e,
            samples: samples.clone(),
            global: Vec::new(),
            crop: Vec::new(),
            mse: vec![vec![vec![0.0; hw]; c]; cfg.leads + 1],
        })
        .collect();
    // Bounded chunks keep the per-cell error fields from piling up in memory.
    let chunk = 4 * exec::workers().max(1);
    for block in samples.chunks(chunk) {
        let parts = exec::try_map(mode, block, |&s| {
            exps.iter()
                .map(|e| {
                    let bg = ds.background(s);
                    let a = match e {
                        Experiment::Ctrl => bg.clone(),
                        Experiment::Corr => corrector.unwrap().forward_corr(bg)?,
                        Experiment::Assi => assimilator.unwrap().forward(bg, Some(ds.obs(s)))?,
                    };
                    score(a.cast::<f64>(), ds, s, forecast, cfg.leads, crop, &lats)
                })
                .collect::<Result<Vec<_>, EvalError>>()
        })?;
        for per_sample in parts {
            for (run, p) in runs.iter_mut().zip(per_sample) {
                for (acc_lead, sq_lead) in run.mse.iter_mut().zip(&p.sq) {
                    for (acc, sq) in acc_lead.iter_mut().zip(sq_lead) {
                        acc.iter_mut().zip(sq).for_each(|(a, b)| *a += b);
                    }
                }
                run.global.push(p.global);
                run.crop.push(p.crop);
            }
        }
    }
    let n = samples.len() as f64;
    for run in &mut runs {
        run.mse.iter_mut().flatten().flatten().for_each(|v| *v /= n);
    }
    let levels = ds.grid.n_levels();
    Ok(Report {
        runs,
        config: cfg.clone(),
        crop,
        latitudes: lats,
        channel_names: channel_names(&ds.grid.levels),
        humidity: (levels..2 * levels).collect(),
        extent: (ds.grid.h, ds.grid.w),
    })
}
