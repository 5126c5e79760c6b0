use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffcore::Tensor;
use crate::evalx::write_pgm;
use crate::obsmodel::{Crop, Radiometer, SuperObsGrid};
use crate::toyatm::{lat_weights, GridSpec, GridState};

use super::{PerturbError, PerturbSpec, SkyKind, WindowPos};

/// Ratio band accepted for the 5x-versus-1x perturbation norm.
const LINEARITY_BAND: (f64, f64) = (3.5, 6.5);
/// Cloudy-target norm must stay below this fraction of the clear-target norm.
const CLOUD_RATIO: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
    /// Recorded without a verdict.
    Report,
    /// Every increment was zero, so no check is meaningful.
    Degenerate,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::Pass => "pass",
            Outcome::Fail => "fail",
            Outcome::Report => "report",
            Outcome::Degenerate => "degenerate",
        }
    }

    fn of(ok: bool) -> Self {
        if ok {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryRow {
    pub case: String,
    pub check: String,
    pub value: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
pub struct Battery {
    pub rows: Vec<BatteryRow>,
    /// Per case and level: (temperature, humidity) increment magnitude over the crop.
    pub profiles: Vec<(String, Vec<(f64, f64)>)>,
    /// Per case: |humidity increment| at the channel's peak level over the crop.
    pub maps: Vec<(String, Tensor<f64>)>,
    pub peak_level: usize,
    pub weighting: Vec<f64>,
    pub levels: Vec<f64>,
}

impl Battery {
    pub fn row(&self, check: &str) -> Option<&BatteryRow> {
        self.rows.iter().find(|r| r.check == check)
    }

    /// `battery.csv` (case_id, check_id, value, pass), `profiles.csv` and graymaps.
    pub fn write(&self, dir: &Path) -> Result<(), PerturbError> {
        let io = |e: std::io::Error| PerturbError::Spec(format!("{}: {e}", dir.display()));
        fs::create_dir_all(dir).map_err(io)?;
        let mut t = String::from("case_id,check_id,value,pass\n");
        for r in &self.rows {
            writeln!(t, "{},{},{},{}", r.case, r.check, r.value, r.outcome.label()).unwrap();
        }
        fs::write(dir.join("battery.csv"), t).map_err(io)?;
        let mut t = String::from("case_id,level,pressure,t_increment,q_increment,weighting\n");
        for (case, prof) in &self.profiles {
            for (l, (tm, qm)) in prof.iter().enumerate() {
                writeln!(t, "{case},{l},{},{tm},{qm},{}", self.levels[l], self.weighting[l]).unwrap();
            }
        }
        fs::write(dir.join("profiles.csv"), t).map_err(io)?;
        let max = self.maps.iter().map(|(_, m)| m.max_abs()).fold(0.0, f64::max);
        for (case, m) in &self.maps {
            write_pgm(&dir.join("maps").join(format!("{case}.pgm")), m, max)?;
        }
        Ok(())
    }
}

/// Clear and cloudy target cells nearest the crop centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Targets {
    pub clear: (usize, usize),
    pub cloudy: Option<(usize, usize)>,
}

/// Clear target: valid and cloud-free in every frame. Cloudy target: valid in every
/// frame, at least half its footprints cloudy in each.
pub fn choose_targets(obs: &SuperObsGrid) -> Result<Targets, PerturbError> {
    let c = obs.crop;
    let (ci, cj) = ((c.h as f64 - 1.0) / 2.0, (c.w as f64 - 1.0) / 2.0);
    let mut cells: Vec<(usize, usize)> = (0..c.h).flat_map(|i| (0..c.w).map(move |j| (i, j))).collect();
    let dist = |&(i, j): &(usize, usize)| (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
    cells.sort_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.cmp(b)));
    let all = |i, j, f: &dyn Fn(f32) -> bool| (0..obs.frames).all(|fr| obs.is_valid(fr, i, j) && f(obs.cloud.at3(fr, i, j)));
    let clear = cells.iter().find(|&&(i, j)| all(i, j, &|x| x == 0.0));
    let cloudy = cells.iter().find(|&&(i, j)| all(i, j, &|x| x >= 0.5));
    let clear = clear.ok_or_else(|| PerturbError::NoTarget("no clear cell observed in every frame".into()))?;
    Ok(Targets {
        clear: (c.row + clear.0, c.col + clear.1),
        cloudy: cloudy.map(|&(i, j)| (c.row + i, c.col + j)),
    })
}

/// Latitude-weighted L2 norm of all channels over the crop, weights renormalized over
/// the crop rows.
pub fn crop_norm(inc: &GridState<f64>, crop: Crop, latitudes: &[f64]) -> f64 {
    let alpha = lat_weights(&latitudes[crop.row..crop.row + crop.h]);
    let c = inc.fields.shape()[0];
    let mut acc = 0.0;
    for ch in 0..c {
        acc += level_sum(inc, ch, crop, &alpha);
    }
    acc.sqrt()
}

fn level_sum(inc: &GridState<f64>, ch: usize, crop: Crop, alpha: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (k, a) in alpha.iter().enumerate() {
        for j in crop.col..crop.col + crop.w {
            acc += a * inc.fields.at3(ch, crop.row + k, j).powi(2);
        }
    }
    acc
}

/// Runs the standard case set through `increment` and evaluates the checks:
/// (a) sign at the peak level next to the target, (b) antisymmetry, (c) vertical placement, (d) locality,
/// (e) cloud suppression, 5x linearity and (f) the window sweep. With `exact` the
/// antisymmetry check carries a verdict and the sweep is still report-only.
pub fn consistency_battery(
    increment: &dyn Fn(&PerturbSpec) -> Result<GridState<f64>, PerturbError>,
    grid: &GridSpec,
    radiometer: &Radiometer,
    obs: &SuperObsGrid,
    channel: u8,
    exact: bool,
) -> Result<Battery, PerturbError> {
    let k = radiometer
        .channel_index(channel)
        .ok_or_else(|| PerturbError::Spec(format!("unknown channel {channel}")))?;
    let targets = choose_targets(obs)?;
    let spec = |id: &str, mag: f64, window: WindowPos, at: (usize, usize), sky: SkyKind| PerturbSpec {
        id: id.into(),
        row: at.0,
        col: at.1,
        channel,
        magnitude: mag,
        window,
        sky,
    };
    let mut specs = vec![
        spec("clear_p1", 1.0, WindowPos::End, targets.clear, SkyKind::Clear),
        spec("clear_m1", -1.0, WindowPos::End, targets.clear, SkyKind::Clear),
        spec("clear_p5", 5.0, WindowPos::End, targets.clear, SkyKind::Clear),
        spec("window_beginning", 1.0, WindowPos::Beginning, targets.clear, SkyKind::Clear),
        spec("window_middle", 1.0, WindowPos::Middle, targets.clear, SkyKind::Clear),
    ];
    if let Some(c) = targets.cloudy {
        specs.push(spec("cloudy_p1", 1.0, WindowPos::End, c, SkyKind::Cloudy));
    }
    let incs: Vec<GridState<f64>> = specs.iter().map(increment).collect::<Result<_, _>>()?;
    let lats = grid.latitudes();
    let crop = obs.crop;
    let norms: Vec<f64> = incs.iter().map(|i| crop_norm(i, crop, &lats)).collect();
    let levels = grid.n_levels();
    let peak = radiometer.weighting(k).peak_level();
    let alpha = lat_weights(&lats[crop.row..crop.row + crop.h]);

    let profiles: Vec<(String, Vec<(f64, f64)>)> = specs
        .iter()
        .zip(&incs)
        .map(|(s, inc)| {
            let prof = (0..levels)
                .map(|l| (level_sum(inc, l, crop, &alpha).sqrt(), level_sum(inc, levels + l, crop, &alpha).sqrt()))
                .collect();
            (s.id.clone(), prof)
        })
        .collect();
    let maps = specs
        .iter()
        .zip(&incs)
        .map(|(s, inc)| {
            let m = Tensor::from_fn(&[crop.h, crop.w], |n| inc.fields.at3(levels + peak, crop.row + n / crop.w, crop.col + n % crop.w).abs());
            (s.id.clone(), m)
        })
        .collect();

    let p1 = &incs[0];
    let mut rows = Vec::new();
    let mut push = |case: &str, check: &str, value: f64, outcome: Outcome| {
        rows.push(BatteryRow { case: case.into(), check: check.into(), value, outcome });
    };
    let degenerate = norms.iter().all(|&n| n == 0.0);
    let verdict = |o: Outcome| if degenerate { Outcome::Degenerate } else { o };

    // (a) net humidity increment at the peak level over the 3x3 cells around the target.
    let (tr, tc) = targets.clear;
    let mut net_q = 0.0;
    for i in tr.saturating_sub(1)..=(tr + 1).min(crop.row + crop.h - 1) {
        for j in tc.saturating_sub(1)..=(tc + 1).min(crop.col + crop.w - 1) {
            if crop.contains(i, j) {
                net_q += p1.fields.at3(levels + peak, i, j);
            }
        }
    }
    push("clear_p1", "a_sign", net_q, verdict(Outcome::of(net_q < 0.0)));

    // (b) opposite sign and comparable size for ±1.
    let m1 = &incs[1];
    let dot: f64 = p1.fields.data().iter().zip(m1.fields.data()).map(|(a, b)| a * b).sum();
    let ratio = norms[1] / norms[0];
    let anti = dot < 0.0 && (ratio - 1.0).abs() < if exact { 1e-9 } else { 0.5 };
    push("clear_m1", "b_antisymmetry", ratio, verdict(if exact { Outcome::of(anti) } else { Outcome::Report }));

    // (c) level of largest humidity-increment magnitude.
    let q_prof: Vec<f64> = profiles[0].1.iter().map(|p| p.1).collect();
    let top = (0..q_prof.len()).fold(0, |b, l| if q_prof[l] > q_prof[b] { l } else { b });
    push("clear_p1", "c_vertical", top as f64, verdict(Outcome::of(top.abs_diff(peak) <= 1)));

    // (d) mean column magnitude near the target versus four or more cells away.
    let (mut inner, mut ni, mut outer, mut no) = (0.0, 0, 0.0, 0);
    for i in crop.row..crop.row + crop.h {
        for j in crop.col..crop.col + crop.w {
            let d = i.abs_diff(tr).max(j.abs_diff(tc));
            let mag: f64 = (0..2 * levels).map(|c| p1.fields.at3(c, i, j).powi(2)).sum::<f64>().sqrt();
            if d <= 1 {
                inner += mag;
                ni += 1;
            } else if d >= 4 {
                outer += mag;
                no += 1;
            }
        }
    }
    let (inner, outer) = (inner / ni.max(1) as f64, outer / no.max(1) as f64);
    let decay = if inner > 0.0 { 1.0 - outer / inner } else { 0.0 };
    push("clear_p1", "d_locality", decay, verdict(Outcome::of(decay > 0.0)));

    // (e) cloudy target against clear target.
    match targets.cloudy {
        Some(_) => {
            let r = norms[5] / norms[0];
            push("cloudy_p1", "e_cloud", r, verdict(Outcome::of(r < CLOUD_RATIO)));
        }
        None => push("cloudy_p1", "e_cloud", f64::NAN, Outcome::Report),
    }

    let lin = norms[2] / norms[0];
    push("clear_p5", "linearity_5x", lin, verdict(Outcome::of((LINEARITY_BAND.0..=LINEARITY_BAND.1).contains(&lin))));

    for (case, n) in [("window_beginning", norms[3]), ("window_middle", norms[4]), ("window_end", norms[0])] {
        push(case, "f_window", n, verdict(Outcome::Report));
    }
    for (s, n) in specs.iter().zip(&norms) {
        push(&s.id, "norm", *n, Outcome::Report);
    }

    Ok(Battery {
        rows,
        profiles,
        maps,
        peak_level: peak,
        weighting: radiometer.weighting(k).weights.clone(),
        levels: grid.levels.clone(),
    })
}
