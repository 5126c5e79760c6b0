use chrono::{DateTime, Datelike, Duration, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::toyatm::{GridSpec, GridState, NoiseSpec};

use super::channel::{Radiometer, Sky};
use super::ObsError;

/// Number of auxiliary encoding planes per frame.
pub const AUX_PLANES: usize = 7;
/// Half width of the assimilation window in minutes.
pub const HALF_WINDOW_MIN: f64 = 60.0;
/// Largest satellite zenith angle in the synthetic scan geometry (degrees).
pub const MAX_ZENITH: f64 = 70.0;

/// Rectangular window of grid indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Crop {
    pub row: usize,
    pub col: usize,
    pub h: usize,
    pub w: usize,
}

impl Crop {
    pub fn validate(&self, grid: &GridSpec) -> Result<(), ObsError> {
        if self.h == 0 || self.w == 0 || self.row + self.h > grid.h || self.col + self.w > grid.w {
            return Err(ObsError::Crop(format!(
                "{}x{} at ({},{}) outside {}x{} grid",
                self.h, self.w, self.row, self.col, grid.h, grid.w
            )));
        }
        Ok(())
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        (self.row..self.row + self.h).contains(&i) && (self.col..self.col + self.w).contains(&j)
    }

    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    /// Geometric zenith angle at a (fractional) grid position: grows linearly with the
    /// distance from the crop centre, reaching [`MAX_ZENITH`] at the corners.
    pub fn zenith_at(&self, row: f64, col: f64) -> f64 {
        let (ci, cj) = (self.row as f64 + self.h as f64 / 2.0, self.col as f64 + self.w as f64 / 2.0);
        let dmax = ((self.h * self.h + self.w * self.w) as f64).sqrt() / 2.0;
        let d = ((row - ci).powi(2) + (col - cj).powi(2)).sqrt();
        (MAX_ZENITH * d / dmax).clamp(0.0, MAX_ZENITH)
    }
}

/// One raw satellite pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsFootprint {
    pub lat: f64,
    pub lon: f64,
    /// Minutes relative to the analysis time, within ±60.
    pub time_offset: f64,
    pub zenith: f64,
    pub bt: Vec<f64>,
    pub cloudy: bool,
    pub cloud_top: usize,
}

/// Gridded, time-framed observations on a crop of the model grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperObsGrid {
    pub crop: Crop,
    pub frames: usize,
    pub channels: usize,
    /// `[frames·channels, h, w]`, frame-major; 0 where masked.
    pub bt: Tensor<f32>,
    /// `[frames, h, w]`, 1 where at least one footprint matched.
    pub mask: Vec<bool>,
    /// `[frames·7, h, w]` auxiliary encodings in [-1, 1].
    pub aux: Tensor<f32>,
    /// `[frames, h, w]` fraction of cloudy footprints per super-observation.
    pub cloud: Tensor<f32>,
}

impl SuperObsGrid {
    pub fn plane_len(&self) -> usize {
        self.crop.h * self.crop.w
    }

    pub fn is_valid(&self, frame: usize, i: usize, j: usize) -> bool {
        self.mask[frame * self.plane_len() + i * self.crop.w + j]
    }

    pub fn bt_at(&self, frame: usize, channel: usize, i: usize, j: usize) -> f32 {
        self.bt.at3(frame * self.channels + channel, i, j)
    }

    /// Fraction of crop cells valid in at least one frame.
    pub fn coverage(&self) -> f64 {
        let n = self.plane_len();
        let hit = (0..n).filter(|&p| (0..self.frames).any(|f| self.mask[f * n + p])).count();
        hit as f64 / n as f64
    }

    /// Fraction of valid (frame, cell) slots.
    pub fn frame_coverage(&self) -> f64 {
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Copy with every BT value masked out (encodings kept).
    pub fn masked_out(&self) -> Self {
        let mut out = self.clone();
        out.bt.fill(0.0);
        out.mask.iter_mut().for_each(|m| *m = false);
        out.cloud.fill(0.0);
        out
    }
}

/// Frame index for a time offset; frames split [-60, 60] into equal sub-windows, the
/// last one closed on the right.
pub fn frame_of(offset: f64, frames: usize) -> Option<usize> {
    if !(-HALF_WINDOW_MIN..=HALF_WINDOW_MIN).contains(&offset) {
        return None;
    }
    let width = 2.0 * HALF_WINDOW_MIN / frames as f64;
    Some((((offset + HALF_WINDOW_MIN) / width).floor() as usize).min(frames - 1))
}

pub fn frame_center(frame: usize, frames: usize) -> f64 {
    let width = 2.0 * HALF_WINDOW_MIN / frames as f64;
    -HALF_WINDOW_MIN + width * (frame as f64 + 0.5)
}

/// Grid cell whose box `(centre − Δ/2, centre + Δ/2]` contains the point. Points on a
/// shared edge or corner go to the lower-index cell.
pub fn cell_of(grid: &GridSpec, lat: f64, lon: f64) -> Option<(usize, usize)> {
    let i = ((lat + 90.0) / grid.lat_spacing()).ceil() as isize - 1;
    if i < 0 || i >= grid.h as isize {
        return None;
    }
    let dl = grid.lon_spacing();
    let lon = lon.rem_euclid(360.0);
    let j = (((lon + dl / 2.0) / dl).ceil() as isize - 1).rem_euclid(grid.w as isize);
    Some((i as usize, j as usize))
}

/// Seven encodings: cos lon, sin lat, cos zenith, then cos/sin of the day of year and
/// of the minute of day.
pub fn encode_aux(lat: f64, lon: f64, zenith: f64, time: DateTime<Utc>) -> [f64; AUX_PLANES] {
    let doy = time.ordinal() as f64;
    let minute = time.hour() as f64 * 60.0 + time.minute() as f64 + time.second() as f64 / 60.0;
    let year = std::f64::consts::TAU * doy / 365.25;
    let day = std::f64::consts::TAU * minute / 1440.0;
    [
        lon.to_radians().cos(),
        lat.to_radians().sin(),
        zenith.to_radians().cos(),
        year.cos(),
        year.sin(),
        day.cos(),
        day.sin(),
    ]
}

pub(crate) fn offset_time(epoch: DateTime<Utc>, minutes: f64) -> DateTime<Utc> {
    epoch + Duration::milliseconds((minutes * 60_000.0).round() as i64)
}

/// Crops, averages footprints per grid point and frame, and masks empty points.
pub fn make_superobs(
    footprints: &[ObsFootprint],
    grid: &GridSpec,
    crop: Crop,
    frames: usize,
    channels: usize,
    epoch: DateTime<Utc>,
) -> Result<SuperObsGrid, ObsError> {
    crop.validate(grid)?;
    if frames == 0 {
        return Err(ObsError::Crop("at least one frame required".into()));
    }
    let n = crop.cells();
    let mut count = vec![0usize; frames * n];
    let mut sum = vec![0.0f64; frames * channels * n];
    let mut zen = vec![0.0f64; frames * n];
    let mut minutes = vec![0.0f64; frames * n];
    let mut cloudy = vec![0usize; frames * n];
    for fp in footprints {
        if fp.bt.len() != channels {
            return Err(ObsError::Footprint(format!("{} BT values for {channels} channels", fp.bt.len())));
        }
        let (Some((i, j)), Some(f)) = (cell_of(grid, fp.lat, fp.lon), frame_of(fp.time_offset, frames)) else {
            continue;
        };
        if !crop.contains(i, j) {
            continue;
        }
        let p = (i - crop.row) * crop.w + (j - crop.col);
        count[f * n + p] += 1;
        zen[f * n + p] += fp.zenith;
        minutes[f * n + p] += fp.time_offset;
        cloudy[f * n + p] += fp.cloudy as usize;
        for (k, &v) in fp.bt.iter().enumerate() {
            sum[(f * channels + k) * n + p] += v;
        }
    }

    let lats = grid.latitudes();
    let lons = grid.longitudes();
    let mut bt = Tensor::zeros(&[frames * channels, crop.h, crop.w]);
    let mut aux = Tensor::zeros(&[frames * AUX_PLANES, crop.h, crop.w]);
    let mut cloud = Tensor::zeros(&[frames, crop.h, crop.w]);
    let mut mask = vec![false; frames * n];
    for f in 0..frames {
        for p in 0..n {
            let (ci, cj) = (p / crop.w, p % crop.w);
            let (i, j) = (crop.row + ci, crop.col + cj);
            let c = count[f * n + p];
            let (z, t) = if c > 0 {
                mask[f * n + p] = true;
                for k in 0..channels {
                    bt.data_mut()[(f * channels + k) * n + p] = (sum[(f * channels + k) * n + p] / c as f64) as f32;
                }
                cloud.data_mut()[f * n + p] = (cloudy[f * n + p] as f64 / c as f64) as f32;
                (zen[f * n + p] / c as f64, minutes[f * n + p] / c as f64)
            } else {
                (crop.zenith_at(i as f64 + 0.5, j as f64 + 0.5), frame_center(f, frames))
            };
            let enc = encode_aux(lats[i], lons[j], z, offset_time(epoch, t));
            for (e, v) in enc.iter().enumerate() {
                aux.data_mut()[(f * AUX_PLANES + e) * n + p] = *v as f32;
            }
        }
    }
    Ok(SuperObsGrid {
        crop,
        frames,
        channels,
        bt,
        mask,
        aux,
        cloud,
    })
}

/// Settings of the synthetic observing system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObsConfig {
    pub crop: Crop,
    pub frames: usize,
    /// Mean footprints per crop cell over the whole window.
    pub density: f64,
    pub cloud_fraction: f64,
    /// Per-footprint instrument noise (K).
    pub noise_std: f64,
    /// Spread of the cloud-top emission temperature relative to the model level (K).
    pub cloud_emission_std: f64,
    pub cloud_length_scale: f64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            crop: Crop { row: 16, col: 48, h: 32, w: 32 },
            frames: 3,
            density: 8.0,
            cloud_fraction: 0.25,
            noise_std: 0.2,
            cloud_emission_std: 6.0,
            cloud_length_scale: 3.0,
        }
    }
}

impl ObsConfig {
    pub fn validate(&self, grid: &GridSpec) -> Result<(), ObsError> {
        self.crop.validate(grid)?;
        if !(self.density > 0.0) || !(0.0..=1.0).contains(&self.cloud_fraction) || self.frames == 0 {
            return Err(ObsError::Config(format!(
                "density {} must be > 0, cloud fraction {} in [0,1], frames {} >= 1",
                self.density, self.cloud_fraction, self.frames
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.cloud_emission_std >= 0.0) {
            return Err(ObsError::Config("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scatters footprints over the crop, simulates their brightness temperatures from the
/// truth, and grids them into super-observations. Deterministic per seed.
pub fn synthesize_observations(
    truth: &GridState<f64>,
    grid: &GridSpec,
    radiometer: &Radiometer,
    cfg: &ObsConfig,
    epoch: DateTime<Utc>,
    seed: u64,
) -> Result<(Vec<ObsFootprint>, SuperObsGrid), ObsError> {
    cfg.validate(grid)?;
    let crop = cfg.crop;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Cloud mask: the highest-valued cells of a smooth random field.
    let field = NoiseSpec {
        std: vec![],
        length_scale: cfg.cloud_length_scale,
        vertical_corr: 0.0,
    };
    let cover = field.smooth_plane(crop.h, crop.w, &mut rng);
    let tops = field.smooth_plane(crop.h, crop.w, &mut rng);
    let emission = field.smooth_plane(crop.h, crop.w, &mut rng);
    let n_cloudy = (cfg.cloud_fraction * crop.cells() as f64).round() as usize;
    let mut order: Vec<usize> = (0..crop.cells()).collect();
    order.sort_by(|&a, &b| cover[b].total_cmp(&cover[a]).then(a.cmp(&b)));
    let mut is_cloudy = vec![false; crop.cells()];
    order.iter().take(n_cloudy).for_each(|&p| is_cloudy[p] = true);

    let (dlat, dlon) = (grid.lat_spacing(), grid.lon_spacing());
    let lat0 = -90.0 + crop.row as f64 * dlat;
    let lon0 = (crop.col as f64 - 0.5) * dlon;
    let total = (cfg.density * crop.cells() as f64).round() as usize;
    let mut footprints = Vec::with_capacity(total);
    for _ in 0..total {
        let u: f64 = rng.gen();
        let v: f64 = rng.gen();
        let lat = lat0 + u * crop.h as f64 * dlat;
        let lon = lon0 + v * crop.w as f64 * dlon;
        let time_offset = rng.gen_range(-HALF_WINDOW_MIN..HALF_WINDOW_MIN);
        let Some((i, j)) = cell_of(grid, lat, lon) else {
            continue;
        };
        if !crop.contains(i, j) {
            continue;
        }
        let p = (i - crop.row) * crop.w + (j - crop.col);
        let frow = (lat + 90.0) / dlat;
        let fcol = lon / dlon + 0.5;
        let zenith = crop.zenith_at(frow, fcol);
        let (t, q) = truth.column(i, j);
        let cloudy = is_cloudy[p];
        let cloud_top = if tops[p] < 0.0 { 0 } else { 1 };
        let sky = if cloudy { Sky::Cloudy { top: cloud_top } } else { Sky::Clear };
        let bt = (0..radiometer.n_channels())
            .map(|k| {
                let mut b = radiometer.simulate_bt(&t, &q, k, zenith, sky);
                if cloudy {
                    b += cfg.cloud_emission_std * emission[p];
                }
                let e: f64 = rng.sample(StandardNormal);
                b + cfg.noise_std * e
            })
            .collect();
        footprints.push(ObsFootprint {
            lat,
            lon,
            time_offset,
            zenith,
            bt,
            cloudy,
            cloud_top,
        });
    }
    let grid_obs = make_superobs(&footprints, grid, crop, cfg.frames, radiometer.n_channels(), epoch)?;
    Ok((footprints, grid_obs))
}
