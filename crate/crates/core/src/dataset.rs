//! Paired samples (background, super-observations, truth trajectory) with
//! index-range splits, in memory and on disk.

use std::fs;
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{self, Mode};
use crate::formats::{self, io_err, FormatError};
use crate::obsmodel::{synthesize_observations, ChannelSpec, ObsConfig, ObsError, Radiometer, SuperObsGrid};
use crate::toyatm::{generate_dataset, sample_rng, AtmError, AtmosphereSet, GridSpec, GridState, ModelConfig, NatureConfig};

pub(crate) const DOMAIN_OBS: u64 = 3;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Atm(#[from] AtmError),
    #[error(transparent)]
    Obs(#[from] ObsError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("split leakage: {0}")]
    Leakage(String),
}

/// Sizes, spacing and seed of the sample trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Samples skipped between consecutive splits.
    pub gap: usize,
    /// Truth steps kept past the last sample (longest lead or rollout).
    pub horizon: usize,
    pub seed: u64,
    /// Valid time of sample 0 minus one step, RFC 3339.
    pub epoch: String,
    pub step_hours: i64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 512,
            n_valid: 64,
            n_test: 128,
            gap: 20,
            horizon: 10,
            seed: 2023,
            epoch: "2023-06-01T00:00:00Z".into(),
            step_hours: 6,
        }
    }
}

impl DataConfig {
    pub fn splits(&self) -> Splits {
        let train = 0..self.n_train;
        let valid = train.end + self.gap..train.end + self.gap + self.n_valid;
        let test = valid.end + self.gap..valid.end + self.gap + self.n_test;
        Splits { train, valid, test }
    }

    /// Samples in the trajectory, gaps included.
    pub fn count(&self) -> usize {
        self.splits().test.end
    }

    pub fn epoch(&self) -> Result<DateTime<Utc>, DataError> {
        DateTime::parse_from_rfc3339(&self.epoch)
            .map(|d| d.with_timezone(&Utc))
            .map_err(|e| DataError::Invalid(format!("epoch {:?}: {e}", self.epoch)))
    }

    /// Analysis time of sample `s`.
    pub fn valid_time(&self, s: usize) -> Result<DateTime<Utc>, DataError> {
        Ok(self.epoch()? + Duration::hours(self.step_hours * (s as i64 + 1)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Half-open sample-index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn get(&self, s: Split) -> Range<usize> {
        match s {
            Split::Train => self.train.clone(),
            Split::Valid => self.valid.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Rejects overlapping ranges.
    pub fn check_disjoint(&self) -> Result<(), DataError> {
        let r = [&self.train, &self.valid, &self.test];
        for a in 0..3 {
            for b in a + 1..3 {
                if r[a].start < r[b].end && r[b].start < r[a].end {
                    return Err(DataError::Leakage(format!(
                        "{} {:?} overlaps {} {:?}",
                        Split::ALL[a].name(),
                        r[a],
                        Split::ALL[b].name(),
                        r[b]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything `generate` needs.
#[derive(Debug, Clone, Copy)]
pub struct Recipe<'a> {
    pub grid: &'a GridSpec,
    pub forecast: &'a ModelConfig,
    pub nature: &'a NatureConfig,
    pub channels: &'a [ChannelSpec],
    pub obs: &'a ObsConfig,
    pub data: &'a DataConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: GridSpec,
    pub splits: Splits,
    pub horizon: usize,
    /// `truth[t]` for t = 0..=count+horizon; sample `s` is valid at t = s+1.
    pub truth: Vec<GridState<f32>>,
    pub backgrounds: Vec<GridState<f32>>,
    pub obs: Vec<SuperObsGrid>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.backgrounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backgrounds.is_empty()
    }

    pub fn background(&self, s: usize) -> &GridState<f32> {
        &self.backgrounds[s]
    }

    pub fn obs(&self, s: usize) -> &SuperObsGrid {
        &self.obs[s]
    }

    /// Truth `lead` steps after the analysis time of sample `s`.
    pub fn truth(&self, s: usize, lead: usize) -> &GridState<f32> {
        &self.truth[s + 1 + lead]
    }

    pub fn samples(&self, split: Split) -> Vec<usize> {
        self.splits.get(split).collect()
    }

    /// SHA-256 over the on-disk encoding of every file, in a fixed order.
    pub fn content_hash(&self) -> String {
        let mut all = Vec::new();
        all.extend_from_slice(self.manifest().as_bytes());
        for t in &self.truth {
            all.extend_from_slice(&formats::encode_grid(&t.fields));
        }
        for (b, o) in self.backgrounds.iter().zip(&self.obs) {
            all.extend_from_slice(&formats::encode_grid(&b.fields));
            all.extend_from_slice(&formats::encode_obs(o));
        }
        formats::sha256_hex(&all)
    }

    fn manifest(&self) -> String {
        let m = Manifest {
            grid: self.grid.clone(),
            splits: self.splits.clone(),
            horizon: self.horizon,
            samples: self.len(),
        };
        toml::to_string(&m).expect("manifest serializes")
    }

    /// Writes `dataset.toml`, `truth/tNNNNN.grd`, and per split `sNNNNN.bg.grd` / `sNNNNN.obs`.
    /// Samples in the inter-split gaps go to `gap/`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let manifest = dir.join("dataset.toml");
        fs::write(&manifest, self.manifest()).map_err(io_err(&manifest))?;
        for (t, s) in self.truth.iter().enumerate() {
            formats::write_grid(&dir.join("truth").join(format!("t{t:05}.grd")), &s.fields)?;
        }
        for s in 0..self.len() {
            let sub = dir.join(self.folder(s));
            formats::write_grid(&sub.join(format!("s{s:05}.bg.grd")), &self.backgrounds[s].fields)?;
            formats::write_obs(&sub.join(format!("s{s:05}.obs")), &self.obs[s])?;
        }
        Ok(())
    }

    fn folder(&self, s: usize) -> &'static str {
        Split::ALL
            .into_iter()
            .find(|&sp| self.splits.get(sp).contains(&s))
            .map_or("gap", Split::name)
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        Self::load_parts(dir, true)
    }

    /// Truth and backgrounds only; `obs` stays empty and no `.obs` file is opened.
    pub fn load_without_obs(dir: &Path) -> Result<Self, DataError> {
        Self::load_parts(dir, false)
    }

    fn load_parts(dir: &Path, with_obs: bool) -> Result<Self, DataError> {
        let path = dir.join("dataset.toml");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let m: Manifest = toml::from_str(&text).map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
        m.splits.check_disjoint()?;
        let grid_state = |t| GridState::new(&m.grid, t).map_err(DataError::from);
        let mut ds = Self {
            grid: m.grid.clone(),
            splits: m.splits.clone(),
            horizon: m.horizon,
            truth: Vec::with_capacity(m.samples + m.horizon + 1),
            backgrounds: Vec::with_capacity(m.samples),
            obs: Vec::with_capacity(m.samples),
        };
        for t in 0..=m.samples + m.horizon {
            ds.truth.push(grid_state(formats::read_grid(&dir.join("truth").join(format!("t{t:05}.grd")))?)?);
        }
        for s in 0..m.samples {
            let sub = dir.join(ds.folder(s));
            ds.backgrounds.push(grid_state(formats::read_grid(&sub.join(format!("s{s:05}.bg.grd")))?)?);
            if with_obs {
                ds.obs.push(formats::read_obs(&sub.join(format!("s{s:05}.obs")))?);
            }
        }
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    grid: GridSpec,
    horizon: usize,
    samples: usize,
    splits: Splits,
}

/// Truth run, backgrounds and observations for every sample. Deterministic per seed
/// in both execution modes.
pub fn generate(recipe: Recipe<'_>, mode: Mode) -> Result<Dataset, DataError> {
    let Recipe { grid, forecast, nature, channels, obs, data } = recipe;
    grid.validate()?;
    obs.validate(grid)?;
    let splits = data.splits();
    splits.check_disjoint()?;
    data.epoch()?;
    let count = data.count();
    let radiometer = Radiometer::new(channels, &grid.levels)?;
    let AtmosphereSet { truth, backgrounds } =
        generate_dataset(grid, forecast, nature, count, data.horizon, data.seed, mode)?;
    let observations = exec::map_range(mode, count, |s| {
        let seed = sample_rng(data.seed, DOMAIN_OBS, s as u64).gen::<u64>();
        let time = data.valid_time(s)?;
        let (_, sog) = synthesize_observations(&truth[s + 1].cast::<f64>(), grid, &radiometer, obs, time, seed)?;
        Ok::<_, DataError>(sog)
    });
    Ok(Dataset {
        grid: grid.clone(),
        splits,
        horizon: data.horizon,
        truth,
        backgrounds,
        obs: observations.into_iter().collect::<Result<_, _>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (GridSpec, ModelConfig, NatureConfig, Vec<ChannelSpec>, ObsConfig, DataConfig) {
        let grid = GridSpec { h: 16, w: 32, ..GridSpec::default() };
        let nature = NatureConfig { spinup: 5, ..NatureConfig::default() };
        let obs = ObsConfig {
            crop: crate::obsmodel::Crop { row: 4, col: 8, h: 8, w: 8 },
            ..ObsConfig::default()
        };
        let data = DataConfig { n_train: 4, n_valid: 2, n_test: 3, gap: 1, horizon: 2, ..DataConfig::default() };
        (grid, ModelConfig::desk_forecast(), nature, ChannelSpec::desk_channels(), obs, data)
    }

    #[test]
    fn splits_are_disjoint_with_gaps() {
        let s = DataConfig::default().splits();
        assert_eq!((s.train.clone(), s.valid.clone(), s.test.clone()), (0..512, 532..596, 616..744));
        s.check_disjoint().unwrap();
        let bad = Splits { train: 0..10, valid: 9..12, test: 20..30 };
        assert!(matches!(bad.check_disjoint(), Err(DataError::Leakage(_))));
    }

    #[test]
    fn generate_is_deterministic_and_round_trips() {
        let (grid, fc, nature, ch, obs, data) = small();
        let recipe = Recipe { grid: &grid, forecast: &fc, nature: &nature, channels: &ch, obs: &obs, data: &data };
        let a = generate(recipe, Mode::Parallel).unwrap();
        let b = generate(recipe, Mode::Sequential).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4 + 1 + 2 + 1 + 3);
        assert_eq!(a.truth.len(), a.len() + 3);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(fs::read_dir(dir.path().join("train")).unwrap().count(), 2 * 4);
        assert_eq!(fs::read_dir(dir.path().join("test")).unwrap().count(), 2 * 3);
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.content_hash(), a.content_hash());
    }
}
