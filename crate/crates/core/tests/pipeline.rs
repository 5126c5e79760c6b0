//! Small end-to-end runs through the public API: generate, persist, train, resume,
//! evaluate.

use std::fs;

use fxda::config::RunConfig;
use fxda::danet::{DaNet, NetConfig, Variant};
use fxda::dataset::{generate, DataConfig, Dataset, Split};
use fxda::evalx::{run_experiments, EvalConfig, EvalError, Experiment};
use fxda::exec::Mode;
use fxda::formats;
use fxda::obsmodel::{Crop, ObsConfig};
use fxda::toyatm::{GridSpec, NatureConfig, ToyModel};
use fxda::training::{self, TrainConfig, TrainState};

fn small() -> RunConfig {
    let crop = Crop { row: 0, col: 16, h: 16, w: 16 };
    let cfg = RunConfig {
        grid: GridSpec { h: 16, w: 32, ..GridSpec::default() },
        nature: NatureConfig { spinup: 5, ..NatureConfig::default() },
        obs: ObsConfig { crop, ..ObsConfig::default() },
        data: DataConfig { n_train: 4, n_valid: 2, n_test: 3, gap: 1, horizon: 3, ..DataConfig::default() },
        net: NetConfig { widths: [4, 8, 4], h: 16, w: 32, crop, ..NetConfig::default() },
        train: TrainConfig { warmup_steps: 1, total_iterations: 4, rollout: 2, batch_size: 2, checkpoint_every: 2, ..TrainConfig::desk() },
        eval: EvalConfig { leads: 3, bootstrap: 50, smoothing: 2, ..EvalConfig::default() },
        ..RunConfig::default()
    };
    cfg.validate().expect("small config is valid");
    cfg
}

fn fresh(cfg: &RunConfig, ds: &Dataset, variant: Variant) -> TrainState {
    let mut net = DaNet::<f32>::new(&cfg.net, variant, cfg.train.seed).unwrap();
    net.set_normalization(&training::fit_normalization(ds)).unwrap();
    TrainState::new(net)
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let cfg = small();
    let ds = generate(cfg.recipe(), Mode::Parallel).unwrap();
    let model = ToyModel::new(&cfg.grid, &cfg.forecast).unwrap();
    let tmp = tempfile::tempdir().unwrap();

    let mut full = fresh(&cfg, &ds, Variant::Assimilation);
    let whole = training::train(&mut full, &ds, &model, &cfg.train, Some(&tmp.path().join("a")), Mode::Parallel, |_| {}).unwrap();

    let half = fs::read_dir(tmp.path().join("a")).unwrap().flatten().map(|e| e.path()).min().unwrap();
    let mut resumed = training::restore(&formats::read_checkpoint(&half).unwrap()).unwrap();
    assert_eq!(resumed.step(), 2);
    let tail = training::train(&mut resumed, &ds, &model, &cfg.train, None, Mode::Sequential, |_| {}).unwrap();

    assert_eq!(tail, whole[2..]);
    assert_eq!(
        formats::encode_checkpoint(&training::checkpoint_of(&resumed)),
        formats::encode_checkpoint(&training::checkpoint_of(&full))
    );
}

#[test]
fn corrector_trains_without_observations() {
    let cfg = small();
    let tmp = tempfile::tempdir().unwrap();
    generate(cfg.recipe(), Mode::Parallel).unwrap().save(tmp.path()).unwrap();
    let ds = Dataset::load_without_obs(tmp.path()).unwrap();
    let model = ToyModel::new(&cfg.grid, &cfg.forecast).unwrap();
    let mut st = fresh(&cfg, &ds, Variant::Correction);
    let hist = training::train(&mut st, &ds, &model, &cfg.train, None, Mode::Parallel, |_| {}).unwrap();
    assert_eq!(hist.len(), 4);
    assert!(hist.iter().all(|r| r.total.is_finite()));
}

#[test]
fn evaluation_refuses_the_training_split() {
    let cfg = small();
    let ds = generate(cfg.recipe(), Mode::Parallel).unwrap();
    let model = ToyModel::new(&cfg.grid, &cfg.forecast).unwrap();
    let eval = EvalConfig { split: Split::Train, ..cfg.eval.clone() };
    assert!(matches!(run_experiments(&ds, None, None, &model, &eval, Mode::Parallel), Err(EvalError::Data(_))));

    let rep = run_experiments(&ds, None, None, &model, &cfg.eval, Mode::Parallel).unwrap();
    let score = rep.forecast_score(Experiment::Ctrl, 1..=3).unwrap();
    assert!(score.is_finite() && score > 0.0);
    assert!(rep.forecast_score(Experiment::Ctrl, 1..=4).is_err());
}
