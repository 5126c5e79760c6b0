use crate::danet::{DaNet, NetConfig, Variant};
use crate::dataset::{generate, DataConfig, Recipe};
use crate::diffcore::{GradSet, ParamStore, Tensor};
use crate::exec::Mode;
use crate::obsmodel::{ChannelSpec, Crop, ObsConfig};
use crate::toyatm::{GridSpec, ModelConfig, NatureConfig, ToyModel};

use super::*;

fn cfg() -> TrainConfig {
    TrainConfig::default()
}

#[test]
fn schedule_endpoints() {
    let c = cfg();
    assert_eq!(lr_at_step(1, &c).unwrap(), 1e-8);
    assert_eq!(lr_at_step(501, &c).unwrap(), 2e-3);
    let mid = lr_at_step(251, &c).unwrap();
    assert!((mid - 1.000005e-3).abs() < 1e-15, "{mid}");
    assert!(lr_at_step(6000, &c).unwrap().abs() < 1e-15);
    assert!(matches!(lr_at_step(0, &c), Err(TrainError::StepRange { .. })));
    assert!(lr_at_step(6001, &c).is_err());
}

#[test]
fn schedule_is_continuous_at_the_junction_and_decreasing_after() {
    let c = cfg();
    let at = lr_at_step(501, &c).unwrap();
    let next = lr_at_step(502, &c).unwrap();
    assert!((at - c.stop_lrate).abs() < 1e-12);
    assert!((next - c.stop_lrate).abs() < 1e-9);
    let rates: Vec<f64> = (501..=6000).map(|s| lr_at_step(s, &c).unwrap()).collect();
    assert!(rates.windows(2).all(|p| p[1] <= p[0]));
}

#[test]
fn weighted_l1_examples() {
    let lats = [0.0, 60.0];
    let pred = Tensor::from_vec(&[1, 2, 1], vec![3.0, 0.0]).unwrap();
    let truth = Tensor::zeros(&[1, 2, 1]);
    assert!((weighted_l1(&pred, &truth, &lats).unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(weighted_l1(&pred, &pred, &lats).unwrap(), 0.0);
    let lats5 = [-60.0, -20.0, 0.0, 33.0, 80.0];
    let a = Tensor::from_fn(&[2, 5, 4], |i| i as f64 * 0.1);
    let b = a.map(|v| v - 0.7);
    assert!((weighted_l1(&a, &b, &lats5).unwrap() - 0.7).abs() < 1e-12);
    assert!(weighted_l1(&a, &Tensor::zeros(&[2, 5, 3]), &lats5).is_err());
}

#[test]
fn weighted_l1_is_invariant_under_longitude_rotation() {
    let lats = [-45.0, 0.0, 45.0];
    let a = Tensor::from_fn(&[2, 3, 6], |i| ((i * 7) % 11) as f64);
    let b = Tensor::from_fn(&[2, 3, 6], |i| ((i * 5) % 13) as f64);
    let roll = |t: &Tensor<f64>| Tensor::from_fn(&[2, 3, 6], |n| {
        let (row, j) = (n / 6, n % 6);
        t.data()[row * 6 + (j + 2) % 6]
    });
    let l = weighted_l1(&a, &b, &lats).unwrap();
    assert!((weighted_l1(&roll(&a), &roll(&b), &lats).unwrap() - l).abs() < 1e-12);
}

#[test]
fn total_loss_arithmetic() {
    assert_eq!(total_loss(1.0, &[2.0, 4.0]), 4.0);
    assert_eq!(total_loss(1.5, &[]), 1.5);
    assert_eq!(total_loss(1.0, &[0.25; 4]), 1.25);
}

#[test]
fn decoupled_decay_with_zero_gradient() {
    let mut store = ParamStore::<f32>::new();
    store.add("w", Tensor::from_fn(&[4], |i| i as f32 - 1.5), true);
    store.add("frozen", Tensor::full(&[2], 3.0), false);
    let before = store.clone();
    let mut opt = AdamW::new(&store);
    let c = TrainConfig { weight_decay: 0.1, ..cfg() };
    opt.step(&mut store, &GradSet::default(), 0.5, &c).unwrap();
    let f = (1.0 - 0.5 * 0.1) as f32;
    for (a, b) in store.iter().zip(before.iter()) {
        let expect: Vec<f32> = if a.1.trainable { b.1.value.data().iter().map(|v| v * f).collect() } else { b.1.value.data().to_vec() };
        assert_eq!(a.1.value.data(), &expect[..]);
    }
}

fn tiny() -> (crate::dataset::Dataset, ToyModel, NetConfig) {
    let grid = GridSpec { h: 16, w: 32, ..GridSpec::default() };
    let nature = NatureConfig { spinup: 5, ..NatureConfig::default() };
    let crop = Crop { row: 0, col: 16, h: 16, w: 16 };
    let obs = ObsConfig { crop, density: 3.0, ..ObsConfig::default() };
    let data = DataConfig { n_train: 6, n_valid: 1, n_test: 1, gap: 1, horizon: 2, ..DataConfig::default() };
    let fc = ModelConfig::desk_forecast();
    let ch = ChannelSpec::desk_channels();
    let ds = generate(
        Recipe { grid: &grid, forecast: &fc, nature: &nature, channels: &ch, obs: &obs, data: &data },
        Mode::Parallel,
    )
    .unwrap();
    let net = NetConfig { widths: [4, 8, 4], h: 16, w: 32, crop, ..NetConfig::default() };
    (ds, ToyModel::new(&grid, &fc).unwrap(), net)
}

fn state(net: &NetConfig, variant: Variant, ds: &crate::dataset::Dataset) -> TrainState {
    let mut n = DaNet::<f32>::new(net, variant, 5).unwrap();
    n.set_normalization(&fit_normalization(ds)).unwrap();
    TrainState::new(n)
}

fn short() -> TrainConfig {
    TrainConfig { warmup_steps: 2, total_iterations: 6, rollout: 2, batch_size: 2, checkpoint_every: 3, ..cfg() }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (ds, fc, net) = tiny();
    let mut st = state(&net, Variant::Assimilation, &ds);
    let before = st.net.store().clone();
    let c = TrainConfig { start_lrate: 1e-300, stop_lrate: 1e-300, total_iterations: 2, warmup_steps: 1, rollout: 1, ..cfg() };
    train(&mut st, &ds, &fc, &c, None, Mode::Sequential, |_| {}).unwrap();
    for (a, b) in st.net.store().iter().zip(before.iter()) {
        assert_eq!(a.1.value, b.1.value, "{}", a.1.name);
    }
}

#[test]
fn first_loss_is_the_background_loss() {
    let (ds, fc, net) = tiny();
    let mut st = state(&net, Variant::Correction, &ds);
    let c = TrainConfig { total_iterations: 2, warmup_steps: 1, rollout: 0, ..cfg() };
    let hist = train(&mut st, &ds, &fc, &c, None, Mode::Sequential, |_| {}).unwrap();
    let s = sample_order(6, 1, 1, c.seed)[0];
    let norm = fit_normalization(&ds);
    let z = |g: &crate::toyatm::GridState<f32>| {
        let mut t = g.fields.cast::<f64>();
        for ch in 0..10 {
            t.plane_mut(ch).iter_mut().for_each(|v| *v = (*v - norm.bg_mean[ch]) / norm.bg_std[ch]);
        }
        t
    };
    let expect = weighted_l1(&z(ds.background(s)), &z(ds.truth(s, 0)), &ds.grid.latitudes()).unwrap();
    assert!((hist[0].l0 - expect).abs() < 1e-5 * expect, "{} vs {expect}", hist[0].l0);
    assert_eq!(hist[0].total, hist[0].l0);
}

#[test]
fn sample_order_covers_each_pass() {
    let mut seen: Vec<usize> = (1..=5).flat_map(|s| sample_order(10, 2, s, 3)).collect();
    seen.sort();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    assert_ne!(sample_order(10, 10, 1, 3), sample_order(10, 10, 2, 3));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let (ds, fc, net) = tiny();
    let c = short();
    let dir = tempfile::tempdir().unwrap();
    let mut full = state(&net, Variant::Assimilation, &ds);
    let h_full = train(&mut full, &ds, &fc, &c, Some(dir.path()), Mode::Parallel, |_| {}).unwrap();
    assert_eq!(h_full.len(), 6);
    for r in &h_full {
        assert_eq!(r.lr, lr_at_step(r.step, &c).unwrap());
        assert!(r.total.is_finite());
    }
    let ck = crate::formats::read_checkpoint(&dir.path().join("step000003.ckpt")).unwrap();
    let mut resumed = restore(&ck).unwrap();
    assert_eq!(resumed.step(), 3);
    let h_tail = train(&mut resumed, &ds, &fc, &c, None, Mode::Sequential, |_| {}).unwrap();
    assert_eq!(&h_full[3..], &h_tail[..]);
    let a = checkpoint_of(&full);
    let b = checkpoint_of(&resumed);
    assert_eq!(crate::formats::encode_checkpoint(&a), crate::formats::encode_checkpoint(&b));
}

#[test]
fn rollout_gradient_changes_updates() {
    let (ds, fc, net) = tiny();
    let mut st = state(&net, Variant::Correction, &ds);
    let (w, _) = st.net.head();
    st.net.store_mut().get_mut(w).value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 7) as f32 - 3.0) * 1e-3);
    let run = |grad: bool| {
        let mut s = st.clone();
        let c = TrainConfig { rollout_gradient: grad, ..short() };
        let h = train(&mut s, &ds, &fc, &TrainConfig { total_iterations: 3, ..c }, None, Mode::Sequential, |_| {}).unwrap();
        (h, s)
    };
    let (ha, a) = run(true);
    let (hb, b) = run(false);
    assert_eq!(ha[0].total, hb[0].total);
    assert_ne!(a.net.store().value(w), b.net.store().value(w));
}
