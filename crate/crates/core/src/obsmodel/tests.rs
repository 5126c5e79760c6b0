use chrono::{TimeZone, Utc};
use proptest::prelude::*;

use super::*;
use crate::diffcore::Tensor;
use crate::toyatm::{GridSpec, GridState};

fn levels() -> Vec<f64> {
    GridSpec::default().levels
}

fn nearest_level_ln(levels: &[f64], p: f64) -> usize {
    let mut best = 0;
    for (k, l) in levels.iter().enumerate() {
        if (l.ln() - p.ln()).abs() < (levels[best].ln() - p.ln()).abs() {
            best = k;
        }
    }
    best
}

#[test]
fn exponential_transmittance_peaks_at_500() {
    // τ = exp(−p/500): |∂τ/∂ln p| = (p/500)e^{−p/500} is maximal at 500 hPa.
    let ch = ChannelSpec { id: 1, peak_pressure: 500.0, gamma: 1.0, t_gain: 1.0, q_gain: 0.5 };
    let wf = weighting_function(&ch, &levels()).unwrap();
    assert_eq!(wf.peak_level(), 2);
}

#[test]
fn weights_are_normalized_and_peak_near_pc() {
    let lv = levels();
    for ch in ChannelSpec::desk_channels() {
        let wf = weighting_function(&ch, &lv).unwrap();
        assert!(wf.weights.iter().all(|&w| w >= 0.0));
        assert!((wf.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(wf.peak_level(), nearest_level_ln(&lv, ch.peak_pressure));
    }
}

#[test]
fn large_gamma_concentrates_on_one_level() {
    let ch = ChannelSpec { id: 1, peak_pressure: 500.0, gamma: 60.0, t_gain: 1.0, q_gain: 0.5 };
    let wf = weighting_function(&ch, &levels()).unwrap();
    assert!(wf.weights[2] > 0.999, "{:?}", wf.weights);
}

#[test]
fn bad_levels_rejected() {
    let ch = ChannelSpec::desk_channels()[0].clone();
    assert!(weighting_function(&ch, &[500.0]).is_err());
    assert!(weighting_function(&ch, &[500.0, 300.0, 700.0]).is_err());
}

#[test]
fn isothermal_dry_column_gives_a_times_c() {
    let r = Radiometer::new(&ChannelSpec::desk_channels(), &levels()).unwrap();
    for k in 0..3 {
        let bt = r.simulate_bt(&[250.0; 5], &[0.0; 5], k, 0.0, Sky::Clear);
        assert!((bt - 250.0 * r.channels()[k].t_gain).abs() < 1e-10);
    }
}

#[test]
fn humidity_lowers_clear_sky_bt() {
    let r = Radiometer::new(&ChannelSpec::desk_channels(), &levels()).unwrap();
    let t = [220.0, 235.0, 255.0, 270.0, 280.0];
    let q = [10.0, 20.0, 40.0, 60.0, 70.0];
    for k in 0..3 {
        let base = r.simulate_bt(&t, &q, k, 30.0, Sky::Clear);
        for l in 0..5 {
            let mut q2 = q;
            q2[l] += 0.5;
            assert!(r.simulate_bt(&t, &q2, k, 30.0, Sky::Clear) < base);
        }
    }
}

#[test]
fn cloud_hides_the_column_below_its_top() {
    let r = Radiometer::new(&ChannelSpec::desk_channels(), &levels()).unwrap();
    let t = [220.0, 235.0, 255.0, 270.0, 280.0];
    let q = [10.0, 20.0, 40.0, 60.0, 70.0];
    let sky = Sky::Cloudy { top: 1 };
    for k in 0..3 {
        let base = r.simulate_bt(&t, &q, k, 10.0, sky);
        for l in 2..5 {
            let (mut t2, mut q2) = (t, q);
            t2[l] += 3.0;
            q2[l] -= 7.0;
            assert_eq!(r.simulate_bt(&t2, &q, k, 10.0, sky), base);
            assert_eq!(r.simulate_bt(&t, &q2, k, 10.0, sky), base);
        }
    }
}

#[test]
fn jacobian_matches_finite_differences() {
    let r = Radiometer::new(&ChannelSpec::desk_channels(), &levels()).unwrap();
    let t = [220.0, 235.0, 255.0, 270.0, 280.0];
    let q = [10.0, 20.0, 40.0, 60.0, 70.0];
    let h = 1e-3;
    for k in 0..3 {
        for zen in [0.0, 35.0, 70.0] {
            let (jt, jq) = r.jacobian_bt(k, zen);
            for l in 0..5 {
                let (mut tp, mut tm) = (t, t);
                tp[l] += h;
                tm[l] -= h;
                let fd = (r.simulate_bt(&tp, &q, k, zen, Sky::Clear) - r.simulate_bt(&tm, &q, k, zen, Sky::Clear))
                    / (2.0 * h);
                assert!((fd - jt[l]).abs() <= 1e-8 * jt[l].abs().max(1e-3), "dT {fd} vs {}", jt[l]);
                let (mut qp, mut qm) = (q, q);
                qp[l] += h;
                qm[l] -= h;
                let fd = (r.simulate_bt(&t, &qp, k, zen, Sky::Clear) - r.simulate_bt(&t, &qm, k, zen, Sky::Clear))
                    / (2.0 * h);
                assert!((fd - jq[l]).abs() <= 1e-8 * jq[l].abs().max(1e-3), "dQ {fd} vs {}", jq[l]);
                assert!(jq[l] <= 0.0);
            }
            let peak = |v: &[f64]| super::channel::argmax(&v.iter().map(|x| x.abs()).collect::<Vec<_>>());
            assert_eq!(peak(&jq), r.weighting(k).peak_level());
        }
        let (jt, _) = r.jacobian_bt(k, 0.0);
        let a = r.channels()[k].t_gain;
        for (x, w) in jt.iter().zip(&r.weighting(k).weights) {
            assert_eq!(*x, a * w);
        }
    }
}

fn fp(lat: f64, lon: f64, minutes: f64, bt: f64) -> ObsFootprint {
    ObsFootprint {
        lat,
        lon,
        time_offset: minutes,
        zenith: 0.0,
        bt: vec![bt],
        cloudy: false,
        cloud_top: 0,
    }
}

fn epoch() -> chrono::DateTime<Utc> {
    Utc.with_ymd_and_hms(2023, 6, 1, 0, 0, 0).unwrap()
}

#[test]
fn superobs_averages_and_masks() {
    let g = GridSpec::default();
    let crop = Crop { row: 30, col: 10, h: 4, w: 4 };
    let (lat, lon) = (g.latitudes()[31], g.longitudes()[12]);
    let fps = vec![fp(lat + 0.3, lon - 0.5, -10.0, 1.0), fp(lat - 0.2, lon + 0.7, 5.0, 3.0)];
    let so = make_superobs(&fps, &g, crop, 3, 1, epoch()).unwrap();
    assert!(so.is_valid(1, 1, 2));
    assert_eq!(so.bt_at(1, 0, 1, 2), 2.0);
    assert_eq!(so.valid_count(), 1);
    assert!(!so.is_valid(1, 0, 0));
    assert_eq!(so.bt_at(1, 0, 0, 0), 0.0);
    let empty = make_superobs(&[], &g, crop, 3, 1, epoch()).unwrap();
    assert_eq!(empty.valid_count(), 0);
    assert!(empty.aux.data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn corner_footprint_counted_once_in_lower_cell() {
    let g = GridSpec::default();
    let crop = Crop { row: 28, col: 8, h: 8, w: 8 };
    // Shared corner of cells (31,12), (31,13), (32,12), (32,13).
    let lat = -90.0 + 32.0 * g.lat_spacing();
    let lon = (12.0 + 0.5) * g.lon_spacing();
    let so = make_superobs(&[fp(lat, lon, 0.0, 7.0)], &g, crop, 1, 1, epoch()).unwrap();
    assert_eq!(so.valid_count(), 1);
    assert!(so.is_valid(0, 31 - 28, 12 - 8));
    assert_eq!(cell_of(&g, lat, lon), Some((31, 12)));
}

#[test]
fn frames_partition_the_window() {
    assert_eq!(frame_of(-60.0, 3), Some(0));
    assert_eq!(frame_of(-20.0, 3), Some(1));
    assert_eq!(frame_of(20.0, 3), Some(2));
    assert_eq!(frame_of(60.0, 3), Some(2));
    assert_eq!(frame_of(60.5, 3), None);
    assert_eq!(frame_of(-60.5, 3), None);
}

#[test]
fn aux_encoding_examples() {
    let e = encode_aux(90.0, 0.0, 0.0, epoch());
    assert!((e[0] - 1.0).abs() < 1e-15 && (e[1] - 1.0).abs() < 1e-15 && (e[2] - 1.0).abs() < 1e-15);
    let noon = Utc.with_ymd_and_hms(2023, 6, 1, 12, 0, 0).unwrap();
    let e = encode_aux(0.0, 0.0, 0.0, noon);
    assert!((e[5] + 1.0).abs() < 1e-12 && e[6].abs() < 1e-12);
}

proptest! {
    #[test]
    fn aux_encodings_in_unit_range(lat in -90.0f64..90.0, lon in -360.0f64..720.0, zen in 0.0f64..70.0, mins in 0i64..600_000) {
        let e = encode_aux(lat, lon, zen, epoch() + chrono::Duration::minutes(mins));
        prop_assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn superobs_values_within_contributor_range(vals in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, -60.0f64..=60.0, 200.0f64..300.0), 1..60)) {
        let g = GridSpec::default();
        let crop = Crop { row: 10, col: 20, h: 3, w: 3 };
        let lat0 = -90.0 + 10.0 * g.lat_spacing();
        let lon0 = 19.5 * g.lon_spacing();
        let fps: Vec<_> = vals.iter().map(|&(u, v, t, b)| fp(lat0 + u * 3.0 * g.lat_spacing(), lon0 + v * 3.0 * g.lon_spacing(), t, b)).collect();
        let so = make_superobs(&fps, &g, crop, 3, 1, epoch()).unwrap();
        let (lo, hi) = vals.iter().fold((f64::MAX, f64::MIN), |(l, h), x| (l.min(x.3), h.max(x.3)));
        for f in 0..3 { for i in 0..3 { for j in 0..3 {
            if so.is_valid(f, i, j) {
                let v = so.bt_at(f, 0, i, j) as f64;
                prop_assert!(v >= lo - 1e-3 && v <= hi + 1e-3);
            }
        }}}
        // Every footprint lands in exactly one (frame, cell).
        let mut total = 0usize;
        for p in &fps {
            if let (Some((i, j)), Some(_)) = (cell_of(&g, p.lat, p.lon), frame_of(p.time_offset, 3)) {
                if crop.contains(i, j) { total += 1; }
            }
        }
        prop_assert_eq!(total, fps.len());
    }
}

fn truth_state(g: &GridSpec) -> GridState<f64> {
    let l = g.n_levels();
    let f = Tensor::from_fn(&g.shape(), |idx| {
        let ch = idx / (g.h * g.w);
        let p = (idx % (g.h * g.w)) as f64;
        if ch < l { 230.0 + ch as f64 * 10.0 + (p * 0.01).sin() } else { 40.0 + 10.0 * (p * 0.02).cos() }
    });
    GridState { fields: f }
}

#[test]
fn synthesis_is_deterministic_and_dense() {
    let g = GridSpec::default();
    let r = Radiometer::new(&ChannelSpec::desk_channels(), &g.levels).unwrap();
    let cfg = ObsConfig::default();
    let truth = truth_state(&g);
    let (fa, sa) = synthesize_observations(&truth, &g, &r, &cfg, epoch(), 5).unwrap();
    let (fb, sb) = synthesize_observations(&truth, &g, &r, &cfg, epoch(), 5).unwrap();
    assert_eq!(fa, fb);
    assert_eq!(sa, sb);
    assert!(sa.coverage() > 0.99, "coverage {}", sa.coverage());
    assert!(fa.iter().all(|f| f.zenith >= 0.0 && f.zenith <= MAX_ZENITH && f.bt.iter().all(|b| b.is_finite())));
    let clear = ObsConfig { cloud_fraction: 0.0, ..cfg };
    let (fc, _) = synthesize_observations(&truth, &g, &r, &clear, epoch(), 5).unwrap();
    assert!(fc.iter().all(|f| !f.cloudy));
}
