use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t3(c: usize, h: usize, w: usize, f: impl FnMut(usize) -> f64) -> Tensor<f64> {
    Tensor::from_fn(&[c, h, w], f)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn conv_identity_kernel() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::<f64>::full(&[1, 1, 1, 1], 1.0), true);
    let x = t3(1, 5, 4, |i| i as f64 * 0.5 - 3.0);
    let mut g = Graph::new(&store);
    let xv = g.input(x.clone());
    let wv = g.param(w);
    let y = g.conv2d(xv, wv, None, 1).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv_constant_field_interior() {
    let c = 1.7;
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::<f64>::full(&[1, 1, 3, 3], 1.0), true);
    let mut g = Graph::new(&store);
    let xv = g.input(Tensor::<f64>::full(&[1, 6, 6], c));
    let wv = g.param(w);
    let y = g.conv2d(xv, wv, None, 1).unwrap();
    let out = g.value(y);
    assert_eq!(out.shape(), &[1, 6, 6]);
    for i in 1..5 {
        for j in 1..5 {
            assert!((out.at3(0, i, j) - 9.0 * c).abs() < 1e-12);
        }
    }
    // Corners see four in-range taps under zero padding.
    assert!((out.at3(0, 0, 0) - 4.0 * c).abs() < 1e-12);
}

#[test]
fn conv_stride_two_halves_extent() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::<f64>::full(&[3, 2, 2, 2], 0.25), true);
    let mut g = Graph::new(&store);
    let xv = g.input(Tensor::<f64>::full(&[2, 8, 8], 1.0));
    let wv = g.param(w);
    let y = g.conv2d(xv, wv, None, 2).unwrap();
    assert_eq!(g.value(y).shape(), &[3, 4, 4]);
    assert!(g.value(y).data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
}

#[test]
fn conv_rejects_bad_shapes() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::<f64>::zeros(&[1, 3, 3, 3]), true);
    let w2 = store.add("w2", Tensor::<f64>::zeros(&[1, 2, 2, 2]), true);
    let w5 = store.add("w5", Tensor::<f64>::zeros(&[1, 2, 2, 2]), true);
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::<f64>::zeros(&[2, 4, 4]));
    let wv = g.param(w);
    assert!(matches!(g.conv2d(x, wv, None, 1), Err(DiffError::Shape { .. })));
    let w2v = g.param(w2);
    assert!(matches!(g.conv2d(x, w2v, None, 1), Err(DiffError::InvalidKernel { .. })));
    let odd = g.input(Tensor::<f64>::zeros(&[2, 5, 4]));
    let w5v = g.param(w5);
    assert!(matches!(g.conv2d(odd, w5v, None, 2), Err(DiffError::Shape { .. })));
}

fn unit_norm(store: &mut ParamStore<f64>, c: usize) -> (ParamId, ParamId) {
    let gain = store.add("gain", Tensor::<f64>::full(&[c], 1.0), true);
    let bias = store.add("bias", Tensor::<f64>::zeros(&[c]), true);
    (gain, bias)
}

#[test]
fn layer_norm_examples() {
    let mut store = ParamStore::<f64>::new();
    let (gn, bn) = unit_norm(&mut store, 2);
    let mut g = Graph::new(&store);
    let gv = g.param(gn);
    let bv = g.param(bn);

    let constant = g.input(Tensor::<f64>::full(&[2, 2, 2], 3.3));
    let y = g.layer_norm(constant, gv, bv, LAYER_NORM_EPS).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let pair = g.input(Tensor::<f64>::from_vec(&[2, 1, 1], vec![2.0, 4.0]).unwrap());
    let y = g.layer_norm(pair, gv, bv, LAYER_NORM_EPS).unwrap();
    let expect = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
    assert!((g.value(y).data()[0] + expect).abs() < 1e-15);
    assert!((g.value(y).data()[1] - expect).abs() < 1e-15);
}

#[test]
fn layer_norm_applies_gain_and_bias_after_normalizing() {
    let mut store = ParamStore::<f64>::new();
    let gn = store.add("g", Tensor::<f64>::from_vec(&[2], vec![2.0, -0.5]).unwrap(), true);
    let bn = store.add("b", Tensor::<f64>::from_vec(&[2], vec![0.25, 1.0]).unwrap(), true);
    let (un_g, un_b) = unit_norm(&mut store, 2);
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::<f64>::from_vec(&[2, 1, 2], vec![1.0, -2.0, 5.0, 0.5]).unwrap());
    let (gv, bv, ug, ub) = (g.param(gn), g.param(bn), g.param(un_g), g.param(un_b));
    let affine = g.layer_norm(x, gv, bv, LAYER_NORM_EPS).unwrap();
    let plain = g.layer_norm(x, ug, ub, LAYER_NORM_EPS).unwrap();
    for ch in 0..2 {
        let (gain, bias) = ([2.0, -0.5][ch], [0.25, 1.0][ch]);
        for j in 0..2 {
            let want = gain * g.value(plain).at3(ch, 0, j) + bias;
            assert!((g.value(affine).at3(ch, 0, j) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn silu_values() {
    let x = Tensor::<f64>::from_vec(&[3], vec![0.0, 1.0, 50.0]).unwrap();
    let y = ops::silu(&x);
    assert_eq!(y.data()[0], 0.0);
    assert!((y.data()[1] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    assert!((y.data()[1] - 0.731059).abs() < 1e-6);
    assert!((y.data()[2] - 50.0).abs() < 1e-12);
}

#[test]
fn pixel_shuffle_examples() {
    let x = Tensor::<f64>::from_vec(&[4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = ops::pixel_shuffle(&x, 2).unwrap();
    assert_eq!(y.shape(), &[1, 2, 2]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);

    let big = t3(8, 2, 2, |i| i as f64);
    let y = ops::pixel_shuffle(&big, 2).unwrap();
    assert_eq!(y.shape(), &[2, 4, 4]);
    assert_eq!(ops::pixel_unshuffle(&y, 2).unwrap(), big);

    let bad = t3(6, 2, 2, |_| 0.0);
    assert!(matches!(
        ops::pixel_shuffle(&bad, 2),
        Err(DiffError::IndivisibleChannels { channels: 6, factor: 2 })
    ));
}

#[test]
fn bilinear_examples() {
    let c = t3(2, 7, 5, |_| 4.25);
    for (h, w) in [(6, 5), (3, 9), (1, 1), (14, 10)] {
        let y = ops::bilinear_resize(&c, h, w).unwrap();
        assert!(y.data().iter().all(|&v| v == 4.25));
        let back = ops::bilinear_resize(&y, 7, 5).unwrap();
        assert_eq!(back, c);
    }
    // Ramp along height stays a ramp with the same endpoints.
    let (h, w) = (9, 3);
    let ramp = t3(1, h, w, |i| 2.0 + 0.5 * (i / w) as f64);
    let y = ops::bilinear_resize(&ramp, h - 1, w).unwrap();
    let (first, last) = (2.0, 2.0 + 0.5 * (h - 1) as f64);
    for i in 0..h - 1 {
        let want = first + (last - first) * i as f64 / (h - 2) as f64;
        for j in 0..w {
            assert!((y.at3(0, i, j) - want).abs() < 1e-12);
        }
    }
    assert!(ops::bilinear_resize(&ramp, 0, 3).is_err());
}

#[test]
fn backward_sum_of_squares() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
    let q = store.add("unused", Tensor::<f64>::from_vec(&[2], vec![5.0, 5.0]).unwrap(), true);
    store.get_mut(q).grad = Tensor::<f64>::from_vec(&[2], vec![0.5, -0.5]).unwrap();

    let grads = {
        let mut g = Graph::new(&store);
        let pv = g.param(p);
        let _qv = g.param(q);
        let l = g.sum_squares(pv);
        g.backward(l).unwrap()
    };
    assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
    assert!(grads.get(q).is_none());

    store.accumulate(&grads);
    store.accumulate(&grads);
    assert_eq!(store.get(p).grad.data(), &[4.0, 8.0]);
    assert_eq!(store.get(q).grad.data(), &[0.5, -0.5]);
    store.zero_grad();
    assert!(store.get(p).grad.data().iter().all(|&v| v == 0.0));
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::<f64>::zeros(&[3]), true);
    let mut g = Graph::new(&store);
    let pv = g.param(p);
    let s = g.scale(pv, 2.0);
    assert!(matches!(g.backward(s), Err(DiffError::NonScalarLoss(_))));
}

// One parameter per tensor so gradcheck covers inputs as well as weights.
fn check_all(store: &mut ParamStore<f64>, f: impl Fn(&mut Graph<'_, f64>) -> Result<Var, DiffError>) {
    let report = gradcheck::check(store, f, 1e-5, 64).unwrap();
    for r in &report {
        assert!(r.rel_error < 1e-4, "{} rel error {:.3e}", r.name, r.rel_error);
        assert!(r.analytic_norm > 0.0, "{} has zero gradient", r.name);
    }
}

// Projection onto a fixed random tensor keeps the loss sensitive to every output entry.
fn project(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Result<Var, DiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(g.value(y).shape(), &mut rng);
    let wv = g.input(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

#[test]
fn gradcheck_conv_layers() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (k, stride) in [(3, 1), (2, 2), (1, 1)] {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", rand_tensor(&[3, 6, 4], &mut rng), true);
        let w = store.add("w", rand_tensor(&[2, 3, k, k], &mut rng), true);
        let b = store.add("b", rand_tensor(&[2], &mut rng), true);
        check_all(&mut store, |g| {
            let (xv, wv, bv) = (g.param(x), g.param(w), g.param(b));
            let y = g.conv2d(xv, wv, Some(bv), stride)?;
            project(g, y, 7)
        });
    }
}

#[test]
fn gradcheck_norm_silu_shuffle_resize() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", rand_tensor(&[4, 3, 5], &mut rng), true);
    let gain = store.add("gain", rand_tensor(&[4], &mut rng), true);
    let bias = store.add("bias", rand_tensor(&[4], &mut rng), true);
    check_all(&mut store, |g| {
        let (xv, gv, bv) = (g.param(x), g.param(gain), g.param(bias));
        let y = g.layer_norm(xv, gv, bv, LAYER_NORM_EPS)?;
        project(g, y, 3)
    });

    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", rand_tensor(&[8, 3, 2], &mut rng), true);
    check_all(&mut store, |g| {
        let xv = g.param(x);
        let s = g.silu(xv);
        let p = g.pixel_shuffle(s, 2)?;
        let r = g.resize(p, 5, 3)?;
        project(g, r, 4)
    });
}

#[test]
fn gradcheck_structural_ops_and_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", rand_tensor(&[2, 6, 6], &mut rng), true);
    let b = store.add("b", rand_tensor(&[3, 6, 6], &mut rng), true);
    let patch = store.add("patch", rand_tensor(&[5, 2, 3], &mut rng), true);
    let target = rand_tensor(&[5, 6, 6], &mut rng);
    let rows: Vec<f64> = (0..6).map(|i| 0.5 + i as f64 * 0.1).collect();
    let chans = vec![1.0, 2.0, 0.5, 1.5, 1.0];
    check_all(&mut store, |g| {
        let (av, bv, pv) = (g.param(a), g.param(b), g.param(patch));
        let aff = g.channel_affine(av, &[2.0, -1.0], &[0.3, 0.1])?;
        let c = g.concat(&[aff, bv])?;
        let cr = g.crop(c, 1, 2, 2, 3)?;
        let sq = g.mul(cr, cr)?;
        let both = g.add(sq, pv)?;
        let pasted = g.paste(c, both, 3, 1)?;
        let d = g.sub(pasted, c)?;
        let full = g.scale(d, 0.7);
        let full = g.add(full, c)?;
        let lo = g.slice_channels(full, 0, 2)?;
        let hi = g.slice_channels(full, 2, 3)?;
        let lo = g.scale(lo, 1.5);
        let full = g.concat(&[hi, lo])?;
        g.weighted_l1(full, &target, &rows, &chans)
    });
}

#[test]
fn parameter_read_twice_accumulates() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true);
    let mut g = Graph::new(&store);
    let a = g.param(p);
    let b = g.param(p);
    let s = g.mul(a, b).unwrap();
    let l = g.sum(s);
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn slice_channels_rejects_out_of_range() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::<f64>::zeros(&[3, 2, 2]), true);
    let mut g = Graph::new(&store);
    let pv = g.param(p);
    assert!(g.slice_channels(pv, 2, 2).is_err());
    assert!(g.slice_channels(pv, 0, 0).is_err());
    let s = g.slice_channels(pv, 1, 2).unwrap();
    assert_eq!(g.value(s).shape(), &[2, 2, 2]);
}

#[test]
fn weighted_l1_op_matches_direct_sum() {
    let mut store = ParamStore::<f64>::new();
    let p = store.add("p", Tensor::<f64>::from_vec(&[1, 2, 1], vec![3.0, 0.0]).unwrap(), true);
    let rows = [4.0 / 3.0, 2.0 / 3.0];
    let mut g = Graph::new(&store);
    let pv = g.param(p);
    let l = g.weighted_l1(pv, &Tensor::<f64>::zeros(&[1, 2, 1]), &rows, &[1.0]).unwrap();
    assert!((g.value(l).item() - 2.0).abs() < 1e-15);
}

struct Cube;

impl DiffFunction<f64> for Cube {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        x.map(|v| v * v * v)
    }
    fn vjp(&self, x: &Tensor<f64>, dy: &Tensor<f64>) -> Tensor<f64> {
        x.zip_map(dy, |v, d| 3.0 * v * v * d).unwrap()
    }
}

#[test]
fn custom_function_gradient() {
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", Tensor::<f64>::from_vec(&[1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap(), true);
    let f: std::sync::Arc<dyn DiffFunction<f64>> = std::sync::Arc::new(Cube);
    check_all(&mut store, |g| {
        let xv = g.param(x);
        let y = g.custom(xv, f.clone());
        project(g, y, 9)
    });
}

// Down stage (2x2/s2 conv, norm, SiLU, 3x3 conv) then up stage
// (3x3 conv, norm, SiLU, 3x3 conv to 4x channels, shuffle by 2).
#[test]
fn down_then_up_restores_extent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (h, w) in [(8, 8), (6, 10), (2, 4)] {
        let mut store = ParamStore::<f64>::new();
        let d0 = store.add_kernel::<_>("d0", [4, 3, 2, 2], &mut rng);
        let d1 = store.add_kernel::<_>("d1", [4, 4, 3, 3], &mut rng);
        let u0 = store.add_kernel::<_>("u0", [4, 4, 3, 3], &mut rng);
        let u1 = store.add_kernel::<_>("u1", [8, 4, 3, 3], &mut rng);
        let (gn, bn) = unit_norm(&mut store, 4);
        let mut g = Graph::new(&store);
        let x = g.input(rand_tensor(&[3, h, w], &mut rng));
        let (d0, d1, u0, u1, gv, bv) = (g.param(d0), g.param(d1), g.param(u0), g.param(u1), g.param(gn), g.param(bn));
        let y = g.conv2d(x, d0, None, 2).unwrap();
        let y = g.layer_norm(y, gv, bv, LAYER_NORM_EPS).unwrap();
        let y = g.silu(y);
        let y = g.conv2d(y, d1, None, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[4, h / 2, w / 2]);
        let y = g.conv2d(y, u0, None, 1).unwrap();
        let y = g.layer_norm(y, gv, bv, LAYER_NORM_EPS).unwrap();
        let y = g.silu(y);
        let y = g.conv2d(y, u1, None, 1).unwrap();
        let y = g.pixel_shuffle(y, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2, h, w]);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let k = store.add_kernel::<_>("k", [5, 3, 3, 3], &mut rng);
    let input = rand_tensor(&[3, 12, 10], &mut rng);
    let run = || {
        let mut g = Graph::new(&store);
        let x = g.input(input.clone());
        let kv = g.param(k);
        let y = g.conv2d(x, kv, None, 1).unwrap();
        let y = g.silu(y);
        g.value(y).clone()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn f32_conv_matches_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = ParamStore::<f64>::new();
    let k = store.add_kernel::<_>("k", [4, 3, 3, 3], &mut rng);
    let input = rand_tensor(&[3, 9, 7], &mut rng);
    let store32 = store.cast::<f32>();
    let mut g = Graph::new(&store);
    let x = g.input(input.clone());
    let kv = g.param(k);
    let y = g.conv2d(x, kv, None, 1).unwrap();
    let mut g32 = Graph::new(&store32);
    let x32 = g32.input(input.cast());
    let kv32 = g32.param(k);
    let y32 = g32.conv2d(x32, kv32, None, 1).unwrap();
    for (a, b) in g.value(y).data().iter().zip(g32.value(y32).data()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}

proptest! {
    #[test]
    fn pixel_shuffle_preserves_multiset(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[c * 4, h, w], &mut rng);
        let y = ops::pixel_shuffle(&x, 2).unwrap();
        let mut a: Vec<f64> = x.data().to_vec();
        let mut b: Vec<f64> = y.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
        prop_assert_eq!(ops::pixel_unshuffle(&y, 2).unwrap(), x);
    }

    #[test]
    fn layer_norm_groups_have_zero_mean(c in 2usize..9, n in 1usize..6, seed in 0u64..1000, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let (gn, bn) = unit_norm(&mut store, c);
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_fn(&[c, 1, n], |_| rng.gen_range(-1.0..1.0) * scale + 7.0));
        let (gv, bv) = (g.param(gn), g.param(bn));
        let y = g.layer_norm(x, gv, bv, LAYER_NORM_EPS).unwrap();
        for p in 0..n {
            let mean: f64 = (0..c).map(|ch| g.value(y).at3(ch, 0, p)).sum::<f64>() / c as f64;
            prop_assert!(mean.abs() < 1e-10);
        }
    }

    #[test]
    fn bilinear_stays_within_input_range(h in 1usize..8, w in 1usize..8, th in 1usize..12, tw in 1usize..12, seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&[2, h, w], &mut rng);
        let (lo, hi) = x.data().iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
        let y = ops::bilinear_resize(&x, th, tw).unwrap();
        prop_assert!(y.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}
