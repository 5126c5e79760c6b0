//! Rayon data-parallel path against the sequential fallback on the two embarrassingly
//! parallel workloads: dataset generation and batched network evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use fxda::config::RunConfig;
use fxda::danet::{DaNet, NetConfig, Variant};
use fxda::dataset::{generate, DataConfig};
use fxda::evalx::{run_experiments, EvalConfig};
use fxda::exec::Mode;
use fxda::obsmodel::{Crop, ObsConfig};
use fxda::toyatm::{GridSpec, NatureConfig, ToyModel};

fn small() -> RunConfig {
    let crop = Crop { row: 0, col: 16, h: 16, w: 16 };
    RunConfig {
        grid: GridSpec { h: 16, w: 32, ..GridSpec::default() },
        nature: NatureConfig { spinup: 5, ..NatureConfig::default() },
        obs: ObsConfig { crop, ..ObsConfig::default() },
        data: DataConfig { n_train: 8, n_valid: 2, n_test: 8, gap: 1, horizon: 4, ..DataConfig::default() },
        net: NetConfig { widths: [4, 8, 4], h: 16, w: 32, crop, ..NetConfig::default() },
        eval: EvalConfig { leads: 4, ..EvalConfig::default() },
        ..RunConfig::default()
    }
}

const MODES: [(&str, Mode); 2] = [("parallel", Mode::Parallel), ("sequential", Mode::Sequential)];

fn bench_generate(c: &mut Criterion) {
    let cfg = small();
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| {
            b.iter(|| generate(cfg.recipe(), m).expect("generate"))
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let cfg = small();
    let ds = generate(cfg.recipe(), Mode::Parallel).expect("generate");
    let model = ToyModel::new(&cfg.grid, &cfg.forecast).expect("model");
    let assi = DaNet::<f32>::new(&cfg.net, Variant::Assimilation, 1).expect("net");
    let corr = DaNet::<f32>::new(&cfg.net, Variant::Correction, 2).expect("net");
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |b, &m| {
            b.iter(|| run_experiments(&ds, Some(&assi), Some(&corr), &model, &cfg.eval, m).expect("evaluate"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_generate, bench_evaluate);
criterion_main!(benches);
