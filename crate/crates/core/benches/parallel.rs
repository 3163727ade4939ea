use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nma_core::baselines::Mechanism;
use nma_core::eval::{evaluate, ic_regret, IcTestConfig};
use nma_core::par::ExecMode;
use nma_core::synth::{generate, GenSpec};
use nma_core::train::{train, NmaModel, TrainConfig, TrainOptions};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn spec() -> GenSpec {
    GenSpec {
        instances: 2_000,
        ..GenSpec::default()
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        clpm_pretrain_epochs: 0,
        hash_rows: 1_000,
        ..TrainConfig::default()
    }
}

fn bench(c: &mut Criterion) {
    let data = generate(&spec(), 0, ExecMode::Parallel).unwrap();
    let model = Arc::new(NmaModel::init(TrainConfig::default()).unwrap());
    let nma = Mechanism::nma(Arc::clone(&model));
    let vcg = Mechanism::model_vcg(model);
    let ic = IcTestConfig {
        auctions: 200,
        repeats: 2,
        ..IcTestConfig::default()
    };
    let train_set = &data.train[..512];

    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    for (name, mode) in MODES {
        g.bench_with_input(BenchmarkId::new("generate", name), &mode, |b, &m| {
            b.iter(|| generate(&spec(), 1, m).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("evaluate", name), &mode, |b, &m| {
            b.iter(|| evaluate(&nma, Some(&vcg), &data.test, &data.model, m).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("ic_regret", name), &mode, |b, &m| {
            b.iter(|| ic_regret(&nma, &ic, &data.test, &data.model, m).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("train_epoch", name), &mode, |b, &m| {
            b.iter(|| train(train_set, &small_config(), &TrainOptions { mode: m, ..Default::default() }).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
