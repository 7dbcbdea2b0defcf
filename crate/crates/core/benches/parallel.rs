use std::hint::black_box;

use cdnet::config::CDNetConfig;
use cdnet::mil::{predict, Bag, MILParams};
use cdnet::model::{Arch, Model};
use cdnet::parallel::Exec;
use cdnet::pyramid::{synthetic_slides, tile_slides};
use cdnet::ssl::{embed_pairs, pretrain, PretrainOptions};
use cdnet::tensor::Tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn bench_embedding(c: &mut Criterion) {
    let cfg = CDNetConfig::toy();
    let slides = synthetic_slides(1, 1, 256, 4, Exec::Sequential).unwrap();
    let pairs = tile_slides(&slides, 64, true).unwrap();
    let refs: Vec<_> = pairs.iter().take(16).map(|p| &p.pair).collect();
    let (model, store) = Model::init(cfg, Arch::CdNet, 1).unwrap();
    let mut group = c.benchmark_group("embed_16_pairs");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(embed_pairs(&model, &store, &refs, exec).unwrap()))
        });
    }
    group.finish();
}

fn bench_pretrain_step(c: &mut Criterion) {
    let cfg = CDNetConfig::toy();
    let slides = synthetic_slides(2, 1, 256, 4, Exec::Sequential).unwrap();
    let pairs: Vec<_> = tile_slides(&slides, 64, true).unwrap().into_iter().take(8).collect();
    let mut group = c.benchmark_group("pretrain_step_batch_8");
    group.sample_size(10);
    for (name, exec) in MODES {
        let opts = PretrainOptions {
            epochs: 1,
            batch_size: 8,
            exec,
            ..Default::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| black_box(pretrain(&pairs, cfg, Arch::CdNet, opts, 3).unwrap()))
        });
    }
    group.finish();
}

fn bench_mil_predict(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let bags: Vec<Bag> = (0..64)
        .map(|i| Bag::new(Tensor::randn(&[48, 32], 1.0, &mut rng), (i % 2) as u8, format!("b{i}")).unwrap())
        .collect();
    let params = MILParams::init(32, 128, 128, 5);
    let mut group = c.benchmark_group("mil_predict_64_bags");
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| black_box(predict(&bags, &params, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_embedding, bench_pretrain_step, bench_mil_predict);
criterion_main!(benches);
