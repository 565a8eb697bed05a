//! One discriminator plus generator update per iteration.

use criterion::{criterion_group, criterion_main, Criterion};
use rndiv::harness::{TrainConfig, TrainData, Trainer};
use rndiv::losses::Variant;

fn trainer(mut cfg: TrainConfig) -> Trainer {
    cfg.variant = Variant::NdivReg;
    cfg.data_size = 120;
    let data = TrainData::load(&cfg).unwrap();
    Trainer::new(cfg, data).unwrap()
}

fn synthetic_step(c: &mut Criterion) {
    let mut t = trainer(TrainConfig::synthetic());
    c.bench_function("train_step_synthetic_mlp", |b| b.iter(|| t.train_step().unwrap()));
}

fn sprite_step(c: &mut Criterion) {
    let mut t = trainer(TrainConfig::sprites());
    let mut group = c.benchmark_group("sprites");
    group.sample_size(10);
    group.bench_function("train_step_unet_fpd", |b| b.iter(|| t.train_step().unwrap()));
    group.finish();
}

criterion_group!(benches, synthetic_step, sprite_step);
criterion_main!(benches);
