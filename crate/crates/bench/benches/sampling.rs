use criterion::{criterion_group, criterion_main, Criterion};

use chanvit_core::model::{init_model, ModelConfig};
use chanvit_core::rng;
use chanvit_core::sampling::{dcs_sample, hcs_sample};

fn bench_samplers(c: &mut Criterion) {
    let state = init_model(&ModelConfig::default(), 0).unwrap();
    let feats = state.channel_token_rows();
    let mut r = rng::stream(0, "bench", 0);
    c.bench_function("hcs_m6", |b| b.iter(|| hcs_sample(6, &mut r).unwrap()));
    c.bench_function("dcs_m6_d64", |b| b.iter(|| dcs_sample(&feats, 0.1, &mut r).unwrap()));
}

criterion_group!(benches, bench_samplers);
criterion_main!(benches);
