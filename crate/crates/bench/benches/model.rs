use criterion::{criterion_group, criterion_main, Criterion};
use fusediff_core::datasim::synth_split;
use fusediff_core::trainer::Trainer;
use fusediff_core::{Denoiser, DenoiserConfig, PredictionKind, Split, SynthConfig, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn model_cfg() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 16,
        prediction_kind: PredictionKind::X0,
        ..DenoiserConfig::default()
    }
}

fn bench_forward(c: &mut Criterion) {
    let data = synth_split(&SynthConfig { train: 1, test: 0, ..SynthConfig::default() }, Split::Train).unwrap();
    let model = Denoiser::init(model_cfg(), 0).unwrap();
    let cond = data[0].bundle().unwrap();
    let mut g = c.benchmark_group("denoiser");
    g.sample_size(10);
    g.bench_function("forward base16 64x64", |b| {
        b.iter(|| model.forward(black_box(&data[0].lrms_up), 250, &cond).unwrap())
    });
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let data = synth_split(&SynthConfig { train: 2, test: 0, ..SynthConfig::default() }, Split::Train).unwrap();
    let batch: Vec<_> = data.iter().collect();
    let mut trainer = Trainer::new(model_cfg(), TrainConfig { batch_size: 2, ..TrainConfig::default() }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("trainer");
    g.sample_size(10);
    g.bench_function("train_step base16 batch2 64x64", |b| {
        b.iter(|| trainer.train_step(black_box(&batch), &mut rng).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_forward, bench_train_step);
criterion_main!(benches);
