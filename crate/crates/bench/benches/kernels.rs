use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fusediff_core::datasim::{mtf_downsample, poly23_upsample, MTF_GAIN_MS};
use fusediff_core::metrics::{ergas, sam, scc, ssim};
use fusediff_core::nn::{linear_attention_forward, softmax_attention_forward, Tensor};
use fusediff_core::wavelet::{dwt_db1, idwt_db1};
use fusediff_core::{ImageTensor, MetricConfig};
use std::hint::black_box;

fn image(bands: usize, side: usize, phase: f32) -> ImageTensor {
    ImageTensor::from_fn(bands, side, side, |c, y, x| {
        0.5 + 0.4 * ((x as f32 * 0.37 + phase).sin() * (y as f32 * 0.23 + c as f32).cos())
    })
}

fn tensor(shape: [usize; 4], phase: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i as f32) * 0.013 + phase).sin()).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn bench_wavelet(c: &mut Criterion) {
    let x = image(4, 64, 0.0);
    c.bench_function("dwt_db1 4x64x64", |b| b.iter(|| dwt_db1(black_box(&x)).unwrap()));
    let bands = dwt_db1(&x).unwrap();
    c.bench_function("idwt_db1 4x64x64", |b| b.iter(|| idwt_db1(black_box(&bands)).unwrap()));
}

fn bench_attention(c: &mut Criterion) {
    let mut g = c.benchmark_group("attention");
    for side in [16usize, 32] {
        let q = tensor([1, 16, side, side], 0.0);
        let k = tensor([1, 16, side, side], 1.0);
        let v = tensor([1, 16, side, side], 2.0);
        g.bench_with_input(BenchmarkId::new("linear", side), &side, |b, _| {
            b.iter(|| linear_attention_forward(black_box(&q), &k, &v))
        });
        g.bench_with_input(BenchmarkId::new("softmax", side), &side, |b, _| {
            b.iter(|| softmax_attention_forward(black_box(&q), &k, &v))
        });
    }
    g.finish();
}

fn bench_resample(c: &mut Criterion) {
    let x = image(4, 256, 0.0);
    c.bench_function("mtf_downsample 4x256 r4", |b| {
        b.iter(|| mtf_downsample(black_box(&x), 4, MTF_GAIN_MS).unwrap())
    });
    let small = image(4, 64, 0.0);
    c.bench_function("poly23_upsample 4x64 r4", |b| {
        b.iter(|| poly23_upsample(black_box(&small), 4).unwrap())
    });
}

fn bench_metrics(c: &mut Criterion) {
    let x = image(4, 64, 0.0);
    let y = image(4, 64, 0.1);
    let cfg = MetricConfig::default();
    c.bench_function("sam 4x64", |b| b.iter(|| sam(black_box(&x), &y, &cfg).unwrap()));
    c.bench_function("ergas 4x64", |b| b.iter(|| ergas(black_box(&x), &y, &cfg).unwrap()));
    c.bench_function("ssim 4x64", |b| b.iter(|| ssim(black_box(&x), &y).unwrap()));
    c.bench_function("scc 4x64", |b| b.iter(|| scc(black_box(&x), &y).unwrap()));
}

criterion_group!(benches, bench_wavelet, bench_attention, bench_resample, bench_metrics);
criterion_main!(benches);
