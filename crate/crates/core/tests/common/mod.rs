#![allow(dead_code)]

pub mod reference;

use fusediff_core::conditioning::{CondBatch, ConditionBundle, Injection, StyleModulation, WaveletModulation};
use fusediff_core::nn::gradcheck::{relative_error, ridders};
use fusediff_core::nn::{self, Graph, ParamStore, Tensor};
use fusediff_core::{Denoiser, DenoiserConfig, ImageTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use reference::{params64, Params64, T64};

pub fn randn(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

pub fn toy_bundle(c: usize, h: usize, rng: &mut ChaCha8Rng) -> ConditionBundle {
    let pan = ImageTensor::from_fn(1, h, h, |_, _, _| rng.random::<f32>());
    let ms = ImageTensor::from_fn(c, h, h, |_, _, _| rng.random::<f32>());
    ConditionBundle::new(pan, ms).unwrap()
}

/// Outcome of checking a random subset of weights.
#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.worst < tol
    }
}

/// Compares analytic f32 gradients with Ridders differences of an f64
/// evaluation at `count` uniformly drawn scalar weights.
fn check_sampled(
    params: &ParamStore,
    analytic: &std::collections::BTreeMap<String, Tensor>,
    eval64: impl Fn(&Params64) -> f64,
    count: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> GradReport {
    let names: Vec<String> = params.names().cloned().collect();
    let sizes: Vec<usize> = names.iter().map(|n| params.get(n).unwrap().numel()).collect();
    let total: usize = sizes.iter().sum();
    let base = params64(params);
    let mut report = GradReport {
        checked: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    // f32 rounding floor of the analytic gradients.
    let floor = 1e-5 * analytic.values().flat_map(|t| t.data()).fold(0.0f64, |m, &g| m.max(g.abs() as f64));
    let mut seen = std::collections::BTreeSet::new();
    while report.checked < count.min(total) {
        let flat = rng.random_range(0..total);
        if !seen.insert(flat) {
            continue;
        }
        let (mut k, mut pi) = (flat, 0);
        while k >= sizes[pi] {
            k -= sizes[pi];
            pi += 1;
        }
        let name = &names[pi];
        let d = ridders(
            |h| {
                let mut p = base.clone();
                p.get_mut(name).unwrap().d[k] += h;
                eval64(&p)
            },
            0.1,
        );
        let a = analytic[name].data()[k] as f64;
        // A weight the output is invariant to (a key bias under the spatial
        // softmax, a conv bias feeding a one-channel group norm) has zero
        // gradient; relative error is undefined there, so both sides must
        // instead vanish to rounding level.
        let e = if d.value.abs() < 1e-10 && a.abs() < floor {
            0.0
        } else {
            relative_error(a, d.value)
        };
        report.worst = report.worst.max(e);
        if e >= tol {
            report.failures.push(format!("{name}[{k}]: analytic {a:.6e}, numeric {:.6e}", d.value));
        }
        report.checked += 1;
    }
    report
}

pub fn denoiser_gradcheck(seed: u64, count: usize) -> GradReport {
    let cfg = DenoiserConfig {
        base_channels: 8,
        ..DenoiserConfig::default()
    };
    let net = Denoiser::init(cfg.clone(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let bundle = toy_bundle(4, 16, &mut rng);
    let cond = CondBatch::repeat(&bundle, 1).unwrap();
    let x = randn([1, 4, 16, 16], &mut rng);
    let probe = randn([1, 4, 16, 16], &mut rng);
    let t = 137;

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = net.build(&mut g, xv, &[t], &cond).unwrap();
    let root = g.weighted_sum(out, probe.clone());
    let shapes = cfg.param_shapes().unwrap();
    let grads = g.backward(root).params(|n| shapes.iter().find(|(k, _)| k == n).unwrap().1);

    let x64 = T64::from_f32(x.shape(), x.data());
    let pm = T64::from_f32(cond.pan_ms.shape(), cond.pan_ms.data());
    let bands = T64::from_f32(cond.bands.shape(), cond.bands.data());
    let f0 = reference::dot(&reference::denoiser(&cfg, &params64(&net.params), &x64, t, &pm, &bands), probe.data());
    assert!((f0 - g.scalar(root)).abs() < 1e-3 * f0.abs().max(1.0), "reference forward disagrees: {f0} vs {}", g.scalar(root));
    check_sampled(
        &net.params,
        &grads,
        |p| reference::dot(&reference::denoiser(&cfg, p, &x64, t, &pm, &bands), probe.data()),
        count,
        1e-3,
        &mut rng,
    )
}

fn init_store(shapes: &[(String, [usize; 4])], rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    for (n, s) in shapes {
        let t = if n.ends_with(".weight") {
            nn::init_param(n, *s, rng)
        } else {
            // Nonzero biases so the check is not trivially satisfied.
            let mut t = randn(*s, rng);
            t.data_mut().iter_mut().for_each(|v| *v *= 0.1);
            t
        };
        p.insert(n.clone(), t);
    }
    p
}

pub fn style_gradcheck(seed: u64, count: usize) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = StyleModulation::new("style", 5, 8);
    let params = init_store(&m.param_shapes(), &mut rng);
    let bundle = toy_bundle(4, 16, &mut rng);
    let cond = CondBatch::repeat(&bundle, 1).unwrap();
    let f = randn([1, 8, 16, 16], &mut rng);
    let probe = randn([1, 8, 16, 16], &mut rng);

    let mut g = Graph::new();
    let fv = g.input(f.clone());
    let cv = g.input(cond.pan_ms.clone());
    let out = m.apply(&mut g, &params, fv, cv).unwrap();
    let root = g.weighted_sum(out, probe.clone());
    let grads = g.backward(root).params(|_| unreachable!());

    let f64_ = T64::from_f32(f.shape(), f.data());
    let c64 = T64::from_f32(cond.pan_ms.shape(), cond.pan_ms.data());
    check_sampled(
        &params,
        &grads,
        |p| reference::dot(&reference::style(p, "style", &f64_, &c64), probe.data()),
        count,
        1e-3,
        &mut rng,
    )
}

pub fn wavelet_gradcheck(seed: u64, count: usize) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = WaveletModulation::new("wave", 7, 8, Injection::Concat);
    let params = init_store(&m.param_shapes(), &mut rng);
    let bundle = toy_bundle(4, 16, &mut rng);
    let cond = CondBatch::repeat(&bundle, 1).unwrap();
    // Level-1 features (8×8) with the 8×8 subband stack.
    let dec = randn([1, 8, 8, 8], &mut rng);
    let skip = randn([1, 8, 8, 8], &mut rng);
    let probe = randn([1, 24, 8, 8], &mut rng);

    let mut g = Graph::new();
    let dv = g.input(dec.clone());
    let sv = g.input(skip.clone());
    let bv = g.input(cond.bands.clone());
    let out = m.apply(&mut g, &params, dv, sv, bv).unwrap();
    let root = g.weighted_sum(out, probe.clone());
    let grads = g.backward(root).params(|_| unreachable!());

    let d64 = T64::from_f32(dec.shape(), dec.data());
    let s64 = T64::from_f32(skip.shape(), skip.data());
    let b64 = T64::from_f32(cond.bands.shape(), cond.bands.data());
    check_sampled(
        &params,
        &grads,
        |p| reference::dot(&reference::wave(p, "wave", &d64, &s64, &b64, Injection::Concat), probe.data()),
        count,
        1e-3,
        &mut rng,
    )
}
