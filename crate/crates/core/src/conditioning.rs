//! Condition injection: style modulation on the encoder path and wavelet
//! modulation (linear cross-attention over DB1 subbands) on the decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Graph, ParamStore, Tensor, Var};
use crate::tensorio::ImageTensor;
use crate::wavelet::dwt_db1;

/// Intermediate network activations, `[N, d, h, w]`.
pub type FeatureMap = Tensor;

/// Per-sample conditions: PAN, upsampled LrMS and the stacked subbands
/// `[LL_M, LH_P, HL_P, HH_P]` at half resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    pub pan: ImageTensor,
    pub lrms_up: ImageTensor,
    pub bands: ImageTensor,
}

impl ConditionBundle {
    pub fn new(pan: ImageTensor, lrms_up: ImageTensor) -> Result<Self> {
        if pan.bands() != 1 {
            return Err(Error::invalid(format!(
                "PAN must have 1 band, got {}",
                pan.bands()
            )));
        }
        if (pan.height(), pan.width()) != (lrms_up.height(), lrms_up.width()) {
            return Err(Error::invalid(format!(
                "PAN is {}x{} but LrMS is {}x{}",
                pan.height(),
                pan.width(),
                lrms_up.height(),
                lrms_up.width()
            )));
        }
        let m = dwt_db1(&lrms_up)?;
        let p = dwt_db1(&pan)?;
        let bands = ImageTensor::concat_bands(&[&m.ll, &p.lh, &p.hl, &p.hh])?;
        Ok(ConditionBundle {
            pan,
            lrms_up,
            bands,
        })
    }

    /// Spectral band count C of the target.
    pub fn spectral_bands(&self) -> usize {
        self.lrms_up.bands()
    }

    pub fn height(&self) -> usize {
        self.pan.height()
    }

    pub fn width(&self) -> usize {
        self.pan.width()
    }

    /// `[P, M]` stacked on channels (C+1 bands).
    pub fn pan_ms(&self) -> ImageTensor {
        ImageTensor::concat_bands(&[&self.pan, &self.lrms_up]).expect("dims checked in new")
    }
}

/// Conditions for a batch, laid out for the network.
#[derive(Clone, Debug)]
pub struct CondBatch {
    /// `[N, C+1, H, W]`
    pub pan_ms: Tensor,
    /// `[N, C+3, H/2, W/2]`
    pub bands: Tensor,
}

impl CondBatch {
    pub fn from_bundles(bundles: &[&ConditionBundle]) -> Result<Self> {
        let pm: Vec<ImageTensor> = bundles.iter().map(|b| b.pan_ms()).collect();
        let pm_refs: Vec<&ImageTensor> = pm.iter().collect();
        let bands: Vec<&ImageTensor> = bundles.iter().map(|b| &b.bands).collect();
        Ok(CondBatch {
            pan_ms: Tensor::from_images(&pm_refs)?,
            bands: Tensor::from_images(&bands)?,
        })
    }

    pub fn repeat(bundle: &ConditionBundle, n: usize) -> Result<Self> {
        CondBatch::from_bundles(&vec![bundle; n])
    }
}

/// How the attention output joins the decoder input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Injection {
    /// `[dec_in, skip, O]`
    #[default]
    Concat,
    /// `[dec_in, skip + O]`
    Add,
}

/// Average-pools `x` (a graph node) down to `h × w`.
pub(crate) fn pool_to(g: &mut Graph, x: Var, h: usize, w: usize, path: &str) -> Result<Var> {
    let [_, _, xh, xw] = g.value(x).shape();
    if h == 0 || xh % h != 0 || xw % w != 0 || xh / h != xw / w {
        return Err(Error::config(
            path,
            format!("cannot pool a {xh}x{xw} condition to {h}x{w}"),
        ));
    }
    Ok(g.avg_pool(x, xh / h))
}

/// Feature-wise affine modulation `f·(1+scale)+shift`, with `(scale, shift)`
/// produced from `[P, M]` by conv3×3 → SiLU → conv3×3.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleModulation {
    pub prefix: String,
    pub cond_channels: usize,
    pub channels: usize,
}

impl StyleModulation {
    pub fn new(prefix: impl Into<String>, cond_channels: usize, channels: usize) -> Self {
        StyleModulation {
            prefix: prefix.into(),
            cond_channels,
            channels,
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, [usize; 4])> {
        let d = self.channels;
        let mut v = Vec::new();
        v.extend(nn::conv_shapes(&format!("{}.mlp0", self.prefix), self.cond_channels, d, 3));
        v.extend(nn::conv_shapes(&format!("{}.mlp1", self.prefix), d, 2 * d, 3));
        v
    }

    /// `cond` must already match the spatial size of `f`.
    pub fn apply(&self, g: &mut Graph, params: &ParamStore, f: Var, cond: Var) -> Result<Var> {
        let d = g.value(f).c();
        if d != self.channels {
            return Err(Error::config(
                &self.prefix,
                format!("built for {} channels, got {d}", self.channels),
            ));
        }
        let (fs, cs) = (g.value(f).shape(), g.value(cond).shape());
        if (fs[2], fs[3]) != (cs[2], cs[3]) || fs[0] != cs[0] {
            return Err(Error::config(
                &self.prefix,
                format!("condition {cs:?} does not match features {fs:?}"),
            ));
        }
        let h = nn::conv(g, params, &format!("{}.mlp0", self.prefix), cond, 1)?;
        let h = g.silu(h);
        let ss = nn::conv(g, params, &format!("{}.mlp1", self.prefix), h, 1)?;
        if g.value(ss).c() != 2 * d {
            return Err(Error::config(
                &self.prefix,
                format!(
                    "MLP yields {} channels, cannot split into scale/shift for {d}",
                    g.value(ss).c()
                ),
            ));
        }
        let scale = g.narrow(ss, 0, d);
        let shift = g.narrow(ss, d, d);
        Ok(g.modulate(f, scale, shift))
    }
}

/// Projected operands of the linear cross-attention, each `[N, d, ·, ·]`.
#[derive(Clone, Debug)]
pub struct AttentionOperands {
    pub q: FeatureMap,
    pub k: FeatureMap,
    pub v: FeatureMap,
}

impl AttentionOperands {
    /// Projects `q` from `skip` and `[k, v]` jointly from `bands` with the
    /// 1×1 convolutions of `module`.
    pub fn project(
        module: &WaveletModulation,
        params: &ParamStore,
        skip: &FeatureMap,
        bands: &FeatureMap,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let s = g.input(skip.clone());
        let b = g.input(bands.clone());
        let (q, k, v) = module.project(&mut g, params, s, b)?;
        Ok(AttentionOperands {
            q: g.value(q).clone(),
            k: g.value(k).clone(),
            v: g.value(v).clone(),
        })
    }
}

/// `O = (k̂·vᵀ)ᵀ·q̂` with `q̂` softmaxed over channels and `k̂` over space.
/// The d×d product is the only intermediate, whatever the spatial size.
pub fn linear_cross_attention(ops: &AttentionOperands) -> Result<FeatureMap> {
    let (q, k, v) = (&ops.q, &ops.k, &ops.v);
    if q.c() != k.c() || k.shape() != v.shape() || q.n() != k.n() {
        return Err(Error::config(
            "linear_cross_attention",
            format!(
                "operand shapes disagree: q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    Ok(nn::linear_attention_forward(q, k, v))
}

/// Decoder-side injection of the subband stack through linear
/// cross-attention queried by the encoder skip.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletModulation {
    pub prefix: String,
    pub band_channels: usize,
    pub channels: usize,
    pub injection: Injection,
}

impl WaveletModulation {
    pub fn new(
        prefix: impl Into<String>,
        band_channels: usize,
        channels: usize,
        injection: Injection,
    ) -> Self {
        WaveletModulation {
            prefix: prefix.into(),
            band_channels,
            channels,
            injection,
        }
    }

    pub fn param_shapes(&self) -> Vec<(String, [usize; 4])> {
        let d = self.channels;
        let mut v = Vec::new();
        v.extend(nn::conv_shapes(&format!("{}.q", self.prefix), d, d, 1));
        v.extend(nn::conv_shapes(&format!("{}.kv", self.prefix), self.band_channels, 2 * d, 1));
        v
    }

    /// Channel count of the output for a decoder input of `dec_in` channels.
    pub fn out_channels(&self, dec_in: usize) -> usize {
        match self.injection {
            Injection::Concat => dec_in + 2 * self.channels,
            Injection::Add => dec_in + self.channels,
        }
    }

    fn project(&self, g: &mut Graph, params: &ParamStore, skip: Var, bands: Var) -> Result<(Var, Var, Var)> {
        let d = g.value(skip).c();
        if d != self.channels {
            return Err(Error::config(
                &self.prefix,
                format!("built for {} channels, got a {d}-channel skip", self.channels),
            ));
        }
        let q = nn::conv(g, params, &format!("{}.q", self.prefix), skip, 1)?;
        let kv = nn::conv(g, params, &format!("{}.kv", self.prefix), bands, 1)?;
        if g.value(q).c() != d || g.value(kv).c() != 2 * d {
            return Err(Error::config(
                &self.prefix,
                format!(
                    "projections give q with {} and kv with {} channels for a {d}-channel skip",
                    g.value(q).c(),
                    g.value(kv).c()
                ),
            ));
        }
        let k = g.narrow(kv, 0, d);
        let v = g.narrow(kv, d, d);
        Ok((q, k, v))
    }

    /// `bands` must already be pooled to this level.
    pub fn apply(&self, g: &mut Graph, params: &ParamStore, dec_in: Var, skip: Var, bands: Var) -> Result<Var> {
        let (ds, ss) = (g.value(dec_in).shape(), g.value(skip).shape());
        if ds[0] != ss[0] || (ds[2], ds[3]) != (ss[2], ss[3]) {
            return Err(Error::config(
                &self.prefix,
                format!("decoder input {ds:?} does not match skip {ss:?}"),
            ));
        }
        if g.value(bands).n() != ss[0] {
            return Err(Error::config(&self.prefix, "band batch size differs from skip"));
        }
        let (q, k, v) = self.project(g, params, skip, bands)?;
        let o = g.linear_attention(q, k, v);
        Ok(match self.injection {
            Injection::Concat => g.concat(&[dec_in, skip, o]),
            Injection::Add => {
                let s = g.add(skip, o);
                g.concat(&[dec_in, s])
            }
        })
    }
}

/// Style modulation of a standalone feature map. The conditions are
/// average-pooled to the feature size and shared across the batch.
pub fn style_modulate(
    module: &StyleModulation,
    params: &ParamStore,
    f: &FeatureMap,
    cond: &ConditionBundle,
) -> Result<FeatureMap> {
    let cb = CondBatch::repeat(cond, f.n())?;
    let mut g = Graph::new();
    let fv = g.input(f.clone());
    let c = g.input(cb.pan_ms);
    let c = pool_to(&mut g, c, f.h(), f.w(), &module.prefix)?;
    let out = module.apply(&mut g, params, fv, c)?;
    Ok(g.value(out).clone())
}

/// Wavelet modulation of standalone feature maps. The subband stack is
/// pooled to the skip size, or used as-is when the skip is larger.
pub fn wavelet_modulate(
    module: &WaveletModulation,
    params: &ParamStore,
    dec_in: &FeatureMap,
    skip: &FeatureMap,
    cond: &ConditionBundle,
) -> Result<FeatureMap> {
    let cb = CondBatch::repeat(cond, skip.n())?;
    let mut g = Graph::new();
    let d = g.input(dec_in.clone());
    let s = g.input(skip.clone());
    let b = g.input(cb.bands);
    let b = pool_bands(&mut g, b, skip.h(), skip.w(), &module.prefix)?;
    let out = module.apply(&mut g, params, d, s, b)?;
    Ok(g.value(out).clone())
}

/// Brings the half-resolution band stack to a level of size `h × w`: pooled
/// when the level is coarser, left at native resolution otherwise (the
/// attention does not need matching query and key grids).
pub(crate) fn pool_bands(g: &mut Graph, bands: Var, h: usize, w: usize, path: &str) -> Result<Var> {
    let bh = g.value(bands).h();
    if h >= bh {
        Ok(bands)
    } else {
        pool_to(g, bands, h, w, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{relative_error, ridders};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn bundle(c: usize, h: usize, seed: u64) -> ConditionBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pan = ImageTensor::from_fn(1, h, h, |_, _, _| rand::Rng::random::<f32>(&mut rng));
        let ms = ImageTensor::from_fn(c, h, h, |_, _, _| rand::Rng::random::<f32>(&mut rng));
        ConditionBundle::new(pan, ms).unwrap()
    }

    fn init(shapes: &[(String, [usize; 4])], seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        for (n, s) in shapes {
            // Random biases too, so every parameter carries gradient.
            let t = if n.ends_with(".weight") {
                nn::init_param(n, *s, &mut rng)
            } else {
                randn(*s, &mut rng)
            };
            p.insert(n.clone(), t);
        }
        p
    }

    /// Direct evaluation of the factorised formula with explicit loops.
    fn naive_attention(q: &[f64], k: &[f64], v: &[f64], d: usize, nq: usize, nk: usize) -> Vec<f64> {
        let mut qh = vec![0.0; d * nq];
        for j in 0..nq {
            let m = (0..d).map(|c| q[c * nq + j]).fold(f64::MIN, f64::max);
            let z: f64 = (0..d).map(|c| (q[c * nq + j] - m).exp()).sum();
            for c in 0..d {
                qh[c * nq + j] = (q[c * nq + j] - m).exp() / z;
            }
        }
        let mut kh = vec![0.0; d * nk];
        for c in 0..d {
            let m = (0..nk).map(|j| k[c * nk + j]).fold(f64::MIN, f64::max);
            let z: f64 = (0..nk).map(|j| (k[c * nk + j] - m).exp()).sum();
            for j in 0..nk {
                kh[c * nk + j] = (k[c * nk + j] - m).exp() / z;
            }
        }
        let mut out = vec![0.0; d * nq];
        for e in 0..d {
            for j in 0..nq {
                let mut s = 0.0;
                for c in 0..d {
                    let mut a = 0.0;
                    for i in 0..nk {
                        a += kh[c * nk + i] * v[e * nk + i];
                    }
                    s += a * qh[c * nq + j];
                }
                out[e * nq + j] = s;
            }
        }
        out
    }

    fn f64s(t: &Tensor) -> Vec<f64> {
        t.data().iter().map(|&v| v as f64).collect()
    }

    #[test]
    fn bundle_layout() {
        let b = bundle(4, 8, 1);
        assert_eq!(b.bands.dims(), (7, 4, 4));
        assert_eq!(b.pan_ms().dims(), (5, 8, 8));
        let bad = ImageTensor::zeros(1, 6, 6);
        assert!(ConditionBundle::new(bad, ImageTensor::zeros(4, 8, 8)).is_err());
        assert!(ConditionBundle::new(ImageTensor::zeros(2, 8, 8), ImageTensor::zeros(4, 8, 8)).is_err());
    }

    #[test]
    fn attention_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (d, nq, nk) in [(4, 9, 9), (8, 16, 64), (2, 4, 16)] {
            let q = randn([1, d, nq, 1], &mut rng);
            let k = randn([1, d, nk, 1], &mut rng);
            let v = randn([1, d, nk, 1], &mut rng);
            let want = naive_attention(&f64s(&q), &f64s(&k), &f64s(&v), d, nq, nk);
            let got = linear_cross_attention(&AttentionOperands { q, k, v }).unwrap();
            for (a, b) in got.data().iter().zip(&want) {
                assert!((*a as f64 - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn single_channel_attention_is_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = randn([1, 1, 3, 3], &mut rng);
        let k = randn([1, 1, 2, 5], &mut rng);
        let v = randn([1, 1, 2, 5], &mut rng);
        let kd = f64s(&k);
        let z: f64 = kd.iter().map(|x| x.exp()).sum();
        let mean: f64 = kd.iter().zip(v.data()).map(|(x, &v)| x.exp() / z * v as f64).sum();
        let o = linear_cross_attention(&AttentionOperands { q, k, v }).unwrap();
        for &x in o.data() {
            assert!((x as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_zero_values_and_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = randn([1, 4, 3, 3], &mut rng);
        let k = randn([1, 4, 4, 4], &mut rng);
        let v = randn([1, 4, 4, 4], &mut rng);
        let o0 = linear_cross_attention(&AttentionOperands {
            q: q.clone(),
            k: k.clone(),
            v: Tensor::zeros(v.shape()),
        })
        .unwrap();
        assert!(o0.data().iter().all(|&x| x == 0.0));

        let base = linear_cross_attention(&AttentionOperands {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
        })
        .unwrap();
        let perm: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 16).collect();
        let permute = |t: &Tensor| {
            let mut out = t.clone();
            for c in 0..4 {
                for (j, &p) in perm.iter().enumerate() {
                    out.data_mut()[c * 16 + j] = t.data()[c * 16 + p];
                }
            }
            out
        };
        let o = linear_cross_attention(&AttentionOperands {
            q,
            k: permute(&k),
            v: permute(&v),
        })
        .unwrap();
        for (a, b) in o.data().iter().zip(base.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_rejects_mismatch() {
        let ops = AttentionOperands {
            q: Tensor::zeros([1, 3, 2, 2]),
            k: Tensor::zeros([1, 4, 2, 2]),
            v: Tensor::zeros([1, 4, 2, 2]),
        };
        assert!(matches!(linear_cross_attention(&ops), Err(Error::Config { .. })));
    }

    #[test]
    fn style_modulation_identity_and_doubling() {
        let cond = bundle(4, 8, 6);
        let m = StyleModulation::new("s", 5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = randn([1, 8, 4, 4], &mut rng);
        let mut p = init(&m.param_shapes(), 8);
        p.get_mut("s.mlp1.weight").unwrap().data_mut().fill(0.0);
        p.get_mut("s.mlp1.bias").unwrap().data_mut().fill(0.0);
        let out = style_modulate(&m, &p, &f, &cond).unwrap();
        assert_eq!(out, f);
        // scale channels biased to 1, shift channels to 0.
        for (i, b) in p.get_mut("s.mlp1.bias").unwrap().data_mut().iter_mut().enumerate() {
            *b = if i < 8 { 1.0 } else { 0.0 };
        }
        let out = style_modulate(&m, &p, &f, &cond).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn style_modulation_is_affine_in_features() {
        let cond = bundle(4, 16, 9);
        let m = StyleModulation::new("s", 5, 8);
        let p = init(&m.param_shapes(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f1 = randn([1, 8, 8, 8], &mut rng);
        let f2 = randn([1, 8, 8, 8], &mut rng);
        let zero = style_modulate(&m, &p, &Tensor::zeros(f1.shape()), &cond).unwrap();
        let (a, b) = (0.7f32, -1.3f32);
        let mix = Tensor::from_vec(
            f1.shape(),
            f1.data().iter().zip(f2.data()).map(|(x, y)| a * x + b * y).collect(),
        )
        .unwrap();
        let lhs = style_modulate(&m, &p, &mix, &cond).unwrap();
        let m1 = style_modulate(&m, &p, &f1, &cond).unwrap();
        let m2 = style_modulate(&m, &p, &f2, &cond).unwrap();
        for i in 0..lhs.numel() {
            let shift = zero.data()[i];
            let rhs = a * m1.data()[i] + b * m2.data()[i] - (a + b - 1.0) * shift;
            assert!((lhs.data()[i] - rhs).abs() < 1e-4, "{} vs {rhs}", lhs.data()[i]);
        }
    }

    #[test]
    fn style_modulation_shape_contract() {
        let cond = bundle(4, 32, 12);
        let m = StyleModulation::new("s", 5, 32);
        let p = init(&m.param_shapes(), 13);
        let f = Tensor::zeros([1, 32, 16, 16]);
        assert_eq!(style_modulate(&m, &p, &f, &cond).unwrap().shape(), [1, 32, 16, 16]);
        let wrong = StyleModulation::new("s", 5, 16);
        let err = style_modulate(&wrong, &p, &f, &cond).unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
    }

    #[test]
    fn wavelet_modulation_channels_and_zero_attention() {
        let cond = bundle(4, 16, 14);
        let m = WaveletModulation::new("w", 7, 8, Injection::Concat);
        let mut p = init(&m.param_shapes(), 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let dec = randn([1, 8, 8, 8], &mut rng);
        let skip = randn([1, 8, 8, 8], &mut rng);
        let out = wavelet_modulate(&m, &p, &dec, &skip, &cond).unwrap();
        assert_eq!(out.c(), 8 + 8 + 8);
        assert_eq!(m.out_channels(8), 24);
        // Zero value projection forces O = 0: plain skip concatenation.
        for name in ["w.kv.weight", "w.kv.bias"] {
            let t = p.get_mut(name).unwrap();
            let per = t.numel() / 16;
            t.data_mut()[8 * per..].fill(0.0);
        }
        let out = wavelet_modulate(&m, &p, &dec, &skip, &cond).unwrap();
        assert_eq!(out.item(0)[..512], dec.data()[..]);
        assert_eq!(out.item(0)[512..1024], skip.data()[..]);
        assert!(out.item(0)[1024..].iter().all(|&x| x == 0.0));

        let add = WaveletModulation::new("w", 7, 8, Injection::Add);
        let out = wavelet_modulate(&add, &p, &dec, &skip, &cond).unwrap();
        assert_eq!(out.c(), 16);
        assert_eq!(out.item(0)[512..], skip.data()[..]);
    }

    #[test]
    fn wavelet_modulation_uses_native_bands_at_full_resolution() {
        let cond = bundle(4, 16, 17);
        let m = WaveletModulation::new("w", 7, 8, Injection::Concat);
        let p = init(&m.param_shapes(), 18);
        let x = Tensor::zeros([1, 8, 16, 16]);
        assert_eq!(wavelet_modulate(&m, &p, &x, &x, &cond).unwrap().shape(), [1, 24, 16, 16]);
        let odd = Tensor::zeros([1, 8, 3, 3]);
        assert!(matches!(
            wavelet_modulate(&m, &p, &odd, &odd, &cond),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn wavelet_modulation_query_gradient() {
        let cond = bundle(4, 8, 19);
        let m = WaveletModulation::new("w", 7, 2, Injection::Concat);
        let p = init(&m.param_shapes(), 20);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dec = randn([1, 2, 4, 4], &mut rng);
        let skip = randn([1, 2, 4, 4], &mut rng);
        let probe = randn([1, 6, 4, 4], &mut rng);
        let cb = CondBatch::repeat(&cond, 1).unwrap();
        let eval = |p: &ParamStore| {
            let mut g = Graph::new();
            let d = g.input(dec.clone());
            let s = g.input(skip.clone());
            let b = g.input(cb.bands.clone());
            let b = pool_bands(&mut g, b, 4, 4, "w").unwrap();
            let o = m.apply(&mut g, p, d, s, b).unwrap();
            let r = g.weighted_sum(o, probe.clone());
            (g.scalar(r), g.backward(r).params(|_| [1, 1, 1, 1]))
        };
        let (_, grads) = eval(&p);
        let wq = &grads["w.q.weight"];
        for j in 0..wq.numel() {
            let d = ridders(
                |h| {
                    let mut pp = p.clone();
                    pp.get_mut("w.q.weight").unwrap().data_mut()[j] += h as f32;
                    eval(&pp).0
                },
                0.125,
            );
            let a = wq.data()[j] as f64;
            assert!(relative_error(a, d.value) < 1e-3, "W_q[{j}]: {a} vs {d:?}");
        }
    }
}
