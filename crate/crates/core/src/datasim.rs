//! Reduced-resolution simulation (Wald's protocol), 23-tap polynomial
//! interpolation, a seeded synthetic scene generator and pixel entropy.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::ConditionBundle;
use crate::error::{Error, Result};
use crate::tensorio::{write_tensor, DatasetManifest, ImageTensor, ManifestEntry, Split};

pub const DEFAULT_RATIO: usize = 4;
pub const MTF_GAIN_MS: f64 = 0.3;
pub const MTF_GAIN_PAN: f64 = 0.15;

/// One aligned training or test example. `pan`, `lrms_up` and `gt` share
/// H × W; `ms` is H/4 × W/4.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionSample {
    pub pan: ImageTensor,
    pub lrms_up: ImageTensor,
    pub ms: ImageTensor,
    pub gt: Option<ImageTensor>,
}

impl FusionSample {
    pub fn check(&self, ratio: usize) -> Result<()> {
        let (h, w) = (self.pan.height(), self.pan.width());
        if self.pan.bands() != 1 {
            return Err(Error::invalid("pan must have one band"));
        }
        if (self.lrms_up.height(), self.lrms_up.width()) != (h, w) {
            return Err(Error::invalid(format!(
                "lrms_up is {}x{}, pan is {h}x{w}",
                self.lrms_up.height(),
                self.lrms_up.width()
            )));
        }
        if self.ms.height() * ratio != h || self.ms.width() * ratio != w {
            return Err(Error::invalid(format!(
                "ms is {}x{}, expected pan/{ratio}",
                self.ms.height(),
                self.ms.width()
            )));
        }
        if self.ms.bands() != self.lrms_up.bands() {
            return Err(Error::invalid("ms and lrms_up band counts differ"));
        }
        if let Some(gt) = &self.gt {
            if gt.dims() != self.lrms_up.dims() {
                return Err(Error::invalid(format!(
                    "gt is {:?}, lrms_up is {:?}",
                    gt.dims(),
                    self.lrms_up.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn bundle(&self) -> Result<ConditionBundle> {
        ConditionBundle::new(self.pan.clone(), self.lrms_up.clone())
    }

    /// `gt − lrms_up`, the quantity the residual model learns.
    pub fn residual(&self) -> Option<ImageTensor> {
        self.gt.as_ref().map(|g| g.sub(&self.lrms_up))
    }

    /// A `size × size` window at (`y`, `x`) in PAN coordinates; both must
    /// be multiples of the scale ratio.
    pub fn crop(&self, y: usize, x: usize, size: usize, ratio: usize) -> Result<FusionSample> {
        if y % ratio != 0 || x % ratio != 0 || size % ratio != 0 {
            return Err(Error::invalid(format!(
                "crop ({y},{x}) size {size} not aligned to ratio {ratio}"
            )));
        }
        let full = crop_image(&self.pan, y, x, size)?;
        Ok(FusionSample {
            pan: full,
            lrms_up: crop_image(&self.lrms_up, y, x, size)?,
            ms: crop_image(&self.ms, y / ratio, x / ratio, size / ratio)?,
            gt: self
                .gt
                .as_ref()
                .map(|g| crop_image(g, y, x, size))
                .transpose()?,
        })
    }
}

fn crop_image(im: &ImageTensor, y: usize, x: usize, size: usize) -> Result<ImageTensor> {
    if y + size > im.height() || x + size > im.width() {
        return Err(Error::invalid(format!(
            "crop ({y},{x}) size {size} exceeds {}x{}",
            im.height(),
            im.width()
        )));
    }
    Ok(ImageTensor::from_fn(im.bands(), size, size, |c, yy, xx| {
        im.get(c, y + yy, x + xx)
    })
    .with_range(im.range_hint))
}

/// Splits an image into non-overlapping `size × size` patches in raster order.
pub fn extract_patches(sample: &FusionSample, size: usize, ratio: usize) -> Result<Vec<FusionSample>> {
    let (h, w) = (sample.pan.height(), sample.pan.width());
    let mut out = Vec::new();
    for y in (0..=h.saturating_sub(size)).step_by(size) {
        for x in (0..=w.saturating_sub(size)).step_by(size) {
            out.push(sample.crop(y, x, size, ratio)?);
        }
    }
    Ok(out)
}

/// Half-sample symmetric extension of index `i` into `0..n`.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    i = i.rem_euclid(period);
    if i >= n {
        i = period - 1 - i;
    }
    i as usize
}

/// Standard deviation (in fine-grid pixels) of the Gaussian whose frequency
/// response is `gain` at the Nyquist frequency of the grid `ratio` times
/// coarser: `exp(−2π²σ²f²) = gain` at `f = 1/(2·ratio)`.
pub fn mtf_sigma(ratio: usize, gain: f64) -> f64 {
    ratio as f64 * (-2.0 * gain.ln()).sqrt() / std::f64::consts::PI
}

/// Normalised 1-D MTF-matched Gaussian with `10·ratio + 1` taps.
pub fn mtf_kernel(ratio: usize, gain: f64) -> Vec<f64> {
    let sigma = mtf_sigma(ratio, gain);
    let r = 5 * ratio as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable convolution with a centred odd-length kernel, symmetric
/// boundaries, accumulated in f64.
fn separable_filter(x: &ImageTensor, k: &[f64]) -> Vec<f64> {
    let (c, h, w) = x.dims();
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f64; c * h * w];
    for b in 0..c {
        let band = x.band(b);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let sx = reflect(xx as isize + j as isize - r, w);
                    acc += kv * band[y * w + sx] as f64;
                }
                tmp[(b * h + y) * w + xx] = acc;
            }
        }
    }
    let mut out = vec![0.0f64; c * h * w];
    for b in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (j, kv) in k.iter().enumerate() {
                    let sy = reflect(y as isize + j as isize - r, h);
                    acc += kv * tmp[(b * h + sy) * w + xx];
                }
                out[(b * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

/// MTF-matched Gaussian blur followed by decimation at positions `ratio·i`.
pub fn mtf_downsample(x: &ImageTensor, ratio: usize, nyquist_gain: f64) -> Result<ImageTensor> {
    let (c, h, w) = x.dims();
    if ratio == 0 || h % ratio != 0 || w % ratio != 0 {
        return Err(Error::invalid(format!(
            "{h}x{w} is not divisible by ratio {ratio}"
        )));
    }
    if !(nyquist_gain > 0.0 && nyquist_gain < 1.0) {
        return Err(Error::invalid(format!(
            "Nyquist gain must lie in (0, 1), got {nyquist_gain}"
        )));
    }
    let blurred = separable_filter(x, &mtf_kernel(ratio, nyquist_gain));
    let (oh, ow) = (h / ratio, w / ratio);
    Ok(ImageTensor::from_fn(c, oh, ow, |b, y, xx| {
        blurred[(b * h + y * ratio) * w + xx * ratio] as f32
    })
    .with_range(x.range_hint))
}

/// One side of the 23-tap half-band interpolator: the weights of the
/// samples at distance 1/2, 3/2, …, 11/2 from an odd output position
/// (degree-11 Lagrange interpolation at the midpoint). Exact dyadic values.
pub const POLY23_HALF: [f64; 6] = [
    160083.0 / 262144.0,
    -38115.0 / 262144.0,
    22869.0 / 524288.0,
    -5445.0 / 524288.0,
    847.0 / 524288.0,
    -63.0 / 524288.0,
];

/// The full 23-tap ×2 interpolation kernel: centre 1, odd offsets carry
/// [`POLY23_HALF`], even offsets are zero.
pub fn poly23_kernel() -> [f64; 23] {
    let mut k = [0.0; 23];
    k[11] = 1.0;
    for (i, &v) in POLY23_HALF.iter().enumerate() {
        k[11 + 2 * i + 1] = v;
        k[11 - 2 * i - 1] = v;
    }
    k
}

/// ×2 along one axis of a row-major `n × len` slab (`stride` apart).
fn interp2_line(src: &[f64], out: &mut [f64]) {
    let n = src.len();
    for i in 0..n {
        out[2 * i] = src[i];
        let mut acc = 0.0;
        for (k, &wgt) in POLY23_HALF.iter().enumerate() {
            let a = reflect(i as isize - k as isize, n);
            let b = reflect(i as isize + 1 + k as isize, n);
            acc += wgt * (src[a] + src[b]);
        }
        out[2 * i + 1] = acc;
    }
}

fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut rows = vec![0.0; c * h * 2 * w];
    let mut line = vec![0.0; 2 * w];
    for b in 0..c {
        for y in 0..h {
            let s = (b * h + y) * w;
            interp2_line(&x[s..s + w], &mut line);
            let d = (b * h + y) * 2 * w;
            rows[d..d + 2 * w].copy_from_slice(&line);
        }
    }
    let w2 = 2 * w;
    let mut out = vec![0.0; c * 2 * h * w2];
    let mut col = vec![0.0; h];
    let mut col2 = vec![0.0; 2 * h];
    for b in 0..c {
        for xx in 0..w2 {
            for y in 0..h {
                col[y] = rows[(b * h + y) * w2 + xx];
            }
            interp2_line(&col, &mut col2);
            for (y, v) in col2.iter().enumerate() {
                out[(b * 2 * h + y) * w2 + xx] = *v;
            }
        }
    }
    out
}

/// Cascaded ×2 interpolations with the 23-tap kernel. `ratio` must be a
/// power of two.
pub fn poly23_upsample(x: &ImageTensor, ratio: usize) -> Result<ImageTensor> {
    if ratio == 0 || !ratio.is_power_of_two() {
        return Err(Error::invalid(format!(
            "polynomial interpolation needs a power-of-two ratio, got {ratio}"
        )));
    }
    let (c, mut h, mut w) = x.dims();
    let mut data: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut r = ratio;
    while r > 1 {
        data = upsample2(&data, c, h, w);
        h *= 2;
        w *= 2;
        r /= 2;
    }
    Ok(ImageTensor::new(c, h, w, data.into_iter().map(|v| v as f32).collect())?.with_range(x.range_hint))
}

/// Degradation parameters of the reduced-resolution protocol.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaldConfig {
    pub ratio: usize,
    pub ms_gain: f64,
    pub pan_gain: f64,
}

impl Default for WaldConfig {
    fn default() -> Self {
        WaldConfig {
            ratio: DEFAULT_RATIO,
            ms_gain: MTF_GAIN_MS,
            pan_gain: MTF_GAIN_PAN,
        }
    }
}

/// Degrades an original MS image (`hrms`, C × H × W) and original PAN
/// (1 × rH × rW) by the ratio: the degraded pair becomes the training input
/// and the original MS the ground truth.
pub fn wald_simulate(hrms: &ImageTensor, pan: &ImageTensor, cfg: &WaldConfig) -> Result<FusionSample> {
    let r = cfg.ratio;
    if pan.bands() != 1 {
        return Err(Error::invalid("pan must have one band"));
    }
    if pan.height() != hrms.height() * r || pan.width() != hrms.width() * r {
        return Err(Error::invalid(format!(
            "pan is {}x{}, expected {r}x the MS size {}x{}",
            pan.height(),
            pan.width(),
            hrms.height(),
            hrms.width()
        )));
    }
    let train_pan = mtf_downsample(pan, r, cfg.pan_gain)?;
    let ms = mtf_downsample(hrms, r, cfg.ms_gain)?;
    let lrms_up = poly23_upsample(&ms, r)?;
    let s = FusionSample {
        pan: train_pan,
        lrms_up,
        ms,
        gt: Some(hrms.clone()),
    };
    s.check(r)?;
    Ok(s)
}

/// Seeded synthetic stand-in for satellite scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub train: usize,
    #[serde(default)]
    pub val: usize,
    pub test: usize,
    pub bands: usize,
    /// Side of the ground-truth / PAN patch.
    pub patch: usize,
    /// Correlation length of the smooth fields, as a fraction of the scene.
    pub smoothness: f64,
    /// Contrast of the sharp-edged objects and fine texture.
    pub detail: f64,
    #[serde(default)]
    pub wald: WaldConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 7,
            train: 64,
            val: 0,
            test: 8,
            bands: 4,
            patch: 64,
            smoothness: 0.08,
            detail: 1.0,
            wald: WaldConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.wald.ratio;
        if self.bands == 0 {
            return Err(Error::config("bands", "must be positive"));
        }
        if self.patch == 0 || self.patch % (2 * r) != 0 {
            return Err(Error::config(
                "patch",
                format!("{} is not a positive multiple of {}", self.patch, 2 * r),
            ));
        }
        if !(self.smoothness > 0.0) || !(self.detail >= 0.0) {
            return Err(Error::config("smoothness", "knobs must be positive"));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

fn noise_field(rng: &mut ChaCha8Rng, s: usize, sigma: f64) -> Vec<f64> {
    let raw = ImageTensor::from_fn(1, s, s, |_, _, _| StandardNormal.sample(rng));
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / sum).collect();
    let mut f = separable_filter(&raw, &k);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let sd = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    for v in f.iter_mut() {
        *v = (*v - mean) / sd;
    }
    f
}

/// Scene at PAN resolution: `(C × S × S, 1 × S × S)`.
fn synth_scene(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (ImageTensor, ImageTensor) {
    let c = cfg.bands;
    let s = cfg.patch * cfg.wald.ratio;
    let corr = cfg.smoothness * s as f64;
    let fields: Vec<Vec<f64>> = [1.0, 0.5, 0.25]
        .iter()
        .map(|f| noise_field(rng, s, corr * f))
        .collect();
    let texture = noise_field(rng, s, 1.0);
    let pan_extra = noise_field(rng, s, 0.6);

    let mut scene = vec![0.0f64; c * s * s];
    let means: Vec<f64> = (0..c).map(|_| rng.random_range(0.35..0.6)).collect();
    let mix: Vec<[f64; 3]> = (0..c)
        .map(|_| {
            [
                0.12,
                0.06 * { let z: f64 = StandardNormal.sample(rng); z },
                0.05 * { let z: f64 = StandardNormal.sample(rng); z },
            ]
        })
        .collect();
    for b in 0..c {
        for i in 0..s * s {
            let smooth: f64 = (0..3).map(|k| mix[b][k] * fields[k][i]).sum();
            scene[b * s * s + i] = means[b] + smooth;
        }
    }
    // Sharp-edged objects with their own spectral signatures.
    let objects = 10 + rng.random_range(0..8);
    for _ in 0..objects {
        let cy = rng.random_range(0.0..s as f64);
        let cx = rng.random_range(0.0..s as f64);
        let ry = rng.random_range(0.03..0.2) * s as f64;
        let rx = rng.random_range(0.03..0.2) * s as f64;
        let ellipse = rng.random_bool(0.5);
        let common: f64 = rng.random_range(-0.15..0.15);
        let sig: Vec<f64> = (0..c)
            .map(|_| 2.0 * cfg.detail * (common + rng.random_range(-0.1..0.1)))
            .collect();
        for y in 0..s {
            for x in 0..s {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if ellipse {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    for b in 0..c {
                        scene[(b * s + y) * s + x] += sig[b];
                    }
                }
            }
        }
    }
    let gains: Vec<f64> = (0..c).map(|_| rng.random_range(0.8..1.2)).collect();
    for b in 0..c {
        for i in 0..s * s {
            let v = &mut scene[b * s * s + i];
            *v += cfg.detail * 0.06 * gains[b] * texture[i];
            *v = v.clamp(0.0, 1.0);
        }
    }
    let weights: Vec<f64> = {
        let w: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let t: f64 = w.iter().sum();
        w.into_iter().map(|v| v / t).collect()
    };
    let pan: Vec<f32> = (0..s * s)
        .map(|i| {
            let m: f64 = (0..c).map(|b| weights[b] * scene[b * s * s + i]).sum();
            (m + cfg.detail * 0.01 * pan_extra[i]).clamp(0.0, 1.0) as f32
        })
        .collect();
    let scene = ImageTensor::new(c, s, s, scene.into_iter().map(|v| v as f32).collect()).expect("dims");
    let pan = ImageTensor::new(1, s, s, pan).expect("dims");
    (scene, pan)
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 1,
        Split::Val => 2,
        Split::Test => 3,
    }
}

/// Generates sample `index` of `split`. Each sample has its own RNG stream,
/// so any subset can be regenerated independently.
pub fn synth_sample(cfg: &SynthConfig, split: Split, index: usize) -> Result<FusionSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((split_stream(split) << 32) | index as u64);
    let (scene, pan_orig) = synth_scene(cfg, &mut rng);
    // Original MS: the scene seen through the MS sensor at 1/ratio.
    let ms_orig = mtf_downsample(&scene, cfg.wald.ratio, cfg.wald.ms_gain)?;
    wald_simulate(&ms_orig, &pan_orig, &cfg.wald)
}

pub fn synth_split(cfg: &SynthConfig, split: Split) -> Result<Vec<FusionSample>> {
    (0..cfg.count(split)).map(|i| synth_sample(cfg, split, i)).collect()
}

/// Writes samples as `<root>/<split>/<idx>_{pan,lrms,ms,gt}.ten` plus
/// `<root>/<split>/manifest.json`.
pub fn write_split(samples: &[FusionSample], root: &Path, split: Split, ratio: usize) -> Result<DatasetManifest> {
    let dir = root.join(split.as_str());
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = |k: &str| PathBuf::from(format!("{i:04}_{k}.ten"));
        write_tensor(&s.pan, dir.join(name("pan")))?;
        write_tensor(&s.lrms_up, dir.join(name("lrms")))?;
        write_tensor(&s.ms, dir.join(name("ms")))?;
        if let Some(gt) = &s.gt {
            write_tensor(gt, dir.join(name("gt")))?;
        }
        entries.push(ManifestEntry {
            pan: name("pan"),
            lrms: name("lrms"),
            ms: name("ms"),
            gt: s.gt.as_ref().map(|_| name("gt")),
        });
    }
    let m = DatasetManifest {
        split,
        scale_ratio: ratio,
        entries,
        root: dir.clone(),
    };
    m.save(dir.join("manifest.json"))?;
    Ok(m)
}

/// Generates and writes every non-empty split.
pub fn synth_dataset(cfg: &SynthConfig, root: impl AsRef<Path>) -> Result<Vec<DatasetManifest>> {
    cfg.validate()?;
    let root = root.as_ref();
    let mut out = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        if cfg.count(split) == 0 {
            continue;
        }
        let samples = synth_split(cfg, split)?;
        out.push(write_split(&samples, root, split, cfg.wald.ratio)?);
    }
    let path = root.join("synth.json");
    let text = serde_json::to_string_pretty(cfg).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

pub fn load_samples(m: &DatasetManifest) -> Result<Vec<FusionSample>> {
    (0..m.entries.len())
        .map(|i| {
            let t = m.load_entry(i)?;
            m.check_entry(i, &t)?;
            Ok(FusionSample {
                pan: t.pan,
                lrms_up: t.lrms,
                ms: t.ms,
                gt: t.gt,
            })
        })
        .collect()
}

/// Mean over bands of the Shannon entropy (bits) of a 256-bin histogram
/// spanning each band's min–max. Constant bands contribute 0.
pub fn entropy_bpp(x: &ImageTensor) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NumericDomain("entropy of non-finite image".into()));
    }
    let mut total = 0.0;
    for b in 0..x.bands() {
        let band = x.band(b);
        let lo = band.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = band.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        if hi <= lo {
            continue;
        }
        let mut hist = [0usize; 256];
        for &v in band {
            let bin = (((v as f64 - lo) / (hi - lo)) * 256.0).floor() as usize;
            hist[bin.min(255)] += 1;
        }
        let n = band.len() as f64;
        total -= hist
            .iter()
            .filter(|&&k| k > 0)
            .map(|&k| {
                let p = k as f64 / n;
                p * p.log2()
            })
            .sum::<f64>();
    }
    Ok(total / x.bands() as f64)
}
