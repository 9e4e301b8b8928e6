//! Reference (SAM, ERGAS, PSNR, SSIM, SCC, Q) and no-reference
//! (D_λ, D_s, QNR) fusion quality metrics.

use serde::{Deserialize, Serialize, Serializer};

use crate::datasim::{mtf_downsample, FusionSample, MTF_GAIN_PAN};
use crate::error::{Error, Result};
use crate::tensorio::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub scale_ratio: usize,
    pub degrees: bool,
    pub qnr_alpha: f64,
    pub qnr_beta: f64,
    /// Q-index block side at fused resolution; MS-resolution comparisons
    /// use `uiqi_window / scale_ratio`.
    pub uiqi_window: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            scale_ratio: 4,
            degrees: true,
            qnr_alpha: 1.0,
            qnr_beta: 1.0,
            uiqi_window: 32,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scale_ratio == 0 {
            return Err(Error::config("scale_ratio", "must be at least 1"));
        }
        if self.uiqi_window < self.scale_ratio || self.uiqi_window % self.scale_ratio != 0 {
            return Err(Error::config(
                "uiqi_window",
                format!("{} must be a multiple of scale_ratio {}", self.uiqi_window, self.scale_ratio),
            ));
        }
        Ok(())
    }
}

fn same(x: &ImageTensor, y: &ImageTensor, what: &str) -> Result<()> {
    if x.dims() != y.dims() {
        return Err(Error::invalid(format!(
            "{what}: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    Ok(())
}

/// Mean spectral angle in radians; pixels where either vector is zero are
/// skipped.
pub fn sam_radians(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    same(x, y, "sam")?;
    let (c, h, w) = x.dims();
    if c < 2 {
        return Err(Error::invalid("SAM needs at least two bands"));
    }
    let (mut total, mut n) = (0.0, 0usize);
    let mut a = vec![0.0f64; c];
    let mut b = vec![0.0f64; c];
    for i in 0..h * w {
        for k in 0..c {
            a[k] = x.band(k)[i] as f64;
            b[k] = y.band(k)[i] as f64;
        }
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        // Angle between unit vectors via 2·atan2(|u−v|, |u+v|): exact 0 for
        // parallel inputs, no arccos cancellation near 0.
        let (mut d, mut s) = (0.0, 0.0);
        for k in 0..c {
            let (u, v) = (a[k] / na, b[k] / nb);
            d += (u - v) * (u - v);
            s += (u + v) * (u + v);
        }
        total += 2.0 * d.sqrt().atan2(s.sqrt());
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("SAM: every pixel vector is zero".into()));
    }
    Ok(total / n as f64)
}

pub fn sam(x: &ImageTensor, y: &ImageTensor, cfg: &MetricConfig) -> Result<f64> {
    let r = sam_radians(x, y)?;
    Ok(if cfg.degrees { r.to_degrees() } else { r })
}

fn band_mse(x: &[f32], y: &[f32]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / x.len() as f64
}

fn mean(x: &[f32]) -> f64 {
    x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64
}

pub fn ergas(x: &ImageTensor, y_ref: &ImageTensor, cfg: &MetricConfig) -> Result<f64> {
    same(x, y_ref, "ergas")?;
    let c = x.bands();
    let mut acc = 0.0;
    for b in 0..c {
        let mu = mean(y_ref.band(b));
        if mu == 0.0 {
            return Err(Error::UndefinedMetric(format!("ERGAS: band {b} of the reference has zero mean")));
        }
        acc += band_mse(x.band(b), y_ref.band(b)) / (mu * mu);
    }
    Ok(100.0 / cfg.scale_ratio as f64 * (acc / c as f64).sqrt())
}

/// Band-averaged PSNR with the reference band maximum as peak. Any band
/// with zero error makes the result `+∞`.
pub fn psnr(x: &ImageTensor, y_ref: &ImageTensor) -> Result<f64> {
    same(x, y_ref, "psnr")?;
    let c = x.bands();
    let mut acc = 0.0;
    for b in 0..c {
        let mse = band_mse(x.band(b), y_ref.band(b));
        if mse == 0.0 {
            return Ok(f64::INFINITY);
        }
        let peak = y_ref.band(b).iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        acc += 20.0 * (peak / mse.sqrt()).log10();
    }
    Ok(acc / c as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xx in 0..ow {
            rows[y * ow + xx] = (0..n).map(|j| k[j] * x[y * w + xx + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xx in 0..ow {
            out[y * ow + xx] = (0..n).map(|j| k[j] * rows[(y + j) * ow + xx]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, K = 0.01 / 0.03) per band,
/// with both bands scaled by the reference band's dynamic range.
pub fn ssim(x: &ImageTensor, y_ref: &ImageTensor) -> Result<f64> {
    same(x, y_ref, "ssim")?;
    let (c, h, w) = x.dims();
    if h < 11 || w < 11 {
        return Err(Error::config("ssim", format!("{h}x{w} is smaller than the 11x11 window")));
    }
    let win = gaussian_window(11, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for b in 0..c {
        let yb = y_ref.band(b);
        let lo = yb.iter().cloned().fold(f32::INFINITY, f32::min) as f64;
        let hi = yb.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let range = if hi > lo { hi - lo } else { 1.0 };
        let p: Vec<f64> = x.band(b).iter().map(|&v| (v as f64 - lo) / range).collect();
        let q: Vec<f64> = yb.iter().map(|&v| (v as f64 - lo) / range).collect();
        let pp: Vec<f64> = p.iter().map(|v| v * v).collect();
        let qq: Vec<f64> = q.iter().map(|v| v * v).collect();
        let pq: Vec<f64> = p.iter().zip(&q).map(|(a, b)| a * b).collect();
        let (mp, oh, ow) = filter_valid(&p, h, w, &win);
        let (mq, ..) = filter_valid(&q, h, w, &win);
        let (spp, ..) = filter_valid(&pp, h, w, &win);
        let (sqq, ..) = filter_valid(&qq, h, w, &win);
        let (spq, ..) = filter_valid(&pq, h, w, &win);
        let mut acc = 0.0;
        for i in 0..oh * ow {
            let (a, bq) = (mp[i], mq[i]);
            let vp = spp[i] - a * a;
            let vq = sqq[i] - bq * bq;
            let cov = spq[i] - a * bq;
            acc += ((2.0 * a * bq + c1) * (2.0 * cov + c2)) / ((a * a + bq * bq + c1) * (vp + vq + c2));
        }
        total += acc / (oh * ow) as f64;
    }
    Ok(total / c as f64)
}

fn laplacian(x: &[f32], h: usize, w: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for xx in 1..w - 1 {
            let mut acc = 8.0 * x[y * w + xx] as f64;
            for dy in 0..3 {
                for dx in 0..3 {
                    if dy != 1 || dx != 1 {
                        acc -= x[(y + dy - 1) * w + xx + dx - 1] as f64;
                    }
                }
            }
            out.push(acc);
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Band-averaged correlation of 3×3 Laplacian high-pass responses
/// (interior pixels). Bands whose high-pass has zero variance are skipped.
pub fn scc(x: &ImageTensor, y_ref: &ImageTensor) -> Result<f64> {
    same(x, y_ref, "scc")?;
    let (c, h, w) = x.dims();
    if h < 3 || w < 3 {
        return Err(Error::invalid("SCC needs at least 3x3 pixels"));
    }
    let mut vals = Vec::new();
    for b in 0..c {
        match pearson(&laplacian(x.band(b), h, w), &laplacian(y_ref.band(b), h, w)) {
            Some(r) => vals.push(r),
            None => log::warn!("SCC: band {b} has a flat high-pass, skipped"),
        }
    }
    if vals.is_empty() {
        return Err(Error::UndefinedMetric("SCC: every band is flat".into()));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Universal image quality index of two equally sized planes.
pub fn uiqi(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let (sab, saa, sbb) = (sab / n, saa / n, sbb / n);
    let means = ma * ma + mb * mb;
    let vars = saa + sbb;
    match (means == 0.0, vars == 0.0) {
        (true, true) => 1.0,
        (false, true) => 2.0 * ma * mb / means,
        (true, false) => 2.0 * sab / vars,
        (false, false) => 4.0 * sab * ma * mb / (vars * means),
    }
}

/// Mean Q over non-overlapping `block × block` tiles of two planes.
pub fn q_index(a: &[f32], b: &[f32], h: usize, w: usize, block: usize) -> Result<f64> {
    if block == 0 || block > h || block > w {
        return Err(Error::config(
            "uiqi_window",
            format!("window {block} does not fit a {h}x{w} image"),
        ));
    }
    let mut total = 0.0;
    let mut n = 0;
    let mut pa = Vec::with_capacity(block * block);
    let mut pb = Vec::with_capacity(block * block);
    for y0 in (0..=h - block).step_by(block) {
        for x0 in (0..=w - block).step_by(block) {
            pa.clear();
            pb.clear();
            for y in y0..y0 + block {
                for x in x0..x0 + block {
                    pa.push(a[y * w + x] as f64);
                    pb.push(b[y * w + x] as f64);
                }
            }
            total += uiqi(&pa, &pb);
            n += 1;
        }
    }
    Ok(total / n as f64)
}

/// Band-averaged blockwise Q of a fused image against the reference.
pub fn q_avg(x: &ImageTensor, y_ref: &ImageTensor, cfg: &MetricConfig) -> Result<f64> {
    same(x, y_ref, "q_avg")?;
    let (c, h, w) = x.dims();
    let mut t = 0.0;
    for b in 0..c {
        t += q_index(x.band(b), y_ref.band(b), h, w, cfg.uiqi_window)?;
    }
    Ok(t / c as f64)
}

/// Spectral distortion: mean over band pairs of |Q(fᵢ,fⱼ) − Q(msᵢ,msⱼ)|,
/// clamped to [0, 1].
pub fn d_lambda(fused: &ImageTensor, ms: &ImageTensor, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    let c = fused.bands();
    if ms.bands() != c {
        return Err(Error::invalid("d_lambda: band counts differ"));
    }
    if c < 2 {
        return Ok(0.0);
    }
    let (fh, fw) = (fused.height(), fused.width());
    let (mh, mw) = (ms.height(), ms.width());
    let small = cfg.uiqi_window / cfg.scale_ratio;
    let (mut acc, mut n) = (0.0, 0);
    for i in 0..c {
        for j in i + 1..c {
            let qf = q_index(fused.band(i), fused.band(j), fh, fw, cfg.uiqi_window)?;
            let qm = q_index(ms.band(i), ms.band(j), mh, mw, small)?;
            acc += (qf - qm).abs();
            n += 1;
        }
    }
    Ok((acc / n as f64).clamp(0.0, 1.0))
}

/// Spatial distortion: mean over bands of |Q(fᵢ, pan) − Q(msᵢ, pan_lr)|,
/// with `pan_lr` the PAN degraded to MS resolution; clamped to [0, 1].
pub fn d_s(fused: &ImageTensor, ms: &ImageTensor, pan: &ImageTensor, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    if pan.height() != fused.height() || pan.width() != fused.width() || pan.bands() != 1 {
        return Err(Error::invalid("d_s: pan must be one band at the fused size"));
    }
    let pan_lr = mtf_downsample(pan, cfg.scale_ratio, MTF_GAIN_PAN)?;
    if pan_lr.dims() != (1, ms.height(), ms.width()) {
        return Err(Error::invalid("d_s: ms is not pan / scale_ratio"));
    }
    let (fh, fw) = (fused.height(), fused.width());
    let (mh, mw) = (ms.height(), ms.width());
    let small = cfg.uiqi_window / cfg.scale_ratio;
    let mut acc = 0.0;
    for b in 0..fused.bands() {
        let qf = q_index(fused.band(b), pan.band(0), fh, fw, cfg.uiqi_window)?;
        let qm = q_index(ms.band(b), pan_lr.band(0), mh, mw, small)?;
        acc += (qf - qm).abs();
    }
    Ok((acc / fused.bands() as f64).clamp(0.0, 1.0))
}

pub fn qnr(d_lambda: f64, d_s: f64, cfg: &MetricConfig) -> f64 {
    (1.0 - d_lambda).powf(cfg.qnr_alpha) * (1.0 - d_s).powf(cfg.qnr_beta)
}

fn ser_metric<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        None => s.serialize_none(),
        Some(x) if x.is_finite() => s.serialize_f64(*x),
        Some(x) if *x > 0.0 => s.serialize_str("inf"),
        Some(_) => s.serialize_str("nan"),
    }
}

fn de_metric<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Option::<Raw>::deserialize(d)? {
        None => Ok(None),
        Some(Raw::Num(v)) => Ok(Some(v)),
        Some(Raw::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
        Some(Raw::Text(t)) if t == "nan" => Ok(Some(f64::NAN)),
        Some(Raw::Text(t)) => Err(serde::de::Error::custom(format!("bad metric value `{t}`"))),
    }
}

macro_rules! metric_fields {
    ($(#[$m:meta])* pub struct $name:ident { $($extra:ident : $ety:ty,)* }) => {
        $(#[$m])*
        pub struct $name {
            $(pub $extra: $ety,)*
            #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric", default)]
            pub sam: Option<f64>,
            #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric", default)]
            pub ergas: Option<f64>,
            #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric", default)]
            pub psnr: Option<f64>,
            #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric", default)]
            pub ssim: Option<f64>,
            #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric", default)]
            pub scc: Option<f64>,
            #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric", default)]
            pub q_avg: Option<f64>,
            #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric", default)]
            pub d_lambda: Option<f64>,
            #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric", default)]
            pub d_s: Option<f64>,
            #[serde(serialize_with = "ser_metric", deserialize_with = "de_metric", default)]
            pub qnr: Option<f64>,
        }
    };
}

metric_fields! {
    /// Metrics of one fused image.
    #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
    pub struct ImageMetrics {
        index: usize,
    }
}

metric_fields! {
    /// Dataset-level means plus the per-image breakdown.
    #[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
    pub struct MetricReport {
        label: String,
        images: usize,
        per_image: Vec<ImageMetrics>,
    }
}

pub const METRIC_NAMES: [&str; 9] = ["sam", "ergas", "psnr", "ssim", "scc", "q_avg", "d_lambda", "d_s", "qnr"];

impl ImageMetrics {
    pub fn values(&self) -> [Option<f64>; 9] {
        [
            self.sam, self.ergas, self.psnr, self.ssim, self.scc, self.q_avg, self.d_lambda, self.d_s, self.qnr,
        ]
    }
}

impl MetricReport {
    pub fn values(&self) -> [Option<f64>; 9] {
        [
            self.sam, self.ergas, self.psnr, self.ssim, self.scc, self.q_avg, self.d_lambda, self.d_s, self.qnr,
        ]
    }

    /// Aggregates per-image metrics by their mean; a metric is present only
    /// if every image has it.
    pub fn from_images(label: impl Into<String>, per_image: Vec<ImageMetrics>) -> MetricReport {
        let agg = |f: fn(&ImageMetrics) -> Option<f64>| -> Option<f64> {
            if per_image.is_empty() {
                return None;
            }
            let vals: Option<Vec<f64>> = per_image.iter().map(f).collect();
            vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        MetricReport {
            label: label.into(),
            images: per_image.len(),
            sam: agg(|m| m.sam),
            ergas: agg(|m| m.ergas),
            psnr: agg(|m| m.psnr),
            ssim: agg(|m| m.ssim),
            scc: agg(|m| m.scc),
            q_avg: agg(|m| m.q_avg),
            d_lambda: agg(|m| m.d_lambda),
            d_s: agg(|m| m.d_s),
            qnr: agg(|m| m.qnr),
            per_image,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    pub fn from_json(text: &str) -> Result<MetricReport> {
        serde_json::from_str(text).map_err(|e| Error::parse("metric report", e.to_string()))
    }

    /// Aligned plain-text table: one row per image then the mean.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            None => "-".to_string(),
            Some(x) if x.is_infinite() => "inf".to_string(),
            Some(x) => format!("{x:.4}"),
        };
        let mut out = format!("{:<8}", "image");
        for n in METRIC_NAMES {
            out.push_str(&format!(" {n:>9}"));
        }
        out.push('\n');
        for m in &self.per_image {
            out.push_str(&format!("{:<8}", m.index));
            for v in m.values() {
                out.push_str(&format!(" {:>9}", fmt(v)));
            }
            out.push('\n');
        }
        out.push_str(&format!("{:<8}", "mean"));
        for v in self.values() {
            out.push_str(&format!(" {:>9}", fmt(v)));
        }
        out.push('\n');
        out
    }
}

/// Every metric the sample supports: reference metrics when `gt` is
/// present, the no-reference triple always.
pub fn evaluate(index: usize, sample: &FusionSample, fused: &ImageTensor, cfg: &MetricConfig) -> Result<ImageMetrics> {
    cfg.validate()?;
    same(fused, &sample.lrms_up, "fused vs lrms_up")?;
    let mut m = ImageMetrics {
        index,
        ..Default::default()
    };
    if let Some(gt) = &sample.gt {
        m.sam = Some(sam(fused, gt, cfg)?);
        m.ergas = Some(ergas(fused, gt, cfg)?);
        m.psnr = Some(psnr(fused, gt)?);
        m.ssim = ssim(fused, gt).ok();
        m.scc = scc(fused, gt).ok();
        m.q_avg = Some(q_avg(fused, gt, cfg)?);
    }
    let dl = d_lambda(fused, &sample.ms, cfg)?;
    let ds = d_s(fused, &sample.ms, &sample.pan, cfg)?;
    m.d_lambda = Some(dl);
    m.d_s = Some(ds);
    m.qnr = Some(qnr(dl, ds, cfg));
    Ok(m)
}
