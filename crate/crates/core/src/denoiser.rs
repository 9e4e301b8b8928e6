//! The conditional UNet: time-embedded residual blocks, style modulation on
//! the encoder, softmax self-attention at the bottleneck and wavelet
//! modulation on the decoder.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{pool_bands, pool_to, CondBatch, ConditionBundle, Injection, StyleModulation, WaveletModulation};
use crate::diffusion::{Prediction, PredictionKind};
use crate::error::{Error, Result};
use crate::nn::{self, Graph, ParamStore, Tensor, Var};
use crate::tensorio::{read_tensor, write_tensor, ImageTensor};

/// All learnable tensors, keyed by layer path such as
/// `enc.0.res.1.conv2.weight`.
pub type DenoiserParams = ParamStore;

fn default_base() -> usize {
    32
}
fn default_mults() -> Vec<usize> {
    vec![1, 2, 4]
}
fn default_bands() -> usize {
    4
}
fn default_groups() -> usize {
    8
}
fn default_two() -> usize {
    2
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    #[serde(default = "default_base")]
    pub base_channels: usize,
    #[serde(default = "default_mults")]
    pub channel_multipliers: Vec<usize>,
    #[serde(default)]
    pub prediction_kind: PredictionKind,
    #[serde(default = "default_bands")]
    pub in_bands: usize,
    #[serde(default = "default_two")]
    pub res_blocks: usize,
    #[serde(default = "default_two")]
    pub attn_blocks: usize,
    #[serde(default = "default_groups")]
    pub groups: usize,
    #[serde(default = "yes")]
    pub style_mod: bool,
    #[serde(default = "yes")]
    pub wavelet_mod: bool,
    #[serde(default)]
    pub injection: Injection,
    /// The network models `gt − lrms_up` rather than `gt`.
    #[serde(default = "yes")]
    pub residual: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_channels: default_base(),
            channel_multipliers: default_mults(),
            prediction_kind: PredictionKind::default(),
            in_bands: default_bands(),
            res_blocks: 2,
            attn_blocks: 2,
            groups: default_groups(),
            style_mod: true,
            wavelet_mod: true,
            injection: Injection::Concat,
            residual: true,
        }
    }
}

impl DenoiserConfig {
    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    /// Channels of `[P, M]`.
    pub fn cond_bands(&self) -> usize {
        self.in_bands + 1
    }

    /// Channels of the subband stack `[LL_M, LH_P, HL_P, HH_P]`.
    pub fn wavelet_bands(&self) -> usize {
        self.in_bands + 3
    }

    pub fn level_channels(&self, l: usize) -> usize {
        self.base_channels * self.channel_multipliers[l]
    }

    pub fn time_dim(&self) -> usize {
        4 * self.base_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() {
            return Err(Error::config("channel_multipliers", "at least one level is required"));
        }
        if self.channel_multipliers.contains(&0) {
            return Err(Error::config("channel_multipliers", "multipliers must be positive"));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::config("base_channels", "must be a positive even number"));
        }
        if self.in_bands == 0 {
            return Err(Error::config("in_bands", "must be positive"));
        }
        if self.res_blocks == 0 {
            return Err(Error::config("res_blocks", "must be positive"));
        }
        if self.groups == 0 {
            return Err(Error::config("groups", "must be positive"));
        }
        for l in 0..self.levels() {
            let c = self.level_channels(l);
            if c % self.groups != 0 {
                return Err(Error::config(
                    format!("enc.{l}"),
                    format!("{c} channels do not split into {} groups", self.groups),
                ));
            }
        }
        Ok(())
    }

    /// Input H, W must be even and divisible by 2^(levels−1).
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = (1usize << (self.levels() - 1)).max(2);
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::config(
                "input",
                format!("{h}x{w} is not divisible by {m} for {} levels", self.levels()),
            ));
        }
        Ok(())
    }

    fn style(&self, l: usize, j: usize) -> StyleModulation {
        StyleModulation::new(format!("enc.{l}.style.{j}"), self.cond_bands(), self.level_channels(l))
    }

    fn wave(&self, l: usize) -> WaveletModulation {
        WaveletModulation::new(format!("dec.{l}.wave"), self.wavelet_bands(), self.level_channels(l), self.injection)
    }

    /// Channels entering the first decoder block of level `l`.
    fn dec_in_channels(&self, l: usize) -> usize {
        let c = self.level_channels(l);
        if self.wavelet_mod {
            self.wave(l).out_channels(c)
        } else {
            2 * c
        }
    }

    /// Every parameter name and shape, in a fixed order.
    pub fn param_shapes(&self) -> Result<Vec<(String, [usize; 4])>> {
        self.validate()?;
        let b = self.base_channels;
        let td = self.time_dim();
        let mut v: Vec<(String, [usize; 4])> = Vec::new();
        v.extend(nn::conv_shapes("time.lin0", b, td, 1));
        v.extend(nn::conv_shapes("time.lin1", td, td, 1));
        v.extend(nn::conv_shapes("in", self.in_bands, self.level_channels(0), 3));
        let mut cin = self.level_channels(0);
        for l in 0..self.levels() {
            let c = self.level_channels(l);
            for j in 0..self.res_blocks {
                res_shapes(&mut v, &format!("enc.{l}.res.{j}"), cin, c, td);
                cin = c;
                if self.style_mod {
                    v.extend(self.style(l, j).param_shapes());
                }
            }
            if l + 1 < self.levels() {
                v.extend(nn::conv_shapes(&format!("enc.{l}.down"), c, c, 3));
            }
        }
        let cm = self.level_channels(self.levels() - 1);
        for a in 0..self.attn_blocks {
            let p = format!("mid.attn.{a}");
            v.extend(nn::norm_shapes(&format!("{p}.norm"), cm));
            v.extend(nn::conv_shapes(&format!("{p}.qkv"), cm, 3 * cm, 1));
            v.extend(nn::conv_shapes(&format!("{p}.proj"), cm, cm, 1));
        }
        for l in (0..self.levels()).rev() {
            let c = self.level_channels(l);
            if self.wavelet_mod {
                v.extend(self.wave(l).param_shapes());
            }
            let mut cin = self.dec_in_channels(l);
            for j in 0..self.res_blocks {
                res_shapes(&mut v, &format!("dec.{l}.res.{j}"), cin, c, td);
                cin = c;
            }
            if l > 0 {
                v.extend(nn::conv_shapes(&format!("dec.{l}.up"), c, self.level_channels(l - 1), 3));
            }
        }
        let c0 = self.level_channels(0);
        v.extend(nn::norm_shapes("out.norm", c0));
        v.extend(nn::conv_shapes("out.conv", c0, self.in_bands, 1));
        Ok(v)
    }
}

fn res_shapes(v: &mut Vec<(String, [usize; 4])>, p: &str, cin: usize, cout: usize, td: usize) {
    v.extend(nn::norm_shapes(&format!("{p}.norm1"), cin));
    v.extend(nn::conv_shapes(&format!("{p}.conv1"), cin, cout, 3));
    v.extend(nn::conv_shapes(&format!("{p}.temb"), td, cout, 1));
    v.extend(nn::norm_shapes(&format!("{p}.norm2"), cout));
    v.extend(nn::conv_shapes(&format!("{p}.conv2"), cout, cout, 3));
    if cin != cout {
        v.extend(nn::conv_shapes(&format!("{p}.skip"), cin, cout, 1));
    }
}

/// Number of scalar parameters of a configuration.
pub fn count_params(cfg: &DenoiserConfig) -> Result<usize> {
    Ok(cfg
        .param_shapes()?
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum())
}

/// Sinusoidal embedding of step `t`: `[sin(t·f_i)…, cos(t·f_i)…]` with
/// `f_i = 10000^(−i/half)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = vec![0.0f32; dim];
    for i in 0..half {
        let f = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * f;
        out[i] = a.sin() as f32;
        out[half + i] = a.cos() as f32;
    }
    out
}

/// A configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: DenoiserParams,
}

impl Denoiser {
    /// Kaiming-normal convolutions, unit norm gains, zero biases.
    pub fn init(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in cfg.param_shapes()? {
            let t = nn::init_param(&name, shape, &mut rng);
            params.insert(name, t);
        }
        Ok(Denoiser { cfg, params })
    }

    /// Checks that `params` holds exactly the tensors `cfg` declares.
    pub fn from_parts(cfg: DenoiserConfig, params: DenoiserParams) -> Result<Self> {
        let shapes = cfg.param_shapes()?;
        for (name, shape) in &shapes {
            let t = params.get(name)?;
            if t.shape() != *shape {
                return Err(Error::config(
                    name.as_str(),
                    format!("shape {:?} does not match config {shape:?}", t.shape()),
                ));
            }
        }
        if params.len() != shapes.len() {
            let known: std::collections::BTreeSet<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
            let extra = params.names().find(|n| !known.contains(n.as_str())).cloned().unwrap_or_default();
            return Err(Error::config(extra, "parameter not used by this config"));
        }
        Ok(Denoiser { cfg, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Records the network on `g`. `x` is `[N, C, H, W]`; one step per item.
    pub fn build(&self, g: &mut Graph, x: Var, steps: &[usize], cond: &CondBatch) -> Result<Var> {
        let cfg = &self.cfg;
        let p = &self.params;
        let [n, c, h, w] = g.value(x).shape();
        if c != cfg.in_bands {
            return Err(Error::config("in", format!("expects {} bands, got {c}", cfg.in_bands)));
        }
        cfg.check_input(h, w)?;
        if steps.len() != n {
            return Err(Error::config("time", format!("{} steps for a batch of {n}", steps.len())));
        }
        let pm_shape = cond.pan_ms.shape();
        if pm_shape != [n, cfg.cond_bands(), h, w] {
            return Err(Error::config(
                "cond.pan_ms",
                format!("expected {:?}, got {pm_shape:?}", [n, cfg.cond_bands(), h, w]),
            ));
        }
        let bs = cond.bands.shape();
        if bs != [n, cfg.wavelet_bands(), h / 2, w / 2] {
            return Err(Error::config(
                "cond.bands",
                format!("expected {:?}, got {bs:?}", [n, cfg.wavelet_bands(), h / 2, w / 2]),
            ));
        }

        let b = cfg.base_channels;
        let mut emb = Vec::with_capacity(n * b);
        for &t in steps {
            emb.extend(timestep_embedding(t, b));
        }
        let emb = g.input(Tensor::from_vec([n, b, 1, 1], emb)?);
        let temb = nn::conv(g, p, "time.lin0", emb, 1)?;
        let temb = g.silu(temb);
        let temb = nn::conv(g, p, "time.lin1", temb, 1)?;
        let temb = g.silu(temb);

        let pan_ms = g.input(cond.pan_ms.clone());
        let bands = g.input(cond.bands.clone());

        let mut hcur = nn::conv(g, p, "in", x, 1)?;
        let mut skips = Vec::with_capacity(cfg.levels());
        for l in 0..cfg.levels() {
            let (lh, lw) = (g.value(hcur).h(), g.value(hcur).w());
            let cond_l = if cfg.style_mod {
                Some(pool_to(g, pan_ms, lh, lw, &format!("enc.{l}"))?)
            } else {
                None
            };
            for j in 0..cfg.res_blocks {
                hcur = self.res_block(g, &format!("enc.{l}.res.{j}"), hcur, temb)?;
                if let Some(cv) = cond_l {
                    hcur = cfg.style(l, j).apply(g, p, hcur, cv)?;
                }
            }
            skips.push(hcur);
            if l + 1 < cfg.levels() {
                hcur = nn::conv(g, p, &format!("enc.{l}.down"), hcur, 2)?;
            }
        }
        for a in 0..cfg.attn_blocks {
            hcur = self.attn_block(g, &format!("mid.attn.{a}"), hcur)?;
        }
        for l in (0..cfg.levels()).rev() {
            let skip = skips[l];
            hcur = if cfg.wavelet_mod {
                let (lh, lw) = (g.value(skip).h(), g.value(skip).w());
                let bl = pool_bands(g, bands, lh, lw, &format!("dec.{l}.wave"))?;
                cfg.wave(l).apply(g, p, hcur, skip, bl)?
            } else {
                g.concat(&[hcur, skip])
            };
            for j in 0..cfg.res_blocks {
                hcur = self.res_block(g, &format!("dec.{l}.res.{j}"), hcur, temb)?;
            }
            if l > 0 {
                let u = g.upsample_nearest(hcur, 2);
                hcur = nn::conv(g, p, &format!("dec.{l}.up"), u, 1)?;
            }
        }
        let o = nn::group_norm(g, p, "out.norm", hcur, cfg.groups)?;
        let o = g.silu(o);
        nn::conv(g, p, "out.conv", o, 1)
    }

    fn res_block(&self, g: &mut Graph, prefix: &str, x: Var, temb: Var) -> Result<Var> {
        let p = &self.params;
        let groups = self.cfg.groups;
        let h = nn::group_norm(g, p, &format!("{prefix}.norm1"), x, groups)?;
        let h = g.silu(h);
        let h = nn::conv(g, p, &format!("{prefix}.conv1"), h, 1)?;
        let h = nn::group_norm(g, p, &format!("{prefix}.norm2"), h, groups)?;
        // After the norm, so narrow groups cannot cancel the per-channel shift.
        let t = nn::conv(g, p, &format!("{prefix}.temb"), temb, 1)?;
        let h = g.add_channel(h, t);
        let h = g.silu(h);
        let h = nn::conv(g, p, &format!("{prefix}.conv2"), h, 1)?;
        let skip_name = format!("{prefix}.skip");
        let s = if p.contains(&format!("{skip_name}.weight")) {
            nn::conv(g, p, &skip_name, x, 1)?
        } else {
            x
        };
        if g.value(s).shape() != g.value(h).shape() {
            return Err(Error::config(
                prefix,
                format!("residual {:?} does not match block output {:?}", g.value(s).shape(), g.value(h).shape()),
            ));
        }
        Ok(g.add(h, s))
    }

    fn attn_block(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let p = &self.params;
        let c = g.value(x).c();
        let h = nn::group_norm(g, p, &format!("{prefix}.norm"), x, self.cfg.groups)?;
        let qkv = nn::conv(g, p, &format!("{prefix}.qkv"), h, 1)?;
        if g.value(qkv).c() != 3 * c {
            return Err(Error::config(prefix, "qkv projection width mismatch"));
        }
        let q = g.narrow(qkv, 0, c);
        let k = g.narrow(qkv, c, c);
        let v = g.narrow(qkv, 2 * c, c);
        let a = g.softmax_attention(q, k, v);
        let o = nn::conv(g, p, &format!("{prefix}.proj"), a, 1)?;
        Ok(g.add(x, o))
    }

    /// Batched prediction `[N, C, H, W]`.
    pub fn forward_batch(&self, x: &Tensor, steps: &[usize], cond: &CondBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let out = self.build(&mut g, xv, steps, cond)?;
        Ok(g.value(out).clone())
    }

    /// Prediction for one noisy image at step `t`, tagged with the
    /// configured parameterisation.
    pub fn forward(&self, x_t: &ImageTensor, t: usize, cond: &ConditionBundle) -> Result<Prediction> {
        if x_t.dims() != cond.lrms_up.dims() {
            return Err(Error::config(
                "input",
                format!("x_t {:?} does not match conditions {:?}", x_t.dims(), cond.lrms_up.dims()),
            ));
        }
        let cb = CondBatch::repeat(cond, 1)?;
        let out = self.forward_batch(&Tensor::from_image(x_t), &[t], &cb)?;
        let value = out.to_images().remove(0).with_range(x_t.range_hint);
        Ok(Prediction::new(self.cfg.prediction_kind, value))
    }

    /// Writes `manifest.json` and one `.ten` blob per parameter to `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors = save_store(&self.params, dir)?;
        let m = ModelManifest {
            config: self.cfg.clone(),
            tensors,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let params = load_store(&m.tensors, dir)?;
        Denoiser::from_parts(m.config, params)
    }
}

/// One stored tensor in a checkpoint manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub dtype: String,
    pub shape: [usize; 4],
    pub file: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelManifest {
    config: DenoiserConfig,
    tensors: BTreeMap<String, TensorEntry>,
}

/// Writes each tensor as a `.ten` blob of dims `(s0, s1, s2·s3)`.
pub fn save_store(store: &ParamStore, dir: &Path) -> Result<BTreeMap<String, TensorEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for (name, t) in store.iter() {
        let [a, b, c, d] = t.shape();
        let file = format!("{name}.ten");
        let img = ImageTensor::new(a, b, c * d, t.data().to_vec())?;
        write_tensor(&img, dir.join(&file))?;
        out.insert(
            name.clone(),
            TensorEntry {
                dtype: "f32".into(),
                shape: t.shape(),
                file,
            },
        );
    }
    Ok(out)
}

pub fn load_store(entries: &BTreeMap<String, TensorEntry>, dir: &Path) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, e) in entries {
        if e.dtype != "f32" {
            return Err(Error::config(name.as_str(), format!("unsupported dtype {}", e.dtype)));
        }
        let img = read_tensor(dir.join(&e.file))?;
        let t = Tensor::from_vec(e.shape, img.into_data()).map_err(|_| {
            Error::config(name.as_str(), format!("blob does not hold shape {:?}", e.shape))
        })?;
        store.insert(name.clone(), t);
    }
    Ok(store)
}
