//! Plain-loop f64 re-implementation of the conditional network, used as a
//! high-precision finite-difference oracle for the f32 backward pass.

use std::collections::BTreeMap;

use fusediff_core::conditioning::Injection;
use fusediff_core::nn::ParamStore;
use fusediff_core::DenoiserConfig;

#[derive(Clone, Debug)]
pub struct T64 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub d: Vec<f64>,
}

impl T64 {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        T64 { n, c, h, w, d: vec![0.0; n * c * h * w] }
    }

    pub fn from_f32(shape: [usize; 4], data: &[f32]) -> Self {
        T64 {
            n: shape[0],
            c: shape[1],
            h: shape[2],
            w: shape[3],
            d: data.iter().map(|&v| v as f64).collect(),
        }
    }

    fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.d[self.idx(n, c, y, x)]
    }
}

pub type Params64 = BTreeMap<String, T64>;

pub fn params64(p: &ParamStore) -> Params64 {
    p.iter().map(|(k, t)| (k.clone(), T64::from_f32(t.shape(), t.data()))).collect()
}

pub fn conv(x: &T64, wt: &T64, b: &T64, stride: usize) -> T64 {
    let (co, k) = (wt.n, wt.h);
    let pad = k / 2;
    let oh = (x.h + 2 * pad - k) / stride + 1;
    let ow = (x.w + 2 * pad - k) / stride + 1;
    let mut out = T64::zeros(x.n, co, oh, ow);
    for n in 0..x.n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.d[o];
                    for ci in 0..x.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                    continue;
                                }
                                acc += wt.at(o, ci, ky, kx) * x.at(n, ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    let i = out.idx(n, o, oy, ox);
                    out.d[i] = acc;
                }
            }
        }
    }
    out
}

pub fn conv_p(p: &Params64, name: &str, x: &T64, stride: usize) -> T64 {
    conv(x, &p[&format!("{name}.weight")], &p[&format!("{name}.bias")], stride)
}

pub fn group_norm(x: &T64, gamma: &T64, beta: &T64, groups: usize) -> T64 {
    let cpg = x.c / groups;
    let mut out = x.clone();
    for n in 0..x.n {
        for g in 0..groups {
            let mut vals = Vec::new();
            for c in g * cpg..(g + 1) * cpg {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        vals.push(x.at(n, c, y, xx));
                    }
                }
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
            let r = 1.0 / (var + 1e-5).sqrt();
            for c in g * cpg..(g + 1) * cpg {
                for y in 0..x.h {
                    for xx in 0..x.w {
                        let i = x.idx(n, c, y, xx);
                        out.d[i] = (x.d[i] - m) * r * gamma.d[c] + beta.d[c];
                    }
                }
            }
        }
    }
    out
}

pub fn norm_p(p: &Params64, name: &str, x: &T64, groups: usize) -> T64 {
    group_norm(x, &p[&format!("{name}.gamma")], &p[&format!("{name}.beta")], groups)
}

pub fn silu(x: &T64) -> T64 {
    let mut o = x.clone();
    for v in o.d.iter_mut() {
        *v /= 1.0 + (-*v).exp();
    }
    o
}

pub fn add(a: &T64, b: &T64) -> T64 {
    let mut o = a.clone();
    for (x, y) in o.d.iter_mut().zip(&b.d) {
        *x += y;
    }
    o
}

/// `bias` is `[N, C, 1, 1]`.
pub fn add_channel(x: &T64, bias: &T64) -> T64 {
    let mut o = x.clone();
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let i = x.idx(n, c, y, xx);
                    o.d[i] += bias.d[n * x.c + c];
                }
            }
        }
    }
    o
}

pub fn concat(parts: &[&T64]) -> T64 {
    let (n, h, w) = (parts[0].n, parts[0].h, parts[0].w);
    let c: usize = parts.iter().map(|p| p.c).sum();
    let mut o = T64::zeros(n, c, h, w);
    for i in 0..n {
        let mut off = 0;
        for p in parts {
            for cc in 0..p.c {
                for y in 0..h {
                    for x in 0..w {
                        let j = o.idx(i, off + cc, y, x);
                        o.d[j] = p.at(i, cc, y, x);
                    }
                }
            }
            off += p.c;
        }
    }
    o
}

pub fn channels(x: &T64, start: usize, len: usize) -> T64 {
    let mut o = T64::zeros(x.n, len, x.h, x.w);
    for n in 0..x.n {
        for c in 0..len {
            for y in 0..x.h {
                for xx in 0..x.w {
                    let j = o.idx(n, c, y, xx);
                    o.d[j] = x.at(n, start + c, y, xx);
                }
            }
        }
    }
    o
}

pub fn avg_pool(x: &T64, f: usize) -> T64 {
    let mut o = T64::zeros(x.n, x.c, x.h / f, x.w / f);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..o.h {
                for xx in 0..o.w {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += x.at(n, c, y * f + dy, xx * f + dx);
                        }
                    }
                    let j = o.idx(n, c, y, xx);
                    o.d[j] = s / (f * f) as f64;
                }
            }
        }
    }
    o
}

pub fn upsample(x: &T64, f: usize) -> T64 {
    let mut o = T64::zeros(x.n, x.c, x.h * f, x.w * f);
    for n in 0..x.n {
        for c in 0..x.c {
            for y in 0..o.h {
                for xx in 0..o.w {
                    let j = o.idx(n, c, y, xx);
                    o.d[j] = x.at(n, c, y / f, xx / f);
                }
            }
        }
    }
    o
}

/// Factorised cross-attention evaluated term by term.
pub fn linear_attention(q: &T64, k: &T64, v: &T64) -> T64 {
    let d = q.c;
    let (nq, nk) = (q.h * q.w, k.h * k.w);
    let mut o = T64::zeros(q.n, d, q.h, q.w);
    for n in 0..q.n {
        let qs = &q.d[n * d * nq..(n + 1) * d * nq];
        let ks = &k.d[n * d * nk..(n + 1) * d * nk];
        let vs = &v.d[n * d * nk..(n + 1) * d * nk];
        let mut qh = vec![0.0; d * nq];
        for j in 0..nq {
            let z: f64 = (0..d).map(|c| qs[c * nq + j].exp()).sum();
            for c in 0..d {
                qh[c * nq + j] = qs[c * nq + j].exp() / z;
            }
        }
        let mut kh = vec![0.0; d * nk];
        for c in 0..d {
            let z: f64 = (0..nk).map(|j| ks[c * nk + j].exp()).sum();
            for j in 0..nk {
                kh[c * nk + j] = ks[c * nk + j].exp() / z;
            }
        }
        for e in 0..d {
            for j in 0..nq {
                let mut s = 0.0;
                for c in 0..d {
                    let a: f64 = (0..nk).map(|i| kh[c * nk + i] * vs[e * nk + i]).sum();
                    s += a * qh[c * nq + j];
                }
                o.d[(n * d + e) * nq + j] = s;
            }
        }
    }
    o
}

/// Scaled dot-product self-attention over spatial positions.
pub fn softmax_attention(q: &T64, k: &T64, v: &T64) -> T64 {
    let d = q.c;
    let np = q.h * q.w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut o = T64::zeros(q.n, d, q.h, q.w);
    for n in 0..q.n {
        let b = n * d * np;
        for i in 0..np {
            let s: Vec<f64> = (0..np)
                .map(|j| (0..d).map(|c| q.d[b + c * np + i] * k.d[b + c * np + j]).sum::<f64>() * scale)
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            for c in 0..d {
                o.d[b + c * np + i] = (0..np).map(|j| (s[j] - m).exp() / z * v.d[b + c * np + j]).sum();
            }
        }
    }
    o
}

pub fn style(p: &Params64, prefix: &str, f: &T64, cond: &T64) -> T64 {
    let d = f.c;
    let h = silu(&conv_p(p, &format!("{prefix}.mlp0"), cond, 1));
    let ss = conv_p(p, &format!("{prefix}.mlp1"), &h, 1);
    let (sc, sh) = (channels(&ss, 0, d), channels(&ss, d, d));
    let mut o = f.clone();
    for i in 0..o.d.len() {
        o.d[i] = f.d[i] * (1.0 + sc.d[i]) + sh.d[i];
    }
    o
}

pub fn wave(p: &Params64, prefix: &str, dec: &T64, skip: &T64, bands: &T64, inj: Injection) -> T64 {
    let d = skip.c;
    let q = conv_p(p, &format!("{prefix}.q"), skip, 1);
    let kv = conv_p(p, &format!("{prefix}.kv"), bands, 1);
    let o = linear_attention(&q, &channels(&kv, 0, d), &channels(&kv, d, d));
    match inj {
        Injection::Concat => concat(&[dec, skip, &o]),
        Injection::Add => concat(&[dec, &add(skip, &o)]),
    }
}

fn embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for i in 0..half {
        let a = t as f64 * 10000f64.powf(-(i as f64) / half as f64);
        e[i] = a.sin();
        e[half + i] = a.cos();
    }
    e
}

fn res(p: &Params64, prefix: &str, x: &T64, temb: &T64, groups: usize) -> T64 {
    let h = conv_p(p, &format!("{prefix}.conv1"), &silu(&norm_p(p, &format!("{prefix}.norm1"), x, groups)), 1);
    let h = norm_p(p, &format!("{prefix}.norm2"), &h, groups);
    let h = add_channel(&h, &conv_p(p, &format!("{prefix}.temb"), temb, 1));
    let h = conv_p(p, &format!("{prefix}.conv2"), &silu(&h), 1);
    let s = if p.contains_key(&format!("{prefix}.skip.weight")) {
        conv_p(p, &format!("{prefix}.skip"), x, 1)
    } else {
        x.clone()
    };
    add(&h, &s)
}

/// The whole network for a batch of one.
pub fn denoiser(cfg: &DenoiserConfig, p: &Params64, x: &T64, t: usize, pan_ms: &T64, bands: &T64) -> T64 {
    let g = cfg.groups;
    let b = cfg.base_channels;
    let e = T64 { n: 1, c: b, h: 1, w: 1, d: embedding(t, b) };
    let temb = silu(&conv_p(p, "time.lin1", &silu(&conv_p(p, "time.lin0", &e, 1)), 1));
    let mut h = conv_p(p, "in", x, 1);
    let mut skips = Vec::new();
    let levels = cfg.channel_multipliers.len();
    for l in 0..levels {
        let cond = avg_pool(pan_ms, pan_ms.h / h.h);
        for j in 0..cfg.res_blocks {
            h = res(p, &format!("enc.{l}.res.{j}"), &h, &temb, g);
            if cfg.style_mod {
                h = style(p, &format!("enc.{l}.style.{j}"), &h, &cond);
            }
        }
        skips.push(h.clone());
        if l + 1 < levels {
            h = conv_p(p, &format!("enc.{l}.down"), &h, 2);
        }
    }
    for a in 0..cfg.attn_blocks {
        let pre = format!("mid.attn.{a}");
        let c = h.c;
        let qkv = conv_p(p, &format!("{pre}.qkv"), &norm_p(p, &format!("{pre}.norm"), &h, g), 1);
        let o = softmax_attention(&channels(&qkv, 0, c), &channels(&qkv, c, c), &channels(&qkv, 2 * c, c));
        h = add(&h, &conv_p(p, &format!("{pre}.proj"), &o, 1));
    }
    for l in (0..levels).rev() {
        let skip = &skips[l];
        h = if cfg.wavelet_mod {
            let bl = if skip.h >= bands.h { bands.clone() } else { avg_pool(bands, bands.h / skip.h) };
            wave(p, &format!("dec.{l}.wave"), &h, skip, &bl, cfg.injection)
        } else {
            concat(&[&h, skip])
        };
        for j in 0..cfg.res_blocks {
            h = res(p, &format!("dec.{l}.res.{j}"), &h, &temb, g);
        }
        if l > 0 {
            h = conv_p(p, &format!("dec.{l}.up"), &upsample(&h, 2), 1);
        }
    }
    conv_p(p, "out.conv", &silu(&norm_p(p, "out.norm", &h, g)), 1)
}

pub fn dot(x: &T64, probe: &[f32]) -> f64 {
    x.d.iter().zip(probe).map(|(a, &b)| a * b as f64).sum()
}
