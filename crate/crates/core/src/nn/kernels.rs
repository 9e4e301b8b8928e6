//! Numeric kernels backing the graph operations.

use super::Tensor;

/// `c = a·b + beta·c` for row-major operands; `ta`/`tb` mean the operand is
/// stored transposed (`k×m` resp. `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom { cin, h, w, k, stride, pad, ho, wo }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols_len(&self) -> usize {
        self.cin * self.k * self.k * self.ho * self.wo
    }
}

/// Output columns `ox` whose input column `ox·stride + kx − pad` lies in
/// `0..w`, as a half-open range.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let off = kx as isize - g.pad as isize;
    let s = g.stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
    let hi = if (g.w as isize) <= off {
        0
    } else {
        (((g.w as isize - off + s - 1) / s) as usize).min(g.wo)
    };
    (lo.min(hi), hi)
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * p;
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo >= hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let start = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[start..].iter().step_by(g.stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * p;
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    let src = &cols[row + oy * g.wo + lo..row + oy * g.wo + hi];
                    let dst = &mut dx[base + start..base + g.w];
                    if g.stride == 1 {
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in dst.iter_mut().step_by(g.stride).zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let [n, cin, h, wd] = x.shape();
    let [cout, wcin, k, _] = w.shape();
    assert_eq!(cin, wcin, "conv input channels");
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let p = g.ho * g.wo;
    let kk = cin * k * k;
    let mut out = Tensor::zeros([n, cout, g.ho, g.wo]);
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.cols_len()] };
    for i in 0..n {
        let xi = x.item(i);
        let src: &[f32] = if g.is_pointwise() {
            xi
        } else {
            im2col(xi, &g, &mut cols);
            &cols
        };
        let oi = out.item_mut(i);
        if let Some(b) = b {
            for (co, chunk) in oi.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[co]);
            }
            gemm(cout, kk, p, w.data(), false, src, false, 1.0, oi);
        } else {
            gemm(cout, kk, p, w.data(), false, src, false, 0.0, oi);
        }
    }
    out
}

/// Returns `(dx, dw, db)`; each is only computed when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Tensor>, Option<Tensor>, Option<Tensor>) {
    let [n, cin, h, wd] = x.shape();
    let [cout, _, k, _] = w.shape();
    let g = ConvGeom::new(cin, h, wd, k, stride, pad);
    let p = g.ho * g.wo;
    let kk = cin * k * k;
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = want_dw.then(|| Tensor::zeros(w.shape()));
    let mut db = want_db.then(|| Tensor::zeros([1, cout, 1, 1]));
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.cols_len()] };
    let mut dcols = if g.is_pointwise() || !want_dx { Vec::new() } else { vec![0.0; g.cols_len()] };
    for i in 0..n {
        let dyi = dy.item(i);
        if let Some(db) = db.as_mut() {
            for (co, chunk) in dyi.chunks(p).enumerate() {
                db.data_mut()[co] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xi = x.item(i);
            let src: &[f32] = if g.is_pointwise() {
                xi
            } else {
                im2col(xi, &g, &mut cols);
                &cols
            };
            // dW (cout×kk) += dY (cout×p) · colsᵀ (p×kk)
            gemm(cout, p, kk, dyi, false, src, true, 1.0, dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            let dxi = dx.item_mut(i);
            if g.is_pointwise() {
                gemm(kk, cout, p, w.data(), true, dyi, false, 0.0, dxi);
            } else {
                gemm(kk, cout, p, w.data(), true, dyi, false, 0.0, &mut dcols);
                col2im(&dcols, &g, dxi);
            }
        }
    }
    (dx, dw, db)
}

pub(crate) struct GroupNormCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) const GN_EPS: f64 = 1e-5;

pub(crate) fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> (Tensor, GroupNormCache) {
    let [n, c, h, w] = x.shape();
    let cpg = c / groups;
    let span = cpg * h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut cache = GroupNormCache {
        mean: vec![0.0; n * groups],
        rstd: vec![0.0; n * groups],
    };
    for i in 0..n {
        for g in 0..groups {
            let off = i * c * h * w + g * span;
            let xs = &x.data()[off..off + span];
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
            let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / span as f64;
            let rstd = 1.0 / (var + GN_EPS).sqrt();
            cache.mean[i * groups + g] = mean;
            cache.rstd[i * groups + g] = rstd;
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let (ga, be) = (gamma.data()[ch] as f64, beta.data()[ch] as f64);
                let o = off + cc * h * w;
                for j in o..o + h * w {
                    out.data_mut()[j] = (((x.data()[j] as f64) - mean) * rstd * ga + be) as f32;
                }
            }
        }
    }
    (out, cache)
}

pub(crate) fn group_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    dy: &Tensor,
    groups: usize,
    cache: &GroupNormCache,
) -> (Tensor, Tensor, Tensor) {
    let [n, c, h, w] = x.shape();
    let cpg = c / groups;
    let hw = h * w;
    let span = cpg * hw;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for i in 0..n {
        for g in 0..groups {
            let off = i * c * hw + g * span;
            let (mean, rstd) = (cache.mean[i * groups + g], cache.rstd[i * groups + g]);
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for cc in 0..cpg {
                let ch = g * cpg + cc;
                let ga = gamma.data()[ch] as f64;
                for j in off + cc * hw..off + (cc + 1) * hw {
                    let xh = (x.data()[j] as f64 - mean) * rstd;
                    let d = dy.data()[j] as f64;
                    dgamma[ch] += d * xh;
                    dbeta[ch] += d;
                    sum_dxh += d * ga;
                    sum_dxh_xh += d * ga * xh;
                }
            }
            let m1 = sum_dxh / span as f64;
            let m2 = sum_dxh_xh / span as f64;
            for cc in 0..cpg {
                let ga = gamma.data()[g * cpg + cc] as f64;
                for j in off + cc * hw..off + (cc + 1) * hw {
                    let xh = (x.data()[j] as f64 - mean) * rstd;
                    let dxh = dy.data()[j] as f64 * ga;
                    dx.data_mut()[j] = (rstd * (dxh - m1 - xh * m2)) as f32;
                }
            }
        }
    }
    let to_t = |v: Vec<f64>| {
        Tensor::from_vec([1, c, 1, 1], v.into_iter().map(|x| x as f32).collect()).unwrap()
    };
    (dx, to_t(dgamma), to_t(dbeta))
}

/// Softmax along the channel axis of a `d×n` row-major block (per column).
pub(crate) fn softmax_columns(x: &[f32], d: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; d * n];
    for p in 0..n {
        let mut m = f32::NEG_INFINITY;
        for i in 0..d {
            m = m.max(x[i * n + p]);
        }
        let mut s = 0.0f64;
        for i in 0..d {
            let e = ((x[i * n + p] - m) as f64).exp();
            out[i * n + p] = e as f32;
            s += e;
        }
        for i in 0..d {
            out[i * n + p] = (out[i * n + p] as f64 / s) as f32;
        }
    }
    out
}

/// Softmax along each row of an `r×n` row-major block.
pub(crate) fn softmax_rows(x: &[f32], r: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; r * n];
    for i in 0..r {
        let row = &x[i * n..(i + 1) * n];
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut s = 0.0f64;
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
            let e = ((v - m) as f64).exp();
            *o = e as f32;
            s += e;
        }
        for o in &mut out[i * n..(i + 1) * n] {
            *o = (*o as f64 / s) as f32;
        }
    }
    out
}

/// Backward of a column softmax: `dx = y ⊙ (dy − Σ_col y ⊙ dy)`.
fn softmax_columns_backward(y: &[f32], dy: &[f32], d: usize, n: usize) -> Vec<f32> {
    let mut dx = vec![0.0; d * n];
    for p in 0..n {
        let dot: f64 = (0..d).map(|i| y[i * n + p] as f64 * dy[i * n + p] as f64).sum();
        for i in 0..d {
            dx[i * n + p] = (y[i * n + p] as f64 * (dy[i * n + p] as f64 - dot)) as f32;
        }
    }
    dx
}

fn softmax_rows_backward(y: &[f32], dy: &[f32], r: usize, n: usize) -> Vec<f32> {
    let mut dx = vec![0.0; r * n];
    for i in 0..r {
        let s = i * n..(i + 1) * n;
        let dot: f64 = y[s.clone()].iter().zip(&dy[s.clone()]).map(|(&a, &b)| a as f64 * b as f64).sum();
        for j in s {
            dx[j] = (y[j] as f64 * (dy[j] as f64 - dot)) as f32;
        }
    }
    dx
}

pub(crate) struct LinearAttentionCache {
    pub q_hat: Vec<f32>,
    pub k_hat: Vec<f32>,
    pub a: Vec<f32>,
}

/// Linear-memory cross-attention for a batch.
///
/// `q` is `[N, d, hq, wq]`; `k` and `v` are `[N, d, hk, wk]`. With
/// `q̂ = softmax_channels(q)`, `k̂ = softmax_spatial(k)`, `A = k̂·vᵀ` (d×d),
/// the output is `Aᵀ·q̂` reshaped to the query grid.
pub fn linear_attention_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    linear_attention_forward_cached(q, k, v).0
}

pub(crate) fn linear_attention_forward_cached(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> (Tensor, LinearAttentionCache) {
    let [n, d, hq, wq] = q.shape();
    let nq = hq * wq;
    let nk = k.h() * k.w();
    let mut out = Tensor::zeros(q.shape());
    let mut cache = LinearAttentionCache {
        q_hat: Vec::with_capacity(n * d * nq),
        k_hat: Vec::with_capacity(n * d * nk),
        a: Vec::with_capacity(n * d * d),
    };
    for i in 0..n {
        let q_hat = softmax_columns(q.item(i), d, nq);
        let k_hat = softmax_rows(k.item(i), d, nk);
        let mut a = vec![0.0; d * d];
        // A (d×d) = k̂ (d×nk) · vᵀ (nk×d)
        gemm(d, nk, d, &k_hat, false, v.item(i), true, 0.0, &mut a);
        // O (d×nq) = Aᵀ (d×d) · q̂ (d×nq)
        gemm(d, d, nq, &a, true, &q_hat, false, 0.0, out.item_mut(i));
        cache.q_hat.extend_from_slice(&q_hat);
        cache.k_hat.extend_from_slice(&k_hat);
        cache.a.extend_from_slice(&a);
    }
    (out, cache)
}

pub(crate) fn linear_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dy: &Tensor,
    cache: &LinearAttentionCache,
) -> (Tensor, Tensor, Tensor) {
    let [n, d, hq, wq] = q.shape();
    let nq = hq * wq;
    let nk = k.h() * k.w();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    for i in 0..n {
        let q_hat = &cache.q_hat[i * d * nq..(i + 1) * d * nq];
        let k_hat = &cache.k_hat[i * d * nk..(i + 1) * d * nk];
        let a = &cache.a[i * d * d..(i + 1) * d * d];
        let dyi = dy.item(i);
        let mut da = vec![0.0; d * d];
        // dA (d×d) = q̂ (d×nq) · dOᵀ (nq×d)
        gemm(d, nq, d, q_hat, false, dyi, true, 0.0, &mut da);
        let mut dq_hat = vec![0.0; d * nq];
        gemm(d, d, nq, a, false, dyi, false, 0.0, &mut dq_hat);
        let mut dk_hat = vec![0.0; d * nk];
        gemm(d, d, nk, &da, false, v.item(i), false, 0.0, &mut dk_hat);
        gemm(d, d, nk, &da, true, k_hat, false, 0.0, dv.item_mut(i));
        dq.item_mut(i)
            .copy_from_slice(&softmax_columns_backward(q_hat, &dq_hat, d, nq));
        dk.item_mut(i)
            .copy_from_slice(&softmax_rows_backward(k_hat, &dk_hat, d, nk));
    }
    (dq, dk, dv)
}

/// Standard scaled dot-product self-attention over spatial positions.
/// `q`, `k`, `v` are `[N, d, h, w]`; returns `[N, d, h, w]`.
pub fn softmax_attention_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    softmax_attention_forward_cached(q, k, v).0
}

pub(crate) fn softmax_attention_forward_cached(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> (Tensor, Vec<f32>) {
    let [n, d, h, w] = q.shape();
    let np = h * w;
    let scale = 1.0 / (d as f32).sqrt();
    let mut out = Tensor::zeros(q.shape());
    let mut probs = Vec::with_capacity(n * np * np);
    let mut s = vec![0.0; np * np];
    for i in 0..n {
        // S (np×np) = qᵀ (np×d) · k (d×np)
        gemm(np, d, np, q.item(i), true, k.item(i), false, 0.0, &mut s);
        for v in s.iter_mut() {
            *v *= scale;
        }
        let p = softmax_rows(&s, np, np);
        // out (d×np) = v (d×np) · Pᵀ (np×np)
        gemm(d, np, np, v.item(i), false, &p, true, 0.0, out.item_mut(i));
        probs.extend_from_slice(&p);
    }
    (out, probs)
}

pub(crate) fn softmax_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dy: &Tensor,
    probs: &[f32],
) -> (Tensor, Tensor, Tensor) {
    let [n, d, h, w] = q.shape();
    let np = h * w;
    let scale = 1.0 / (d as f32).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![0.0; np * np];
    for i in 0..n {
        let p = &probs[i * np * np..(i + 1) * np * np];
        let dyi = dy.item(i);
        gemm(d, np, np, dyi, false, p, false, 0.0, dv.item_mut(i));
        // dP (np×np) = dYᵀ (np×d) · v (d×np)
        gemm(np, d, np, dyi, true, v.item(i), false, 0.0, &mut dp);
        let mut ds = softmax_rows_backward(p, &dp, np, np);
        for x in ds.iter_mut() {
            *x *= scale;
        }
        // dq (d×np) = k (d×np) · dSᵀ ; dk (d×np) = q (d×np) · dS
        gemm(d, np, np, k.item(i), false, &ds, true, 0.0, dq.item_mut(i));
        gemm(d, np, np, q.item(i), false, &ds, false, 0.0, dk.item_mut(i));
    }
    (dq, dk, dv)
}

pub(crate) fn avg_pool(x: &Tensor, f: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / f, w / f);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let inv = 1.0 / (f * f) as f64;
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut s = 0.0f64;
                for dy in 0..f {
                    for dx in 0..f {
                        s += src[(oy * f + dy) * w + ox * f + dx] as f64;
                    }
                }
                out.data_mut()[nc * ho * wo + oy * wo + ox] = (s * inv) as f32;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(dy: &Tensor, f: usize, in_shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = in_shape;
    let (ho, wo) = (h / f, w / f);
    let mut dx = Tensor::zeros(in_shape);
    let inv = 1.0 / (f * f) as f32;
    for nc in 0..n * c {
        for y in 0..ho * f {
            for x in 0..wo * f {
                dx.data_mut()[nc * h * w + y * w + x] = dy.data()[nc * ho * wo + (y / f) * wo + x / f] * inv;
            }
        }
    }
    dx
}

pub(crate) fn upsample_nearest(x: &Tensor, f: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h * f, w * f);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for nc in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                out.data_mut()[nc * ho * wo + y * wo + xx] = x.data()[nc * h * w + (y / f) * w + xx / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_nearest_backward(dy: &Tensor, f: usize, in_shape: [usize; 4]) -> Tensor {
    let [n, c, h, w] = in_shape;
    let (ho, wo) = (h * f, w * f);
    let mut dx = Tensor::zeros(in_shape);
    for nc in 0..n * c {
        for y in 0..ho {
            for xx in 0..wo {
                dx.data_mut()[nc * h * w + (y / f) * w + xx / f] += dy.data()[nc * ho * wo + y * wo + xx];
            }
        }
    }
    dx
}
