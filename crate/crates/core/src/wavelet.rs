//! Single-level orthonormal Haar (DB1) filter bank.
//!
//! Taps are `(1/√2, 1/√2)` lowpass and `(1/√2, −1/√2)` highpass. The first
//! letter of a subband names the filter applied along the vertical axis
//! (combining rows), the second the filter along the horizontal axis
//! (combining columns). For a 2×2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2
//! LH = (a − b + c − d) / 2   horizontal detail (responds to vertical edges)
//! HL = (a + b − c − d) / 2   vertical detail (responds to horizontal edges)
//! HH = (a − b − c + d) / 2
//! ```

use crate::error::{Error, Result};
use crate::tensorio::ImageTensor;

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands {
    pub ll: ImageTensor,
    pub lh: ImageTensor,
    pub hl: ImageTensor,
    pub hh: ImageTensor,
}

impl WaveletBands {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.ll.dims()
    }

    fn check(&self) -> Result<()> {
        let d = self.ll.dims();
        if [&self.lh, &self.hl, &self.hh].iter().any(|b| b.dims() != d) {
            return Err(Error::invalid(format!(
                "subband dims disagree: LL {:?}, LH {:?}, HL {:?}, HH {:?}",
                d,
                self.lh.dims(),
                self.hl.dims(),
                self.hh.dims()
            )));
        }
        Ok(())
    }

    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .flat_map(|b| b.data())
            .map(|&v| (v as f64).powi(2))
            .sum()
    }
}

pub fn dwt_db1(x: &ImageTensor) -> Result<WaveletBands> {
    let (c, h, w) = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(format!(
            "DB1 analysis needs even dims, got {h}x{w}"
        )));
    }
    let (h2, w2) = (h / 2, w / 2);
    let mut ll = ImageTensor::zeros(c, h2, w2).with_range(x.range_hint);
    let mut lh = ll.clone();
    let mut hl = ll.clone();
    let mut hh = ll.clone();
    for band in 0..c {
        let src = x.band(band);
        for y in 0..h2 {
            for xx in 0..w2 {
                let a = src[2 * y * w + 2 * xx] as f64;
                let b = src[2 * y * w + 2 * xx + 1] as f64;
                let cc = src[(2 * y + 1) * w + 2 * xx] as f64;
                let d = src[(2 * y + 1) * w + 2 * xx + 1] as f64;
                let o = y * w2 + xx;
                ll.band_mut(band)[o] = (0.5 * (a + b + cc + d)) as f32;
                lh.band_mut(band)[o] = (0.5 * (a - b + cc - d)) as f32;
                hl.band_mut(band)[o] = (0.5 * (a + b - cc - d)) as f32;
                hh.band_mut(band)[o] = (0.5 * (a - b - cc + d)) as f32;
            }
        }
    }
    Ok(WaveletBands { ll, lh, hl, hh })
}

pub fn idwt_db1(b: &WaveletBands) -> Result<ImageTensor> {
    b.check()?;
    let (c, h2, w2) = b.dims();
    let (h, w) = (2 * h2, 2 * w2);
    let mut out = ImageTensor::zeros(c, h, w).with_range(b.ll.range_hint);
    for band in 0..c {
        let (ll, lh, hl, hh) = (b.ll.band(band), b.lh.band(band), b.hl.band(band), b.hh.band(band));
        let dst = out.band_mut(band);
        for y in 0..h2 {
            for x in 0..w2 {
                let i = y * w2 + x;
                let (s, p, q, r) = (ll[i] as f64, lh[i] as f64, hl[i] as f64, hh[i] as f64);
                dst[2 * y * w + 2 * x] = (0.5 * (s + p + q + r)) as f32;
                dst[2 * y * w + 2 * x + 1] = (0.5 * (s - p + q - r)) as f32;
                dst[(2 * y + 1) * w + 2 * x] = (0.5 * (s + p - q - r)) as f32;
                dst[(2 * y + 1) * w + 2 * x + 1] = (0.5 * (s - p - q + r)) as f32;
            }
        }
    }
    Ok(out)
}
