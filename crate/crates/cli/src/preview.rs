//! 8-bit PNG previews. Only for looking at; `.ten` files hold the data.
//!
//! Colour previews map bands 0, 1, 2 to R, G, B (a single band for images
//! with fewer than three), each stretched independently so its own minimum
//! is 0 and maximum is 255. Error maps show the band-mean absolute error per
//! pixel, scaled so the image's largest error is 255.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::Context;
use fusediff_core::ImageTensor;

pub fn stretch(band: &[f32]) -> Vec<u8> {
    let (lo, hi) = band
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    band.iter()
        .map(|&v| {
            if span > 0.0 && span.is_finite() {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn colour(img: &ImageTensor) -> (png::ColorType, Vec<u8>) {
    if img.bands() < 3 {
        return (png::ColorType::Grayscale, stretch(img.band(0)));
    }
    let planes: Vec<Vec<u8>> = (0..3).map(|c| stretch(img.band(c))).collect();
    let n = img.height() * img.width();
    let mut out = Vec::with_capacity(3 * n);
    for i in 0..n {
        out.extend(planes.iter().map(|p| p[i]));
    }
    (png::ColorType::Rgb, out)
}

pub fn error_map(fused: &ImageTensor, gt: &ImageTensor) -> Vec<u8> {
    let n = fused.height() * fused.width();
    let c = fused.bands() as f32;
    let mut err = vec![0.0f32; n];
    for b in 0..fused.bands() {
        for (e, (f, g)) in err.iter_mut().zip(fused.band(b).iter().zip(gt.band(b))) {
            *e += (f - g).abs() / c;
        }
    }
    let max = err.iter().cloned().fold(0.0f32, f32::max);
    err.iter()
        .map(|&e| if max > 0.0 { (e / max * 255.0).round() as u8 } else { 0 })
        .collect()
}

pub fn write_png(path: &Path, width: usize, height: usize, colour: png::ColorType, data: &[u8]) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(colour);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(data)?;
    w.finish()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stretch_spans_full_range() {
        assert_eq!(stretch(&[1.0, 3.0, 5.0]), vec![0, 128, 255]);
        assert_eq!(stretch(&[0.5; 4]), vec![0; 4]);
    }

    #[test]
    fn error_map_scales_to_peak() {
        let gt = ImageTensor::zeros(2, 1, 3);
        let f = ImageTensor::new(2, 1, 3, vec![0.0, 0.1, 0.2, 0.0, 0.1, 0.2]).unwrap();
        assert_eq!(error_map(&f, &gt), vec![0, 128, 255]);
        assert_eq!(error_map(&gt, &gt), vec![0; 3]);
    }

    #[test]
    fn colour_layouts() {
        let img = ImageTensor::from_fn(4, 2, 2, |c, y, x| (c + y + x) as f32);
        let (t, d) = colour(&img);
        assert_eq!(t, png::ColorType::Rgb);
        assert_eq!(d.len(), 12);
        let (t, d) = colour(&ImageTensor::zeros(1, 2, 2));
        assert_eq!((t, d.len()), (png::ColorType::Grayscale, 4));
    }
}
