//! Raster container, the `.ten` binary format and dataset manifests.
//!
//! A `.ten` file is laid out as:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TEN1"
//! 4       1     dtype code (0 = f32)
//! 5       1     ndim (always 3)
//! 6       12    dims C, H, W as little-endian u32
//! 18      4·N   N = C·H·W little-endian f32, band-major, row-major
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TEN1";
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 18;

/// Declared nominal value interval of a raster.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub lo: f32,
    pub hi: f32,
}

impl Default for ValueRange {
    fn default() -> Self {
        ValueRange { lo: 0.0, hi: 1.0 }
    }
}

impl ValueRange {
    pub fn width(&self) -> f32 {
        self.hi - self.lo
    }
}

/// Dense multi-band raster stored band-major (C, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    bands: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    pub range_hint: ValueRange,
}

impl ImageTensor {
    pub fn new(bands: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if bands == 0 || height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "tensor dims must be positive, got {bands}x{height}x{width}"
            )));
        }
        if data.len() != bands * height * width {
            return Err(Error::invalid(format!(
                "data length {} does not match {bands}x{height}x{width}",
                data.len()
            )));
        }
        Ok(ImageTensor {
            bands,
            height,
            width,
            data,
            range_hint: ValueRange::default(),
        })
    }

    pub fn zeros(bands: usize, height: usize, width: usize) -> Self {
        Self::filled(bands, height, width, 0.0)
    }

    pub fn filled(bands: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(bands > 0 && height > 0 && width > 0, "tensor dims must be positive");
        ImageTensor {
            bands,
            height,
            width,
            data: vec![value; bands * height * width],
            range_hint: ValueRange::default(),
        }
    }

    pub fn from_fn(
        bands: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(bands * height * width);
        for c in 0..bands {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        ImageTensor {
            bands,
            height,
            width,
            data,
            range_hint: ValueRange::default(),
        }
    }

    pub fn with_range(mut self, range: ValueRange) -> Self {
        self.range_hint = range;
        self
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.bands, self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn band(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn band_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_dims(&self, other: &ImageTensor) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_dims(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone_shape()
        }
    }

    /// Elementwise combination; panics on dim mismatch.
    pub fn zip_map(&self, other: &ImageTensor, f: impl Fn(f32, f32) -> f32) -> ImageTensor {
        assert_eq!(self.dims(), other.dims(), "zip_map dim mismatch");
        ImageTensor {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            ..self.clone_shape()
        }
    }

    pub fn add(&self, other: &ImageTensor) -> ImageTensor {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &ImageTensor) -> ImageTensor {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f32) -> ImageTensor {
        self.map(|v| v * k)
    }

    pub fn clip_to_range(&self) -> ImageTensor {
        let ValueRange { lo, hi } = self.range_hint;
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks tensors along the band axis. All inputs must share H, W.
    pub fn concat_bands(parts: &[&ImageTensor]) -> Result<ImageTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::new();
        let mut bands = 0;
        for p in parts {
            if p.height != h || p.width != w {
                return Err(Error::invalid(format!(
                    "concat spatial mismatch: {}x{} vs {h}x{w}",
                    p.height, p.width
                )));
            }
            bands += p.bands;
            data.extend_from_slice(&p.data);
        }
        Ok(ImageTensor {
            bands,
            height: h,
            width: w,
            data,
            range_hint: first.range_hint,
        })
    }

    fn clone_shape(&self) -> ImageTensor {
        ImageTensor {
            bands: self.bands,
            height: self.height,
            width: self.width,
            data: Vec::new(),
            range_hint: self.range_hint,
        }
    }
}

/// Serialises a tensor in `.ten` layout into a byte buffer.
pub fn encode_tensor(t: &ImageTensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.push(DTYPE_F32);
    buf.push(3);
    for d in [t.bands, t.height, t.width] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::parse("magic", "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::parse("header", "truncated header"));
    }
    if bytes[4] != DTYPE_F32 {
        return Err(Error::parse("dtype", format!("unsupported dtype code {}", bytes[4])));
    }
    if bytes[5] != 3 {
        return Err(Error::parse("ndim", format!("expected ndim 3, got {}", bytes[5])));
    }
    let dim = |i: usize| {
        let o = 6 + 4 * i;
        u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
    };
    let (c, h, w) = (dim(0), dim(1), dim(2));
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::parse("dims", format!("zero dimension {c}x{h}x{w}")));
    }
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| Error::parse("dims", "dimension product overflows"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < 4 * n {
        return Err(Error::parse(
            "payload",
            format!("truncated: expected {} bytes, found {}", 4 * n, payload.len()),
        ));
    }
    if payload.len() > 4 * n {
        return Err(Error::parse(
            "payload",
            format!("{} trailing bytes", payload.len() - 4 * n),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::parse(
                "payload",
                format!("non-finite value {v} at element {i}"),
            ));
        }
        data.push(v);
    }
    ImageTensor::new(c, h, w, data)
}

pub fn write_tensor(t: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode_tensor(t))
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One aligned group of files. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub pan: PathBuf,
    pub lrms: PathBuf,
    pub ms: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub split: Split,
    pub scale_ratio: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are resolved against; not serialised.
    #[serde(skip)]
    pub root: PathBuf,
}

/// The four rasters of one manifest entry.
#[derive(Clone, Debug)]
pub struct EntryTensors {
    pub pan: ImageTensor,
    pub lrms: ImageTensor,
    pub ms: ImageTensor,
    pub gt: Option<ImageTensor>,
}

impl DatasetManifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load_entry(&self, index: usize) -> Result<EntryTensors> {
        let e = self.entries.get(index).ok_or_else(|| Error::Manifest {
            index,
            msg: format!("out of range (manifest has {} entries)", self.entries.len()),
        })?;
        let wrap = |err: Error| Error::Manifest {
            index,
            msg: err.to_string(),
        };
        let pan = read_tensor(self.resolve(&e.pan)).map_err(wrap)?;
        let lrms = read_tensor(self.resolve(&e.lrms)).map_err(wrap)?;
        let ms = read_tensor(self.resolve(&e.ms)).map_err(wrap)?;
        let gt = match &e.gt {
            Some(p) => Some(read_tensor(self.resolve(p)).map_err(wrap)?),
            None => None,
        };
        Ok(EntryTensors { pan, lrms, ms, gt })
    }

    /// Checks the dimension invariants of one loaded entry.
    pub fn check_entry(&self, index: usize, t: &EntryTensors) -> Result<()> {
        let r = self.scale_ratio;
        let err = |msg: String| Error::Manifest { index, msg };
        if t.pan.bands() != 1 {
            return Err(err(format!("pan must have 1 band, got {}", t.pan.bands())));
        }
        let (ph, pw) = (t.pan.height(), t.pan.width());
        if (t.lrms.height(), t.lrms.width()) != (ph, pw) {
            return Err(err(format!(
                "dimension mismatch: lrms expected {ph}x{pw}, got {}x{}",
                t.lrms.height(),
                t.lrms.width()
            )));
        }
        if t.ms.height() * r != ph || t.ms.width() * r != pw {
            return Err(err(format!(
                "dimension mismatch: ms expected {}x{} (pan {ph}x{pw} / ratio {r}), got {}x{}",
                ph as f64 / r as f64,
                pw as f64 / r as f64,
                t.ms.height(),
                t.ms.width()
            )));
        }
        if t.ms.bands() != t.lrms.bands() {
            return Err(err(format!(
                "band mismatch: ms has {} bands, lrms has {}",
                t.ms.bands(),
                t.lrms.bands()
            )));
        }
        if let Some(gt) = &t.gt {
            if gt.dims() != t.lrms.dims() {
                return Err(err(format!(
                    "dimension mismatch: gt expected {:?}, got {:?}",
                    t.lrms.dims(),
                    gt.dims()
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Loads a JSON manifest and validates every entry eagerly.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
    if m.scale_ratio == 0 {
        return Err(Error::invalid("scale_ratio must be positive"));
    }
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    for i in 0..m.entries.len() {
        let t = m.load_entry(i)?;
        m.check_entry(i, &t)?;
    }
    Ok(m)
}
