//! A small tape-based reverse-mode autodiff engine over NCHW `f32` tensors.
//!
//! Only the operations the denoiser needs are provided. All kernels are
//! single-threaded and reduce in a fixed order, so forward and backward
//! passes are bitwise reproducible.

pub mod gradcheck;
mod graph;
mod kernels;
mod params;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{linear_attention_forward, softmax_attention_forward};
pub use params::{conv, conv_shapes, group_norm, init_param, kaiming_normal, norm_shapes, ParamStore};

use crate::error::{Error, Result};
use crate::tensorio::ImageTensor;

/// Dense 4-D tensor in `[N, C, H, W]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], v: f32) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Elements of one batch item.
    pub fn item(&self, n: usize) -> &[f32] {
        let s = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f32] {
        let s = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * s..(n + 1) * s]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Stacks images of identical dims into a batch.
    pub fn from_images(images: &[&ImageTensor]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::invalid("empty image batch"))?;
        let (c, h, w) = first.dims();
        let mut data = Vec::with_capacity(images.len() * c * h * w);
        for im in images {
            if im.dims() != (c, h, w) {
                return Err(Error::invalid(format!(
                    "batch dims disagree: {:?} vs {:?}",
                    im.dims(),
                    (c, h, w)
                )));
            }
            data.extend_from_slice(im.data());
        }
        Ok(Tensor {
            shape: [images.len(), c, h, w],
            data,
        })
    }

    pub fn from_image(image: &ImageTensor) -> Self {
        let (c, h, w) = image.dims();
        Tensor {
            shape: [1, c, h, w],
            data: image.data().to_vec(),
        }
    }

    /// Splits the batch back into images.
    pub fn to_images(&self) -> Vec<ImageTensor> {
        let [n, c, h, w] = self.shape;
        (0..n)
            .map(|i| ImageTensor::new(c, h, w, self.item(i).to_vec()).expect("shape checked"))
            .collect()
    }
}
