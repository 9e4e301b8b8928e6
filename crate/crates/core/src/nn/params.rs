use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable tensors, iterated in key order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(name, "parameter missing"))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// A store with the same keys and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }
}

/// Kaiming (He) normal initialisation with fan-in `cin·k·k` for a
/// `[cout, cin, k, k]` weight.
pub fn kaiming_normal(shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::from_vec(shape, data).expect("shape product")
}

/// Initial value for a parameter, chosen by its name suffix: `.weight`
/// gets Kaiming normal, `.gamma` ones, everything else zeros.
pub fn init_param(name: &str, shape: [usize; 4], rng: &mut impl Rng) -> Tensor {
    if name.ends_with(".weight") {
        kaiming_normal(shape, rng)
    } else if name.ends_with(".gamma") {
        Tensor::filled(shape, 1.0)
    } else {
        Tensor::zeros(shape)
    }
}

/// Shapes of a convolution layer's weight and bias under `prefix`.
pub fn conv_shapes(prefix: &str, cin: usize, cout: usize, k: usize) -> [(String, [usize; 4]); 2] {
    [
        (format!("{prefix}.weight"), [cout, cin, k, k]),
        (format!("{prefix}.bias"), [1, cout, 1, 1]),
    ]
}

/// Shapes of a group-norm layer's affine parameters under `prefix`.
pub fn norm_shapes(prefix: &str, c: usize) -> [(String, [usize; 4]); 2] {
    [
        (format!("{prefix}.gamma"), [1, c, 1, 1]),
        (format!("{prefix}.beta"), [1, c, 1, 1]),
    ]
}

/// Convolution `prefix.weight` / `prefix.bias` applied to `x`, with "same"
/// padding. A channel mismatch is reported against `prefix`.
pub fn conv(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let wname = format!("{prefix}.weight");
    let w = params.get(&wname)?;
    let [_, cin, k, _] = w.shape();
    let xc = g.value(x).c();
    if xc != cin {
        return Err(Error::config(
            prefix,
            format!("expects {cin} input channels, got {xc}"),
        ));
    }
    let wv = g.param(&wname, w);
    let bname = format!("{prefix}.bias");
    let bv = g.param(&bname, params.get(&bname)?);
    Ok(g.conv2d(x, wv, Some(bv), stride, k / 2))
}

/// Group normalisation with `prefix.gamma` / `prefix.beta`.
pub fn group_norm(g: &mut Graph, params: &ParamStore, prefix: &str, x: Var, groups: usize) -> Result<Var> {
    let c = g.value(x).c();
    if c % groups != 0 {
        return Err(Error::config(
            prefix,
            format!("{c} channels do not split into {groups} groups"),
        ));
    }
    let gname = format!("{prefix}.gamma");
    let gamma = params.get(&gname)?;
    if gamma.c() != c {
        return Err(Error::config(
            prefix,
            format!("expects {} channels, got {c}", gamma.c()),
        ));
    }
    let gv = g.param(&gname, gamma);
    let bname = format!("{prefix}.beta");
    let bv = g.param(&bname, params.get(&bname)?);
    Ok(g.group_norm(x, gv, bv, groups))
}
