//! Sequential layer stacks with an explicit activation tape.
//!
//! `forward` borrows the stack immutably and records everything the backward
//! pass needs. Batch-norm running statistics are only folded in by
//! [`Stack::commit_stats`], so a caller decides whether a train-mode pass is
//! allowed to move them.

use std::collections::HashMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::param::{Matrix, ParamTensor};
use super::rng::RngState;
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    BatchNorm,
    Relu,
    Dropout { rate: f64 },
    GaussianNoise { std: f64 },
    Softmax,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub l2: f64,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Self::dense_l2(in_dim, out_dim, 0.0)
    }

    pub fn dense_l2(in_dim: usize, out_dim: usize, l2: f64) -> Self {
        Self {
            kind: LayerKind::Dense,
            in_dim,
            out_dim,
            l2,
        }
    }

    fn same(kind: LayerKind, dim: usize) -> Self {
        Self {
            kind,
            in_dim: dim,
            out_dim: dim,
            l2: 0.0,
        }
    }

    pub fn batchnorm(dim: usize) -> Self {
        Self::same(LayerKind::BatchNorm, dim)
    }

    pub fn relu(dim: usize) -> Self {
        Self::same(LayerKind::Relu, dim)
    }

    pub fn dropout(dim: usize, rate: f64) -> Self {
        Self::same(LayerKind::Dropout { rate }, dim)
    }

    pub fn gaussian_noise(dim: usize, std: f64) -> Self {
        Self::same(LayerKind::GaussianNoise { std }, dim)
    }

    pub fn softmax(dim: usize) -> Self {
        Self::same(LayerKind::Softmax, dim)
    }

    pub fn identity(dim: usize) -> Self {
        Self::same(LayerKind::Identity, dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!("zero-width layer {self:?}")));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config(format!("negative l2 in {self:?}")));
        }
        match self.kind {
            LayerKind::Dense => {}
            _ if self.in_dim != self.out_dim => {
                return Err(Error::Config(format!("{self:?} must preserve width")))
            }
            LayerKind::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")))
            }
            LayerKind::GaussianNoise { std } if !(std >= 0.0) => {
                return Err(Error::Config(format!("noise std {std} is negative")))
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    Dense {
        w: ParamTensor,
        b: ParamTensor,
        l2: f64,
    },
    BatchNorm {
        gamma: ParamTensor,
        beta: ParamTensor,
        running_mean: Array1<f64>,
        running_var: Array1<f64>,
    },
    Relu,
    Dropout(f64),
    GaussianNoise(f64),
    Softmax,
    Identity,
}

#[derive(Debug)]
enum Cache {
    Dense { x: Matrix },
    BatchNorm {
        xhat: Matrix,
        inv_std: Array1<f64>,
        batch_stats: Option<(Array1<f64>, Array1<f64>)>,
    },
    Relu { y: Matrix },
    Dropout { mask: Option<Matrix> },
    Softmax { y: Matrix },
    Pass,
}

/// Activation record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    caches: Vec<Cache>,
    versions: Vec<u64>,
    mode: Mode,
    batch: usize,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Which gradients a backward pass produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backward {
    /// Write parameter gradients (otherwise they are left zeroed).
    pub param_grads: bool,
    /// Add the `2 * l2 * w` weight-decay term to dense kernels.
    pub l2: bool,
    /// Return the gradient with respect to the stack input.
    pub input_grad: bool,
}

impl Default for Backward {
    fn default() -> Self {
        Self {
            param_grads: true,
            l2: true,
            input_grad: true,
        }
    }
}

impl Backward {
    /// Only propagate to the input; parameters are frozen.
    pub fn input_only() -> Self {
        Self {
            param_grads: false,
            l2: false,
            input_grad: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
}

impl Stack {
    /// Build and initialize. Dense kernels feeding a ReLU (possibly through
    /// batch norm, dropout or noise) get He-uniform init, the rest
    /// Glorot-uniform; biases start at zero.
    pub fn build(specs: Vec<LayerSpec>, rng: &mut RngState) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("empty layer stack".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        for pair in specs.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config(format!(
                    "layer widths do not chain: {:?} -> {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = match spec.kind {
                LayerKind::Dense => {
                    let feeds_relu = specs[i + 1..]
                        .iter()
                        .map(|s| s.kind)
                        .find(|k| {
                            !matches!(
                                k,
                                LayerKind::BatchNorm
                                    | LayerKind::Dropout { .. }
                                    | LayerKind::GaussianNoise { .. }
                            )
                        })
                        == Some(LayerKind::Relu);
                    let limit = if feeds_relu {
                        (6.0 / spec.in_dim as f64).sqrt()
                    } else {
                        (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt()
                    };
                    let w = Matrix::from_shape_simple_fn((spec.in_dim, spec.out_dim), || {
                        rng.uniform_in(-limit, limit)
                    });
                    Layer::Dense {
                        w: ParamTensor::new(w),
                        b: ParamTensor::new(Matrix::zeros((1, spec.out_dim))),
                        l2: spec.l2,
                    }
                }
                LayerKind::BatchNorm => Layer::BatchNorm {
                    gamma: ParamTensor::new(Matrix::ones((1, spec.in_dim))),
                    beta: ParamTensor::new(Matrix::zeros((1, spec.in_dim))),
                    running_mean: Array1::zeros(spec.in_dim),
                    running_var: Array1::ones(spec.in_dim),
                },
                LayerKind::Relu => Layer::Relu,
                LayerKind::Dropout { rate } => Layer::Dropout(rate),
                LayerKind::GaussianNoise { std } => Layer::GaussianNoise(std),
                LayerKind::Softmax => Layer::Softmax,
                LayerKind::Identity => Layer::Identity,
            };
            layers.push(layer);
        }
        Ok(Self { specs, layers })
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn params(&self) -> Vec<&ParamTensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense { w, b, .. } => out.extend([w, b]),
                Layer::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense { w, b, .. } => out.extend([w, b]),
                Layer::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                _ => {}
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// `sum(l2 * ||W||^2)` over dense kernels.
    pub fn l2_penalty(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { w, l2, .. } if *l2 > 0.0 => {
                    l2 * w.value.iter().map(|v| v * v).sum::<f64>()
                }
                _ => 0.0,
            })
            .sum()
    }

    /// Overwrite gradients with those of [`Stack::l2_penalty`] alone.
    pub fn l2_grads(&mut self) {
        self.zero_grads();
        for layer in &mut self.layers {
            if let Layer::Dense { w, l2, .. } = layer {
                if *l2 > 0.0 {
                    w.grad.scaled_add(2.0 * *l2, &w.value);
                }
            }
        }
    }

    fn versions(&self) -> Vec<u64> {
        self.params().iter().map(|p| p.version()).collect()
    }

    pub fn forward(&self, x: &Matrix, mode: Mode, rng: &mut RngState) -> Result<(Matrix, Tape)> {
        if x.ncols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, stack expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        let batch = x.nrows();
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let (next, cache) = match layer {
                Layer::Dense { w, b, .. } => {
                    let mut y = h.dot(&w.value);
                    y += &b.value;
                    (y, Cache::Dense { x: h })
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let (mean, var, batch_stats) = match mode {
                        Mode::Train => {
                            let mean = h.mean_axis(Axis(0)).expect("nonempty batch");
                            let mut var = Array1::<f64>::zeros(h.ncols());
                            for row in h.rows() {
                                Zip::from(&mut var).and(&row).and(&mean).for_each(|v, &x, &m| {
                                    *v += (x - m) * (x - m)
                                });
                            }
                            var /= batch as f64;
                            (mean.clone(), var.clone(), Some((mean, var)))
                        }
                        Mode::Eval => (running_mean.clone(), running_var.clone(), None),
                    };
                    let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
                    let mut xhat = h;
                    for mut row in xhat.rows_mut() {
                        Zip::from(&mut row)
                            .and(&mean)
                            .and(&inv_std)
                            .for_each(|x, &m, &s| *x = (*x - m) * s);
                    }
                    let mut y = &xhat * &gamma.value;
                    y += &beta.value;
                    (
                        y,
                        Cache::BatchNorm {
                            xhat,
                            inv_std,
                            batch_stats,
                        },
                    )
                }
                Layer::Relu => {
                    let y = h.mapv(|v| v.max(0.0));
                    (y.clone(), Cache::Relu { y })
                }
                Layer::Dropout(rate) if mode == Mode::Train && *rate > 0.0 => {
                    let keep = 1.0 - rate;
                    let mask = Matrix::from_shape_simple_fn(h.raw_dim(), || {
                        if rng.bernoulli(keep) {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    (&h * &mask, Cache::Dropout { mask: Some(mask) })
                }
                Layer::Dropout(_) => (h, Cache::Dropout { mask: None }),
                Layer::GaussianNoise(std) if mode == Mode::Train && *std > 0.0 => {
                    let mut y = h;
                    y.mapv_inplace(|v| v + std * rng.normal());
                    (y, Cache::Pass)
                }
                Layer::GaussianNoise(_) | Layer::Identity => (h, Cache::Pass),
                Layer::Softmax => {
                    let y = softmax_rows(&h);
                    (y.clone(), Cache::Softmax { y })
                }
            };
            caches.push(cache);
            h = next;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("non-finite activation in forward pass".into()));
        }
        Ok((
            h,
            Tape {
                caches,
                versions: self.versions(),
                mode,
                batch,
            },
        ))
    }

    /// Fold the batch statistics recorded in a train-mode tape into the
    /// running averages.
    pub fn commit_stats(&mut self, tape: &Tape) {
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches) {
            if let (
                Layer::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                },
                Cache::BatchNorm {
                    batch_stats: Some((mean, var)),
                    ..
                },
            ) = (layer, cache)
            {
                Zip::from(&mut *running_mean)
                    .and(mean)
                    .for_each(|r, &m| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m);
                Zip::from(&mut *running_var)
                    .and(var)
                    .for_each(|r, &v| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v);
            }
        }
    }

    /// Train-mode forward that also commits batch statistics.
    pub fn forward_train(&mut self, x: &Matrix, rng: &mut RngState) -> Result<(Matrix, Tape)> {
        let (y, tape) = self.forward(x, Mode::Train, rng)?;
        self.commit_stats(&tape);
        Ok((y, tape))
    }

    /// Reverse pass. Parameter gradients are overwritten (never accumulated).
    /// Returns the input gradient when `opts.input_grad` is set.
    pub fn backward(&mut self, tape: Tape, upstream: &Matrix, opts: Backward) -> Result<Option<Matrix>> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::Tape("tape was recorded by a different stack".into()));
        }
        if tape.versions != self.versions() {
            return Err(Error::Tape("parameters changed since the forward pass".into()));
        }
        if upstream.dim() != (tape.batch, self.out_dim()) {
            return Err(Error::Shape(format!(
                "upstream gradient is {:?}, expected ({}, {})",
                upstream.dim(),
                tape.batch,
                self.out_dim()
            )));
        }
        self.zero_grads();
        let n = tape.batch as f64;
        let mut g = upstream.clone();
        for (i, (layer, cache)) in self
            .layers
            .iter_mut()
            .zip(tape.caches)
            .enumerate()
            .rev()
        {
            let need_dx = i > 0 || opts.input_grad;
            g = match (layer, cache) {
                (Layer::Dense { w, b, l2 }, Cache::Dense { x }) => {
                    if opts.param_grads {
                        general_mat_mul(1.0, &x.t(), &g, 0.0, &mut w.grad);
                        if opts.l2 && *l2 > 0.0 {
                            w.grad.scaled_add(2.0 * *l2, &w.value);
                        }
                        b.grad.assign(&g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if need_dx {
                        g.dot(&w.value.t())
                    } else {
                        Matrix::zeros((0, 0))
                    }
                }
                (
                    Layer::BatchNorm { gamma, beta, .. },
                    Cache::BatchNorm {
                        xhat,
                        inv_std,
                        batch_stats,
                    },
                ) => {
                    if opts.param_grads {
                        gamma
                            .grad
                            .assign(&(&g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                        beta.grad.assign(&g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    let dxhat = &g * &gamma.value;
                    if batch_stats.is_some() {
                        let sum_d = dxhat.sum_axis(Axis(0));
                        let sum_dx = (&dxhat * &xhat).sum_axis(Axis(0));
                        let mut dx = dxhat;
                        Zip::from(dx.rows_mut()).and(xhat.rows()).for_each(|mut d, xh| {
                            Zip::from(&mut d)
                                .and(&xh)
                                .and(&sum_d)
                                .and(&sum_dx)
                                .and(&inv_std)
                                .for_each(|d, &xh, &sd, &sdx, &is| {
                                    *d = is / n * (n * *d - sd - xh * sdx)
                                });
                        });
                        dx
                    } else {
                        dxhat * &inv_std
                    }
                }
                (Layer::Relu, Cache::Relu { y }) => {
                    Zip::from(&mut g)
                        .and(&y)
                        .for_each(|g, &y| if y <= 0.0 { *g = 0.0 });
                    g
                }
                (Layer::Dropout(_), Cache::Dropout { mask }) => match mask {
                    Some(m) => g * &m,
                    None => g,
                },
                (Layer::Softmax, Cache::Softmax { y }) => {
                    let dot = (&g * &y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    (g - &dot) * &y
                }
                (Layer::GaussianNoise(_) | Layer::Identity, Cache::Pass) => g,
                _ => return Err(Error::Tape("cache does not match layer kind".into())),
            };
        }
        Ok(opts.input_grad.then_some(g))
    }

    /// Named tensors including batch-norm running statistics, in a fixed order.
    pub fn state(&self) -> Vec<(String, Matrix)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense { w, b, .. } => {
                    out.push((format!("{i}.w"), w.value.clone()));
                    out.push((format!("{i}.b"), b.value.clone()));
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    out.push((format!("{i}.gamma"), gamma.value.clone()));
                    out.push((format!("{i}.beta"), beta.value.clone()));
                    out.push((format!("{i}.running_mean"), running_mean.clone().insert_axis(Axis(0))));
                    out.push((format!("{i}.running_var"), running_var.clone().insert_axis(Axis(0))));
                }
                _ => {}
            }
        }
        out
    }

    pub fn load_state(&mut self, state: &HashMap<String, Matrix>) -> Result<()> {
        let fetch = |name: String, shape: (usize, usize)| -> Result<Matrix> {
            let m = state
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if m.dim() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    m.dim()
                )));
            }
            Ok(m.clone())
        };
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Dense { w, b, .. } => {
                    w.set_value(fetch(format!("{i}.w"), w.shape())?);
                    b.set_value(fetch(format!("{i}.b"), b.shape())?);
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let d = running_mean.len();
                    gamma.set_value(fetch(format!("{i}.gamma"), (1, d))?);
                    beta.set_value(fetch(format!("{i}.beta"), (1, d))?);
                    *running_mean = fetch(format!("{i}.running_mean"), (1, d))?.row(0).to_owned();
                    *running_var = fetch(format!("{i}.running_var"), (1, d))?.row(0).to_owned();
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    y
}
