//! Binary stochastic filter: a learned per-gene input gate.
//!
//! Each input feature `j` has a keep probability `w_j` in `[0, 1]`. In
//! training the input is multiplied by `z_j ~ Bernoulli(w_j)`; at inference the
//! mask is the deterministic `z_j = 1[w_j > threshold]`. Gradients reach `w`
//! through a straight-through estimator (`dz/dw = 1`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Mode, ParamTensor, RngState};

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct BsfLayer {
    w: ParamTensor,
    /// Draw a fresh mask for every sample instead of one per mini-batch.
    pub per_sample: bool,
}

#[derive(Debug)]
pub struct BsfTape {
    x: Matrix,
    z: Matrix,
    mode: Mode,
    version: u64,
}

impl BsfTape {
    /// The sampled (train) or thresholded (eval) mask; one row when shared by the batch.
    pub fn mask(&self) -> &Matrix {
        &self.z
    }
}

impl BsfLayer {
    /// All gates open (`w = 1`).
    pub fn new(d: usize) -> Self {
        Self::with_weights(vec![1.0; d]).expect("ones are valid keep probabilities")
    }

    pub fn with_weights(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Invariant("BSF weights must lie in [0, 1]".into()));
        }
        let d = w.len();
        Ok(Self {
            w: ParamTensor::new(Matrix::from_shape_vec((1, d), w).expect("row vector"))
                .with_bounds(0.0, 1.0),
            per_sample: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.value.ncols()
    }

    pub fn weights(&self) -> &[f64] {
        self.w.value.as_slice().expect("contiguous row")
    }

    pub fn param(&self) -> &ParamTensor {
        &self.w
    }

    pub fn param_mut(&mut self) -> &mut ParamTensor {
        &mut self.w
    }

    pub fn sum(&self) -> f64 {
        self.w.value.sum()
    }

    /// Deterministic inference mask.
    pub fn eval_mask(&self, threshold: f64) -> Vec<bool> {
        self.weights().iter().map(|&w| w > threshold).collect()
    }

    pub fn forward(
        &self,
        x: &Matrix,
        mode: Mode,
        threshold: f64,
        rng: &mut RngState,
    ) -> Result<(Matrix, BsfTape)> {
        let d = self.dim();
        if x.ncols() != d {
            return Err(Error::Shape(format!("BSF expects {d} columns, got {}", x.ncols())));
        }
        if self.weights().iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Invariant("BSF weights left [0, 1]".into()));
        }
        let z = match mode {
            Mode::Eval => Matrix::from_shape_fn((1, d), |(_, j)| {
                if self.w.value[[0, j]] > threshold {
                    1.0
                } else {
                    0.0
                }
            }),
            Mode::Train => {
                let rows = if self.per_sample { x.nrows() } else { 1 };
                Matrix::from_shape_fn((rows, d), |(_, j)| {
                    if rng.bernoulli(self.w.value[[0, j]]) {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
        };
        let y = x * &z;
        Ok((
            y,
            BsfTape {
                x: x.clone(),
                z,
                mode,
                version: self.w.version(),
            },
        ))
    }

    /// Returns `(grad_x, grad_w)` and stores `grad_w` in the weight's gradient.
    pub fn backward(&mut self, tape: BsfTape, upstream: &Matrix) -> Result<(Matrix, Matrix)> {
        if tape.mode == Mode::Eval {
            return Err(Error::Tape("BSF backward needs a train-mode tape".into()));
        }
        if tape.version != self.w.version() {
            return Err(Error::Tape("BSF weights changed since the forward pass".into()));
        }
        if upstream.dim() != tape.x.dim() {
            return Err(Error::Shape("upstream gradient does not match BSF input".into()));
        }
        let grad_x = upstream * &tape.z;
        let grad_w = (upstream * &tape.x).sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        self.w.grad.assign(&grad_w);
        Ok((grad_x, grad_w))
    }

    pub fn penalty(&self, pen: &SparsityPenalty) -> (f64, Matrix) {
        pen.evaluate(&self.w.value)
    }
}

/// Hinge on the total keep probability: `strength * max(0, sum(w) - cut_threshold)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparsityPenalty {
    pub strength: f64,
    pub cut_threshold: f64,
    /// Optional plain l1 term `l1 * sum(w)`; off unless configured.
    pub l1: f64,
}

impl Default for SparsityPenalty {
    fn default() -> Self {
        Self {
            strength: 1e-2,
            cut_threshold: 3000.0,
            l1: 0.0,
        }
    }
}

impl SparsityPenalty {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= 0.0 && self.cut_threshold >= 0.0 && self.l1 >= 0.0) {
            return Err(Error::Config(format!("invalid sparsity penalty {self:?}")));
        }
        Ok(())
    }

    /// Penalty value and its (sub)gradient; at `sum(w) == cut_threshold` the
    /// hinge slope is taken as zero.
    pub fn evaluate(&self, w: &Matrix) -> (f64, Matrix) {
        let total = w.sum();
        let excess = total - self.cut_threshold;
        let active = excess > 0.0;
        let value = if active { self.strength * excess } else { 0.0 } + self.l1 * total;
        let slope = if active { self.strength } else { 0.0 } + self.l1;
        (value, Matrix::from_elem(w.raw_dim(), slope))
    }
}

/// Genes whose keep probability exceeds a threshold, strongest first.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneRanking {
    pub threshold: f64,
    pub entries: Vec<(String, f64)>,
}

impl GeneRanking {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, k: usize) -> impl Iterator<Item = &str> {
        self.entries.iter().take(k).map(|(g, _)| g.as_str())
    }

    /// `rank\tgene_id\tweight`, ranks starting at 1.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rank\tgene_id\tweight\n");
        for (i, (g, w)) in self.entries.iter().enumerate() {
            out.push_str(&format!("{}\t{g}\t{w}\n", i + 1));
        }
        out
    }
}

pub fn export_ranking(weights: &[f64], gene_ids: &[String], threshold: f64) -> Result<GeneRanking> {
    if weights.len() != gene_ids.len() {
        return Err(Error::Shape(format!(
            "{} BSF weights for {} genes",
            weights.len(),
            gene_ids.len()
        )));
    }
    let mut entries: Vec<(String, f64)> = gene_ids
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > threshold)
        .map(|(g, &w)| (g.clone(), w))
        .collect();
    entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(GeneRanking { threshold, entries })
}
