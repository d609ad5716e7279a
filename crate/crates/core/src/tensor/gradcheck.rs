//! Central finite-difference verification of analytic gradients.

use ndarray::Array1;

use super::loss::{categorical_cross_entropy, mse_loss};
use super::param::{Matrix, ParamTensor};
use super::rng::RngState;
use super::stack::{Backward, Mode, Stack};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_FLOOR: f64 = 1e-6;

/// A scalar function of a set of parameters with an analytic gradient.
///
/// `evaluate` must be a deterministic function of the parameter values, so any
/// stochastic layers have to replay the same random stream on every call.
pub trait Objective {
    /// Loss at the current parameters; fills every parameter's `grad` when
    /// `with_grads` is set.
    fn evaluate(&mut self, with_grads: bool) -> Result<f64>;

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor));
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn with_element<O: Objective + ?Sized>(obj: &mut O, target: (usize, usize), f: &mut dyn FnMut(&mut f64)) {
    let mut k = 0;
    obj.visit_params(&mut |p| {
        if k == target.0 {
            let slot = p
                .value
                .as_slice_memory_order_mut()
                .expect("parameters are contiguous");
            f(&mut slot[target.1]);
        }
        k += 1;
    });
}

/// Compare analytic gradients with central differences at step `h` over every
/// parameter element. Passes iff the max relative error is strictly below `tol`.
pub fn grad_check<O: Objective + ?Sized>(obj: &mut O, tol: f64, h: f64) -> Result<GradCheckReport> {
    obj.evaluate(true)?;
    let mut analytic: Vec<Vec<f64>> = Vec::new();
    obj.visit_params(&mut |p| {
        analytic.push(
            p.grad
                .as_slice_memory_order()
                .expect("gradients are contiguous")
                .to_vec(),
        )
    });
    let mut max_rel_err: f64 = 0.0;
    let mut worst = None;
    let mut checked = 0;
    for (pi, grads) in analytic.iter().enumerate() {
        for (ei, &a) in grads.iter().enumerate() {
            let mut orig = 0.0;
            with_element(obj, (pi, ei), &mut |v| {
                orig = *v;
                *v = orig + h;
            });
            let plus = obj.evaluate(false)?;
            with_element(obj, (pi, ei), &mut |v| *v = orig - h);
            let minus = obj.evaluate(false)?;
            with_element(obj, (pi, ei), &mut |v| *v = orig);
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a, numeric);
            if err > max_rel_err || worst.is_none() {
                max_rel_err = max_rel_err.max(err);
                worst = Some((pi, ei));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst,
        checked,
        tol,
        passed: max_rel_err < tol,
    })
}

/// Loss heads available to [`StackObjective`].
#[derive(Debug, Clone)]
pub enum LossHead {
    /// MSE of the single output column against the targets.
    Mse(Array1<f64>),
    CrossEntropy(Matrix),
    /// `sum(weights * output)`: an arbitrary linear functional of the output.
    Linear(Matrix),
}

/// A stack plus loss, with the input treated as an extra parameter so the
/// input gradient is verified alongside the weights.
pub struct StackObjective {
    pub stack: Stack,
    pub input: ParamTensor,
    pub head: LossHead,
    pub mode: Mode,
    pub seed: u64,
}

impl StackObjective {
    pub fn new(stack: Stack, x: Matrix, head: LossHead, mode: Mode, seed: u64) -> Self {
        Self {
            stack,
            input: ParamTensor::new(x),
            head,
            mode,
            seed,
        }
    }
}

impl Objective for StackObjective {
    fn evaluate(&mut self, with_grads: bool) -> Result<f64> {
        let mut rng = RngState::new(self.seed);
        let (y, tape) = self.stack.forward(&self.input.value, self.mode, &mut rng)?;
        let (loss, upstream) = match &self.head {
            LossHead::Mse(target) => {
                let (l, g) = mse_loss(y.column(0), target.view())?;
                (l, g.insert_axis(ndarray::Axis(1)))
            }
            LossHead::CrossEntropy(onehot) => categorical_cross_entropy(&y, onehot)?,
            LossHead::Linear(w) => ((&y * w).sum(), w.clone()),
        };
        let loss = loss + self.stack.l2_penalty();
        if with_grads {
            let dx = self
                .stack
                .backward(tape, &upstream, Backward::default())?
                .expect("input gradient requested");
            self.input.grad.assign(&dx);
        }
        Ok(loss)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        for p in self.stack.params_mut() {
            f(p);
        }
        f(&mut self.input);
    }
}
