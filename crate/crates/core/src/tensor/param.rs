use ndarray::Array2;

pub type Matrix = Array2<f64>;

/// A trainable tensor with its gradient buffer.
///
/// `version` increases on every in-place update so activation tapes recorded
/// against older values can be detected as stale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub value: Matrix,
    pub grad: Matrix,
    bounds: Option<(f64, f64)>,
    version: u64,
}

impl ParamTensor {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.raw_dim());
        Self {
            value,
            grad,
            bounds: None,
            version: 0,
        }
    }

    /// Values are clamped into `[lo, hi]` after every optimizer update.
    pub fn with_bounds(mut self, lo: f64, hi: f64) -> Self {
        self.bounds = Some((lo, hi));
        self.apply_bounds();
        self
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.bounds
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.dim()
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn apply_bounds(&mut self) {
        if let Some((lo, hi)) = self.bounds {
            self.value.mapv_inplace(|v| v.clamp(lo, hi));
        }
    }

    /// Mark the value as modified.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    /// Replace the value wholesale (same shape), e.g. when restoring a checkpoint.
    pub fn set_value(&mut self, value: Matrix) {
        assert_eq!(value.dim(), self.value.dim(), "parameter shape is fixed");
        self.value = value;
        self.apply_bounds();
        self.touch();
    }
}
