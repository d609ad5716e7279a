use ndarray::{Array1, ArrayView1};

use super::param::Matrix;
use super::stack::softmax_rows;
use crate::error::{Error, Result};

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn mse_loss(pred: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction length {} != target length {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = pred.len() as f64;
    let diff = &pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff * (2.0 / n)))
}

/// One-hot encode class indices into a `len x k` matrix.
pub fn one_hot(labels: &[usize], k: usize) -> Result<Matrix> {
    let mut m = Matrix::zeros((labels.len(), k));
    for (i, &c) in labels.iter().enumerate() {
        if c >= k {
            return Err(Error::Label(format!("class {c} out of range for {k} classes")));
        }
        m[[i, c]] = 1.0;
    }
    Ok(m)
}

fn true_class(row: ArrayView1<f64>) -> Option<usize> {
    let mut hit = None;
    for (k, &v) in row.iter().enumerate() {
        if v == 1.0 {
            if hit.is_some() {
                return None;
            }
            hit = Some(k);
        } else if v != 0.0 {
            return None;
        }
    }
    hit
}

/// Mean natural-log cross-entropy of softmax(logits) against one-hot rows.
/// Gradient with respect to the logits is `(softmax - onehot) / N`.
pub fn categorical_cross_entropy(logits: &Matrix, onehot: &Matrix) -> Result<(f64, Matrix)> {
    if logits.dim() != onehot.dim() {
        return Err(Error::Shape(format!(
            "logits {:?} vs labels {:?}",
            logits.dim(),
            onehot.dim()
        )));
    }
    if logits.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let n = logits.nrows() as f64;
    let mut loss = 0.0;
    for (i, (row, label)) in logits.rows().into_iter().zip(onehot.rows()).enumerate() {
        let k = true_class(label)
            .ok_or_else(|| Error::Label(format!("row {i} is not a one-hot vector")))?;
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[k];
    }
    let grad = (softmax_rows(logits) - onehot) / n;
    Ok((loss / n, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn mse_examples() {
        let (l, g) = mse_loss(arr1(&[1.0, 2.0]).view(), arr1(&[1.0, 2.0]).view()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, _) = mse_loss(arr1(&[0.0, 0.0]).view(), arr1(&[1.0, 3.0]).view()).unwrap();
        assert_eq!(l, 5.0);
        let (_, g) = mse_loss(arr1(&[2.0]).view(), arr1(&[0.0]).view()).unwrap();
        assert_eq!(g, arr1(&[4.0]));
        let empty = Array1::<f64>::zeros(0);
        assert_eq!(
            mse_loss(empty.view(), empty.view()).unwrap_err().name(),
            "EmptyBatchError"
        );
    }

    #[test]
    fn ce_uniform_logits_is_ln_k() {
        let (l, _) = categorical_cross_entropy(&Matrix::zeros((3, 4)), &one_hot(&[0, 1, 3], 4).unwrap()).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((l - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn ce_peaked_logits_approach_zero() {
        let (l, _) = categorical_cross_entropy(&arr2(&[[60.0, 0.0, 0.0]]), &arr2(&[[1.0, 0.0, 0.0]])).unwrap();
        assert!((0.0..1e-20).contains(&l));
    }

    #[test]
    fn ce_two_class_gradient() {
        let (_, g) = categorical_cross_entropy(&Matrix::zeros((2, 2)), &arr2(&[[1.0, 0.0], [1.0, 0.0]])).unwrap();
        assert_eq!(g.row(0).to_vec(), vec![-0.25, 0.25]);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let err = categorical_cross_entropy(&Matrix::zeros((1, 2)), &arr2(&[[1.0, 1.0]])).unwrap_err();
        assert_eq!(err.name(), "LabelError");
        let err = categorical_cross_entropy(&Matrix::zeros((1, 2)), &arr2(&[[0.5, 0.5]])).unwrap_err();
        assert_eq!(err.name(), "LabelError");
        assert_eq!(one_hot(&[3], 3).unwrap_err().name(), "LabelError");
    }
}
