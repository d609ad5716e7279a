//! Post-hoc linear probes: multinomial logistic regression on frozen features.

use std::collections::BTreeMap;

use ndarray::{s, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{one_hot, softmax_rows, Matrix, RngState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub train_frac: f64,
    /// Stop once every gradient component is below this.
    pub tol: f64,
    pub max_iter: usize,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            train_frac: 0.7,
            tol: 1e-6,
            max_iter: 5000,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub attribute: String,
    pub balanced_accuracy: f64,
    pub baseline_accuracy: f64,
    pub n_classes: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl ProbeReport {
    pub fn to_tsv(reports: &[ProbeReport]) -> String {
        let mut out = String::from("attribute\tbalanced_accuracy\tbaseline_accuracy\tn_classes\tn_train\tn_test\n");
        for r in reports {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.attribute, r.balanced_accuracy, r.baseline_accuracy, r.n_classes, r.n_train, r.n_test
            ));
        }
        out
    }
}

/// Softmax regression with an intercept, fitted on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    mean: ndarray::Array1<f64>,
    scale: ndarray::Array1<f64>,
    /// `(d + 1) x k`, intercept in the last row.
    weights: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

fn with_intercept(x: &Matrix) -> Matrix {
    let mut out = Matrix::ones((x.nrows(), x.ncols() + 1));
    out.slice_mut(s![.., ..x.ncols()]).assign(x);
    out
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix.
fn power_iteration(a: &Matrix) -> f64 {
    let mut v = ndarray::Array1::from_elem(a.ncols(), 1.0 / (a.ncols() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = a.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w / norm;
        let rayleigh = next.dot(&a.dot(&next));
        v = next;
        if (rayleigh - lambda).abs() <= 1e-10 * rayleigh.abs() {
            return rayleigh;
        }
        lambda = rayleigh;
    }
    lambda
}

impl SoftmaxRegression {
    /// Full-batch gradient descent on mean cross-entropy plus `l2 * |W|^2`
    /// (intercept unpenalized) with step `1 / L`, where `L` bounds the
    /// Hessian's largest eigenvalue.
    pub fn fit(x: &Matrix, labels: &[usize], k: usize, cfg: &ProbeConfig) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::Shape(format!("{} rows for {} labels", x.nrows(), labels.len())));
        }
        if x.nrows() == 0 {
            return Err(Error::EmptyBatch);
        }
        let mean = x.mean_axis(Axis(0)).expect("nonempty");
        let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s < 1e-12 { 1.0 } else { s });
        let z = with_intercept(&((x - &mean) / &scale));
        let y = one_hot(labels, k)?;
        let n = z.nrows() as f64;
        let gram = z.t().dot(&z) / n;
        // Softmax cross-entropy curvature is at most 1/2 per unit of feature energy.
        let lipschitz = (0.5 * power_iteration(&gram) + 2.0 * cfg.l2).max(1e-12);
        let step = 1.0 / lipschitz;
        let d = x.ncols();
        let mut w = Matrix::zeros((d + 1, k));
        let mut iterations = 0;
        let mut converged = false;
        while iterations < cfg.max_iter {
            let p = softmax_rows(&z.dot(&w));
            let mut grad = z.t().dot(&(p - &y)) / n;
            grad.slice_mut(s![..d, ..]).scaled_add(2.0 * cfg.l2, &w.slice(s![..d, ..]));
            iterations += 1;
            if grad.iter().all(|g| g.abs() < cfg.tol) {
                converged = true;
                break;
            }
            w.scaled_add(-step, &grad);
        }
        Ok(Self {
            mean,
            scale,
            weights: w,
            iterations,
            converged,
        })
    }

    pub fn predict_proba(&self, x: &Matrix) -> Matrix {
        softmax_rows(&with_intercept(&((x - &self.mean) / &self.scale)).dot(&self.weights))
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        self.predict_proba(x)
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    let mut tally: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(pred) {
        let e = tally.entry(t).or_default();
        e.1 += 1;
        if t == p {
            e.0 += 1;
        }
    }
    tally.values().map(|(hit, n)| *hit as f64 / *n as f64).sum::<f64>() / tally.len().max(1) as f64
}

/// Per-class shuffled split; each class keeps at least one sample on both sides.
pub fn stratified_split(labels: &[usize], train_frac: f64, rng: &mut RngState) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::Stratify(format!("need at least 2 classes, found {}", by_class.len())));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, mut idx) in by_class {
        if idx.len() < 2 {
            return Err(Error::Stratify(format!("class {c} has {} sample(s)", idx.len())));
        }
        rng.shuffle(&mut idx);
        let n_train = ((idx.len() as f64 * train_frac).round() as usize).clamp(1, idx.len() - 1);
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn encode_labels<S: AsRef<str>>(labels: &[S]) -> (Vec<usize>, usize) {
    let vocab: BTreeMap<&str, usize> = labels
        .iter()
        .map(|l| l.as_ref())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .enumerate()
        .map(|(i, l)| (l, i))
        .collect();
    (labels.iter().map(|l| vocab[l.as_ref()]).collect(), vocab.len())
}

fn split_fit_score(f: &Matrix, y: &[usize], k: usize, cfg: &ProbeConfig, rng: &mut RngState) -> Result<(f64, f64, usize, usize)> {
    let (train, test) = stratified_split(y, cfg.train_frac, rng)?;
    let pick = |rows: &[usize]| f.select(Axis(0), rows);
    let labels = |rows: &[usize]| rows.iter().map(|&i| y[i]).collect::<Vec<_>>();
    let model = SoftmaxRegression::fit(&pick(&train), &labels(&train), k, cfg)?;
    let pred = model.predict(&pick(&test));
    let truth = labels(&test);
    let acc = pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64;
    Ok((balanced_accuracy(&truth, &pred), acc, train.len(), test.len()))
}

/// Balanced accuracy of a linear probe predicting `labels` from `f`, plus the
/// same score after one seeded label permutation.
pub fn probe_attribute<S: AsRef<str>>(
    attribute: &str,
    f: &Matrix,
    labels: &[S],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let (y, k) = encode_labels(labels);
    if f.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", f.nrows(), y.len())));
    }
    let (bal, _, n_train, n_test) = split_fit_score(f, &y, k, cfg, &mut RngState::with_stream(seed, 0))?;
    let mut shuffled = y.clone();
    RngState::with_stream(seed, 1).shuffle(&mut shuffled);
    let (baseline, _, _, _) = split_fit_score(f, &shuffled, k, cfg, &mut RngState::with_stream(seed, 0))?;
    Ok(ProbeReport {
        attribute: attribute.to_string(),
        balanced_accuracy: bal,
        baseline_accuracy: baseline,
        n_classes: k,
        n_train,
        n_test,
    })
}

/// Domain-classifier estimate of distribution divergence: `2 (1 - 2 err)`
/// clamped to `[0, 2]`, where `err` is the held-out error of a linear probe
/// separating source from target rows.
pub fn proxy_divergence(source: &Matrix, target: &Matrix, seed: u64, cfg: &ProbeConfig) -> Result<f64> {
    if source.nrows() == 0 || target.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if source.ncols() != target.ncols() {
        return Err(Error::Shape(format!(
            "source has {} columns, target {}",
            source.ncols(),
            target.ncols()
        )));
    }
    let f = ndarray::concatenate(Axis(0), &[source.view(), target.view()]).expect("same width");
    let y: Vec<usize> = (0..f.nrows()).map(|i| usize::from(i >= source.nrows())).collect();
    let (_, acc, _, _) = split_fit_score(&f, &y, 2, cfg, &mut RngState::with_stream(seed, 2))?;
    Ok((2.0 * (1.0 - 2.0 * (1.0 - acc))).clamp(0.0, 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian(rows: usize, cols: usize, shift: f64, rng: &mut RngState) -> Matrix {
        Matrix::from_shape_simple_fn((rows, cols), || rng.normal() + shift)
    }

    #[test]
    fn balanced_accuracy_examples() {
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 1, 1]), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 0, 1], &[0, 0, 0, 0]), 0.5);
    }

    #[test]
    fn stratified_split_keeps_every_class_on_both_sides() {
        let labels = [0, 0, 1, 1, 1, 2, 2, 2, 2, 2];
        let (train, test) = stratified_split(&labels, 0.7, &mut RngState::new(0)).unwrap();
        assert_eq!(train.len() + test.len(), labels.len());
        for c in 0..3 {
            assert!(train.iter().any(|&i| labels[i] == c));
            assert!(test.iter().any(|&i| labels[i] == c));
        }
        let err = stratified_split(&[0, 0, 1], 0.7, &mut RngState::new(0)).unwrap_err();
        assert_eq!(err.name(), "StratifyError");
        let err = stratified_split(&[0, 0, 0], 0.7, &mut RngState::new(0)).unwrap_err();
        assert_eq!(err.name(), "StratifyError");
    }

    #[test]
    fn separable_fixture_is_recovered() {
        // Each class is a tight cluster around its own axis.
        let mut rng = RngState::new(5);
        let k = 4;
        let n = 200;
        let labels: Vec<String> = (0..n).map(|i| format!("c{}", i % k)).collect();
        let f = Matrix::from_shape_fn((n, 6), |(i, j)| {
            let centre = if j == i % k { 4.0 } else { 0.0 };
            centre + 0.3 * rng.normal()
        });
        let r = probe_attribute("tissue", &f, &labels, 1, &ProbeConfig::default()).unwrap();
        assert!(r.balanced_accuracy >= 0.95, "{r:?}");
        assert!((r.baseline_accuracy - 0.25).abs() <= 0.1, "{r:?}");
        assert_eq!(r.n_classes, 4);
    }

    #[test]
    fn independent_labels_score_near_chance() {
        let mut rng = RngState::new(11);
        let n = 2000;
        let f = gaussian(n, 5, 0.0, &mut rng);
        let labels: Vec<String> = (0..n).map(|_| format!("c{}", rng.below(3))).collect();
        let r = probe_attribute("sex", &f, &labels, 2, &ProbeConfig::default()).unwrap();
        assert!((r.balanced_accuracy - 1.0 / 3.0).abs() <= 0.1, "{r:?}");
    }

    #[test]
    fn single_level_attribute_cannot_be_probed() {
        let f = Matrix::zeros((6, 2));
        let labels = vec!["m"; 6];
        let err = probe_attribute("sex", &f, &labels, 0, &ProbeConfig::default()).unwrap_err();
        assert_eq!(err.name(), "StratifyError");
    }

    #[test]
    fn divergence_extremes() {
        let mut rng = RngState::new(3);
        let a = gaussian(300, 4, 0.0, &mut rng);
        let b = gaussian(300, 4, 0.0, &mut rng);
        let same = proxy_divergence(&a, &b, 0, &ProbeConfig::default()).unwrap();
        assert!(same <= 0.3, "{same}");
        let far = gaussian(300, 4, 10.0, &mut rng);
        let apart = proxy_divergence(&a, &far, 0, &ProbeConfig::default()).unwrap();
        assert!(apart >= 1.7, "{apart}");
    }

    #[test]
    fn gradient_descent_reaches_stationary_point() {
        let mut rng = RngState::new(9);
        let x = gaussian(80, 3, 0.0, &mut rng);
        let y: Vec<usize> = (0..80).map(|i| usize::from(x[[i, 0]] + 0.5 * rng.normal() > 0.0)).collect();
        let cfg = ProbeConfig {
            max_iter: 100_000,
            ..ProbeConfig::default()
        };
        let m = SoftmaxRegression::fit(&x, &y, 2, &cfg).unwrap();
        assert!(m.converged, "{} iterations", m.iterations);
    }

    proptest::proptest! {
        #[test]
        fn divergence_stays_in_range(shift in 0.0f64..5.0, seed in 0u64..50) {
            let mut rng = RngState::new(seed);
            let a = gaussian(30, 2, 0.0, &mut rng);
            let b = gaussian(20, 2, shift, &mut rng);
            let cfg = ProbeConfig { max_iter: 200, ..ProbeConfig::default() };
            let d = proxy_divergence(&a, &b, seed, &cfg).unwrap();
            proptest::prop_assert!((0.0..=2.0).contains(&d));
        }
    }
}
