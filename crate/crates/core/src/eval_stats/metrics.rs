use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Standard deviation / variance denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispersion {
    #[default]
    Population,
    Sample,
}

impl Dispersion {
    pub fn variance(self, x: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let ss = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
        match self {
            Dispersion::Population => ss / n,
            Dispersion::Sample => ss / (n - 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mae: f64,
    /// NaN when the targets have zero variance.
    pub r2: f64,
    pub r2_defined: bool,
}

pub fn regression_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<RegressionMetrics> {
    if y_true.len() != y_pred.len() {
        return Err(Error::Shape(format!(
            "{} targets vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = y_true.len() as f64;
    let mae = y_true.iter().zip(y_pred).map(|(y, p)| (p - y).abs()).sum::<f64>() / n;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(y, p)| (y - p).powi(2)).sum();
    let r2_defined = ss_tot > 0.0;
    Ok(RegressionMetrics {
        mae,
        r2: if r2_defined { 1.0 - ss_res / ss_tot } else { f64::NAN },
        r2_defined,
    })
}

/// Coefficient of variation in percent across per-dataset averages.
pub fn cross_dataset_cv(values: &[f64], dispersion: Dispersion) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::Precondition(format!(
            "coefficient of variation needs at least 2 datasets, got {}",
            values.len()
        )));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if mean == 0.0 {
        return Err(Error::DegenerateCv);
    }
    Ok(100.0 * dispersion.variance(values).sqrt() / mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeR2 {
    pub mean_r2: f64,
    pub per_class: Vec<f64>,
    /// Classes whose indicator or probability column was constant.
    pub degenerate_classes: Vec<usize>,
}

fn pearson(a: impl Iterator<Item = f64> + Clone, b: impl Iterator<Item = f64> + Clone) -> Option<f64> {
    let n = a.clone().count() as f64;
    let ma = a.clone().sum::<f64>() / n;
    let mb = b.clone().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Per-class squared correlation between predicted probabilities and class
/// indicators, averaged over classes.
pub fn attribute_r2(probs: &Matrix, onehot: &Matrix) -> Result<AttributeR2> {
    if probs.dim() != onehot.dim() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs labels {:?}",
            probs.dim(),
            onehot.dim()
        )));
    }
    if probs.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut per_class = Vec::with_capacity(probs.ncols());
    let mut degenerate_classes = Vec::new();
    for k in 0..probs.ncols() {
        match pearson(probs.column(k).into_iter().copied(), onehot.column(k).into_iter().copied()) {
            Some(r) => per_class.push(r * r),
            None => {
                per_class.push(0.0);
                degenerate_classes.push(k);
            }
        }
    }
    let mean_r2 = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    Ok(AttributeR2 {
        mean_r2,
        per_class,
        degenerate_classes,
    })
}

/// Variance across tissues of the tissue-mean absolute residual; `None` with
/// fewer than two tissues.
pub fn tissue_bias_variance(abs_residuals: &[f64], tissues: &[String], dispersion: Dispersion) -> Result<Option<f64>> {
    if abs_residuals.len() != tissues.len() {
        return Err(Error::Shape(format!(
            "{} residuals for {} tissue labels",
            abs_residuals.len(),
            tissues.len()
        )));
    }
    let mut groups: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (r, t) in abs_residuals.iter().zip(tissues) {
        let e = groups.entry(t.as_str()).or_default();
        e.0 += r;
        e.1 += 1;
    }
    if groups.len() < 2 {
        return Ok(None);
    }
    let means: Vec<f64> = groups.values().map(|(s, n)| s / *n as f64).collect();
    Ok(Some(dispersion.variance(&means)))
}

/// Predictions for one held-out fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub dataset_id: String,
    pub fold: usize,
    pub rows: Vec<PredictionRecord>,
    pub mae: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub age: f64,
    pub predicted: f64,
    pub tissue: String,
}

impl FoldResult {
    pub fn new(dataset_id: impl Into<String>, fold: usize, rows: Vec<PredictionRecord>) -> Result<Self> {
        let y: Vec<f64> = rows.iter().map(|r| r.age).collect();
        let p: Vec<f64> = rows.iter().map(|r| r.predicted).collect();
        let m = regression_metrics(&y, &p)?;
        Ok(Self {
            dataset_id: dataset_id.into(),
            fold,
            rows,
            mae: m.mae,
            r2: m.r2,
        })
    }

    pub fn rows_tsv(&self) -> String {
        let mut out = String::from("dataset_id\tfold\tsample_id\tage\tpredicted\ttissue\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                self.dataset_id, self.fold, r.sample_id, r.age, r.predicted, r.tissue
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub dataset_id: String,
    pub mae: f64,
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub alpha: f64,
    pub datasets: Vec<DatasetSummary>,
    pub cv_mae: f64,
    pub cv_r2: f64,
    pub tissue_bias: Option<f64>,
}

impl StabilityReport {
    /// Average folds per dataset, then take the coefficient of variation across datasets.
    pub fn from_folds(alpha: f64, folds: &[FoldResult], dispersion: Dispersion) -> Result<Self> {
        let mut by_ds: BTreeMap<&str, Vec<&FoldResult>> = BTreeMap::new();
        for f in folds {
            by_ds.entry(f.dataset_id.as_str()).or_default().push(f);
        }
        let datasets: Vec<DatasetSummary> = by_ds
            .iter()
            .map(|(id, fs)| DatasetSummary {
                dataset_id: id.to_string(),
                mae: fs.iter().map(|f| f.mae).sum::<f64>() / fs.len() as f64,
                r2: fs.iter().map(|f| f.r2).sum::<f64>() / fs.len() as f64,
            })
            .collect();
        let maes: Vec<f64> = datasets.iter().map(|d| d.mae).collect();
        let r2s: Vec<f64> = datasets.iter().map(|d| d.r2).collect();
        // Per-sample residuals averaged over the folds each sample appears in.
        let mut per_sample: BTreeMap<&str, (f64, usize, &str)> = BTreeMap::new();
        for f in folds {
            for r in &f.rows {
                let e = per_sample.entry(r.sample_id.as_str()).or_insert((0.0, 0, r.tissue.as_str()));
                e.0 += (r.predicted - r.age).abs();
                e.1 += 1;
            }
        }
        let resid: Vec<f64> = per_sample.values().map(|(s, n, _)| s / *n as f64).collect();
        let tissues: Vec<String> = per_sample.values().map(|(_, _, t)| t.to_string()).collect();
        Ok(Self {
            alpha,
            cv_mae: cross_dataset_cv(&maes, dispersion)?,
            cv_r2: cross_dataset_cv(&r2s, dispersion)?,
            tissue_bias: tissue_bias_variance(&resid, &tissues, dispersion)?,
            datasets,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("alpha\tdataset_id\tmae\tr2\n");
        for d in &self.datasets {
            out.push_str(&format!("{}\t{}\t{}\t{}\n", self.alpha, d.dataset_id, d.mae, d.r2));
        }
        out.push_str(&format!("{}\tCV_MAE\t{}\t\n", self.alpha, self.cv_mae));
        out.push_str(&format!("{}\tCV_R2\t\t{}\n", self.alpha, self.cv_r2));
        let tb = self.tissue_bias.map_or("NA".to_string(), |v| v.to_string());
        out.push_str(&format!("{}\tTISSUE_BIAS\t{}\t\n", self.alpha, tb));
        out
    }
}
