use std::collections::HashMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::counts::CountMatrix;
use super::filter::GeneSet;
use crate::error::{Error, Result};

pub const TRANSFORM_TAG: &str = "cpm_log2_zscore_v1";

/// Stds below this are treated as a constant column.
pub const DEGENERATE_STD: f64 = 1e-12;

/// Real-valued expression, samples in rows and genes in columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    pub gene_ids: Vec<String>,
    pub sample_ids: Vec<String>,
    pub values: Array2<f64>,
}

impl ExpressionMatrix {
    pub fn new(gene_ids: Vec<String>, sample_ids: Vec<String>, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (sample_ids.len(), gene_ids.len()) {
            return Err(Error::Shape(format!(
                "values are {:?} but {} samples x {} genes were named",
                values.dim(),
                sample_ids.len(),
                gene_ids.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics("expression matrix has non-finite entries".into()));
        }
        Ok(Self {
            gene_ids,
            sample_ids,
            values,
        })
    }

    pub fn select_samples(&self, rows: &[usize]) -> Self {
        Self {
            gene_ids: self.gene_ids.clone(),
            sample_ids: rows.iter().map(|&r| self.sample_ids[r].clone()).collect(),
            values: self.values.select(Axis(0), rows),
        }
    }

    pub fn to_writer<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "sample_id")?;
        for g in &self.gene_ids {
            write!(w, "\t{g}")?;
        }
        writeln!(w)?;
        for (s, row) in self.sample_ids.iter().zip(self.values.rows()) {
            write!(w, "{s}")?;
            for v in row {
                write!(w, "\t{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Counts-per-million of one sample's counts against its library size.
pub fn cpm(counts: &[u64]) -> Option<Vec<f64>> {
    let lib: u64 = counts.iter().sum();
    (lib > 0).then(|| {
        let lib = lib as f64;
        counts.iter().map(|&c| c as f64 / lib * 1e6).collect()
    })
}

/// `log2(CPM + 1)` restricted to `genes`, with library sizes taken over every
/// gene in `counts`.
pub fn cpm_log_transform(counts: &CountMatrix, genes: &[String]) -> Result<ExpressionMatrix> {
    let index = counts.gene_index();
    let cols: Vec<usize> = genes
        .iter()
        .map(|g| {
            index
                .get(g.as_str())
                .copied()
                .ok_or_else(|| Error::Precondition(format!("gene {g:?} not in count matrix")))
        })
        .collect::<Result<_>>()?;
    let data = counts.counts();
    let mut values = Array2::<f64>::zeros((counts.n_samples(), genes.len()));
    for (s, sample) in counts.sample_ids().iter().enumerate() {
        let column = data.column(s);
        let lib: u64 = column.sum();
        if lib == 0 {
            return Err(Error::ZeroLibrary(sample.clone()));
        }
        let lib = lib as f64;
        for (j, &g) in cols.iter().enumerate() {
            values[[s, j]] = (column[g] as f64 / lib * 1e6 + 1.0).log2();
        }
    }
    ExpressionMatrix::new(genes.to_vec(), counts.sample_ids().to_vec(), values)
}

/// Training-set statistics that are the only state carried to holdout data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessArtifact {
    pub transform_tag: String,
    pub gene_set: GeneSet,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Genes whose training std was degenerate and replaced by 1.0.
    pub degenerate: Vec<String>,
}

impl PreprocessArtifact {
    pub fn genes(&self) -> &[String] {
        &self.gene_set.genes
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let art: Self = serde_json::from_str(text)?;
        let n = art.gene_set.len();
        if art.mean.len() != n || art.std.len() != n {
            return Err(Error::Shape("artifact statistics do not match gene count".into()));
        }
        if art.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Invariant("artifact std must be positive".into()));
        }
        Ok(art)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical compact JSON encoding.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("artifact serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Artifact genes that `m` does not provide.
    pub fn missing_genes(&self, m: &ExpressionMatrix) -> Vec<String> {
        let present: std::collections::HashSet<&str> =
            m.gene_ids.iter().map(String::as_str).collect();
        self.genes()
            .iter()
            .filter(|g| !present.contains(g.as_str()))
            .cloned()
            .collect()
    }
}

/// Per-gene mean and population std over training samples.
pub fn fit_standardizer(train: &ExpressionMatrix, gene_set: &GeneSet) -> Result<PreprocessArtifact> {
    if train.values.nrows() == 0 || train.values.ncols() == 0 {
        return Err(Error::Precondition("cannot fit a standardizer on an empty matrix".into()));
    }
    if train.gene_ids != gene_set.genes {
        return Err(Error::Shape("training matrix columns differ from the gene set".into()));
    }
    let n = train.values.nrows() as f64;
    let mut mean = Vec::with_capacity(train.gene_ids.len());
    let mut std = Vec::with_capacity(train.gene_ids.len());
    let mut degenerate = Vec::new();
    for (gene, col) in train.gene_ids.iter().zip(train.values.columns()) {
        let mu = col.sum() / n;
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let sd = var.sqrt();
        mean.push(mu);
        if sd < DEGENERATE_STD {
            degenerate.push(gene.clone());
            std.push(1.0);
        } else {
            std.push(sd);
        }
    }
    Ok(PreprocessArtifact {
        transform_tag: TRANSFORM_TAG.to_string(),
        gene_set: gene_set.clone(),
        mean,
        std,
        degenerate,
    })
}

/// Align columns to the artifact's genes and z-score them. Artifact genes
/// missing from `m` come out as all-zero columns; extra genes are dropped.
pub fn apply_standardizer(m: &ExpressionMatrix, art: &PreprocessArtifact) -> ExpressionMatrix {
    let index: HashMap<&str, usize> = m
        .gene_ids
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();
    let mut values = Array2::<f64>::zeros((m.values.nrows(), art.genes().len()));
    for (j, gene) in art.genes().iter().enumerate() {
        if let Some(&src) = index.get(gene.as_str()) {
            let (mu, sd) = (art.mean[j], art.std[j]);
            values
                .column_mut(j)
                .zip_mut_with(&m.values.column(src), |out, &v| *out = (v - mu) / sd);
        }
    }
    ExpressionMatrix {
        gene_ids: art.genes().to_vec(),
        sample_ids: m.sample_ids.clone(),
        values,
    }
}
