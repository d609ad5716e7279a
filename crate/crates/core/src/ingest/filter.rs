use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::counts::CountMatrix;
use super::metadata::MetadataTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub min_len_bp: u64,
    pub expr_count: u64,
    pub tissue_frac: f64,
    /// Optional allowlist intersected with the gene universe before filtering.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub allowlist: Option<BTreeSet<String>>,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            min_len_bp: 500,
            expr_count: 10,
            tissue_frac: 0.2,
            allowlist: None,
        }
    }
}

/// Why a gene was dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum Exclusion {
    NotAllowlisted,
    ZeroTotal,
    TooShort { length_bp: u64 },
    NotExpressed { tissue: String },
}

/// Retained genes in lexicographic order plus the reason each other gene was dropped.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GeneSet {
    pub genes: Vec<String>,
    #[serde(default)]
    pub excluded: BTreeMap<String, Exclusion>,
    #[serde(default)]
    pub length_filter_skipped: bool,
}

impl GeneSet {
    /// A gene set with no provenance, sorted and deduplicated.
    pub fn from_ids<I: IntoIterator<Item = String>>(ids: I) -> Self {
        Self {
            genes: ids.into_iter().collect::<BTreeSet<_>>().into_iter().collect(),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.genes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.genes.is_empty()
    }
}

/// Samples needed to call a gene expressed in a tissue of `n_tissue` samples:
/// `max(1, ceil(frac * n_tissue))`.
pub fn min_expressed_samples(n_tissue: usize, frac: f64) -> usize {
    // 0.2 * 15 evaluates to 3.0000000000000004; absorb that before ceil.
    let raw = frac * n_tissue as f64;
    let needed = (raw - 1e-9 * raw.abs().max(1.0)).ceil();
    (needed.max(0.0) as usize).max(1)
}

pub fn filter_genes(
    counts: &CountMatrix,
    meta: &MetadataTable,
    params: &FilterParams,
) -> Result<GeneSet> {
    let rows = meta.for_samples(counts.sample_ids())?;

    let mut by_tissue: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (col, r) in rows.iter().enumerate() {
        by_tissue.entry(r.tissue.as_str()).or_default().push(col);
    }
    // The size rule never excludes a tissue since required <= N_tissue always;
    // it is kept explicit to mirror the filtering protocol.
    let tissues: Vec<(&str, Vec<usize>, usize)> = by_tissue
        .into_iter()
        .map(|(t, cols)| {
            let need = min_expressed_samples(cols.len(), params.tissue_frac);
            (t, cols, need)
        })
        .filter(|(_, cols, need)| cols.len() >= *need)
        .collect();

    let lengths = counts.gene_lengths();
    let mut kept = Vec::new();
    let mut excluded = BTreeMap::new();
    let data = counts.counts();
    for (g, gene) in counts.gene_ids().iter().enumerate() {
        let row = data.row(g);
        let reason = if params
            .allowlist
            .as_ref()
            .is_some_and(|allow| !allow.contains(gene))
        {
            Some(Exclusion::NotAllowlisted)
        } else if row.iter().all(|&c| c == 0) {
            Some(Exclusion::ZeroTotal)
        } else if let Some(len) = lengths.map(|l| l[g]).filter(|&l| l < params.min_len_bp) {
            Some(Exclusion::TooShort { length_bp: len })
        } else {
            tissues.iter().find_map(|(tissue, cols, need)| {
                let expressed = cols
                    .iter()
                    .filter(|&&c| row[c] >= params.expr_count)
                    .count();
                (expressed < *need).then(|| Exclusion::NotExpressed {
                    tissue: tissue.to_string(),
                })
            })
        };
        match reason {
            Some(r) => {
                excluded.insert(gene.clone(), r);
            }
            None => kept.push(gene.clone()),
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyGeneSet);
    }
    kept.sort();
    Ok(GeneSet {
        genes: kept,
        excluded,
        length_filter_skipped: lengths.is_none(),
    })
}
