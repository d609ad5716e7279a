//! Count-matrix ingestion, gene filtering and leak-free normalization.

pub(crate) mod counts;
mod filter;
mod metadata;
mod normalize;

pub use counts::{
    parse_allowlist, parse_counts, parse_gene_lengths, read_counts, CountMatrix, Delimiter,
};
pub use filter::{filter_genes, min_expressed_samples, Exclusion, FilterParams, GeneSet};
pub use metadata::{parse_metadata, read_metadata, Attribute, MetadataTable, SampleMeta};
pub use normalize::{
    apply_standardizer, cpm, cpm_log_transform, fit_standardizer, ExpressionMatrix,
    PreprocessArtifact, DEGENERATE_STD, TRANSFORM_TAG,
};
