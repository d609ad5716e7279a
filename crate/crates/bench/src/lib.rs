//! Shared fixtures for the criterion benchmarks.

use advage_core::adversary::{build_model, AdversarialModel, ModelConfig, TrainData, Vocabulary};
use advage_core::ingest::FilterParams;
use advage_core::pipeline::{preprocess, Dataset, Preprocessed};
use advage_core::synth::{generate, SynthConfig, SynthDataset};

/// Four environments of `per_env` samples each over `genes` genes.
pub fn corpus(per_env: usize, genes: usize) -> SynthDataset {
    generate(&SynthConfig {
        n_samples: per_env,
        n_genes: genes,
        ..SynthConfig::default()
    })
    .expect("valid synth config")
}

pub fn pooled(s: &SynthDataset) -> Dataset {
    Dataset::new("pooled", s.counts.clone(), &s.metadata).expect("metadata covers every sample")
}

pub fn prepared(s: &SynthDataset) -> (Preprocessed, TrainData) {
    let prep = preprocess(&[&pooled(s)], &FilterParams::default()).expect("preprocessing succeeds");
    let vocab = Vocabulary::from_metadata(&prep.meta);
    let rows = prep.meta.for_samples(&prep.train.sample_ids).expect("rows present");
    let data = TrainData::from_metadata(prep.train.values.clone(), &rows, &vocab).expect("valid training data");
    (prep, data)
}

/// Reference architecture sized to the data.
pub fn model(data: &TrainData) -> AdversarialModel {
    let cfg = ModelConfig {
        input_dim: data.x().ncols(),
        ..ModelConfig::default()
    };
    build_model(&cfg, data.classes()).expect("valid model config")
}
