//! End-to-end orchestration: dataset directories, leak-free preprocessing,
//! fold planning, training, holdout prediction and run manifests.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{CheckpointSink, FitOutcome, ModelConfig, TrainData, TrainMode, Trainer, Vocabulary};
use crate::bsf::{export_ranking, GeneRanking};
use crate::error::{Error, Result};
use crate::eval_stats::{probe_attribute, FoldResult, PredictionRecord, ProbeConfig, ProbeReport};
use crate::ingest::{
    apply_standardizer, cpm_log_transform, filter_genes, fit_standardizer, parse_counts, parse_gene_lengths,
    parse_metadata, Attribute, CountMatrix, Delimiter, ExpressionMatrix, FilterParams, MetadataTable,
    PreprocessArtifact,
};
use crate::adversary::AdversarialModel;

pub const COUNTS_FILE: &str = "counts.tsv";
pub const METADATA_FILE: &str = "metadata.tsv";
pub const LENGTHS_FILE: &str = "gene_lengths.tsv";

/// One study: counts plus metadata for exactly its samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub counts: CountMatrix,
    pub meta: MetadataTable,
}

impl Dataset {
    /// Metadata is reordered to the count columns; extra metadata rows are dropped.
    pub fn new(id: impl Into<String>, counts: CountMatrix, meta: &MetadataTable) -> Result<Self> {
        let id = id.into();
        let meta = meta.subset(counts.sample_ids()).map_err(|e| match e {
            Error::Precondition(m) => Error::MetadataMismatch(format!("dataset {id}: {m}")),
            other => other,
        })?;
        Ok(Self { id, counts, meta })
    }

    /// Read `counts.tsv`, `metadata.tsv` and, if present, `gene_lengths.tsv`
    /// from `dir`; the dataset id is the directory name.
    pub fn load(dir: &Path) -> Result<Self> {
        let id = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Error::Precondition(format!("{} has no directory name", dir.display())))?;
        let mut counts = parse_counts(&dir.join(COUNTS_FILE), Delimiter::Tab)?;
        let lengths = dir.join(LENGTHS_FILE);
        if lengths.exists() {
            counts = counts.with_gene_lengths(&parse_gene_lengths(&lengths)?);
        }
        let meta = parse_metadata(&dir.join(METADATA_FILE))?;
        Self::new(id, counts, &meta)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut buf = Vec::new();
        self.counts.to_writer(&mut buf).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(COUNTS_FILE), &buf)?;
        buf.clear();
        self.meta.to_writer(&mut buf).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join(METADATA_FILE), &buf)
    }

    /// Split a pooled matrix into one dataset per series id.
    pub fn split_by_series(counts: &CountMatrix, meta: &MetadataTable) -> Result<Vec<Self>> {
        let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for s in counts.sample_ids() {
            let row = meta
                .get(s)
                .ok_or_else(|| Error::MetadataMismatch(format!("sample {s:?} has no metadata")))?;
            groups.entry(row.series_id.clone()).or_default().push(s.clone());
        }
        groups
            .into_iter()
            .map(|(series, samples)| Self::new(series, counts.select_samples(&samples)?, meta))
            .collect()
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Refuse sample ids that occur in more than one dataset.
pub fn check_no_leak(datasets: &[&Dataset]) -> Result<()> {
    let mut owner: HashMap<&str, &str> = HashMap::new();
    let mut shared = Vec::new();
    for ds in datasets {
        for s in ds.counts.sample_ids() {
            if let Some(prev) = owner.insert(s.as_str(), ds.id.as_str()) {
                shared.push(format!("{s} ({prev}, {})", ds.id));
            }
        }
    }
    if shared.is_empty() {
        Ok(())
    } else {
        shared.sort();
        Err(Error::DataLeak(shared.join(", ")))
    }
}

/// Artifact fitted on the training datasets plus their standardized matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub artifact: PreprocessArtifact,
    pub train: ExpressionMatrix,
    pub meta: MetadataTable,
}

/// Gene filter, CPM/log2 and standardizer fitted on `train` only.
pub fn preprocess(train: &[&Dataset], filter: &FilterParams) -> Result<Preprocessed> {
    if train.is_empty() {
        return Err(Error::Precondition("no training datasets".into()));
    }
    check_no_leak(train)?;
    let counts = CountMatrix::concat_samples(&train.iter().map(|d| &d.counts).collect::<Vec<_>>())?;
    let meta = MetadataTable::concat(&train.iter().map(|d| &d.meta).collect::<Vec<_>>())?;
    let genes = filter_genes(&counts, &meta, filter)?;
    let expr = cpm_log_transform(&counts, &genes.genes)?;
    let artifact = fit_standardizer(&expr, &genes)?;
    let train = apply_standardizer(&expr, &artifact);
    Ok(Preprocessed { artifact, train, meta })
}

/// Apply a fitted artifact to any dataset; artifact genes it lacks become zero columns.
pub fn transform(ds: &Dataset, art: &PreprocessArtifact) -> Result<ExpressionMatrix> {
    let present: Vec<String> = {
        let index = ds.counts.gene_index();
        art.genes().iter().filter(|g| index.contains_key(g.as_str())).cloned().collect()
    };
    let expr = cpm_log_transform(&ds.counts, &present)?;
    Ok(apply_standardizer(&expr, art))
}

/// Stack matrices with identical gene columns sample-wise.
pub fn stack_samples(parts: &[ExpressionMatrix]) -> Result<ExpressionMatrix> {
    let first = parts.first().ok_or(Error::EmptyBatch)?;
    if let Some(m) = parts.iter().find(|m| m.gene_ids != first.gene_ids) {
        return Err(Error::Shape(format!(
            "gene columns differ: {} vs {} genes",
            first.gene_ids.len(),
            m.gene_ids.len()
        )));
    }
    let views: Vec<_> = parts.iter().map(|m| m.values.view()).collect();
    let values = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    ExpressionMatrix::new(
        first.gene_ids.clone(),
        parts.iter().flat_map(|m| m.sample_ids.iter().cloned()).collect(),
        values,
    )
}

/// Training datasets and holdout datasets of one fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold: usize,
    pub train: Vec<String>,
    pub holdout: Vec<String>,
}

impl FoldPlan {
    pub fn dir_name(&self) -> String {
        format!("fold_{}", self.fold)
    }
}

/// Leave-one-set-out needs at least three datasets; holdout mode trains on
/// everything not listed in `holdout`; intervention mode trains one model on all.
pub fn plan_folds(ids: &[String], mode: TrainMode, holdout: &[String]) -> Result<Vec<FoldPlan>> {
    match mode {
        TrainMode::Loso => {
            if ids.len() < 3 {
                return Err(Error::Precondition(format!(
                    "leave-one-set-out needs at least 3 datasets, got {}",
                    ids.len()
                )));
            }
            Ok(ids
                .iter()
                .enumerate()
                .map(|(fold, id)| FoldPlan {
                    fold,
                    train: ids.iter().filter(|o| *o != id).cloned().collect(),
                    holdout: vec![id.clone()],
                })
                .collect())
        }
        TrainMode::Holdout => {
            if let Some(missing) = holdout.iter().find(|h| !ids.contains(h)) {
                return Err(Error::Precondition(format!("holdout dataset {missing:?} was not supplied")));
            }
            let train: Vec<String> = ids.iter().filter(|i| !holdout.contains(i)).cloned().collect();
            if train.is_empty() || holdout.is_empty() {
                return Err(Error::Precondition("holdout mode needs training and holdout datasets".into()));
            }
            Ok(vec![FoldPlan {
                fold: 0,
                train,
                holdout: holdout.to_vec(),
            }])
        }
        TrainMode::Intervention => Ok(vec![FoldPlan {
            fold: 0,
            train: ids.to_vec(),
            holdout: Vec::new(),
        }]),
    }
}

/// Everything one fold produces.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldOutput {
    pub plan: FoldPlan,
    pub artifact: PreprocessArtifact,
    pub vocab: Vocabulary,
    pub outcome: FitOutcome,
    /// One result per holdout dataset.
    pub results: Vec<FoldResult>,
    /// Present when the model has a gate.
    pub ranking: Option<GeneRanking>,
}

fn find<'a>(datasets: &'a [Dataset], id: &str) -> Result<&'a Dataset> {
    datasets
        .iter()
        .find(|d| d.id == id)
        .ok_or_else(|| Error::Precondition(format!("dataset {id:?} was not supplied")))
}

/// Predictions of `model` on a holdout dataset.
pub fn predict_dataset(model: &AdversarialModel, art: &PreprocessArtifact, ds: &Dataset, fold: usize) -> Result<FoldResult> {
    let x = transform(ds, art)?;
    let pred = model.predict_age(&x.values)?;
    let rows = ds
        .meta
        .for_samples(&x.sample_ids)?
        .into_iter()
        .zip(pred)
        .map(|(m, p)| PredictionRecord {
            sample_id: m.sample_id.clone(),
            age: m.age,
            predicted: p,
            tissue: m.tissue.clone(),
        })
        .collect();
    FoldResult::new(ds.id.clone(), fold, rows)
}

/// Train and evaluate one fold. Preprocessing sees only the fold's training datasets.
pub fn run_fold(
    datasets: &[Dataset],
    plan: &FoldPlan,
    cfg: &ModelConfig,
    filter: &FilterParams,
    sink: &mut CheckpointSink<'_>,
) -> Result<FoldOutput> {
    let train: Vec<&Dataset> = plan.train.iter().map(|id| find(datasets, id)).collect::<Result<_>>()?;
    let holdout: Vec<&Dataset> = plan.holdout.iter().map(|id| find(datasets, id)).collect::<Result<_>>()?;
    check_no_leak(&train.iter().chain(&holdout).copied().collect::<Vec<_>>())?;

    let prep = preprocess(&train, filter)?;
    let vocab = Vocabulary::from_metadata(&prep.meta);
    let rows = prep.meta.for_samples(&prep.train.sample_ids)?;
    let data = TrainData::from_metadata(prep.train.values.clone(), &rows, &vocab)?;
    let outcome = Trainer::new(cfg, &data)?
        .with_artifact_hash(prep.artifact.content_hash())
        .run(sink)?;
    let model = &outcome.best.model;
    let results = holdout
        .iter()
        .map(|ds| predict_dataset(model, &prep.artifact, ds, plan.fold))
        .collect::<Result<Vec<_>>>()?;
    let ranking = model
        .bsf
        .as_ref()
        .map(|b| export_ranking(b.weights(), prep.artifact.genes(), model.config().mask_threshold))
        .transpose()?;
    Ok(FoldOutput {
        plan: plan.clone(),
        artifact: prep.artifact,
        vocab,
        outcome,
        results,
        ranking,
    })
}

pub const ARTIFACT_FILE: &str = "artifact.json";
pub const TRACE_FILE: &str = "trace.tsv";
pub const PREDICTIONS_FILE: &str = "predictions.tsv";
pub const GENES_FILE: &str = "genes.tsv";
pub const BEST_FILE: &str = "best.ckpt";
pub const LAST_FILE: &str = "last.ckpt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const PLAN_FILE: &str = "plan.json";

impl FoldOutput {
    /// Write artifact, trace, checkpoints, predictions and ranking into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        let mut put = |name: &str, bytes: &[u8]| -> Result<()> {
            let p = dir.join(name);
            write_file(&p, bytes)?;
            written.push(p);
            Ok(())
        };
        put(ARTIFACT_FILE, self.artifact.to_json()?.as_bytes())?;
        put(VOCAB_FILE, serde_json::to_string_pretty(&self.vocab)?.as_bytes())?;
        put(PLAN_FILE, serde_json::to_string_pretty(&self.plan)?.as_bytes())?;
        put(TRACE_FILE, self.outcome.trace.to_tsv().as_bytes())?;
        put(BEST_FILE, &self.outcome.best.to_bundle()?.to_bytes()?)?;
        put(LAST_FILE, &self.outcome.last.to_bundle()?.to_bytes()?)?;
        if !self.results.is_empty() {
            put(PREDICTIONS_FILE, predictions_tsv(&self.results).as_bytes())?;
        }
        if let Some(r) = &self.ranking {
            put(GENES_FILE, r.to_tsv().as_bytes())?;
        }
        Ok(written)
    }
}

pub fn predictions_tsv(results: &[FoldResult]) -> String {
    let mut out = String::new();
    for (i, r) in results.iter().enumerate() {
        let body = r.rows_tsv();
        let skip = if i == 0 { 0 } else { body.find('\n').map_or(body.len(), |p| p + 1) };
        out.push_str(&body[skip..]);
    }
    out
}

/// Parse a predictions table back into per-(dataset, fold) results.
pub fn read_predictions(text: &str) -> Result<Vec<FoldResult>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "dataset_id\tfold\tsample_id\tage\tpredicted\ttissue")) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: "expected a predictions header".into(),
            })
        }
    }
    let mut groups: BTreeMap<(usize, String), Vec<PredictionRecord>> = BTreeMap::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| Error::Parse {
            line: i + 1,
            msg: msg.to_string(),
        };
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let fold = f[1].parse().map_err(|_| bad("bad fold index"))?;
        let age = f[3].parse().map_err(|_| bad("bad age"))?;
        let predicted = f[4].parse().map_err(|_| bad("bad prediction"))?;
        groups.entry((fold, f[0].to_string())).or_default().push(PredictionRecord {
            sample_id: f[2].to_string(),
            age,
            predicted,
            tissue: f[5].to_string(),
        });
    }
    groups
        .into_iter()
        .map(|((fold, id), rows)| FoldResult::new(id, fold, rows))
        .collect()
}

/// Linear probes for each attribute on the model's latent representation.
pub fn probe_model(
    model: &AdversarialModel,
    x: &ExpressionMatrix,
    meta: &MetadataTable,
    attributes: &[Attribute],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeReport>> {
    let f = model.encode(&x.values)?;
    let rows = meta.for_samples(&x.sample_ids)?;
    attributes
        .iter()
        .map(|&a| {
            let labels: Vec<&str> = rows.iter().map(|r| r.attribute(a)).collect();
            probe_attribute(a.column(), &f, &labels, seed, cfg)
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::io(path, e))?))
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    /// Input path to SHA-256 of its contents.
    pub inputs: BTreeMap<String, String>,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config_hash: sha256_hex(serde_json::to_string(config)?.as_bytes()),
            inputs: BTreeMap::new(),
            seed,
            started_unix: unix_now(),
            finished_unix: 0,
            outputs: Vec::new(),
        })
    }

    /// Hash every regular file under `path` (or `path` itself).
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for e in entries {
                self.add_input(&e)?;
            }
        } else {
            self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        }
        Ok(())
    }

    /// Hash of everything that determines the outputs; timestamps excluded.
    pub fn content_hash(&self) -> String {
        let key = serde_json::json!({
            "tool_version": self.tool_version,
            "command": self.command,
            "config_hash": self.config_hash,
            "inputs": self.inputs,
            "seed": self.seed,
        });
        sha256_hex(key.to_string().as_bytes())
    }

    pub fn finish(&mut self, outputs: Vec<String>) {
        self.outputs = outputs;
        self.finished_unix = unix_now();
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut v = serde_json::to_value(self)?;
        v["content_hash"] = serde_json::Value::String(self.content_hash());
        write_file(path, serde_json::to_string_pretty(&v)?.as_bytes())
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}
