use ndarray::{Array1, Axis};
use serde::{Deserialize, Serialize};

use super::checkpoint::{checkpoint_name, nan_as_null, Checkpoint};
use super::config::{ModelConfig, TrainMode};
use super::model::{build_model, AdversarialModel, Batch, ParamGroup};
use crate::error::{Error, Result};
use crate::eval_stats::attribute_r2;
use crate::ingest::{Attribute, MetadataTable, SampleMeta};
use crate::tensor::{one_hot, AdamState, Matrix, RngState};

const TRAIN_STREAM: u64 = 20;
const SPLIT_STREAM: u64 = 30;

const BP_GROUPS: &[ParamGroup] = &[ParamGroup::BiasPredictor];
const DIST_GROUPS: &[ParamGroup] = &[ParamGroup::Encoder];
const TASK_GROUPS: &[ParamGroup] = &[ParamGroup::Encoder, ParamGroup::TaskHead];

/// Sorted attribute levels seen in training metadata.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// One level list per attribute in [`Attribute::ALL`] order.
    pub levels: Vec<Vec<String>>,
}

impl Vocabulary {
    pub fn from_metadata(meta: &MetadataTable) -> Self {
        Self {
            levels: Attribute::ALL.iter().map(|&a| meta.vocabulary(a)).collect(),
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        self.levels.iter().map(Vec::len).collect()
    }

    pub fn encode(&self, row: &SampleMeta) -> Result<Vec<usize>> {
        Attribute::ALL
            .iter()
            .zip(&self.levels)
            .map(|(&a, levels)| {
                let v = row.attribute(a);
                levels
                    .binary_search_by(|l| l.as_str().cmp(v))
                    .map_err(|_| Error::Label(format!("unseen {a} level {v:?} for sample {}", row.sample_id)))
            })
            .collect()
    }
}

/// Standardized training matrix with ages and integer attribute labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    x: Matrix,
    age: Array1<f64>,
    labels: Vec<Vec<usize>>,
    classes: Vec<usize>,
    onehot: Vec<Matrix>,
}

impl TrainData {
    /// `labels` holds one vector per attribute, one entry per sample.
    pub fn new(x: Matrix, age: Array1<f64>, labels: Vec<Vec<usize>>, classes: Vec<usize>) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::Batch(n));
        }
        if age.len() != n {
            return Err(Error::Shape(format!("{} ages for {n} samples", age.len())));
        }
        if x.iter().chain(age.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerics("training data has non-finite entries".into()));
        }
        if labels.len() != classes.len() || labels.iter().any(|l| l.len() != n) {
            return Err(Error::Label(format!(
                "expected {} label vectors of length {n}",
                classes.len()
            )));
        }
        let onehot = labels
            .iter()
            .zip(&classes)
            .map(|(l, &k)| one_hot(l, k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            x,
            age,
            labels,
            classes,
            onehot,
        })
    }

    /// Rows of `x` follow `rows`; labels come from `vocab`.
    pub fn from_metadata(x: Matrix, rows: &[&SampleMeta], vocab: &Vocabulary) -> Result<Self> {
        if rows.len() != x.nrows() {
            return Err(Error::Shape(format!("{} metadata rows for {} samples", rows.len(), x.nrows())));
        }
        let mut labels = vec![Vec::with_capacity(rows.len()); Attribute::ALL.len()];
        for r in rows {
            for (k, l) in vocab.encode(r)?.into_iter().enumerate() {
                labels[k].push(l);
            }
        }
        let age = rows.iter().map(|r| r.age).collect();
        Self::new(x, age, labels, vocab.classes())
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn age(&self) -> &Array1<f64> {
        &self.age
    }

    pub fn labels(&self) -> &[Vec<usize>] {
        &self.labels
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn onehot(&self) -> &[Matrix] {
        &self.onehot
    }

    pub fn rows(&self, idx: &[usize]) -> Batch {
        Batch {
            x: self.x.select(Axis(0), idx),
            age: self.age.select(Axis(0), idx),
            labels: self.onehot.iter().map(|m| m.select(Axis(0), idx)).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            x: self.x.clone(),
            age: self.age.clone(),
            labels: self.onehot.clone(),
        }
    }

    /// Uniform draw with replacement.
    pub fn sample(&self, size: usize, rng: &mut RngState) -> Batch {
        let idx: Vec<usize> = (0..size).map(|_| rng.below(self.len())).collect();
        self.rows(&idx)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            self.x.select(Axis(0), idx),
            self.age.select(Axis(0), idx),
            self.labels.iter().map(|l| idx.iter().map(|&i| l[i]).collect()).collect(),
            self.classes.clone(),
        )
    }

    /// Random (train, validation) split; validation is the full set when
    /// `frac` rounds to no samples.
    pub fn split(&self, frac: f64, rng: &mut RngState) -> Result<(Self, Self)> {
        let n = self.len();
        let n_val = ((frac * n as f64).round() as usize).min(n.saturating_sub(2));
        if n_val == 0 {
            return Ok((self.clone(), self.clone()));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let (val, train) = idx.split_at(n_val);
        let (mut val, mut train) = (val.to_vec(), train.to_vec());
        val.sort_unstable();
        train.sort_unstable();
        if val.len() < 2 {
            return Ok((self.subset(&train)?, self.clone()));
        }
        Ok((self.subset(&train)?, self.subset(&val)?))
    }
}

/// The three optimizers of the alternating scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub bp: AdamState,
    pub dist: AdamState,
    pub task: AdamState,
}

impl Optimizers {
    pub fn new(model: &AdversarialModel) -> Self {
        let cfg = model.config();
        let over = |groups: &[ParamGroup]| -> Vec<&crate::tensor::ParamTensor> {
            groups.iter().flat_map(|&g| model.params(g)).collect()
        };
        Self {
            bp: AdamState::new(cfg.lr_bp, &over(BP_GROUPS)),
            dist: AdamState::new(cfg.lr_dist, &over(DIST_GROUPS)),
            task: AdamState::new(cfg.lr_task, &over(TASK_GROUPS)),
        }
    }

    pub fn as_array(&self) -> [&AdamState; 3] {
        [&self.bp, &self.dist, &self.task]
    }
}

/// Mean losses over the inner updates of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub l_bp: f64,
    pub l_dist: f64,
    pub l_task: f64,
}

fn next_batch(data: &TrainData, shared: &Option<Batch>, size: usize, rng: &mut RngState) -> Batch {
    match shared {
        Some(b) => b.clone(),
        None => data.sample(size, rng),
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// One alternating step: bias-predictor, distiller, then task updates.
pub fn train_step(model: &mut AdversarialModel, opt: &mut Optimizers, data: &TrainData, rng: &mut RngState) -> Result<StepRecord> {
    let cfg = model.config().clone();
    if cfg.batch_size < 2 {
        return Err(Error::Batch(cfg.batch_size));
    }
    let shared = (!cfg.fresh_batches).then(|| data.sample(cfg.batch_size, rng));

    let mut l_bp = 0.0;
    for _ in 0..cfg.bp_updates {
        let b = next_batch(data, &shared, cfg.batch_size, rng);
        l_bp += model.bias_pass(&b, rng, true)?.h;
        opt.bp.step(&mut model.params_mut(BP_GROUPS))?;
    }
    let mut l_dist = 0.0;
    for _ in 0..cfg.dist_updates {
        let b = if cfg.alpha > 0.0 {
            next_batch(data, &shared, cfg.batch_size, rng)
        } else {
            Batch {
                x: Matrix::zeros((0, cfg.input_dim)),
                age: Array1::zeros(0),
                labels: Vec::new(),
            }
        };
        l_dist += model.distiller_pass(&b, cfg.alpha, rng, true)?.l_dist;
        opt.dist.step(&mut model.params_mut(DIST_GROUPS))?;
    }
    let mut l_task = 0.0;
    for _ in 0..cfg.task_updates {
        let b = next_batch(data, &shared, cfg.batch_size, rng);
        l_task += model.task_pass(&b, rng, true)?.loss;
        opt.task.step(&mut model.params_mut(TASK_GROUPS))?;
    }
    Ok(StepRecord {
        l_bp: mean(l_bp, cfg.bp_updates),
        l_dist: mean(l_dist, cfg.dist_updates),
        l_task: mean(l_task, cfg.task_updates),
    })
}

/// Per-epoch diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    #[serde(with = "nan_as_null")]
    pub l_task: f64,
    #[serde(with = "nan_as_null")]
    pub l_bp: f64,
    #[serde(with = "nan_as_null")]
    pub l_dist: f64,
    #[serde(with = "nan_as_null")]
    pub val_mae: f64,
    /// Training-set r2 of each bias head, [`Attribute::ALL`] order; NaN for
    /// single-level attributes.
    pub r2: Vec<NanF64>,
    #[serde(with = "nan_as_null")]
    pub r2_mean: f64,
    pub checkpoint: Option<String>,
}

/// f64 that survives JSON when NaN.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NanF64(#[serde(with = "nan_as_null")] pub f64);

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn get(&self, epoch: usize) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == epoch)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tsteps\tl_task\tl_bp\tl_dist\tval_mae");
        for a in Attribute::ALL {
            out.push_str(&format!("\tr2_{}", a.column()));
        }
        out.push_str("\tr2_mean\tcheckpoint\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch, r.steps, r.l_task, r.l_bp, r.l_dist, r.val_mae
            ));
            for v in &r.r2 {
                out.push_str(&format!("\t{}", v.0));
            }
            out.push_str(&format!("\t{}\t{}\n", r.r2_mean, r.checkpoint.as_deref().unwrap_or("-")));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointEvent {
    /// Scheduled save every `checkpoint_every` epochs.
    Periodic,
    /// State after the last fully completed epoch, emitted before a numerics failure.
    LastGood,
}

pub type CheckpointSink<'a> = dyn FnMut(CheckpointEvent, &Checkpoint) -> Result<()> + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOutcome {
    /// Selected model; the last epoch when no epoch qualified.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub last: Checkpoint,
    pub trace: TrainTrace,
}

/// Resumable epoch-level driver around [`train_step`].
#[derive(Debug, Clone)]
pub struct Trainer {
    model: AdversarialModel,
    opt: Optimizers,
    rng: RngState,
    epoch: usize,
    steps: u64,
    trace: TrainTrace,
    best: Option<Checkpoint>,
    last_good: Checkpoint,
    train: TrainData,
    val: TrainData,
    artifact_hash: Option<String>,
}

fn resolve(cfg: &ModelConfig, data: &TrainData) -> Result<ModelConfig> {
    let mut cfg = cfg.clone();
    if cfg.input_dim == 0 {
        cfg.input_dim = data.x().ncols();
    } else if cfg.input_dim != data.x().ncols() {
        return Err(Error::Shape(format!(
            "config expects {} genes, data has {}",
            cfg.input_dim,
            data.x().ncols()
        )));
    }
    cfg.validate()?;
    Ok(cfg)
}

impl Trainer {
    pub fn new(cfg: &ModelConfig, data: &TrainData) -> Result<Self> {
        let cfg = resolve(cfg, data)?;
        let (train, val) = data.split(cfg.val_fraction, &mut RngState::with_stream(cfg.seed, SPLIT_STREAM))?;
        let mut model = build_model(&cfg, data.classes())?;
        model.set_age_offset(train.age().mean().expect("non-empty training set"));
        let opt = Optimizers::new(&model);
        let rng = RngState::with_stream(cfg.seed, TRAIN_STREAM);
        let last_good = Checkpoint {
            epoch: 0,
            steps: 0,
            model: model.clone(),
            opt: opt.clone(),
            rng: rng.snapshot(),
            trace: TrainTrace::default(),
            best_epoch: None,
            artifact_hash: None,
        };
        Ok(Self {
            model,
            opt,
            rng,
            epoch: 0,
            steps: 0,
            trace: TrainTrace::default(),
            best: None,
            last_good,
            train,
            val,
            artifact_hash: None,
        })
    }

    /// Continue from `ckpt`; `best` must be the checkpoint of its selected epoch.
    pub fn resume(ckpt: Checkpoint, best: Option<Checkpoint>, data: &TrainData) -> Result<Self> {
        let cfg = resolve(ckpt.model.config(), data)?;
        if data.classes() != ckpt.model.classes() {
            return Err(Error::Checkpoint("attribute levels differ from the checkpoint".into()));
        }
        if best.as_ref().map(|b| b.epoch) != ckpt.best_epoch {
            return Err(Error::Checkpoint(format!(
                "checkpoint selects epoch {:?} but the supplied best is {:?}",
                ckpt.best_epoch,
                best.as_ref().map(|b| b.epoch)
            )));
        }
        let (train, val) = data.split(cfg.val_fraction, &mut RngState::with_stream(cfg.seed, SPLIT_STREAM))?;
        let rng = RngState::restore(&ckpt.rng).map_err(|e| Error::Checkpoint(format!("bad rng position: {e}")))?;
        Ok(Self {
            model: ckpt.model.clone(),
            opt: ckpt.opt.clone(),
            rng,
            epoch: ckpt.epoch,
            steps: ckpt.steps,
            trace: ckpt.trace.clone(),
            best,
            artifact_hash: ckpt.artifact_hash.clone(),
            last_good: ckpt,
            train,
            val,
        })
    }

    pub fn with_artifact_hash(mut self, hash: impl Into<String>) -> Self {
        self.artifact_hash = Some(hash.into());
        self.last_good.artifact_hash = self.artifact_hash.clone();
        self
    }

    pub fn model(&self) -> &AdversarialModel {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn trace(&self) -> &TrainTrace {
        &self.trace
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            steps: self.steps,
            model: self.model.clone(),
            opt: self.opt.clone(),
            rng: self.rng.snapshot(),
            trace: self.trace.clone(),
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            artifact_hash: self.artifact_hash.clone(),
        }
    }

    fn cfg(&self) -> &ModelConfig {
        self.model.config()
    }

    fn evaluate_epoch(&self, losses: [f64; 3]) -> Result<EpochRecord> {
        let pred = self.model.predict_age(self.val.x())?;
        let val_mae = (&pred - self.val.age()).mapv(f64::abs).mean().unwrap_or(f64::NAN);
        if !val_mae.is_finite() {
            return Err(Error::Numerics(format!("validation MAE is {val_mae}")));
        }
        let probs = self.model.attribute_probs(self.train.x())?;
        let mut r2 = Vec::with_capacity(probs.len());
        for ((p, onehot), &k) in probs.iter().zip(self.train.onehot()).zip(self.train.classes()) {
            r2.push(NanF64(if k < 2 { f64::NAN } else { attribute_r2(p, onehot)?.mean_r2 }));
        }
        let defined: Vec<f64> = r2.iter().map(|v| v.0).filter(|v| v.is_finite()).collect();
        let r2_mean = if defined.is_empty() {
            f64::NAN
        } else {
            defined.iter().sum::<f64>() / defined.len() as f64
        };
        Ok(EpochRecord {
            epoch: self.epoch,
            steps: self.steps,
            l_task: losses[2],
            l_bp: losses[0],
            l_dist: losses[1],
            val_mae,
            r2,
            r2_mean,
            checkpoint: None,
        })
    }

    fn selects(&self, rec: &EpochRecord, periodic: bool) -> bool {
        let cfg = self.cfg();
        if cfg.mode == TrainMode::Intervention {
            if let Some(e) = cfg.select_epoch {
                return rec.epoch == e;
            }
            if !periodic {
                return false;
            }
        }
        if rec.epoch <= cfg.burn_in_epochs {
            return false;
        }
        match self.best.as_ref().and_then(|b| self.trace.get(b.epoch)) {
            Some(b) => rec.val_mae < b.val_mae,
            None => true,
        }
    }

    fn run_epoch(&mut self, sink: &mut CheckpointSink<'_>) -> Result<()> {
        let n = self.cfg().steps_per_epoch;
        let mut sums = [0.0; 3];
        for _ in 0..n {
            let r = train_step(&mut self.model, &mut self.opt, &self.train, &mut self.rng)?;
            for (s, v) in sums.iter_mut().zip([r.l_bp, r.l_dist, r.l_task]) {
                *s += v;
            }
        }
        self.steps += n as u64;
        self.epoch += 1;
        let mut rec = self.evaluate_epoch(sums.map(|s| s / n as f64))?;
        let every = self.cfg().checkpoint_every;
        let periodic = every > 0 && self.epoch % every == 0;
        if periodic {
            rec.checkpoint = Some(checkpoint_name(self.epoch));
        }
        let selected = self.selects(&rec, periodic);
        self.trace.epochs.push(rec);
        if selected {
            self.best = None;
            let mut ck = self.checkpoint();
            ck.best_epoch = Some(self.epoch);
            self.best = Some(ck);
        }
        let ck = self.checkpoint();
        if periodic {
            sink(CheckpointEvent::Periodic, &ck)?;
        }
        self.last_good = ck;
        Ok(())
    }

    /// Train up to `epochs` more epochs (never past `max_epochs`).
    pub fn run_epochs(&mut self, epochs: usize, sink: &mut CheckpointSink<'_>) -> Result<()> {
        let stop = (self.epoch + epochs).min(self.cfg().max_epochs);
        while self.epoch < stop {
            if let Err(e) = self.run_epoch(sink) {
                if matches!(e, Error::Numerics(_)) {
                    sink(CheckpointEvent::LastGood, &self.last_good)?;
                }
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn finish(self) -> FitOutcome {
        let last = self.checkpoint();
        let best = self.best.unwrap_or_else(|| last.clone());
        FitOutcome {
            best_epoch: best.epoch,
            best,
            trace: self.trace,
            last,
        }
    }

    pub fn run(mut self, sink: &mut CheckpointSink<'_>) -> Result<FitOutcome> {
        let remaining = self.cfg().max_epochs - self.epoch;
        self.run_epochs(remaining, sink)?;
        Ok(self.finish())
    }
}

/// Train to `max_epochs` without persisting intermediate checkpoints.
pub fn fit(cfg: &ModelConfig, data: &TrainData) -> Result<FitOutcome> {
    Trainer::new(cfg, data)?.run(&mut |_, _| Ok(()))
}
