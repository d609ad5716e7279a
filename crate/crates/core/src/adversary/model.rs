use std::collections::HashMap;

use ndarray::{Array1, Axis};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::bsf::{BsfLayer, BsfTape};
use crate::error::{Error, Result};
use crate::ingest::Attribute;
use crate::tensor::{
    categorical_cross_entropy, mse_loss, softmax_rows, Backward, LayerSpec, Matrix, Mode, ParamTensor, RngState, Stack,
    Tape,
};

/// RNG stream used for weight initialization.
const INIT_STREAM: u64 = 10;

/// One mini-batch: standardized inputs, ages and one one-hot matrix per attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Matrix,
    pub age: Array1<f64>,
    /// One matrix per attribute in [`Attribute::ALL`] order.
    pub labels: Vec<Matrix>,
}

/// Disjoint parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Gate weights plus the encoder stack.
    Encoder,
    TaskHead,
    /// Trunk plus every attribute head.
    BiasPredictor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasLoss {
    /// Weighted sum of per-head cross-entropies.
    pub h: f64,
    pub per_head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillerLoss {
    pub l_dist: f64,
    /// Bias loss on the batch; not computed when `alpha == 0`.
    pub h: Option<f64>,
    pub omega: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskLoss {
    /// MSE plus the task head's l2 penalty.
    pub loss: f64,
    pub mse: f64,
}

struct EncoderTape {
    bsf: Option<BsfTape>,
    stack: Tape,
}

struct BpTape {
    trunk: Tape,
    heads: Vec<Tape>,
}

/// Encoder (optionally gated), age regressor and multi-head bias predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialModel {
    cfg: ModelConfig,
    classes: Vec<usize>,
    pub bsf: Option<BsfLayer>,
    pub encoder: Stack,
    pub task: Stack,
    pub trunk: Stack,
    pub heads: Vec<Stack>,
}

fn encoder_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let [w1, w2, w3, w4] = cfg.encoder_widths;
    let l2 = cfg.encoder_l2;
    let mut s = vec![
        LayerSpec::dense_l2(cfg.input_dim, w1, l2),
        LayerSpec::batchnorm(w1),
        LayerSpec::relu(w1),
        LayerSpec::dense_l2(w1, w2, l2),
        LayerSpec::batchnorm(w2),
        LayerSpec::relu(w2),
        LayerSpec::dropout(w2, cfg.dropout),
        LayerSpec::dense_l2(w2, w3, l2),
        LayerSpec::batchnorm(w3),
        LayerSpec::relu(w3),
        LayerSpec::dropout(w3, cfg.dropout),
    ];
    if cfg.noise_std > 0.0 {
        s.push(LayerSpec::gaussian_noise(w3, cfg.noise_std));
    }
    s.extend([
        LayerSpec::dense_l2(w3, w4, l2),
        LayerSpec::batchnorm(w4),
        LayerSpec::relu(w4),
        LayerSpec::dense_l2(w4, cfg.latent_dim, l2),
    ]);
    s
}

fn task_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let (h1, h2) = cfg.task_hidden();
    vec![
        LayerSpec::dense_l2(cfg.latent_dim, h1, cfg.task_l2),
        LayerSpec::relu(h1),
        LayerSpec::dense_l2(h1, h2, cfg.task_l2),
        LayerSpec::relu(h2),
        LayerSpec::dense(h2, 1),
    ]
}

fn trunk_specs(cfg: &ModelConfig) -> Vec<LayerSpec> {
    let mut s = Vec::new();
    let mut width = cfg.latent_dim;
    for _ in 0..cfg.trunk_depth {
        s.extend([
            LayerSpec::dense(width, cfg.bp_width),
            LayerSpec::batchnorm(cfg.bp_width),
            LayerSpec::relu(cfg.bp_width),
            LayerSpec::dropout(cfg.bp_width, cfg.dropout),
        ]);
        width = cfg.bp_width;
    }
    s
}

fn head_specs(cfg: &ModelConfig, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(cfg.bp_width, cfg.bp_head_width),
        LayerSpec::relu(cfg.bp_head_width),
        LayerSpec::dropout(cfg.bp_head_width, cfg.dropout),
        LayerSpec::dense(cfg.bp_head_width, classes),
    ]
}

/// Build and initialize from `cfg.seed`. `classes` holds the level count of
/// each attribute in [`Attribute::ALL`] order.
pub fn build_model(cfg: &ModelConfig, classes: &[usize]) -> Result<AdversarialModel> {
    cfg.validate()?;
    if cfg.input_dim == 0 {
        return Err(Error::Config("input_dim must be positive".into()));
    }
    if classes.len() != Attribute::ALL.len() || classes.contains(&0) {
        return Err(Error::Config(format!(
            "expected a positive class count for each of {} attributes, got {classes:?}",
            Attribute::ALL.len()
        )));
    }
    let mut rng = RngState::with_stream(cfg.seed, INIT_STREAM);
    let encoder = Stack::build(encoder_specs(cfg), &mut rng)?;
    let task = Stack::build(task_specs(cfg), &mut rng)?;
    let trunk = Stack::build(trunk_specs(cfg), &mut rng)?;
    let heads = classes
        .iter()
        .map(|&k| Stack::build(head_specs(cfg, k), &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let bsf = cfg.use_bsf.then(|| {
        let mut b = BsfLayer::new(cfg.input_dim);
        b.per_sample = cfg.per_sample_mask;
        b
    });
    Ok(AdversarialModel {
        cfg: cfg.clone(),
        classes: classes.to_vec(),
        bsf,
        encoder,
        task,
        trunk,
        heads,
    })
}

impl AdversarialModel {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    /// Set the regressor's output bias, e.g. to the mean training age.
    pub fn set_age_offset(&mut self, offset: f64) {
        let bias = self.task.params_mut().pop().expect("task head ends in a dense layer");
        bias.set_value(Matrix::from_elem((1, 1), offset));
    }

    pub fn params(&self, group: ParamGroup) -> Vec<&ParamTensor> {
        match group {
            ParamGroup::Encoder => self.bsf.iter().map(|b| b.param()).chain(self.encoder.params()).collect(),
            ParamGroup::TaskHead => self.task.params(),
            ParamGroup::BiasPredictor => {
                let mut v = self.trunk.params();
                for h in &self.heads {
                    v.extend(h.params());
                }
                v
            }
        }
    }

    pub fn params_mut(&mut self, groups: &[ParamGroup]) -> Vec<&mut ParamTensor> {
        let mut out = Vec::new();
        let Self {
            bsf,
            encoder,
            task,
            trunk,
            heads,
            ..
        } = self;
        let (mut bsf, mut encoder, mut task, mut trunk, mut heads) =
            (Some(bsf), Some(encoder), Some(task), Some(trunk), Some(heads));
        for g in groups {
            match g {
                ParamGroup::Encoder => {
                    if let Some(b) = bsf.take() {
                        out.extend(b.as_mut().map(|b| b.param_mut()));
                    }
                    if let Some(e) = encoder.take() {
                        out.extend(e.params_mut());
                    }
                }
                ParamGroup::TaskHead => {
                    if let Some(t) = task.take() {
                        out.extend(t.params_mut());
                    }
                }
                ParamGroup::BiasPredictor => {
                    if let Some(t) = trunk.take() {
                        out.extend(t.params_mut());
                    }
                    if let Some(hs) = heads.take() {
                        for h in hs.iter_mut() {
                            out.extend(h.params_mut());
                        }
                    }
                }
            }
        }
        out
    }

    fn zero_grads(&mut self, groups: &[ParamGroup]) {
        for p in self.params_mut(groups) {
            p.zero_grad();
        }
    }

    /// Named tensors (parameters and batch-norm statistics) of one group.
    pub fn group_state(&self, group: ParamGroup) -> Vec<(String, Matrix)> {
        let prefixed = |prefix: &str, items: Vec<(String, Matrix)>| {
            items
                .into_iter()
                .map(|(n, m)| (format!("{prefix}.{n}"), m))
                .collect::<Vec<_>>()
        };
        match group {
            ParamGroup::Encoder => {
                let mut v: Vec<(String, Matrix)> = self
                    .bsf
                    .iter()
                    .map(|b| ("bsf.w".to_string(), b.param().value.clone()))
                    .collect();
                v.extend(prefixed("encoder", self.encoder.state()));
                v
            }
            ParamGroup::TaskHead => prefixed("task", self.task.state()),
            ParamGroup::BiasPredictor => {
                let mut v = prefixed("trunk", self.trunk.state());
                for (k, h) in self.heads.iter().enumerate() {
                    v.extend(prefixed(&format!("head{k}"), h.state()));
                }
                v
            }
        }
    }

    pub fn state(&self) -> Vec<(String, Matrix)> {
        [ParamGroup::Encoder, ParamGroup::TaskHead, ParamGroup::BiasPredictor]
            .into_iter()
            .flat_map(|g| self.group_state(g))
            .collect()
    }

    pub fn load_state(&mut self, state: &HashMap<String, Matrix>) -> Result<()> {
        let sub = |prefix: &str| -> HashMap<String, Matrix> {
            let lead = format!("{prefix}.");
            state
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(&lead).map(|r| (r.to_string(), v.clone())))
                .collect()
        };
        if let Some(b) = &mut self.bsf {
            let w = state
                .get("bsf.w")
                .ok_or_else(|| Error::Checkpoint("missing tensor bsf.w".into()))?;
            if w.dim() != b.param().shape() {
                return Err(Error::Checkpoint("bsf.w has the wrong shape".into()));
            }
            b.param_mut().set_value(w.clone());
        }
        self.encoder.load_state(&sub("encoder"))?;
        self.task.load_state(&sub("task"))?;
        self.trunk.load_state(&sub("trunk"))?;
        for k in 0..self.heads.len() {
            self.heads[k].load_state(&sub(&format!("head{k}")))?;
        }
        Ok(())
    }

    /// SHA-256 over the bit patterns of a group's state.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.group_state(group) {
            h.update(name.as_bytes());
            for v in m.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let n = batch.x.nrows();
        if n < 2 {
            return Err(Error::Batch(n));
        }
        if batch.x.ncols() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "batch has {} features, model expects {}",
                batch.x.ncols(),
                self.cfg.input_dim
            )));
        }
        if batch.age.len() != n {
            return Err(Error::Shape(format!("{} ages for {n} samples", batch.age.len())));
        }
        if batch.labels.len() != self.heads.len() {
            return Err(Error::Label(format!(
                "batch carries {} attribute label sets, expected {}",
                batch.labels.len(),
                self.heads.len()
            )));
        }
        for ((attr, labels), &k) in Attribute::ALL.iter().zip(&batch.labels).zip(&self.classes) {
            if labels.dim() != (n, k) {
                return Err(Error::Label(format!(
                    "{attr} labels are {:?}, expected ({n}, {k})",
                    labels.dim()
                )));
            }
        }
        Ok(())
    }

    fn encode_forward(&self, x: &Matrix, mode: Mode, rng: &mut RngState) -> Result<(Matrix, EncoderTape)> {
        if x.ncols() != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.cfg.input_dim
            )));
        }
        let (gated, bsf) = match &self.bsf {
            Some(b) => {
                let (y, t) = b.forward(x, mode, self.cfg.mask_threshold, rng)?;
                (Some(y), Some(t))
            }
            None => (None, None),
        };
        let (f, stack) = self.encoder.forward(gated.as_ref().unwrap_or(x), mode, rng)?;
        Ok((f, EncoderTape { bsf, stack }))
    }

    fn encoder_backward(&mut self, tape: EncoderTape, upstream: &Matrix, l2: bool) -> Result<()> {
        let opts = Backward {
            param_grads: true,
            l2,
            input_grad: tape.bsf.is_some(),
        };
        let dx = self.encoder.backward(tape.stack, upstream, opts)?;
        if let (Some(b), Some(t), Some(dx)) = (&mut self.bsf, tape.bsf, dx) {
            b.backward(t, &dx)?;
        }
        Ok(())
    }

    fn bp_forward(&self, f: &Matrix, mode: Mode, rng: &mut RngState) -> Result<(Vec<Matrix>, BpTape)> {
        let (h, trunk) = self.trunk.forward(f, mode, rng)?;
        let mut logits = Vec::with_capacity(self.heads.len());
        let mut heads = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let (y, t) = head.forward(&h, mode, rng)?;
            logits.push(y);
            heads.push(t);
        }
        Ok((logits, BpTape { trunk, heads }))
    }

    fn commit_bp(&mut self, tape: &BpTape) {
        self.trunk.commit_stats(&tape.trunk);
        for (h, t) in self.heads.iter_mut().zip(&tape.heads) {
            h.commit_stats(t);
        }
    }

    /// Backpropagate head upstreams; returns the gradient at the latent input
    /// when `input_grad` is set.
    fn bp_backward(&mut self, tape: BpTape, upstream: &[Matrix], param_grads: bool, input_grad: bool) -> Result<Option<Matrix>> {
        let opts = Backward {
            param_grads,
            l2: param_grads,
            input_grad: true,
        };
        let mut dh = Matrix::zeros((tape.trunk.batch_size(), self.cfg.bp_width));
        for ((head, t), up) in self.heads.iter_mut().zip(tape.heads).zip(upstream) {
            dh += &head.backward(t, up, opts)?.expect("input gradient requested");
        }
        self.trunk.backward(tape.trunk, &dh, Backward { input_grad, ..opts })
    }

    /// Weighted head losses and their logit gradients.
    fn head_losses(&self, logits: &[Matrix], labels: &[Matrix]) -> Result<(f64, Vec<f64>, Vec<Matrix>)> {
        let weights = self.cfg.head_weights.as_vec();
        let mut h = 0.0;
        let mut per_head = Vec::with_capacity(logits.len());
        let mut grads = Vec::with_capacity(logits.len());
        for ((y, onehot), w) in logits.iter().zip(labels).zip(weights) {
            let (l, g) = categorical_cross_entropy(y, onehot)?;
            h += w * l;
            per_head.push(l);
            grads.push(g * w);
        }
        if !h.is_finite() {
            return Err(Error::Numerics(format!("bias loss is {h}")));
        }
        Ok((h, per_head, grads))
    }

    /// Bias loss with gradients written to the bias predictor only.
    pub fn bias_loss(&mut self, batch: &Batch, rng: &mut RngState) -> Result<BiasLoss> {
        self.bias_pass(batch, rng, false)
    }

    pub(crate) fn bias_pass(&mut self, batch: &Batch, rng: &mut RngState, commit: bool) -> Result<BiasLoss> {
        self.check_batch(batch)?;
        self.zero_grads(&[ParamGroup::Encoder, ParamGroup::TaskHead]);
        let (f, _) = self.encode_forward(&batch.x, Mode::Train, rng)?;
        let (logits, tape) = self.bp_forward(&f, Mode::Train, rng)?;
        let (h, per_head, ups) = self.head_losses(&logits, &batch.labels)?;
        if commit {
            self.commit_bp(&tape);
        }
        self.bp_backward(tape, &ups, true, false)?;
        Ok(BiasLoss { h, per_head })
    }

    /// Encoder-attributable regularization: dense l2 terms plus the gate penalty.
    pub fn omega(&self) -> f64 {
        self.encoder.l2_penalty() + self.bsf.as_ref().map_or(0.0, |b| b.penalty(&self.cfg.sparsity).0)
    }

    /// `-alpha * H + omega` with gradients written to the encoder (and gate)
    /// only; the bias predictor is used frozen.
    pub fn distiller_loss(&mut self, batch: &Batch, alpha: f64, rng: &mut RngState) -> Result<DistillerLoss> {
        self.distiller_pass(batch, alpha, rng, false)
    }

    pub(crate) fn distiller_pass(&mut self, batch: &Batch, alpha: f64, rng: &mut RngState, commit: bool) -> Result<DistillerLoss> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {alpha} must be a nonnegative number")));
        }
        self.zero_grads(&[ParamGroup::TaskHead, ParamGroup::BiasPredictor]);
        let omega = self.omega();
        let h = if alpha == 0.0 {
            self.encoder.l2_grads();
            if let Some(b) = &mut self.bsf {
                b.param_mut().zero_grad();
            }
            None
        } else {
            self.check_batch(batch)?;
            let (f, enc_tape) = self.encode_forward(&batch.x, Mode::Train, rng)?;
            let (logits, bp_tape) = self.bp_forward(&f, Mode::Train, rng)?;
            let (h, _, ups) = self.head_losses(&logits, &batch.labels)?;
            let reversed: Vec<Matrix> = ups.into_iter().map(|g| g * -alpha).collect();
            if commit {
                self.encoder.commit_stats(&enc_tape.stack);
            }
            let df = self.bp_backward(bp_tape, &reversed, false, true)?.expect("latent gradient requested");
            self.encoder_backward(enc_tape, &df, true)?;
            Some(h)
        };
        if let Some(b) = &mut self.bsf {
            let (_, g) = b.penalty(&self.cfg.sparsity);
            b.param_mut().grad += &g;
        }
        Ok(DistillerLoss {
            l_dist: omega - alpha * h.unwrap_or(0.0),
            h,
            omega,
        })
    }

    /// Age MSE plus the task head's l2, with gradients into encoder and task head.
    pub fn task_loss(&mut self, batch: &Batch, rng: &mut RngState) -> Result<TaskLoss> {
        self.task_pass(batch, rng, false)
    }

    pub(crate) fn task_pass(&mut self, batch: &Batch, rng: &mut RngState, commit: bool) -> Result<TaskLoss> {
        self.check_batch(batch)?;
        self.zero_grads(&[ParamGroup::BiasPredictor]);
        let (f, enc_tape) = self.encode_forward(&batch.x, Mode::Train, rng)?;
        let (y, task_tape) = self.task.forward(&f, Mode::Train, rng)?;
        let (mse, g) = mse_loss(y.column(0), batch.age.view())?;
        if !mse.is_finite() {
            return Err(Error::Numerics(format!("task loss is {mse}")));
        }
        let loss = mse + self.task.l2_penalty();
        if commit {
            self.encoder.commit_stats(&enc_tape.stack);
            self.task.commit_stats(&task_tape);
        }
        let df = self
            .task
            .backward(task_tape, &g.insert_axis(Axis(1)), Backward::default())?
            .expect("latent gradient requested");
        self.encoder_backward(enc_tape, &df, false)?;
        Ok(TaskLoss { loss, mse })
    }

    /// Latent representation in inference mode.
    pub fn encode(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.encode_forward(x, Mode::Eval, &mut RngState::new(0))?.0)
    }

    pub fn predict_age(&self, x: &Matrix) -> Result<Array1<f64>> {
        let f = self.encode(x)?;
        let (y, _) = self.task.forward(&f, Mode::Eval, &mut RngState::new(0))?;
        Ok(y.column(0).to_owned())
    }

    /// Inference-mode class probabilities of every attribute head.
    pub fn attribute_probs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let f = self.encode(x)?;
        let (logits, _) = self.bp_forward(&f, Mode::Eval, &mut RngState::new(0))?;
        Ok(logits.iter().map(softmax_rows).collect())
    }

    /// True when the gate is present but closes every gene at inference.
    pub fn gate_closed(&self) -> bool {
        self.bsf
            .as_ref()
            .is_some_and(|b| b.eval_mask(self.cfg.mask_threshold).iter().all(|&on| !on))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::DEFAULT_STEP;
    use crate::tensor::{grad_check, one_hot, Objective};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            latent_dim: 8,
            use_bsf: false,
            encoder_widths: [7, 6, 5, 4],
            bp_width: 5,
            bp_head_width: 4,
            batch_size: 6,
            ..ModelConfig::default()
        }
    }

    pub(crate) fn tiny_batch(n: usize, classes: &[usize], seed: u64) -> Batch {
        let mut r = RngState::new(seed);
        let x = Matrix::from_shape_simple_fn((n, 6), || r.normal());
        let age = Array1::from_shape_fn(n, |_| 10.0 + 5.0 * r.normal());
        let labels = classes
            .iter()
            .map(|&k| one_hot(&(0..n).map(|i| (i + r.below(2)) % k).collect::<Vec<_>>(), k).unwrap())
            .collect();
        Batch { x, age, labels }
    }

    const CLASSES: [usize; 4] = [2, 3, 4, 5];

    fn jittered(cfg: &ModelConfig) -> AdversarialModel {
        let mut m = build_model(cfg, &CLASSES).unwrap();
        let mut r = RngState::new(77);
        for p in m.params_mut(&[ParamGroup::Encoder, ParamGroup::TaskHead, ParamGroup::BiasPredictor]) {
            if p.bounds().is_none() {
                p.value.mapv_inplace(|v| v + 0.1 * r.normal());
            }
        }
        m
    }

    #[test]
    fn table_dimensions() {
        let cfg = ModelConfig {
            input_dim: 1000,
            ..ModelConfig::default()
        };
        let m = build_model(&cfg, &CLASSES).unwrap();
        let dense: Vec<(usize, usize)> = m
            .encoder
            .specs()
            .iter()
            .filter(|s| s.kind == crate::tensor::LayerKind::Dense)
            .map(|s| (s.in_dim, s.out_dim))
            .collect();
        assert_eq!(dense, [(1000, 256), (256, 256), (256, 106), (106, 64), (64, 60)]);
        let task: Vec<(usize, usize)> = m
            .task
            .specs()
            .iter()
            .filter(|s| s.kind == crate::tensor::LayerKind::Dense)
            .map(|s| (s.in_dim, s.out_dim))
            .collect();
        assert_eq!(task, [(60, 30), (30, 15), (15, 1)]);
        assert_eq!(m.heads.len(), 4);
        assert_eq!(m.heads[3].out_dim(), 5);
        assert!(m.bsf.as_ref().unwrap().weights().iter().all(|&w| w == 1.0));

        let cfg40 = ModelConfig {
            input_dim: 10,
            latent_dim: 40,
            ..ModelConfig::default()
        };
        let outs: Vec<usize> = build_model(&cfg40, &CLASSES)
            .unwrap()
            .task
            .specs()
            .iter()
            .filter(|s| s.kind == crate::tensor::LayerKind::Dense)
            .map(|s| s.out_dim)
            .collect();
        assert_eq!(outs, [20, 10, 1]);
    }

    #[test]
    fn build_is_seeded_and_validated() {
        let cfg = tiny_config();
        assert_eq!(build_model(&cfg, &CLASSES).unwrap(), build_model(&cfg, &CLASSES).unwrap());
        let other = ModelConfig { seed: 1, ..cfg.clone() };
        assert_ne!(build_model(&other, &CLASSES).unwrap().state(), build_model(&cfg, &CLASSES).unwrap().state());
        let small = ModelConfig { latent_dim: 3, ..cfg };
        assert_eq!(build_model(&small, &CLASSES).unwrap_err().name(), "ConfigError");
    }

    #[test]
    fn uniform_logits_give_sum_of_log_class_counts() {
        let cfg = tiny_config();
        let mut m = build_model(&cfg, &CLASSES).unwrap();
        for head in &mut m.heads {
            let n = head.params().len();
            for p in head.params_mut().into_iter().skip(n - 2) {
                p.set_value(Matrix::zeros(p.shape()));
            }
        }
        let batch = tiny_batch(6, &CLASSES, 1);
        let r = m.bias_loss(&batch, &mut RngState::new(0)).unwrap();
        let expect: f64 = CLASSES.iter().map(|&k| (k as f64).ln()).sum();
        assert!((r.h - expect).abs() < 1e-12, "{} vs {expect}", r.h);
    }

    #[test]
    fn missing_labels_and_tiny_batches_rejected() {
        let mut m = build_model(&tiny_config(), &CLASSES).unwrap();
        let mut batch = tiny_batch(6, &CLASSES, 1);
        batch.labels.pop();
        assert_eq!(m.bias_loss(&batch, &mut RngState::new(0)).unwrap_err().name(), "LabelError");
        let single = tiny_batch(1, &CLASSES, 1);
        assert_eq!(m.task_loss(&single, &mut RngState::new(0)).unwrap_err().name(), "BatchError");
        let wide = Matrix::zeros((3, 7));
        assert_eq!(m.encode(&wide).unwrap_err().name(), "ShapeError");
    }

    #[test]
    fn task_loss_arithmetic() {
        let cfg = ModelConfig {
            task_l2: 0.0,
            ..tiny_config()
        };
        let mut m = build_model(&cfg, &CLASSES).unwrap();
        for p in m.task.params_mut() {
            p.set_value(Matrix::zeros(p.shape()));
        }
        let mut batch = tiny_batch(2, &CLASSES, 3);
        batch.age = Array1::from(vec![1.0, 3.0]);
        let r = m.task_loss(&batch, &mut RngState::new(0)).unwrap();
        assert_eq!(r.loss, 5.0);
        m.set_age_offset(2.0);
        batch.age = Array1::from(vec![2.0, 2.0]);
        assert_eq!(m.task_loss(&batch, &mut RngState::new(0)).unwrap().loss, 0.0);
    }

    #[test]
    fn distiller_formula_and_alpha_zero() {
        let cfg = ModelConfig {
            encoder_l2: 0.01,
            ..tiny_config()
        };
        let mut m = build_model(&cfg, &CLASSES).unwrap();
        let batch = tiny_batch(6, &CLASSES, 2);
        let h = m.clone().bias_loss(&batch, &mut RngState::new(5)).unwrap().h;
        let d = m.distiller_loss(&batch, 1.0, &mut RngState::new(5)).unwrap();
        assert!((d.h.unwrap() - h).abs() < 1e-12);
        assert!((d.l_dist - (d.omega - h)).abs() < 1e-12);
        assert!(d.omega > 0.0);

        let zero = m.distiller_loss(&batch, 0.0, &mut RngState::new(5)).unwrap();
        assert_eq!(zero.h, None);
        assert_eq!(zero.l_dist, zero.omega);
        let mut only_l2 = m.encoder.clone();
        only_l2.l2_grads();
        for (a, b) in m.encoder.params().iter().zip(only_l2.params()) {
            assert_eq!(a.grad, b.grad);
        }
    }

    #[test]
    fn adversarial_gradient_scales_exactly_with_alpha() {
        let cfg = tiny_config();
        let base = build_model(&cfg, &CLASSES).unwrap();
        let batch = tiny_batch(6, &CLASSES, 4);
        let grads = |alpha: f64| {
            let mut m = base.clone();
            m.distiller_loss(&batch, alpha, &mut RngState::new(9)).unwrap();
            m.params(ParamGroup::Encoder)
                .iter()
                .flat_map(|p| p.grad.iter().copied().collect::<Vec<_>>())
                .collect::<Vec<f64>>()
        };
        let g1 = grads(1.0);
        let g2 = grads(2.0);
        assert!(g1.iter().any(|&v| v != 0.0));
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
        let g3 = grads(0.37);
        let scale = g1.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in g1.iter().zip(&g3) {
            assert!((0.37 * a - b).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn losses_touch_only_their_groups() {
        let cfg = ModelConfig {
            use_bsf: true,
            ..tiny_config()
        };
        let batch = tiny_batch(6, &CLASSES, 6);
        let all = [ParamGroup::Encoder, ParamGroup::TaskHead, ParamGroup::BiasPredictor];
        let nonzero = |m: &AdversarialModel, g: ParamGroup| m.params(g).iter().any(|p| p.grad.iter().any(|&v| v != 0.0));
        let mut m = jittered(&cfg);
        m.bias_loss(&batch, &mut RngState::new(0)).unwrap();
        assert_eq!(all.map(|g| nonzero(&m, g)), [false, false, true]);
        m.distiller_loss(&batch, 1.0, &mut RngState::new(0)).unwrap();
        assert_eq!(all.map(|g| nonzero(&m, g)), [true, false, false]);
        m.task_loss(&batch, &mut RngState::new(0)).unwrap();
        assert_eq!(all.map(|g| nonzero(&m, g)), [true, true, false]);
    }

    #[test]
    fn state_round_trip_and_hashes() {
        let cfg = ModelConfig {
            use_bsf: true,
            ..tiny_config()
        };
        let a = jittered(&cfg);
        let mut b = build_model(&cfg, &CLASSES).unwrap();
        assert_ne!(a.group_hash(ParamGroup::Encoder), b.group_hash(ParamGroup::Encoder));
        b.load_state(&a.state().into_iter().collect()).unwrap();
        assert_eq!(a.state(), b.state());
        for g in [ParamGroup::Encoder, ParamGroup::TaskHead, ParamGroup::BiasPredictor] {
            assert_eq!(a.group_hash(g), b.group_hash(g));
        }
    }

    #[test]
    fn inference_is_pure_and_shaped() {
        let m = jittered(&tiny_config());
        let x = tiny_batch(5, &CLASSES, 8).x;
        assert_eq!(m.encode(&x).unwrap().dim(), (5, 8));
        assert_eq!(m.predict_age(&x).unwrap(), m.predict_age(&x).unwrap());
        let probs = m.attribute_probs(&x).unwrap();
        assert_eq!(probs.iter().map(|p| p.ncols()).collect::<Vec<_>>(), CLASSES);
    }

    #[test]
    fn closed_gate_predicts_like_zero_input() {
        let cfg = ModelConfig {
            use_bsf: true,
            ..tiny_config()
        };
        let mut m = jittered(&cfg);
        m.bsf.as_mut().unwrap().param_mut().set_value(Matrix::from_elem((1, 6), 0.2));
        assert!(m.gate_closed());
        let x = tiny_batch(4, &CLASSES, 9).x;
        let zeros = Matrix::zeros(x.raw_dim());
        assert_eq!(m.predict_age(&x).unwrap(), m.predict_age(&zeros).unwrap());
    }

    /// The three loss paths as finite-difference objectives over the groups
    /// each one differentiates.
    struct LossPath {
        model: AdversarialModel,
        batch: Batch,
        path: Path,
    }

    #[derive(Clone, Copy)]
    enum Path {
        Bias,
        Distiller(f64),
        Task,
    }

    impl LossPath {
        fn groups(&self) -> &'static [ParamGroup] {
            match self.path {
                Path::Bias => &[ParamGroup::BiasPredictor],
                Path::Distiller(_) => &[ParamGroup::Encoder],
                Path::Task => &[ParamGroup::Encoder, ParamGroup::TaskHead],
            }
        }
    }

    impl Objective for LossPath {
        fn evaluate(&mut self, _with_grads: bool) -> Result<f64> {
            let mut rng = RngState::new(123);
            Ok(match self.path {
                Path::Bias => self.model.bias_loss(&self.batch, &mut rng)?.h,
                Path::Distiller(a) => self.model.distiller_loss(&self.batch, a, &mut rng)?.l_dist,
                Path::Task => self.model.task_loss(&self.batch, &mut rng)?.loss,
            })
        }

        fn visit_params(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
            let groups = self.groups();
            for p in self.model.params_mut(groups) {
                f(p);
            }
        }
    }

    #[test]
    fn all_three_loss_paths_match_finite_differences() {
        let cfg = ModelConfig {
            encoder_l2: 0.01,
            task_l2: 0.05,
            ..tiny_config()
        };
        for path in [Path::Bias, Path::Distiller(1.0), Path::Distiller(2.5), Path::Task] {
            let mut obj = LossPath {
                model: jittered(&cfg),
                batch: tiny_batch(6, &CLASSES, 10),
                path,
            };
            let r = grad_check(&mut obj, 1e-4, DEFAULT_STEP).unwrap();
            assert!(r.passed, "{r:?}");
        }
    }
}
