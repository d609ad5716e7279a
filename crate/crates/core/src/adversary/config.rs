use serde::{Deserialize, Serialize};

use crate::bsf::{SparsityPenalty, DEFAULT_MASK_THRESHOLD};
use crate::error::{Error, Result};
use crate::ingest::Attribute;

/// How training data and model selection are organized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One fold per held-out dataset.
    #[default]
    Loso,
    /// Fixed training datasets, fixed holdout datasets.
    Holdout,
    /// Single model on all data, periodic checkpoints, optionally a fixed epoch.
    Intervention,
}

/// Weight of each attribute head in the bias loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadWeights {
    pub sex: f64,
    pub tissue: f64,
    pub platform: f64,
    pub series_id: f64,
}

impl Default for HeadWeights {
    fn default() -> Self {
        Self {
            sex: 1.0,
            tissue: 1.0,
            platform: 1.0,
            series_id: 1.0,
        }
    }
}

impl HeadWeights {
    pub fn get(&self, attr: Attribute) -> f64 {
        match attr {
            Attribute::Sex => self.sex,
            Attribute::Tissue => self.tissue,
            Attribute::Platform => self.platform,
            Attribute::SeriesId => self.series_id,
        }
    }

    pub fn as_vec(&self) -> Vec<f64> {
        Attribute::ALL.iter().map(|&a| self.get(a)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of input genes; 0 means "take it from the data".
    pub input_dim: usize,
    pub latent_dim: usize,
    pub use_bsf: bool,
    pub alpha: f64,
    pub lr_bp: f64,
    pub lr_dist: f64,
    pub lr_task: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub bp_updates: usize,
    pub dist_updates: usize,
    pub task_updates: usize,
    pub burn_in_epochs: usize,
    pub max_epochs: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub head_weights: HeadWeights,
    /// Repeats of the bias-predictor trunk block.
    pub trunk_depth: usize,
    pub dropout: f64,
    /// Gaussian noise before the bottleneck; 0 removes the layer.
    pub noise_std: f64,
    pub task_l2: f64,
    pub encoder_l2: f64,
    pub sparsity: SparsityPenalty,
    pub mask_threshold: f64,
    pub per_sample_mask: bool,
    /// Widths of the four hidden encoder blocks.
    pub encoder_widths: [usize; 4],
    pub bp_width: usize,
    pub bp_head_width: usize,
    /// Share of the training samples held back for model selection.
    pub val_fraction: f64,
    pub mode: TrainMode,
    /// Intervention mode: report this epoch instead of the best post-burn-in one.
    pub select_epoch: Option<usize>,
    /// Draw a new mini-batch for every inner update instead of one per step.
    pub fresh_batches: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 0,
            latent_dim: 60,
            use_bsf: true,
            alpha: 1.0,
            lr_bp: 3e-4,
            lr_dist: 2e-4,
            lr_task: 1e-3,
            batch_size: 64,
            steps_per_epoch: 50,
            bp_updates: 5,
            dist_updates: 2,
            task_updates: 1,
            burn_in_epochs: 50,
            max_epochs: 500,
            checkpoint_every: 10,
            seed: 0,
            head_weights: HeadWeights::default(),
            trunk_depth: 1,
            dropout: 0.3,
            noise_std: 0.05,
            task_l2: 1e-4,
            encoder_l2: 0.0,
            sparsity: SparsityPenalty::default(),
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            per_sample_mask: false,
            encoder_widths: [256, 256, 106, 64],
            bp_width: 256,
            bp_head_width: 128,
            val_fraction: 0.2,
            mode: TrainMode::Loso,
            select_epoch: None,
            fresh_batches: true,
        }
    }
}

impl ModelConfig {
    /// Settings of the single-model intervention run.
    pub fn intervention() -> Self {
        Self {
            latent_dim: 40,
            batch_size: 128,
            max_epochs: 500,
            mode: TrainMode::Intervention,
            select_epoch: Some(180),
            ..Self::default()
        }
    }

    pub fn task_hidden(&self) -> (usize, usize) {
        ((self.latent_dim / 2).max(1), (self.latent_dim / 4).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.latent_dim < 4 {
            return bad(format!("latent_dim {} < 4 leaves degenerate task heads", self.latent_dim));
        }
        if self.encoder_widths.contains(&0) || self.bp_width == 0 || self.bp_head_width == 0 {
            return bad("layer widths must be positive".into());
        }
        if self.trunk_depth == 0 {
            return bad("trunk_depth must be at least 1".into());
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be a nonnegative number", self.alpha));
        }
        for (name, lr) in [("lr_bp", self.lr_bp), ("lr_dist", self.lr_dist), ("lr_task", self.lr_task)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} = {lr} must be positive"));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Batch(self.batch_size));
        }
        if self.steps_per_epoch == 0 || self.max_epochs == 0 {
            return bad("steps_per_epoch and max_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.noise_std >= 0.0) {
            return bad("dropout must lie in [0, 1) and noise_std be nonnegative".into());
        }
        if !(self.task_l2 >= 0.0 && self.encoder_l2 >= 0.0) {
            return bad("l2 strengths must be nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction {} outside [0, 1)", self.val_fraction));
        }
        if HeadWeights::as_vec(&self.head_weights).iter().any(|w| !(*w >= 0.0)) {
            return bad("head weights must be nonnegative".into());
        }
        if let Some(e) = self.select_epoch {
            if e == 0 || e > self.max_epochs {
                return bad(format!("select_epoch {e} outside 1..={}", self.max_epochs));
            }
        }
        self.sparsity.validate()
    }
}
