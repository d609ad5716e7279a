use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::ModelConfig;
use super::model::{build_model, AdversarialModel};
use super::train::{Optimizers, TrainTrace};
use crate::error::{Error, Result};
use crate::tensor::{AdamMeta, AdamState, Matrix, RngSnapshot, TensorBundle};

const FORMAT: &str = "advage-checkpoint";
const VERSION: u32 = 1;

/// Complete training state after a whole number of epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub steps: u64,
    pub model: AdversarialModel,
    pub opt: Optimizers,
    pub rng: RngSnapshot,
    pub trace: TrainTrace,
    /// Currently selected epoch, if any has qualified yet.
    pub best_epoch: Option<usize>,
    /// Hash of the preprocessing artifact the model was trained against.
    pub artifact_hash: Option<String>,
}

/// File name for the periodic checkpoint of `epoch`.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    version: u32,
    epoch: usize,
    steps: u64,
    config: ModelConfig,
    classes: Vec<usize>,
    rng: RngSnapshot,
    adam: [AdamMeta; 3],
    trace: TrainTrace,
    best_epoch: Option<usize>,
    artifact_hash: Option<String>,
}

const OPT_NAMES: [&str; 3] = ["bp", "dist", "task"];

impl Checkpoint {
    pub fn to_bundle(&self) -> Result<TensorBundle> {
        let opts = self.opt.as_array();
        let meta = Meta {
            format: FORMAT.into(),
            version: VERSION,
            epoch: self.epoch,
            steps: self.steps,
            config: self.model.config().clone(),
            classes: self.model.classes().to_vec(),
            rng: self.rng.clone(),
            adam: opts.map(|o| o.meta()),
            trace: self.trace.clone(),
            best_epoch: self.best_epoch,
            artifact_hash: self.artifact_hash.clone(),
        };
        let mut b = TensorBundle::new(serde_json::to_value(meta)?);
        b.extend_prefixed("model", self.model.state());
        for (name, o) in OPT_NAMES.iter().zip(opts) {
            for (i, (m, v)) in o.moments().enumerate() {
                b.push(format!("opt.{name}.m.{i}"), m.clone());
                b.push(format!("opt.{name}.v.{i}"), v.clone());
            }
        }
        Ok(b)
    }

    pub fn from_bundle(b: &TensorBundle) -> Result<Self> {
        if b.meta.get("format") != Some(&json!(FORMAT)) {
            return Err(Error::Checkpoint("not a training checkpoint".into()));
        }
        let meta: Meta = serde_json::from_value(b.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad checkpoint header: {e}")))?;
        if meta.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", meta.version)));
        }
        let mut model = build_model(&meta.config, &meta.classes)?;
        model.load_state(&b.prefixed("model"))?;
        let fresh = Optimizers::new(&model);
        let mut restored = Vec::with_capacity(3);
        for ((name, am), template) in OPT_NAMES.iter().zip(&meta.adam).zip(fresh.as_array()) {
            let mut first = Vec::new();
            let mut second = Vec::new();
            for (i, (m0, _)) in template.moments().enumerate() {
                let get = |kind: &str| -> Result<Matrix> {
                    let key = format!("opt.{name}.{kind}.{i}");
                    let t = b
                        .get(&key)
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                    if t.dim() != m0.dim() {
                        return Err(Error::Checkpoint(format!("{key} has shape {:?}, expected {:?}", t.dim(), m0.dim())));
                    }
                    Ok(t.clone())
                };
                first.push(get("m")?);
                second.push(get("v")?);
            }
            restored.push(AdamState::restore(am, first, second));
        }
        let [bp, dist, task]: [AdamState; 3] = restored.try_into().expect("three optimizers");
        Ok(Self {
            epoch: meta.epoch,
            steps: meta.steps,
            model,
            opt: Optimizers { bp, dist, task },
            rng: meta.rng,
            trace: meta.trace,
            best_epoch: meta.best_epoch,
            artifact_hash: meta.artifact_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_bundle()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bundle(&TensorBundle::load(path)?)
    }
}

/// Non-finite floats travel through JSON as `null` and come back as NaN.
pub(crate) mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}
