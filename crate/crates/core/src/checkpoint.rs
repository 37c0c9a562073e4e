//! Weight files: versioned JSON with one shape-tagged record per tensor.
//! Training state is optional and only needed to resume.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Matrix;
use crate::tokens::Vocabulary;
use crate::train::{Adam, EpochLoss, TrainConfig, TrainState};

pub const CHECKPOINT_FORMAT: &str = "groundtrack-weights";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub config: TrainConfig,
    pub epoch: usize,
    pub optimizer: Adam,
    pub curve: Vec<EpochLoss>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vec<String>,
    pub tensors: Vec<TensorRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingRecord>,
}

fn schema(path: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.to_string(),
        message: message.into(),
    }
}

impl Checkpoint {
    pub fn from_weights(w: &ModelWeights) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: w.config.clone(),
            vocabulary: w.vocab.words().to_vec(),
            tensors: w
                .tensors()
                .into_iter()
                .map(|(name, t)| TensorRecord {
                    name: name.to_string(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
            training: None,
        }
    }

    pub fn from_state(s: &TrainState) -> Self {
        Self {
            training: Some(TrainingRecord {
                config: s.config.clone(),
                epoch: s.epoch,
                optimizer: s.optimizer.clone(),
                curve: s.curve.clone(),
            }),
            ..Self::from_weights(&s.weights)
        }
    }

    pub fn weights(&self) -> Result<ModelWeights> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(schema("format", format!("expected `{CHECKPOINT_FORMAT}`, got `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(schema("version", format!("unsupported checkpoint version {}", self.version)));
        }
        let find = |name: &str| -> Result<Matrix> {
            let (i, r) = self
                .tensors
                .iter()
                .enumerate()
                .find(|(_, r)| r.name == name)
                .ok_or_else(|| schema("tensors", format!("missing tensor `{name}`")))?;
            Matrix::from_vec(r.rows, r.cols, r.data.clone())
                .map_err(|_| schema(&format!("tensors[{i}].data"), format!("`{name}` does not hold {}x{} values", r.rows, r.cols)))
        };
        let vocab = Vocabulary::from_parts(self.vocabulary.clone(), find("vocab.embeddings")?)?;
        // Seeded skeleton with the right shapes; every tensor is overwritten below.
        let mut w = ModelWeights::init_with_vocab(self.config.clone(), vocab, &mut ChaCha8Rng::seed_from_u64(0))?;
        for (name, t) in w.tensors_mut() {
            let m = find(name)?;
            if m.shape() != t.shape() {
                return Err(schema(
                    "tensors",
                    format!("`{name}` is {:?}, the configuration needs {:?}", m.shape(), t.shape()),
                ));
            }
            *t = m;
        }
        if !w.is_finite() {
            return Err(Error::Integrity("checkpoint holds non-finite weights".into()));
        }
        Ok(w)
    }

    pub fn train_state(&self) -> Result<TrainState> {
        let t = self
            .training
            .as_ref()
            .ok_or_else(|| schema("training", "checkpoint has no training state"))?;
        Ok(TrainState {
            config: t.config.clone(),
            weights: self.weights()?,
            optimizer: t.optimizer.clone(),
            epoch: t.epoch,
            curve: t.curve.clone(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(s);
        serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub fn save_weights(w: &ModelWeights, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::from_weights(w).save(path)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights> {
    Checkpoint::load(path)?.weights()
}
