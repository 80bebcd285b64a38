//! JSON checkpoint container: model parameters, optimizer state, and the
//! training configuration, all round-trippable without precision loss.

use crate::error::{CurveError, Result};
use crate::model::{CurveModel, ModelDims};
use crate::rng::rng_from;
use crate::tensor::Tensor;
use crate::train::TrainConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AdamState {
    pub step: u64,
    /// First and second moments per parameter name.
    pub slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub dims: ModelDims,
    /// Epochs completed so far.
    pub epoch: usize,
    pub params: BTreeMap<String, ParamBlock>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_model(
        model: &CurveModel,
        config: &TrainConfig,
        epoch: usize,
        adam: AdamState,
    ) -> Self {
        let mut params = BTreeMap::new();
        model.visit(&mut |name, t| {
            params.insert(
                name,
                ParamBlock {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            );
        });
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            config: *config,
            dims: model.dims,
            epoch,
            params,
            adam,
        }
    }

    /// Rebuild the model with the stored parameters.
    pub fn to_model(&self) -> Result<CurveModel> {
        let mut model = CurveModel::init(self.dims, &mut rng_from(0));
        let mut missing = Vec::new();
        let mut err = None;
        model.visit_mut(&mut |name, t| {
            match self.params.get(&name) {
                Some(block) => {
                    if block.shape != t.shape() {
                        err = Some(CurveError::Checkpoint(format!(
                            "parameter '{name}' has shape {:?}, expected {:?}",
                            block.shape,
                            t.shape()
                        )));
                    } else {
                        *t = Tensor::new(block.shape.clone(), block.data.clone()).unwrap();
                    }
                }
                None => missing.push(name),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(CurveError::Checkpoint(format!(
                "missing parameter blocks: {missing:?}"
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ckpt: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(CurveError::Checkpoint(format!(
                "unsupported schema version {}",
                ckpt.schema_version
            )));
        }
        Ok(ckpt)
    }
}
