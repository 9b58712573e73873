use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::encoders::ClassTransform;
use crate::error::{Error, Result};

use super::config::TrainConfig;
use super::model::Model;

pub const CHECKPOINT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u64,
    config_hash: String,
    config: TrainConfig,
    epoch: usize,
    validation_r1: Option<f64>,
    words: Vec<String>,
    mask_id: usize,
    attribute_dim: usize,
    embedding_dim: usize,
    object_classes: Vec<String>,
    text_classes: Vec<String>,
    class_transform: Vec<Vec<f64>>,
    params: serde_json::Value,
}

/// Where a loaded checkpoint came from in its training run.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub epoch: usize,
    pub validation_r1: Option<f64>,
}

pub fn save_checkpoint(model: &Model, path: &Path, epoch: usize, validation_r1: Option<f64>) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config_hash: model.config.hash(),
        config: model.config.clone(),
        epoch,
        validation_r1,
        words: model.words.clone(),
        mask_id: model.mask_id,
        attribute_dim: model.attribute_dim,
        embedding_dim: model.embedding_dim(),
        object_classes: model.class_transform.object_names.clone(),
        text_classes: model.class_transform.text_names.clone(),
        class_transform: model.class_transform.matrix.rows().into_iter().map(|r| r.to_vec()).collect(),
        params: model.store.to_json(),
    };
    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, serde_json::to_vec(&file)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointInfo)> {
    let file: CheckpointFile = serde_json::from_slice(&std::fs::read(path)?)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: file.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if file.config.hash() != file.config_hash {
        return Err(Error::Config(format!(
            "checkpoint config hash {} does not match its config ({})",
            file.config_hash,
            file.config.hash()
        )));
    }
    let (rows, cols) = (file.object_classes.len(), file.text_classes.len());
    if file.class_transform.len() != rows || file.class_transform.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("checkpoint class transform does not match its class lists".into()));
    }
    let matrix = Array2::from_shape_fn((rows, cols), |(i, j)| file.class_transform[i][j]);
    let transform = ClassTransform {
        matrix,
        object_names: file.object_classes,
        text_names: file.text_classes,
    };
    let mut model = Model::new(
        &file.config,
        file.words,
        file.mask_id,
        file.attribute_dim,
        file.embedding_dim,
        transform,
        None,
    )?;
    model.store.load_json(&file.params)?;
    Ok((
        model,
        CheckpointInfo {
            epoch: file.epoch,
            validation_r1: file.validation_r1,
        },
    ))
}
