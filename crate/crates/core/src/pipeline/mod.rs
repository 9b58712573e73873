//! Training, evaluation, ablation and checkpointing.

mod checkpoint;
mod config;
mod eval;
mod model;
mod step;
mod train;

use serde::Serialize;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo, CHECKPOINT_VERSION};
pub use config::{LossWeights, Method, TrainConfig};
pub use eval::{evaluate, evaluate_scenes, random_rows, rank_scenes, upper_bound_rows};
pub use model::Model;
pub use step::{forward_step, score_queries, teacher_labels, total_loss, Batch, LossBreakdown, LossParts, StepOutput};
pub use train::{is_validation_scene, split_scenes, train, EpochLog, TrainOutcome};

use crate::error::{Error, Result};
use crate::geometry::{nms, AxisAlignedBox};
use crate::metrics::{MetricsReport, DEFAULT_CELLS};
use crate::synth_data::Corpus;

/// Ablation rows in table order, with the config each one trains.
pub fn ablation_configs(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut base = base.clone();
    base.method = Method::Full;
    let mut match_only = base.clone();
    match_only.lambda_cls = 0.0;
    match_only.use_recon = false;
    match_only.similarity.use_class_term = false;
    match_only.similarity.use_feature_term = true;
    let mut cls_only = base.clone();
    cls_only.lambda_match = 0.0;
    cls_only.use_recon = false;
    cls_only.similarity.use_class_term = true;
    cls_only.similarity.use_feature_term = false;
    let mut cls_match = base.clone();
    cls_match.use_recon = false;
    vec![
        ("match_only", match_only),
        ("cls_only", cls_only),
        ("cls_match", cls_match),
        ("cls_match_recon", base),
    ]
}

/// Trains the four ablation rows on `train_corpus`, evaluates each on
/// `eval_corpus`, and adds the Random row.
pub fn run_ablation(train_corpus: &Corpus, eval_corpus: &Corpus, base: &TrainConfig) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        log::info!("ablation row {name}");
        let outcome = train(train_corpus, &cfg, None)?;
        outcome.best.check_compatible(eval_corpus)?;
        let scenes: Vec<usize> = (0..eval_corpus.records.len()).collect();
        for mut r in evaluate_scenes(&outcome.best, eval_corpus, &scenes, &DEFAULT_CELLS)? {
            r.method = name.to_string();
            rows.push(r);
        }
    }
    rows.extend(random_rows(eval_corpus, base.seed, &DEFAULT_CELLS)?);
    Ok(MetricsReport {
        rows,
        seed: base.seed,
        config_hash: base.hash(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VizProposal {
    pub index: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 6],
}

#[derive(Debug, Clone, Serialize)]
pub struct VizObject {
    pub id: usize,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 6],
}

#[derive(Debug, Clone, Serialize)]
pub struct VizQuery {
    pub sentence: String,
    pub target: usize,
    pub split: crate::synth_data::Split,
    pub scores: Vec<f64>,
    pub best: usize,
    /// Proposals surviving non-maximum suppression on the scores, best first.
    pub nms_keep: Vec<usize>,
}

/// Boxes and scores of one scene, shaped for an external viewer.
#[derive(Debug, Clone, Serialize)]
pub struct SceneViz {
    pub scene_id: String,
    pub objects: Vec<VizObject>,
    pub proposals: Vec<VizProposal>,
    pub queries: Vec<VizQuery>,
}

pub fn export_viz(model: &Model, corpus: &Corpus, scene_id: &str, nms_iou: f64) -> Result<SceneViz> {
    model.check_compatible(corpus)?;
    let record = corpus
        .records
        .iter()
        .find(|r| r.scene.scene_id == scene_id)
        .ok_or_else(|| Error::InvalidArgument(format!("no scene `{scene_id}` in corpus")))?;
    let queries: Vec<_> = record.sentences.iter().map(|s| (0, s)).collect();
    let scores = score_queries(model, &[record], &queries)?;
    let as_array = |b: &AxisAlignedBox| b.to_array();
    let mut out = Vec::new();
    for (q, s) in record.sentences.iter().enumerate() {
        let row = scores.row(q).to_vec();
        let keep = nms(&record.proposals.boxes, &row, nms_iou)?;
        out.push(VizQuery {
            sentence: corpus.vocab.decode(&s.tokens),
            target: s.target_object_id,
            split: s.split,
            best: keep[0],
            scores: row,
            nms_keep: keep,
        });
    }
    Ok(SceneViz {
        scene_id: scene_id.to_string(),
        objects: record
            .scene
            .objects
            .iter()
            .map(|o| VizObject {
                id: o.id,
                class: corpus.config.classes[o.class_id].object_name.clone(),
                bbox: as_array(&o.bbox),
            })
            .collect(),
        proposals: record
            .proposals
            .boxes
            .iter()
            .enumerate()
            .map(|(index, b)| VizProposal { index, bbox: as_array(b) })
            .collect(),
        queries: out,
    })
}
