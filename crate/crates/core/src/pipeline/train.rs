use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metrics::EvalSplit;
use crate::optim::{clip_global_norm, cosine_lr, AdamW};
use crate::synth_data::{derive_seed, Corpus};
use crate::tape::Tape;

use super::checkpoint::save_checkpoint;
use super::config::{LossWeights, TrainConfig};
use super::eval::evaluate_scenes;
use super::model::Model;
use super::step::{forward_step, Batch};

/// Whether a scene belongs to the validation split: a stable hash of its id
/// falls below `fraction`.
pub fn is_validation_scene(scene_id: &str, fraction: f64) -> bool {
    let digest = Sha256::digest(scene_id.as_bytes());
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(first) % 10_000) < (fraction * 10_000.0).round() as u64
}

/// Indices of training and validation scenes; scenes without sentences are dropped.
pub fn split_scenes(corpus: &Corpus, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, r) in corpus.records.iter().enumerate() {
        if r.sentences.is_empty() {
            continue;
        }
        if is_validation_scene(&r.scene.scene_id, fraction) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// Averages of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub distill: f64,
    pub cls: f64,
    pub matching: f64,
    pub recon: f64,
    pub total: f64,
    /// Share of queries whose top coarse candidate overlaps the target.
    pub coarse_accuracy: Option<f64>,
    /// Share of queries whose lowest-loss candidate overlaps the target.
    pub teacher_accuracy: Option<f64>,
    pub candidate_mass: Option<f64>,
    pub validation_r1_025: Option<f64>,
    pub validation_r1_05: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation R@1,IoU@0.5 (the last
    /// epoch when there is no validation split).
    pub best: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Scenes of one epoch grouped into batches of at least two.
fn epoch_batches<'a>(corpus: &'a Corpus, train: &[usize], config: &TrainConfig, epoch: usize) -> Vec<Batch<'a>> {
    let mut order = train.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, 11)));
    let mut groups: Vec<Vec<usize>> = order.chunks(config.batch_scenes).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < 2) {
        let last = groups.pop().expect("non-empty");
        groups.last_mut().expect("non-empty").extend(last);
    }
    groups
        .into_iter()
        .map(|g| {
            let records: Vec<_> = g.iter().map(|&i| &corpus.records[i]).collect();
            let mut queries = Vec::new();
            for (s, &scene) in g.iter().enumerate() {
                let mut picks: Vec<usize> = (0..corpus.records[scene].sentences.len()).collect();
                let seed = derive_seed(config.seed, (epoch as u64) << 32 | scene as u64, 12);
                picks.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                picks.truncate(config.queries_per_scene);
                picks.sort_unstable();
                queries.extend(picks.into_iter().map(|i| (s, i)));
            }
            Batch { records, queries }
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Trains a model on `corpus`. With `out_dir`, the best checkpoint
/// (`best.ckpt`) and a JSON-lines epoch log (`train_log.jsonl`) are written
/// there as training goes, so a divergence leaves the last good checkpoint
/// behind.
pub fn train(corpus: &Corpus, config: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = Model::for_corpus(config, corpus)?;
    let (train_idx, val_idx) = split_scenes(corpus, config.validation_fraction);
    if train_idx.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training needs at least two scenes with sentences, found {}",
            train_idx.len()
        )));
    }
    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::File::create(dir.join("train_log.jsonl"))?)
        }
        None => None,
    };
    let mut optimizer = AdamW::new(&model.store, config.weight_decay);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let lr = cosine_lr(config.learning_rate, config.lr_min, epoch - 1, config.epochs);
        let weights = LossWeights::for_epoch(config, epoch);
        let ignore = config.ignore_top_half(epoch);
        let batches = epoch_batches(corpus, &train_idx, config, epoch);
        let mut parts: [Vec<f64>; 5] = Default::default();
        let (mut coarse, mut teacher, mut labelled) = (0usize, 0usize, 0usize);
        let mut mass = Vec::new();
        for (step, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let mask_seed = derive_seed(config.seed, (epoch as u64) << 32 | step as u64, 13);
            let out = forward_step(&model, &mut tape, batch, &weights, ignore, mask_seed).map_err(|e| match e {
                Error::NonFinite(reason) => Error::Divergence { epoch, step, reason },
                other => other,
            })?;
            let b = out.breakdown;
            if !(b.total.abs() <= config.divergence_threshold) {
                log::error!("diverged at epoch {epoch} step {step}: {b:?}");
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: format!("total loss {}", b.total),
                });
            }
            log::debug!(
                "epoch {epoch} step {step}: total {:.4} distill {:.4} cls {:.4} match {:.4} recon {:.4}",
                b.total,
                b.distill,
                b.cls,
                b.matching,
                b.recon
            );
            for (acc, v) in parts.iter_mut().zip([b.distill, b.cls, b.matching, b.recon, b.total]) {
                acc.push(v);
            }
            if !out.labels.is_empty() {
                coarse += out.coarse_hits;
                teacher += out.teacher_hits;
                labelled += out.labels.len();
                mass.extend(out.labels.iter().map(|l| l.candidate_mass()));
            }
            let mut grads = tape.backward(out.total)?.into_params();
            let norm = clip_global_norm(&mut grads, config.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    reason: "non-finite gradient".into(),
                });
            }
            optimizer.step(&mut model.store, &grads, lr);
        }

        let (v25, v50) = if val_idx.is_empty() {
            (None, None)
        } else {
            let rows = evaluate_scenes(&model, corpus, &val_idx, &[(1, 0.25), (1, 0.5)])?;
            let get = |m: f64| {
                rows.iter()
                    .find(|r| r.split == EvalSplit::Overall && r.m == m)
                    .map(|r| r.recall)
            };
            (get(0.25), get(0.5))
        };
        let entry = EpochLog {
            epoch,
            learning_rate: lr,
            steps: batches.len(),
            distill: mean(&parts[0]),
            cls: mean(&parts[1]),
            matching: mean(&parts[2]),
            recon: mean(&parts[3]),
            total: mean(&parts[4]),
            coarse_accuracy: (labelled > 0).then(|| coarse as f64 / labelled as f64),
            teacher_accuracy: (labelled > 0 && config.use_recon).then(|| teacher as f64 / labelled as f64),
            candidate_mass: (!mass.is_empty()).then(|| mean(&mass)),
            validation_r1_025: v25,
            validation_r1_05: v50,
        };
        log::info!(
            "epoch {epoch}/{}: lr {lr:.2e} total {:.4} distill {:.4} cls {:.4} match {:.4} recon {:.4} val R@1,0.5 {:?}",
            config.epochs,
            entry.total,
            entry.distill,
            entry.cls,
            entry.matching,
            entry.recon,
            entry.validation_r1_05
        );
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        // Validation only selects among epochs where the scored model has been
        // trained: the head learns once the teacher is active.
        let eligible = config.method != super::config::Method::Full || weights.distill > 0.0 || epoch == config.epochs;
        let score = v50.unwrap_or(0.0) + 1e-3 * v25.unwrap_or(0.0);
        let better = match &best {
            None => eligible,
            Some((s, _, _)) => eligible && (val_idx.is_empty() || score > *s),
        };
        if better {
            if let Some(dir) = out_dir {
                save_checkpoint(&model, &dir.join("best.ckpt"), epoch, v50)?;
            }
            best = Some((score, epoch, model.clone()));
        }
        log.push(entry);
    }
    let (_, best_epoch, best) = best.expect("last epoch is always eligible");
    Ok(TrainOutcome { best, best_epoch, log })
}
