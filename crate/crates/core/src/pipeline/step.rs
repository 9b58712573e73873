use ndarray::Array2;

use crate::coarse::{feature_match_loss, feature_similarity_matrix, object_sentence_similarity, select_top_k};
use crate::distill::{distill_loss, pseudo_labels, rewards_from_ranks, PseudoLabel};
use crate::encoders::text_cls_loss;
use crate::error::{Error, Result};
use crate::fine::{masked_targets, next_token_targets, rank_candidates, reconstruction_loss};
use crate::metrics::{mil_margin_loss, mil_nce_loss, scene_sentence_scores};
use crate::synth_data::{derive_seed, mask_sentence, SceneRecord, SentenceRecord};
use crate::tape::{Tape, Var};

use super::config::{LossWeights, Method};
use super::model::{softmax_rows, Model};

/// A group of scenes and the sentences drawn from them for one step.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub records: Vec<&'a SceneRecord>,
    /// `(scene position in records, sentence index in that scene)`
    pub queries: Vec<(usize, usize)>,
}

impl<'a> Batch<'a> {
    pub fn sentence(&self, q: usize) -> &'a SentenceRecord {
        let (s, i) = self.queries[q];
        &self.records[s].sentences[i]
    }

    pub fn query_id(&self, q: usize) -> String {
        let (s, i) = self.queries[q];
        format!("{}/{}", self.records[s].scene.scene_id, i)
    }

    fn query_scene(&self) -> Vec<usize> {
        self.queries.iter().map(|&(s, _)| s).collect()
    }

    fn proposal_scene(&self, per_scene: usize) -> Vec<usize> {
        (0..self.records.len() * per_scene).map(|j| j / per_scene).collect()
    }
}

/// Scalar value of every loss term of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub distill: f64,
    pub cls: f64,
    pub matching: f64,
    pub recon: f64,
    pub total: f64,
}

/// The loss terms of one step; absent terms count as zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub distill: Option<Var>,
    pub cls: Option<Var>,
    pub matching: Option<Var>,
    pub recon: Option<Var>,
}

/// `w_d L_distill + w_c L_cls + w_m L_match + w_r L_recon`. A non-finite term
/// aborts with every term's value in the message.
pub fn total_loss(tape: &mut Tape, parts: &LossParts, weights: &LossWeights) -> Result<(Var, LossBreakdown)> {
    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v));
    let mut b = LossBreakdown {
        distill: value(parts.distill),
        cls: value(parts.cls),
        matching: value(parts.matching),
        recon: value(parts.recon),
        total: 0.0,
    };
    if ![b.distill, b.cls, b.matching, b.recon].iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "loss terms distill={} cls={} match={} recon={}",
            b.distill, b.cls, b.matching, b.recon
        )));
    }
    let mut total: Option<Var> = None;
    for (part, w) in [
        (parts.distill, weights.distill),
        (parts.cls, weights.cls),
        (parts.matching, weights.matching),
        (parts.recon, weights.recon),
    ] {
        let Some(v) = part else { continue };
        if w == 0.0 {
            continue;
        }
        let term = tape.scale(v, w);
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Array2::zeros((1, 1))),
    };
    b.total = tape.scalar(total);
    Ok((total, b))
}

/// Everything one forward pass over a batch produced.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Pseudo-labels per query, present when the teacher ran.
    pub labels: Vec<PseudoLabel>,
    /// Queries whose best-ranked candidate overlaps the described object.
    pub teacher_hits: usize,
    /// Queries whose top coarse candidate overlaps the described object.
    pub coarse_hits: usize,
    pub no_negatives: bool,
}

fn tokens_of<'b>(batch: &'b Batch<'_>) -> Vec<&'b [usize]> {
    (0..batch.queries.len()).map(|q| batch.sentence(q).tokens.as_slice()).collect()
}

/// Forward pass of one training step under `weights`; `mask_seed` drives
/// keyword masking.
pub fn forward_step(
    model: &Model,
    tape: &mut Tape,
    batch: &Batch<'_>,
    weights: &LossWeights,
    ignore_top_half: bool,
    mask_seed: u64,
) -> Result<StepOutput> {
    let cfg = &model.config;
    let m = cfg.num_proposals;
    if batch.queries.is_empty() {
        return Err(Error::Empty("batch queries"));
    }
    let query_scene = batch.query_scene();
    let proposal_scene = batch.proposal_scene(m);
    let objects = model.encode_objects(tape, &batch.records)?;
    let tokens = tokens_of(batch);
    let enc = model.encode_sentences(tape, &tokens)?;
    let sim = feature_similarity_matrix(tape, enc.pooled, objects, &cfg.similarity)?;

    match cfg.method {
        Method::MilNce | Method::MilMargin => {
            let l = if cfg.method == Method::MilNce {
                mil_nce_loss(tape, sim, &query_scene, &proposal_scene)?
            } else {
                let scores = scene_sentence_scores(tape, sim, m, cfg.mil_pooling)?;
                mil_margin_loss(tape, scores, &query_scene, cfg.mil_margin)?
            };
            let parts = LossParts {
                matching: Some(l.loss),
                ..Default::default()
            };
            let unit = LossWeights {
                distill: 0.0,
                cls: 0.0,
                matching: 1.0,
                recon: 0.0,
            };
            let (total, breakdown) = total_loss(tape, &parts, &unit)?;
            return Ok(StepOutput {
                total,
                breakdown,
                labels: Vec::new(),
                teacher_hits: 0,
                coarse_hits: 0,
                no_negatives: l.no_negatives,
            });
        }
        Method::Full => {}
    }

    let labels_cls: Vec<usize> = (0..batch.queries.len()).map(|q| batch.sentence(q).text_class_id).collect();
    let cls_logits = model.classify(tape, enc.pooled)?;
    let l_cls = text_cls_loss(tape, cls_logits, &labels_cls)?;
    let l_match = feature_match_loss(tape, sim, &query_scene, &proposal_scene)?;
    let mut parts = LossParts {
        cls: Some(l_cls),
        matching: Some(l_match.loss),
        ..Default::default()
    };
    let mut out = StepOutput {
        total: l_cls,
        breakdown: LossBreakdown::default(),
        labels: Vec::new(),
        teacher_hits: 0,
        coarse_hits: 0,
        no_negatives: l_match.no_negatives,
    };

    if weights.distill > 0.0 || weights.recon > 0.0 {
        let candidates = coarse_candidates(model, tape, batch, objects, enc.pooled, cls_logits)?;
        for (q, c) in candidates.iter().enumerate() {
            if hits(batch, q, c[0]) {
                out.coarse_hits += 1;
            }
        }
        let k = cfg.top_k;
        let nq = batch.queries.len();
        let rewards: Vec<Vec<f64>> = if cfg.use_recon {
            let (inputs, targets) = if cfg.next_token_recon {
                let t: Vec<Vec<(usize, usize)>> = tokens.iter().map(|s| next_token_targets(s)).collect();
                (enc.states, t)
            } else {
                let mut masked = Vec::with_capacity(nq);
                let mut t = Vec::with_capacity(nq);
                for q in 0..nq {
                    let s = batch.sentence(q);
                    let ms = mask_sentence(s, cfg.mask_ratio, model.mask_id, derive_seed(mask_seed, q as u64, 3))?;
                    t.push(masked_targets(&s.tokens, &ms.positions)?);
                    masked.push(ms.tokens);
                }
                let refs: Vec<&[usize]> = masked.iter().map(Vec::as_slice).collect();
                (model.encode_sentences(tape, &refs)?.states, t)
            };
            let len = enc.length;
            let token_rows: Vec<usize> = (0..nq)
                .flat_map(|q| (0..k).flat_map(move |_| q * len..(q + 1) * len))
                .collect();
            let cand_rows: Vec<usize> = candidates
                .iter()
                .zip(&query_scene)
                .flat_map(|(c, &s)| c.iter().map(move |&i| s * m + i))
                .collect();
            let pair_tokens = tape.gather_rows(inputs, &token_rows)?;
            let pair_cands = tape.gather_rows(objects, &cand_rows)?;
            let recon = model.reconstruct(tape, pair_tokens, pair_cands, len)?;
            let pair_targets: Vec<Vec<(usize, usize)>> =
                targets.iter().flat_map(|t| std::iter::repeat_n(t.clone(), k)).collect();
            let per_pair = reconstruction_loss(tape, &recon, &pair_targets)?;
            let values = tape.value(per_pair).column(0).to_vec();
            let mut keep = Array2::zeros((nq * k, 1));
            let mut rewards = Vec::with_capacity(nq);
            for q in 0..nq {
                let losses = &values[q * k..(q + 1) * k];
                let ranks = rank_candidates(losses)?;
                let best = ranks.iter().position(|&r| r == 0).expect("rank 0 exists");
                if hits(batch, q, candidates[q][best]) {
                    out.teacher_hits += 1;
                }
                for (j, &r) in ranks.iter().enumerate() {
                    let dropped = ignore_top_half && r >= k - k / 2;
                    keep[[q * k + j, 0]] = if dropped { 0.0 } else { 1.0 / nq as f64 };
                }
                rewards.push(rewards_from_ranks(&ranks)?);
            }
            parts.recon = Some(tape.weighted_sum(per_pair, keep)?);
            rewards
        } else {
            vec![vec![1.0; k]; nq]
        };

        let mut labels = Vec::with_capacity(nq);
        for (r, c) in rewards.iter().zip(&candidates) {
            labels.push(pseudo_labels(r, c, m, cfg.pseudo_label_temperature)?);
        }
        if weights.distill > 0.0 {
            let scores = model.head_scores(tape, &batch.records, &query_scene, &tokens)?;
            parts.distill = Some(distill_loss(tape, scores, &labels)?);
        }
        out.labels = labels;
    }

    let (total, breakdown) = total_loss(tape, &parts, weights)?;
    out.total = total;
    out.breakdown = breakdown;
    Ok(out)
}

fn hits(batch: &Batch<'_>, q: usize, proposal: usize) -> bool {
    let (s, _) = batch.queries[q];
    batch.records[s].proposals.matched_gt[proposal] == Some(batch.sentence(q).target_object_id)
}

/// Top-K proposal indices per query under the combined class and feature similarity.
fn coarse_candidates(
    model: &Model,
    tape: &Tape,
    batch: &Batch<'_>,
    objects: Var,
    pooled: Var,
    cls_logits: Var,
) -> Result<Vec<Vec<usize>>> {
    let m = model.config.num_proposals;
    let p = tape.value(objects);
    let qf = tape.value(pooled);
    let qc = softmax_rows(tape.value(cls_logits));
    let class_probs: Vec<Array2<f64>> = batch
        .records
        .iter()
        .map(|r| softmax_rows(&r.proposals.class_logit_matrix()))
        .collect();
    let mut out = Vec::with_capacity(batch.queries.len());
    for (q, &(s, _)) in batch.queries.iter().enumerate() {
        let block = p.slice(ndarray::s![s * m..(s + 1) * m, ..]);
        let sv = object_sentence_similarity(
            block,
            class_probs[s].view(),
            qf.row(q),
            qc.row(q),
            model.class_transform.matrix.view(),
            &model.config.similarity,
        )?;
        out.push(select_top_k(sv.values.view(), model.config.top_k)?.indices);
    }
    Ok(out)
}

/// Inference scores `Q x M_p` for `queries` (scene position, sentence) over
/// `records`: the matching head for the full model, `φ` for the MIL baselines.
pub fn score_queries(model: &Model, records: &[&SceneRecord], queries: &[(usize, &SentenceRecord)]) -> Result<Array2<f64>> {
    let m = model.config.num_proposals;
    let mut out = Array2::zeros((queries.len(), m));
    if queries.is_empty() {
        return Ok(out);
    }
    let mut tape = Tape::new();
    let objects = match model.config.method {
        Method::Full => None,
        Method::MilNce | Method::MilMargin => Some(model.encode_objects(&mut tape, records)?),
    };
    let mut lengths: Vec<usize> = queries.iter().map(|(_, s)| s.tokens.len()).collect();
    lengths.sort_unstable();
    lengths.dedup();
    for len in lengths {
        let group: Vec<usize> = (0..queries.len()).filter(|&q| queries[q].1.tokens.len() == len).collect();
        let tokens: Vec<&[usize]> = group.iter().map(|&q| queries[q].1.tokens.as_slice()).collect();
        let scene: Vec<usize> = group.iter().map(|&q| queries[q].0).collect();
        let scores: Array2<f64> = match objects {
            None => {
                let s = model.head_scores(&mut tape, records, &scene, &tokens)?;
                tape.value(s).clone()
            }
            Some(objects) => {
                let enc = model.encode_sentences(&mut tape, &tokens)?;
                let sim = feature_similarity_matrix(&mut tape, enc.pooled, objects, &model.config.similarity)?;
                let sv = tape.value(sim);
                Array2::from_shape_fn((group.len(), m), |(g, j)| sv[[g, scene[g] * m + j]])
            }
        };
        for (g, &q) in group.iter().enumerate() {
            out.row_mut(q).assign(&scores.row(g));
        }
    }
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("inference scores".into()));
    }
    Ok(out)
}

/// Pseudo-labels the teacher assigns to every sentence of `records` with
/// the mask drawn from `mask_seed`.
pub fn teacher_labels(model: &Model, records: &[&SceneRecord], mask_seed: u64) -> Result<Vec<(String, PseudoLabel)>> {
    let queries: Vec<(usize, usize)> = records
        .iter()
        .enumerate()
        .flat_map(|(s, r)| (0..r.sentences.len()).map(move |i| (s, i)))
        .collect();
    let batch = Batch {
        records: records.to_vec(),
        queries,
    };
    let weights = LossWeights {
        distill: 1.0,
        cls: 0.0,
        matching: 0.0,
        recon: 0.0,
    };
    let mut tape = Tape::new();
    let out = forward_step(model, &mut tape, &batch, &weights, false, mask_seed)?;
    Ok(out
        .labels
        .into_iter()
        .enumerate()
        .map(|(q, l)| (batch.query_id(q), l))
        .collect())
}
