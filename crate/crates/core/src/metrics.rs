//! R@n,IoU@m evaluation with Unique/Multiple splits, and the comparison
//! methods: random ranking, the max-IoU oracle, and two MIL losses.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{box_iou, AxisAlignedBox};
use crate::synth_data::Split;
use crate::tape::{Tape, Var};

/// `(n, m)` cells reported by default.
pub const DEFAULT_CELLS: [(usize, f64); 4] = [(1, 0.25), (1, 0.5), (3, 0.25), (3, 0.5)];

/// Percentage of queries whose top-`n` predictions contain a box with IoU > `m`
/// against the ground truth.
pub fn recall_at(predictions: &[Vec<AxisAlignedBox>], gts: &[AxisAlignedBox], n: usize, m: f64) -> Result<f64> {
    if predictions.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} prediction lists for {} ground truths",
            predictions.len(),
            gts.len()
        )));
    }
    if gts.is_empty() {
        return Err(Error::Empty("queries"));
    }
    let mut hits = 0usize;
    for (q, (preds, gt)) in predictions.iter().zip(gts).enumerate() {
        if preds.len() < n {
            return Err(Error::InvalidArgument(format!(
                "query {q} has {} predictions, R@{n} needs {n}",
                preds.len()
            )));
        }
        if preds[..n].iter().any(|p| box_iou(p, gt) > m) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / gts.len() as f64)
}

/// Uniformly random ranking of `num_proposals` indices.
pub fn random_baseline(num_proposals: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_proposals).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Proposals sorted by descending IoU with the ground truth (lower index on ties).
pub fn oracle_ranking(proposals: &[AxisAlignedBox], gt: &AxisAlignedBox) -> Vec<usize> {
    let ious: Vec<f64> = proposals.iter().map(|p| box_iou(p, gt)).collect();
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| ious[b].total_cmp(&ious[a]).then(a.cmp(&b)));
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilPooling {
    Max,
    Mean,
}

/// Scene-sentence scores `Q x S` from a `Q x (S*per_scene)` proposal
/// similarity matrix.
pub fn scene_sentence_scores(tape: &mut Tape, similarity: Var, per_scene: usize, pooling: MilPooling) -> Result<Var> {
    match pooling {
        MilPooling::Max => tape.block_max(similarity, per_scene),
        MilPooling::Mean => {
            let cols = tape.value(similarity).ncols();
            if per_scene == 0 || cols % per_scene != 0 {
                return Err(Error::Shape(format!("{cols} columns in blocks of {per_scene}")));
            }
            let pool = Array2::from_shape_fn((cols, cols / per_scene), |(j, s)| {
                if j / per_scene == s {
                    1.0 / per_scene as f64
                } else {
                    0.0
                }
            });
            let pool = tape.constant(pool);
            tape.matmul(similarity, pool)
        }
    }
}

/// A baseline loss together with whether it degenerated for lack of negatives.
#[derive(Debug, Clone, Copy)]
pub struct BaselineLoss {
    pub loss: Var,
    pub no_negatives: bool,
}

fn degenerate(tape: &mut Tape, what: &str) -> BaselineLoss {
    log::warn!("{what} on a single-scene batch: no negatives");
    BaselineLoss {
        loss: tape.constant(Array2::zeros((1, 1))),
        no_negatives: true,
    }
}

/// Symmetric hinge on scene-sentence scores `S` (`Q x num_scenes`). For each
/// query `q` paired with scene `p`, the terms are `[margin - S[q,p] + S[q,s]]_+`
/// over other scenes `s` and `[margin - S[q,p] + S[q',p]]_+` over queries `q'`
/// paired elsewhere; the loss is their mean.
pub fn mil_margin_loss(tape: &mut Tape, scores: Var, paired: &[usize], margin: f64) -> Result<BaselineLoss> {
    let (nq, ns) = tape.value(scores).dim();
    if paired.len() != nq || paired.iter().any(|&p| p >= ns) {
        return Err(Error::Shape(format!("pairing {paired:?} for {nq}x{ns} scores")));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (q, &p) in paired.iter().enumerate() {
        for s in (0..ns).filter(|&s| s != p) {
            pos.push(q * ns + p);
            neg.push(q * ns + s);
        }
        for (q2, &p2) in paired.iter().enumerate() {
            if p2 != p {
                pos.push(q * ns + p);
                neg.push(q2 * ns + p);
            }
        }
    }
    if neg.is_empty() {
        return Ok(degenerate(tape, "MIL-Margin loss"));
    }
    let flat = tape.reshape(scores, nq * ns, 1)?;
    let sp = tape.gather_rows(flat, &pos)?;
    let sn = tape.gather_rows(flat, &neg)?;
    let diff = tape.sub(sn, sp)?;
    let m = tape.constant(Array2::from_elem((1, 1), margin));
    let shifted = tape.add_row(diff, m)?;
    let hinge = tape.relu(shifted);
    Ok(BaselineLoss {
        loss: tape.mean(hinge),
        no_negatives: false,
    })
}

/// Per query, `-log(Σ_paired e^φ / Σ_all e^φ)` over the proposals of the
/// batch, averaged over queries. `similarity` is `queries x proposals`.
pub fn mil_nce_loss(
    tape: &mut Tape,
    similarity: Var,
    query_scene: &[usize],
    proposal_scene: &[usize],
) -> Result<BaselineLoss> {
    let (nq, np) = tape.value(similarity).dim();
    if nq != query_scene.len() || np != proposal_scene.len() {
        return Err(Error::Shape(format!(
            "similarity {nq}x{np} for {} queries and {} proposals",
            query_scene.len(),
            proposal_scene.len()
        )));
    }
    let positive = Array2::from_shape_fn((nq, np), |(i, j)| query_scene[i] == proposal_scene[j]);
    if positive.iter().all(|&p| p) {
        return Ok(degenerate(tape, "MIL-NCE loss"));
    }
    let all = tape.row_masked_log_sum_exp(similarity, &Array2::from_elem((nq, np), true))?;
    let pos = tape.row_masked_log_sum_exp(similarity, &positive)?;
    let diff = tape.sub(all, pos)?;
    Ok(BaselineLoss {
        loss: tape.mean(diff),
        no_negatives: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Overall,
    Unique,
    Multiple,
}

impl EvalSplit {
    pub const ALL: [EvalSplit; 3] = [EvalSplit::Overall, EvalSplit::Unique, EvalSplit::Multiple];

    pub fn as_str(self) -> &'static str {
        match self {
            EvalSplit::Overall => "overall",
            EvalSplit::Unique => "unique",
            EvalSplit::Multiple => "multiple",
        }
    }

    fn contains(self, s: Split) -> bool {
        match self {
            EvalSplit::Overall => true,
            EvalSplit::Unique => s == Split::Unique,
            EvalSplit::Multiple => s == Split::Multiple,
        }
    }
}

/// One evaluated query: its split, ground truth, and predicted boxes best first.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedQuery {
    pub split: Split,
    pub gt: AxisAlignedBox,
    pub ranked: Vec<AxisAlignedBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub split: EvalSplit,
    pub n: usize,
    pub m: f64,
    pub recall: f64,
    pub num_queries: usize,
}

/// Recall rows for every split and cell. Splits without queries are skipped.
pub fn score_method(method: &str, queries: &[RankedQuery], cells: &[(usize, f64)]) -> Result<Vec<MetricRow>> {
    let mut rows = Vec::new();
    for split in EvalSplit::ALL {
        let chosen: Vec<&RankedQuery> = queries.iter().filter(|q| split.contains(q.split)).collect();
        if chosen.is_empty() {
            continue;
        }
        let preds: Vec<Vec<AxisAlignedBox>> = chosen.iter().map(|q| q.ranked.clone()).collect();
        let gts: Vec<AxisAlignedBox> = chosen.iter().map(|q| q.gt).collect();
        for &(n, m) in cells {
            rows.push(MetricRow {
                method: method.to_string(),
                split,
                n,
                m,
                recall: recall_at(&preds, &gts, n, m)?,
                num_queries: chosen.len(),
            });
        }
    }
    Ok(rows)
}

/// Upper-bound rows: each query ranked by the max-IoU oracle over `proposals`.
pub fn upper_bound_row(
    queries: &[(Split, AxisAlignedBox, &[AxisAlignedBox])],
    cells: &[(usize, f64)],
) -> Result<Vec<MetricRow>> {
    let ranked: Vec<RankedQuery> = queries
        .iter()
        .map(|&(split, gt, proposals)| RankedQuery {
            split,
            gt,
            ranked: oracle_ranking(proposals, &gt).into_iter().map(|i| proposals[i]).collect(),
        })
        .collect();
    score_method("upper_bound", &ranked, cells)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn recall(&self, method: &str, split: EvalSplit, n: usize, m: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.split == split && r.n == n && r.m == m)
            .map(|r| r.recall)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    /// Checks recall bounds, monotonicity in `n` and `m`, the upper bound, and
    /// split accounting. Returns a description of every violation.
    pub fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        for r in &self.rows {
            if !(0.0..=100.0).contains(&r.recall) {
                problems.push(format!("{} {} R@{},{} = {} out of range", r.method, r.split.as_str(), r.n, r.m, r.recall));
            }
            for o in &self.rows {
                if o.method != r.method || o.split != r.split {
                    continue;
                }
                if o.n >= r.n && o.m <= r.m && o.recall < r.recall {
                    problems.push(format!(
                        "{} {}: R@{},{} = {} < R@{},{} = {}",
                        r.method,
                        r.split.as_str(),
                        o.n,
                        o.m,
                        o.recall,
                        r.n,
                        r.m,
                        r.recall
                    ));
                }
            }
            if r.method != "upper_bound" {
                if let Some(ub) = self.recall("upper_bound", r.split, r.n, r.m) {
                    if r.recall > ub {
                        problems.push(format!(
                            "{} {} R@{},{} = {} exceeds upper bound {}",
                            r.method,
                            r.split.as_str(),
                            r.n,
                            r.m,
                            r.recall,
                            ub
                        ));
                    }
                }
            }
            if r.split == EvalSplit::Overall {
                let part = |s: EvalSplit| {
                    self.rows
                        .iter()
                        .find(|o| o.method == r.method && o.split == s && o.n == r.n && o.m == r.m)
                        .map(|o| (o.recall, o.num_queries))
                        .unwrap_or((0.0, 0))
                };
                let (ru, nu) = part(EvalSplit::Unique);
                let (rm, nm) = part(EvalSplit::Multiple);
                if nu + nm != r.num_queries {
                    problems.push(format!("{}: split counts {nu}+{nm} != {}", r.method, r.num_queries));
                } else {
                    let weighted = (ru * nu as f64 + rm * nm as f64) / r.num_queries as f64;
                    if (weighted - r.recall).abs() > 1e-9 {
                        problems.push(format!("{}: overall {} != weighted splits {weighted}", r.method, r.recall));
                    }
                }
            }
        }
        problems
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,split,n,m,recall,num_queries,seed,config_hash\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.4},{},{},{}",
                r.method,
                r.split.as_str(),
                r.n,
                r.m,
                r.recall,
                r.num_queries,
                self.seed,
                self.config_hash
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(x: f64) -> AxisAlignedBox {
        AxisAlignedBox::new([x, 0.0, 0.0], [1.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn strict_threshold() {
        // shifting a unit cube by t along x gives IoU (1-t)/(1+t)
        let t = 0.7 / 1.3;
        let preds = vec![vec![cube(t)]];
        let gts = vec![cube(0.0)];
        assert!((box_iou(&preds[0][0], &gts[0]) - 0.3).abs() < 1e-12);
        assert_eq!(recall_at(&preds, &gts, 1, 0.25).unwrap(), 100.0);
        assert_eq!(recall_at(&preds, &gts, 1, 0.5).unwrap(), 0.0);
        assert!(recall_at(&preds, &gts, 3, 0.25).is_err());
    }

    #[test]
    fn random_is_seeded_permutation() {
        let a = random_baseline(10, 4);
        assert_eq!(a, random_baseline(10, 4));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn margin_examples() {
        let mut tape = Tape::new();
        let s = tape.leaf(ndarray::array![[1.0, 0.0], [0.0, 1.0]]);
        let l = mil_margin_loss(&mut tape, s, &[0, 1], 0.2).unwrap();
        assert_eq!(tape.scalar(l.loss), 0.0);
        let s = tape.leaf(Array2::zeros((2, 2)));
        let l = mil_margin_loss(&mut tape, s, &[0, 1], 0.2).unwrap();
        assert!((tape.scalar(l.loss) - 0.2).abs() < 1e-15);
        let s = tape.leaf(Array2::zeros((2, 1)));
        assert!(mil_margin_loss(&mut tape, s, &[0, 0], 0.2).unwrap().no_negatives);
    }

    #[test]
    fn nce_equal_energies() {
        let mut tape = Tape::new();
        let s = tape.leaf(Array2::zeros((2, 6)));
        let l = mil_nce_loss(&mut tape, s, &[0, 1], &[0, 0, 0, 1, 1, 1]).unwrap();
        assert!((tape.scalar(l.loss) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn mean_pooling() {
        let mut tape = Tape::new();
        let s = tape.leaf(ndarray::array![[1.0, 3.0, 5.0, 7.0]]);
        let p = scene_sentence_scores(&mut tape, s, 2, MilPooling::Mean).unwrap();
        assert_eq!(tape.value(p), &ndarray::array![[2.0, 6.0]]);
        let p = scene_sentence_scores(&mut tape, s, 2, MilPooling::Max).unwrap();
        assert_eq!(tape.value(p), &ndarray::array![[3.0, 7.0]]);
    }
}
