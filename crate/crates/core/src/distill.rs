//! Reward and pseudo-label construction from candidate ranks, the matching
//! head that learns from them, and inference.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AxisAlignedBox;
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::ParamStore;
use crate::synth_data::ProposalSet;
use crate::tape::{Tape, Var};

/// `((K-1-r)/(K-1))²` per rank; a single candidate gets reward 1.
pub fn rewards_from_ranks(ranks: &[usize]) -> Result<Vec<f64>> {
    let k = ranks.len();
    if k == 0 {
        return Err(Error::Empty("ranks"));
    }
    let mut seen = vec![false; k];
    for &r in ranks {
        if r >= k || std::mem::replace(&mut seen[r], true) {
            return Err(Error::InvalidArgument(format!("ranks {ranks:?} are not a permutation of 0..{k}")));
        }
    }
    if k == 1 {
        return Ok(vec![1.0]);
    }
    let span = (k - 1) as f64;
    Ok(ranks
        .iter()
        .map(|&r| {
            let x = (k - 1 - r) as f64 / span;
            x * x
        })
        .collect())
}

/// Softmax of the reward-filled proposal vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub d: Array1<f64>,
    pub candidates: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl PseudoLabel {
    /// Share of the label mass that sits on the candidates.
    pub fn candidate_mass(&self) -> f64 {
        self.candidates.iter().map(|&i| self.d[i]).sum()
    }
}

pub fn pseudo_labels(rewards: &[f64], candidates: &[usize], num_proposals: usize, temperature: f64) -> Result<PseudoLabel> {
    if rewards.len() != candidates.len() {
        return Err(Error::Shape(format!(
            "{} rewards for {} candidates",
            rewards.len(),
            candidates.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature {temperature}")));
    }
    let mut v = Array1::zeros(num_proposals);
    let mut filled = vec![false; num_proposals];
    for (&i, &r) in candidates.iter().zip(rewards) {
        if i >= num_proposals {
            return Err(Error::OutOfRange(format!("candidate {i} of {num_proposals} proposals")));
        }
        if std::mem::replace(&mut filled[i], true) {
            return Err(Error::InvalidArgument(format!("duplicate candidate {i}")));
        }
        v[i] = r / temperature;
    }
    let max = v.fold(f64::NEG_INFINITY, |m: f64, &x| m.max(x));
    let e = v.mapv(|x| (x - max).exp());
    let sum = e.sum();
    Ok(PseudoLabel {
        d: e / sum,
        candidates: candidates.to_vec(),
        rewards: rewards.to_vec(),
    })
}

/// One cross-attention block from proposals (queries) to sentence tokens
/// (keys and values) followed by a scalar score per proposal.
#[derive(Debug, Clone)]
pub struct MatchingHead {
    attention: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
    score: Linear,
    pub dim: usize,
}

impl MatchingHead {
    pub fn new<R: Rng>(store: &mut ParamStore, dim: usize, num_heads: usize, rng: &mut R) -> Self {
        Self {
            attention: MultiHeadAttention::new(store, "head.attn", dim, num_heads, rng),
            norm1: LayerNorm::new(store, "head.norm1", dim),
            ffn: FeedForward::new(store, "head.ffn", dim, 2 * dim, rng),
            norm2: LayerNorm::new(store, "head.norm2", dim),
            score: Linear::new(store, "head.score", dim, 1, rng),
            dim,
        }
    }

    /// `objects` holds `B` blocks of `num_proposals` rows and `tokens` the
    /// matching `B` blocks of `length` token states. Returns `B x M_p` scores.
    pub fn matching_scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        objects: Var,
        tokens: Var,
        num_proposals: usize,
        length: usize,
    ) -> Result<Var> {
        let (rows, d) = tape.value(objects).dim();
        if d != self.dim || tape.value(tokens).ncols() != self.dim || num_proposals == 0 || rows % num_proposals != 0 {
            return Err(Error::Shape(format!(
                "head dim {}: objects {rows}x{d} in blocks of {num_proposals}, tokens {:?}",
                self.dim,
                tape.value(tokens).shape()
            )));
        }
        let a = self.attention.forward(tape, store, objects, tokens, num_proposals, length)?;
        let r = tape.add(objects, a)?;
        let x = self.norm1.forward(tape, store, r)?;
        let f = self.ffn.forward(tape, store, x)?;
        let r = tape.add(x, f)?;
        let x = self.norm2.forward(tape, store, r)?;
        let s = self.score.forward(tape, store, x)?;
        tape.reshape(s, rows / num_proposals, num_proposals)
    }
}

/// `-Σ d_i log softmax(s)_i` averaged over the rows of `scores`.
pub fn distill_loss(tape: &mut Tape, scores: Var, labels: &[PseudoLabel]) -> Result<Var> {
    let (b, m) = tape.value(scores).dim();
    if labels.len() != b || labels.iter().any(|l| l.d.len() != m) {
        return Err(Error::Shape(format!("{} pseudo-labels for {b}x{m} scores", labels.len())));
    }
    let mut targets = Array2::zeros((b, m));
    for (mut row, l) in targets.rows_mut().into_iter().zip(labels) {
        row.assign(&l.d);
    }
    let per_row = tape.soft_cross_entropy_rows(scores, targets)?;
    Ok(tape.mean(per_row))
}

/// Highest-scoring proposal, lowest index on ties.
pub fn infer_best(scores: ArrayView1<'_, f64>, proposals: &ProposalSet) -> Result<(usize, AxisAlignedBox)> {
    if scores.len() != proposals.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} proposals",
            scores.len(),
            proposals.len()
        )));
    }
    let best = infer_top_n(scores, 1)?[0];
    Ok((best, proposals.boxes[best]))
}

/// The `n` highest-scoring indices in descending score order.
pub fn infer_top_n(scores: ArrayView1<'_, f64>, n: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    Ok(order)
}

/// One pseudo-label, in the shape written for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub query_id: String,
    pub d: Vec<f64>,
    pub candidates: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl PseudoLabelRecord {
    pub fn new(query_id: impl Into<String>, label: &PseudoLabel) -> Self {
        Self {
            query_id: query_id.into(),
            d: label.d.to_vec(),
            candidates: label.candidates.clone(),
            rewards: label.rewards.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reward_examples() {
        let r = rewards_from_ranks(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        assert_eq!(r[0], 1.0);
        assert!((r[1] - 36.0 / 49.0).abs() < 1e-15);
        assert_eq!(r[7], 0.0);
        assert_eq!(rewards_from_ranks(&[1, 0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(rewards_from_ranks(&[0]).unwrap(), vec![1.0]);
        assert!(rewards_from_ranks(&[0, 0]).is_err());
        assert!(rewards_from_ranks(&[]).is_err());
    }

    #[test]
    fn pseudo_label_example() {
        let p = pseudo_labels(&[1.0, 0.0], &[2, 0], 4, 1.0).unwrap();
        let expect = [0.17488, 0.17488, 0.47537, 0.17488];
        for (a, b) in p.d.iter().zip(expect) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!((p.candidate_mass() - (0.47537 + 0.17488)).abs() < 1e-4);
        let u = pseudo_labels(&[0.0, 0.0], &[1, 3], 4, 1.0).unwrap();
        assert!(u.d.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(pseudo_labels(&[1.0, 0.0], &[2, 2], 4, 1.0).is_err());
        assert!(pseudo_labels(&[1.0], &[4], 4, 1.0).is_err());
    }

    #[test]
    fn inference() {
        let s = ndarray::array![0.1, 0.9, 0.3];
        assert_eq!(infer_top_n(s.view(), 1).unwrap(), vec![1]);
        assert_eq!(infer_top_n(s.view(), 3).unwrap(), vec![1, 2, 0]);
        let eq = ndarray::array![0.5, 0.5];
        assert_eq!(infer_top_n(eq.view(), 1).unwrap(), vec![0]);
        let empty = Array1::<f64>::zeros(0);
        assert!(infer_top_n(empty.view(), 1).is_err());
    }

    #[test]
    fn record_json_shape() {
        let p = pseudo_labels(&[1.0], &[0], 2, 1.0).unwrap();
        let v = serde_json::to_value(PseudoLabelRecord::new("q0", &p)).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys, vec!["candidates", "d", "query_id", "rewards"]);
    }
}
