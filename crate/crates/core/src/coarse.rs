//! Coarse candidate selection: contrastive object-sentence feature alignment,
//! the combined class/feature similarity, and top-K selection.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityFn {
    Dot,
    Cosine,
}

/// How object and sentence features are compared.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityConfig {
    pub function: SimilarityFn,
    /// Divide the feature dot product by `sqrt(d)`.
    pub scale_by_sqrt_dim: bool,
    pub use_class_term: bool,
    pub use_feature_term: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            function: SimilarityFn::Dot,
            scale_by_sqrt_dim: true,
            use_class_term: true,
            use_feature_term: true,
        }
    }
}

impl SimilarityConfig {
    fn feature_scale(&self, dim: usize) -> f64 {
        match self.function {
            SimilarityFn::Dot if self.scale_by_sqrt_dim => 1.0 / (dim as f64).sqrt(),
            _ => 1.0,
        }
    }
}

/// `φ(q, p)` for every query row against every proposal row, on the tape:
/// returns `queries x proposals`.
pub fn feature_similarity_matrix(tape: &mut Tape, queries: Var, proposals: Var, cfg: &SimilarityConfig) -> Result<Var> {
    let dim = tape.value(queries).ncols();
    let (q, p) = match cfg.function {
        SimilarityFn::Dot => (queries, proposals),
        SimilarityFn::Cosine => (tape.l2_normalize_rows(queries), tape.l2_normalize_rows(proposals)),
    };
    let sim = tape.matmul_t(q, p)?;
    Ok(tape.scale(sim, cfg.feature_scale(dim)))
}

/// Feature matching loss over one batch.
#[derive(Debug, Clone, Copy)]
pub struct MatchLoss {
    pub loss: Var,
    /// Set when every pair shares a scene, so no negatives exist and the loss is 0.
    pub no_negatives: bool,
}

/// `-log(Σ_P e^φ / (Σ_P e^φ + Σ_N e^φ))` where `P` holds every
/// (proposal, query) pair drawn from the same scene and `N` every pair across
/// scenes. `similarity` is `queries x proposals`.
pub fn feature_match_loss(
    tape: &mut Tape,
    similarity: Var,
    query_scene: &[usize],
    proposal_scene: &[usize],
) -> Result<MatchLoss> {
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
        let zero = tape.constant(Array2::zeros((1, 1)));
        log::warn!("feature match loss on a single-scene batch: no negatives");
        return Ok(MatchLoss {
            loss: zero,
            no_negatives: true,
        });
    }
    let everything = Array2::from_elem((nq, np), true);
    let all = tape.masked_log_sum_exp(similarity, &everything)?;
    let pos = tape.masked_log_sum_exp(similarity, &positive)?;
    Ok(MatchLoss {
        loss: tape.sub(all, pos)?,
        no_negatives: false,
    })
}

/// Per-proposal object-sentence similarity with its two addends kept apart.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityVector {
    pub values: Array1<f64>,
    pub class_term: Array1<f64>,
    pub feature_term: Array1<f64>,
}

/// `ŝ = φ(P̃ᶜ Mᶜ, Q̃ᶜ) + φ(P̃, Q̃)` for one query. `object_class_probs` is
/// `M_p x N_o`, `class_transform` is `N_o x N_t`, `text_class_probs` has
/// length `N_t`.
pub fn object_sentence_similarity(
    object_features: ArrayView2<'_, f64>,
    object_class_probs: ArrayView2<'_, f64>,
    sentence_feature: ArrayView1<'_, f64>,
    text_class_probs: ArrayView1<'_, f64>,
    class_transform: ArrayView2<'_, f64>,
    cfg: &SimilarityConfig,
) -> Result<SimilarityVector> {
    let m = object_features.nrows();
    if object_class_probs.nrows() != m
        || object_class_probs.ncols() != class_transform.nrows()
        || class_transform.ncols() != text_class_probs.len()
        || object_features.ncols() != sentence_feature.len()
    {
        return Err(Error::Shape(format!(
            "features {:?}, class probs {:?}, transform {:?}, sentence {}, text probs {}",
            object_features.shape(),
            object_class_probs.shape(),
            class_transform.shape(),
            sentence_feature.len(),
            text_class_probs.len()
        )));
    }
    let class_term = if cfg.use_class_term {
        let mapped = object_class_probs.dot(&class_transform);
        similarity_rows(mapped.view(), text_class_probs, cfg.function, 1.0)
    } else {
        Array1::zeros(m)
    };
    let feature_term = if cfg.use_feature_term {
        let scale = cfg.feature_scale(sentence_feature.len());
        similarity_rows(object_features, sentence_feature, cfg.function, scale)
    } else {
        Array1::zeros(m)
    };
    Ok(SimilarityVector {
        values: &class_term + &feature_term,
        class_term,
        feature_term,
    })
}

fn similarity_rows(rows: ArrayView2<'_, f64>, v: ArrayView1<'_, f64>, f: SimilarityFn, scale: f64) -> Array1<f64> {
    match f {
        SimilarityFn::Dot => rows.dot(&v) * scale,
        SimilarityFn::Cosine => {
            let vn = v.dot(&v).sqrt().max(1e-12);
            rows.rows()
                .into_iter()
                .map(|r| r.dot(&v) / (r.dot(&r).sqrt().max(1e-12) * vn))
                .collect()
        }
    }
}

/// The `K` proposals with the highest similarity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    /// Sorted by descending similarity; ties keep the lower index first.
    pub indices: Vec<usize>,
}

impl CandidateSet {
    /// Candidate feature rows `K x d` gathered from the proposal features.
    pub fn features(&self, object_features: ArrayView2<'_, f64>) -> Array2<f64> {
        object_features.select(ndarray::Axis(0), &self.indices)
    }
}

pub fn select_top_k(similarity: ArrayView1<'_, f64>, k: usize) -> Result<CandidateSet> {
    if k == 0 || k > similarity.len() {
        return Err(Error::OutOfRange(format!("K={k} for {} proposals", similarity.len())));
    }
    let mut order: Vec<usize> = (0..similarity.len()).collect();
    order.sort_by(|&a, &b| similarity[b].total_cmp(&similarity[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(CandidateSet { indices: order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn match_loss_special_cases() {
        let mut tape = Tape::new();
        let s = tape.leaf(Array2::zeros((1, 2)));
        let l = feature_match_loss(&mut tape, s, &[0], &[0, 0]).unwrap();
        assert!(l.no_negatives);
        assert_eq!(tape.scalar(l.loss), 0.0);

        let l = feature_match_loss(&mut tape, s, &[0], &[0, 1]).unwrap();
        assert!(!l.no_negatives);
        assert!((tape.scalar(l.loss) - 2f64.ln()).abs() < 1e-15);
        assert!(feature_match_loss(&mut tape, s, &[0, 1], &[0, 1]).is_err());
    }

    #[test]
    fn top_k_examples() {
        let s = array![3.0, 1.0, 2.0];
        assert_eq!(select_top_k(s.view(), 2).unwrap().indices, vec![0, 2]);
        assert_eq!(select_top_k(s.view(), 3).unwrap().indices, vec![0, 2, 1]);
        let shifted = &s + 10.0;
        assert_eq!(select_top_k(shifted.view(), 2).unwrap().indices, vec![0, 2]);
        assert!(select_top_k(s.view(), 0).is_err());
        assert!(select_top_k(s.view(), 4).is_err());
        let ties = array![1.0, 1.0, 1.0];
        assert_eq!(select_top_k(ties.view(), 2).unwrap().indices, vec![0, 1]);
    }

    #[test]
    fn similarity_pure_class_term() {
        let cfg = SimilarityConfig::default();
        let feats = Array2::zeros((2, 4));
        let q = Array1::zeros(4);
        let pc = array![[1.0, 0.0], [0.0, 1.0]];
        let qc = array![1.0, 0.0];
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let s = object_sentence_similarity(feats.view(), pc.view(), q.view(), qc.view(), eye.view(), &cfg).unwrap();
        assert_eq!(s.values, array![1.0, 0.0]);
        assert_eq!(s.feature_term, array![0.0, 0.0]);
        let bad = array![[1.0, 0.0, 0.0]];
        assert!(object_sentence_similarity(feats.view(), bad.view(), q.view(), qc.view(), eye.view(), &cfg).is_err());
    }

    #[test]
    fn candidate_features_follow_indices() {
        let feats = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        let c = CandidateSet { indices: vec![2, 0] };
        assert_eq!(c.features(feats.view()), array![[2.0, 2.0], [0.0, 0.0]]);
    }
}
