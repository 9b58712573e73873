//! Small random instances of every differentiable block. Each function
//! returns the worst finite-difference relative error over its variants.

use ground3d::coarse::{feature_match_loss, feature_similarity_matrix, SimilarityConfig, SimilarityFn};
use ground3d::distill::{distill_loss, pseudo_labels, MatchingHead};
use ground3d::encoders::{text_cls_loss, AttributeEncoder, SentenceEncoder, SentencePooling, TextClassifier, VocabEmbedding};
use ground3d::fine::{masked_targets, next_token_targets, reconstruction_loss, ReconstructionDecoder};
use ground3d::nn::MultiHeadAttention;
use ground3d::params::ParamStore;
use ground3d::tape::Tape;
use ndarray::Array1;
use rand::Rng;

use super::{max_rel_error, random_mat, rng};

fn tokens(rng: &mut impl Rng, n: usize, len: usize, vocab: usize) -> Vec<Vec<usize>> {
    (0..n).map(|_| (0..len).map(|_| rng.random_range(1..vocab)).collect()).collect()
}

/// GRU sentence encoder, text classifier and L_cls, under both poolings.
pub fn text_cls(seed: u64) -> f64 {
    let mut r = rng(seed);
    let words = ["[MASK]", "a", "b", "c", "d", "e"];
    let mut worst: f64 = 0.0;
    for pooling in [SentencePooling::FinalState, SentencePooling::Mean] {
        let mut store = ParamStore::new();
        let emb = VocabEmbedding::new(&mut store, "emb", &words, 4, None, &mut r).unwrap();
        let enc = SentenceEncoder::new(&mut store, "sent", emb, 5, pooling, &mut r);
        let cls = TextClassifier::new(&mut store, 5, 3, &mut r);
        let batch = tokens(&mut r, 3, 4, words.len());
        let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..3)).collect();
        worst = worst.max(max_rel_error(&mut store, |t, st| {
            let refs: Vec<&[usize]> = batch.iter().map(|b| b.as_slice()).collect();
            let e = enc.encode(t, st, &refs).unwrap();
            let logits = cls.classify(t, st, e.pooled).unwrap();
            text_cls_loss(t, logits, &labels).unwrap()
        }));
    }
    worst
}

/// Both encoders feeding L_match, with dot and cosine similarity.
pub fn feature_match(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for function in [SimilarityFn::Dot, SimilarityFn::Cosine] {
        let mut r = rng(seed);
        let words = ["[MASK]", "a", "b", "c", "d"];
        let mut store = ParamStore::new();
        let emb = VocabEmbedding::new(&mut store, "emb", &words, 4, None, &mut r).unwrap();
        let sent = SentenceEncoder::new(&mut store, "sent", emb, 4, SentencePooling::FinalState, &mut r);
        let attr = AttributeEncoder::new(&mut store, "attr", 3, 4, 1, 2, &mut r);
        let x = store.add("x", random_mat(&mut r, 6, 3));
        let batch = tokens(&mut r, 4, 3, words.len());
        let cfg = SimilarityConfig {
            function,
            ..SimilarityConfig::default()
        };
        worst = worst.max(max_rel_error(&mut store, |t, st| {
            let refs: Vec<&[usize]> = batch.iter().map(|b| b.as_slice()).collect();
            let q = sent.encode(t, st, &refs).unwrap().pooled;
            let xv = t.param(st, x);
            let p = attr.encode(t, st, xv, 3).unwrap();
            let sim = feature_similarity_matrix(t, q, p, &cfg).unwrap();
            feature_match_loss(t, sim, &[0, 1, 1, 0], &[0, 0, 0, 1, 1, 1]).unwrap().loss
        }));
    }
    worst
}

/// Two-layer decoder and L_recon, masked-keyword and next-token variants.
pub fn recon(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for next_token in [false, true] {
        let mut r = rng(seed);
        let (pairs, len, dim, vocab) = (3, 4, 4, 7);
        let mut store = ParamStore::new();
        let dec = ReconstructionDecoder::new(&mut store, dim, vocab, 2, 2, next_token, &mut r);
        let toks = store.add("tokens", random_mat(&mut r, pairs * len, dim));
        let cands = store.add("candidates", random_mat(&mut r, pairs, dim));
        let sentences = tokens(&mut r, pairs, len, vocab);
        let targets: Vec<_> = sentences
            .iter()
            .map(|s| {
                if next_token {
                    next_token_targets(s)
                } else {
                    masked_targets(s, &[1, 3]).unwrap()
                }
            })
            .collect();
        worst = worst.max(max_rel_error(&mut store, |t, st| {
            let tv = t.param(st, toks);
            let cv = t.param(st, cands);
            let out = dec.reconstruct(t, st, tv, cv, len).unwrap();
            let per_pair = reconstruction_loss(t, &out, &targets).unwrap();
            t.sum(per_pair)
        }));
    }
    worst
}

/// Matching head and L_distill.
pub fn distill(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (queries, m, len, dim) = (2, 5, 3, 4);
    let mut store = ParamStore::new();
    let head = MatchingHead::new(&mut store, dim, 2, &mut r);
    let objects = store.add("objects", random_mat(&mut r, queries * m, dim));
    let toks = store.add("tokens", random_mat(&mut r, queries * len, dim));
    let labels = vec![
        pseudo_labels(&[1.0, 0.25, 0.0], &[4, 0, 2], m, 1.0).unwrap(),
        pseudo_labels(&[0.0, 1.0], &[1, 3], m, 1.0).unwrap(),
    ];
    max_rel_error(&mut store, |t, st| {
        let o = t.param(st, objects);
        let k = t.param(st, toks);
        let s = head.matching_scores(t, st, o, k, m, len).unwrap();
        distill_loss(t, s, &labels).unwrap()
    })
}

/// Largest gap between the tape's `dL_distill/ds` and `(softmax(s) - d) / B`.
pub fn distill_score_gap(seed: u64) -> f64 {
    let mut r = rng(seed);
    let m = 6;
    let mut worst: f64 = 0.0;
    for rows in [1usize, 3] {
        let s = random_mat(&mut r, rows, m).mapv(|v| 4.0 * v);
        let labels: Vec<_> = (0..rows)
            .map(|_| pseudo_labels(&[1.0, 4.0 / 9.0, 1.0 / 9.0, 0.0], &[5, 2, 0, 3], m, 1.0).unwrap())
            .collect();
        let mut t = Tape::new();
        let sv = t.leaf(s.clone());
        let loss = distill_loss(&mut t, sv, &labels).unwrap();
        let g = t.backward(loss).unwrap();
        let g = g.wrt(sv).unwrap();
        for (i, row) in s.rows().into_iter().enumerate() {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            let softmax: Array1<f64> = row.mapv(|v| v.exp() / z);
            for j in 0..m {
                // the loss averages rows, so each row carries 1/rows of the gradient
                let expect = (softmax[j] - labels[i].d[j]) / rows as f64;
                worst = worst.max((g[[i, j]] - expect).abs());
            }
        }
    }
    worst
}

/// Multi-head attention as self-, cross- and causal self-attention.
pub fn attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (dim, lq, lk, blocks) = (4, 3, 2, 2);
    let mut store = ParamStore::new();
    let attn = MultiHeadAttention::new(&mut store, "attn", dim, 2, &mut r);
    let q = store.add("q", random_mat(&mut r, blocks * lq, dim));
    let mem = store.add("mem", random_mat(&mut r, blocks * lk, dim));
    let w = random_mat(&mut r, blocks * lq, dim);
    let mut worst: f64 = 0.0;
    for mode in 0..3 {
        let mut s = store.clone();
        worst = worst.max(max_rel_error(&mut s, |t, st| {
            let x = t.param(st, q);
            let y = match mode {
                0 => attn.forward(t, st, x, x, lq, lq).unwrap(),
                1 => {
                    let m = t.param(st, mem);
                    attn.forward(t, st, x, m, lq, lk).unwrap()
                }
                _ => attn.forward_causal(t, st, x, lq).unwrap(),
            };
            t.weighted_sum(y, w.clone()).unwrap()
        }));
    }
    worst
}

/// The proposal encoder: two self-attention layers over two scenes.
pub fn attribute_encoder(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let enc = AttributeEncoder::new(&mut store, "attr", 5, 4, 2, 2, &mut r);
    let x = store.add("x", random_mat(&mut r, 8, 5));
    let w = random_mat(&mut r, 8, 4);
    max_rel_error(&mut store, |t, st| {
        let xv = t.param(st, x);
        let y = enc.encode(t, st, xv, 4).unwrap();
        t.weighted_sum(y, w.clone()).unwrap()
    })
}

/// Every finite-difference case by name.
pub const CASES: [(&str, fn(u64) -> f64); 6] = [
    ("L_cls", text_cls),
    ("L_match", feature_match),
    ("L_recon", recon),
    ("L_distill", distill),
    ("attention", attention),
    ("attribute encoder", attribute_encoder),
];
