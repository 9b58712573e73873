//! Tape gradients of every loss and attention block against central
//! differences on small random instances.

mod common;

use common::gradcases;

const TOL: f64 = 1e-4;
const SEEDS: [u64; 3] = [1, 2, 3];

fn check(what: &str, case: fn(u64) -> f64) {
    for seed in SEEDS {
        let err = case(seed);
        assert!(err < TOL, "{what} (seed {seed}): max relative error {err:e}");
    }
}

#[test]
fn text_classification_loss() {
    check("L_cls", gradcases::text_cls);
}

#[test]
fn feature_matching_loss() {
    check("L_match", gradcases::feature_match);
}

#[test]
fn reconstruction_loss() {
    check("L_recon", gradcases::recon);
}

#[test]
fn distillation_loss_through_head() {
    check("L_distill", gradcases::distill);
}

#[test]
fn distillation_score_gradient_is_softmax_minus_label() {
    for seed in SEEDS {
        let gap = gradcases::distill_score_gap(seed);
        assert!(gap < 1e-10, "seed {seed}: {gap:e}");
    }
}

#[test]
fn attention_self_cross_and_causal() {
    check("attention", gradcases::attention);
}

#[test]
fn attribute_encoder_block() {
    check("attribute encoder", gradcases::attribute_encoder);
}
