#![allow(dead_code)]

use ground3d::geometry::AxisAlignedBox;
use ground3d::params::ParamStore;
use ground3d::tape::{Tape, Var};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod gradcases;

pub const FD_STEP: f64 = 1e-5;

/// Entries whose true gradient is below this are compared on an absolute
/// scale, since a relative error of a near-zero number is just noise.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

/// Worst relative error between the tape gradient of `loss` and a central
/// difference, over every scalar in `store`.
pub fn max_rel_error(store: &mut ParamStore, loss: impl Fn(&mut Tape, &ParamStore) -> Var) -> f64 {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store);
    let grads = tape.backward(l).expect("backward");
    let ids: Vec<_> = store.ids().collect();
    let eval = |store: &ParamStore| {
        let mut t = Tape::new();
        let l = loss(&mut t, store);
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for id in ids {
        let shape = store.get(id).dim();
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Array2::zeros(shape));
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let orig = store.get(id)[[i, j]];
                store.get_mut(id)[[i, j]] = orig + FD_STEP;
                let up = eval(store);
                store.get_mut(id)[[i, j]] = orig - FD_STEP;
                let down = eval(store);
                store.get_mut(id)[[i, j]] = orig;
                let numeric = (up - down) / (2.0 * FD_STEP);
                let a = analytic[[i, j]];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
                worst = worst.max(err);
            }
        }
    }
    worst
}

pub fn random_box(rng: &mut impl Rng, spread: f64) -> AxisAlignedBox {
    let c = [0, 1, 2].map(|_| rng.random_range(-spread..spread));
    let s = [0, 1, 2].map(|_| rng.random_range(0.1..2.0));
    AxisAlignedBox::new(c, s).unwrap()
}

/// IoU by cutting space at every box face and adding up the cells that lie
/// inside both boxes and inside either one.
pub fn iou_by_cells(a: &AxisAlignedBox, b: &AxisAlignedBox) -> f64 {
    let (amin, amax, bmin, bmax) = (a.min_corner(), a.max_corner(), b.min_corner(), b.max_corner());
    let cuts: Vec<Vec<f64>> = (0..3)
        .map(|k| {
            let mut v = vec![amin[k], amax[k], bmin[k], bmax[k]];
            v.sort_by(f64::total_cmp);
            v
        })
        .collect();
    let inside = |lo: [f64; 3], hi: [f64; 3], p: [f64; 3]| (0..3).all(|k| lo[k] < p[k] && p[k] < hi[k]);
    let (mut both, mut either) = (0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                let w = [cuts[0][i + 1] - cuts[0][i], cuts[1][j + 1] - cuts[1][j], cuts[2][k + 1] - cuts[2][k]];
                if w.iter().any(|&x| x <= 0.0) {
                    continue;
                }
                let mid = [
                    0.5 * (cuts[0][i] + cuts[0][i + 1]),
                    0.5 * (cuts[1][j] + cuts[1][j + 1]),
                    0.5 * (cuts[2][k] + cuts[2][k + 1]),
                ];
                let (ia, ib) = (inside(amin, amax, mid), inside(bmin, bmax, mid));
                let vol = w[0] * w[1] * w[2];
                if ia && ib {
                    both += vol;
                }
                if ia || ib {
                    either += vol;
                }
            }
        }
    }
    both / either
}

/// Quadratic greedy NMS: repeatedly take the best unsuppressed box by a
/// linear scan and strike everything that overlaps it.
pub fn nms_reference(boxes: &[AxisAlignedBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && iou_by_cells(&boxes[b], &boxes[i]) > thr {
                alive[i] = false;
            }
        }
    }
    kept
}

/// A box whose IoU with the unit cube at the origin is `iou`, by sliding it
/// along x: IoU = (1 - s) / (1 + s).
pub fn shifted_unit(iou: f64) -> AxisAlignedBox {
    let s = (1.0 - iou) / (1.0 + iou);
    AxisAlignedBox::new([s, 0.0, 0.0], [1.0; 3]).unwrap()
}

/// Five queries against the unit cube, top-1 IoUs 0.6, 0.6, 0.3, 0.3, 0.1.
/// Counting by hand: R@1,0.5 = 2/5, R@1,0.25 = 4/5, R@3,0.5 = 3/5 (query 3
/// has 0.6 second), R@3,0.25 = 5/5 (query 5 has 0.3 third).
pub fn five_query_example() -> (Vec<Vec<AxisAlignedBox>>, Vec<AxisAlignedBox>) {
    let ious = [
        [0.6, 0.1, 0.1],
        [0.6, 0.3, 0.1],
        [0.3, 0.6, 0.1],
        [0.3, 0.1, 0.1],
        [0.1, 0.1, 0.3],
    ];
    let preds = ious.iter().map(|q| q.iter().map(|&v| shifted_unit(v)).collect()).collect();
    let gt = AxisAlignedBox::new([0.0; 3], [1.0; 3]).unwrap();
    (preds, vec![gt; 5])
}

/// Default generator with the detector's box jitter (center and size) set
/// to `sigma` and its label noise to `epsilon`.
pub fn detector_corpus(sigma: f64, epsilon: f64, scenes: usize, seed: u64) -> ground3d::synth_data::Corpus {
    let mut gen = ground3d::synth_data::GenConfig::default();
    gen.detector.center_noise = sigma;
    gen.detector.size_noise = sigma;
    gen.detector.label_noise = epsilon;
    ground3d::synth_data::generate_corpus(&gen, scenes, seed).unwrap()
}
