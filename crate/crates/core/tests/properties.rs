mod common;

use common::{iou_by_cells, nms_reference};
use ground3d::distill::{pseudo_labels, rewards_from_ranks};
use ground3d::fine::rank_candidates;
use ground3d::geometry::{box_iou, grounding_upper_bound, nms, AxisAlignedBox};
use ground3d::metrics::{oracle_ranking, recall_at, DEFAULT_CELLS};
use ground3d::optim::cosine_lr;
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = AxisAlignedBox> {
    (prop::array::uniform3(-3.0..3.0f64), prop::array::uniform3(0.05..3.0f64))
        .prop_map(|(c, s)| AxisAlignedBox::new(c, s).unwrap())
}

/// A permutation of 0..k drawn as sort order of random keys.
fn arb_ranks(max_k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(any::<u32>(), 1..=max_k).prop_map(|keys| {
        let mut order: Vec<usize> = (0..keys.len()).collect();
        order.sort_by_key(|&i| (keys[i], i));
        let mut ranks = vec![0; keys.len()];
        for (r, &i) in order.iter().enumerate() {
            ranks[i] = r;
        }
        ranks
    })
}

proptest! {
    #[test]
    fn iou_matches_cell_decomposition(a in arb_box(), b in arb_box()) {
        let iou = box_iou(&a, &b);
        prop_assert!((iou - iou_by_cells(&a, &b)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert_eq!(iou, box_iou(&b, &a));
        prop_assert_eq!(box_iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_translation_invariant(a in arb_box(), b in arb_box(), t in prop::array::uniform3(-10.0..10.0f64)) {
        let moved = box_iou(&a.translated(t), &b.translated(t));
        prop_assert!((moved - box_iou(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn nms_matches_reference(
        boxes in prop::collection::vec(arb_box(), 0..20),
        seed in any::<u64>(),
        thr in 0.05..0.95f64,
    ) {
        // distinct scores so the reference's tie rule never matters
        let scores: Vec<f64> = (0..boxes.len()).map(|i| ((seed >> (i % 48)) % 1000) as f64 + i as f64 * 1e-3).collect();
        let kept = nms(&boxes, &scores, thr).unwrap();
        prop_assert_eq!(&kept, &nms_reference(&boxes, &scores, thr));
        for (x, &i) in kept.iter().enumerate() {
            for &j in &kept[x + 1..] {
                prop_assert!(box_iou(&boxes[i], &boxes[j]) <= thr);
            }
        }
    }

    #[test]
    fn upper_bound_is_oracle_top1(gt in arb_box(), props in prop::collection::vec(arb_box(), 1..12)) {
        let ub = grounding_upper_bound(&props, &gt).unwrap();
        let best = oracle_ranking(&props, &gt)[0];
        prop_assert_eq!(ub, box_iou(&props[best], &gt));
        prop_assert!(props.iter().all(|p| box_iou(p, &gt) <= ub));
    }

    #[test]
    fn rewards_follow_rank_order(ranks in arb_ranks(8)) {
        let r = rewards_from_ranks(&ranks).unwrap();
        for i in 0..r.len() {
            prop_assert!((0.0..=1.0).contains(&r[i]));
            for j in 0..r.len() {
                if ranks[i] < ranks[j] {
                    prop_assert!(r[i] > r[j]);
                }
            }
        }
        let best = ranks.iter().position(|&x| x == 0).unwrap();
        prop_assert_eq!(r[best], 1.0);
        if r.len() > 1 {
            let worst = ranks.iter().position(|&x| x == r.len() - 1).unwrap();
            prop_assert_eq!(r[worst], 0.0);
        }
    }

    #[test]
    fn pseudo_labels_are_ordered_distributions(
        ranks in arb_ranks(6),
        extra in 0usize..10,
        temperature in 0.1..3.0f64,
    ) {
        let k = ranks.len();
        let m = k + extra;
        let candidates: Vec<usize> = (0..k).map(|i| (i * 7 + 3) % m).collect();
        prop_assume!({
            let mut c = candidates.clone();
            c.sort();
            c.dedup();
            c.len() == k
        });
        let rewards = rewards_from_ranks(&ranks).unwrap();
        let p = pseudo_labels(&rewards, &candidates, m, temperature).unwrap();
        prop_assert!((p.d.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.d.iter().all(|&v| v > 0.0));
        for a in 0..k {
            for b in 0..k {
                if rewards[a] > rewards[b] {
                    prop_assert!(p.d[candidates[a]] > p.d[candidates[b]]);
                }
            }
        }
        let floor = p.d[candidates[ranks.iter().position(|&x| x == k - 1).unwrap()]];
        for i in (0..m).filter(|i| !candidates.contains(i)) {
            prop_assert!(p.d[i] <= floor);
        }
    }

    #[test]
    fn candidate_ranks_sort_losses(losses in prop::collection::vec(-5.0..5.0f64, 1..10)) {
        let ranks = rank_candidates(&losses).unwrap();
        let mut seen = ranks.clone();
        seen.sort();
        prop_assert_eq!(seen, (0..losses.len()).collect::<Vec<_>>());
        for i in 0..losses.len() {
            for j in 0..losses.len() {
                if losses[i] < losses[j] {
                    prop_assert!(ranks[i] < ranks[j]);
                }
            }
        }
    }

    #[test]
    fn recall_monotone_in_n_and_m(
        queries in prop::collection::vec((arb_box(), prop::collection::vec(arb_box(), 3)), 1..15),
    ) {
        let preds: Vec<Vec<AxisAlignedBox>> = queries.iter().map(|q| q.1.clone()).collect();
        let gts: Vec<AxisAlignedBox> = queries.iter().map(|q| q.0).collect();
        for &(n, m) in &DEFAULT_CELLS {
            for &(n2, m2) in &DEFAULT_CELLS {
                if n2 >= n && m2 <= m {
                    prop_assert!(recall_at(&preds, &gts, n2, m2).unwrap() >= recall_at(&preds, &gts, n, m).unwrap());
                }
            }
        }
    }

    #[test]
    fn cosine_schedule_decays(lr0 in 1e-5..1.0f64, total in 1usize..200) {
        prop_assert_eq!(cosine_lr(lr0, 0.0, 0, total), lr0);
        prop_assert!(cosine_lr(lr0, 0.0, total, total).abs() < 1e-12 * lr0);
        for t in 1..=total {
            prop_assert!(cosine_lr(lr0, 0.0, t, total) <= cosine_lr(lr0, 0.0, t - 1, total));
        }
    }
}
