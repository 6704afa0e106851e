//! Property tests for the invariants of targets, losses, IoU and F1.

use mog_core::eval::{iou_aabb, match_predictions, query_f1, Box3D, MetricsTable};
use mog_core::losses::{
    alignment_loss, distinctiveness_loss, grounding_loss, hierarchical_loss, hierarchical_targets,
};
use mog_core::scene::Subset;
use mog_core::{Tape, Tensor};
use proptest::prelude::*;

fn point() -> impl Strategy<Value = [f64; 3]> {
    [0.0..8.0f64, 0.0..8.0f64, 0.0..3.0f64]
}

fn boxes(max: usize) -> impl Strategy<Value = Vec<Box3D>> {
    prop::collection::vec(
        (point(), [0.2..2.0f64, 0.2..2.0f64, 0.2..2.0f64]).prop_map(|(centroid, size)| Box3D { centroid, size }),
        0..=max,
    )
}

/// Maximum number of disjoint pairs with IoU > tau, by exhaustive search.
fn exhaustive_tp(preds: &[Box3D], gts: &[Box3D], tau: f64) -> usize {
    fn go(i: usize, preds: &[Box3D], gts: &[Box3D], used: &mut Vec<bool>, tau: f64) -> usize {
        if i == preds.len() {
            return 0;
        }
        let mut best = go(i + 1, preds, gts, used, tau);
        for j in 0..gts.len() {
            if !used[j] && iou_aabb(&preds[i], &gts[j]) > tau {
                used[j] = true;
                best = best.max(1 + go(i + 1, preds, gts, used, tau));
                used[j] = false;
            }
        }
        best
    }
    go(0, preds, gts, &mut vec![false; gts.len()], tau)
}

/// Predictions near a random subset of the ground truth plus stray boxes.
fn matching_instance() -> impl Strategy<Value = (Vec<Box3D>, Vec<Box3D>)> {
    boxes(6).prop_flat_map(|gts| {
        let n = gts.len();
        (
            Just(gts),
            prop::collection::vec((0..n.max(1), [-0.3..0.3f64, -0.3..0.3f64, -0.3..0.3f64]), 0..=6),
            boxes(2),
        )
            .prop_map(|(gts, near, stray)| {
                let mut preds: Vec<Box3D> = near
                    .into_iter()
                    .filter(|_| !gts.is_empty())
                    .map(|(k, d)| {
                        let g = gts[k % gts.len()];
                        Box3D {
                            centroid: [g.centroid[0] + d[0], g.centroid[1] + d[1], g.centroid[2] + d[2]],
                            size: g.size,
                        }
                    })
                    .collect();
                preds.extend(stray);
                preds.truncate(6);
                (preds, gts)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn stage_targets_nest_and_end_exact(
        centroids in prop::collection::vec(point(), 1..16),
        picks in prop::collection::vec(any::<bool>(), 16),
        mut deltas in prop::collection::vec(0.01..3.0f64, 1..4),
    ) {
        deltas.sort_by(|a, b| b.total_cmp(a));
        deltas.dedup();
        deltas.push(0.0);
        let targets: Vec<usize> = (0..centroids.len()).filter(|&i| picks[i]).collect();
        let st = hierarchical_targets(&centroids, &targets, &deltas);
        for s in 1..deltas.len() {
            for i in 0..centroids.len() {
                prop_assert!(st.stages[s][i] <= st.stages[s - 1][i]);
            }
        }
        prop_assert_eq!(st.members(deltas.len() - 1), targets);
    }

    #[test]
    fn iou_is_symmetric_bounded_and_translation_invariant(
        a in boxes(1).prop_filter("one box", |v| v.len() == 1),
        b in boxes(1).prop_filter("one box", |v| v.len() == 1),
        t in [-5.0..5.0f64, -5.0..5.0f64, -5.0..5.0f64],
    ) {
        let (a, b) = (a[0], b[0]);
        let v = iou_aabb(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou_aabb(&b, &a));
        let shift = |x: Box3D| Box3D {
            centroid: [x.centroid[0] + t[0], x.centroid[1] + t[1], x.centroid[2] + t[2]],
            size: x.size,
        };
        prop_assert!((iou_aabb(&shift(a), &shift(b)) - v).abs() < 1e-9);
        prop_assert!((iou_aabb(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_matching_is_optimal((preds, gts) in matching_instance()) {
        prop_assert_eq!(match_predictions(&preds, &gts, 0.5), exhaustive_tp(&preds, &gts, 0.5));
    }

    #[test]
    fn f1_ignores_object_order((preds, gts) in matching_instance(), rot in 0usize..6) {
        let tp = match_predictions(&preds, &gts, 0.5);
        let f1 = query_f1(tp, preds.len(), gts.len());
        let mut p2 = preds.clone();
        let mut g2 = gts.clone();
        p2.reverse();
        if !g2.is_empty() {
            let k = rot % g2.len();
            g2.rotate_left(k);
        }
        let tp2 = match_predictions(&p2, &g2, 0.5);
        prop_assert_eq!(f1, query_f1(tp2, p2.len(), g2.len()));
        prop_assert!((0.0..=1.0).contains(&f1));
    }

    #[test]
    fn all_row_is_the_weighted_subset_mean(scores in prop::collection::vec((0usize..5, 0.0..=1.0f64), 1..60)) {
        let scores: Vec<(Subset, f64)> = scores.into_iter().map(|(s, f)| (Subset::ALL[s], f)).collect();
        let m = MetricsTable::from_scores(&scores).unwrap();
        prop_assert!((m.all.f1 - m.weighted_all()).abs() < 1e-12);
        prop_assert_eq!(m.rows.iter().map(|r| r.count).sum::<usize>(), m.all.count);
        prop_assert_eq!(MetricsTable::from_csv(&m.to_csv()).unwrap(), m);
    }

    #[test]
    fn losses_are_nonnegative(
        z in prop::collection::vec(-20.0..20.0f64, 2..8),
        other in prop::collection::vec(-3.0..3.0f64, 16),
        picks in prop::collection::vec(any::<bool>(), 8),
    ) {
        let n = z.len();
        let tape = Tape::new();
        let zv = tape.param(Tensor::row(z.clone()));
        let targets: Vec<usize> = (0..n).filter(|&i| picks[i]).collect();
        let mask = vec![1.0; n];
        prop_assert!(grounding_loss(zv, &targets, &mask).unwrap().item() >= 0.0);
        let centroids: Vec<[f64; 3]> = (0..n).map(|i| [i as f64 * 0.4, 0.0, 0.0]).collect();
        let st = hierarchical_targets(&centroids, &targets, &[1.0, 0.0]);
        prop_assert!(hierarchical_loss(&[zv, zv], &st, &mask, 0.1).unwrap().item() >= 0.0);
        let a = tape.param(Tensor::new(vec![n, 2], other[..2 * n].to_vec()).unwrap());
        let b = tape.constant(Tensor::new(vec![n, 2], other[16 - 2 * n..].to_vec()).unwrap());
        prop_assert!(alignment_loss(&[a], &[b]).unwrap().item() >= 0.0);
        prop_assert!(alignment_loss(&[a], &[a]).unwrap().item() == 0.0);
        prop_assert!(distinctiveness_loss(&tape, a, b, 1.0).unwrap().item() >= 0.0);
    }

    #[test]
    fn distinctiveness_is_flat_beyond_the_margin(
        rows in prop::collection::vec([-1.0..1.0f64, -1.0..1.0f64], 2..6),
        spread in 3.0..10.0f64,
    ) {
        // Row i of both sides sits near i * spread on the first axis, so
        // every cross pair (i != j) is farther apart than the margin.
        let n = rows.len();
        let place = |jit: f64| -> Tensor {
            let data = rows
                .iter()
                .enumerate()
                .flat_map(|(i, r)| [i as f64 * spread + jit * r[0], jit * r[1]])
                .collect();
            Tensor::new(vec![n, 2], data).unwrap()
        };
        let tape = Tape::new();
        let h_inf = tape.param(place(0.5));
        let h_aux = tape.constant(place(-0.5));
        let loss = distinctiveness_loss(&tape, h_inf, h_aux, 1.0).unwrap();
        prop_assert_eq!(loss.item(), 0.0);
        tape.backward(loss).unwrap();
        let g = h_inf.grad().unwrap_or_else(|| Tensor::zeros(&[n, 2]));
        prop_assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
