use std::collections::BTreeSet;

use proptest::prelude::*;
use seq2set::assignment::{
    assign, assign_all, assign_first_n, hungarian, match_cost, Scheme, SlotTarget,
};
use seq2set::loss::{bipartite_loss, total_loss, LossConfig};
use seq2set::metrics::{evaluate, MacroAverage};
use seq2set::train::{clip_grads, cosine_lr, global_norm, split_validation};
use seq2set::transport::{cosine_cost, ot_distance, IpotParams};
use seq2set::verify::{brute_force_assignment, recount};
use seq2set::Tensor;

/// Slot distributions over `outputs` entries (null last) plus a distinct gold
/// set that fits into the slots.
fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (1usize..=6, 2usize..=7).prop_flat_map(|(slots, outputs)| {
        let probs = prop::collection::vec(prop::collection::vec(0.01f64..1.0, outputs), slots)
            .prop_map(|rows| {
                rows.into_iter()
                    .map(|r| {
                        let s: f64 = r.iter().sum();
                        r.into_iter().map(|x| x / s).collect()
                    })
                    .collect::<Vec<Vec<f64>>>()
            });
        let labels = outputs - 1;
        let gold = Just((0..labels).collect::<Vec<_>>())
            .prop_shuffle()
            .prop_flat_map(move |ids| (1..=labels.min(slots)).prop_map(move |m| ids[..m].to_vec()));
        (probs, gold)
    })
}

fn table(outputs: usize, seed: u64) -> Tensor<f64> {
    let mut t: Tensor<f64> = seq2set::data::random_embeddings(outputs + 1, 4, seed);
    t.row_mut(outputs - 1).iter_mut().for_each(|x| *x = 0.0);
    t
}

fn label_sets(max_label: usize) -> impl Strategy<Value = Vec<Vec<usize>>> {
    prop::collection::vec(prop::collection::btree_set(0..max_label, 0..4), 1..12)
        .prop_map(|v| v.into_iter().map(|s| s.into_iter().collect()).collect())
}

proptest! {
    #[test]
    fn assignment_covers_every_slot((probs, gold) in instance(), first_n in any::<bool>()) {
        let scheme = if first_n { Scheme::FirstN } else { Scheme::All };
        let a = assign(scheme, &gold, &probs).unwrap();
        prop_assert_eq!(a.targets.len(), probs.len());
        prop_assert_eq!(a.null_count(), probs.len() - gold.len());
        let labelled: BTreeSet<usize> = a.targets.iter().filter_map(|t| match t {
            SlotTarget::Label(y) => Some(*y),
            SlotTarget::Null => None,
        }).collect();
        prop_assert_eq!(labelled, gold.iter().copied().collect::<BTreeSet<_>>());
        for (j, &slot) in a.slot_of.iter().enumerate() {
            prop_assert_eq!(a.targets[slot], SlotTarget::Label(gold[j]));
            if first_n {
                prop_assert!(slot < gold.len());
            }
        }
    }

    #[test]
    fn hungarian_matches_exhaustive_search((probs, gold) in instance()) {
        let c = match_cost(&gold, &probs, 0..probs.len()).unwrap();
        let m = hungarian(&c).unwrap();
        prop_assert!((m.cost - brute_force_assignment(&c)).abs() < 1e-12);
    }

    #[test]
    fn matching_all_slots_never_costs_more((probs, gold) in instance()) {
        let all = assign_all(&gold, &probs).unwrap().matched_cost(&probs);
        let first = assign_first_n(&gold, &probs).unwrap().matched_cost(&probs);
        prop_assert!(all <= first + 1e-12);
    }

    #[test]
    fn losses_are_non_negative((probs, gold) in instance(), seed in any::<u64>()) {
        let outputs = probs[0].len();
        let t = table(outputs, seed);
        let b = total_loss(&gold, &probs, &t, &LossConfig::default()).unwrap();
        prop_assert!(b.bipartite >= 0.0);
        prop_assert!(b.ot >= 0.0 && b.ot <= 2.0 + 1e-9);
        prop_assert!((b.total - (b.bipartite + 8.0 * b.ot)).abs() < 1e-9);
        prop_assert!((bipartite_loss(&b.assignment, &probs, 0.2) - b.bipartite).abs() < 1e-12);
    }

    #[test]
    fn cosine_costs_stay_in_range((probs, gold) in instance(), seed in any::<u64>()) {
        let c = cosine_cost(&probs, &gold, &table(probs[0].len(), seed)).unwrap();
        prop_assert!(c.data.iter().all(|&x| (-1e-12..=2.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn transport_plan_is_feasible((probs, gold) in instance(), seed in any::<u64>()) {
        let r = ot_distance(&probs, &gold, &table(probs[0].len(), seed), &IpotParams::tight()).unwrap();
        let plan = r.plan.unwrap();
        prop_assert!(plan.gamma.data.iter().all(|&g| g >= 0.0));
        prop_assert!(plan.marginal_violation() < 1e-6);
    }

    #[test]
    fn metrics_ignore_sample_order(gold in label_sets(6), seed in any::<u64>()) {
        // Drop roughly a third of each gold set and add one extra label.
        let pred: Vec<Vec<usize>> = gold
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let keep = g.iter().copied().filter(|&y| !(y as u64 + seed + i as u64).is_multiple_of(3));
                let extra = (i + seed as usize) % 6;
                keep.chain([extra]).collect::<BTreeSet<_>>().into_iter().collect()
            })
            .collect();
        let base = evaluate(&pred, &gold, MacroAverage::Observed).unwrap();
        let (mut p2, mut g2) = (pred.clone(), gold.clone());
        p2.reverse();
        g2.reverse();
        let rev = evaluate(&p2, &g2, MacroAverage::Observed).unwrap();
        for (a, b) in base.values().iter().zip(rev.values()) {
            prop_assert!((a.1 - b.1).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_relabeling(pred in label_sets(6), gold in label_sets(6), shift in 1usize..6) {
        let n = pred.len().min(gold.len());
        let (pred, gold) = (&pred[..n], &gold[..n]);
        let remap = |sets: &[Vec<usize>]| -> Vec<Vec<usize>> {
            sets.iter().map(|s| s.iter().map(|&y| (y + shift) % 6).collect()).collect()
        };
        let a = evaluate(pred, gold, MacroAverage::All(6)).unwrap();
        let b = evaluate(&remap(pred), &remap(gold), MacroAverage::All(6)).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            prop_assert!((x.1 - y.1).abs() < 1e-12);
        }
        let observed = evaluate(pred, gold, MacroAverage::Observed).unwrap();
        for (x, y) in observed.values().iter().zip(recount(pred, gold, 6)) {
            prop_assert!((x.1 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_the_norm(values in prop::collection::vec(-100.0f64..100.0, 1..40), max in 0.1f64..10.0) {
        let mut grads = vec![Tensor::from_vec(&[values.len()], values).unwrap()];
        let before = global_norm(&grads);
        clip_grads(&mut grads, max);
        let after = global_norm(&grads);
        prop_assert!(after <= max * (1.0 + 1e-12));
        if before <= max {
            prop_assert_eq!(after, before);
        }
    }

    #[test]
    fn learning_rate_never_increases(total in 1usize..500, lr0 in 1e-5f64..1.0) {
        let mut prev = cosine_lr(0, total, lr0).unwrap();
        prop_assert!((prev - lr0).abs() < 1e-15);
        for step in 1..total {
            let lr = cosine_lr(step, total, lr0).unwrap();
            prop_assert!(lr <= prev && lr >= 0.0);
            prev = lr;
        }
    }

    #[test]
    fn validation_split_partitions(n in 1usize..200, frac in 0.0f64..0.9, seed in any::<u64>()) {
        let (train, val) = split_validation(n, frac, seed);
        let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(val.len(), (frac * n as f64).round() as usize);
    }
}
