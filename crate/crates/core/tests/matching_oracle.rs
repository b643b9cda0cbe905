//! Optimal matching and detection loss checked against exhaustive enumeration.

use propkit::bbox::Bbox;
use propkit::match_loss::{
    assignment_cost, detection_loss, hungarian_match, pair_terms, GtObject, LossWeights, MatchClassTerm, Prediction,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All permutations of `0..n`, by recursive insertion.
fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn brute_min(cost: &[Vec<f64>]) -> f64 {
    permutations(cost.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn permutation_generator_counts() {
    assert_eq!(permutations(5).len(), 120);
    assert_eq!(permutations(6).len(), 720);
}

#[test]
fn hungarian_equals_brute_force_on_5x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let cost: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let perm = hungarian_match(&cost).unwrap();
        let mut seen = perm.clone();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
        assert!((assignment_cost(&cost, &perm) - brute_min(&cost)).abs() < 1e-9);
    }
}

#[test]
fn hungarian_handles_ties_and_integers() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in 1..=6 {
        for _ in 0..100 {
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0..3) as f64).collect()).collect();
            let perm = hungarian_match(&cost).unwrap();
            assert_eq!(assignment_cost(&cost, &perm), brute_min(&cost));
        }
    }
}

#[test]
fn hungarian_generic_over_f32() {
    let cost: Vec<Vec<f32>> = vec![vec![3.0, 1.0, 2.0], vec![1.0, 5.0, 4.0], vec![2.0, 2.0, 0.5]];
    let perm = hungarian_match(&cost).unwrap();
    assert_eq!(assignment_cost(&cost, &perm), 2.5);
}

fn random_box(rng: &mut ChaCha8Rng) -> Bbox<f64> {
    let w = rng.random_range(0.05..0.5);
    let h = rng.random_range(0.05..0.5);
    Bbox::new(rng.random_range(0.0..1.0 - w), rng.random_range(0.0..1.0 - h), w, h)
}

fn random_instance(rng: &mut ChaCha8Rng, q: usize, classes: usize) -> (Vec<GtObject<f64>>, Vec<Prediction<f64>>) {
    let g = rng.random_range(0..=q);
    let gt = (0..g)
        .map(|_| GtObject { bbox: random_box(rng), class: rng.random_range(0..classes as u32) })
        .collect();
    let preds = (0..q)
        .map(|_| Prediction {
            bbox: random_box(rng),
            logits: (0..=classes).map(|_| rng.random_range(-3.0..3.0)).collect(),
        })
        .collect();
    (gt, preds)
}

#[test]
fn loss_at_optimum_is_minimal_over_all_720_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = LossWeights { class_term: MatchClassTerm::Logprob, ..LossWeights::default() };
    let perms = permutations(6);
    for _ in 0..50 {
        let (gt, preds) = random_instance(&mut rng, 6, 4);
        let r = detection_loss(&gt, &preds, 4, &w).unwrap();
        let terms = pair_terms(&gt, &preds, 4, &w).unwrap();
        for p in &perms {
            assert!(r.total_loss <= terms.evaluate(p).total_loss + 1e-9);
        }
        assert!((r.class_loss + r.box_l1 + r.box_giou - r.total_loss).abs() < 1e-9);
    }
}

#[test]
fn loss_is_invariant_to_set_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = LossWeights { class_term: MatchClassTerm::Logprob, ..LossWeights::default() };
    for _ in 0..100 {
        let (mut gt, mut preds) = random_instance(&mut rng, 5, 3);
        let before = detection_loss(&gt, &preds, 3, &w).unwrap().total_loss;
        gt.reverse();
        preds.rotate_left(2);
        let after = detection_loss(&gt, &preds, 3, &w).unwrap().total_loss;
        assert!((before - after).abs() < 1e-9, "{before} vs {after}");
    }
}

#[test]
fn probability_matching_minimizes_its_own_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = LossWeights::<f64>::default();
    for _ in 0..100 {
        let (gt, preds) = random_instance(&mut rng, 4, 3);
        let r = detection_loss(&gt, &preds, 3, &w).unwrap();
        let cost = pair_terms(&gt, &preds, 3, &w).unwrap().matching_cost(MatchClassTerm::Prob);
        assert!((assignment_cost(&cost, &r.assignment) - brute_min(&cost)).abs() < 1e-9);
    }
}
