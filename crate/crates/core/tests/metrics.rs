use feedrank::eval::{hr_at_k, metrics_from_ranks, ndcg_at_k, rank_of};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Position of the target after a full sort by (score desc, id asc).
fn sorted_position(cands: &[(u32, f64)], target: usize) -> usize {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| {
        cands[b]
            .1
            .partial_cmp(&cands[a].1)
            .unwrap()
            .then(cands[a].0.cmp(&cands[b].0))
    });
    order.iter().position(|&i| i == target).unwrap()
}

/// Random case: distinct ids, coarse scores so that ties are common.
fn random_case(rng: &mut ChaCha8Rng) -> Vec<(u32, f64)> {
    let n = rng.random_range(2..1001);
    let levels = rng.random_range(1..50);
    rand::seq::index::sample(rng, 5000, n)
        .into_iter()
        .map(|i| (i as u32, rng.random_range(0..levels) as f64 / levels as f64))
        .collect()
}

#[test]
fn thousand_cases_match_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut ranks = Vec::new();
    let mut positions = Vec::new();
    for _ in 0..1000 {
        let case = random_case(&mut rng);
        let pos = sorted_position(&case, 0);
        let rank = rank_of(&case, 0);
        assert_eq!(rank, pos + 1);
        for k in [1, 5, 10, 20] {
            assert_eq!(hr_at_k(rank, k), if pos < k { 1.0 } else { 0.0 });
            let oracle = if pos < k { 1.0 / ((pos + 2) as f64).log2() } else { 0.0 };
            assert!((ndcg_at_k(rank, k) - oracle).abs() < 1e-15);
        }
        ranks.push(rank);
        positions.push(pos);
    }
    let m = metrics_from_ranks(&ranks, 10).unwrap();
    let hits = positions.iter().filter(|&&p| p < 10).count();
    assert_eq!(m.hr, hits as f64 / 1000.0);
    let gain: f64 = positions
        .iter()
        .filter(|&&p| p < 10)
        .map(|&p| 1.0 / ((p + 2) as f64).log2())
        .sum();
    assert!((m.ndcg - gain / 1000.0).abs() < 1e-12);
}

#[test]
fn rank_three_is_exactly_half() {
    assert_eq!(ndcg_at_k(3, 10), 0.5);
}

#[test]
fn ground_truth_on_top_everywhere_is_perfect() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ranks: Vec<usize> = (0..50)
        .map(|_| {
            let mut case = random_case(&mut rng);
            case[0].1 = 2.0;
            rank_of(&case, 0)
        })
        .collect();
    let m = metrics_from_ranks(&ranks, 10).unwrap();
    assert_eq!((m.hr, m.ndcg), (1.0, 1.0));
}

proptest! {
    #[test]
    fn ranks_survive_increasing_transforms(scores in proptest::collection::vec(-5.0f64..5.0, 2..60), target in 0usize..60) {
        let target = target % scores.len();
        let cands: Vec<(u32, f64)> = scores.iter().enumerate().map(|(i, &s)| (i as u32 * 3, s)).collect();
        let moved: Vec<(u32, f64)> = cands.iter().map(|&(i, s)| (i, (2.0 * s).exp() + 7.0)).collect();
        prop_assert_eq!(rank_of(&cands, target), rank_of(&moved, target));
    }
}
