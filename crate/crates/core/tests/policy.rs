use ddfg::oracles::{enumerate_pmf_support, partition_by_group};
use ddfg::policy::{
    count_vectors, importance_ratio, multinomial_pmf, policy_entropy, sample_structure, subpolicy_pmf, support_count,
    EdgeProbMatrix,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

#[test]
fn support_count_matches_enumeration() {
    for n in 1..=8 {
        for d in 1..=5 {
            assert_eq!(count_vectors(n, d).unwrap().len() as u128, support_count(n, d), "n={n} d={d}");
        }
    }
}

#[test]
fn sampled_pair_frequency() {
    let probs = EdgeProbMatrix::from_columns(&[vec![0.5, 0.5]]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let hits = (0..10_000)
        .filter(|_| sample_structure(&probs, 2, &mut rng).unwrap().column_counts(0) == [1, 1])
        .count();
    let freq = hits as f64 / 10_000.0;
    assert!((freq - 0.5).abs() <= 0.02, "{freq}");
}

#[test]
fn counts_always_sum_to_d_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let probs = EdgeProbMatrix::from_columns(&[simplex(&mut rng, 5), simplex(&mut rng, 5)]).unwrap();
    for _ in 0..10_000 {
        let s = sample_structure(&probs, 3, &mut rng).unwrap();
        for j in 0..2 {
            assert_eq!(s.column_counts(j).iter().sum::<usize>(), 3);
        }
    }
}

#[test]
fn ratio_product_is_pmf_quotient() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..100 {
        let n = rng.gen_range(2..=4);
        let d = rng.gen_range(1..=3);
        let (new, old) = (simplex(&mut rng, n), simplex(&mut rng, n));
        let new2 = simplex(&mut rng, n);
        let old2 = simplex(&mut rng, n);
        let probs = EdgeProbMatrix::from_columns(&[old.clone(), old2.clone()]).unwrap();
        let s = sample_structure(&probs, d, &mut rng).unwrap();
        let (m0, m1) = (s.column_counts(0), s.column_counts(1));
        let product = importance_ratio(&new, &old, &m0).unwrap() * importance_ratio(&new2, &old2, &m1).unwrap();
        let quotient = multinomial_pmf(&new, &m0, d).unwrap() * multinomial_pmf(&new2, &m1, d).unwrap()
            / (multinomial_pmf(&old, &m0, d).unwrap() * multinomial_pmf(&old2, &m1, d).unwrap());
        assert!((product - quotient).abs() <= 1e-9 * quotient.abs().max(1.0));
    }
}

#[test]
fn entropy_of_uniform_columns() {
    let u = EdgeProbMatrix::uniform(4, 1).unwrap();
    assert!((policy_entropy(&u) - 1.3863).abs() < 1e-4);
    let det = EdgeProbMatrix::from_columns(&[vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
    assert_eq!(policy_entropy(&det), 0.0);
}

#[test]
fn edge_probabilities_validated() {
    assert!(EdgeProbMatrix::from_columns(&[vec![0.5, 0.6]]).is_err());
    assert!(EdgeProbMatrix::from_columns(&[vec![-0.5, 1.5]]).is_err());
}

proptest! {
    #[test]
    fn subpolicies_normalize(seed in any::<u64>(), n in 1usize..=6, d in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = simplex(&mut rng, n);
        let entries = enumerate_pmf_support(&p, d).unwrap();
        let direct: f64 = entries.iter().map(|e| e.probability).sum();
        prop_assert!((direct - 1.0).abs() <= 1e-12);
        let cells = partition_by_group(&entries);
        let mut total = 0.0;
        for (group, cell) in &cells {
            let sub = subpolicy_pmf(&p, group, d).unwrap();
            let cell_sum: f64 = cell.iter().map(|e| e.probability).sum();
            prop_assert!((sub - cell_sum).abs() <= 1e-12);
            total += sub;
        }
        prop_assert!((total - 1.0).abs() <= 1e-9);
        let cell_total: usize = cells.values().map(Vec::len).sum();
        prop_assert_eq!(cell_total, entries.len());
    }

    #[test]
    fn sampled_orders_bounded(seed in any::<u64>(), n in 1usize..=7, d in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols: Vec<Vec<f64>> = (0..3).map(|_| simplex(&mut rng, n)).collect();
        let probs = EdgeProbMatrix::from_columns(&cols).unwrap();
        let s = sample_structure(&probs, d, &mut rng).unwrap();
        for j in 0..3 {
            let counts = s.column_counts(j);
            let order = s.adjacency().column_sum(j);
            prop_assert!(order <= d);
            prop_assert_eq!(order == d, counts.iter().all(|&c| c <= 1));
            for (i, &c) in counts.iter().enumerate() {
                prop_assert_eq!(s.adjacency().get(i, j), c >= 1);
            }
        }
    }

    #[test]
    fn identical_policies_have_unit_ratio(seed in any::<u64>(), n in 1usize..=6, d in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = simplex(&mut rng, n);
        let probs = EdgeProbMatrix::from_columns(std::slice::from_ref(&p)).unwrap();
        let s = sample_structure(&probs, d, &mut rng).unwrap();
        prop_assert_eq!(importance_ratio(&p, &p, &s.column_counts(0)).unwrap(), 1.0);
    }
}
