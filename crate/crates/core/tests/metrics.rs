use proptest::prelude::*;
use psst_autodiff::{Tape, Tensor};
use psst_core::metrics::{
    cider, composite_loss, disc_hinge_loss, hinge_values, median, recall_at_cider, recall_at_k,
    spearman, LossWeights, NGramStats,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// content tokens start after the reserved ids
const A: usize = 3;
const B: usize = 4;
const C: usize = 5;
const D: usize = 6;
const E: usize = 7;
const F: usize = 8;

fn toy_stats() -> NGramStats {
    NGramStats::from_documents(vec![vec![vec![A, B, C]], vec![vec![A, B, D]], vec![vec![E, F]]])
        .unwrap()
}

#[test]
fn cider_identity_and_disjoint() {
    let stats = toy_stats();
    let cand = [A, B, C, D, E];
    assert!((cider(&cand, &[cand], &stats).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(cider(&[E, F], &[[A, B, C]], &stats).unwrap(), 0.0);
    assert_eq!(cider(&[], &[[A, B, C]], &stats).unwrap(), 0.0);
    assert!(cider::<[usize; 1]>(&[A], &[], &stats).is_err());
}

#[test]
fn cider_hand_fixture() {
    // Three documents; "a b" is the bigram shared by two of them. With
    // N = 3, idf(a) = idf(b) = idf(ab) = ln 1.5 and idf(c) = idf(bc) = ln 3.
    let x = 1.5f64.ln();
    let y = 3.0f64.ln();
    let uni = (2.0 * x * x) / ((2.0 * x * x).sqrt() * (2.0 * x * x + y * y).sqrt());
    let bi = (x * x) / (x * (x * x + y * y).sqrt());
    let expected = (uni + bi) / 4.0;
    assert!((expected - 0.20223760382754644).abs() < 1e-15);
    let got = cider(&[A, B], &[[A, B, C]], &toy_stats()).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn unseen_ngrams_get_maximal_idf() {
    let stats = toy_stats();
    assert_eq!(stats.num_docs(), 3);
    assert_eq!(stats.doc_freq(&[A, B]), 2);
    assert!((stats.idf(&[9, 9]) - 3.0f64.ln()).abs() < 1e-15);
}

#[test]
fn hinge_fixtures() {
    let v = hinge_values(&Tensor::from_rows(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap()).unwrap();
    assert_eq!(v, vec![0.0, 0.0]);
    let v = hinge_values(&Tensor::zeros(&[3, 3])).unwrap();
    assert_eq!(v, vec![2.0, 2.0, 2.0]);
}

fn brute_hinge(s: &[Vec<f64>]) -> Vec<f64> {
    let n = s.len();
    (0..n)
        .map(|i| {
            let mut total = 0.0;
            let worst_cap = (0..n).filter(|&k| k != i).map(|k| s[k][i]).fold(f64::MIN, f64::max);
            let worst_scene = (0..n).filter(|&j| j != i).map(|j| s[i][j]).fold(f64::MIN, f64::max);
            total += (1.0 - s[i][i] + worst_cap).max(0.0);
            total += (1.0 - s[i][i] + worst_scene).max(0.0);
            total
        })
        .collect()
}

#[test]
fn hinge_matches_brute_force_on_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let got = hinge_values(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for (g, e) in got.iter().zip(brute_hinge(&rows)) {
            assert!((g - e).abs() < 1e-12);
        }
        let mut tape = Tape::new();
        let s = tape.param(Tensor::from_rows(&rows).unwrap()).unwrap();
        let l = disc_hinge_loss(&mut tape, s).unwrap();
        let mean = brute_hinge(&rows).iter().sum::<f64>() / 4.0;
        assert!((tape.value(l).item() - mean).abs() < 1e-12);
    }
}

fn brute_recall(scores: &[Vec<f64>], targets: &[usize], ids: &[u32], k: usize) -> f64 {
    let mut hits = 0;
    for (q, row) in scores.iter().enumerate() {
        let mut order: Vec<usize> = (0..row.len()).collect();
        // descending score, ascending id on ties
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(ids[a].cmp(&ids[b])));
        if order[..k].contains(&targets[q]) {
            hits += 1;
        }
    }
    hits as f64 / scores.len() as f64
}

#[test]
fn recall_matches_sort_and_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pool = 20;
    let ids: Vec<u32> = (0..pool as u32).map(|i| (i * 7) % 23).collect();
    let rows: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..pool).map(|_| (rng.gen_range(0..8) as f64) / 8.0).collect())
        .collect();
    let targets: Vec<usize> = (0..100).map(|_| rng.gen_range(0..pool)).collect();
    let t = Tensor::from_rows(&rows).unwrap();
    for k in 1..=pool {
        let got = recall_at_k(&t, &targets, &ids, k).unwrap();
        assert_eq!(got, brute_recall(&rows, &targets, &ids, k), "k = {k}");
    }
    assert_eq!(recall_at_k(&t, &targets, &ids, pool).unwrap(), 1.0);
    assert!(recall_at_k(&t, &targets, &ids, 0).is_err());
}

#[test]
fn strictly_best_target_counts_at_one() {
    let t = Tensor::from_rows(&[vec![0.1, 0.9, 0.3]]).unwrap();
    assert_eq!(recall_at_k(&t, &[1], &[0, 1, 2], 1).unwrap(), 1.0);
    assert_eq!(recall_at_k(&t, &[2], &[0, 1, 2], 1).unwrap(), 0.0);
}

fn composite_grads(lambda: f64, disc_only: bool, nat_only: bool) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let disc = tape.sum(sq).unwrap();
    let t = tape.tanh(x).unwrap();
    let nat = tape.sum(t).unwrap();
    let root = if disc_only {
        disc
    } else if nat_only {
        nat
    } else {
        composite_loss(&mut tape, Some(disc), Some(nat), LossWeights::new(lambda).unwrap()).unwrap()
    };
    let value = tape.value(root).item();
    tape.backward(root).unwrap();
    (value, tape.grad_or_zeros(x).data().to_vec())
}

#[test]
fn composite_is_linear_in_lambda() {
    let (dv, dg) = composite_grads(0.0, true, false);
    let (nv, ng) = composite_grads(0.0, false, true);
    for lambda in [0.0, 0.5, 1.0] {
        let (v, g) = composite_grads(lambda, false, false);
        assert!((v - (lambda * dv + (1.0 - lambda) * nv)).abs() < 1e-12);
        for i in 0..3 {
            assert!((g[i] - (lambda * dg[i] + (1.0 - lambda) * ng[i])).abs() < 1e-12);
        }
    }
    let (v, _) = composite_grads(0.5, false, false);
    assert!((v - 0.5 * (dv + nv)).abs() < 1e-12);
    assert!(LossWeights::new(1.5).is_err());
}

#[test]
fn interpolation_and_rank_helpers() {
    let r = recall_at_cider(&[(0.4, 0.2), (0.6, 0.4)], 0.5).unwrap();
    assert!((r - 0.3).abs() < 1e-12);
    assert_eq!(recall_at_cider(&[(0.4, 0.2), (0.6, 0.4)], 0.7), None);
    assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
    assert_eq!(median(&[3.0, 1.0, 2.0, 10.0]), Some(2.5));
}

proptest! {
    #[test]
    fn hinge_is_nonnegative_and_zero_iff_margins_hold(
        data in proptest::collection::vec(-1.0f64..1.0, 9),
        diag_boost in 0.0f64..3.0,
    ) {
        let mut rows: Vec<Vec<f64>> = data.chunks(3).map(<[f64]>::to_vec).collect();
        for (i, row) in rows.iter_mut().enumerate() {
            row[i] += diag_boost;
        }
        let v = hinge_values(&Tensor::from_rows(&rows).unwrap()).unwrap();
        for (i, h) in v.iter().enumerate() {
            prop_assert!(*h >= 0.0);
            let margins_hold = (0..3)
                .filter(|&k| k != i)
                .all(|k| rows[i][i] - rows[k][i] >= 1.0 && rows[i][i] - rows[i][k] >= 1.0);
            prop_assert_eq!(*h == 0.0, margins_hold);
        }
    }

    #[test]
    fn cider_ignores_reference_order_and_rewards_copies(
        cand in proptest::collection::vec(3usize..9, 1..6),
        refs in proptest::collection::vec(proptest::collection::vec(3usize..9, 1..6), 1..4),
    ) {
        let stats = toy_stats();
        let base = cider(&cand, &refs, &stats).unwrap();
        let mut rev = refs.clone();
        rev.reverse();
        prop_assert!((cider(&cand, &rev, &stats).unwrap() - base).abs() < 1e-12);
        let mut more = refs.clone();
        more.push(cand.clone());
        prop_assert!(cider(&cand, &more, &stats).unwrap() >= base - 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&base));
    }

    #[test]
    fn recall_non_decreasing_in_k(
        data in proptest::collection::vec(-1.0f64..1.0, 30),
        targets in proptest::collection::vec(0usize..6, 5),
    ) {
        let rows: Vec<Vec<f64>> = data.chunks(6).map(<[f64]>::to_vec).collect();
        let t = Tensor::from_rows(&rows).unwrap();
        let ids: Vec<u32> = (0..6).collect();
        let mut prev = 0.0;
        for k in 1..=6 {
            let r = recall_at_k(&t, &targets, &ids, k).unwrap();
            prop_assert!(r >= prev);
            prev = r;
        }
        prop_assert_eq!(prev, 1.0);
    }
}
