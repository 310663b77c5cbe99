use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sceneloc_core::eval::stats::{
    friedman_test, holm_adjust, wilcoxon_signed_rank, WilcoxonMethod,
};
use sceneloc_core::eval::{summarize, win_matrix};
use sceneloc_core::{EpisodeRunMatrix, HeadKind};

/// Average ranks of `|d|`, computed by counting.
fn oracle_ranks(d: &[f64]) -> Vec<f64> {
    d.iter()
        .map(|x| {
            let less = d.iter().filter(|y| y.abs() < x.abs()).count() as f64;
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

/// Two-sided p by enumerating every sign assignment: the share of
/// assignments at least as far from the null mean as the observed `W+`.
fn brute_force_wilcoxon(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().copied().filter(|x| *x != 0.0).collect();
    let n = d.len();
    if n == 0 {
        return 1.0;
    }
    let ranks = oracle_ranks(&d);
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let mean = ranks.iter().sum::<f64>() / 2.0;
    let dist = (observed - mean).abs();
    let mut extreme = 0u64;
    for mask in 0u32..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if (w - mean).abs() >= dist - 1e-9 {
            extreme += 1;
        }
    }
    extreme as f64 / (1u64 << n) as f64
}

fn random_diffs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    // Coarse grid so ties and zeros occur regularly.
    (0..n).map(|_| (rng.random_range(-6i32..=6) as f64) * 0.05).collect()
}

#[test]
fn exact_wilcoxon_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..300 {
        let n = 1 + case % 12;
        let d = random_diffs(&mut rng, n);
        let zeros = vec![0.0; n];
        let r = wilcoxon_signed_rank(&d, &zeros, WilcoxonMethod::Exact).unwrap();
        let oracle = brute_force_wilcoxon(&d);
        assert!((r.p_value - oracle).abs() < 1e-12, "{d:?}: {} vs {oracle}", r.p_value);
    }
}

#[test]
fn normal_approximation_close_to_exact_at_n25() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..50 {
        let a: Vec<f64> = (0..25).map(|_| rng.random_range(0.0..1.0)).collect();
        let shift = rng.random_range(-0.3..0.3);
        let b: Vec<f64> = a.iter().map(|x| x + shift + rng.random_range(-0.5..0.5)).collect();
        let exact = wilcoxon_signed_rank(&a, &b, WilcoxonMethod::Exact).unwrap();
        let normal = wilcoxon_signed_rank(&a, &b, WilcoxonMethod::Normal).unwrap();
        let auto = wilcoxon_signed_rank(&a, &b, WilcoxonMethod::Auto).unwrap();
        assert!(!auto.exact);
        assert!((exact.p_value - normal.p_value).abs() < 0.01, "{} vs {}", exact.p_value, normal.p_value);
    }
}

#[test]
fn wilcoxon_swapping_samples_keeps_p() {
    let a = [0.3, 0.5, 0.2, 0.9, 0.4, 0.45];
    let b = [0.1, 0.55, 0.2, 0.6, 0.1, 0.3];
    let ab = wilcoxon_signed_rank(&a, &b, WilcoxonMethod::Auto).unwrap();
    let ba = wilcoxon_signed_rank(&b, &a, WilcoxonMethod::Auto).unwrap();
    assert_eq!(ab.p_value, ba.p_value);
    assert_eq!(ab.w_plus, ba.w_minus);
}

/// Friedman statistic from rank sums, independent of the library.
fn oracle_friedman(data: &[Vec<f64>]) -> f64 {
    let k = data.len();
    let n = data[0].len();
    let mut rank_sum = vec![0.0; k];
    for b in 0..n {
        for t in 0..k {
            let less = (0..k).filter(|&u| data[u][b] < data[t][b]).count() as f64;
            let equal = (0..k).filter(|&u| data[u][b] == data[t][b]).count() as f64;
            rank_sum[t] += less + (equal + 1.0) / 2.0;
        }
    }
    let (kf, nf) = (k as f64, n as f64);
    12.0 / (nf * kf * (kf + 1.0)) * rank_sum.iter().map(|r| r * r).sum::<f64>() - 3.0 * nf * (kf + 1.0)
}

#[test]
fn friedman_statistic_matches_rank_sum_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let k = rng.random_range(2..7);
        let n = rng.random_range(2..12);
        let data: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect())
            .collect();
        let r = friedman_test(&data).unwrap();
        assert!((r.statistic - oracle_friedman(&data)).abs() < 1e-9);
        assert!((0.0..=1.0).contains(&r.p_value));
    }
}

#[test]
fn friedman_null_rejection_rate_is_nominal() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let trials = 2000;
    let mut rejected = 0;
    for _ in 0..trials {
        let data: Vec<Vec<f64>> = (0..6).map(|_| (0..17).map(|_| rng.random::<f64>()).collect()).collect();
        if friedman_test(&data).unwrap().p_value <= 0.05 {
            rejected += 1;
        }
    }
    let rate = rejected as f64 / trials as f64;
    assert!((0.03..=0.07).contains(&rate), "rejection rate {rate}");
}

#[test]
fn friedman_rejects_fewer_than_two_blocks() {
    assert!(friedman_test(&[vec![0.1], vec![0.2]]).is_err());
}

proptest! {
    #[test]
    fn holm_is_monotone_and_dominates_bonferroni(
        pvals in prop::collection::vec(0.0f64..=1.0, 1..20),
        alpha in 0.001f64..0.2,
    ) {
        let h = holm_adjust(&pvals, alpha).unwrap();
        let mut order: Vec<usize> = (0..pvals.len()).collect();
        order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
        for w in order.windows(2) {
            prop_assert!(h.adjusted[w[0]] <= h.adjusted[w[1]]);
        }
        let m = pvals.len() as f64;
        for (i, p) in pvals.iter().enumerate() {
            prop_assert!(h.adjusted[i] >= *p);
            prop_assert!(h.adjusted[i] <= 1.0);
            if (p * m).min(1.0) <= alpha {
                prop_assert!(h.reject[i]);
            }
        }
    }

    #[test]
    fn percentiles_are_ordered(values in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let s = summarize(&values).unwrap();
        prop_assert!(s.p25 <= s.p50 && s.p50 <= s.p75);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min) * 100.0;
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) * 100.0;
        prop_assert!(s.p25 >= lo - 1e-9 && s.p75 <= hi + 1e-9);
        prop_assert!(s.std >= 0.0);
    }

    #[test]
    fn win_counts_partition_episodes(
        episodes in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = (0..episodes).map(|e| format!("e{e}")).collect();
        // Few distinct levels so ties happen.
        let m = EpisodeRunMatrix::from_fn(names, 2, |_, _, _| rng.random_range(0..4) as f64 / 4.0).unwrap();
        let w = win_matrix(&m);
        let k = HeadKind::ALL.len();
        for i in 0..k {
            prop_assert_eq!(w.wins[i][i], 0);
            for j in 0..k {
                if i != j {
                    prop_assert_eq!(w.wins[i][j] + w.wins[j][i] + w.ties[i][j], episodes);
                    prop_assert_eq!(w.ties[i][j], w.ties[j][i]);
                }
            }
            prop_assert!(w.summary_score(i) <= 5 * episodes);
        }
    }
}
