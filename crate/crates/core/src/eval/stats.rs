//! Nonparametric tests used to compare heads across episodes.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size for which [`WilcoxonMethod::Auto`] uses the exact
/// null distribution.
pub const EXACT_WILCOXON_MAX_N: usize = 20;

/// 1-based ranks of `values`, ties receiving the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // Positions start+1 ..= end share their mean rank.
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FriedmanResult {
    pub statistic: f64,
    pub p_value: f64,
    pub treatments: usize,
    pub blocks: usize,
}

/// Friedman rank test. `data[j][b]` is the observation of treatment `j` in
/// block `b`; ranks are taken within each block.
pub fn friedman_test(data: &[Vec<f64>]) -> Result<FriedmanResult> {
    let k = data.len();
    if k < 2 {
        return Err(Error::invalid("Friedman test needs at least 2 treatments"));
    }
    let n = data[0].len();
    if data.iter().any(|row| row.len() != n) {
        return Err(Error::invalid("Friedman test needs the same blocks for every treatment"));
    }
    if n < 2 {
        return Err(Error::invalid("Friedman test needs at least 2 blocks"));
    }
    let mut rank_sums = vec![0.0; k];
    let mut block = vec![0.0; k];
    for b in 0..n {
        for (j, v) in block.iter_mut().enumerate() {
            *v = data[j][b];
        }
        for (sum, r) in rank_sums.iter_mut().zip(average_ranks(&block)) {
            *sum += r;
        }
    }
    let centre = (k as f64 + 1.0) / 2.0;
    let spread: f64 = rank_sums
        .iter()
        .map(|s| (s / n as f64 - centre).powi(2))
        .sum();
    let statistic = 12.0 * n as f64 / (k as f64 * (k as f64 + 1.0)) * spread;
    let dist = ChiSquared::new((k - 1) as f64).expect("k >= 2");
    let p_value = dist.sf(statistic).clamp(0.0, 1.0);
    Ok(FriedmanResult {
        statistic,
        p_value,
        treatments: k,
        blocks: n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WilcoxonMethod {
    /// Exact for `n <= 20` nonzero differences, normal approximation above.
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `a - b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// Nonzero differences.
    pub n: usize,
    /// Two-sided p-value.
    pub p_value: f64,
    pub exact: bool,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
}

/// Paired two-sided Wilcoxon signed-rank test on `a - b`.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], method: WilcoxonMethod) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::invalid("Wilcoxon test needs paired samples of equal length"));
    }
    if a.is_empty() {
        return Err(Error::invalid("Wilcoxon test needs at least one pair"));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            w_minus: 0.0,
            n: 0,
            p_value: 1.0,
            exact: true,
            degenerate: true,
        });
    }
    let magnitudes: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&magnitudes);
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let exact = match method {
        WilcoxonMethod::Auto => n <= EXACT_WILCOXON_MAX_N,
        WilcoxonMethod::Exact => true,
        WilcoxonMethod::Normal => false,
    };
    let p_value = if exact {
        exact_two_sided_p(&ranks, w_plus)
    } else {
        normal_two_sided_p(&magnitudes, w_plus)
    };
    Ok(WilcoxonResult {
        w_plus,
        w_minus,
        n,
        p_value,
        exact,
        degenerate: false,
    })
}

/// Exact null distribution of `W+` by counting sign assignments over
/// doubled (integer) ranks.
fn exact_two_sided_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max_sum + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let observed = (w_plus * 2.0).round() as usize;
    let all = 2f64.powi(ranks.len() as i32);
    let lower: f64 = counts[..=observed].iter().sum::<f64>() / all;
    let upper: f64 = counts[observed..].iter().sum::<f64>() / all;
    (2.0 * lower.min(upper)).min(1.0)
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_two_sided_p(magnitudes: &[f64], w_plus: f64) -> f64 {
    let n = magnitudes.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = magnitudes.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let variance = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if variance <= 0.0 {
        return 1.0;
    }
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / variance.sqrt();
    let normal = Normal::standard();
    (2.0 * normal.sf(z)).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HolmResult {
    /// Adjusted p-values in the input order.
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Holm step-down adjustment; a hypothesis is rejected when its adjusted
/// p-value is at most `alpha`.
pub fn holm_adjust(pvals: &[f64], alpha: f64) -> Result<HolmResult> {
    if pvals.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::invalid("p-values must lie in [0, 1]"));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (j, &i) in order.iter().enumerate() {
        running = running.max(((m - j) as f64 * pvals[i]).min(1.0));
        adjusted[i] = running;
    }
    let reject = adjusted.iter().map(|p| *p <= alpha).collect();
    Ok(HolmResult { adjusted, reject })
}
