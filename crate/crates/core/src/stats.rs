//! Descriptive statistics and the paired Wilcoxon signed-rank test.
//!
//! Conventions: the median of an even-length sample is the midpoint of the
//! two central values, the standard deviation is the population one, zero
//! differences are discarded before ranking, and tied absolute differences
//! share their average rank.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub count: usize,
}

pub fn summarize(values: &[f64]) -> Result<StatSummary> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    let count = values.len();
    let mean = values.iter().sum::<f64>() / count as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = if count % 2 == 1 {
        sorted[count / 2]
    } else {
        0.5 * (sorted[count / 2 - 1] + sorted[count / 2])
    };
    Ok(StatSummary {
        mean,
        median,
        std: var.sqrt(),
        count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    /// `a` tends to be smaller than `b`.
    Less,
    Greater,
    TwoSided,
}

impl std::str::FromStr for Alternative {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "less" => Ok(Alternative::Less),
            "greater" => Ok(Alternative::Greater),
            "two-sided" => Ok(Alternative::TwoSided),
            other => Err(Error::Config(format!("unknown alternative {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences `a - b`; for the two-sided test
    /// the smaller of the positive and negative rank sums.
    pub statistic: f64,
    pub p_value: f64,
    pub alternative: Alternative,
    pub n_effective: usize,
    pub exact: bool,
}

/// Largest effective sample size handled by the exact null distribution.
pub const EXACT_MAX_N: usize = 25;
pub const MIN_PAIRS: usize = 5;

/// Average ranks (1-based) of `values`.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let avg = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64], alternative: Alternative) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            what: "paired sample",
            got: b.len(),
            expected: a.len(),
        });
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|&d| d != 0.0)
        .collect();
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(Error::TooFewPairs { got: n, need: MIN_PAIRS });
    }
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired differences"));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks
        .iter()
        .zip(&diffs)
        .filter(|(_, &d)| d > 0.0)
        .map(|(r, _)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p_less, p_greater, exact) = if n <= EXACT_MAX_N {
        let (le, ge) = exact_tails(&ranks, w_plus);
        (le, ge, true)
    } else {
        let mean = total / 2.0;
        let tie_term: f64 = tie_sizes(&abs).map(|t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term;
        let z = (w_plus - mean) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (normal.cdf(z), normal.sf(z), false)
    };
    let (statistic, p_value) = match alternative {
        Alternative::Less => (w_plus, p_less),
        Alternative::Greater => (w_plus, p_greater),
        Alternative::TwoSided => (w_plus.min(w_minus), (2.0 * p_less.min(p_greater)).min(1.0)),
    };
    Ok(WilcoxonResult {
        statistic,
        p_value: p_value.clamp(0.0, 1.0),
        alternative,
        n_effective: n,
        exact,
    })
}

fn tie_sizes(values: &[f64]) -> impl Iterator<Item = usize> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut sizes = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        sizes.push(j - i);
        i = j;
    }
    sizes.into_iter()
}

/// `P(W+ <= w)` and `P(W+ >= w)` under the null where each rank's sign is
/// an independent fair coin. Counts the 2^n sign assignments by their
/// positive rank sum with a subset-sum table over doubled (integral) ranks.
fn exact_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
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
    let target = (2.0 * w_plus).round() as usize;
    let all: f64 = 2f64.powi(ranks.len() as i32);
    let le: f64 = counts[..=target].iter().sum();
    let ge: f64 = counts[target..].iter().sum();
    (le / all, ge / all)
}
