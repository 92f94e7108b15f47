//! Two-sided Mann-Whitney U test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::{Error, Result};

/// Smallest sample size at which the normal approximation replaces exact
/// enumeration.
pub const NORMAL_APPROX_MIN: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// Pairs `(a_i, b_j)` with `a_i > b_j`, ties counting ½.
    pub u: f64,
    pub p: f64,
    pub method: PMethod,
}

/// Midranks (1-based) of `values`, and the sizes of the tie groups.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut s = 0;
    while s < idx.len() {
        let mut e = s + 1;
        while e < idx.len() && values[idx[e]] == values[idx[s]] {
            e += 1;
        }
        let r = (s + 1 + e) as f64 / 2.0;
        for &i in &idx[s..e] {
            ranks[i] = r;
        }
        ties.push(e - s);
        s = e;
    }
    (ranks, ties)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::usage("Mann-Whitney U needs two nonempty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::usage("Mann-Whitney U samples must not contain NaN"));
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..n].iter().sum();
    let u = rank_sum_a - (n * (n + 1)) as f64 / 2.0;
    if ties.len() == 1 {
        return Ok(MannWhitney {
            u,
            p: 1.0,
            method: if n.min(m) >= NORMAL_APPROX_MIN { PMethod::Normal } else { PMethod::Exact },
        });
    }
    if n.min(m) >= NORMAL_APPROX_MIN {
        Ok(MannWhitney {
            u,
            p: normal_p(u, n, m, &ties),
            method: PMethod::Normal,
        })
    } else {
        Ok(MannWhitney {
            u,
            p: exact_p(u, n, &ranks),
            method: PMethod::Exact,
        })
    }
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_p(u: f64, n: usize, m: usize, ties: &[usize]) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    let total = nf + mf;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum::<f64>() / (total * (total - 1.0));
    let var = nf * mf / 12.0 * ((total + 1.0) - tie_term);
    let dev = (u - nf * mf / 2.0).abs();
    let z = (dev - 0.5).max(0.0) / var.sqrt();
    let std = Normal::new(0.0, 1.0).expect("standard normal");
    (2.0 * (1.0 - std.cdf(z))).min(1.0)
}

/// Exact permutation p-value: the share of all size-`n` subsets of the pooled
/// midranks whose U is at least as far from `nm/2` as the observed one.
/// Counts come from a subset-sum recursion over doubled midranks.
fn exact_p(u: f64, n: usize, ranks: &[f64]) -> f64 {
    let total = ranks.len();
    let m = total - n;
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s.
    let mut ways = vec![vec![0.0f64; max_sum + 1]; n + 1];
    ways[0][0] = 1.0;
    for &d in &doubled {
        for k in (1..=n).rev() {
            let (lo, hi) = ways.split_at_mut(k);
            for s in (d..=max_sum).rev() {
                hi[0][s] += lo[k - 1][s - d];
            }
        }
    }
    let offset = n * (n + 1);
    let centre2 = (n * m) as f64;
    let observed = (2.0 * u - centre2).abs();
    let (mut hit, mut all) = (0.0, 0.0);
    for (s, &w) in ways[n].iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        all += w;
        let u2 = s as f64 - offset as f64;
        if (u2 - centre2).abs() >= observed - 1e-9 {
            hit += w;
        }
    }
    (hit / all).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_samples() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.method, PMethod::Exact);
        // Two of the six equally likely splits are this extreme.
        assert!((r.p - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_sit_at_the_centre() {
        let a = [1.0, 5.0, 3.0, 2.0];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.u, 8.0);
        assert_eq!(r.p, 1.0);
    }

    #[test]
    fn all_values_equal_gives_p_one() {
        let r = mann_whitney_u(&[2.0; 10], &[2.0; 10]).unwrap();
        assert_eq!((r.u, r.p), (50.0, 1.0));
    }

    #[test]
    fn complete_separation_of_ten_is_significant() {
        let a: Vec<f64> = (0..10).map(|i| 30.0 + i as f64).collect();
        let b: Vec<f64> = (0..10).map(|i| 15.0 + i as f64 / 10.0).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        assert_eq!(r.u, 100.0);
        assert_eq!(r.method, PMethod::Normal);
        assert!(r.p < 0.01, "{}", r.p);
    }

    #[test]
    fn empty_sample_is_rejected() {
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }
}
