//! Two-sample Wilcoxon rank-sum (Mann-Whitney U) test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    /// Complete enumeration of all rank assignments.
    Exact,
    /// Seeded random relabelings.
    Permutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RankSumConfig {
    /// Largest `|x| + |y|` handled by complete enumeration.
    pub exact_max_n: usize,
    pub permutation_draws: usize,
    pub seed: u64,
}

impl Default for RankSumConfig {
    fn default() -> Self {
        Self {
            exact_max_n: 16,
            permutation_draws: 100_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSum {
    /// Mann-Whitney U of `x`: rank sum of `x` minus `|x|(|x|+1)/2`.
    pub u: f64,
    pub p_two_sided: f64,
    pub method: PValueMethod,
    pub z: f64,
    /// Normal approximation with tie correction.
    pub p_normal: f64,
}

/// Midranks (1-based) of the pooled sample.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-sum test of `x` against `y` with [`RankSumConfig::default`].
pub fn wilcoxon_ranksum(x: &[f64], y: &[f64]) -> Result<RankSum> {
    wilcoxon_ranksum_with(x, y, &RankSumConfig::default())
}

pub fn wilcoxon_ranksum_with(x: &[f64], y: &[f64], cfg: &RankSumConfig) -> Result<RankSum> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::EmptyInput("rank-sum test needs two non-empty samples"));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Config("rank-sum samples must be finite".into()));
    }
    let (nx, ny) = (x.len(), y.len());
    let n = nx + ny;
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = midranks(&pooled);
    // doubled midranks are integers
    let r2: Vec<i64> = ranks.iter().map(|&r| (2.0 * r).round() as i64).collect();
    let offset2 = (nx * (nx + 1)) as i64;
    let centre2 = (nx * ny) as i64;
    let u2 = r2[..nx].iter().sum::<i64>() - offset2;
    let dev = (u2 - centre2).abs();

    let (p, method) = if n <= cfg.exact_max_n {
        (exact_p(&r2, nx, offset2, centre2, dev), PValueMethod::Exact)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut perm = r2.clone();
        let m = cfg.permutation_draws.max(1);
        let mut b = 0usize;
        for _ in 0..m {
            let (head, _) = perm.partial_shuffle(&mut rng, nx);
            let s = head.iter().sum::<i64>() - offset2;
            if (s - centre2).abs() >= dev {
                b += 1;
            }
        }
        (((b + 1) as f64 / (m + 1) as f64).min(1.0), PValueMethod::Permutation)
    };

    let u = u2 as f64 / 2.0;
    let (nxf, nyf, nf) = (nx as f64, ny as f64, n as f64);
    let ties: f64 = tie_sizes(&pooled).iter().map(|&t| t * t * t - t).sum();
    let var = nxf * nyf / 12.0 * ((nf + 1.0) - if n > 1 { ties / (nf * (nf - 1.0)) } else { 0.0 });
    let (z, p_normal) = if var > 0.0 {
        let z = (u - nxf * nyf / 2.0) / var.sqrt();
        let phi = Normal::standard().cdf(-z.abs());
        (z, (2.0 * phi).min(1.0))
    } else {
        (0.0, 1.0)
    };
    Ok(RankSum {
        u,
        p_two_sided: p,
        method,
        z,
        p_normal,
    })
}

fn tie_sizes(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    let mut i = 0;
    while i < v.len() {
        let mut j = i;
        while j + 1 < v.len() && v[j + 1] == v[i] {
            j += 1;
        }
        out.push((j - i + 1) as f64);
        i = j + 1;
    }
    out
}

/// Fraction of size-`nx` subsets whose doubled U deviates from the centre
/// at least as much as the observed one. Counts are accumulated by dynamic
/// programming over (subset size, doubled rank sum).
fn exact_p(r2: &[i64], nx: usize, offset2: i64, centre2: i64, dev: i64) -> f64 {
    let max_sum: i64 = r2.iter().sum();
    let width = max_sum as usize + 1;
    let mut dp = vec![vec![0u128; width]; nx + 1];
    dp[0][0] = 1;
    for &r in r2 {
        let r = r as usize;
        for k in (1..=nx).rev() {
            let (lo, hi) = dp.split_at_mut(k);
            let src = &lo[k - 1];
            let dst = &mut hi[0];
            for s in (r..width).rev() {
                dst[s] += src[s - r];
            }
        }
    }
    let total: u128 = dp[nx].iter().sum();
    let extreme: u128 = dp[nx]
        .iter()
        .enumerate()
        .filter(|(s, _)| (*s as i64 - offset2 - centre2).abs() >= dev)
        .map(|(_, &c)| c)
        .sum();
    extreme as f64 / total as f64
}
