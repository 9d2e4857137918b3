//! Policy uniqueness, diversity and the sparsity/diversity reward.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::policynet::Policy;

/// Weights of the reward: `theta_s` for sparsity, `theta_d` for
/// uniqueness, `lambda` for the penalty on wrong predictions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub theta_s: f64,
    pub theta_d: f64,
    pub lambda: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            theta_s: 0.5,
            theta_d: 0.5,
            lambda: 1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.theta_s, self.theta_d, self.lambda]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Config("reward weights must be finite".into()));
        }
        if self.theta_s < 0.0 || self.theta_d < 0.0 {
            return Err(Error::Config("theta_s and theta_d must be >= 0".into()));
        }
        if self.theta_s + self.theta_d <= 0.0 {
            return Err(Error::Config("theta_s + theta_d must be > 0".into()));
        }
        if self.lambda <= 0.0 {
            return Err(Error::Config("lambda must be > 0".into()));
        }
        Ok(())
    }

    /// Largest reward a correct prediction can earn.
    pub fn max_reward(&self) -> f64 {
        self.theta_s + self.theta_d
    }
}

/// Normalized Hamming distance: fraction of differing bits.
pub fn hamming_norm(a: &Policy, b: &Policy) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err(
            "hamming_norm",
            format!("policy lengths {} and {}", a.len(), b.len()),
        ));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let diff = a.bits().iter().zip(b.bits()).filter(|(x, y)| x != y).count();
    Ok(diff as f64 / a.len() as f64)
}

/// How uniqueness averages over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniquenessMode {
    /// Divide by M, counting the zero self-distance.
    #[default]
    IncludeSelf,
    /// Divide by M − 1, skipping the self-distance.
    ExcludeSelf,
}

/// `u_i = (1/M) Σ_j hamming_norm(p_i, p_j)` over all `j`, self included.
pub fn uniqueness(policies: &[Policy]) -> Result<Vec<f64>> {
    uniqueness_with(policies, UniquenessMode::IncludeSelf)
}

pub fn uniqueness_with(policies: &[Policy], mode: UniquenessMode) -> Result<Vec<f64>> {
    let m = policies.len();
    if m == 0 {
        return Err(Error::Config("uniqueness of an empty policy set".into()));
    }
    let n = policies[0].len();
    if let Some(p) = policies.iter().find(|p| p.len() != n) {
        return Err(shape_err(
            "uniqueness",
            format!("policy of length {} in a set of length {n}", p.len()),
        ));
    }
    // Pairwise differing-bit counts, accumulated as integers so the result
    // is independent of evaluation order.
    let mut totals = vec![0usize; m];
    for i in 0..m {
        for j in (i + 1)..m {
            let d = policies[i]
                .bits()
                .iter()
                .zip(policies[j].bits())
                .filter(|(a, b)| a != b)
                .count();
            totals[i] += d;
            totals[j] += d;
        }
    }
    let denom = match mode {
        UniquenessMode::IncludeSelf => m as f64,
        UniquenessMode::ExcludeSelf => (m.max(2) - 1) as f64,
    };
    let n = n.max(1) as f64;
    Ok(totals.iter().map(|&t| t as f64 / n / denom).collect())
}

/// Uniqueness `candidates[i]` would have if it replaced `policies[i]` in the
/// set, all other members unchanged. Equals [`uniqueness_with`] wherever
/// `candidates[i] == policies[i]`.
pub fn substituted_uniqueness(
    policies: &[Policy],
    candidates: &[Policy],
    mode: UniquenessMode,
) -> Result<Vec<f64>> {
    let m = policies.len();
    if candidates.len() != m {
        return Err(shape_err(
            "substituted_uniqueness",
            format!("{} candidates for {m} policies", candidates.len()),
        ));
    }
    if m == 0 {
        return Err(Error::Config("uniqueness of an empty policy set".into()));
    }
    let n = policies[0].len();
    if let Some(p) = policies.iter().chain(candidates).find(|p| p.len() != n) {
        return Err(shape_err(
            "substituted_uniqueness",
            format!("policy of length {} in a set of length {n}", p.len()),
        ));
    }
    let denom = match mode {
        UniquenessMode::IncludeSelf => m as f64,
        UniquenessMode::ExcludeSelf => (m.max(2) - 1) as f64,
    };
    let width = n.max(1) as f64;
    Ok(candidates
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let total: usize = policies
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, p)| c.bits().iter().zip(p.bits()).filter(|(a, b)| a != b).count())
                .sum();
            total as f64 / width / denom
        })
        .collect())
}

/// Distinct policies, in first-seen order.
pub fn unique_policies(policies: &[Policy]) -> Vec<Policy> {
    let mut seen = BTreeSet::new();
    policies
        .iter()
        .filter(|p| seen.insert(p.bits().to_vec()))
        .cloned()
        .collect()
}

/// Number of distinct policies.
pub fn diversity(policies: &[Policy]) -> usize {
    policies
        .iter()
        .map(|p| p.bits())
        .collect::<BTreeSet<_>>()
        .len()
}

/// Reward of one sample: on a correct prediction
/// `θ_s(1 − (|p|₀/N)²) + θ_d(1 − (1 − u)²)`, otherwise `−λ`.
pub fn reward(policy: &Policy, u: f64, correct: bool, cfg: &RewardConfig) -> f64 {
    if !correct {
        return -cfg.lambda;
    }
    let pr = policy.keep_ratio();
    cfg.theta_s * (1.0 - pr * pr) + cfg.theta_d * (1.0 - (1.0 - u) * (1.0 - u))
}

/// Binomial coefficient `C(n, k)`: the number of distinct policies with
/// exactly `k` kept blocks out of `n`.
pub fn max_unique(n: u64, k: u64) -> Result<u128> {
    if k > n {
        return Err(Error::Config(format!("k = {k} exceeds N = {n}")));
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        // c * (n - i) is divisible by (i + 1) at every step.
        c = c
            .checked_mul((n - i) as u128)
            .ok_or_else(|| Error::Config(format!("C({n}, {k}) overflows")))?
            / (i + 1) as u128;
    }
    Ok(c)
}

/// `(k, C(n, k))` for every `k` in `0..=n`.
pub fn max_unique_curve(n: u64) -> Result<Vec<(u64, u128)>> {
    (0..=n).map(|k| Ok((k, max_unique(n, k)?))).collect()
}
