use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// One paired observation; `cluster` groups correlated observations
/// (for example every reader's rating of one subject).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub cluster: String,
    pub processed: f64,
    pub sparse: f64,
}

impl PairedSample {
    pub fn new(cluster: impl Into<String>, processed: f64, sparse: f64) -> Self {
        PairedSample {
            cluster: cluster.into(),
            processed,
            sparse,
        }
    }

    pub fn difference(&self) -> f64 {
        self.processed - self.sparse
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of signed ranks over all clusters.
    pub statistic: f64,
    /// Randomization variance: sum over clusters of squared cluster sums.
    pub variance: f64,
    pub z: f64,
    /// Two-sided normal-approximation p-value.
    pub p_value: f64,
    /// Non-zero differences that entered the ranking.
    pub n_used: usize,
    pub n_clusters: usize,
}

/// Cluster-adjusted signed-rank test (Rosner, Glynn and Lee).
///
/// Differences are `processed - sparse`. Zero differences are dropped, the
/// remaining absolute differences get mid-ranks, and each cluster
/// contributes the sum of its signed ranks `S_i`. Under the null, cluster
/// signs are exchangeable, giving `E[T] = 0` and `Var[T] = sum S_i^2` for
/// `T = sum S_i`. With singleton clusters `sum S_i^2` is the tie-corrected
/// signed-rank variance, so the test reduces to the ordinary Wilcoxon
/// normal approximation.
pub fn clustered_wilcoxon(samples: &[PairedSample]) -> Result<WilcoxonResult> {
    if let Some(s) = samples
        .iter()
        .find(|s| !s.processed.is_finite() || !s.sparse.is_finite())
    {
        return Err(Error::NonFinite(format!("sample in cluster {}", s.cluster)));
    }
    let n_clusters = samples
        .iter()
        .map(|s| s.cluster.as_str())
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    if n_clusters < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 clusters, got {n_clusters}"
        )));
    }
    let nonzero: Vec<(&str, f64)> = samples
        .iter()
        .map(|s| (s.cluster.as_str(), s.difference()))
        .filter(|&(_, d)| d != 0.0)
        .collect();
    if nonzero.is_empty() {
        return Err(Error::Undefined("all paired differences are zero".into()));
    }
    let ranks = mid_ranks(&nonzero.iter().map(|(_, d)| d.abs()).collect::<Vec<_>>());

    let mut sums: BTreeMap<&str, f64> = BTreeMap::new();
    for ((cluster, d), r) in nonzero.iter().zip(&ranks) {
        *sums.entry(cluster).or_default() += d.signum() * r;
    }
    let statistic: f64 = sums.values().sum();
    let variance: f64 = sums.values().map(|s| s * s).sum();
    if variance <= 0.0 {
        return Err(Error::Undefined("zero variance".into()));
    }
    let z = statistic / variance.sqrt();
    let normal = Normal::standard();
    let p_value = (2.0 * normal.sf(z.abs())).clamp(0.0, 1.0);
    Ok(WilcoxonResult {
        statistic,
        variance,
        z,
        p_value,
        n_used: nonzero.len(),
        n_clusters,
    })
}

/// 1-based ranks with ties sharing the mean rank.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}
