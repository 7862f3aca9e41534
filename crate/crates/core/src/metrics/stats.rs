//! Summary statistics, fixed-width histograms and hot/warm/cold tiering.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub count: usize,
    pub mean: f64,
    /// Nearest-rank 95th percentile.
    pub p95: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Summarizes a sample stream. Returns `None` for an empty stream.
///
/// Samples are sorted before any accumulation, so the result is bit-identical
/// for every permutation of the input.
pub fn summarize(samples: &[f64]) -> Option<SummaryStats> {
    if samples.is_empty() {
        return None;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Some(summarize_sorted(&sorted))
}

pub(crate) fn summarize_sorted(sorted: &[f64]) -> SummaryStats {
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    SummaryStats {
        count: n,
        mean,
        p95: sorted[nearest_rank(n, 0.95) - 1],
        std: var.sqrt(),
        min: sorted[0],
        max: sorted[n - 1],
    }
}

/// 1-based nearest rank `ceil(q * n)`, clamped to `1..=n`.
pub fn nearest_rank(n: usize, q: f64) -> usize {
    // Scale to an integer ratio first: 0.95 * 20 in floating point is 19.000000000000004.
    let scaled = (q * 1e9).round() as u128 * n as u128;
    let rank = scaled.div_ceil(1_000_000_000) as usize;
    rank.clamp(1, n)
}

/// Uniform-width histogram anchored at zero. Bin `i` covers
/// `[i * bin_width, (i + 1) * bin_width)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Negative samples fall in the first bin.
    pub fn from_samples(samples: &[f64], bin_width: f64) -> Self {
        assert!(bin_width > 0.0, "bin width must be positive");
        let mut counts: Vec<u64> = Vec::new();
        for &x in samples {
            let bin = if x > 0.0 { (x / bin_width).floor() as usize } else { 0 };
            if bin >= counts.len() {
                counts.resize(bin + 1, 0);
            }
            counts[bin] += 1;
        }
        Self { bin_width, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// `counts.len() + 1` bin edges.
    pub fn edges(&self) -> Vec<f64> {
        (0..=self.counts.len()).map(|i| i as f64 * self.bin_width).collect()
    }

    /// Fraction of the mass below `x`, treating each bin as uniformly filled.
    pub fn mass_below(&self, x: f64) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for (i, &c) in self.counts.iter().enumerate() {
            let lo = i as f64 * self.bin_width;
            let hi = lo + self.bin_width;
            if hi <= x {
                acc += c as f64;
            } else if lo < x {
                acc += c as f64 * (x - lo) / self.bin_width;
            }
        }
        acc / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierThresholds {
    /// Lookback (in units of top-k) below which entries are hot.
    pub hot_max: f64,
    /// Lookback below which entries are at most warm.
    pub warm_max: f64,
}

impl Default for TierThresholds {
    fn default() -> Self {
        Self { hot_max: 1.0, warm_max: 4.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierReport {
    pub hot_max: f64,
    pub warm_max: f64,
    pub hot: f64,
    pub warm: f64,
    pub cold: f64,
}

/// Splits a lookback histogram into hot/warm/cold probability mass.
pub fn tier_label(lookback: &Histogram, thresholds: TierThresholds) -> TierReport {
    let below_hot = lookback.mass_below(thresholds.hot_max);
    let below_warm = lookback.mass_below(thresholds.warm_max);
    TierReport {
        hot_max: thresholds.hot_max,
        warm_max: thresholds.warm_max,
        hot: below_hot,
        warm: below_warm - below_hot,
        cold: 1.0 - below_warm,
    }
}
