//! Access-pattern statistics over top-k traces.
//!
//! Every operation emits a raw sample stream; [`summarize`] and
//! [`Histogram`] aggregate them and [`build_report`] pools them over a corpus.
//! Metrics reported "in units of top-k" divide by the trace's `top_k`, not by
//! the (possibly truncated) size of an early selection.

mod report;
mod stats;

pub use report::{
    build_report, build_report_with, histogram_svg, AnalysisConfig, LayerStats, MeanStd, Metric, MetricSummary, MetricsError,
    MetricsReport,
};
pub use stats::{nearest_rank, summarize, tier_label, Histogram, SummaryStats, TierReport, TierThresholds};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::trace::Trace;

/// How consecutive working-set windows are placed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowStride {
    /// Every start step `0..=n_steps - window`.
    #[default]
    Sliding,
    /// Non-overlapping chunks; a trailing partial chunk is dropped.
    Disjoint,
}

/// Distinct entries touched in each `window`-step span, over top-k.
/// Empty when the trace is shorter than the window.
pub fn working_set_samples(trace: &Trace, layer: usize, window: usize) -> Vec<f64> {
    working_set_samples_strided(trace, layer, window, WindowStride::Sliding)
}

pub fn working_set_samples_strided(trace: &Trace, layer: usize, window: usize, stride: WindowStride) -> Vec<f64> {
    let n = trace.n_steps();
    if window == 0 || n < window {
        return Vec::new();
    }
    let k = f64::from(trace.top_k());
    match stride {
        WindowStride::Disjoint => (0..n / window)
            .map(|c| {
                let mut union: Vec<u32> =
                    (c * window..(c + 1) * window).flat_map(|t| trace.set(t, layer).iter()).collect();
                union.sort_unstable();
                union.dedup();
                union.len() as f64 / k
            })
            .collect(),
        WindowStride::Sliding => {
            // Multiplicity of each index inside the current window.
            let mut live: HashMap<u32, u32> = HashMap::new();
            let mut out = Vec::with_capacity(n - window + 1);
            for t in 0..n {
                for i in trace.set(t, layer).iter() {
                    *live.entry(i).or_insert(0) += 1;
                }
                if t >= window {
                    for i in trace.set(t - window, layer).iter() {
                        let c = live.get_mut(&i).expect("index entered the window earlier");
                        *c -= 1;
                        if *c == 0 {
                            live.remove(&i);
                        }
                    }
                }
                if t + 1 >= window {
                    out.push(live.len() as f64 / k);
                }
            }
            out
        }
    }
}

/// Length of every maximal run of consecutive steps an index stays selected.
/// Runs cut off by the end of the trace are included.
pub fn persistence_samples(trace: &Trace, layer: usize) -> Vec<f64> {
    let mut out = Vec::new();
    // (index, run length so far), sorted by index.
    let mut active: Vec<(u32, u32)> = Vec::new();
    let mut next: Vec<(u32, u32)> = Vec::new();
    for set in trace.layer_sets(layer) {
        next.clear();
        let mut a = active.iter().peekable();
        for i in set.iter() {
            while let Some(&&(j, run)) = a.peek() {
                if j < i {
                    out.push(f64::from(run));
                    a.next();
                } else {
                    break;
                }
            }
            match a.peek() {
                Some(&&(j, run)) if j == i => {
                    next.push((i, run + 1));
                    a.next();
                }
                _ => next.push((i, 1)),
            }
        }
        out.extend(a.map(|&(_, run)| f64::from(run)));
        std::mem::swap(&mut active, &mut next);
    }
    out.extend(active.iter().map(|&(_, run)| f64::from(run)));
    out
}

/// Distance from the current position back to each selected entry, over top-k.
pub fn lookback_samples(trace: &Trace, layer: usize) -> Vec<f64> {
    let k = f64::from(trace.top_k());
    trace
        .layer_sets(layer)
        .enumerate()
        .flat_map(|(t, set)| {
            let position = u64::from(trace.meta.prefill_len) + t as u64;
            set.iter().map(move |s| (position - u64::from(s)) as f64 / k)
        })
        .collect()
}

/// Entries of each step's selection absent from the previous step, over top-k.
pub fn new_lookup_samples(trace: &Trace, layer: usize) -> Vec<f64> {
    let k = f64::from(trace.top_k());
    let sets: Vec<_> = trace.layer_sets(layer).collect();
    sets.windows(2).map(|w| w[1].difference_len(w[0]) as f64 / k).collect()
}

/// Overlap between consecutive layers at every step, over top-k.
pub fn inter_layer_samples(trace: &Trace) -> Vec<f64> {
    let k = f64::from(trace.top_k());
    trace
        .steps
        .iter()
        .flat_map(|s| s.per_layer.windows(2).map(move |w| w[1].intersection_len(&w[0]) as f64 / k))
        .collect()
}

/// Overlap of `layer` with `layer - 1` at every step. Empty for layer 0.
pub fn inter_layer_samples_for(trace: &Trace, layer: usize) -> Vec<f64> {
    if layer == 0 {
        return Vec::new();
    }
    let k = f64::from(trace.top_k());
    trace.steps.iter().map(|s| s.per_layer[layer].intersection_len(&s.per_layer[layer - 1]) as f64 / k).collect()
}

/// Mean utilization of the pages touched by each step's selection.
///
/// A page's utilization is its selected-token count over the number of its
/// tokens that exist at that step (at most `page_size`), so the partially
/// filled tail page is not penalized.
pub fn page_utilization_samples(trace: &Trace, layer: usize, page_size: u32) -> Vec<f64> {
    assert!(page_size >= 1, "page size must be >= 1");
    let ps = u64::from(page_size);
    trace
        .layer_sets(layer)
        .enumerate()
        .filter(|(_, set)| !set.is_empty())
        .map(|(t, set)| {
            let context = u64::from(trace.meta.prefill_len) + t as u64;
            let mut pages = 0usize;
            let mut sum = 0.0;
            let idx = set.as_slice();
            let mut i = 0;
            while i < idx.len() {
                let page = u64::from(idx[i]) / ps;
                let mut j = i;
                while j < idx.len() && u64::from(idx[j]) / ps == page {
                    j += 1;
                }
                let existing = ps.min(context.saturating_sub(page * ps)).max(1);
                sum += (j - i) as f64 / existing as f64;
                pages += 1;
                i = j;
            }
            sum / pages as f64
        })
        .collect()
}
