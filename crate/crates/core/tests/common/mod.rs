//! Test-side reference implementations. Nothing here calls into the metric,
//! cache or validation code under test; the oracles use plain set operations
//! and linear scans so that agreement is meaningful.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use dsakv::cache::CacheKey;
use dsakv::{DecodeStep, TopKSet, Trace, TraceMeta, ViolationKind};
use rand::seq::index::sample;
use rand::Rng;

pub struct Limits {
    pub max_layers: u32,
    pub max_k: u32,
    pub max_prefill: u32,
    pub max_steps: u32,
}

pub const TINY: Limits = Limits { max_layers: 3, max_k: 4, max_prefill: 12, max_steps: 8 };

/// A uniformly random valid trace within `lim`.
pub fn random_trace<R: Rng>(rng: &mut R, lim: &Limits) -> Trace {
    let n_steps = rng.random_range(1..=lim.max_steps);
    let prefill_len = rng.random_range(1..=lim.max_prefill);
    let top_k = rng.random_range(1..=lim.max_k.min(prefill_len + n_steps));
    let meta = TraceMeta {
        model_name: if rng.random_bool(0.5) { "m".into() } else { "tiny-ü".into() },
        n_layers: rng.random_range(1..=lim.max_layers),
        top_k,
        prefill_len,
        n_steps,
        page_size_tokens: rng.random_range(1..=6),
        kv_token_bytes: rng.random_range(1..=8192),
        tenant_id: rng.random_range(0..4),
    };
    random_sets(rng, meta)
}

/// Fills `meta` with uniformly random selections.
pub fn random_sets<R: Rng>(rng: &mut R, meta: TraceMeta) -> Trace {
    let steps = (0..meta.n_steps)
        .map(|t| {
            let context = meta.prefill_len + t;
            let len = meta.top_k.min(context) as usize;
            let per_layer = (0..meta.n_layers)
                .map(|_| {
                    let mut v: Vec<u32> = sample(rng, context as usize, len).into_iter().map(|i| i as u32).collect();
                    v.sort_unstable();
                    TopKSet::from_raw(v)
                })
                .collect();
            DecodeStep { t, per_layer }
        })
        .collect();
    Trace { meta, steps }
}

/// Tenants sharing `top_k`, `n_steps` and layer count, with their own
/// prefill lengths. Selections favor recent tokens so caches see reuse.
pub fn random_batch<R: Rng>(rng: &mut R, tenants: usize, lim: &Limits) -> Vec<Trace> {
    let first = random_trace(rng, lim);
    (0..tenants)
        .map(|i| {
            let prefill_len = rng.random_range(first.meta.top_k.max(1)..=lim.max_prefill.max(first.meta.top_k));
            let meta = TraceMeta { prefill_len, tenant_id: i as u32, ..first.meta.clone() };
            let mut t = random_sets(rng, meta);
            for step in &mut t.steps {
                let context = t.meta.prefill_len + step.t;
                for set in &mut step.per_layer {
                    // Pull about half the picks into a small recent window.
                    let len = set.len();
                    let window = (2 * len as u32).min(context);
                    let recent: Vec<u32> = sample(rng, window as usize, len / 2).into_iter().map(|i| context - 1 - i as u32).collect();
                    let mut v: BTreeSet<u32> = recent.into_iter().collect();
                    for i in set.iter() {
                        if v.len() == len {
                            break;
                        }
                        v.insert(i);
                    }
                    *set = TopKSet::from_raw(v.into_iter().collect());
                }
            }
            t
        })
        .collect()
}

fn set_of(trace: &Trace, t: usize, l: usize) -> BTreeSet<u32> {
    trace.steps[t].per_layer[l].as_slice().iter().copied().collect()
}

pub fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

pub fn working_set(trace: &Trace, l: usize, n: usize) -> Vec<f64> {
    let steps = trace.steps.len();
    if n == 0 || steps < n {
        return Vec::new();
    }
    let k = trace.meta.top_k as f64;
    (0..=steps - n)
        .map(|m| {
            let union: BTreeSet<u32> = (m..m + n).flat_map(|t| set_of(trace, t, l)).collect();
            union.len() as f64 / k
        })
        .collect()
}

pub fn persistence(trace: &Trace, l: usize) -> Vec<f64> {
    let everything: BTreeSet<u32> = (0..trace.steps.len()).flat_map(|t| set_of(trace, t, l)).collect();
    let mut out = Vec::new();
    for i in everything {
        let mut run = 0;
        for t in 0..trace.steps.len() {
            if trace.steps[t].per_layer[l].as_slice().contains(&i) {
                run += 1;
            } else if run > 0 {
                out.push(run as f64);
                run = 0;
            }
        }
        if run > 0 {
            out.push(run as f64);
        }
    }
    out
}

pub fn lookback(trace: &Trace, l: usize) -> Vec<f64> {
    let k = trace.meta.top_k as f64;
    let mut out = Vec::new();
    for t in 0..trace.steps.len() {
        let pos = trace.meta.prefill_len as i64 + t as i64;
        for s in set_of(trace, t, l) {
            out.push((pos - s as i64) as f64 / k);
        }
    }
    out
}

pub fn new_lookups(trace: &Trace, l: usize) -> Vec<f64> {
    let k = trace.meta.top_k as f64;
    (1..trace.steps.len())
        .map(|t| set_of(trace, t, l).difference(&set_of(trace, t - 1, l)).count() as f64 / k)
        .collect()
}

pub fn inter_layer(trace: &Trace) -> Vec<f64> {
    let k = trace.meta.top_k as f64;
    let mut out = Vec::new();
    for t in 0..trace.steps.len() {
        for l in 1..trace.meta.n_layers as usize {
            out.push(set_of(trace, t, l).intersection(&set_of(trace, t, l - 1)).count() as f64 / k);
        }
    }
    out
}

pub fn page_utilization(trace: &Trace, l: usize, page: u32) -> Vec<f64> {
    let mut out = Vec::new();
    for t in 0..trace.steps.len() {
        let context = trace.meta.prefill_len + t as u32;
        let mut per_page: BTreeMap<u32, u32> = BTreeMap::new();
        for s in set_of(trace, t, l) {
            *per_page.entry(s / page).or_default() += 1;
        }
        if per_page.is_empty() {
            continue;
        }
        let utils: Vec<f64> = per_page
            .iter()
            .map(|(&p, &c)| {
                let existing = (context - p * page).min(page);
                c as f64 / existing as f64
            })
            .collect();
        out.push(utils.iter().sum::<f64>() / utils.len() as f64);
    }
    out
}

/// Recency list with the most recent key first; every operation is a linear scan.
#[derive(Debug, Clone)]
pub struct RefLru {
    pub capacity: usize,
    pub order: Vec<CacheKey>,
}

impl RefLru {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, order: Vec::new() }
    }

    pub fn access(&mut self, key: CacheKey) -> bool {
        match self.order.iter().position(|k| *k == key) {
            Some(p) => {
                let k = self.order.remove(p);
                self.order.insert(0, k);
                true
            }
            None => false,
        }
    }

    pub fn insert(&mut self, keys: &[CacheKey]) -> Vec<CacheKey> {
        let mut evicted = Vec::new();
        for &key in keys {
            if let Some(p) = self.order.iter().position(|k| *k == key) {
                self.order.remove(p);
            }
            self.order.insert(0, key);
            while self.order.len() > self.capacity {
                evicted.push(self.order.pop().unwrap());
            }
        }
        evicted
    }
}

/// Every mutation class and whether it survives the binary encoding
/// (structural breakage is only expressible in JSON lines).
pub const MUTATIONS: [(ViolationKind, bool); 7] = [
    (ViolationKind::Duplicate, true),
    (ViolationKind::Unsorted, true),
    (ViolationKind::Causality, true),
    (ViolationKind::WrongLength, true),
    (ViolationKind::LayerCount, false),
    (ViolationKind::StepIndex, false),
    (ViolationKind::StepCount, false),
];

/// Breaks exactly the invariant named by `kind`, or returns `None` when the
/// trace is too small to host that corruption.
pub fn mutate<R: Rng>(trace: &Trace, kind: ViolationKind, rng: &mut R) -> Option<Trace> {
    let mut t = trace.clone();
    let n_steps = t.steps.len();
    let n_layers = t.meta.n_layers as usize;
    let step = rng.random_range(0..n_steps);
    let layer = rng.random_range(0..n_layers);
    let idx = t.steps[step].per_layer[layer].clone().into_vec();
    let mut v = idx.clone();
    match kind {
        ViolationKind::Duplicate => {
            if v.len() < 2 {
                return None;
            }
            let j = rng.random_range(1..v.len());
            v[j] = v[j - 1];
        }
        ViolationKind::Unsorted => {
            if v.len() < 2 {
                return None;
            }
            let j = rng.random_range(1..v.len());
            v.swap(j - 1, j);
        }
        ViolationKind::Causality => {
            let context = t.meta.prefill_len + step as u32;
            *v.last_mut().unwrap() = context + rng.random_range(0..5);
        }
        ViolationKind::WrongLength => {
            if rng.random_bool(0.5) || v.len() == 1 {
                v.pop();
            } else {
                let j = rng.random_range(0..v.len());
                v.remove(j);
            }
        }
        ViolationKind::LayerCount => {
            if rng.random_bool(0.5) {
                t.steps[step].per_layer.pop();
            } else {
                let copy = t.steps[step].per_layer[0].clone();
                t.steps[step].per_layer.push(copy);
            }
        }
        ViolationKind::StepIndex => {
            t.steps[step].t += rng.random_range(1..4);
        }
        ViolationKind::StepCount => {
            if n_steps < 2 {
                return None;
            }
            t.steps.pop();
        }
        ViolationKind::BadMeta => {
            t.meta.top_k = 0;
        }
    }
    if v != idx {
        t.steps[step].per_layer[layer] = TopKSet::from_raw(v);
    }
    Some(t)
}

/// Per-step counters from the reference replay.
#[derive(Debug, Clone, PartialEq)]
pub struct RefStep {
    pub hits: u64,
    pub missed_tokens: u64,
    pub missed_pages: u64,
}

/// Straight-line replay of the reserved-cache model over `RefLru`.
/// Returns per-step counters and the slowdown.
pub fn ref_simulate(traces: &[Trace], cfg: &dsakv::CacheConfig) -> (Vec<RefStep>, f64) {
    let mut lru = RefLru::new(cfg.capacity_tokens());
    let ps = cfg.page_size_tokens;
    let per_token_ns = cfg.kv_token_bytes as f64 * 1e9 / cfg.hbm_bandwidth;
    let (mut actual, mut ideal) = (0.0, 0.0);
    let mut steps = Vec::new();
    for t in 0..traces[0].steps.len() {
        let mut rec = RefStep { hits: 0, missed_tokens: 0, missed_pages: 0 };
        for (tenant, trace) in traces.iter().enumerate() {
            let context = trace.meta.prefill_len + t as u32;
            for layer in 0..cfg.layers_per_device {
                let key = |token| CacheKey { tenant: tenant as u32, layer, token };
                let set = trace.steps[t].per_layer[layer as usize].as_slice();
                let mut pages = BTreeSet::new();
                for &token in set {
                    if lru.access(key(token)) {
                        rec.hits += 1;
                    } else {
                        rec.missed_tokens += 1;
                        pages.insert(token / ps);
                        if !cfg.insert_whole_page {
                            lru.insert(&[key(token)]);
                        }
                    }
                }
                if cfg.insert_whole_page {
                    for &p in &pages {
                        let fill: Vec<CacheKey> = (p * ps..((p + 1) * ps).min(context)).map(key).collect();
                        lru.insert(&fill);
                    }
                }
                let n = pages.len() as u64;
                rec.missed_pages += n;
                let serial = std::cmp::max(1, n.div_ceil(cfg.miss_concurrency as u64));
                let transfer = set.len() as f64 * per_token_ns;
                actual += transfer + serial as f64 * cfg.miss_latency_ns;
                ideal += transfer + cfg.miss_latency_ns;
            }
        }
        steps.push(rec);
    }
    (steps, actual / ideal)
}
