//! Reserved last-level cache region holding KV tokens between decode steps.
//!
//! The region is fully associative and managed per (tenant, layer, token)
//! with strict LRU replacement. HBM traffic is modeled at page granularity:
//! all missed tokens of one layer-step that share a KV page cost a single
//! miss latency, and misses serialize on the critical path in groups of
//! `miss_concurrency`.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::kv::{KvError, KvMap, KvWriter};
use crate::par::Exec;
use crate::trace::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub tenant: u32,
    pub layer: u32,
    pub token: u32,
}

impl CacheKey {
    pub fn new(tenant: u32, layer: u32, token: u32) -> Self {
        Self { tenant, layer, token }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    Hit,
    Miss,
}

const NIL: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    key: CacheKey,
    prev: u32,
    next: u32,
}

/// Fully associative LRU set with O(1) access, insert and eviction.
#[derive(Debug, Clone)]
pub struct LruState {
    capacity: usize,
    index: HashMap<CacheKey, u32>,
    nodes: Vec<Node>,
    free: Vec<u32>,
    /// Most recently used.
    head: u32,
    /// Least recently used.
    tail: u32,
}

impl LruState {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            index: HashMap::with_capacity(capacity.min(1 << 20)),
            nodes: Vec::new(),
            free: Vec::new(),
            head: NIL,
            tail: NIL,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Residency check without touching recency.
    pub fn contains(&self, key: &CacheKey) -> bool {
        self.index.contains_key(key)
    }

    /// Looks `key` up. A hit moves it to most-recent; a miss changes nothing.
    pub fn access(&mut self, key: CacheKey) -> Access {
        match self.index.get(&key) {
            Some(&slot) => {
                self.move_to_front(slot);
                Access::Hit
            }
            None => Access::Miss,
        }
    }

    /// Inserts `keys` as most-recent in order and returns what was evicted,
    /// oldest first. Keys already resident are refreshed instead.
    pub fn insert<I: IntoIterator<Item = CacheKey>>(&mut self, keys: I) -> Vec<CacheKey> {
        let mut evicted = Vec::new();
        for k in keys {
            self.insert_one(k, &mut evicted);
        }
        evicted
    }

    pub fn insert_one(&mut self, key: CacheKey, evicted: &mut Vec<CacheKey>) {
        if let Some(&slot) = self.index.get(&key) {
            self.move_to_front(slot);
            return;
        }
        if self.capacity == 0 {
            evicted.push(key);
            return;
        }
        if self.index.len() == self.capacity {
            let lru = self.tail;
            self.unlink(lru);
            let old = self.nodes[lru as usize].key;
            self.index.remove(&old);
            self.free.push(lru);
            evicted.push(old);
        }
        let node = Node { key, prev: NIL, next: NIL };
        let slot = match self.free.pop() {
            Some(s) => {
                self.nodes[s as usize] = node;
                s
            }
            None => {
                self.nodes.push(node);
                (self.nodes.len() - 1) as u32
            }
        };
        self.push_front(slot);
        self.index.insert(key, slot);
    }

    /// Resident keys from most to least recently used.
    pub fn iter_mru(&self) -> impl Iterator<Item = CacheKey> + '_ {
        let mut cur = self.head;
        std::iter::from_fn(move || {
            (cur != NIL).then(|| {
                let n = &self.nodes[cur as usize];
                cur = n.next;
                n.key
            })
        })
    }

    fn unlink(&mut self, slot: u32) {
        let (prev, next) = {
            let n = &self.nodes[slot as usize];
            (n.prev, n.next)
        };
        if prev != NIL {
            self.nodes[prev as usize].next = next;
        } else {
            self.head = next;
        }
        if next != NIL {
            self.nodes[next as usize].prev = prev;
        } else {
            self.tail = prev;
        }
    }

    fn push_front(&mut self, slot: u32) {
        {
            let n = &mut self.nodes[slot as usize];
            n.prev = NIL;
            n.next = self.head;
        }
        if self.head != NIL {
            self.nodes[self.head as usize].prev = slot;
        }
        self.head = slot;
        if self.tail == NIL {
            self.tail = slot;
        }
    }

    fn move_to_front(&mut self, slot: u32) {
        if self.head != slot {
            self.unlink(slot);
            self.push_front(slot);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub reserved_bytes: u64,
    /// Bytes of one (layer, token) KV entry.
    pub kv_token_bytes: u64,
    pub page_size_tokens: u32,
    pub miss_latency_ns: f64,
    /// HBM bandwidth in bytes per second.
    pub hbm_bandwidth: f64,
    pub layers_per_device: u32,
    pub batch_size: u32,
    /// Page fetches that overlap within one layer-step.
    pub miss_concurrency: u32,
    /// Insert the whole page of every miss instead of only the missed tokens.
    pub insert_whole_page: bool,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            reserved_bytes: 0,
            kv_token_bytes: 4096,
            page_size_tokens: 16,
            miss_latency_ns: 200.0,
            hbm_bandwidth: 3.35e12,
            layers_per_device: 20,
            batch_size: 8,
            miss_concurrency: 1,
            insert_whole_page: false,
        }
    }
}

impl CacheConfig {
    pub fn capacity_tokens(&self) -> usize {
        self.reserved_bytes.checked_div(self.kv_token_bytes).unwrap_or(0) as usize
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if !(self.hbm_bandwidth > 0.0 && self.hbm_bandwidth.is_finite()) {
            return Err(SimError::ZeroBandwidth);
        }
        if self.kv_token_bytes == 0 || self.page_size_tokens == 0 {
            return bad("kv_token_bytes and page_size_tokens must be >= 1");
        }
        if self.layers_per_device == 0 || self.batch_size == 0 || self.miss_concurrency == 0 {
            return bad("layers_per_device, batch_size and miss_concurrency must be >= 1");
        }
        if !(self.miss_latency_ns >= 0.0 && self.miss_latency_ns.is_finite()) {
            return bad("miss_latency_ns must be finite and >= 0");
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, SimError> {
        let m = KvMap::parse(text)?;
        let d = Self::default();
        let cfg = Self {
            reserved_bytes: match m.raw("reserved") {
                Some(v) => parse_byte_size(v).map_err(SimError::InvalidConfig)?,
                None => d.reserved_bytes,
            },
            kv_token_bytes: m.get_or("kv_token_bytes", d.kv_token_bytes)?,
            page_size_tokens: m.get_or("page_size_tokens", d.page_size_tokens)?,
            miss_latency_ns: m.get_or("miss_latency_ns", d.miss_latency_ns)?,
            hbm_bandwidth: m.get_or("hbm_bandwidth", d.hbm_bandwidth)?,
            layers_per_device: m.get_or("layers_per_device", d.layers_per_device)?,
            batch_size: m.get_or("batch_size", d.batch_size)?,
            miss_concurrency: m.get_or("miss_concurrency", d.miss_concurrency)?,
            insert_whole_page: m.get_or("insert_whole_page", d.insert_whole_page)?,
        };
        m.deny_unknown()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        KvWriter::default()
            .pair("reserved", self.reserved_bytes)
            .pair("kv_token_bytes", self.kv_token_bytes)
            .pair("page_size_tokens", self.page_size_tokens)
            .pair("miss_latency_ns", self.miss_latency_ns)
            .pair("hbm_bandwidth", self.hbm_bandwidth)
            .pair("layers_per_device", self.layers_per_device)
            .pair("batch_size", self.batch_size)
            .pair("miss_concurrency", self.miss_concurrency)
            .pair("insert_whole_page", self.insert_whole_page)
            .finish()
    }
}

/// Parses `1024`, `64KB`, `5MB`, `1.5GB` (binary multiples, case-insensitive,
/// optional `iB`/`B` suffix).
pub fn parse_byte_size(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let lower = t.to_ascii_lowercase();
    let (num, mult) = [("gib", 1u64 << 30), ("gb", 1 << 30), ("g", 1 << 30), ("mib", 1 << 20), ("mb", 1 << 20), ("m", 1 << 20), ("kib", 1 << 10), ("kb", 1 << 10), ("k", 1 << 10), ("b", 1)]
        .iter()
        .find_map(|(suf, m)| lower.strip_suffix(suf).map(|n| (n.trim(), *m)))
        .unwrap_or((lower.as_str(), 1));
    if let Ok(v) = num.parse::<u64>() {
        return v.checked_mul(mult).ok_or_else(|| format!("byte size '{t}' overflows"));
    }
    match num.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok((v * mult as f64).round() as u64),
        _ => Err(format!("cannot parse byte size '{t}'")),
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("no traces to simulate")]
    Empty,
    #[error("tenant {index} has {field} = {other}, tenant 0 has {first}")]
    Mismatch { field: &'static str, first: u32, other: u32, index: usize },
    #[error("{tenants} tenants exceed batch_size {batch}")]
    TooManyTenants { tenants: usize, batch: u32 },
    #[error("tenant {index} has {have} layers, the device holds {need}")]
    TooFewLayers { index: usize, have: u32, need: u32 },
    #[error("HBM bandwidth must be positive")]
    ZeroBandwidth,
    #[error("invalid cache config: {0}")]
    InvalidConfig(String),
    #[error("empty reserved-size list")]
    EmptySweep,
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub hits: u64,
    pub missed_tokens: u64,
    pub missed_pages: u64,
    pub transfer_ns: f64,
    pub latency_ns: f64,
    pub step_time_ns: f64,
    pub ideal_time_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub reserved_bytes: u64,
    pub capacity_tokens: usize,
    pub tenants: usize,
    pub layers: u32,
    pub requested_tokens: u64,
    pub hits: u64,
    pub missed_tokens: u64,
    pub missed_pages: u64,
    pub ideal_time_ns: f64,
    pub actual_time_ns: f64,
    pub slowdown: f64,
    pub steps: Vec<StepRecord>,
}

impl SimResult {
    pub fn hit_rate(&self) -> f64 {
        if self.requested_tokens == 0 {
            0.0
        } else {
            self.hits as f64 / self.requested_tokens as f64
        }
    }

    pub fn missed_pages_per_step(&self) -> f64 {
        if self.steps.is_empty() {
            0.0
        } else {
            self.missed_pages as f64 / self.steps.len() as f64
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }
}

fn check_tenants(traces: &[Trace], cfg: &CacheConfig) -> Result<(), SimError> {
    let first = traces.first().ok_or(SimError::Empty)?;
    if traces.len() > cfg.batch_size as usize {
        return Err(SimError::TooManyTenants { tenants: traces.len(), batch: cfg.batch_size });
    }
    for (index, t) in traces.iter().enumerate() {
        for (field, a, b) in [("top_k", first.meta.top_k, t.meta.top_k), ("n_steps", first.meta.n_steps, t.meta.n_steps)] {
            if a != b {
                return Err(SimError::Mismatch { field, first: a, other: b, index });
            }
        }
        if t.meta.n_layers < cfg.layers_per_device {
            return Err(SimError::TooFewLayers { index, have: t.meta.n_layers, need: cfg.layers_per_device });
        }
    }
    Ok(())
}

/// Replays a batch of tenant traces through one shared reserved region.
///
/// Per step, tenants and then layers are visited in order. Each selected token
/// is looked up in ascending position order; in token mode a missed token is
/// inserted as soon as it is fetched, so the reference stream seen by the LRU
/// does not depend on capacity. A layer-step is charged
/// `max(1, ceil(missed_pages / miss_concurrency))` miss latencies: the ideal
/// baseline already pays one latency for the single efficient read of the
/// whole top-k chunk.
pub fn simulate(traces: &[Trace], cfg: &CacheConfig) -> Result<SimResult, SimError> {
    cfg.validate()?;
    check_tenants(traces, cfg)?;
    let n_steps = traces[0].n_steps();
    let ps = cfg.page_size_tokens;
    let ns_per_token = cfg.kv_token_bytes as f64 / cfg.hbm_bandwidth * 1e9;
    let mut lru = LruState::new(cfg.capacity_tokens());
    let mut evicted = Vec::new();
    let mut missed_pages_list: Vec<u32> = Vec::new();
    let mut steps = Vec::with_capacity(n_steps);

    for t in 0..n_steps {
        let mut rec = StepRecord {
            t: t as u32,
            hits: 0,
            missed_tokens: 0,
            missed_pages: 0,
            transfer_ns: 0.0,
            latency_ns: 0.0,
            step_time_ns: 0.0,
            ideal_time_ns: 0.0,
        };
        for (tenant, trace) in traces.iter().enumerate() {
            let context = trace.meta.prefill_len + t as u32;
            for layer in 0..cfg.layers_per_device {
                let set = trace.set(t, layer as usize);
                missed_pages_list.clear();
                for token in set.iter() {
                    let key = CacheKey::new(tenant as u32, layer, token);
                    match lru.access(key) {
                        Access::Hit => rec.hits += 1,
                        Access::Miss => {
                            rec.missed_tokens += 1;
                            let page = token / ps;
                            if missed_pages_list.last() != Some(&page) {
                                missed_pages_list.push(page);
                            }
                            if !cfg.insert_whole_page {
                                lru.insert_one(key, &mut evicted);
                            }
                        }
                    }
                }
                if cfg.insert_whole_page {
                    for &page in &missed_pages_list {
                        let end = ((page + 1) * ps).min(context);
                        for token in page * ps..end {
                            lru.insert_one(CacheKey::new(tenant as u32, layer, token), &mut evicted);
                        }
                    }
                }
                evicted.clear();
                let pages = missed_pages_list.len() as u64;
                rec.missed_pages += pages;
                let serial = pages.div_ceil(u64::from(cfg.miss_concurrency)).max(1);
                rec.latency_ns += serial as f64 * cfg.miss_latency_ns;
                rec.ideal_time_ns += cfg.miss_latency_ns;
                rec.transfer_ns += set.len() as f64 * ns_per_token;
            }
        }
        rec.step_time_ns = rec.transfer_ns + rec.latency_ns;
        rec.ideal_time_ns += rec.transfer_ns;
        steps.push(rec);
    }

    let sum = |f: fn(&StepRecord) -> f64| steps.iter().map(f).sum::<f64>();
    let actual_time_ns = sum(|s| s.step_time_ns);
    let ideal_time_ns = sum(|s| s.ideal_time_ns);
    let hits: u64 = steps.iter().map(|s| s.hits).sum();
    let missed_tokens: u64 = steps.iter().map(|s| s.missed_tokens).sum();
    Ok(SimResult {
        reserved_bytes: cfg.reserved_bytes,
        capacity_tokens: cfg.capacity_tokens(),
        tenants: traces.len(),
        layers: cfg.layers_per_device,
        requested_tokens: hits + missed_tokens,
        hits,
        missed_tokens,
        missed_pages: steps.iter().map(|s| s.missed_pages).sum(),
        ideal_time_ns,
        actual_time_ns,
        slowdown: if ideal_time_ns > 0.0 { actual_time_ns / ideal_time_ns } else { 1.0 },
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub reserved_bytes: u64,
    pub capacity_tokens: usize,
    pub slowdown: f64,
    pub hit_rate: f64,
    pub missed_pages_per_step: f64,
    pub missed_tokens: u64,
}

pub fn sweep(traces: &[Trace], cfg: &CacheConfig, reserved: &[u64]) -> Result<Vec<SweepRow>, SimError> {
    sweep_with(traces, cfg, reserved, Exec::default())
}

/// One simulation per reserved size; points are independent and may run
/// concurrently.
pub fn sweep_with(traces: &[Trace], cfg: &CacheConfig, reserved: &[u64], exec: Exec) -> Result<Vec<SweepRow>, SimError> {
    if reserved.is_empty() {
        return Err(SimError::EmptySweep);
    }
    exec.map(reserved, |&bytes| {
        let r = simulate(traces, &CacheConfig { reserved_bytes: bytes, ..cfg.clone() })?;
        Ok(SweepRow {
            reserved_bytes: bytes,
            capacity_tokens: r.capacity_tokens,
            slowdown: r.slowdown,
            hit_rate: r.hit_rate(),
            missed_pages_per_step: r.missed_pages_per_step(),
            missed_tokens: r.missed_tokens,
        })
    })
    .into_iter()
    .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("reserved_bytes,slowdown,hit_rate,missed_pages_per_step\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.reserved_bytes, r.slowdown, r.hit_rate, r.missed_pages_per_step).unwrap();
    }
    out
}

pub fn sweep_json(rows: &[SweepRow]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
    s.push('\n');
    s
}
