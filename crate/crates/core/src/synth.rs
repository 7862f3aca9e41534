//! Synthetic top-k traces driven by the lightning-indexer score.
//!
//! Each layer owns fixed per-token key embeddings and a drifting unit-norm
//! query per head. Every decode step scores all visible tokens with
//! `sum_j w_j * relu(q_j . k_j)`, adds an exponential recency bias and a
//! constant boost for a seeded subset of prefill "anchor" tokens, and keeps the
//! top k. All randomness is drawn from ChaCha streams keyed by
//! `(seed, purpose, a, b)`, so no value depends on evaluation order and layers
//! can be generated concurrently.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::kv::{KvError, KvMap, KvWriter};
use crate::par::Exec;
use crate::trace::{DecodeStep, TopKSet, Trace, TraceMeta};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexerParams {
    pub n_heads: usize,
    pub dim: usize,
}

impl Default for IndexerParams {
    fn default() -> Self {
        Self { n_heads: 4, dim: 64 }
    }
}

impl IndexerParams {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_heads == 0 || self.dim == 0 {
            return Err(SynthError::InvalidConfig("indexer heads and dim must be >= 1".into()));
        }
        Ok(())
    }

    fn width(&self) -> usize {
        self.n_heads * self.dim
    }
}

/// Generator knobs. See `configs/calibrated.conf` for the values that
/// reproduce the reference access statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub model_name: String,
    pub prefill_len: u32,
    pub n_steps: u32,
    pub n_layers: u32,
    pub top_k: u32,
    pub page_size_tokens: u32,
    pub kv_token_bytes: u32,
    pub tenant_id: u32,
    /// Step-to-step query correlation in `[0, 1]`.
    pub query_drift: f64,
    /// Weight of the recency bias, `>= 0`.
    pub recency_strength: f64,
    /// Decay length of the recency bias in tokens, `> 0`.
    pub recency_scale: f64,
    /// Fraction of prefill tokens that receive the anchor boost.
    pub anchor_fraction: f64,
    pub anchor_boost: f64,
    /// 0 makes all layers identical, 1 makes them independent.
    pub layer_decorrelation: f64,
    /// Correlation of each token's key with the previous token's, in `[0, 1)`.
    pub key_locality: f64,
}

impl Default for GenConfig {
    /// The calibrated configuration.
    fn default() -> Self {
        Self {
            seed: 0,
            model_name: "synthetic".into(),
            prefill_len: 1000,
            n_steps: 200,
            n_layers: 4,
            top_k: 128,
            page_size_tokens: 16,
            kv_token_bytes: 4096,
            tenant_id: 0,
            query_drift: 0.32,
            recency_strength: 0.42,
            recency_scale: 238.0,
            anchor_fraction: 0.41,
            anchor_boost: 0.35,
            layer_decorrelation: 0.83,
            key_locality: 0.993,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidConfig(m.into()));
        if self.prefill_len == 0 || self.n_steps == 0 || self.n_layers == 0 || self.top_k == 0 {
            return bad("prefill_len, n_steps, n_layers and top_k must be >= 1");
        }
        if self.page_size_tokens == 0 || self.kv_token_bytes == 0 {
            return bad("page_size_tokens and kv_token_bytes must be >= 1");
        }
        if u64::from(self.top_k) > u64::from(self.prefill_len) + u64::from(self.n_steps) {
            return bad("top_k exceeds prefill_len + n_steps");
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.query_drift) {
            return bad("query_drift must be in [0, 1]");
        }
        if !unit(self.anchor_fraction) {
            return bad("anchor_fraction must be in [0, 1]");
        }
        if !unit(self.layer_decorrelation) {
            return bad("layer_decorrelation must be in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.key_locality) {
            return bad("key_locality must be in [0, 1)");
        }
        if !(self.recency_strength >= 0.0 && self.recency_strength.is_finite()) {
            return bad("recency_strength must be finite and >= 0");
        }
        if !(self.anchor_boost >= 0.0 && self.anchor_boost.is_finite()) {
            return bad("anchor_boost must be finite and >= 0");
        }
        if !(self.recency_scale > 0.0) {
            return bad("recency_scale must be > 0");
        }
        Ok(())
    }

    /// Meta block of every trace generated from this config.
    pub fn trace_meta(&self) -> TraceMeta {
        TraceMeta {
            model_name: self.model_name.clone(),
            n_layers: self.n_layers,
            top_k: self.top_k,
            prefill_len: self.prefill_len,
            n_steps: self.n_steps,
            page_size_tokens: self.page_size_tokens,
            kv_token_bytes: self.kv_token_bytes,
            tenant_id: self.tenant_id,
        }
    }
}

/// Parses a generator file into its config and indexer shape. Missing keys
/// take the calibrated defaults; unknown keys are rejected.
pub fn parse_gen_file(text: &str) -> Result<(GenConfig, IndexerParams), SynthError> {
    let m = KvMap::parse(text)?;
    let d = GenConfig::default();
    let p = IndexerParams::default();
    let cfg = GenConfig {
        seed: m.get_or("seed", d.seed)?,
        model_name: m.raw("model_name").map(str::to_owned).unwrap_or(d.model_name),
        prefill_len: m.get_or("prefill_len", d.prefill_len)?,
        n_steps: m.get_or("n_steps", d.n_steps)?,
        n_layers: m.get_or("n_layers", d.n_layers)?,
        top_k: m.get_or("top_k", d.top_k)?,
        page_size_tokens: m.get_or("page_size_tokens", d.page_size_tokens)?,
        kv_token_bytes: m.get_or("kv_token_bytes", d.kv_token_bytes)?,
        tenant_id: m.get_or("tenant_id", d.tenant_id)?,
        query_drift: m.get_or("query_drift", d.query_drift)?,
        recency_strength: m.get_or("recency_strength", d.recency_strength)?,
        recency_scale: m.get_or("recency_scale", d.recency_scale)?,
        anchor_fraction: m.get_or("anchor_fraction", d.anchor_fraction)?,
        anchor_boost: m.get_or("anchor_boost", d.anchor_boost)?,
        layer_decorrelation: m.get_or("layer_decorrelation", d.layer_decorrelation)?,
        key_locality: m.get_or("key_locality", d.key_locality)?,
    };
    let params = IndexerParams { n_heads: m.get_or("indexer_heads", p.n_heads)?, dim: m.get_or("indexer_dim", p.dim)? };
    m.deny_unknown()?;
    cfg.validate()?;
    params.validate()?;
    Ok((cfg, params))
}

pub fn write_gen_file(cfg: &GenConfig, params: &IndexerParams) -> String {
    KvWriter::default()
        .pair("seed", cfg.seed)
        .pair("model_name", &cfg.model_name)
        .pair("prefill_len", cfg.prefill_len)
        .pair("n_steps", cfg.n_steps)
        .pair("n_layers", cfg.n_layers)
        .pair("top_k", cfg.top_k)
        .pair("page_size_tokens", cfg.page_size_tokens)
        .pair("kv_token_bytes", cfg.kv_token_bytes)
        .pair("tenant_id", cfg.tenant_id)
        .pair("query_drift", cfg.query_drift)
        .pair("recency_strength", cfg.recency_strength)
        .pair("recency_scale", cfg.recency_scale)
        .pair("anchor_fraction", cfg.anchor_fraction)
        .pair("anchor_boost", cfg.anchor_boost)
        .pair("layer_decorrelation", cfg.layer_decorrelation)
        .pair("key_locality", cfg.key_locality)
        .pair("indexer_heads", params.n_heads)
        .pair("indexer_dim", params.dim)
        .finish()
}

/// Indexer relevance of one key for one query: the weighted sum over heads of
/// the rectified query/key dot products. `q` and `k` are head-major,
/// `n_heads * dim` long.
pub fn indexer_score(params: &IndexerParams, q: &[f64], k: &[f64], w: &[f64]) -> Result<f64, SynthError> {
    let width = params.width();
    if q.len() != width || k.len() != width || w.len() != params.n_heads {
        return Err(SynthError::Dimension(format!(
            "expected q,k of {width} and w of {}, got q={} k={} w={}",
            params.n_heads,
            q.len(),
            k.len(),
            w.len()
        )));
    }
    Ok(score_unchecked(params.dim, q, k, w))
}

#[inline]
fn score_unchecked(dim: usize, q: &[f64], k: &[f64], w: &[f64]) -> f64 {
    q.chunks_exact(dim)
        .zip(k.chunks_exact(dim))
        .zip(w)
        .map(|((qh, kh), &wh)| {
            let dot: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum();
            wh * dot.max(0.0)
        })
        .sum()
}

/// Positions of the `min(k, len)` highest scores, ascending. Ties go to the
/// lower position; NaN ranks below everything.
pub fn top_k_select(scores: &[f64], k: usize) -> TopKSet {
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s + 0.0 };
    let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
    if k < idx.len() && k > 0 {
        let cmp = |a: &u32, b: &u32| key(scores[*b as usize]).total_cmp(&key(scores[*a as usize])).then(a.cmp(b));
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    } else if k == 0 {
        idx.clear();
    }
    idx.sort_unstable();
    TopKSet::from_raw(idx)
}

// Stream purposes for the keyed generator.
const KEY_SHARED: u64 = 1;
const KEY_LAYER: u64 = 2;
const QUERY_SHARED: u64 = 3;
const QUERY_LAYER: u64 = 4;
const ANCHOR: u64 = 5;
const HEAD_WEIGHT: u64 = 6;

fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_exact_mut(8).zip([seed, purpose, a, b]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn gaussian(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for x in out {
        *x = rng.sample(StandardNormal);
    }
}

fn normalize_heads(v: &mut [f64], dim: usize) {
    for h in v.chunks_exact_mut(dim) {
        let n = h.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            h.iter_mut().for_each(|x| *x /= n);
        }
    }
}

/// `normalize(sqrt(1 - mix) * shared + sqrt(mix) * own)`, per head.
fn blend(shared: &[f64], own: &[f64], mix: f64, dim: usize, out: &mut [f64]) {
    let (a, b) = ((1.0 - mix).sqrt(), mix.sqrt());
    for ((o, s), p) in out.iter_mut().zip(shared).zip(own) {
        *o = a * s + b * p;
    }
    normalize_heads(out, dim);
}

/// Token-level inputs shared by every layer.
struct SharedInputs {
    boost: Vec<f64>,
}

impl SharedInputs {
    fn new(cfg: &GenConfig) -> Self {
        let boost = (0..cfg.prefill_len as u64)
            .map(|s| {
                let u: f64 = stream(cfg.seed, ANCHOR, s, 0).random();
                if u < cfg.anchor_fraction {
                    cfg.anchor_boost
                } else {
                    0.0
                }
            })
            .collect();
        Self { boost }
    }
}

fn generate_layer(cfg: &GenConfig, params: &IndexerParams, shared: &SharedInputs, layer: u32) -> Vec<TopKSet> {
    let (dim, width) = (params.dim, params.width());
    let lam = cfg.layer_decorrelation;
    let n_keys = (cfg.prefill_len + cfg.n_steps - 1) as usize;

    // Raw key processes are unit-variance AR(1) chains over token position.
    let gamma = cfg.key_locality;
    let fresh = (1.0 - gamma * gamma).sqrt();
    let mut keys = vec![0.0; n_keys * width];
    let (mut zs, mut zl) = (vec![0.0; width], vec![0.0; width]);
    let (mut xs, mut xl) = (vec![0.0; width], vec![0.0; width]);
    for (s, key) in keys.chunks_exact_mut(width).enumerate() {
        gaussian(&mut stream(cfg.seed, KEY_SHARED, s as u64, 0), &mut zs);
        gaussian(&mut stream(cfg.seed, KEY_LAYER, u64::from(layer), s as u64), &mut zl);
        for (x, z) in xs.iter_mut().zip(&zs).chain(xl.iter_mut().zip(&zl)) {
            *x = gamma * *x + fresh * z;
        }
        blend(&xs, &xl, lam, dim, key);
    }

    let (mut wshared, mut wown) = (stream(cfg.seed, HEAD_WEIGHT, 0, 0), stream(cfg.seed, HEAD_WEIGHT, 1, u64::from(layer)));
    let weights: Vec<f64> = (0..params.n_heads)
        .map(|_| 0.5 + (1.0 - lam) * wshared.random::<f64>() + lam * wown.random::<f64>())
        .collect();

    let rho = cfg.query_drift;
    let innov = (1.0 - rho * rho).max(0.0).sqrt();
    let mut q = vec![0.0; width];
    let mut g = vec![0.0; width];
    let mut scores = Vec::with_capacity(n_keys);
    let mut out = Vec::with_capacity(cfg.n_steps as usize);

    for t in 0..cfg.n_steps {
        gaussian(&mut stream(cfg.seed, QUERY_SHARED, u64::from(t), 0), &mut zs);
        gaussian(&mut stream(cfg.seed, QUERY_LAYER, u64::from(layer), u64::from(t)), &mut zl);
        blend(&zs, &zl, lam, dim, &mut g);
        if t == 0 {
            q.copy_from_slice(&g);
        } else {
            for (qi, gi) in q.iter_mut().zip(&g) {
                *qi = rho * *qi + innov * gi;
            }
            normalize_heads(&mut q, dim);
        }

        let position = cfg.prefill_len + t;
        scores.clear();
        scores.extend(keys.chunks_exact(width).take(position as usize).enumerate().map(|(s, key)| {
            let distance = f64::from(position) - s as f64;
            let mut score = score_unchecked(dim, &q, key, &weights)
                + cfg.recency_strength * (-distance / cfg.recency_scale).exp();
            if let Some(b) = shared.boost.get(s) {
                score += b;
            }
            score
        }));
        out.push(top_k_select(&scores, cfg.top_k as usize));
    }
    out
}

/// Generates one trace. Identical inputs give bit-identical traces.
pub fn generate_trace(cfg: &GenConfig, params: &IndexerParams) -> Result<Trace, SynthError> {
    generate_trace_with(cfg, params, Exec::default())
}

pub fn generate_trace_with(cfg: &GenConfig, params: &IndexerParams, exec: Exec) -> Result<Trace, SynthError> {
    cfg.validate()?;
    params.validate()?;
    let shared = SharedInputs::new(cfg);
    let layers = exec.map_range(cfg.n_layers as usize, |l| generate_layer(cfg, params, &shared, l as u32));
    let mut layer_iters: Vec<_> = layers.into_iter().map(Vec::into_iter).collect();
    let steps = (0..cfg.n_steps)
        .map(|t| DecodeStep { t, per_layer: layer_iters.iter_mut().map(|it| it.next().unwrap()).collect() })
        .collect();
    Ok(Trace { meta: cfg.trace_meta(), steps })
}

/// Generates `count` traces with seeds `cfg.seed + i`.
pub fn generate_corpus(cfg: &GenConfig, params: &IndexerParams, count: usize, exec: Exec) -> Result<Vec<Trace>, SynthError> {
    cfg.validate()?;
    params.validate()?;
    exec.map_range(count, |i| {
        let c = GenConfig { seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
        // Each trace already fans out over layers; keep the inner loop sequential.
        generate_trace_with(&c, params, Exec::Sequential)
    })
    .into_iter()
    .collect()
}
