//! First-order decode roofline: how much of a device's HBM bandwidth and peak
//! compute a dense decode workload consumes, and how many devices it needs.
//!
//! Sharding is assumed ideal: bytes and flops split evenly across devices
//! with no communication cost.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::kv::{KvError, KvMap, KvWriter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpuSpec {
    /// Bytes per second.
    pub hbm_bandwidth: f64,
    /// FLOP per second.
    pub peak_compute: f64,
    pub ll_cache_bytes: f64,
}

impl GpuSpec {
    /// H100 SXM: HBM3 bandwidth, dense BF16 tensor peak, 50 MB L2.
    pub const H100_SXM: GpuSpec = GpuSpec { hbm_bandwidth: 3.35e12, peak_compute: 989e12, ll_cache_bytes: 50e6 };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeWorkload {
    pub tokens_per_second_per_user: f64,
    pub batch_size: f64,
    pub context_tokens: f64,
    /// Bytes read from HBM per generated token: the batch-amortized weight
    /// share plus that token's KV traffic.
    pub bytes_per_token: f64,
    pub flops_per_token: f64,
}

impl DecodeWorkload {
    /// Aggregate generated tokens per second.
    pub fn token_rate(&self) -> f64 {
        self.tokens_per_second_per_user * self.batch_size
    }

    /// The same workload split evenly over `n` devices.
    pub fn sharded(&self, n: u32) -> Self {
        let n = f64::from(n.max(1));
        Self { bytes_per_token: self.bytes_per_token / n, flops_per_token: self.flops_per_token / n, ..*self }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RooflineError {
    #[error("{0} must be positive and finite")]
    NotPositive(&'static str),
    #[error("{0} must be non-negative and finite")]
    Negative(&'static str),
    #[error("utilization cap {0} is outside (0, 1]")]
    BadCap(f64),
    #[error("{needed} devices required, more than the supported {max}")]
    Unachievable { needed: f64, max: u32 },
    #[error("assumption file: {0}")]
    Kv(#[from] KvError),
}

fn positive(v: f64, name: &'static str) -> Result<(), RooflineError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(RooflineError::NotPositive(name))
    }
}

fn non_negative(v: f64, name: &'static str) -> Result<(), RooflineError> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(RooflineError::Negative(name))
    }
}

/// `(bandwidth utilization, compute utilization)` of one device. Values above
/// 1.0 mean the device cannot sustain the rate.
pub fn utilization(w: &DecodeWorkload, gpu: &GpuSpec) -> Result<(f64, f64), RooflineError> {
    positive(gpu.hbm_bandwidth, "hbm_bandwidth")?;
    positive(gpu.peak_compute, "peak_compute")?;
    non_negative(w.tokens_per_second_per_user, "tokens_per_second_per_user")?;
    non_negative(w.batch_size, "batch_size")?;
    non_negative(w.bytes_per_token, "bytes_per_token")?;
    non_negative(w.flops_per_token, "flops_per_token")?;
    let rate = w.token_rate();
    Ok((rate * w.bytes_per_token / gpu.hbm_bandwidth, rate * w.flops_per_token / gpu.peak_compute))
}

pub const MAX_DEVICES: u32 = 1 << 20;

/// Fewest devices that keep both utilizations at or below `cap` for a
/// whole-model workload.
pub fn min_devices(w: &DecodeWorkload, gpu: &GpuSpec, cap: f64) -> Result<u32, RooflineError> {
    if !(cap > 0.0 && cap <= 1.0) {
        return Err(RooflineError::BadCap(cap));
    }
    let (bw, compute) = utilization(w, gpu)?;
    let needed = (bw.max(compute) / cap).ceil().max(1.0);
    if needed > f64::from(MAX_DEVICES) {
        return Err(RooflineError::Unachievable { needed, max: MAX_DEVICES });
    }
    let mut n = needed as u32;
    // Guard against the ceiling landing one short after rounding.
    while n < MAX_DEVICES {
        let (b, c) = utilization(&w.sharded(n), gpu)?;
        if b <= cap && c <= cap {
            break;
        }
        n += 1;
    }
    Ok(n)
}

/// One backbone's assumptions, as read from a `key = value` file.
///
/// Bytes and flops may be given directly (`bytes_per_token`,
/// `flops_per_token`) or derived from model shape:
/// `bytes_per_token = weight_bytes / batch_size + context_tokens * kv_bytes_per_context_token`
/// and `flops_per_token = 2 * active_params + context_tokens * attention_flops_per_context_token`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumptions {
    pub name: String,
    pub workload: DecodeWorkload,
    pub gpu: GpuSpec,
    pub utilization_cap: f64,
}

impl Assumptions {
    pub fn from_kv(text: &str) -> Result<Self, RooflineError> {
        let m = KvMap::parse(text)?;
        let h = GpuSpec::H100_SXM;
        let name = m.raw("name").unwrap_or("unnamed").to_owned();
        let tps: f64 = m.get_or("tokens_per_second_per_user", 100.0)?;
        let batch: f64 = m.get_or("batch_size", 8.0)?;
        let context: f64 = m.get_or("context_tokens", 65536.0)?;

        let bytes_per_token = match m.get::<f64>("bytes_per_token")? {
            Some(b) => b,
            None => {
                let weights: f64 = m.require("weight_bytes")?;
                let kv: f64 = m.require("kv_bytes_per_context_token")?;
                positive(batch, "batch_size")?;
                weights / batch + context * kv
            }
        };
        let flops_per_token = match m.get::<f64>("flops_per_token")? {
            Some(f) => f,
            None => {
                let params: f64 = m.require("active_params")?;
                let attn: f64 = m.get_or("attention_flops_per_context_token", 0.0)?;
                2.0 * params + context * attn
            }
        };
        let a = Self {
            name,
            workload: DecodeWorkload {
                tokens_per_second_per_user: tps,
                batch_size: batch,
                context_tokens: context,
                bytes_per_token,
                flops_per_token,
            },
            gpu: GpuSpec {
                hbm_bandwidth: m.get_or("hbm_bandwidth", h.hbm_bandwidth)?,
                peak_compute: m.get_or("peak_compute", h.peak_compute)?,
                ll_cache_bytes: m.get_or("ll_cache_bytes", h.ll_cache_bytes)?,
            },
            utilization_cap: m.get_or("utilization_cap", 0.95)?,
        };
        m.deny_unknown()?;
        utilization(&a.workload, &a.gpu)?;
        if !(a.utilization_cap > 0.0 && a.utilization_cap <= 1.0) {
            return Err(RooflineError::BadCap(a.utilization_cap));
        }
        Ok(a)
    }

    /// Writes the resolved (direct-form) assumptions.
    pub fn to_kv(&self) -> String {
        let w = &self.workload;
        KvWriter::default()
            .pair("name", &self.name)
            .pair("tokens_per_second_per_user", w.tokens_per_second_per_user)
            .pair("batch_size", w.batch_size)
            .pair("context_tokens", w.context_tokens)
            .pair("bytes_per_token", w.bytes_per_token)
            .pair("flops_per_token", w.flops_per_token)
            .pair("hbm_bandwidth", self.gpu.hbm_bandwidth)
            .pair("peak_compute", self.gpu.peak_compute)
            .pair("ll_cache_bytes", self.gpu.ll_cache_bytes)
            .pair("utilization_cap", self.utilization_cap)
            .finish()
    }

    pub fn row(&self) -> Result<RooflineRow, RooflineError> {
        let n = min_devices(&self.workload, &self.gpu, self.utilization_cap)?;
        let (bw, compute) = utilization(&self.workload.sharded(n), &self.gpu)?;
        Ok(RooflineRow {
            backbone: self.name.clone(),
            n_devices: n,
            bw_utilization: bw,
            compute_utilization: compute,
            bytes_per_token: self.workload.bytes_per_token,
            flops_per_token: self.workload.flops_per_token,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RooflineRow {
    pub backbone: String,
    pub n_devices: u32,
    pub bw_utilization: f64,
    pub compute_utilization: f64,
    pub bytes_per_token: f64,
    pub flops_per_token: f64,
}

pub fn rows_csv(rows: &[RooflineRow]) -> String {
    let mut out = String::from("backbone,n_devices,bw_utilization,compute_utilization,bytes_per_token,flops_per_token\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.backbone, r.n_devices, r.bw_utilization, r.compute_utilization, r.bytes_per_token, r.flops_per_token
        )
        .unwrap();
    }
    out
}

pub fn rows_json(rows: &[RooflineRow]) -> String {
    let mut s = serde_json::to_string_pretty(rows).expect("rows serialize");
    s.push('\n');
    s
}
