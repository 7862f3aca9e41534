use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::stats::{summarize_sorted, tier_label, Histogram, SummaryStats, TierReport, TierThresholds};
use super::{
    inter_layer_samples_for, lookback_samples, new_lookup_samples, page_utilization_samples, persistence_samples,
    working_set_samples_strided, WindowStride,
};
use crate::kv::{KvError, KvMap, KvWriter};
use crate::par::Exec;
use crate::trace::Trace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    /// Working-set window in decode steps.
    pub window: usize,
    pub stride: WindowStride,
    /// Overrides each trace's own page size when set.
    pub page_size_tokens: Option<u32>,
    /// Histogram bin width for the metrics measured in units of top-k.
    pub bin_width: f64,
    pub tiers: TierThresholds,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            window: 50,
            stride: WindowStride::Sliding,
            page_size_tokens: None,
            bin_width: 0.25,
            tiers: TierThresholds::default(),
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.window == 0 {
            return Err(MetricsError::InvalidConfig("window must be >= 1".into()));
        }
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(MetricsError::InvalidConfig("histogram bin width must be > 0".into()));
        }
        if self.page_size_tokens == Some(0) {
            return Err(MetricsError::InvalidConfig("page size must be >= 1".into()));
        }
        if !(self.tiers.hot_max < self.tiers.warm_max) {
            return Err(MetricsError::InvalidConfig("hot_max must be below warm_max".into()));
        }
        Ok(())
    }
    /// Reads `window`, `stride` (`sliding`/`disjoint`), `page_size_tokens`,
    /// `bin_width`, `hot_max` and `warm_max`; absent keys keep their defaults.
    pub fn from_kv(text: &str) -> Result<Self, MetricsError> {
        let m = KvMap::parse(text)?;
        let d = Self::default();
        let stride = match m.raw("stride") {
            None => d.stride,
            Some("sliding") => WindowStride::Sliding,
            Some("disjoint") => WindowStride::Disjoint,
            Some(other) => return Err(MetricsError::InvalidConfig(format!("unknown stride '{other}'"))),
        };
        let cfg = Self {
            window: m.get_or("window", d.window)?,
            stride,
            page_size_tokens: m.get("page_size_tokens")?,
            bin_width: m.get_or("bin_width", d.bin_width)?,
            tiers: TierThresholds {
                hot_max: m.get_or("hot_max", d.tiers.hot_max)?,
                warm_max: m.get_or("warm_max", d.tiers.warm_max)?,
            },
        };
        m.deny_unknown()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::default();
        w.pair("window", self.window).pair(
            "stride",
            match self.stride {
                WindowStride::Sliding => "sliding",
                WindowStride::Disjoint => "disjoint",
            },
        );
        if let Some(p) = self.page_size_tokens {
            w.pair("page_size_tokens", p);
        }
        w.pair("bin_width", self.bin_width).pair("hot_max", self.tiers.hot_max).pair("warm_max", self.tiers.warm_max);
        w.finish()
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("no traces to analyze")]
    Empty,
    #[error("incompatible traces: {field} is {first} in trace 0 but {other} in trace {index}")]
    Incompatible { field: &'static str, first: u32, other: u32, index: usize },
    #[error("invalid analysis config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Kv(#[from] KvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    WorkingSet,
    Persistence,
    Lookback,
    NewLookups,
    InterLayer,
    PageUtilization,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::WorkingSet,
        Metric::Persistence,
        Metric::Lookback,
        Metric::NewLookups,
        Metric::InterLayer,
        Metric::PageUtilization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::WorkingSet => "working_set",
            Self::Persistence => "persistence",
            Self::Lookback => "lookback",
            Self::NewLookups => "new_lookups",
            Self::InterLayer => "inter_layer",
            Self::PageUtilization => "page_utilization",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            Self::Persistence => "steps",
            Self::PageUtilization => "fraction",
            _ => "top-k",
        }
    }

    fn bin_width(self, cfg: &AnalysisConfig) -> f64 {
        match self {
            Self::Persistence => 1.0,
            Self::PageUtilization => 0.05,
            _ => cfg.bin_width,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub unit: String,
    /// `None` when the corpus produced no samples for this metric.
    pub stats: Option<SummaryStats>,
    pub histogram: Option<Histogram>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub working_set: Option<MeanStd>,
    pub lookback: Option<MeanStd>,
    pub new_lookups: Option<MeanStd>,
    /// Overlap with the previous layer; `None` for layer 0.
    pub inter_layer: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_traces: usize,
    pub n_layers: usize,
    pub top_k: u32,
    pub window: usize,
    pub stride: WindowStride,
    /// Page size used for utilization, or `None` if traces used differing sizes.
    pub page_size_tokens: Option<u32>,
    pub metrics: Vec<MetricSummary>,
    pub per_layer: Vec<LayerStats>,
    pub tiers: Option<TierReport>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn metric(&self, m: Metric) -> &MetricSummary {
        self.metrics.iter().find(|s| s.metric == m).expect("every metric is reported")
    }

    pub fn stats(&self, m: Metric) -> Option<&SummaryStats> {
        self.metric(m).stats.as_ref()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,unit,count,mean,p95,std,min,max\n");
        for m in &self.metrics {
            match &m.stats {
                Some(s) => writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    m.metric.name(),
                    m.unit,
                    s.count,
                    s.mean,
                    s.p95,
                    s.std,
                    s.min,
                    s.max
                ),
                None => writeln!(out, "{},{},0,,,,,", m.metric.name(), m.unit),
            }
            .unwrap();
        }
        out
    }

    /// One row per layer with mean and σ of the cross-layer metrics.
    pub fn per_layer_csv(&self) -> String {
        let mut out = String::from(
            "layer,working_set_mean,working_set_std,lookback_mean,lookback_std,new_lookups_mean,new_lookups_std,inter_layer_mean,inter_layer_std\n",
        );
        let cell = |v: &Option<MeanStd>| match v {
            Some(m) => format!("{},{}", m.mean, m.std),
            None => ",".to_owned(),
        };
        for l in &self.per_layer {
            writeln!(
                out,
                "{},{},{},{},{}",
                l.layer,
                cell(&l.working_set),
                cell(&l.lookback),
                cell(&l.new_lookups),
                cell(&l.inter_layer)
            )
            .unwrap();
        }
        out
    }
}

/// Raw samples from one (trace, layer) pair.
struct LayerSamples {
    working_set: Vec<f64>,
    persistence: Vec<f64>,
    lookback: Vec<f64>,
    new_lookups: Vec<f64>,
    inter_layer: Vec<f64>,
    page_utilization: Vec<f64>,
}

impl LayerSamples {
    fn get(&self, m: Metric) -> &[f64] {
        match m {
            Metric::WorkingSet => &self.working_set,
            Metric::Persistence => &self.persistence,
            Metric::Lookback => &self.lookback,
            Metric::NewLookups => &self.new_lookups,
            Metric::InterLayer => &self.inter_layer,
            Metric::PageUtilization => &self.page_utilization,
        }
    }
}

fn check_compatible(traces: &[Trace]) -> Result<(), MetricsError> {
    let first = traces.first().ok_or(MetricsError::Empty)?;
    for (index, t) in traces.iter().enumerate().skip(1) {
        for (field, a, b) in [("top_k", first.meta.top_k, t.meta.top_k), ("n_layers", first.meta.n_layers, t.meta.n_layers)]
        {
            if a != b {
                return Err(MetricsError::Incompatible { field, first: a, other: b, index });
            }
        }
    }
    Ok(())
}

fn pooled(parts: impl Iterator<Item = impl AsRef<[f64]>>) -> Vec<f64> {
    let mut all: Vec<f64> = Vec::new();
    for p in parts {
        all.extend_from_slice(p.as_ref());
    }
    all.sort_unstable_by(f64::total_cmp);
    all
}

fn mean_std(sorted: &[f64]) -> Option<MeanStd> {
    (!sorted.is_empty()).then(|| {
        let s = summarize_sorted(sorted);
        MeanStd { mean: s.mean, std: s.std }
    })
}

pub fn build_report(traces: &[Trace], cfg: &AnalysisConfig) -> Result<MetricsReport, MetricsError> {
    build_report_with(traces, cfg, Exec::default())
}

/// Pools every metric over all traces and layers. Samples are sorted before
/// aggregation, so the report does not depend on trace order or on `exec`.
pub fn build_report_with(traces: &[Trace], cfg: &AnalysisConfig, exec: Exec) -> Result<MetricsReport, MetricsError> {
    cfg.validate()?;
    check_compatible(traces)?;
    let n_layers = traces[0].n_layers();
    let top_k = traces[0].top_k();

    let pairs: Vec<(usize, usize)> = (0..traces.len()).flat_map(|i| (0..n_layers).map(move |l| (i, l))).collect();
    let samples: Vec<LayerSamples> = exec.map(&pairs, |&(i, l)| {
        let t = &traces[i];
        let page = cfg.page_size_tokens.unwrap_or(t.meta.page_size_tokens).max(1);
        LayerSamples {
            working_set: working_set_samples_strided(t, l, cfg.window, cfg.stride),
            persistence: persistence_samples(t, l),
            lookback: lookback_samples(t, l),
            new_lookups: new_lookup_samples(t, l),
            inter_layer: inter_layer_samples_for(t, l),
            page_utilization: page_utilization_samples(t, l, page),
        }
    });

    let mut warnings = Vec::new();
    let short = traces.iter().filter(|t| t.n_steps() < cfg.window).count();
    if short > 0 {
        warnings.push(format!(
            "{short} trace(s) have fewer than {} steps and contribute no working-set samples",
            cfg.window
        ));
    }

    let metrics: Vec<MetricSummary> = Metric::ALL
        .iter()
        .map(|&m| {
            let all = pooled(samples.iter().map(|s| s.get(m)));
            MetricSummary {
                metric: m,
                unit: m.unit().to_owned(),
                stats: (!all.is_empty()).then(|| summarize_sorted(&all)),
                histogram: (!all.is_empty()).then(|| Histogram::from_samples(&all, m.bin_width(cfg))),
            }
        })
        .collect();

    let per_layer = (0..n_layers)
        .map(|l| {
            let of = |m: Metric| mean_std(&pooled(samples.iter().skip(l).step_by(n_layers).map(|s| s.get(m))));
            LayerStats {
                layer: l,
                working_set: of(Metric::WorkingSet),
                lookback: of(Metric::Lookback),
                new_lookups: of(Metric::NewLookups),
                inter_layer: of(Metric::InterLayer),
            }
        })
        .collect();

    let tiers = metrics
        .iter()
        .find(|s| s.metric == Metric::Lookback)
        .and_then(|s| s.histogram.as_ref())
        .map(|h| tier_label(h, cfg.tiers));

    let page_size_tokens = cfg.page_size_tokens.or_else(|| {
        let p = traces[0].meta.page_size_tokens;
        traces.iter().all(|t| t.meta.page_size_tokens == p).then_some(p)
    });

    Ok(MetricsReport {
        n_traces: traces.len(),
        n_layers,
        top_k,
        window: cfg.window,
        stride: cfg.stride,
        page_size_tokens,
        metrics,
        per_layer,
        tiers,
        warnings,
    })
}

/// Renders a histogram as a standalone SVG bar chart.
pub fn histogram_svg(title: &str, unit: &str, hist: &Histogram) -> String {
    let (w, h, margin) = (640.0, 360.0, 48.0);
    let plot_w = w - 2.0 * margin;
    let plot_h = h - 2.0 * margin;
    let max = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = plot_w / hist.counts.len().max(1) as f64;
    let mut svg = String::new();
    writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(svg, r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#, w / 2.0, escape(title))
        .unwrap();
    for (i, &c) in hist.counts.iter().enumerate() {
        let bh = c as f64 / max * plot_h;
        let x = margin + i as f64 * bar_w;
        let y = margin + plot_h - bh;
        writeln!(
            svg,
            r##"<rect x="{x:.2}" y="{y:.2}" width="{:.2}" height="{bh:.2}" fill="#4a78b5"><title>[{}, {}): {c}</title></rect>"##,
            (bar_w - 1.0).max(0.5),
            i as f64 * hist.bin_width,
            (i + 1) as f64 * hist.bin_width
        )
        .unwrap();
    }
    let base = margin + plot_h;
    writeln!(svg, r#"<line x1="{margin}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, margin + plot_w).unwrap();
    writeln!(svg, r#"<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{base}" stroke="black"/>"#).unwrap();
    let x_max = hist.counts.len() as f64 * hist.bin_width;
    writeln!(svg, r#"<text x="{margin}" y="{}" font-family="sans-serif" font-size="12">0</text>"#, base + 16.0).unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end">{x_max} {}</text>"#,
        margin + plot_w,
        base + 16.0,
        escape(unit)
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="end">{}</text>"#,
        margin - 4.0,
        margin + 4.0,
        max as u64
    )
    .unwrap();
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
