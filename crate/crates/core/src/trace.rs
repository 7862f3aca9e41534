//! In-memory representation of top-k KV selection traces and their validation.
//!
//! A trace records, for every decode step and every layer, the ascending set of
//! absolute token positions selected by the indexer. Positions count from the
//! start of the sequence, so prefill tokens occupy `0..prefill_len` and the
//! token generated at step `t` sits at `prefill_len + t`.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Header metadata shared by every step of a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model_name: String,
    pub n_layers: u32,
    pub top_k: u32,
    pub prefill_len: u32,
    pub n_steps: u32,
    pub page_size_tokens: u32,
    pub kv_token_bytes: u32,
    #[serde(default)]
    pub tenant_id: u32,
}

impl TraceMeta {
    /// Number of tokens visible to the indexer at decode step `t`.
    pub fn context_at(&self, t: u32) -> u32 {
        self.prefill_len + t
    }

    /// Length a well-formed selection must have at step `t`.
    pub fn expected_len(&self, t: u32) -> usize {
        self.top_k.min(self.context_at(t)) as usize
    }
}

/// Ordered, duplicate-free set of selected token positions.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TopKSet(Vec<u32>);

impl TopKSet {
    /// Wraps indices without checking them. Use [`validate_trace`] (or
    /// [`TopKSet::from_unsorted`]) to establish the invariants.
    pub fn from_raw(indices: Vec<u32>) -> Self {
        Self(indices)
    }

    /// Sorts and deduplicates.
    pub fn from_unsorted(mut indices: Vec<u32>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, index: u32) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.0
    }

    /// Size of the intersection with `other`. Both sets must be sorted.
    pub fn intersection_len(&self, other: &TopKSet) -> usize {
        let (mut a, mut b) = (self.0.iter().peekable(), other.0.iter().peekable());
        let mut n = 0;
        while let (Some(&&x), Some(&&y)) = (a.peek(), b.peek()) {
            match x.cmp(&y) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    n += 1;
                    a.next();
                    b.next();
                }
            }
        }
        n
    }

    /// Number of entries of `self` that are absent from `other`.
    pub fn difference_len(&self, other: &TopKSet) -> usize {
        self.len() - self.intersection_len(other)
    }
}

impl From<Vec<u32>> for TopKSet {
    fn from(v: Vec<u32>) -> Self {
        Self(v)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStep {
    pub t: u32,
    pub per_layer: Vec<TopKSet>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trace {
    pub meta: TraceMeta,
    pub steps: Vec<DecodeStep>,
}

impl Trace {
    /// Selection of `layer` at step `t`.
    pub fn set(&self, t: usize, layer: usize) -> &TopKSet {
        &self.steps[t].per_layer[layer]
    }

    /// Iterates one layer's selections in step order.
    pub fn layer_sets(&self, layer: usize) -> impl Iterator<Item = &TopKSet> + '_ {
        self.steps.iter().map(move |s| &s.per_layer[layer])
    }

    pub fn n_layers(&self) -> usize {
        self.meta.n_layers as usize
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn top_k(&self) -> u32 {
        self.meta.top_k
    }

    /// Runs [`validate_trace`] and turns a non-empty report into an error.
    pub fn validated(self) -> Result<Self, ValidationReport> {
        let report = validate_trace(&self);
        if report.is_valid() {
            Ok(self)
        } else {
            Err(report)
        }
    }
}

/// Class of a broken trace invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    /// A count field in the header is zero, or `top_k` exceeds the final context.
    BadMeta,
    /// `steps.len()` disagrees with `n_steps`.
    StepCount,
    /// Step indices are not `0..n_steps` in order.
    StepIndex,
    /// A step has the wrong number of layer selections.
    LayerCount,
    /// A selection repeats an index.
    Duplicate,
    /// A selection is not in ascending order.
    Unsorted,
    /// A selection references a token at or beyond the current position.
    Causality,
    /// A selection length differs from `min(top_k, context)`.
    WrongLength,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::BadMeta => "bad metadata",
            Self::StepCount => "step count mismatch",
            Self::StepIndex => "non-contiguous step index",
            Self::LayerCount => "layer count mismatch",
            Self::Duplicate => "duplicate index",
            Self::Unsorted => "unsorted indices",
            Self::Causality => "causality violation",
            Self::WrongLength => "wrong selection length",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Position of the step within `Trace::steps`, when applicable.
    pub step: Option<usize>,
    pub layer: Option<usize>,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if let Some(s) = self.step {
            write!(f, " at step {s}")?;
        }
        if let Some(l) = self.layer {
            write!(f, " layer {l}")?;
        }
        write!(f, ": {}", self.detail)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn kinds(&self) -> impl Iterator<Item = ViolationKind> + '_ {
        self.violations.iter().map(|v| v.kind)
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.kinds().any(|k| k == kind)
    }

    fn push(&mut self, kind: ViolationKind, step: Option<usize>, layer: Option<usize>, detail: String) {
        self.violations.push(Violation { kind, step, layer, detail });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        write!(f, "{} violation(s)", self.violations.len())?;
        for v in self.violations.iter().take(8) {
            write!(f, "; {v}")?;
        }
        if self.violations.len() > 8 {
            write!(f, "; ...")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationReport {}

/// Checks every trace invariant and reports each broken one. Never fails.
pub fn validate_trace(trace: &Trace) -> ValidationReport {
    let mut report = ValidationReport::default();
    let m = &trace.meta;

    let zero_fields: Vec<&str> = [
        ("n_layers", m.n_layers),
        ("top_k", m.top_k),
        ("prefill_len", m.prefill_len),
        ("n_steps", m.n_steps),
        ("page_size_tokens", m.page_size_tokens),
        ("kv_token_bytes", m.kv_token_bytes),
    ]
    .iter()
    .filter(|(_, v)| *v == 0)
    .map(|(n, _)| *n)
    .collect();
    if !zero_fields.is_empty() {
        report.push(ViolationKind::BadMeta, None, None, format!("zero-valued {}", zero_fields.join(", ")));
    }
    let final_context = u64::from(m.prefill_len) + u64::from(m.n_steps);
    if u64::from(m.top_k) > final_context {
        report.push(
            ViolationKind::BadMeta,
            None,
            None,
            format!("top_k {} exceeds final context {final_context}", m.top_k),
        );
    }

    if trace.steps.len() != m.n_steps as usize {
        report.push(
            ViolationKind::StepCount,
            None,
            None,
            format!("header declares {} steps, found {}", m.n_steps, trace.steps.len()),
        );
    }

    for (pos, step) in trace.steps.iter().enumerate() {
        if step.t as usize != pos {
            report.push(ViolationKind::StepIndex, Some(pos), None, format!("expected t={pos}, found t={}", step.t));
        }
        if step.per_layer.len() != m.n_layers as usize {
            report.push(
                ViolationKind::LayerCount,
                Some(pos),
                None,
                format!("expected {} layers, found {}", m.n_layers, step.per_layer.len()),
            );
        }
        // Causality and length are judged against the position in the trace,
        // not the (possibly corrupt) recorded t.
        let context = u64::from(m.prefill_len) + pos as u64;
        let expected = u64::from(m.top_k).min(context) as usize;
        for (layer, set) in step.per_layer.iter().enumerate() {
            check_set(&mut report, set.as_slice(), pos, layer, context, expected);
        }
    }
    report
}

fn check_set(report: &mut ValidationReport, idx: &[u32], step: usize, layer: usize, context: u64, expected: usize) {
    if idx.windows(2).any(|w| w[0] > w[1]) {
        report.push(ViolationKind::Unsorted, Some(step), Some(layer), "indices not ascending".into());
    }
    let has_dup = if idx.windows(2).all(|w| w[0] <= w[1]) {
        idx.windows(2).any(|w| w[0] == w[1])
    } else {
        let mut sorted = idx.to_vec();
        sorted.sort_unstable();
        sorted.windows(2).any(|w| w[0] == w[1])
    };
    if has_dup {
        report.push(ViolationKind::Duplicate, Some(step), Some(layer), "repeated index".into());
    }
    if let Some(&bad) = idx.iter().find(|&&i| u64::from(i) >= context) {
        report.push(
            ViolationKind::Causality,
            Some(step),
            Some(layer),
            format!("index {bad} not below current position {context}"),
        );
    }
    if idx.len() != expected {
        report.push(
            ViolationKind::WrongLength,
            Some(step),
            Some(layer),
            format!("expected {expected} indices, found {}", idx.len()),
        );
    }
}
