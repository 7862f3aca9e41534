//! Binary and JSON-lines encodings of [`Trace`].
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic    4 bytes  "DSAT"
//! version  u16      1
//! u32 × 7           n_layers top_k prefill_len n_steps page_size_tokens kv_token_bytes tenant_id
//! u16               model_name byte length, then that many UTF-8 bytes
//! for t in steps, for l in layers:
//!     u32 count, then count × u32 ascending indices
//! ```
//!
//! JSON lines: a header object carrying the same fields, then one
//! `{"t": .., "layers": [[..], ..]}` object per step.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::trace::{validate_trace, DecodeStep, TopKSet, Trace, TraceMeta, ValidationReport};

pub const MAGIC: [u8; 4] = *b"DSAT";
pub const VERSION: u16 = 1;

/// Fixed part of the binary header, excluding the model name bytes.
pub const FIXED_HEADER_LEN: usize = 4 + 2 + 7 * 4 + 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Binary,
    #[serde(rename = "jsonl")]
    JsonLines,
}

impl TraceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            Self::Binary => "dsat",
            Self::JsonLines => "jsonl",
        }
    }

    /// Guesses the format from a file extension; anything other than
    /// `.jsonl`/`.json` is treated as binary.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Self::JsonLines,
            _ => Self::Binary,
        }
    }
}

impl FromStr for TraceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" | "bin" | "dsat" => Ok(Self::Binary),
            "jsonl" | "jsonlines" => Ok(Self::JsonLines),
            other => Err(format!("unknown trace format '{other}' (expected binary or jsonl)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic at byte 0: expected \"DSAT\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {version} at byte {offset}")]
    UnsupportedVersion { version: u16, offset: usize },
    #[error("truncated stream at byte {offset}: needed {needed} more byte(s)")]
    Truncated { offset: usize, needed: usize },
    #[error("{extra} trailing byte(s) after last step at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("model name at byte {offset} is not UTF-8")]
    BadName { offset: usize },
    #[error("model name is {0} bytes, longer than the u16 length field allows")]
    NameTooLong(usize),
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error("invalid trace: {0}")]
    Invalid(ValidationReport),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Writes `trace` to `sink` and returns the number of bytes written.
/// Invalid traces are rejected before anything is written.
pub fn write_trace<W: Write>(trace: &Trace, format: TraceFormat, sink: W) -> Result<u64, FormatError> {
    let report = validate_trace(trace);
    if !report.is_valid() {
        return Err(FormatError::Invalid(report));
    }
    let bytes = encode(trace, format)?;
    let mut sink = sink;
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len() as u64)
}

/// Encodes without validating.
pub fn encode(trace: &Trace, format: TraceFormat) -> Result<Vec<u8>, FormatError> {
    match format {
        TraceFormat::Binary => encode_binary(trace),
        TraceFormat::JsonLines => encode_jsonl(trace),
    }
}

/// Reads and validates a trace.
pub fn read_trace<R: Read>(source: R, format: TraceFormat) -> Result<Trace, FormatError> {
    let trace = match format {
        TraceFormat::Binary => {
            let mut buf = Vec::new();
            let mut source = source;
            source.read_to_end(&mut buf)?;
            decode_binary(&buf)?
        }
        TraceFormat::JsonLines => decode_jsonl(BufReader::new(source))?,
    };
    trace.validated().map_err(FormatError::Invalid)
}

fn encode_binary(trace: &Trace) -> Result<Vec<u8>, FormatError> {
    let m = &trace.meta;
    let name = m.model_name.as_bytes();
    let name_len = u16::try_from(name.len()).map_err(|_| FormatError::NameTooLong(name.len()))?;
    let payload: usize = trace
        .steps
        .iter()
        .flat_map(|s| s.per_layer.iter())
        .map(|set| 4 + 4 * set.len())
        .sum();
    let mut out = Vec::with_capacity(FIXED_HEADER_LEN + name.len() + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [m.n_layers, m.top_k, m.prefill_len, m.n_steps, m.page_size_tokens, m.kv_token_bytes, m.tenant_id] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name);
    for step in &trace.steps {
        for set in &step.per_layer {
            out.extend_from_slice(&(set.len() as u32).to_le_bytes());
            for i in set.iter() {
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let avail = self.buf.len() - self.pos;
        if avail < n {
            return Err(FormatError::Truncated { offset: self.buf.len(), needed: n - avail });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes the binary format without validating trace invariants.
pub fn decode_binary(buf: &[u8]) -> Result<Trace, FormatError> {
    let mut c = Cursor { buf, pos: 0 };
    if buf.len() < 4 || buf[..4] != MAGIC {
        return Err(FormatError::BadMagic { found: buf[..buf.len().min(4)].to_vec() });
    }
    c.pos = 4;
    let version = c.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion { version, offset: 4 });
    }
    let mut f = [0u32; 7];
    for v in &mut f {
        *v = c.u32()?;
    }
    let name_len = c.u16()? as usize;
    let name_offset = c.pos;
    let model_name = std::str::from_utf8(c.take(name_len)?)
        .map_err(|_| FormatError::BadName { offset: name_offset })?
        .to_owned();
    let meta = TraceMeta {
        model_name,
        n_layers: f[0],
        top_k: f[1],
        prefill_len: f[2],
        n_steps: f[3],
        page_size_tokens: f[4],
        kv_token_bytes: f[5],
        tenant_id: f[6],
    };

    // Bound pre-allocation by what the buffer can actually hold.
    let remaining_words = (buf.len() - c.pos) / 4;
    let n_sets = (meta.n_steps as usize).saturating_mul(meta.n_layers as usize);
    if n_sets > remaining_words {
        // Every set needs at least its count word.
        return Err(FormatError::Truncated { offset: buf.len(), needed: (n_sets - remaining_words) * 4 });
    }
    let mut steps = Vec::with_capacity(meta.n_steps as usize);
    for t in 0..meta.n_steps {
        let mut per_layer = Vec::with_capacity(meta.n_layers as usize);
        for _ in 0..meta.n_layers {
            let count = c.u32()? as usize;
            let raw = c.take(count.checked_mul(4).ok_or(FormatError::Truncated { offset: buf.len(), needed: usize::MAX })?)?;
            let indices = raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
            per_layer.push(TopKSet::from_raw(indices));
        }
        steps.push(DecodeStep { t, per_layer });
    }
    if c.pos != buf.len() {
        return Err(FormatError::TrailingBytes { offset: c.pos, extra: buf.len() - c.pos });
    }
    Ok(Trace { meta, steps })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHeader {
    magic: String,
    version: u16,
    #[serde(flatten)]
    meta: TraceMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonStep {
    t: u32,
    layers: Vec<Vec<u32>>,
}

fn encode_jsonl(trace: &Trace) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    let header = JsonHeader { magic: "DSAT".into(), version: VERSION, meta: trace.meta.clone() };
    serde_json::to_writer(&mut out, &header).map_err(io::Error::from)?;
    out.push(b'\n');
    for step in &trace.steps {
        let line = JsonStep { t: step.t, layers: step.per_layer.iter().map(|s| s.as_slice().to_vec()).collect() };
        serde_json::to_writer(&mut out, &line).map_err(io::Error::from)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Decodes JSON lines without validating trace invariants.
pub fn decode_jsonl<R: BufRead>(source: R) -> Result<Trace, FormatError> {
    let mut lines = source.lines().enumerate().filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
    let (_, first) = lines.next().ok_or(FormatError::Json { line: 1, message: "missing header line".into() })?;
    let header: JsonHeader =
        serde_json::from_str(&first?).map_err(|e| FormatError::Json { line: 1, message: e.to_string() })?;
    if header.magic != "DSAT" {
        return Err(FormatError::BadMagic { found: header.magic.into_bytes() });
    }
    if header.version != VERSION {
        return Err(FormatError::UnsupportedVersion { version: header.version, offset: 0 });
    }
    let mut steps = Vec::new();
    for (i, line) in lines {
        let step: JsonStep =
            serde_json::from_str(&line?).map_err(|e| FormatError::Json { line: i + 1, message: e.to_string() })?;
        steps.push(DecodeStep { t: step.t, per_layer: step.layers.into_iter().map(TopKSet::from_raw).collect() });
    }
    // A short or long step list is a StepCount violation, left to validation.
    Ok(Trace { meta: header.meta, steps })
}
