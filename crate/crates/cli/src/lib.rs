//! Batch driver behind the `dsakv` binary.
//!
//! Every command that produces files writes them atomically into `--out`
//! together with a `manifest.json` recording the arguments, the full text of
//! each config file, input hashes and output hashes. `dsakv rerun` replays a
//! manifest and checks that every output is reproduced byte for byte.

pub mod error;
pub mod files;
pub mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dsakv::cache::{self, parse_byte_size, CacheConfig, SimError};
use dsakv::format::encode;
use dsakv::metrics::{build_report, histogram_svg, AnalysisConfig, Metric, MetricsError};
use dsakv::roofline::{rows_csv, rows_json, Assumptions, RooflineError};
use dsakv::synth::{generate_corpus, parse_gen_file, GenConfig, IndexerParams, SynthError};
use dsakv::{Exec, Trace, TraceFormat};

pub use error::{CliError, Result};
use files::{expand_inputs, load_trace, sha256_hex, LoadedTrace, OutputSet};
use manifest::{ConfigRecord, FileRecord, RunManifest, MANIFEST_NAME};

#[derive(Debug, Clone, Parser)]
#[command(name = "dsakv", version, about = "KV-cache access traces for dynamic sparse attention: generate, analyze, simulate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate synthetic top-k traces from a generator config.
    Generate(GenerateArgs),
    /// Compute access-pattern statistics over a set of traces.
    Analyze(AnalyzeArgs),
    /// Replay a batch of traces (one per tenant) through the reserved cache.
    Simulate(SimArgs),
    /// Run the cache simulation once per reserved size.
    Sweep(SimArgs),
    /// Bandwidth/compute utilization and device counts from assumption files.
    Roofline(RooflineArgs),
    /// Check trace files and report every broken invariant.
    Validate(ValidateArgs),
    /// Repeat a recorded run and verify its outputs are byte-identical.
    Rerun(RerunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutFormat {
    Json,
    Csv,
    Svg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraceFormatArg {
    Binary,
    Jsonl,
}

impl From<TraceFormatArg> for TraceFormat {
    fn from(f: TraceFormatArg) -> Self {
        match f {
            TraceFormatArg::Binary => TraceFormat::Binary,
            TraceFormatArg::Jsonl => TraceFormat::JsonLines,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Generator config (key = value). Defaults to the built-in calibration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of traces; trace i uses seed + i.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub layers: Option<u32>,
    #[arg(long, value_enum, default_value_t = TraceFormatArg::Binary)]
    pub trace_format: TraceFormatArg,
}

#[derive(Debug, Clone, Args)]
pub struct AnalyzeArgs {
    /// Trace files or glob patterns.
    #[arg(required = true)]
    pub traces: Vec<String>,
    /// Analysis config (key = value).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [OutFormat::Json, OutFormat::Csv])]
    pub format: Vec<OutFormat>,
    /// Working-set window in steps.
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub page_size: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    /// Trace files or glob patterns, one trace per tenant.
    #[arg(required = true)]
    pub traces: Vec<String>,
    /// Cache config (key = value).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub format: Vec<OutFormat>,
    /// Reserved sizes, comma separated, with optional KB/MB/GB suffix.
    #[arg(long)]
    pub reserved: Option<String>,
    #[arg(long)]
    pub layers: Option<u32>,
    #[arg(long)]
    pub batch: Option<u32>,
    #[arg(long)]
    pub miss_latency_ns: Option<f64>,
    /// HBM bandwidth in bytes per second.
    #[arg(long)]
    pub bandwidth: Option<f64>,
    #[arg(long)]
    pub page_size: Option<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct RooflineArgs {
    /// Assumption files, one backbone each.
    #[arg(required = true)]
    pub assumptions: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [OutFormat::Csv, OutFormat::Json])]
    pub format: Vec<OutFormat>,
    #[arg(long)]
    pub batch: Option<f64>,
    /// HBM bandwidth in bytes per second.
    #[arg(long)]
    pub bandwidth: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ValidateArgs {
    #[arg(required = true)]
    pub traces: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
    /// Where to write the reproduced outputs (default: a fresh temporary directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// What a successful command reports.
#[derive(Debug)]
pub struct Outcome {
    pub message: String,
    pub manifest: Option<RunManifest>,
}

/// Collects what goes into the manifest. During a rerun, `recorded` supplies
/// config text in place of reading the files again.
#[derive(Debug, Default)]
struct Recorder {
    recorded: Vec<ConfigRecord>,
    configs: Vec<ConfigRecord>,
    seeds: Vec<u64>,
    inputs: Vec<FileRecord>,
}

impl Recorder {
    fn config(&mut self, path: &Path) -> Result<String> {
        let key = path.display().to_string();
        let text = match self.recorded.iter().find(|c| c.path == key) {
            Some(c) => c.text.clone(),
            None => files::read_text(path)?,
        };
        self.configs.push(ConfigRecord { path: key, sha256: sha256_hex(text.as_bytes()), text: text.clone() });
        Ok(text)
    }

    fn traces(&mut self, patterns: &[String]) -> Result<Vec<Trace>> {
        let loaded: Vec<LoadedTrace> = expand_inputs(patterns)?.iter().map(|p| load_trace(p)).collect::<Result<_>>()?;
        log::info!("loaded {} trace(s)", loaded.len());
        self.inputs.extend(loaded.iter().map(|l| FileRecord {
            path: l.path.display().to_string(),
            sha256: l.sha256.clone(),
            bytes: std::fs::metadata(&l.path).map(|m| m.len()).unwrap_or(0),
        }));
        Ok(loaded.into_iter().map(|l| l.trace).collect())
    }
}

/// Parses and runs one command line (without the program name).
pub fn run<S: AsRef<str>>(args: &[S]) -> Result<Outcome> {
    let args: Vec<String> = args.iter().map(|s| s.as_ref().to_owned()).collect();
    let cli = Cli::try_parse_from(std::iter::once("dsakv".to_owned()).chain(args.iter().cloned()))
        .map_err(|e| CliError::Usage(e.to_string()))?;
    execute(cli, args, Recorder::default())
}

fn execute(cli: Cli, args: Vec<String>, mut rec: Recorder) -> Result<Outcome> {
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let clock = Instant::now();
    let (name, out) = match &cli.command {
        Command::Generate(a) => ("generate", cmd_generate(a, &mut rec)?),
        Command::Analyze(a) => ("analyze", cmd_analyze(a, &mut rec)?),
        Command::Simulate(a) => ("simulate", cmd_simulate(a, &mut rec)?),
        Command::Sweep(a) => ("sweep", cmd_sweep(a, &mut rec)?),
        Command::Roofline(a) => ("roofline", cmd_roofline(a, &mut rec)?),
        Command::Validate(a) => return cmd_validate(a),
        Command::Rerun(a) => return cmd_rerun(a),
    };
    let manifest = RunManifest {
        tool: "dsakv".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: name.into(),
        args,
        configs: rec.configs,
        seeds: rec.seeds,
        inputs: rec.inputs,
        outputs: out.files.clone(),
        output_dir: out.dir.display().to_string(),
        started_unix_ms: started,
        wall_clock_ms: clock.elapsed().as_millis(),
    };
    files::write_atomic(&out.dir.join(MANIFEST_NAME), manifest.to_json().as_bytes())?;
    let message = format!("{name}: wrote {} file(s) and {} to {}", out.files.len(), MANIFEST_NAME, out.dir.display());
    Ok(Outcome { message, manifest: Some(manifest) })
}

fn synth_error(path: Option<&Path>, e: SynthError) -> CliError {
    match (&e, path) {
        (SynthError::Kv(kv), Some(p)) => CliError::config(p, &e, Some(kv)),
        _ => CliError::semantic(e),
    }
}

fn cmd_generate(a: &GenerateArgs, rec: &mut Recorder) -> Result<OutputSet> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let (mut cfg, params) = match &a.config {
        Some(p) => parse_gen_file(&rec.config(p)?).map_err(|e| synth_error(Some(p), e))?,
        None => (GenConfig::default(), IndexerParams::default()),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(l) = a.layers {
        cfg.n_layers = l;
    }
    let traces = generate_corpus(&cfg, &params, a.count, Exec::Parallel).map_err(|e| synth_error(None, e))?;
    let format = TraceFormat::from(a.trace_format);
    let mut out = OutputSet::new(&a.out)?;
    for (i, t) in traces.iter().enumerate() {
        let bytes = encode(t, format).map_err(CliError::semantic)?;
        out.write(&format!("trace_{i:04}.{}", format.extension()), &bytes)?;
        rec.seeds.push(cfg.seed.wrapping_add(i as u64));
    }
    Ok(out)
}

fn metrics_error(e: MetricsError, path: Option<&Path>) -> CliError {
    match (&e, path) {
        (MetricsError::Kv(kv), Some(p)) => CliError::config(p, &e, Some(kv)),
        _ => CliError::semantic(e),
    }
}

fn cmd_analyze(a: &AnalyzeArgs, rec: &mut Recorder) -> Result<OutputSet> {
    let mut cfg = match &a.config {
        Some(p) => AnalysisConfig::from_kv(&rec.config(p)?).map_err(|e| metrics_error(e, Some(p)))?,
        None => AnalysisConfig::default(),
    };
    if let Some(w) = a.window {
        cfg.window = w;
    }
    if let Some(p) = a.page_size {
        cfg.page_size_tokens = Some(p);
    }
    let traces = rec.traces(&a.traces)?;
    let report = build_report(&traces, &cfg).map_err(|e| metrics_error(e, None))?;
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let mut out = OutputSet::new(&a.out)?;
    for f in dedup(&a.format) {
        match f {
            OutFormat::Json => out.write("report.json", report.to_json().as_bytes())?,
            OutFormat::Csv => {
                out.write("report.csv", report.to_csv().as_bytes())?;
                out.write("per_layer.csv", report.per_layer_csv().as_bytes())?;
            }
            OutFormat::Svg => {
                for m in Metric::ALL {
                    if let Some(h) = &report.metric(m).histogram {
                        out.write(&format!("hist_{}.svg", m.name()), histogram_svg(m.name(), m.unit(), h).as_bytes())?;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn dedup(formats: &[OutFormat]) -> Vec<OutFormat> {
    let mut v: Vec<OutFormat> = Vec::new();
    for f in formats {
        if !v.contains(f) {
            v.push(*f);
        }
    }
    v
}

fn sim_error(e: SimError, path: Option<&Path>) -> CliError {
    match (&e, path) {
        (SimError::Kv(kv), Some(p)) => CliError::config(p, &e, Some(kv)),
        _ => CliError::semantic(e),
    }
}

fn parse_reserved(list: &str) -> Result<Vec<u64>> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(|s| parse_byte_size(s).map_err(CliError::Usage)).collect()
}

/// Cache config from file and flags, plus the explicit reserved list if given.
fn cache_setup(a: &SimArgs, rec: &mut Recorder) -> Result<(CacheConfig, Option<Vec<u64>>)> {
    let mut cfg = match &a.config {
        Some(p) => CacheConfig::from_kv(&rec.config(p)?).map_err(|e| sim_error(e, Some(p)))?,
        None => CacheConfig::default(),
    };
    if let Some(v) = a.layers {
        cfg.layers_per_device = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.miss_latency_ns {
        cfg.miss_latency_ns = v;
    }
    if let Some(v) = a.bandwidth {
        cfg.hbm_bandwidth = v;
    }
    if let Some(v) = a.page_size {
        cfg.page_size_tokens = v;
    }
    let reserved = a.reserved.as_deref().map(parse_reserved).transpose()?;
    if reserved.as_ref().is_some_and(|r| r.is_empty()) {
        return Err(CliError::Usage("--reserved lists no sizes".into()));
    }
    cfg.validate().map_err(|e| sim_error(e, None))?;
    Ok((cfg, reserved))
}

fn cmd_simulate(a: &SimArgs, rec: &mut Recorder) -> Result<OutputSet> {
    let (mut cfg, reserved) = cache_setup(a, rec)?;
    match reserved.as_deref() {
        Some([one]) => cfg.reserved_bytes = *one,
        Some(_) => return Err(CliError::Usage("simulate takes one reserved size; use sweep for a list".into())),
        None => {}
    }
    let traces = rec.traces(&a.traces)?;
    let r = cache::simulate(&traces, &cfg).map_err(|e| sim_error(e, None))?;
    let mut out = OutputSet::new(&a.out)?;
    let formats = if a.format.is_empty() { vec![OutFormat::Json, OutFormat::Csv] } else { dedup(&a.format) };
    for f in formats {
        match f {
            OutFormat::Json => out.write("sim.json", r.to_json().as_bytes())?,
            OutFormat::Csv => {
                let mut csv = String::from("t,hits,missed_tokens,missed_pages,transfer_ns,latency_ns,step_time_ns,ideal_time_ns\n");
                for s in &r.steps {
                    writeln!(
                        csv,
                        "{},{},{},{},{},{},{},{}",
                        s.t, s.hits, s.missed_tokens, s.missed_pages, s.transfer_ns, s.latency_ns, s.step_time_ns, s.ideal_time_ns
                    )
                    .unwrap();
                }
                out.write("steps.csv", csv.as_bytes())?;
            }
            OutFormat::Svg => return Err(CliError::Usage("simulate has no SVG output".into())),
        }
    }
    Ok(out)
}

fn cmd_sweep(a: &SimArgs, rec: &mut Recorder) -> Result<OutputSet> {
    let (cfg, reserved) = cache_setup(a, rec)?;
    let reserved = reserved.unwrap_or_else(|| vec![cfg.reserved_bytes]);
    let traces = rec.traces(&a.traces)?;
    let rows = cache::sweep(&traces, &cfg, &reserved).map_err(|e| sim_error(e, None))?;
    let mut out = OutputSet::new(&a.out)?;
    let formats = if a.format.is_empty() { vec![OutFormat::Csv, OutFormat::Json] } else { dedup(&a.format) };
    for f in formats {
        match f {
            OutFormat::Json => out.write("sweep.json", cache::sweep_json(&rows).as_bytes())?,
            OutFormat::Csv => out.write("sweep.csv", cache::sweep_csv(&rows).as_bytes())?,
            OutFormat::Svg => return Err(CliError::Usage("sweep has no SVG output".into())),
        }
    }
    Ok(out)
}

fn roofline_error(e: RooflineError, path: &Path) -> CliError {
    match &e {
        RooflineError::Kv(kv) => CliError::config(path, &e, Some(kv)),
        _ => CliError::semantic(format!("{}: {e}", path.display())),
    }
}

fn cmd_roofline(a: &RooflineArgs, rec: &mut Recorder) -> Result<OutputSet> {
    let mut rows = Vec::new();
    for p in &a.assumptions {
        let mut asm = Assumptions::from_kv(&rec.config(p)?).map_err(|e| roofline_error(e, p))?;
        if let Some(b) = a.batch {
            asm.workload.batch_size = b;
        }
        if let Some(bw) = a.bandwidth {
            asm.gpu.hbm_bandwidth = bw;
        }
        rows.push(asm.row().map_err(|e| roofline_error(e, p))?);
    }
    let mut out = OutputSet::new(&a.out)?;
    for f in dedup(&a.format) {
        match f {
            OutFormat::Json => out.write("roofline.json", rows_json(&rows).as_bytes())?,
            OutFormat::Csv => out.write("roofline.csv", rows_csv(&rows).as_bytes())?,
            OutFormat::Svg => return Err(CliError::Usage("roofline has no SVG output".into())),
        }
    }
    Ok(out)
}

fn cmd_validate(a: &ValidateArgs) -> Result<Outcome> {
    let paths = expand_inputs(&a.traces)?;
    let mut message = String::new();
    let mut first_error = None;
    for p in &paths {
        match load_trace(p) {
            Ok(l) => writeln!(
                message,
                "ok    {} ({} steps, {} layers, k={})",
                p.display(),
                l.trace.n_steps(),
                l.trace.n_layers(),
                l.trace.top_k()
            )
            .unwrap(),
            Err(e) => {
                writeln!(message, "FAIL  {e}").unwrap();
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        None => Ok(Outcome { message: message.trim_end().to_owned(), manifest: None }),
        Some(_) => {
            print!("{message}");
            Err(CliError::format(
                PathBuf::from(format!("{} file(s)", paths.len())),
                "one or more traces failed validation",
            ))
        }
    }
}

fn cmd_rerun(a: &RerunArgs) -> Result<Outcome> {
    let original = RunManifest::load(&a.manifest)?;
    let mut cli = Cli::try_parse_from(std::iter::once("dsakv".to_owned()).chain(original.args.iter().cloned()))
        .map_err(|e| CliError::format(&a.manifest, format!("recorded arguments no longer parse: {e}")))?;
    let (_tmp, out_dir) = match &a.out {
        Some(d) => (None, d.clone()),
        None => {
            let t = tempfile::tempdir().map_err(|e| CliError::io(std::env::temp_dir(), e))?;
            let p = t.path().to_owned();
            (Some(t), p)
        }
    };
    match &mut cli.command {
        Command::Generate(x) => x.out = out_dir.clone(),
        Command::Analyze(x) => x.out = out_dir.clone(),
        Command::Simulate(x) | Command::Sweep(x) => x.out = out_dir.clone(),
        Command::Roofline(x) => x.out = out_dir.clone(),
        Command::Validate(_) | Command::Rerun(_) => {
            return Err(CliError::format(&a.manifest, "manifest does not describe a rerunnable command"))
        }
    }
    let rec = Recorder { recorded: original.configs.clone(), ..Recorder::default() };
    let replay = execute(cli, original.args.clone(), rec)?.manifest.expect("file-producing command");

    if replay.inputs != original.inputs {
        return Err(CliError::semantic(format!(
            "inputs changed since the recorded run ({} recorded, {} found or differing)",
            original.inputs.len(),
            replay.inputs.len()
        )));
    }
    let differing: Vec<&str> = original
        .outputs
        .iter()
        .filter(|o| !replay.outputs.contains(o))
        .map(|o| o.path.as_str())
        .chain(replay.outputs.iter().filter(|o| !original.outputs.iter().any(|x| x.path == o.path)).map(|o| o.path.as_str()))
        .collect();
    if !differing.is_empty() {
        return Err(CliError::semantic(format!("rerun differs in: {}", differing.join(", "))));
    }
    Ok(Outcome {
        message: format!(
            "rerun of '{}' reproduced {} output(s) byte-identically{}",
            original.command,
            replay.outputs.len(),
            match &a.out {
                Some(d) => format!(" in {}", d.display()),
                None => String::new(),
            }
        ),
        manifest: Some(replay),
    })
}
