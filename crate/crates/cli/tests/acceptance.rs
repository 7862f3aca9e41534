//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
//! Runs as a plain binary (`harness = false`) and exits non-zero on any FAIL.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::*;
use dsakv::cache::{self, Access, CacheConfig, CacheKey, LruState};
use dsakv::format::encode;
use dsakv::metrics::*;
use dsakv::roofline::{min_devices, utilization, Assumptions, DecodeWorkload, GpuSpec};
use dsakv::synth::{generate_corpus, parse_gen_file};
use dsakv::{read_trace, validate_trace, Exec, FormatError, TraceFormat, ViolationKind};
use dsakv_cli::manifest::RunManifest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const METRICS_TRACES: usize = 200;
const METRICS_BUDGET: Duration = Duration::from_secs(10);

const LRU_WORKLOADS: usize = 100;
const LRU_MIN_ACCESSES: usize = 10_000;
const LRU_BUDGET: Duration = Duration::from_secs(30);

const MONO_WORKLOADS: u64 = 50;
const MONO_CAPACITIES: [u64; 12] = [0, 1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024];
const SWEEP_MB: [u64; 5] = [0, 5, 10, 15, 20];
/// Reference slowdowns at the sizes above, printed for shape comparison only.
const REFERENCE_SLOWDOWN: [f64; 5] = [1.87, 1.67, 1.5, 1.3, 1.15];

const CALIB_TRACES: usize = 50;
const CALIB_STEPS: u32 = 200;
const CALIB_TOLERANCE: f64 = 0.15;
const CALIB_BUDGET: Duration = Duration::from_secs(120);
const CALIB_TARGETS: [(Metric, f64); 5] = [
    (Metric::WorkingSet, 5.15),
    (Metric::Lookback, 3.29),
    (Metric::NewLookups, 0.55),
    (Metric::InterLayer, 0.36),
    (Metric::Persistence, 1.82),
];

const P95_FRACTION: f64 = 7.2;
const P95_TOP_K: u32 = 128;
const P95_ENTRIES: f64 = 922.0;

const FORMAT_CASES: usize = 1000;
const RERUNS: usize = 10;

const ROOFLINE_CASES: usize = 100;
const BW_FLOOR: f64 = 0.90;
const COMPUTE_CEILING: f64 = 0.05;
/// Relative slack for floating-point comparisons in the roofline properties.
const REL_EPS: f64 = 1e-9;
/// Reference 70B row (bandwidth, compute), printed alongside for comparison.
const REFERENCE_70B: (f64, f64) = (0.95, 0.013);

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    if elapsed <= budget {
        Ok(())
    } else {
        Err(format!("took {:.2}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()))
    }
}

fn metrics_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(0xAC1);
    let mut comparisons = 0usize;
    for i in 0..METRICS_TRACES {
        let t = random_trace(&mut r, &TINY);
        let window = r.random_range(1..=t.n_steps());
        let page = r.random_range(1..=6);
        if inter_layer_samples(&t) != inter_layer(&t) {
            return Err(format!("trace {i}: inter-layer overlap differs"));
        }
        for l in 0..t.n_layers() {
            let pairs: [(&str, Vec<f64>, Vec<f64>); 5] = [
                ("working set", working_set_samples(&t, l, window), working_set(&t, l, window)),
                ("persistence", sorted(persistence_samples(&t, l)), sorted(persistence(&t, l))),
                ("lookback", lookback_samples(&t, l), lookback(&t, l)),
                ("new lookups", new_lookup_samples(&t, l), new_lookups(&t, l)),
                ("page utilization", page_utilization_samples(&t, l, page), page_utilization(&t, l, page)),
            ];
            for (name, got, want) in pairs {
                if got != want {
                    return Err(format!("trace {i} layer {l}: {name} {got:?} != {want:?}"));
                }
            }
            comparisons += 5;
        }
        comparisons += 1;
    }
    let elapsed = start.elapsed();
    within(elapsed, METRICS_BUDGET)?;
    Ok(format!("{METRICS_TRACES} traces, {comparisons} exact comparisons, {:.2}s", elapsed.as_secs_f64()))
}

fn lru_oracle() -> Outcome {
    let start = Instant::now();
    let mut total = 0usize;
    for w in 0..LRU_WORKLOADS {
        let mut r = ChaCha8Rng::seed_from_u64(0x1A0 + w as u64);
        let capacity = 1 + w % 64;
        let span = (3 * capacity as u32).max(8);
        let (mut fast, mut slow) = (LruState::new(capacity), RefLru::new(capacity));
        let (mut got, mut want) = (Vec::with_capacity(LRU_MIN_ACCESSES), Vec::with_capacity(LRU_MIN_ACCESSES));
        for _ in 0..LRU_MIN_ACCESSES {
            let k = CacheKey::new(r.random_range(0..3), r.random_range(0..2), r.random_range(0..span));
            let hit = fast.access(k) == Access::Hit;
            got.push(hit);
            want.push(slow.access(k));
            if !hit {
                fast.insert([k]);
                slow.insert(&[k]);
            }
        }
        if got != want {
            let at = got.iter().zip(&want).position(|(a, b)| a != b).unwrap();
            return Err(format!("workload {w} (capacity {capacity}): hit/miss diverges at access {at}"));
        }
        if fast.iter_mru().collect::<Vec<_>>() != slow.order {
            return Err(format!("workload {w} (capacity {capacity}): final resident sets differ"));
        }
        total += got.len();
    }
    let elapsed = start.elapsed();
    within(elapsed, LRU_BUDGET)?;
    Ok(format!("{LRU_WORKLOADS} workloads, {total} accesses, capacities 1-64, {:.2}s", elapsed.as_secs_f64()))
}

fn load_gen(name: &str) -> (dsakv::synth::GenConfig, dsakv::synth::IndexerParams) {
    let text = std::fs::read_to_string(repo_root().join("configs").join(name)).expect("shipped config");
    parse_gen_file(&text).expect("shipped config parses")
}

fn load_cache(name: &str) -> CacheConfig {
    let text = std::fs::read_to_string(repo_root().join("configs").join(name)).expect("shipped config");
    CacheConfig::from_kv(&text).expect("shipped config parses")
}

/// Returns the outcome plus the sweep slowdowns for the shape line.
fn capacity_monotonicity() -> (Outcome, Vec<f64>) {
    const SMALL: Limits = Limits { max_layers: 3, max_k: 12, max_prefill: 48, max_steps: 24 };
    for w in 0..MONO_WORKLOADS {
        let mut r = ChaCha8Rng::seed_from_u64(0x30 + w);
        let tenants = r.random_range(1..4);
        let traces = random_batch(&mut r, tenants, &SMALL);
        let cfg = CacheConfig {
            kv_token_bytes: 64,
            page_size_tokens: traces[0].meta.page_size_tokens,
            layers_per_device: traces[0].meta.n_layers,
            batch_size: traces.len() as u32,
            ..CacheConfig::default()
        };
        let bytes: Vec<u64> = MONO_CAPACITIES.iter().map(|c| c * 64).collect();
        let rows = cache::sweep(&traces, &cfg, &bytes).expect("sweep");
        if let Some(p) = rows.windows(2).position(|p| p[1].missed_tokens > p[0].missed_tokens) {
            return (
                Err(format!("workload {w}: misses rise from {} to {} tokens of capacity", MONO_CAPACITIES[p], MONO_CAPACITIES[p + 1])),
                vec![],
            );
        }
    }

    let (mut gen, params) = load_gen("llama70b_tenant.conf");
    let cache_cfg = load_cache("llama70b_cache.conf");
    gen.seed = 1000;
    let traces = generate_corpus(&gen, &params, cache_cfg.batch_size as usize, Exec::Parallel).expect("corpus");
    let sizes: Vec<u64> = SWEEP_MB.iter().map(|mb| mb << 20).collect();
    let rows = cache::sweep(&traces, &cache_cfg, &sizes).expect("sweep");
    let slowdowns: Vec<f64> = rows.iter().map(|r| r.slowdown).collect();
    let ok = slowdowns.windows(2).all(|p| p[1] <= p[0]);
    let detail = format!(
        "{MONO_WORKLOADS} workloads monotone over {} capacities; 70B sweep slowdown {}",
        MONO_CAPACITIES.len(),
        fmt_list(&slowdowns)
    );
    (check(ok, detail), slowdowns)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn calibration() -> Outcome {
    let start = Instant::now();
    let (mut gen, params) = load_gen("calibrated.conf");
    gen.n_steps = CALIB_STEPS;
    let traces = generate_corpus(&gen, &params, CALIB_TRACES, Exec::Parallel).map_err(|e| e.to_string())?;
    let report = build_report(&traces, &AnalysisConfig::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let mut parts = Vec::new();
    let mut ok = true;
    for (m, target) in CALIB_TARGETS {
        let mean = report.stats(m).map(|s| s.mean).unwrap_or(f64::NAN);
        let rel = (mean - target) / target;
        ok &= rel.abs() <= CALIB_TOLERANCE;
        parts.push(format!("{} {mean:.3} vs {target} ({:+.1}%)", m.name(), 100.0 * rel));
    }
    within(elapsed, CALIB_BUDGET)?;
    check(ok, format!("{} ; {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

fn p95_arithmetic() -> Outcome {
    // A working-set sample whose 95th percentile is exactly the reference fraction.
    let samples: Vec<f64> = (0..100).map(|i| if i < 95 { P95_FRACTION } else { P95_FRACTION + 1.0 }).collect();
    let p95 = summarize(&samples).ok_or("no samples")?.p95;
    let entries = (p95 * f64::from(P95_TOP_K)).round();
    check(entries == P95_ENTRIES, format!("{p95} x {P95_TOP_K} = {:.1}, rounds to {entries}", p95 * f64::from(P95_TOP_K)))
}

fn trace_format() -> Outcome {
    const MEDIUM: Limits = Limits { max_layers: 4, max_k: 16, max_prefill: 40, max_steps: 12 };
    let mut r = ChaCha8Rng::seed_from_u64(0xF0);
    for i in 0..FORMAT_CASES {
        let t = random_trace(&mut r, &MEDIUM);
        for f in [TraceFormat::Binary, TraceFormat::JsonLines] {
            let bytes = encode(&t, f).map_err(|e| format!("case {i}: {e}"))?;
            let back = read_trace(bytes.as_slice(), f).map_err(|e| format!("case {i} {f:?}: {e}"))?;
            if back != t || encode(&back, f).map_err(|e| e.to_string())? != bytes {
                return Err(format!("case {i}: {f:?} round trip is not bit-identical"));
            }
        }
    }

    let mut per_kind = [0usize; MUTATIONS.len()];
    let mut rejected = 0;
    while rejected < FORMAT_CASES {
        let which = rejected % MUTATIONS.len();
        let (kind, binary_ok) = MUTATIONS[which];
        let t = random_trace(&mut r, &MEDIUM);
        let Some(bad) = mutate(&t, kind, &mut r) else { continue };
        let classes: Vec<ViolationKind> = validate_trace(&bad).kinds().collect();
        if classes.is_empty() || classes.iter().any(|k| *k != kind) {
            return Err(format!("{kind:?} mutation classified as {classes:?}"));
        }
        // `encode` serializes without validating, so the reader sees the damage.
        let json = encode(&bad, TraceFormat::JsonLines).map_err(|e| e.to_string())?;
        match read_trace(json.as_slice(), TraceFormat::JsonLines) {
            Err(FormatError::Invalid(rep)) if rep.has(kind) => {}
            other => return Err(format!("jsonl reader on {kind:?}: {:?}", other.map(|_| ()))),
        }
        if binary_ok {
            match read_trace(encode(&bad, TraceFormat::Binary).map_err(|e| e.to_string())?.as_slice(), TraceFormat::Binary) {
                Err(FormatError::Invalid(rep)) if rep.has(kind) => {}
                other => return Err(format!("binary reader on {kind:?}: {:?}", other.map(|_| ()))),
            }
        }
        per_kind[which] += 1;
        rejected += 1;
    }
    let counts: Vec<String> = MUTATIONS.iter().zip(per_kind).map(|((k, _), n)| format!("{k:?} {n}")).collect();
    Ok(format!("{FORMAT_CASES} round trips x 2 formats; {rejected} mutants rejected by class ({})", counts.join(", ")))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let mut r = ChaCha8Rng::seed_from_u64(0xDE7);
    let gen_conf = repo_root().join("configs/calibrated.conf");
    let mut manifests = Vec::new();
    for i in 0..RERUNS / 2 {
        let gen_out = dir.join(format!("gen{i}"));
        let seed = r.random_range(0..u64::from(u32::MAX)).to_string();
        let count = r.random_range(1..=4usize);
        let layers = r.random_range(1..=4u32);
        let (format, ext) = if r.random_bool(0.5) { ("binary", "dsat") } else { ("jsonl", "jsonl") };
        let args = [
            "generate", "--config", &gen_conf.display().to_string(), "--seed", &seed, "--count", &count.to_string(),
            "--layers", &layers.to_string(), "--trace-format", format, "--out", &gen_out.display().to_string(),
        ];
        dsakv_cli::run(&args).map_err(|e| format!("generate: {e}"))?;
        manifests.push(gen_out.join("manifest.json"));

        let sim_out = dir.join(format!("sim{i}"));
        let reserved = format!("{}KB", r.random_range(0..=4096u32));
        let conc = r.random_range(1..=16u32).to_string();
        let cache = dir.join(format!("cache{i}.conf"));
        std::fs::write(&cache, format!("miss_concurrency = {conc}\npage_size_tokens = {}\n", [8, 16, 32][i % 3]))
            .map_err(|e| e.to_string())?;
        let args = [
            "simulate".to_owned(), format!("{}/*.{ext}", gen_out.display()), "--config".into(), cache.display().to_string(),
            "--reserved".into(), reserved, "--layers".into(), layers.to_string(), "--batch".into(), count.to_string(),
            "--out".into(), sim_out.display().to_string(),
        ];
        dsakv_cli::run(&args).map_err(|e| format!("simulate: {e}"))?;
        manifests.push(sim_out.join("manifest.json"));
    }
    let mut files = 0;
    for (i, m) in manifests.iter().enumerate() {
        let original = RunManifest::load(m).map_err(|e| e.to_string())?;
        let replay = dir.join(format!("replay{i}"));
        dsakv_cli::run(&["rerun", &m.display().to_string(), "--out", &replay.display().to_string()])
            .map_err(|e| format!("{}: {e}", m.display()))?;
        for o in &original.outputs {
            let a = std::fs::read(m.parent().unwrap().join(&o.path)).map_err(|e| e.to_string())?;
            let b = std::fs::read(replay.join(&o.path)).map_err(|e| e.to_string())?;
            if a != b {
                return Err(format!("{}: {} differs on rerun", m.display(), o.path));
            }
            files += 1;
        }
    }
    Ok(format!("{} manifests (generate and simulate) rerun, {files} files byte-identical", manifests.len()))
}

fn random_workload<R: Rng>(r: &mut R) -> (DecodeWorkload, GpuSpec) {
    let w = DecodeWorkload {
        tokens_per_second_per_user: r.random_range(1.0..500.0),
        batch_size: r.random_range(1.0..64.0),
        context_tokens: r.random_range(1.0..1e6),
        bytes_per_token: 10f64.powf(r.random_range(6.0..12.0)),
        flops_per_token: 10f64.powf(r.random_range(8.0..13.0)),
    };
    let g = GpuSpec {
        hbm_bandwidth: 10f64.powf(r.random_range(11.0..13.0)),
        peak_compute: 10f64.powf(r.random_range(13.0..16.0)),
        ll_cache_bytes: 5e7,
    };
    (w, g)
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= REL_EPS * a.abs().max(b.abs())
}

fn roofline() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(0x200F);
    for i in 0..ROOFLINE_CASES {
        let (w, g) = random_workload(&mut r);
        let (bw, c) = utilization(&w, &g).map_err(|e| e.to_string())?;
        let s = r.random_range(0.1..10.0);
        // Scaling demand and capability together leaves utilization unchanged.
        let scaled_w = DecodeWorkload { bytes_per_token: w.bytes_per_token * s, flops_per_token: w.flops_per_token * s, ..w };
        let scaled_g = GpuSpec { hbm_bandwidth: g.hbm_bandwidth * s, peak_compute: g.peak_compute * s, ..g };
        let (bw2, c2) = utilization(&scaled_w, &scaled_g).map_err(|e| e.to_string())?;
        if !close(bw, bw2) || !close(c, c2) {
            return Err(format!("case {i}: scale invariance broken"));
        }
        // More traffic per token never lowers utilization; more devices never raise it.
        let heavier = DecodeWorkload { bytes_per_token: w.bytes_per_token * (1.0 + s), ..w };
        if utilization(&heavier, &g).unwrap().0 < bw {
            return Err(format!("case {i}: bandwidth utilization fell with more bytes"));
        }
        let n = r.random_range(1..64u32);
        let (a, b) = (utilization(&w.sharded(n), &g).unwrap(), utilization(&w.sharded(n + 1), &g).unwrap());
        if b.0 > a.0 || b.1 > a.1 {
            return Err(format!("case {i}: utilization rose from {n} to {} devices", n + 1));
        }
        if let Ok(d) = min_devices(&w, &g, 0.95) {
            let (x, y) = utilization(&w.sharded(d), &g).unwrap();
            if x > 0.95 || y > 0.95 {
                return Err(format!("case {i}: {d} devices still over the cap"));
            }
        }
    }
    let path = repo_root().join("configs/roofline/llama31_70b.conf");
    let text = std::fs::read_to_string(&path).map_err(|e| e.to_string())?;
    let row = Assumptions::from_kv(&text).and_then(|a| a.row()).map_err(|e| e.to_string())?;
    let ok = row.bw_utilization > BW_FLOOR && row.compute_utilization < COMPUTE_CEILING;
    check(
        ok,
        format!(
            "{ROOFLINE_CASES} random inputs hold; 70B: {} devices, {:.1}% bw (> {:.0}%), {:.2}% compute (< {:.0}%); reference {:.0}% / {:.1}%",
            row.n_devices,
            100.0 * row.bw_utilization,
            100.0 * BW_FLOOR,
            100.0 * row.compute_utilization,
            100.0 * COMPUTE_CEILING,
            100.0 * REFERENCE_70B.0,
            100.0 * REFERENCE_70B.1
        ),
    )
}

fn report(name: &str, outcome: &Outcome) -> bool {
    match outcome {
        Ok(d) => println!("[PASS] {name}: {d}"),
        Err(d) => println!("[FAIL] {name}: {d}"),
    }
    outcome.is_ok()
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; only `--list` matters.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    all &= report("metrics oracle equivalence", &metrics_oracle());
    all &= report("LRU oracle equivalence", &lru_oracle());
    let (mono, slowdowns) = capacity_monotonicity();
    all &= report("capacity monotonicity", &mono);
    if !slowdowns.is_empty() {
        let strict = slowdowns.windows(2).all(|p| p[1] < p[0]);
        println!(
            "[INFO] sweep shape at {:?} MB: {} (reference {}); strictly decreasing: {}",
            SWEEP_MB,
            fmt_list(&slowdowns),
            fmt_list(&REFERENCE_SLOWDOWN),
            if strict { "yes" } else { "no, see README on LRU thrashing" }
        );
    }
    all &= report("calibration against access statistics", &calibration());
    all &= report("P95 working-set arithmetic", &p95_arithmetic());
    all &= report("trace format round trip and rejection", &trace_format());
    all &= report("manifest rerun determinism", &determinism());
    all &= report("roofline properties and 70B pattern", &roofline());
    if !all {
        std::process::exit(1);
    }
}
