//! Runtime-versus-length benchmarking of the full model forward, with an
//! instrumented-allocator proxy for peak memory and fitted log-log slopes.

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Instant;

use thiserror::Error;

use crate::model::{BlockKind, Model, ModelConfig};
use crate::montage::bundled;
use crate::probing::clean_mask;
use crate::ssm::SsdKernel;
use crate::tensor::Tensor;
use crate::Graph;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("need at least 5 repetitions, got {0}")]
    TooFewReps(usize),
    #[error("no lengths given")]
    NoLengths,
    #[error("no bundled montage with {0} channels")]
    Channels(usize),
    #[error("malformed report: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// counting allocator

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);
static INSTALLED: AtomicBool = AtomicBool::new(false);

/// A [`System`]-backed allocator that tracks live and peak heap bytes.
/// Install it in a binary with
/// `#[global_allocator] static A: CountingAlloc = CountingAlloc::new();`.
pub struct CountingAlloc;

impl CountingAlloc {
    pub const fn new() -> Self {
        CountingAlloc
    }
}

impl Default for CountingAlloc {
    fn default() -> Self {
        Self::new()
    }
}

fn track_alloc(size: usize) {
    INSTALLED.store(true, Ordering::Relaxed);
    let live = LIVE_BYTES.fetch_add(size, Ordering::Relaxed) + size;
    PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
}

// SAFETY: defers all allocation to `System`; the bookkeeping only touches
// atomics and never allocates.
unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            track_alloc(layout.size());
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE_BYTES.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            LIVE_BYTES.fetch_sub(layout.size(), Ordering::Relaxed);
            track_alloc(new_size);
        }
        p
    }
}

/// True once the counting allocator has served an allocation (i.e. it is the
/// installed global allocator of this binary). When false, `peak_bytes`
/// readings are reported as 0.
pub fn allocator_installed() -> bool {
    INSTALLED.load(Ordering::Relaxed)
}

/// Reset the peak-bytes watermark to the current live count.
pub fn reset_peak() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

pub fn peak_bytes() -> usize {
    if allocator_installed() {
        PEAK_BYTES.load(Ordering::Relaxed)
    } else {
        0
    }
}

pub fn live_bytes() -> usize {
    LIVE_BYTES.load(Ordering::Relaxed)
}

// ---------------------------------------------------------------------------
// configuration

/// What to time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    /// Default blocks with the linear-time scan kernel.
    Scan,
    /// Default blocks with the quadratic dual kernel.
    Quadratic,
    /// Convolutional blocks (scan kernel where state blocks remain).
    ConvOnly,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Scan, Variant::Quadratic, Variant::ConvOnly];

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "scan" => Some(Variant::Scan),
            "quadratic" => Some(Variant::Quadratic),
            "conv" => Some(Variant::ConvOnly),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Scan => "scan",
            Variant::Quadratic => "quadratic",
            Variant::ConvOnly => "conv",
        })
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub lengths: Vec<usize>,
    pub channels: usize,
    /// Timed repetitions per point; at least 5.
    pub reps: usize,
    /// Untimed warmup forwards per point.
    pub warmup: usize,
    /// Model used for timing (the montage is chosen by `channels`).
    pub model: ModelConfig,
    pub model_seed: u64,
    /// Peak-bytes budget; a point whose warmup exceeds it is recorded as an
    /// out-of-memory row instead of being timed.
    pub memory_budget_bytes: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: Variant::ALL.to_vec(),
            lengths: vec![200, 2000],
            channels: 22,
            reps: 5,
            warmup: 1,
            model: ModelConfig::default(),
            model_seed: 0,
            memory_budget_bytes: None,
        }
    }
}

// ---------------------------------------------------------------------------
// report

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub t: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub peak_bytes: usize,
    pub oom: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Fitted log(median time)-vs-log(T) slope per variant (non-OOM rows).
    pub slopes: BTreeMap<String, f64>,
    pub channels: usize,
}

/// Least-squares slope of y against x.
pub fn lsq_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    num / den
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

fn fit_slopes(rows: &[BenchRow]) -> BTreeMap<String, f64> {
    let mut slopes = BTreeMap::new();
    let variants: Vec<String> = {
        let mut v: Vec<String> = rows.iter().map(|r| r.variant.clone()).collect();
        v.sort();
        v.dedup();
        v
    };
    for v in variants {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for r in rows.iter().filter(|r| r.variant == v && !r.oom) {
            xs.push((r.t as f64).ln());
            ys.push(r.median_ms.ln());
        }
        if xs.len() >= 2 {
            slopes.insert(v, lsq_slope(&xs, &ys));
        }
    }
    slopes
}

/// Build the model for a variant: `ConvOnly` swaps the stage blocks for
/// convolutional ones, the other variants only change the kernel.
fn variant_model(cfg: &BenchConfig, variant: Variant) -> Model {
    let mut mc = cfg.model.clone();
    if variant == Variant::ConvOnly {
        mc.blocks = BlockKind::Conv;
    }
    Model::init(mc, cfg.model_seed)
}

fn variant_kernel(variant: Variant) -> SsdKernel {
    match variant {
        Variant::Quadratic => SsdKernel::Quadratic,
        _ => SsdKernel::Scan,
    }
}

/// Deterministic synthetic input: per-channel sinusoids with varied phase.
pub fn bench_input(channels: usize, t: usize) -> Tensor {
    let mut data = Vec::with_capacity(channels * t);
    for c in 0..channels {
        let f = 4.0 + c as f64;
        for ti in 0..t {
            data.push((2.0 * std::f64::consts::PI * f * ti as f64 / t as f64 + c as f64).sin());
        }
    }
    Tensor::new(&[1, channels, t], data)
}

/// Time the full forward for every (variant, length) pair.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    if cfg.reps < 5 {
        return Err(BenchError::TooFewReps(cfg.reps));
    }
    if cfg.lengths.is_empty() {
        return Err(BenchError::NoLengths);
    }
    let montage_in = bundled::by_name(&cfg.channels.to_string())
        .ok_or(BenchError::Channels(cfg.channels))?;
    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        let model = variant_model(cfg, variant);
        let kernel = variant_kernel(variant);
        for &t in &cfg.lengths {
            let x = bench_input(cfg.channels, t);
            let mask = [clean_mask(t)];
            let forward = || {
                let mut g = Graph::inference();
                let out = model.forward(&mut g, &x, &montage_in, &mask, kernel);
                g.value(out.recon).data()[0] // keep the result observable
            };

            reset_peak();
            let mut sink = 0.0;
            for _ in 0..cfg.warmup.max(1) {
                sink += forward();
            }
            std::hint::black_box(sink);
            let peak = peak_bytes();
            if let Some(budget) = cfg.memory_budget_bytes {
                if peak > budget {
                    rows.push(BenchRow {
                        variant: variant.to_string(),
                        t,
                        reps: 0,
                        median_ms: f64::NAN,
                        mean_ms: f64::NAN,
                        min_ms: f64::NAN,
                        peak_bytes: peak,
                        oom: true,
                    });
                    continue;
                }
            }

            let mut times = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps {
                let start = Instant::now();
                std::hint::black_box(forward());
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            times.sort_by(|a, b| a.partial_cmp(b).unwrap());
            rows.push(BenchRow {
                variant: variant.to_string(),
                t,
                reps: cfg.reps,
                median_ms: median(&times),
                mean_ms: times.iter().sum::<f64>() / times.len() as f64,
                min_ms: times[0],
                peak_bytes: peak,
                oom: false,
            });
        }
    }
    Ok(BenchReport {
        slopes: fit_slopes(&rows),
        rows,
        channels: cfg.channels,
    })
}

// ---------------------------------------------------------------------------
// emission

/// Write the CSV (one row per variant-length point) and return the
/// human-readable summary.
pub fn emit_report(report: &BenchReport, csv_path: &Path) -> Result<String, BenchError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(csv_path)?);
    writeln!(w, "variant,T,reps,median_ms,mean_ms,min_ms,peak_bytes,slope,oom")?;
    for r in &report.rows {
        let slope = report
            .slopes
            .get(&r.variant)
            .map(|s| format!("{s}"))
            .unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.variant, r.t, r.reps, r.median_ms, r.mean_ms, r.min_ms, r.peak_bytes, slope, r.oom
        )?;
    }
    drop(w);
    Ok(summary(report))
}

/// Human-readable summary: per-variant slope and the relative increase
/// (long - short) / short between the extreme lengths.
pub fn summary(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "benchmark: {} channels, forward pass\n",
        report.channels
    ));
    let mut variants: Vec<String> = report.rows.iter().map(|r| r.variant.clone()).collect();
    variants.sort();
    variants.dedup();
    for v in &variants {
        let rows: Vec<&BenchRow> = report
            .rows
            .iter()
            .filter(|r| r.variant == *v && !r.oom)
            .collect();
        let ooms = report
            .rows
            .iter()
            .filter(|r| r.variant == *v && r.oom)
            .count();
        let slope = report
            .slopes
            .get(v)
            .map(|s| format!("{s:.3}"))
            .unwrap_or_else(|| "n/a".into());
        out.push_str(&format!("{v}: slope {slope}"));
        if rows.len() >= 2 {
            let short = rows.iter().min_by_key(|r| r.t).unwrap();
            let long = rows.iter().max_by_key(|r| r.t).unwrap();
            let dt = 100.0 * (long.median_ms - short.median_ms) / short.median_ms;
            out.push_str(&format!(
                ", time T={} -> T={}: {:+.1}%",
                short.t, long.t, dt
            ));
            if short.peak_bytes > 0 {
                let dm = 100.0 * (long.peak_bytes as f64 - short.peak_bytes as f64)
                    / short.peak_bytes as f64;
                out.push_str(&format!(", peak bytes: {dm:+.1}%"));
            }
        }
        if ooms > 0 {
            out.push_str(&format!(", {ooms} OOM point(s)"));
        }
        out.push('\n');
    }
    out
}

/// Parse a CSV written by `emit_report` back into a report.
pub fn parse_report(text: &str) -> Result<BenchReport, BenchError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| BenchError::Parse("empty".into()))?;
    if header != "variant,T,reps,median_ms,mean_ms,min_ms,peak_bytes,slope,oom" {
        return Err(BenchError::Parse(format!("unexpected header: {header}")));
    }
    let mut rows = Vec::new();
    let mut slopes = BTreeMap::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(BenchError::Parse(format!("bad row: {line}")));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, BenchError> {
            if s.is_empty() {
                return Ok(f64::NAN);
            }
            s.parse()
                .map_err(|_| BenchError::Parse(format!("bad {what}: {s}")))
        };
        let row = BenchRow {
            variant: cells[0].to_string(),
            t: cells[1]
                .parse()
                .map_err(|_| BenchError::Parse(format!("bad T: {}", cells[1])))?,
            reps: cells[2]
                .parse()
                .map_err(|_| BenchError::Parse(format!("bad reps: {}", cells[2])))?,
            median_ms: parse_f(cells[3], "median")?,
            mean_ms: parse_f(cells[4], "mean")?,
            min_ms: parse_f(cells[5], "min")?,
            peak_bytes: cells[6]
                .parse()
                .map_err(|_| BenchError::Parse(format!("bad bytes: {}", cells[6])))?,
            oom: cells[8] == "true",
        };
        if !cells[7].is_empty() {
            slopes.insert(row.variant.clone(), parse_f(cells[7], "slope")?);
        }
        rows.push(row);
    }
    Ok(BenchReport {
        rows,
        slopes,
        channels: 0,
    })
}
