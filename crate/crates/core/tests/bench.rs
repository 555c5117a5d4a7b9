//! Benchmark-harness tests: slope criteria measured on the real forward pass,
//! allocator accounting, report round-trips, and error paths.

use samba_core::bench::*;
use samba_core::model::{Model, ModelConfig};
use samba_core::montage::bundled;
use samba_core::probing::clean_mask;
use samba_core::ssm::SsdKernel;
use samba_core::{Graph, Tensor};

// Install the counting allocator so peak-bytes readings are live in this
// binary.
#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc::new();

/// Reduced model so the quadratic sweep up to T = 4096 stays affordable; the
/// asymptotics under test do not depend on the channel widths.
fn small_model() -> ModelConfig {
    ModelConfig {
        d1: 8,
        d2: 16,
        d3: 32,
        saie_hidden: 16,
        kernels: (3, 7, 15),
        heads: 2,
        ..ModelConfig::default()
    }
}

#[test]
fn default_config_covers_the_reference_lengths() {
    let cfg = BenchConfig::default();
    assert!(cfg.lengths.contains(&200));
    assert!(cfg.lengths.contains(&2000));
    assert_eq!(cfg.channels, 22);
    assert!(cfg.reps >= 5);
}

#[test]
fn fewer_than_five_reps_is_rejected() {
    let cfg = BenchConfig {
        reps: 4,
        ..BenchConfig::default()
    };
    assert!(matches!(run_bench(&cfg), Err(BenchError::TooFewReps(4))));
    let cfg = BenchConfig {
        lengths: vec![],
        ..BenchConfig::default()
    };
    assert!(matches!(run_bench(&cfg), Err(BenchError::NoLengths)));
}

#[test]
fn least_squares_slope_matches_a_closed_form_oracle() {
    // Exact line: slope recovered to machine precision.
    let x = [1.0, 2.0, 3.0, 4.0];
    let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
    assert!((lsq_slope(&x, &y) - 2.5).abs() < 1e-12);

    // Symmetric perturbation around the midpoint leaves the slope unchanged.
    let y2 = [1.5, 4.5, 8.5, 11.5]; // 2.5x - 1 with -/+/+/- 0.5 noise pattern
    let naive = (y2[3] - y2[0]) / (x[3] - x[0]);
    let fitted = lsq_slope(&x, &y2);
    // independent oracle: solve the 2x2 normal equations directly
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y2.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(&y2).map(|(a, b)| a * b).sum();
    let oracle = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    assert!((fitted - oracle).abs() < 1e-12);
    assert!((fitted - naive).abs() < 0.5); // same trend, not identical
}

#[test]
fn counting_allocator_tracks_live_and_peak_bytes() {
    assert!(allocator_installed());
    reset_peak();
    let before = peak_bytes();
    let v = vec![0u8; 1 << 20];
    std::hint::black_box(&v);
    let during = peak_bytes();
    assert!(
        during >= before + (1 << 20),
        "peak should grow by at least the allocation: {before} -> {during}"
    );
    drop(v);
    reset_peak();
    assert!(peak_bytes() < during, "reset should drop back to live bytes");
}

#[test]
fn scan_and_quadratic_kernels_agree_on_the_full_model() {
    let model = Model::init(small_model(), 7);
    let montage = bundled::by_name("22").unwrap();
    let t = 96;
    let x = Tensor::new(
        &[1, 22, t],
        (0..22 * t)
            .map(|i| ((i as f64) * 0.37).sin())
            .collect::<Vec<f64>>(),
    );
    let masks = [clean_mask(t)];
    let run = |kernel| {
        let mut g = Graph::inference();
        let out = model.forward(&mut g, &x, &montage, &masks, kernel);
        g.value(out.recon).data().to_vec()
    };
    let a = run(SsdKernel::Scan);
    let b = run(SsdKernel::Quadratic);
    assert_eq!(a.len(), b.len());
    let max_diff = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(max_diff < 1e-6, "kernel outputs diverge: {max_diff}");
}

/// The expensive sweep: runs all three variants over T in {256..4096} once and
/// checks the slope criteria, timing monotonicity, row bookkeeping, and that
/// the allocator saw real peaks.
#[test]
fn measured_slopes_separate_linear_and_quadratic_variants() {
    let cfg = BenchConfig {
        variants: Variant::ALL.to_vec(),
        lengths: vec![256, 1024, 4096],
        channels: 22,
        reps: 5,
        warmup: 1,
        model: small_model(),
        model_seed: 0,
        memory_budget_bytes: None,
    };
    let report = run_bench(&cfg).unwrap();

    // one row per (variant, length)
    assert_eq!(report.rows.len(), 3 * 3);
    for v in Variant::ALL {
        for &t in &cfg.lengths {
            let n = report
                .rows
                .iter()
                .filter(|r| r.variant == v.to_string() && r.t == t)
                .count();
            assert_eq!(n, 1, "expected exactly one row for {v} T={t}");
        }
    }

    // timing monotonicity and positive memory per variant
    for v in Variant::ALL {
        let rows: Vec<_> = report
            .rows
            .iter()
            .filter(|r| r.variant == v.to_string())
            .collect();
        for w in rows.windows(2) {
            assert!(w[0].t < w[1].t, "rows should come out in length order");
            assert!(
                w[1].median_ms >= w[0].median_ms,
                "{v}: median time decreased from T={} ({:.2} ms) to T={} ({:.2} ms)",
                w[0].t,
                w[0].median_ms,
                w[1].t,
                w[1].median_ms
            );
        }
        for r in &rows {
            assert!(r.peak_bytes > 0, "allocator peak should be observed");
            assert!(r.min_ms <= r.median_ms && r.median_ms <= r.mean_ms * 3.0);
            assert!(!r.oom);
        }
    }

    let scan = report.slopes["scan"];
    let quad = report.slopes["quadratic"];
    let conv = report.slopes["conv"];
    println!("slopes: scan {scan:.3}, quadratic {quad:.3}, conv {conv:.3}");
    assert!(scan < 1.4, "scan slope should be near-linear, got {scan:.3}");
    assert!(conv < 1.4, "conv slope should be near-linear, got {conv:.3}");
    assert!(quad > 1.7, "quadratic slope should exceed 1.7, got {quad:.3}");

    // summary mentions every variant and the relative percentages
    let s = summary(&report);
    for v in ["scan", "quadratic", "conv"] {
        assert!(s.contains(v), "summary should mention {v}: {s}");
    }
    assert!(s.contains('%'), "summary should carry relative increases: {s}");
}

#[test]
fn csv_report_round_trips_numerically() {
    let cfg = BenchConfig {
        variants: vec![Variant::Scan, Variant::ConvOnly],
        lengths: vec![64, 128],
        reps: 5,
        model: small_model(),
        ..BenchConfig::default()
    };
    let report = run_bench(&cfg).unwrap();
    let dir = std::env::temp_dir().join("samba-bench-roundtrip");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("report.csv");
    let text_summary = emit_report(&report, &path).unwrap();
    assert!(!text_summary.is_empty());

    let text = std::fs::read_to_string(&path).unwrap();
    let parsed = parse_report(&text).unwrap();
    assert_eq!(parsed.rows.len(), report.rows.len());
    for (a, b) in report.rows.iter().zip(&parsed.rows) {
        assert_eq!(a.variant, b.variant);
        assert_eq!(a.t, b.t);
        assert_eq!(a.reps, b.reps);
        assert_eq!(a.peak_bytes, b.peak_bytes);
        assert_eq!(a.oom, b.oom);
        // f64 printed with `{}` round-trips exactly
        assert_eq!(a.median_ms, b.median_ms);
        assert_eq!(a.mean_ms, b.mean_ms);
        assert_eq!(a.min_ms, b.min_ms);
    }
    for (k, v) in &report.slopes {
        assert_eq!(parsed.slopes[k], *v);
    }
}

#[test]
fn exceeding_the_memory_budget_yields_an_oom_row_not_a_crash() {
    let cfg = BenchConfig {
        variants: vec![Variant::Scan],
        lengths: vec![64, 256],
        reps: 5,
        model: small_model(),
        // Far below what even the small forward needs.
        memory_budget_bytes: Some(1024),
        ..BenchConfig::default()
    };
    let report = run_bench(&cfg).unwrap();
    assert_eq!(report.rows.len(), 2);
    for r in &report.rows {
        assert!(r.oom, "budget of 1 KiB must flag every point");
        assert!(r.median_ms.is_nan());
        assert_eq!(r.reps, 0);
        assert!(r.peak_bytes > 1024);
    }
    // no slope can be fitted from OOM rows
    assert!(report.slopes.is_empty());

    // OOM rows survive the CSV round trip
    let dir = std::env::temp_dir().join("samba-bench-oom");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("report.csv");
    emit_report(&report, &path).unwrap();
    let parsed = parse_report(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!(parsed.rows.iter().all(|r| r.oom && r.median_ms.is_nan()));

    // with a generous budget the same points run normally
    let report = run_bench(&BenchConfig {
        memory_budget_bytes: Some(usize::MAX),
        ..cfg
    })
    .unwrap();
    assert!(report.rows.iter().all(|r| !r.oom));
}

#[test]
fn unknown_channel_counts_are_rejected() {
    let cfg = BenchConfig {
        channels: 23,
        model: small_model(),
        ..BenchConfig::default()
    };
    assert!(matches!(run_bench(&cfg), Err(BenchError::Channels(23))));
}

#[test]
fn malformed_csv_is_rejected() {
    assert!(parse_report("").is_err());
    assert!(parse_report("wrong,header\n").is_err());
    let good = "variant,T,reps,median_ms,mean_ms,min_ms,peak_bytes,slope,oom\n";
    assert!(parse_report(good).is_ok());
    assert!(parse_report(&format!("{good}scan,notanumber,5,1,1,1,0,,false\n")).is_err());
    assert!(parse_report(&format!("{good}scan,64,5,1,1\n")).is_err());
}
