//! End-to-end acceptance checks at desk scale.
//!
//! Every test prints one `PASS`/`FAIL` line with its measured numbers and
//! then asserts. Tests hold a shared lock so timings never overlap; run with
//! `-- --nocapture` to see the lines.

use std::sync::{Mutex, MutexGuard, OnceLock};

use ihcube_bench::experiments::{
    alignment_curve, by_height, height_tradeoff_on, lsh_vs_tree_on, scale_alignment_on, scaling_point, HeightConfig,
    LshConfig,
};
use ihcube_bench::generate::{Dataset, SkewSpec, SplomSpec};
use ihcube_bench::metrics::are;
use ihcube_bench::oracle::oracle_for;
use ihcube_bench::workload::{Workload, WorkloadConfig};
use ihcube_core::descriptor::{DescriptorConfig, Measure};
use ihcube_core::ih::Rounding;
use ihcube_core::index::{build_index, BuildConfig};
use ihcube_core::model::{DataPoint, Interval, Range};
use ihcube_core::query::{execute, AccuracyMode, ComputationalGrid, GroupAxis, QueryResult, QuerySpec};
use ihcube_core::{store, Index};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, passed: bool, detail: String) {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    assert!(passed, "{name}: {detail}");
}

struct Fixture {
    dataset: Dataset,
    points: Vec<DataPoint>,
    index: Index,
}

fn build(dataset: Dataset, cfg: &BuildConfig) -> Fixture {
    let index = build_index(
        dataset.schema(),
        &dataset,
        DescriptorConfig::Aggregate { measures: 0 },
        cfg,
    )
    .unwrap();
    let points = dataset.collect();
    Fixture { dataset, points, index }
}

/// Five-dimensional scatterplot-matrix data, 10^5 rows, 10 scales per axis.
fn splom() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SplomSpec {
            dims: 5,
            rows: 100_000,
            bins: 10,
            seed: 2024,
            ..SplomSpec::default()
        };
        build(Dataset::splom(&spec).unwrap(), &BuildConfig::default())
    })
}

/// Skewed two-dimensional data, 10^6 rows, 360 scales per axis.
fn skewed() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SkewSpec {
            rows: 1_000_000,
            ..SkewSpec::default()
        };
        build(Dataset::skewed(&spec).unwrap(), &BuildConfig::default())
    })
}

fn same_bits(a: &[Option<f64>], b: &[Option<f64>]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.map(f64::to_bits) == y.map(f64::to_bits))
}

fn same_result(a: &QueryResult, b: &QueryResult) -> bool {
    let opt = |x: &Option<Vec<Option<f64>>>, y: &Option<Vec<Option<f64>>>| match (x, y) {
        (Some(x), Some(y)) => same_bits(x, y),
        (None, None) => true,
        _ => false,
    };
    a.grid == b.grid
        && same_bits(&a.values, &b.values)
        && opt(&a.lower, &b.lower)
        && opt(&a.upper, &b.upper)
        && opt(&a.error, &b.error)
        && a.meta.candidates == b.meta.candidates
        && a.meta.coincident_fraction.map(f64::to_bits) == b.meta.coincident_fraction.map(f64::to_bits)
}

#[test]
fn exactness_on_aligned_queries() {
    let _g = serial();
    let f = splom();
    let w = Workload::generate(
        f.index.schema(),
        &WorkloadConfig {
            queries: 200,
            aligned: true,
            bins: [1, 5],
            extent: [0.2, 1.0],
            seed: 31,
            ..WorkloadConfig::default()
        },
    );
    let mut worst = 0.0f64;
    let mut cells = 0;
    for q in &w.queries {
        assert!(q.aligned);
        let r = execute(&f.index, &q.spec).unwrap();
        let exact = oracle_for(f.index.schema(), &f.points, &q.spec, &r);
        worst = worst.max(are(&r.values, &exact).unwrap());
        cells += r.values.len();
    }
    report(
        "exactness on aligned queries",
        worst == 0.0 && w.len() == 200,
        format!("{} queries, {cells} cells, max ARE {worst}", w.len()),
    );
}

#[test]
fn bound_containment() {
    let _g = serial();
    let f = splom();
    let w = Workload::generate(
        f.index.schema(),
        &WorkloadConfig {
            queries: 500,
            aligned: false,
            bins: [1, 8],
            extent: [0.05, 1.0],
            seed: 32,
            ..WorkloadConfig::default()
        },
    );
    let (mut cells, mut outside, mut bad_error) = (0usize, 0usize, 0usize);
    for q in &w.queries {
        let mut spec = q.spec.clone();
        spec.want_error_bounds = true;
        let r = execute(&f.index, &spec).unwrap();
        let exact = oracle_for(f.index.schema(), &f.points, &spec, &r);
        let (lo, hi, err) = (
            r.lower.as_ref().unwrap(),
            r.upper.as_ref().unwrap(),
            r.error.as_ref().unwrap(),
        );
        for i in 0..r.values.len() {
            cells += 1;
            let (a, l, h, v) = (exact[i].unwrap(), lo[i].unwrap(), hi[i].unwrap(), r.values[i].unwrap());
            if !(l <= a && a <= h) {
                outside += 1;
            }
            if v > 0.0 && err[i].map(f64::to_bits) != Some(((h - l) / v).to_bits()) {
                bad_error += 1;
            }
        }
    }
    report(
        "bound containment",
        outside == 0 && bad_error == 0 && w.len() == 500,
        format!(
            "{} queries, {cells} cells, {outside} outside bounds, {bad_error} error mismatches",
            w.len()
        ),
    );
}

#[test]
fn scale_alignment_benefit() {
    let _g = serial();
    let f = skewed();
    let w = Workload::generate(
        f.index.schema(),
        &WorkloadConfig {
            queries: 300,
            aligned: false,
            bins: [10, 60],
            extent: [0.05, 0.8],
            seed: 33,
            ..WorkloadConfig::default()
        },
    );
    let r = scale_alignment_on(&f.index, &f.points, &w).unwrap();
    println!("{}", alignment_curve(&r).to_text());
    report(
        "scale alignment benefit",
        r.queries >= 300 && r.mean_are_aligned <= 0.5 * r.mean_are_unaligned,
        format!(
            "{} queries, mean ARE aligned {:.5} vs unaligned {:.5} ({:.1}% reduction), coincident {:.3} vs {:.3}",
            r.queries,
            r.mean_are_aligned,
            r.mean_are_unaligned,
            100.0 * r.reduction(),
            r.mean_coincident_aligned,
            r.mean_coincident_unaligned
        ),
    );
}

#[test]
fn height_tradeoff() {
    let _g = serial();
    let f = skewed();
    let cfg = HeightConfig {
        queries_per_region: 20,
        ..HeightConfig::default()
    };
    let r = height_tradeoff_on(&f.index, &f.points, &f.dataset, &cfg).unwrap();
    let hs = by_height(&r);
    for m in &r.overall {
        println!(
            "  {:>14}  median ARE {:.4}  median {:.1} us",
            m.mode, m.median_are, m.median_micros
        );
    }
    let are_ok = hs.windows(2).all(|w| w[1].median_are <= w[0].median_are);
    let lat_ok = hs.windows(2).all(|w| w[1].median_micros >= w[0].median_micros);
    report(
        "height tradeoff",
        are_ok && lat_ok && hs.len() == r.tree_height as usize,
        format!(
            "heights 1..={}: median ARE [{}], median us [{}]",
            r.tree_height,
            hs.iter()
                .map(|m| format!("{:.4}", m.median_are))
                .collect::<Vec<_>>()
                .join(", "),
            hs.iter()
                .map(|m| format!("{:.1}", m.median_micros))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

#[test]
fn lsh_soundness_and_recall() {
    let _g = serial();
    let f = splom();
    let cfg = LshConfig {
        range_queries: 1000,
        heatmap_queries: 20,
        ..LshConfig::default()
    };
    let r = lsh_vs_tree_on(&f.index, &f.points, &cfg).unwrap();
    let violations = r.default.violations + r.curve.iter().map(|p| p.violations).sum::<usize>();
    let monotone = r.curve.windows(2).all(|w| w[1].median_recall >= w[0].median_recall);
    report(
        "lsh soundness and recall",
        violations == 0 && r.default.mean_recall >= 0.95 && monotone && r.queries == 1000,
        format!(
            "{} queries, {violations} violations, recall mean {:.4} median {:.4}; median by tables [{}]",
            r.queries,
            r.default.mean_recall,
            r.default.median_recall,
            r.curve
                .iter()
                .map(|p| format!("{}:{:.4}", p.tables, p.median_recall))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    );
}

#[test]
fn progressive_construction_plateau() {
    let _g = serial();
    let base = Dataset::splom(&SplomSpec {
        dims: 5,
        rows: 0,
        bins: 10,
        seed: 2024,
        ..SplomSpec::default()
    })
    .unwrap();
    let cfg = BuildConfig {
        sample_rate: 0.02,
        sample_cap: Some(20_000),
        ..BuildConfig::default()
    };
    let a = scaling_point(&base.with_rows(1_000_000), &cfg, 30, 30, 3, 9).unwrap();
    let b = scaling_point(&base.with_rows(5_000_000), &cfg, 30, 30, 3, 9).unwrap();
    let ds = (b.storage_bytes as f64 - a.storage_bytes as f64).abs() / a.storage_bytes as f64;
    let dl = b.engine.median / a.engine.median;
    report(
        "progressive construction plateau",
        ds <= 0.10 && (0.5..=2.0).contains(&dl),
        format!(
            "storage {} -> {} bytes ({:+.1}%), median latency {:.1} -> {:.1} us (x{dl:.2}), build {:.1}s -> {:.1}s",
            a.storage_bytes,
            b.storage_bytes,
            100.0 * ds,
            a.engine.median,
            b.engine.median,
            a.build_seconds,
            b.build_seconds
        ),
    );
}

#[test]
fn latency_independence() {
    let _g = serial();
    let base = Dataset::skewed(&SkewSpec::default()).unwrap();
    // Equal geometry: both skeletons come from 20000-point samples.
    let cfg = BuildConfig {
        sample_cap: Some(20_000),
        ..BuildConfig::default()
    };
    let a = scaling_point(&base.with_rows(100_000), &cfg, 60, 40, 3, 10).unwrap();
    let b = scaling_point(&base.with_rows(10_000_000), &cfg, 60, 40, 3, 10).unwrap();
    for p in [&a, &b] {
        let (e, h) = (&p.engine, &p.end_to_end);
        println!(
            "  {:>9} rows, {} subspaces: engine median {:.1} mean {:.1} stdev {:.1} max {:.1} p90 {:.1} us; end-to-end median {:.1} p90 {:.1} us",
            p.rows, p.subspaces, e.median, e.mean, e.stdev, e.max, e.p90, h.median, h.p90
        );
    }
    let ratio = b.engine.median / a.engine.median;
    report(
        "latency independence",
        ratio < 2.0 && ratio > 0.5,
        format!(
            "median 60x60 query {:.1} us at 1e5 rows vs {:.1} us at 1e7 rows (x{ratio:.2})",
            a.engine.median, b.engine.median
        ),
    );
}

fn random_grid(f: &Fixture, rng: &mut ChaCha8Rng, max_bins: usize) -> ComputationalGrid {
    let schema = f.index.schema();
    let d = schema.ndims();
    let mut filter = schema.full_range();
    for iv in &mut filter.intervals {
        let a: f64 = rng.gen();
        let b: f64 = rng.gen();
        *iv = Interval::new(a.min(b), a.max(b).max(a.min(b) + 0.05).min(1.0));
    }
    let x = rng.gen_range(0..d);
    let y = (x + 1 + rng.gen_range(0..d - 1)) % d;
    let groups = [x, y]
        .iter()
        .map(|&k| {
            let iv = filter.intervals[k];
            let bins = rng.gen_range(1..=max_bins);
            let mut cuts: Vec<f64> = (0..bins - 1).map(|_| rng.gen_range(iv.lo..iv.hi)).collect();
            cuts.sort_by(f64::total_cmp);
            let mut edges = vec![iv.lo];
            edges.extend(cuts);
            edges.push(iv.hi);
            edges.dedup();
            GroupAxis { dim: k, edges }
        })
        .collect();
    ComputationalGrid { filter, groups }
}

#[test]
fn batched_grid_equivalence() {
    let _g = serial();
    let f = splom();
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut cells = 0;
    let mut mismatches = 0;
    // Engine: one grid query against one query per cell.
    for _ in 0..100 {
        let grid = random_grid(f, &mut rng, 6);
        let mut spec = QuerySpec::new(grid.clone(), Measure::Count);
        spec.align_scales = false;
        spec.want_error_bounds = true;
        let whole = execute(&f.index, &spec).unwrap();
        for c in 0..grid.cell_count() {
            let mut one = spec.clone();
            one.grid = ComputationalGrid {
                filter: grid.cell_range(&grid.unflatten(c)),
                groups: vec![],
            };
            let r = execute(&f.index, &one).unwrap();
            let bits = |v: &Option<Vec<Option<f64>>>, i: usize| v.as_ref().unwrap()[i].map(f64::to_bits);
            cells += 1;
            if whole.values[c].map(f64::to_bits) != r.values[0].map(f64::to_bits)
                || bits(&whole.lower, c) != bits(&r.lower, 0)
                || bits(&whole.upper, c) != bits(&r.upper, 0)
            {
                mismatches += 1;
            }
        }
    }
    // Single histogram: batched grid against per-cell rectangles.
    let mut ih_cells = 0;
    for _ in 0..100 {
        let leaf = &f.index.leaves()[rng.gen_range(0..f.index.leaves().len())];
        let b = leaf.ih.geometry().bounds(f.index.schema());
        let axes: Vec<Vec<f64>> = b
            .intervals
            .iter()
            .map(|iv| {
                let mut e: Vec<f64> = (0..rng.gen_range(2..5))
                    .map(|_| rng.gen_range(iv.lo - 0.05..iv.hi + 0.05))
                    .collect();
                e.sort_by(f64::total_cmp);
                e.dedup();
                if e.len() < 2 {
                    e = vec![iv.lo, iv.hi];
                }
                e
            })
            .collect();
        for rounding in [Rounding::Nearest, Rounding::Inner, Rounding::Outer] {
            let g = leaf.ih.query_grid(&axes, rounding).unwrap();
            let shape: Vec<usize> = axes.iter().map(|e| e.len() - 1).collect();
            for c in 0..g.cell_count() {
                let mut rest = c;
                let mut idx = vec![0; shape.len()];
                for k in (0..shape.len()).rev() {
                    idx[k] = rest % shape[k];
                    rest /= shape[k];
                }
                let rect = Range::new(
                    idx.iter()
                        .zip(&axes)
                        .map(|(&i, e)| Interval::new(e[i], e[i + 1]))
                        .collect(),
                );
                let one = leaf.ih.query_rect(&rect, rounding).unwrap();
                ih_cells += 1;
                if !one
                    .values
                    .iter()
                    .zip(g.cell(c))
                    .all(|(a, b)| a.to_bits() == b.to_bits())
                {
                    mismatches += 1;
                }
            }
        }
    }
    report(
        "batched grid equivalence",
        mismatches == 0,
        format!("100 engine grids ({cells} cells) and 100 histogram grids ({ih_cells} cells), {mismatches} mismatches"),
    );
}

#[test]
fn serialization_round_trip() {
    let _g = serial();
    let f = splom();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("splom.ihc");
    store::save(&f.index, &path).unwrap();
    let loaded = store::load(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    let h = f.index.height();
    let mut equal = 0;
    for i in 0..50 {
        let mut spec = QuerySpec::new(random_grid(f, &mut rng, 8), Measure::Count);
        spec.want_error_bounds = true;
        spec.align_scales = i % 2 == 0;
        spec.mode = match i % 3 {
            0 => AccuracyMode::Tree,
            1 => AccuracyMode::Lsh,
            _ => AccuracyMode::TreeAtHeight(1 + (i as u32) % h),
        };
        let a = execute(&f.index, &spec).unwrap();
        let b = execute(&loaded, &spec).unwrap();
        equal += same_result(&a, &b) as usize;
    }
    let size = std::fs::metadata(&path).unwrap().len();
    report(
        "serialization round trip",
        equal == 50 && loaded.stats().storage_bytes == size,
        format!("{equal}/50 queries bitwise equal after reload, file {size} bytes"),
    );
}

#[test]
fn conservation() {
    let _g = serial();
    let mut lines = Vec::new();
    let mut ok = true;
    let progressive = {
        let ds = skewed().dataset.clone();
        let cfg = BuildConfig {
            sample_rate: 0.02,
            ..BuildConfig::default()
        };
        build_index(ds.schema(), &ds, DescriptorConfig::Aggregate { measures: 0 }, &cfg).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for (name, ix, rows) in [
        ("splom", &splom().index, splom().dataset.rows()),
        ("skewed", &skewed().index, skewed().dataset.rows()),
        ("skewed progressive", &progressive, skewed().dataset.rows()),
    ] {
        let rows = rows as f64;
        let leaf_total = ix.total_count();
        let full = execute(
            ix,
            &QuerySpec::new(
                ComputationalGrid {
                    filter: ix.schema().full_range(),
                    groups: vec![],
                },
                Measure::Count,
            ),
        )
        .unwrap()
        .values[0]
            .unwrap();
        let mut cover_ok = true;
        for _ in 0..20 {
            let d = ix.schema().ndims();
            let groups = (0..d.min(2))
                .map(|k| {
                    let dim = &ix.schema().dimensions[k];
                    let mut cuts: Vec<f64> = (0..rng.gen_range(0..12)).map(|_| rng.gen_range(0.0..1.0)).collect();
                    cuts.sort_by(f64::total_cmp);
                    let mut edges = vec![dim.domain_min];
                    edges.extend(cuts);
                    edges.push(dim.domain_max);
                    edges.dedup();
                    GroupAxis { dim: k, edges }
                })
                .collect();
            let mut spec = QuerySpec::new(
                ComputationalGrid {
                    filter: ix.schema().full_range(),
                    groups,
                },
                Measure::Count,
            );
            spec.align_scales = rng.gen();
            let r = execute(ix, &spec).unwrap();
            let sum: f64 = r.values.iter().map(|v| v.unwrap()).sum();
            cover_ok &= sum == rows;
        }
        let pass = leaf_total == rows && full == rows && cover_ok;
        ok &= pass;
        lines.push(format!(
            "{name}: rows {rows}, leaves {leaf_total}, full domain {full}, covers {}",
            if cover_ok { "exact" } else { "off" }
        ));
    }
    report("conservation", ok, lines.join("; "));
}
