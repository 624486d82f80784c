//! Desk-scale tradeoff experiments.
//!
//! Each experiment returns a typed result (used directly by tests) that
//! converts into a [`Report`] for the CLI.

use std::collections::BTreeMap;
use std::time::Instant;

use ihcube_core::descriptor::{DescriptorConfig, Measure};
use ihcube_core::index::{build_index, BuildConfig};
use ihcube_core::lsh::LshParams;
use ihcube_core::model::{DataPoint, Interval, Range, Schema};
use ihcube_core::query::{execute, AccuracyMode, QueryResult, QuerySpec};
use ihcube_core::{Error, Index, Result};
use ihcube_server::api::{FilterSpec, GroupSpec, MeasureSpec, QueryRequest};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::generate::{Dataset, SkewSpec, SplomSpec};
use crate::metrics::{are, mean, median, recall, LatencyStats};
use crate::oracle::oracle_for;
use crate::report::{Check, Report, Table};
use crate::workload::{heatmap, Workload, WorkloadConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    ConstructionScaling,
    HeightTradeoff,
    LshVsTree,
    ScaleAlignment,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [
        Experiment::ConstructionScaling,
        Experiment::HeightTradeoff,
        Experiment::LshVsTree,
        Experiment::ScaleAlignment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::ConstructionScaling => "construction_scaling",
            Experiment::HeightTradeoff => "height_tradeoff",
            Experiment::LshVsTree => "lsh_vs_tree",
            Experiment::ScaleAlignment => "scale_alignment",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// Settings for every experiment; each section is optional in the file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub construction_scaling: ScalingConfig,
    pub height_tradeoff: HeightConfig,
    pub lsh_vs_tree: LshConfig,
    pub scale_alignment: AlignmentConfig,
}

impl BenchConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

// Timing ----------------------------------------------------------------

/// Runs `spec` `repeats` times; returns the last result and the fastest
/// wall time in microseconds.
pub fn timed(index: &Index, spec: &QuerySpec, repeats: usize) -> Result<(QueryResult, f64)> {
    let mut best = f64::INFINITY;
    let mut last = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let r = execute(index, spec)?;
        best = best.min(t.elapsed().as_secs_f64() * 1e6);
        last = Some(r);
    }
    Ok((last.expect("at least one run"), best))
}

/// The HTTP request document equivalent to `spec`.
pub fn to_request(schema: &Schema, spec: &QuerySpec) -> QueryRequest {
    let full = schema.full_range();
    let filter = schema
        .dimensions
        .iter()
        .zip(&spec.grid.filter.intervals)
        .zip(&full.intervals)
        .filter(|((_, iv), f)| iv != f)
        .map(|((d, iv), _)| (d.name.clone(), FilterSpec::Interval([iv.lo, iv.hi])))
        .collect();
    let group = spec
        .grid
        .groups
        .iter()
        .map(|g| GroupSpec {
            dim: schema.dimensions[g.dim].name.clone(),
            strategy: Some("explicit".into()),
            bins: None,
            edges: Some(g.edges.clone()),
        })
        .collect();
    let (kind, field) = match spec.measure {
        Measure::Count => ("count", None),
        Measure::Sum(m) => ("sum", Some(m)),
        Measure::Mean(m) => ("mean", Some(m)),
        Measure::Median(m) => ("median", Some(m)),
    };
    QueryRequest {
        filter,
        group,
        measure: MeasureSpec {
            kind: kind.into(),
            field: field.map(|m| schema.measures[m].clone()),
        },
        accuracy_mode: spec.mode,
        want_error_bounds: spec.want_error_bounds,
        align_scales: spec.align_scales,
        timing: false,
    }
}

/// Request handling time in microseconds: JSON parsing, execution and
/// response serialization, without the network.
pub fn end_to_end_micros(index: &Index, body: &[u8], repeats: usize) -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let resp = ihcube_server::handle_query(index, body);
        std::hint::black_box(&resp);
        best = best.min(t.elapsed().as_secs_f64() * 1e6);
    }
    best
}

fn aggregate_build(dataset: &Dataset, build: &BuildConfig) -> Result<(Index, f64)> {
    let t = Instant::now();
    let ix = build_index(
        dataset.schema(),
        dataset,
        DescriptorConfig::Aggregate { measures: 0 },
        build,
    )?;
    Ok((ix, t.elapsed().as_secs_f64()))
}

/// Heatmaps over `region`, each window shifted and resized by up to
/// `jitter` of its size and clipped to the domain.
pub fn jittered_heatmaps(
    schema: &Schema,
    region: &Range,
    dims: (usize, usize),
    bins: usize,
    count: usize,
    jitter: f64,
    seed: u64,
) -> Vec<QuerySpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let r = Range::new(
                schema
                    .dimensions
                    .iter()
                    .zip(&region.intervals)
                    .map(|(d, iv)| {
                        let w = iv.width();
                        let lo = iv.lo + w * jitter * rng.gen_range(-1.0..1.0);
                        let hi = iv.hi + w * jitter * rng.gen_range(-1.0..1.0);
                        let (lo, hi) = (lo.max(d.domain_min), hi.min(d.domain_max));
                        if hi > lo {
                            Interval::new(lo, hi)
                        } else {
                            *iv
                        }
                    })
                    .collect(),
            );
            heatmap(schema, &r, dims.0, dims.1, bins)
        })
        .collect()
}

// Construction scaling ----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub dataset: SplomSpec,
    pub row_counts: Vec<u64>,
    /// Inputs up to this many rows are inserted exactly.
    pub progressive_threshold: u64,
    pub sample_rate: f64,
    pub sample_cap: Option<usize>,
    pub build: BuildConfig,
    pub heatmap_bins: usize,
    pub queries: usize,
    pub repeats: usize,
    /// Build all row counts at once on separate threads. Queries are still
    /// timed one index at a time.
    pub parallel_builds: bool,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            dataset: SplomSpec::default(),
            row_counts: vec![10_000, 100_000, 1_000_000, 5_000_000],
            progressive_threshold: 100_000,
            sample_rate: 0.02,
            sample_cap: Some(20_000),
            build: BuildConfig::default(),
            heatmap_bins: 30,
            queries: 30,
            repeats: 3,
            parallel_builds: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub rows: u64,
    pub sample_rate: f64,
    pub sample_size: u64,
    pub subspaces: u64,
    pub tree_height: u32,
    pub storage_bytes: u64,
    pub build_seconds: f64,
    pub engine: LatencyStats,
    pub end_to_end: LatencyStats,
}

/// Builds `dataset` and times `bins × bins` heatmaps on its first two
/// dimensions (one dimension gives a 1-D histogram).
pub fn scaling_point(
    dataset: &Dataset,
    build: &BuildConfig,
    bins: usize,
    queries: usize,
    repeats: usize,
    seed: u64,
) -> Result<ScalingPoint> {
    let (ix, secs) = aggregate_build(dataset, build)?;
    measure_point(&ix, secs, build.sample_rate, bins, queries, repeats, seed)
}

fn measure_point(
    ix: &Index,
    secs: f64,
    sample_rate: f64,
    bins: usize,
    queries: usize,
    repeats: usize,
    seed: u64,
) -> Result<ScalingPoint> {
    let schema = ix.schema();
    let full = schema.full_range();
    let specs = if schema.ndims() >= 2 {
        jittered_heatmaps(schema, &full, (0, 1), bins, queries, 0.25, seed)
    } else {
        (0..queries)
            .map(|_| {
                let mut s = heatmap_1d(schema, &full, bins);
                s.align_scales = false;
                s
            })
            .collect()
    };
    let mut engine = Vec::with_capacity(specs.len());
    let mut e2e = Vec::with_capacity(specs.len());
    for spec in &specs {
        engine.push(timed(ix, spec, repeats)?.1);
        let body = serde_json::to_vec(&to_request(schema, spec)).expect("request serializes");
        e2e.push(end_to_end_micros(ix, &body, repeats));
    }
    let s = ix.stats();
    Ok(ScalingPoint {
        rows: s.rows,
        sample_rate,
        sample_size: s.sample_size,
        subspaces: s.subspaces,
        tree_height: s.tree_height,
        storage_bytes: s.storage_bytes,
        build_seconds: secs,
        engine: LatencyStats::from_micros(&engine),
        end_to_end: LatencyStats::from_micros(&e2e),
    })
}

fn heatmap_1d(schema: &Schema, region: &Range, bins: usize) -> QuerySpec {
    let mut spec = heatmap(schema, region, 0, 0, bins);
    spec.grid.groups.truncate(1);
    spec
}

pub fn construction_scaling(cfg: &ScalingConfig) -> Result<(Vec<ScalingPoint>, Report)> {
    let base = Dataset::splom(&cfg.dataset)?;
    let builds: Vec<BuildConfig> = cfg
        .row_counts
        .iter()
        .map(|&n| {
            let mut build = cfg.build.clone();
            if n > cfg.progressive_threshold {
                build.sample_rate = cfg.sample_rate;
                build.sample_cap = cfg.sample_cap;
            }
            build
        })
        .collect();
    let datasets: Vec<Dataset> = cfg.row_counts.iter().map(|&n| base.with_rows(n)).collect();
    let built: Vec<Result<(Index, f64)>> = if cfg.parallel_builds {
        std::thread::scope(|s| {
            let handles: Vec<_> = datasets
                .iter()
                .zip(&builds)
                .map(|(d, b)| s.spawn(move || aggregate_build(d, b)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("build thread panicked"))
                .collect()
        })
    } else {
        datasets
            .iter()
            .zip(&builds)
            .map(|(d, b)| aggregate_build(d, b))
            .collect()
    };
    let mut points = Vec::new();
    for (b, build) in built.into_iter().zip(&builds) {
        let (ix, secs) = b?;
        let p = measure_point(
            &ix,
            secs,
            build.sample_rate,
            cfg.heatmap_bins,
            cfg.queries,
            cfg.repeats,
            cfg.dataset.seed,
        )?;
        tracing::info!(rows = p.rows, storage = p.storage_bytes, "built");
        points.push(p);
    }
    let mut report = Report::new(Experiment::ConstructionScaling.name(), json!(cfg));
    report.tables.push(Table::new(
        "scaling",
        &[
            "rows",
            "sample_rate",
            "sample_size",
            "subspaces",
            "tree_height",
            "storage_bytes",
            "build_seconds",
            "engine_median_us",
            "engine_p90_us",
            "end_to_end_median_us",
        ],
        points
            .iter()
            .map(|p| {
                vec![
                    json!(p.rows),
                    json!(p.sample_rate),
                    json!(p.sample_size),
                    json!(p.subspaces),
                    json!(p.tree_height),
                    json!(p.storage_bytes),
                    json!(p.build_seconds),
                    json!(p.engine.median),
                    json!(p.engine.p90),
                    json!(p.end_to_end.median),
                ]
            })
            .collect(),
    ));
    let progressive: Vec<&ScalingPoint> = points.iter().filter(|p| p.rows > cfg.progressive_threshold).collect();
    if let [.., a, b] = progressive.as_slice() {
        let ds = (b.storage_bytes as f64 - a.storage_bytes as f64).abs() / a.storage_bytes as f64;
        let dl = b.engine.median / a.engine.median;
        report.checks.push(Check::new(
            "storage plateau",
            ds <= 0.10,
            format!("{} -> {} rows: storage change {:.1}%", a.rows, b.rows, 100.0 * ds),
        ));
        report.checks.push(Check::new(
            "latency plateau",
            (0.5..=2.0).contains(&dl),
            format!("median latency ratio {dl:.2}"),
        ));
    }
    Ok((points, report))
}

// Height tradeoff ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeightConfig {
    pub dataset: SkewSpec,
    pub build: BuildConfig,
    pub heatmap_bins: usize,
    pub queries_per_region: usize,
    pub jitter: f64,
    pub repeats: usize,
    pub align_scales: bool,
    pub seed: u64,
}

impl Default for HeightConfig {
    fn default() -> Self {
        HeightConfig {
            dataset: SkewSpec::default(),
            build: BuildConfig::default(),
            heatmap_bins: 60,
            queries_per_region: 20,
            jitter: 0.1,
            repeats: 3,
            align_scales: true,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub region: String,
    pub mode: String,
    pub queries: usize,
    pub median_are: f64,
    pub mean_are: f64,
    pub median_micros: f64,
    pub mean_candidates: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightResult {
    pub tree_height: u32,
    pub subspaces: u64,
    pub storage_bytes: u64,
    /// Per region: LSH first, then heights 1..=H.
    pub rows: Vec<ModeStats>,
    /// Per mode over all regions; same order.
    pub overall: Vec<ModeStats>,
}

/// Runs every query of `specs` in `mode`, scoring against a scan of `points`.
pub fn evaluate_mode(
    index: &Index,
    points: &[DataPoint],
    specs: &[QuerySpec],
    mode: AccuracyMode,
    repeats: usize,
    region: &str,
) -> Result<(ModeStats, Vec<f64>, Vec<f64>)> {
    let mut ares = Vec::with_capacity(specs.len());
    let mut times = Vec::with_capacity(specs.len());
    let mut cands = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut s = spec.clone();
        s.mode = mode;
        let (r, t) = timed(index, &s, repeats)?;
        let exact = oracle_for(index.schema(), points, &s, &r);
        ares.push(are(&r.values, &exact).expect("same grid"));
        times.push(t);
        cands.push(r.meta.candidates as f64);
    }
    let stats = ModeStats {
        region: region.into(),
        mode: mode.to_string(),
        queries: specs.len(),
        median_are: median(&ares),
        mean_are: mean(&ares),
        median_micros: median(&times),
        mean_candidates: mean(&cands),
    };
    Ok((stats, ares, times))
}

pub fn height_tradeoff_on(
    index: &Index,
    points: &[DataPoint],
    dataset: &Dataset,
    cfg: &HeightConfig,
) -> Result<HeightResult> {
    let schema = index.schema();
    let h = index.height();
    let modes: Vec<AccuracyMode> = std::iter::once(AccuracyMode::Lsh)
        .chain((1..=h).map(|k| {
            if k == h {
                AccuracyMode::Tree
            } else {
                AccuracyMode::TreeAtHeight(k)
            }
        }))
        .collect();
    let mut rows = Vec::new();
    // Per mode: ARE, engine and end-to-end latency samples.
    type Samples = (Vec<f64>, Vec<f64>, Vec<f64>);
    let mut all: BTreeMap<usize, Samples> = BTreeMap::new();
    for (ri, (name, region)) in dataset.regions().into_iter().enumerate() {
        let mut specs = jittered_heatmaps(
            schema,
            &region,
            (0, 1),
            cfg.heatmap_bins,
            cfg.queries_per_region,
            cfg.jitter,
            cfg.seed + ri as u64,
        );
        for s in &mut specs {
            s.align_scales = cfg.align_scales;
        }
        for (mi, &mode) in modes.iter().enumerate() {
            let (stats, ares, times) = evaluate_mode(index, points, &specs, mode, cfg.repeats, &name)?;
            let e = all.entry(mi).or_default();
            e.0.extend(ares);
            e.1.extend(times);
            e.2.push(stats.mean_candidates);
            rows.push(stats);
        }
    }
    let overall = modes
        .iter()
        .enumerate()
        .map(|(mi, mode)| {
            let (a, t, c) = &all[&mi];
            ModeStats {
                region: "all".into(),
                mode: mode.to_string(),
                queries: a.len(),
                median_are: median(a),
                mean_are: mean(a),
                median_micros: median(t),
                mean_candidates: mean(c),
            }
        })
        .collect();
    let s = index.stats();
    Ok(HeightResult {
        tree_height: h,
        subspaces: s.subspaces,
        storage_bytes: s.storage_bytes,
        rows,
        overall,
    })
}

/// Tree-height part of `overall`: heights 1..=H in order.
pub fn by_height(result: &HeightResult) -> &[ModeStats] {
    &result.overall[1..]
}

pub fn height_tradeoff(cfg: &HeightConfig) -> Result<(HeightResult, Report)> {
    let dataset = Dataset::skewed(&cfg.dataset)?;
    let points = dataset.collect();
    let (ix, _) = aggregate_build(&dataset, &cfg.build)?;
    let result = height_tradeoff_on(&ix, &points, &dataset, cfg)?;
    let mut report = Report::new(Experiment::HeightTradeoff.name(), json!(cfg));
    let table = |name: &str, rows: &[ModeStats]| {
        Table::new(
            name,
            &[
                "region",
                "mode",
                "queries",
                "median_are",
                "mean_are",
                "median_us",
                "mean_candidates",
            ],
            rows.iter()
                .map(|m| {
                    vec![
                        json!(m.region),
                        json!(m.mode),
                        json!(m.queries),
                        json!(m.median_are),
                        json!(m.mean_are),
                        json!(m.median_micros),
                        json!(m.mean_candidates),
                    ]
                })
                .collect(),
        )
    };
    report.tables.push(table("by_region", &result.rows));
    report.tables.push(table("overall", &result.overall));
    let hs = by_height(&result);
    report.checks.push(Check::new(
        "ARE nonincreasing with height",
        hs.windows(2).all(|w| w[1].median_are <= w[0].median_are),
        hs.iter()
            .map(|m| format!("{:.4}", m.median_are))
            .collect::<Vec<_>>()
            .join(" "),
    ));
    report.checks.push(Check::new(
        "latency nondecreasing with height",
        hs.windows(2).all(|w| w[1].median_micros >= w[0].median_micros),
        hs.iter()
            .map(|m| format!("{:.1}", m.median_micros))
            .collect::<Vec<_>>()
            .join(" "),
    ));
    report.notes.push(format!(
        "tree height {}, {} subspaces, {} bytes",
        result.tree_height, result.subspaces, result.storage_bytes
    ));
    Ok((result, report))
}

// LSH versus tree ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LshConfig {
    pub dataset: SplomSpec,
    pub build: BuildConfig,
    pub range_queries: usize,
    /// Window side as a fraction of the domain, inclusive range.
    pub extent: [f64; 2],
    pub tables: Vec<usize>,
    pub heatmap_queries: usize,
    pub heatmap_bins: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for LshConfig {
    fn default() -> Self {
        LshConfig {
            dataset: SplomSpec::default(),
            build: BuildConfig::default(),
            range_queries: 1000,
            extent: [0.05, 0.8],
            tables: vec![1, 2, 4, 8, 16],
            heatmap_queries: 50,
            heatmap_bins: 30,
            repeats: 3,
            seed: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallPoint {
    pub tables: usize,
    pub median_recall: f64,
    pub mean_recall: f64,
    pub min_recall: f64,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LshResult {
    pub queries: usize,
    /// At the build's own LSH parameters.
    pub default: RecallPoint,
    pub curve: Vec<RecallPoint>,
    pub tree: ModeStats,
    pub lsh: ModeStats,
}

/// Random windows over every dimension.
pub fn random_ranges(schema: &Schema, n: usize, extent: [f64; 2], seed: u64) -> Vec<Range> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Range::new(
                schema
                    .dimensions
                    .iter()
                    .map(|d| {
                        let w = d.extent() * rng.gen_range(extent[0]..=extent[1]);
                        let lo = d.domain_min + (d.extent() - w) * rng.gen::<f64>();
                        Interval::new(lo, lo + w)
                    })
                    .collect(),
            )
        })
        .collect()
}

/// Soundness and recall of validated LSH candidates against tree search.
pub fn recall_point(index: &Index, ranges: &[Range]) -> RecallPoint {
    let mut rec = Vec::with_capacity(ranges.len());
    let mut violations = 0;
    for q in ranges {
        let exact = index.candidates_exact(q);
        let mut lsh = index.candidates_lsh(q);
        lsh.sort_unstable();
        violations += lsh.iter().filter(|l| exact.binary_search(l).is_err()).count();
        rec.push(recall(&lsh, &exact));
    }
    RecallPoint {
        tables: index.build_config().lsh.tables,
        median_recall: median(&rec),
        mean_recall: mean(&rec),
        min_recall: rec.iter().copied().fold(f64::INFINITY, f64::min),
        violations,
    }
}

pub fn lsh_vs_tree_on(index: &Index, points: &[DataPoint], cfg: &LshConfig) -> Result<LshResult> {
    let schema = index.schema();
    let ranges = random_ranges(schema, cfg.range_queries, cfg.extent, cfg.seed);
    let default = recall_point(index, &ranges);
    let mut curve = Vec::new();
    for &t in &cfg.tables {
        let params = LshParams {
            tables: t,
            ..index.build_config().lsh.clone()
        };
        curve.push(recall_point(&index.with_lsh(&params)?, &ranges));
    }
    let dims = (0, if schema.ndims() > 1 { 1 } else { 0 });
    let mut specs = jittered_heatmaps(
        schema,
        &schema.full_range(),
        dims,
        cfg.heatmap_bins,
        cfg.heatmap_queries,
        0.4,
        cfg.seed + 1,
    );
    if dims.0 == dims.1 {
        for s in &mut specs {
            s.grid.groups.truncate(1);
        }
    }
    let (tree, _, _) = evaluate_mode(index, points, &specs, AccuracyMode::Tree, cfg.repeats, "global")?;
    let (lsh, _, _) = evaluate_mode(index, points, &specs, AccuracyMode::Lsh, cfg.repeats, "global")?;
    Ok(LshResult {
        queries: ranges.len(),
        default,
        curve,
        tree,
        lsh,
    })
}

pub fn lsh_vs_tree(cfg: &LshConfig) -> Result<(LshResult, Report)> {
    let dataset = Dataset::splom(&cfg.dataset)?;
    let points = dataset.collect();
    let (ix, _) = aggregate_build(&dataset, &cfg.build)?;
    let r = lsh_vs_tree_on(&ix, &points, cfg)?;
    let mut report = Report::new(Experiment::LshVsTree.name(), json!(cfg));
    let rp = |p: &RecallPoint| {
        vec![
            json!(p.tables),
            json!(p.median_recall),
            json!(p.mean_recall),
            json!(p.min_recall),
            json!(p.violations),
        ]
    };
    let cols = ["tables", "median_recall", "mean_recall", "min_recall", "violations"];
    report
        .tables
        .push(Table::new("recall_default", &cols, vec![rp(&r.default)]));
    report
        .tables
        .push(Table::new("recall_vs_tables", &cols, r.curve.iter().map(rp).collect()));
    report.tables.push(Table::new(
        "heatmap_accuracy",
        &["mode", "median_are", "mean_are", "median_us", "mean_candidates"],
        [&r.tree, &r.lsh]
            .iter()
            .map(|m| {
                vec![
                    json!(m.mode),
                    json!(m.median_are),
                    json!(m.mean_are),
                    json!(m.median_micros),
                    json!(m.mean_candidates),
                ]
            })
            .collect(),
    ));
    report.checks.push(Check::new(
        "validated LSH within tree candidates",
        r.default.violations == 0 && r.curve.iter().all(|p| p.violations == 0),
        format!("{} violations over {} queries", r.default.violations, r.queries),
    ));
    report.checks.push(Check::new(
        "recall at defaults >= 95%",
        r.default.mean_recall >= 0.95,
        format!(
            "mean {:.4}, median {:.4}",
            r.default.mean_recall, r.default.median_recall
        ),
    ));
    report.checks.push(Check::new(
        "recall nondecreasing in tables (medians)",
        r.curve.windows(2).all(|w| w[1].median_recall >= w[0].median_recall),
        r.curve
            .iter()
            .map(|p| format!("{}:{:.4}", p.tables, p.median_recall))
            .collect::<Vec<_>>()
            .join(" "),
    ));
    report.checks.push(Check::new(
        "tree ARE <= LSH ARE",
        r.tree.mean_are <= r.lsh.mean_are,
        format!("tree {:.5}, lsh {:.5}", r.tree.mean_are, r.lsh.mean_are),
    ));
    Ok((r, report))
}

// Scale alignment ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub dataset: SkewSpec,
    pub build: BuildConfig,
    pub workload: WorkloadConfig,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            dataset: SkewSpec::default(),
            build: BuildConfig::default(),
            workload: WorkloadConfig {
                queries: 300,
                bins: [10, 60],
                extent: [0.05, 0.8],
                ..WorkloadConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub bins: usize,
    pub are_unaligned: f64,
    pub are_aligned: f64,
    pub coincident_unaligned: f64,
    pub coincident_aligned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub queries: usize,
    pub mean_are_unaligned: f64,
    pub mean_are_aligned: f64,
    pub mean_coincident_unaligned: f64,
    pub mean_coincident_aligned: f64,
    /// Per query, sorted by bin count.
    pub per_query: Vec<AlignmentRow>,
}

impl AlignmentResult {
    /// Relative ARE reduction from alignment.
    pub fn reduction(&self) -> f64 {
        if self.mean_are_unaligned == 0.0 {
            0.0
        } else {
            1.0 - self.mean_are_aligned / self.mean_are_unaligned
        }
    }
}

/// Each misaligned workload query, run as drawn and again with alignment.
pub fn scale_alignment_on(index: &Index, points: &[DataPoint], workload: &Workload) -> Result<AlignmentResult> {
    let schema = index.schema();
    let mut rows = Vec::with_capacity(workload.len());
    for q in &workload.queries {
        let mut raw = q.spec.clone();
        raw.align_scales = false;
        let mut snapped = q.spec.clone();
        snapped.align_scales = true;
        let r0 = execute(index, &raw)?;
        let r1 = execute(index, &snapped)?;
        rows.push(AlignmentRow {
            bins: raw.grid.cell_count(),
            are_unaligned: are(&r0.values, &oracle_for(schema, points, &raw, &r0)).expect("same grid"),
            are_aligned: are(&r1.values, &oracle_for(schema, points, &snapped, &r1)).expect("same grid"),
            coincident_unaligned: r0.meta.coincident_fraction.unwrap_or(0.0),
            coincident_aligned: r1.meta.coincident_fraction.unwrap_or(0.0),
        });
    }
    rows.sort_by_key(|r| r.bins);
    let avg = |f: fn(&AlignmentRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
    Ok(AlignmentResult {
        queries: rows.len(),
        mean_are_unaligned: avg(|r| r.are_unaligned),
        mean_are_aligned: avg(|r| r.are_aligned),
        mean_coincident_unaligned: avg(|r| r.coincident_unaligned),
        mean_coincident_aligned: avg(|r| r.coincident_aligned),
        per_query: rows,
    })
}

pub fn scale_alignment(cfg: &AlignmentConfig) -> Result<(AlignmentResult, Report)> {
    let dataset = Dataset::skewed(&cfg.dataset)?;
    let points = dataset.collect();
    let (ix, _) = aggregate_build(&dataset, &cfg.build)?;
    let mut wc = cfg.workload.clone();
    wc.aligned = false;
    let workload = Workload::generate(ix.schema(), &wc);
    let r = scale_alignment_on(&ix, &points, &workload)?;
    let mut report = Report::new(Experiment::ScaleAlignment.name(), json!(cfg));
    report.tables.push(Table::new(
        "summary",
        &[
            "queries",
            "mean_are_unaligned",
            "mean_are_aligned",
            "reduction",
            "coincident_unaligned",
            "coincident_aligned",
        ],
        vec![vec![
            json!(r.queries),
            json!(r.mean_are_unaligned),
            json!(r.mean_are_aligned),
            json!(r.reduction()),
            json!(r.mean_coincident_unaligned),
            json!(r.mean_coincident_aligned),
        ]],
    ));
    report.tables.push(alignment_curve(&r));
    report.checks.push(Check::new(
        "aligned ARE <= 0.5 x unaligned",
        r.mean_are_aligned <= 0.5 * r.mean_are_unaligned,
        format!(
            "{:.5} vs {:.5} ({:.1}% reduction)",
            r.mean_are_aligned,
            r.mean_are_unaligned,
            100.0 * r.reduction()
        ),
    ));
    Ok((r, report))
}

/// Mean ARE per grid-size decile: the full reduction curve.
pub fn alignment_curve(r: &AlignmentResult) -> Table {
    let n = r.per_query.len();
    let buckets = 10.min(n.max(1));
    let rows = (0..buckets)
        .filter_map(|b| {
            let chunk = &r.per_query[b * n / buckets..(b + 1) * n / buckets];
            if chunk.is_empty() {
                return None;
            }
            let u = mean(&chunk.iter().map(|x| x.are_unaligned).collect::<Vec<_>>());
            let a = mean(&chunk.iter().map(|x| x.are_aligned).collect::<Vec<_>>());
            Some(vec![
                json!(chunk[0].bins),
                json!(chunk[chunk.len() - 1].bins),
                json!(chunk.len()),
                json!(u),
                json!(a),
                json!(if u > 0.0 { 1.0 - a / u } else { 0.0 }),
            ])
        })
        .collect();
    Table::new(
        "curve_by_cells",
        &[
            "cells_min",
            "cells_max",
            "queries",
            "are_unaligned",
            "are_aligned",
            "reduction",
        ],
        rows,
    )
}

pub fn run_experiment(kind: Experiment, cfg: &BenchConfig) -> Result<Report> {
    Ok(match kind {
        Experiment::ConstructionScaling => construction_scaling(&cfg.construction_scaling)?.1,
        Experiment::HeightTradeoff => height_tradeoff(&cfg.height_tradeoff)?.1,
        Experiment::LshVsTree => lsh_vs_tree(&cfg.lsh_vs_tree)?.1,
        Experiment::ScaleAlignment => scale_alignment(&cfg.scale_alignment)?.1,
    })
}
