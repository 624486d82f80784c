//! Aggregate queries over computational grids.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::descriptor::{histogram_median, DescriptorConfig, Measure};
use crate::error::{Error, Result};
use crate::ih::{AxisCells, Rounding};
use crate::index::Index;
use crate::model::{DimKind, Interval, Range, Schema};

/// How a group dimension's interval is divided into bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum Binning {
    EquiWidth {
        bins: usize,
    },
    Log {
        bins: usize,
    },
    /// Bins of roughly equal mass, from a coarse count query.
    EquiData {
        bins: usize,
    },
    /// Caller-supplied edges; they must lie inside the filter interval, which
    /// is narrowed to `[first, last]`.
    Explicit {
        edges: Vec<f64>,
    },
    /// One bin per category (categorical dimensions only).
    Categories,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAxis {
    pub dim: usize,
    pub edges: Vec<f64>,
}

impl GroupAxis {
    pub fn bins(&self) -> usize {
        self.edges.len() - 1
    }
}

/// Filter rectangle plus bin edges on the group dimensions. Cells are
/// half-open, closed on the side that reaches a domain maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputationalGrid {
    pub filter: Range,
    pub groups: Vec<GroupAxis>,
}

impl ComputationalGrid {
    pub fn shape(&self) -> Vec<usize> {
        self.groups.iter().map(GroupAxis::bins).collect()
    }

    pub fn cell_count(&self) -> usize {
        self.groups.iter().map(GroupAxis::bins).product()
    }

    /// Range of one cell, `cell[i]` indexing bins of `groups[i]`.
    pub fn cell_range(&self, cell: &[usize]) -> Range {
        let mut r = self.filter.clone();
        for (g, &t) in self.groups.iter().zip(cell) {
            r.intervals[g.dim] = Interval::new(g.edges[t], g.edges[t + 1]);
        }
        r
    }

    /// Row-major multi-index of flat cell `flat`.
    pub fn unflatten(&self, mut flat: usize) -> Vec<usize> {
        let shape = self.shape();
        let mut out = vec![0; shape.len()];
        for k in (0..shape.len()).rev() {
            out[k] = flat % shape[k];
            flat /= shape[k];
        }
        out
    }

    /// Flat index of the cell holding `coords`, if any. Agrees with
    /// `schema.range_contains(&self.cell_range(..), coords)`.
    pub fn locate(&self, schema: &Schema, coords: &[f64]) -> Option<usize> {
        if !schema.range_contains(&self.filter, coords) {
            return None;
        }
        let mut flat = 0;
        for g in &self.groups {
            let d = &schema.dimensions[g.dim];
            let v = coords[g.dim];
            let bins = g.bins();
            let t = g.edges.partition_point(|&e| e <= v).checked_sub(1)?.min(bins - 1);
            if !d.interval_contains(&Interval::new(g.edges[t], g.edges[t + 1]), v) {
                return None;
            }
            flat = flat * bins + t;
        }
        Some(flat)
    }

    pub fn validate(&self, schema: &Schema) -> Result<()> {
        if self.filter.ndims() != schema.ndims() {
            return Err(Error::query(
                "filter",
                format!("{} intervals for {} dimensions", self.filter.ndims(), schema.ndims()),
            ));
        }
        for (d, iv) in schema.dimensions.iter().zip(&self.filter.intervals) {
            if !(iv.lo.is_finite() && iv.hi.is_finite()) || iv.lo > iv.hi {
                return Err(Error::query(
                    format!("filter.{}", d.name),
                    "interval must satisfy lo <= hi",
                ));
            }
        }
        let mut seen = vec![false; schema.ndims()];
        for g in &self.groups {
            let name = schema
                .dimensions
                .get(g.dim)
                .map(|d| d.name.clone())
                .ok_or_else(|| Error::query("group", format!("unknown dimension {}", g.dim)))?;
            if std::mem::replace(&mut seen[g.dim], true) {
                return Err(Error::query(format!("group.{name}"), "dimension grouped twice"));
            }
            let iv = self.filter.intervals[g.dim];
            if g.edges.len() < 2 || g.edges.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::query(
                    format!("group.{name}.edges"),
                    "edges must be strictly increasing, at least two",
                ));
            }
            if g.edges[0] < iv.lo || *g.edges.last().unwrap() > iv.hi {
                return Err(Error::query(
                    format!("group.{name}.edges"),
                    "edges must lie inside the filter interval",
                ));
            }
        }
        Ok(())
    }
}

/// Which structure answers the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccuracyMode {
    /// Leaf candidates from the LSH layer.
    Lsh,
    /// Leaf candidates from exhaustive tree search.
    #[default]
    Tree,
    /// Nodes `h` levels below the top (1 = root), answered from node totals
    /// by uniform downscaling; the full height is the leaf level.
    TreeAtHeight(u32),
}

impl fmt::Display for AccuracyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccuracyMode::Lsh => f.write_str("lsh"),
            AccuracyMode::Tree => f.write_str("tree"),
            AccuracyMode::TreeAtHeight(h) => write!(f, "tree@height_{h}"),
        }
    }
}

impl FromStr for AccuracyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsh" => Ok(AccuracyMode::Lsh),
            "tree" => Ok(AccuracyMode::Tree),
            _ => s
                .strip_prefix("tree@height_")
                .or_else(|| s.strip_prefix("tree@"))
                .and_then(|h| h.parse::<u32>().ok())
                .map(AccuracyMode::TreeAtHeight)
                .ok_or_else(|| {
                    Error::query(
                        "accuracy_mode",
                        format!("expected lsh, tree or tree@height_<h>, got {s:?}"),
                    )
                }),
        }
    }
}

impl Serialize for AccuracyMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AccuracyMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Restricts a categorical dimension to a set of category codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryFilter {
    pub dim: usize,
    pub codes: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    pub grid: ComputationalGrid,
    pub measure: Measure,
    pub mode: AccuracyMode,
    pub want_error_bounds: bool,
    pub align_scales: bool,
    pub categories: Vec<CategoryFilter>,
}

impl QuerySpec {
    pub fn new(grid: ComputationalGrid, measure: Measure) -> Self {
        QuerySpec {
            grid,
            measure,
            mode: AccuracyMode::Tree,
            want_error_bounds: false,
            align_scales: true,
            categories: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryMeta {
    pub elapsed_micros: u64,
    /// Subspaces (or nodes, below full height) that contributed.
    pub candidates: usize,
    /// Share of cells answered without any corner rounding; leaf level only.
    pub coincident_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResult {
    /// Bins per group axis; the grid is row-major over this shape.
    pub shape: Vec<usize>,
    /// The grid actually evaluated (after alignment).
    pub grid: ComputationalGrid,
    pub values: Vec<Option<f64>>,
    pub lower: Option<Vec<Option<f64>>>,
    pub upper: Option<Vec<Option<f64>>>,
    pub error: Option<Vec<Option<f64>>>,
    pub meta: QueryMeta,
}

/// Builds a grid over `filter` (clamped to the domain), with one group axis
/// per `(dim, binning)` pair.
pub fn make_grid(index: &Index, filter: Range, axes: &[(usize, Binning)]) -> Result<ComputationalGrid> {
    let schema = index.schema();
    if filter.ndims() != schema.ndims() {
        return Err(Error::query("filter", "dimension count mismatch"));
    }
    let mut filter = filter;
    for (d, iv) in schema.dimensions.iter().zip(filter.intervals.iter_mut()) {
        if !(iv.lo.is_finite() && iv.hi.is_finite()) || iv.lo > iv.hi {
            return Err(Error::query(
                format!("filter.{}", d.name),
                "interval must satisfy lo <= hi",
            ));
        }
        *iv = iv.clamp(d.domain_min, d.domain_max);
    }
    let mut groups = Vec::with_capacity(axes.len());
    for (dim, binning) in axes {
        let d = schema
            .dimensions
            .get(*dim)
            .ok_or_else(|| Error::query("group", format!("unknown dimension {dim}")))?;
        let field = format!("group.{}", d.name);
        let iv = filter.intervals[*dim];
        let bins_ok = |b: usize| {
            if b == 0 {
                Err(Error::query(format!("{field}.bins"), "bin count must be at least 1"))
            } else {
                Ok(())
            }
        };
        let edges = match binning {
            Binning::EquiWidth { bins } => {
                bins_ok(*bins)?;
                crate::descriptor::equi_width_edges(iv.lo, iv.hi, *bins)
            }
            Binning::Log { bins } => {
                bins_ok(*bins)?;
                if iv.lo <= 0.0 {
                    return Err(Error::query(&field, "log binning needs a positive interval"));
                }
                log_edges(iv.lo, iv.hi, *bins)
            }
            Binning::EquiData { bins } => {
                bins_ok(*bins)?;
                equi_data_edges(index, &filter, *dim, *bins)?
            }
            Binning::Explicit { edges } => {
                if edges.len() < 2 || edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::query(
                        format!("{field}.edges"),
                        "explicit edges must be finite and strictly increasing",
                    ));
                }
                if edges[0] < iv.lo || *edges.last().unwrap() > iv.hi {
                    return Err(Error::query(
                        format!("{field}.edges"),
                        "explicit edges must lie inside the filter interval",
                    ));
                }
                filter.intervals[*dim] = Interval::new(edges[0], *edges.last().unwrap());
                edges.clone()
            }
            Binning::Categories => {
                if d.kind != DimKind::Categorical {
                    return Err(Error::query(&field, "category binning needs a categorical dimension"));
                }
                let lo = iv.lo.floor();
                let hi = iv.hi.ceil().max(lo + 1.0).min(d.domain_max);
                filter.intervals[*dim] = Interval::new(lo, hi);
                (lo as u32..=hi as u32).map(f64::from).collect()
            }
        };
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::query(&field, "interval too narrow for the requested bins"));
        }
        groups.push(GroupAxis { dim: *dim, edges });
    }
    let grid = ComputationalGrid { filter, groups };
    grid.validate(schema)?;
    Ok(grid)
}

/// Geometric edges from `lo` to `hi`.
pub fn log_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..=bins)
        .map(|i| match i {
            0 => lo,
            i if i == bins => hi,
            i => (a + (b - a) * (i as f64 / bins as f64)).exp(),
        })
        .collect()
}

/// Quantile edges along `dim` estimated from a fine count query over the
/// filter. Empty stretches can merge edges, giving fewer bins.
fn equi_data_edges(index: &Index, filter: &Range, dim: usize, bins: usize) -> Result<Vec<f64>> {
    let d = &index.schema().dimensions[dim];
    let iv = filter.intervals[dim];
    if iv.lo >= iv.hi {
        return Err(Error::query(format!("group.{}", d.name), "empty interval"));
    }
    let units = (d.scale_position(iv.hi) - d.scale_position(iv.lo)).ceil() as usize;
    let fine = units.clamp(bins, (bins * 64).max(1024));
    let grid = ComputationalGrid {
        filter: filter.clone(),
        groups: vec![GroupAxis {
            dim,
            edges: crate::descriptor::equi_width_edges(iv.lo, iv.hi, fine),
        }],
    };
    let mut spec = QuerySpec::new(grid, Measure::Count);
    spec.align_scales = false;
    let r = execute(index, &spec)?;
    let fine_edges = &r.grid.groups[0].edges;
    let counts: Vec<f64> = r.values.iter().map(|v| v.unwrap_or(0.0)).collect();
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Ok(crate::descriptor::equi_width_edges(iv.lo, iv.hi, bins));
    }
    let mut edges = vec![iv.lo];
    let mut cum = 0.0;
    let mut j = 0;
    for q in 1..bins {
        let target = total * q as f64 / bins as f64;
        while j < counts.len() && cum + counts[j] < target {
            cum += counts[j];
            j += 1;
        }
        if j >= counts.len() {
            break;
        }
        let frac = if counts[j] > 0.0 {
            (target - cum) / counts[j]
        } else {
            0.0
        };
        let e = fine_edges[j] + frac * (fine_edges[j + 1] - fine_edges[j]);
        if e > *edges.last().unwrap() && e < iv.hi {
            edges.push(e);
        }
    }
    edges.push(iv.hi);
    Ok(edges)
}

fn snap_to_lattice(schema: &Schema, dim: usize, v: f64) -> f64 {
    let d = &schema.dimensions[dim];
    d.scale_edge(d.nearest_scale_boundary(v))
}

/// Moves every filter bound and bin edge to its nearest scale boundary.
/// Bins that collapse to zero width merge into their neighbours; a filter
/// interval that collapses is widened to one scale unit.
pub fn align_to_scales(schema: &Schema, grid: &ComputationalGrid) -> ComputationalGrid {
    let mut filter = grid.filter.clone();
    for (d, iv) in schema.dimensions.iter().zip(filter.intervals.iter_mut()) {
        let (lo, hi) = (d.nearest_scale_boundary(iv.lo), d.nearest_scale_boundary(iv.hi));
        let (lo, hi) = if lo == hi && iv.lo < iv.hi {
            if hi < d.scale_count {
                (lo, hi + 1)
            } else {
                (lo - 1, hi)
            }
        } else {
            (lo, hi)
        };
        *iv = Interval::new(d.scale_edge(lo), d.scale_edge(hi));
    }
    let groups = grid
        .groups
        .iter()
        .map(|g| {
            let iv = filter.intervals[g.dim];
            let mut edges: Vec<f64> = Vec::with_capacity(g.edges.len());
            for &e in &g.edges {
                let s = snap_to_lattice(schema, g.dim, e).clamp(iv.lo, iv.hi);
                if edges.last() != Some(&s) {
                    edges.push(s);
                }
            }
            edges[0] = iv.lo;
            if edges.len() < 2 {
                edges.push(iv.hi);
            } else {
                *edges.last_mut().unwrap() = iv.hi;
            }
            if edges.len() > 2 && edges[edges.len() - 2] >= iv.hi {
                edges.remove(edges.len() - 2);
            }
            GroupAxis { dim: g.dim, edges }
        })
        .collect();
    ComputationalGrid { filter, groups }
}

/// Filter rectangles after applying category sets: each set of codes splits
/// into contiguous runs, and the runs of different dimensions combine as a
/// product. The rectangles are disjoint.
fn filter_rects(schema: &Schema, filter: &Range, cats: &[CategoryFilter]) -> Result<Vec<Range>> {
    let mut rects = vec![filter.clone()];
    for cf in cats {
        let d = schema
            .dimensions
            .get(cf.dim)
            .ok_or_else(|| Error::query("categories", format!("unknown dimension {}", cf.dim)))?;
        if d.kind != DimKind::Categorical {
            return Err(Error::query(
                format!("categories.{}", d.name),
                "not a categorical dimension",
            ));
        }
        let mut codes = cf.codes.clone();
        codes.sort_unstable();
        codes.dedup();
        if let Some(&c) = codes.iter().find(|&&c| c >= d.scale_count) {
            return Err(Error::query(
                format!("categories.{}", d.name),
                format!("unknown category code {c}"),
            ));
        }
        let mut runs: Vec<(u32, u32)> = Vec::new();
        for c in codes {
            match runs.last_mut() {
                Some((_, end)) if *end == c => *end = c + 1,
                _ => runs.push((c, c + 1)),
            }
        }
        let mut next = Vec::new();
        for r in &rects {
            let iv = r.intervals[cf.dim];
            for &(a, b) in &runs {
                let lo = iv.lo.max(a as f64);
                let hi = iv.hi.min(b as f64);
                if lo < hi {
                    let mut nr = r.clone();
                    nr.intervals[cf.dim] = Interval::new(lo, hi);
                    next.push(nr);
                }
            }
        }
        rects = next;
    }
    Ok(rects)
}

fn check_spec(index: &Index, spec: &QuerySpec) -> Result<()> {
    let schema = index.schema();
    spec.grid.validate(schema)?;
    if let Some(m) = spec.measure.target() {
        if m >= schema.measures.len() {
            return Err(Error::query("measure", format!("unknown measure dimension {m}")));
        }
    }
    spec.measure.check_supported(index.descriptor())?;
    let height = index.height();
    if let AccuracyMode::TreeAtHeight(h) = spec.mode {
        if h == 0 || (height > 0 && h > height) {
            return Err(Error::query(
                "accuracy_mode",
                format!("height must be in 1..={height}, got {h}"),
            ));
        }
        if h < height && matches!(spec.measure, Measure::Median(_)) {
            return Err(Error::Unsupported(
                "median is only available at full tree height".into(),
            ));
        }
    }
    if spec.want_error_bounds {
        match spec.measure {
            Measure::Median(_) => {
                return Err(Error::Unsupported("error bounds are not defined for median".into()));
            }
            Measure::Sum(m) | Measure::Mean(m) if index.measure_min()[m] < 0.0 => {
                return Err(Error::Unsupported(format!(
                    "error bounds need a nonnegative measure; {} has negative values",
                    schema.measures[m]
                )));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Per-cell accumulators for one rounding mode.
struct Accum {
    slots: usize,
    values: Vec<f64>,
    /// Histogram parts per cell for median: (leaf, bin counts).
    parts: Option<Vec<Vec<(u32, Vec<f64>)>>>,
}

impl Accum {
    fn new(cells: usize, slots: usize, with_parts: bool) -> Self {
        Accum {
            slots,
            values: vec![0.0; cells * slots],
            parts: with_parts.then(|| vec![Vec::new(); cells]),
        }
    }

    fn cell(&self, i: usize) -> &[f64] {
        &self.values[i * self.slots..(i + 1) * self.slots]
    }
}

struct Plan<'a> {
    index: &'a Index,
    rects: Vec<Range>,
    grid: &'a ComputationalGrid,
    /// Output stride of each index dimension (0 for ungrouped ones).
    out_strides: Vec<usize>,
    ncells: usize,
}

impl Plan<'_> {
    /// Edges per index dimension for one filter rectangle.
    fn axes(&self, rect: &Range) -> Vec<Vec<f64>> {
        let mut axes: Vec<Vec<f64>> = rect.intervals.iter().map(|iv| vec![iv.lo, iv.hi]).collect();
        for g in &self.grid.groups {
            let iv = rect.intervals[g.dim];
            axes[g.dim] = g.edges.iter().map(|e| e.clamp(iv.lo, iv.hi)).collect();
        }
        axes
    }

    fn leaf_candidates(&self, rect: &Range, lsh: bool) -> Vec<u32> {
        if lsh {
            self.index.candidates_lsh(rect)
        } else {
            self.index.candidates_exact(rect)
        }
    }

    /// Accumulates leaf histogram answers. `flags`, when given, tracks per
    /// dimension and edge whether no leaf had to round it.
    fn run_leaves(
        &self,
        candidates: &[Vec<u32>],
        rounding: Rounding,
        acc: &mut Accum,
        mut flags: Option<&mut Vec<Vec<Vec<bool>>>>,
    ) {
        let d = self.index.schema().ndims();
        let histogram = matches!(self.index.descriptor(), DescriptorConfig::Histogram { .. });
        for (ri, rect) in self.rects.iter().enumerate() {
            let axes = self.axes(rect);
            for &l in &candidates[ri] {
                let leaf = &self.index.leaves()[l as usize];
                let ih = &leaf.ih;
                let mut sub = Vec::with_capacity(d);
                let mut origin = vec![0usize; d];
                let mut empty = false;
                for (k, edges) in axes.iter().enumerate() {
                    // Edges beyond the leaf's points move to the histogram
                    // boundary on that side: no points lie between, and a
                    // cell clear of the leaf then gets nothing from it.
                    let m = leaf.mbr.intervals[k];
                    let ev = &ih.edge_values()[k];
                    let (lo, hi) = (ev[0], ev[ev.len() - 1]);
                    let moved: Vec<f64> = edges
                        .iter()
                        .map(|&e| {
                            if e < m.lo {
                                lo
                            } else if e > m.hi {
                                hi
                            } else {
                                e
                            }
                        })
                        .collect();
                    let (cells, exact) = ih.snap_axis(k, &moved, rounding);
                    if let Some(f) = flags.as_deref_mut() {
                        for (e, x) in f[ri][k].iter_mut().zip(exact) {
                            *e &= x;
                        }
                    }
                    let first = cells.cells.iter().position(|&(a, b)| a < b);
                    let last = cells.cells.iter().rposition(|&(a, b)| a < b);
                    match (first, last) {
                        (Some(f), Some(t)) => {
                            origin[k] = f;
                            sub.push(AxisCells {
                                cells: cells.cells[f..=t].to_vec(),
                            });
                        }
                        _ => empty = true,
                    }
                }
                if empty {
                    continue;
                }
                let g = ih.sum_cells(&sub);
                let shape = &g.shape;
                let mut idx = vec![0usize; d];
                for i in 0..g.cell_count() {
                    let out: usize = (0..d).map(|k| (origin[k] + idx[k]) * self.out_strides[k]).sum();
                    let c = g.cell(i);
                    if histogram {
                        let n: f64 = c.iter().sum();
                        acc.values[out] += n;
                        if let Some(parts) = acc.parts.as_mut() {
                            if n > 0.0 {
                                parts[out].push((l, c.to_vec()));
                            }
                        }
                    } else {
                        for (a, v) in acc.values[out * acc.slots..(out + 1) * acc.slots].iter_mut().zip(c) {
                            *a += v;
                        }
                    }
                    for k in (0..d).rev() {
                        idx[k] += 1;
                        if idx[k] < shape[k] {
                            break;
                        }
                        idx[k] = 0;
                    }
                }
            }
        }
    }

    /// Accumulates node totals scaled by the share of each node rectangle
    /// inside each cell, assuming uniform density within the node.
    fn run_nodes(&self, candidates: &[Vec<u32>], rounding: Rounding, acc: &mut Accum) {
        let schema = self.index.schema();
        let d = schema.ndims();
        for (ri, rect) in self.rects.iter().enumerate() {
            let axes = self.axes(rect);
            for &n in &candidates[ri] {
                let node = &self.index.nodes()[n as usize];
                let mut per_dim: Vec<Vec<f64>> = Vec::with_capacity(d);
                for (k, edges) in axes.iter().enumerate() {
                    let dim = &schema.dimensions[k];
                    let m = node.mbr.intervals[k];
                    let w = m.width();
                    per_dim.push(
                        edges
                            .windows(2)
                            .map(|e| {
                                let cell = Interval::new(e[0], e[1]);
                                let closed_top = e[1] >= dim.domain_max;
                                let touches =
                                    m.lo <= e[1] && m.hi >= e[0] && (m.lo < e[1] || closed_top) && e[0] < e[1];
                                let inside = e[0] <= m.lo && (m.hi < e[1] || (closed_top && m.hi <= e[1]));
                                match rounding {
                                    Rounding::Inner => f64::from(u8::from(inside)),
                                    Rounding::Outer => f64::from(u8::from(touches)),
                                    Rounding::Nearest if w > 0.0 => {
                                        ((e[1].min(m.hi) - e[0].max(m.lo)) / w).clamp(0.0, 1.0)
                                    }
                                    Rounding::Nearest => f64::from(u8::from(dim.interval_contains(&cell, m.lo))),
                                }
                            })
                            .collect(),
                    );
                }
                let counts: Vec<usize> = per_dim.iter().map(Vec::len).collect();
                let total: usize = counts.iter().product();
                let mut idx = vec![0usize; d];
                for _ in 0..total {
                    let f: f64 = (0..d).map(|k| per_dim[k][idx[k]]).product();
                    if f > 0.0 {
                        let out: usize = (0..d).map(|k| idx[k] * self.out_strides[k]).sum();
                        for (a, v) in acc.values[out * acc.slots..(out + 1) * acc.slots]
                            .iter_mut()
                            .zip(&node.total)
                        {
                            *a += v * f;
                        }
                    }
                    for k in (0..d).rev() {
                        idx[k] += 1;
                        if idx[k] < counts[k] {
                            break;
                        }
                        idx[k] = 0;
                    }
                }
            }
        }
    }
}

fn estimate(acc: &Accum, cell: usize, measure: Measure, index: &Index) -> Option<f64> {
    let c = acc.cell(cell);
    match measure {
        Measure::Count => Some(c[0]),
        Measure::Sum(m) => Some(c[1 + m]),
        Measure::Mean(m) => (c[0] > 0.0).then(|| c[1 + m] / c[0]),
        Measure::Median(_) => {
            let parts = &acc.parts.as_ref().expect("median keeps parts")[cell];
            let views: Vec<(&[f64], &[f64])> = parts
                .iter()
                .map(|(l, bins)| {
                    let edges = index.leaves()[*l as usize].ih.hist_edges().expect("histogram leaf");
                    (edges, bins.as_slice())
                })
                .collect();
            histogram_median(&views)
        }
    }
}

/// Answers `spec` against `index`.
pub fn execute(index: &Index, spec: &QuerySpec) -> Result<QueryResult> {
    let started = Instant::now();
    check_spec(index, spec)?;
    let schema = index.schema();
    let grid = if spec.align_scales {
        align_to_scales(schema, &spec.grid)
    } else {
        spec.grid.clone()
    };
    let rects = filter_rects(schema, &grid.filter, &spec.categories)?;
    let d = schema.ndims();
    let shape = grid.shape();
    let ncells = grid.cell_count();
    let mut out_strides = vec![0usize; d];
    let mut s = 1;
    for g in grid.groups.iter().rev() {
        out_strides[g.dim] = s;
        s *= g.bins();
    }
    let plan = Plan {
        index,
        rects,
        grid: &grid,
        out_strides,
        ncells,
    };

    let height = index.height();
    let level = match spec.mode {
        AccuracyMode::TreeAtHeight(h) if h < height => Some(height - h),
        _ => None,
    };
    let slots = index.descriptor().total_slots();
    let median = matches!(spec.measure, Measure::Median(_));
    let mut roundings = vec![Rounding::Nearest];
    if spec.want_error_bounds {
        roundings.extend([Rounding::Inner, Rounding::Outer]);
    }

    let mut accs = Vec::with_capacity(roundings.len());
    let (candidate_count, coincident_fraction) = match level {
        Some(level) => {
            let candidates: Vec<Vec<u32>> = plan.rects.iter().map(|r| index.nodes_intersecting(r, level)).collect();
            for &r in &roundings {
                let mut acc = Accum::new(plan.ncells, slots, false);
                plan.run_nodes(&candidates, r, &mut acc);
                accs.push(acc);
            }
            (count_distinct(&candidates), None)
        }
        None => {
            let lsh = spec.mode == AccuracyMode::Lsh;
            let candidates: Vec<Vec<u32>> = plan.rects.iter().map(|r| plan.leaf_candidates(r, lsh)).collect();
            let mut flags: Vec<Vec<Vec<bool>>> = plan
                .rects
                .iter()
                .map(|r| plan.axes(r).iter().map(|e| vec![true; e.len()]).collect())
                .collect();
            for (i, &r) in roundings.iter().enumerate() {
                let mut acc = Accum::new(plan.ncells, slots, median && i == 0);
                plan.run_leaves(&candidates, r, &mut acc, (i == 0).then_some(&mut flags));
                accs.push(acc);
            }
            (count_distinct(&candidates), Some(coincident(&plan, &flags)))
        }
    };

    let values: Vec<Option<f64>> = (0..ncells)
        .map(|c| estimate(&accs[0], c, spec.measure, index))
        .collect();
    let (lower, upper, error) = if spec.want_error_bounds {
        let (inner, outer) = (&accs[1], &accs[2]);
        let (lo, hi): (Vec<Option<f64>>, Vec<Option<f64>>) = (0..ncells)
            .map(|c| match spec.measure {
                Measure::Mean(m) => {
                    let (ci, co) = (inner.cell(c), outer.cell(c));
                    let lo = (co[0] > 0.0).then(|| ci[1 + m] / co[0]);
                    let hi = (ci[0] > 0.0).then(|| co[1 + m] / ci[0]);
                    (lo, hi)
                }
                m => (estimate(inner, c, m, index), estimate(outer, c, m, index)),
            })
            .unzip();
        let err = (0..ncells)
            .map(|c| match (values[c], lo[c], hi[c]) {
                (Some(v), Some(a), Some(b)) if v != 0.0 => Some((b - a) / v),
                _ => None,
            })
            .collect();
        (Some(lo), Some(hi), Some(err))
    } else {
        (None, None, None)
    };

    Ok(QueryResult {
        shape,
        grid,
        values,
        lower,
        upper,
        error,
        meta: QueryMeta {
            elapsed_micros: started.elapsed().as_micros() as u64,
            candidates: candidate_count,
            coincident_fraction,
        },
    })
}

fn count_distinct(c: &[Vec<u32>]) -> usize {
    if c.len() == 1 {
        return c[0].len();
    }
    let mut all: Vec<u32> = c.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    all.len()
}

/// Fraction of output cells none of whose edges were rounded by any leaf.
fn coincident(plan: &Plan<'_>, flags: &[Vec<Vec<bool>>]) -> f64 {
    if plan.ncells == 0 {
        return 1.0;
    }
    let d = plan.index.schema().ndims();
    let mut ok = vec![true; plan.ncells];
    let group_of: Vec<Option<usize>> = (0..d)
        .map(|k| plan.grid.groups.iter().position(|g| g.dim == k))
        .collect();
    for f in flags {
        for (c, slot) in ok.iter_mut().enumerate() {
            let cell = plan.grid.unflatten(c);
            let exact = (0..d).all(|k| match group_of[k] {
                Some(g) => f[k][cell[g]] && f[k][cell[g] + 1],
                None => f[k][0] && f[k][1],
            });
            *slot &= exact;
        }
    }
    ok.iter().filter(|&&b| b).count() as f64 / plan.ncells as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::DescriptorConfig;
    use crate::index::{build_index, BuildConfig};
    use crate::model::{DataPoint, DimensionSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schema() -> Schema {
        Schema::new(
            vec![
                DimensionSpec::numeric("x", 0.0, 100.0, 100).unwrap(),
                DimensionSpec::numeric("y", 0.0, 50.0, 50).unwrap(),
                DimensionSpec::categorical("day", (0..7).map(|i| format!("d{i}")).collect()).unwrap(),
            ],
            vec!["w".into()],
        )
        .unwrap()
    }

    fn points(n: usize) -> Vec<DataPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..n)
            .map(|_| {
                let x: f64 = rng.gen::<f64>().powi(2) * 100.0;
                let y: f64 = rng.gen_range(0.0..50.0);
                let day = rng.gen_range(0..7) as f64;
                DataPoint::new(vec![x, y, day], vec![rng.gen_range(0.0..10.0)])
            })
            .collect()
    }

    fn index() -> (Index, Vec<DataPoint>) {
        let pts = points(8000);
        let cfg = BuildConfig {
            m_max: 16,
            ..Default::default()
        };
        (
            build_index(&schema(), &pts, DescriptorConfig::Aggregate { measures: 1 }, &cfg).unwrap(),
            pts,
        )
    }

    /// Linear scan, cell by cell.
    fn scan(
        pts: &[DataPoint],
        schema: &Schema,
        grid: &ComputationalGrid,
        f: impl Fn(&[&DataPoint]) -> Option<f64>,
    ) -> Vec<Option<f64>> {
        (0..grid.cell_count())
            .map(|c| {
                let r = grid.cell_range(&grid.unflatten(c));
                let inside: Vec<&DataPoint> = pts.iter().filter(|p| schema.range_contains(&r, &p.coords)).collect();
                f(&inside)
            })
            .collect()
    }

    fn count(p: &[&DataPoint]) -> Option<f64> {
        Some(p.len() as f64)
    }

    #[test]
    fn grid_strategies() {
        let (idx, _) = index();
        let f = idx.schema().full_range();
        let g = make_grid(&idx, f.clone(), &[(0, Binning::EquiWidth { bins: 5 })]).unwrap();
        assert_eq!(g.groups[0].edges, vec![0.0, 20.0, 40.0, 60.0, 80.0, 100.0]);
        let mut f2 = f.clone();
        f2.intervals[0] = Interval::new(1.0, 100.0);
        let g = make_grid(&idx, f2, &[(0, Binning::Log { bins: 2 })]).unwrap();
        assert!((g.groups[0].edges[1] - 10.0).abs() < 1e-9);
        let e = log_edges(1.0, 1000.0, 3);
        for (a, b) in e.iter().zip([1.0, 10.0, 100.0, 1000.0]) {
            assert!((a - b).abs() <= 1e-9 * b);
        }
        assert!(make_grid(&idx, f.clone(), &[(0, Binning::Log { bins: 2 })]).is_err());
        assert!(make_grid(&idx, f.clone(), &[(0, Binning::EquiWidth { bins: 0 })]).is_err());
        assert!(make_grid(&idx, f.clone(), &[(0, Binning::Explicit { edges: vec![3.0, 2.0] })]).is_err());
        let g = make_grid(
            &idx,
            f.clone(),
            &[(
                0,
                Binning::Explicit {
                    edges: vec![10.0, 12.5, 30.0],
                },
            )],
        )
        .unwrap();
        assert_eq!(g.filter.intervals[0], Interval::new(10.0, 30.0));
        let g = make_grid(&idx, f, &[(2, Binning::Categories)]).unwrap();
        assert_eq!(g.groups[0].edges.len(), 8);
    }

    #[test]
    fn equi_data_balances_mass() {
        let (idx, pts) = index();
        let g = make_grid(&idx, idx.schema().full_range(), &[(0, Binning::EquiData { bins: 8 })]).unwrap();
        assert_eq!(g.groups[0].bins(), 8);
        let counts: Vec<f64> = scan(&pts, idx.schema(), &g, count)
            .into_iter()
            .map(Option::unwrap)
            .collect();
        let max = counts.iter().cloned().fold(0.0, f64::max);
        let min = counts.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max / min <= 2.0, "{counts:?}");
    }

    #[test]
    fn alignment_snaps_and_merges() {
        let s = schema();
        let mut filter = s.full_range();
        filter.intervals[0] = Interval::new(10.2, 40.7);
        let grid = ComputationalGrid {
            filter,
            groups: vec![GroupAxis {
                dim: 0,
                edges: vec![10.2, 10.4, 20.6, 40.7],
            }],
        };
        let a = align_to_scales(&s, &grid);
        assert_eq!(a.filter.intervals[0], Interval::new(10.0, 41.0));
        assert_eq!(a.groups[0].edges, vec![10.0, 21.0, 41.0]);
        // Fixpoint.
        assert_eq!(align_to_scales(&s, &a), a);
    }

    #[test]
    fn full_domain_count_is_total() {
        let (idx, _) = index();
        let g = make_grid(&idx, idx.schema().full_range(), &[]).unwrap();
        for mode in [
            AccuracyMode::Tree,
            AccuracyMode::Lsh,
            AccuracyMode::TreeAtHeight(1),
            AccuracyMode::TreeAtHeight(idx.height()),
        ] {
            let mut spec = QuerySpec::new(g.clone(), Measure::Count);
            spec.mode = mode;
            let r = execute(&idx, &spec).unwrap();
            assert!((r.values[0].unwrap() - 8000.0).abs() < 1e-6, "{mode}");
        }
    }

    #[test]
    fn aligned_queries_are_exact_and_disjoint_cover_sums() {
        let (idx, pts) = index();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let x0 = rng.gen_range(0..90) as f64;
            let y0 = rng.gen_range(0..40) as f64;
            let mut f = idx.schema().full_range();
            f.intervals[0] = Interval::new(x0, x0 + rng.gen_range(1..=10) as f64);
            f.intervals[1] = Interval::new(y0, y0 + rng.gen_range(1..=10) as f64);
            let g = make_grid(
                &idx,
                f,
                &[(0, Binning::EquiWidth { bins: 1 }), (1, Binning::EquiWidth { bins: 1 })],
            )
            .unwrap();
            let r = execute(&idx, &QuerySpec::new(g.clone(), Measure::Count)).unwrap();
            assert_eq!(r.values, scan(&pts, idx.schema(), &r.grid, count));
        }
        let g = make_grid(
            &idx,
            idx.schema().full_range(),
            &[(0, Binning::EquiWidth { bins: 20 }), (2, Binning::Categories)],
        )
        .unwrap();
        let r = execute(&idx, &QuerySpec::new(g, Measure::Count)).unwrap();
        assert_eq!(r.values.iter().map(|v| v.unwrap()).sum::<f64>(), 8000.0);
        assert_eq!(r.meta.coincident_fraction, Some(1.0));
    }

    #[test]
    fn bounds_contain_exact_values() {
        let (idx, pts) = index();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x0: f64 = rng.gen_range(0.0..80.0);
            let y0: f64 = rng.gen_range(0.0..40.0);
            let mut f = idx.schema().full_range();
            f.intervals[0] = Interval::new(x0, x0 + rng.gen_range(1.0..20.0));
            f.intervals[1] = Interval::new(y0, y0 + rng.gen_range(1.0..10.0));
            let g = make_grid(
                &idx,
                f,
                &[(0, Binning::EquiWidth { bins: 4 }), (1, Binning::EquiWidth { bins: 3 })],
            )
            .unwrap();
            for measure in [Measure::Count, Measure::Sum(0), Measure::Mean(0)] {
                for mode in [
                    AccuracyMode::Tree,
                    AccuracyMode::TreeAtHeight(1),
                    AccuracyMode::TreeAtHeight(2),
                ] {
                    let mut spec = QuerySpec::new(g.clone(), measure);
                    spec.align_scales = false;
                    spec.want_error_bounds = true;
                    spec.mode = mode;
                    let r = execute(&idx, &spec).unwrap();
                    let exact = scan(&pts, idx.schema(), &r.grid, |p| match measure {
                        Measure::Count => Some(p.len() as f64),
                        Measure::Sum(_) => Some(p.iter().map(|q| q.measures[0]).sum()),
                        _ => (!p.is_empty()).then(|| p.iter().map(|q| q.measures[0]).sum::<f64>() / p.len() as f64),
                    });
                    let (lo, hi, err) = (r.lower.unwrap(), r.upper.unwrap(), r.error.unwrap());
                    for c in 0..exact.len() {
                        if let (Some(e), Some(a), Some(b)) = (exact[c], lo[c], hi[c]) {
                            let tol = 1e-9 * e.abs().max(1.0);
                            assert!(a <= e + tol && e <= b + tol, "{measure:?} {mode} {a} {e} {b}");
                        }
                        match (r.values[c], lo[c], hi[c]) {
                            (Some(v), Some(a), Some(b)) if v != 0.0 => assert_eq!(err[c], Some((b - a) / v)),
                            _ => assert_eq!(err[c], None),
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn categories_filter_and_group() {
        let (idx, pts) = index();
        let g = make_grid(&idx, idx.schema().full_range(), &[(0, Binning::EquiWidth { bins: 10 })]).unwrap();
        let all = execute(&idx, &QuerySpec::new(g.clone(), Measure::Count)).unwrap();
        let mut spec = QuerySpec::new(g.clone(), Measure::Count);
        spec.categories = vec![CategoryFilter {
            dim: 2,
            codes: (0..7).collect(),
        }];
        assert_eq!(execute(&idx, &spec).unwrap().values, all.values);
        spec.categories = vec![CategoryFilter {
            dim: 2,
            codes: vec![5, 1, 2],
        }];
        let r = execute(&idx, &spec).unwrap();
        let exact = scan(&pts, idx.schema(), &r.grid, |p| {
            Some(p.iter().filter(|q| [1.0, 2.0, 5.0].contains(&q.coords[2])).count() as f64)
        });
        assert_eq!(r.values, exact);
        spec.categories = vec![CategoryFilter { dim: 2, codes: vec![9] }];
        assert!(execute(&idx, &spec).is_err());
        spec.categories = vec![CategoryFilter { dim: 0, codes: vec![1] }];
        assert!(execute(&idx, &spec).is_err());
    }

    #[test]
    fn unsupported_combinations() {
        let (idx, _) = index();
        let g = make_grid(&idx, idx.schema().full_range(), &[]).unwrap();
        let mut spec = QuerySpec::new(g, Measure::Median(0));
        assert!(matches!(execute(&idx, &spec), Err(Error::Unsupported(_))));
        spec.measure = Measure::Count;
        spec.mode = AccuracyMode::TreeAtHeight(idx.height() + 1);
        assert!(matches!(execute(&idx, &spec), Err(Error::InvalidQuery { .. })));
        spec.mode = AccuracyMode::TreeAtHeight(0);
        assert!(execute(&idx, &spec).is_err());
    }

    #[test]
    fn median_from_histograms() {
        let pts = points(5000);
        let cfg = BuildConfig {
            m_max: 16,
            ..Default::default()
        };
        let idx = build_index(
            &schema(),
            &pts,
            DescriptorConfig::Histogram { measure: 0, bins: 32 },
            &cfg,
        )
        .unwrap();
        let g = make_grid(&idx, idx.schema().full_range(), &[(2, Binning::Categories)]).unwrap();
        let mut spec = QuerySpec::new(g.clone(), Measure::Median(0));
        let r = execute(&idx, &spec).unwrap();
        let exact = scan(&pts, idx.schema(), &r.grid, |p| {
            let mut v: Vec<f64> = p.iter().map(|q| q.measures[0]).collect();
            v.sort_by(f64::total_cmp);
            Some(v[v.len() / 2])
        });
        for (a, e) in r.values.iter().zip(&exact) {
            // Local bins span at most the measure range 0..10.
            assert!((a.unwrap() - e.unwrap()).abs() <= 10.0 / 32.0 * 2.0, "{a:?} {e:?}");
        }
        spec.measure = Measure::Count;
        let c = execute(&idx, &spec).unwrap();
        assert_eq!(c.values.iter().map(|v| v.unwrap()).sum::<f64>(), 5000.0);
        spec.measure = Measure::Mean(0);
        assert!(matches!(execute(&idx, &spec), Err(Error::Unsupported(_))));
    }

    #[test]
    fn accuracy_mode_strings() {
        for m in [AccuracyMode::Lsh, AccuracyMode::Tree, AccuracyMode::TreeAtHeight(3)] {
            assert_eq!(m.to_string().parse::<AccuracyMode>().unwrap(), m);
        }
        assert_eq!("tree@2".parse::<AccuracyMode>().unwrap(), AccuracyMode::TreeAtHeight(2));
        assert!("fast".parse::<AccuracyMode>().is_err());
    }

    #[test]
    fn empty_index_answers_zero() {
        let idx = build_index(
            &schema(),
            &Vec::<DataPoint>::new(),
            DescriptorConfig::Aggregate { measures: 1 },
            &BuildConfig::default(),
        )
        .unwrap();
        let g = make_grid(&idx, idx.schema().full_range(), &[(0, Binning::EquiWidth { bins: 3 })]).unwrap();
        let mut spec = QuerySpec::new(g, Measure::Mean(0));
        spec.want_error_bounds = true;
        let r = execute(&idx, &spec).unwrap();
        assert_eq!(r.values, vec![None; 3]);
        assert_eq!(r.error.unwrap(), vec![None; 3]);
    }
}
