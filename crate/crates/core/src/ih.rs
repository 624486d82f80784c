//! Integral histograms: d-dimensional summed-area tables of feature
//! descriptors over one subspace.
//!
//! Cell edges are lattice boundaries of the schema's scale grid. The table
//! stores inclusive prefix sums; the exclusive prefix at boundary index 0 is
//! the zero descriptor and is never materialized.
//!
//! Rectangle and grid queries share one routine: gather the prefix values at
//! the snapped boundary lattice, then take adjacent differences one axis at a
//! time. A single rectangle is the `2^d`-corner special case, so a grid cell
//! and the matching rectangle query perform the same floating-point
//! operations in the same order.

use serde::{Deserialize, Serialize};

use crate::descriptor::{bin_index, equi_width_edges, DescriptorConfig, FeatureDescriptor};
use crate::error::{Error, Result};
use crate::model::{DataPoint, Range, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    /// Each corner moves to the closest cell boundary.
    #[default]
    Nearest,
    /// Largest boundary-aligned rectangle inside the query.
    Inner,
    /// Smallest boundary-aligned rectangle containing the query.
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Corner {
    Lower,
    Upper,
}

/// Per-dimension cell boundaries of one integral histogram.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhGeometry {
    /// Lattice indices of the cell boundaries, strictly increasing.
    pub cell_edges: Vec<Vec<u32>>,
}

impl IhGeometry {
    /// Snaps `bounds` outward to the scale lattice and divides each dimension
    /// into at most `max_cells_per_dim` cells of whole lattice units.
    pub fn for_bounds(schema: &Schema, bounds: &Range, max_cells_per_dim: u32) -> Result<Self> {
        if bounds.ndims() != schema.ndims() {
            return Err(Error::Construction(format!(
                "bounds have {} dims, schema {}",
                bounds.ndims(),
                schema.ndims()
            )));
        }
        if max_cells_per_dim == 0 {
            return Err(Error::Construction("resolution must be at least 1".into()));
        }
        let cell_edges = schema
            .dimensions
            .iter()
            .zip(&bounds.intervals)
            .map(|(d, iv)| {
                let lo = d.scale_cell(iv.lo);
                let hi = d.scale_cell(iv.hi) + 1;
                let span = hi - lo;
                let n = span.min(max_cells_per_dim);
                (0..=n)
                    .map(|i| lo + ((i as u64 * span as u64) / n as u64) as u32)
                    .collect()
            })
            .collect();
        Ok(IhGeometry { cell_edges })
    }

    pub fn cell_counts(&self) -> Vec<usize> {
        self.cell_edges.iter().map(|e| e.len() - 1).collect()
    }

    pub fn total_cells(&self) -> usize {
        self.cell_counts().iter().product()
    }

    /// Lattice-aligned bounds of the histogram as values.
    pub fn bounds(&self, schema: &Schema) -> Range {
        Range::new(
            schema
                .dimensions
                .iter()
                .zip(&self.cell_edges)
                .map(|(d, e)| crate::model::Interval::new(d.scale_edge(e[0]), d.scale_edge(*e.last().unwrap())))
                .collect(),
        )
    }
}

/// Dense descriptor table for one subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralHistogram {
    geometry: IhGeometry,
    /// Boundary values, cached from the lattice.
    edge_values: Vec<Vec<f64>>,
    domain_max: Vec<f64>,
    config: DescriptorConfig,
    slots: usize,
    counts: Vec<usize>,
    strides: Vec<usize>,
    table: Vec<f64>,
    /// Local value range of the histogram measure and its bin edges.
    local_range: Option<(f64, f64)>,
    hist_edges: Option<Vec<f64>>,
    finalized: bool,
}

/// Descriptors of a batch of cells, row-major over the query axes.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorGrid {
    pub shape: Vec<usize>,
    pub slots: usize,
    pub values: Vec<f64>,
}

impl DescriptorGrid {
    pub fn cell(&self, flat: usize) -> &[f64] {
        &self.values[flat * self.slots..(flat + 1) * self.slots]
    }

    pub fn cell_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Snapped cell ranges along one axis, as boundary indices `(a, b)`, `a <= b`.
#[derive(Debug, Clone)]
pub(crate) struct AxisCells {
    pub cells: Vec<(usize, usize)>,
}

impl IntegralHistogram {
    /// Empty (all-zero) histogram ready for accumulation. `local_range` is
    /// required for histogram descriptors.
    pub fn with_geometry(
        schema: &Schema,
        geometry: IhGeometry,
        config: DescriptorConfig,
        local_range: Option<(f64, f64)>,
    ) -> Result<Self> {
        if geometry.cell_edges.len() != schema.ndims() {
            return Err(Error::Construction("geometry/schema dimension mismatch".into()));
        }
        let edge_values: Vec<Vec<f64>> = schema
            .dimensions
            .iter()
            .zip(&geometry.cell_edges)
            .map(|(d, e)| e.iter().map(|&k| d.scale_edge(k)).collect())
            .collect();
        for (d, ev) in schema.dimensions.iter().zip(&edge_values) {
            if ev.len() < 2 || ev.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Construction(format!(
                    "{}: cell edges must be strictly increasing",
                    d.name
                )));
            }
        }
        let counts = geometry.cell_counts();
        let mut strides = vec![1; counts.len()];
        for k in (0..counts.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * counts[k + 1];
        }
        let slots = config.slots();
        let hist_edges = match config {
            DescriptorConfig::Histogram { bins, .. } => {
                let (lo, hi) = local_range.unwrap_or((0.0, 0.0));
                Some(equi_width_edges(lo, hi, bins))
            }
            DescriptorConfig::Aggregate { .. } => None,
        };
        let total: usize = counts.iter().product();
        Ok(IntegralHistogram {
            domain_max: schema.dimensions.iter().map(|d| d.domain_max).collect(),
            edge_values,
            geometry,
            config,
            slots,
            counts,
            strides,
            table: vec![0.0; total * slots],
            local_range: if hist_edges.is_some() {
                local_range.or(Some((0.0, 0.0)))
            } else {
                None
            },
            hist_edges,
            finalized: false,
        })
    }

    pub fn geometry(&self) -> &IhGeometry {
        &self.geometry
    }

    pub fn config(&self) -> &DescriptorConfig {
        &self.config
    }

    pub fn cell_counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn edge_values(&self) -> &[Vec<f64>] {
        &self.edge_values
    }

    pub fn hist_edges(&self) -> Option<&[f64]> {
        self.hist_edges.as_deref()
    }

    pub fn local_range(&self) -> Option<(f64, f64)> {
        self.local_range
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn ndims(&self) -> usize {
        self.counts.len()
    }

    /// Number of `f64` slots held by the table.
    pub fn storage_slots(&self) -> usize {
        self.table.len()
    }

    fn cell_of(&self, coords: &[f64]) -> Option<usize> {
        let mut flat = 0;
        for (k, &v) in coords.iter().enumerate() {
            let ev = &self.edge_values[k];
            let top = *ev.last().unwrap();
            let inside = v >= ev[0] && (v < top || (top >= self.domain_max[k] && v <= top));
            if !inside {
                return None;
            }
            flat += bin_index(ev, v) * self.strides[k];
        }
        Some(flat)
    }

    /// Adds one point's raw descriptor to its cell. Only valid before
    /// [`finalize`](Self::finalize).
    pub fn insert(&mut self, p: &DataPoint) -> Result<()> {
        if self.finalized {
            return Err(Error::Construction("insert after finalize".into()));
        }
        let cell = self
            .cell_of(&p.coords)
            .ok_or_else(|| Error::Construction(format!("point {:?} outside histogram bounds", p.coords)))?;
        let base = cell * self.slots;
        match self.config {
            DescriptorConfig::Aggregate { measures } => {
                self.table[base] += 1.0;
                for m in 0..measures {
                    let v = p
                        .measures
                        .get(m)
                        .copied()
                        .ok_or_else(|| Error::Construction(format!("point lacks measure {m}")))?;
                    self.table[base + 1 + m] += v;
                }
            }
            DescriptorConfig::Histogram { measure, .. } => {
                let v = p
                    .measures
                    .get(measure)
                    .copied()
                    .ok_or_else(|| Error::Construction(format!("point lacks measure {measure}")))?;
                let b = bin_index(self.hist_edges.as_ref().unwrap(), v);
                self.table[base + b] += 1.0;
            }
        }
        Ok(())
    }

    /// Converts raw per-cell descriptors into inclusive prefix sums, one
    /// dimension at a time.
    pub fn finalize(&mut self) {
        if self.finalized {
            return;
        }
        let total: usize = self.counts.iter().product();
        let slots = self.slots;
        for k in 0..self.counts.len() {
            let stride = self.strides[k];
            let n = self.counts[k];
            for cell in 0..total {
                if (cell / stride).is_multiple_of(n) {
                    continue;
                }
                let (dst, src) = (cell * slots, (cell - stride) * slots);
                for s in 0..slots {
                    self.table[dst + s] += self.table[src + s];
                }
            }
        }
        self.finalized = true;
    }

    /// Descriptor of everything inserted (the maximal-corner entry).
    pub fn total(&self) -> FeatureDescriptor {
        let total: usize = self.counts.iter().product();
        let values = if self.finalized {
            self.table[(total - 1) * self.slots..total * self.slots].to_vec()
        } else {
            let mut acc = vec![0.0; self.slots];
            for c in self.table.chunks_exact(self.slots) {
                crate::descriptor::add_slots(&mut acc, c);
            }
            acc
        };
        FeatureDescriptor::new(self.config.kind(), values)
    }

    /// Rebuilds a finalized histogram from stored parts.
    pub(crate) fn from_parts(
        schema: &Schema,
        geometry: IhGeometry,
        config: DescriptorConfig,
        local_range: Option<(f64, f64)>,
        table: Vec<f64>,
    ) -> Result<Self> {
        let mut ih = Self::with_geometry(schema, geometry, config, local_range)?;
        if table.len() != ih.table.len() {
            return Err(Error::Format(format!(
                "table has {} slots, geometry needs {}",
                table.len(),
                ih.table.len()
            )));
        }
        ih.table = table;
        ih.finalized = true;
        Ok(ih)
    }

    /// Snapped boundary index of `x` on dimension `k`. `x` must already be
    /// clipped to the histogram bounds. Also reports whether `x` sits exactly
    /// on a boundary.
    fn snap(&self, k: usize, x: f64, corner: Corner, rounding: Rounding) -> (usize, bool) {
        let ev = &self.edge_values[k];
        let n = ev.len() - 1;
        // ev[i-1] <= x < ev[i]
        let i = ev.partition_point(|&e| e <= x);
        if i == 0 {
            return (0, x == ev[0]);
        }
        let below = i - 1;
        if ev[below] == x {
            return (below, true);
        }
        if below == n {
            return (n, false);
        }
        let above = i;
        let idx = match (rounding, corner) {
            (Rounding::Nearest, _) => {
                if x - ev[below] <= ev[above] - x {
                    below
                } else {
                    above
                }
            }
            (Rounding::Inner, Corner::Lower) | (Rounding::Outer, Corner::Upper) => above,
            (Rounding::Inner, Corner::Upper) | (Rounding::Outer, Corner::Lower) => below,
        };
        (idx, false)
    }

    fn clip(&self, k: usize, x: f64) -> f64 {
        let ev = &self.edge_values[k];
        x.clamp(ev[0], *ev.last().unwrap())
    }

    /// Snaps the cells `[edges[t], edges[t+1])` of one axis.
    pub(crate) fn snap_axis(&self, k: usize, edges: &[f64], rounding: Rounding) -> (AxisCells, Vec<bool>) {
        let mut exact = Vec::with_capacity(edges.len());
        let mut cells = Vec::with_capacity(edges.len().saturating_sub(1));
        match rounding {
            Rounding::Nearest => {
                let snapped: Vec<usize> = edges
                    .iter()
                    .map(|&e| {
                        let (i, ex) = self.snap(k, self.clip(k, e), Corner::Lower, rounding);
                        exact.push(ex);
                        i
                    })
                    .collect();
                for w in snapped.windows(2) {
                    cells.push((w[0], w[1].max(w[0])));
                }
            }
            Rounding::Inner | Rounding::Outer => {
                for (t, w) in edges.windows(2).enumerate() {
                    let (a, ea) = self.snap(k, self.clip(k, w[0]), Corner::Lower, rounding);
                    let (b, eb) = self.snap(k, self.clip(k, w[1]), Corner::Upper, rounding);
                    if t == 0 {
                        exact.push(ea);
                    }
                    exact.push(eb);
                    cells.push((a, b.max(a)));
                }
            }
        }
        (AxisCells { cells }, exact)
    }

    /// Batched query: `axes[k]` lists the cell edges on dimension `k` (at
    /// least two; a plain filter interval is `[lo, hi]`). Returns one
    /// descriptor per cell of the product grid.
    pub fn query_grid(&self, axes: &[Vec<f64>], rounding: Rounding) -> Result<DescriptorGrid> {
        if axes.len() != self.ndims() {
            return Err(Error::query(
                "grid",
                format!("{} axes for {} dims", axes.len(), self.ndims()),
            ));
        }
        for (k, e) in axes.iter().enumerate() {
            if e.len() < 2 || e.windows(2).any(|w| !(w[0] <= w[1])) {
                return Err(Error::query(
                    format!("grid.axis[{k}]"),
                    "edges must be sorted, at least two",
                ));
            }
        }
        let snapped: Vec<AxisCells> = axes
            .iter()
            .enumerate()
            .map(|(k, e)| self.snap_axis(k, e, rounding).0)
            .collect();
        Ok(self.sum_cells(&snapped))
    }

    /// Descriptor of the points in `rect`, with corners snapped per `rounding`.
    /// A rectangle disjoint from the histogram yields the zero descriptor.
    pub fn query_rect(&self, rect: &Range, rounding: Rounding) -> Result<FeatureDescriptor> {
        if rect.ndims() != self.ndims() {
            return Err(Error::query("rect", "dimension mismatch"));
        }
        let axes: Vec<Vec<f64>> = rect.intervals.iter().map(|iv| vec![iv.lo, iv.hi.max(iv.lo)]).collect();
        let grid = self.query_grid(&axes, rounding)?;
        Ok(FeatureDescriptor::new(self.config.kind(), grid.values))
    }

    /// Gathers exclusive prefix values at every boundary the cells touch and
    /// differences them axis by axis.
    pub(crate) fn sum_cells(&self, axes: &[AxisCells]) -> DescriptorGrid {
        let d = self.ndims();
        let slots = self.slots;

        // Distinct boundary indices per axis and each cell's positions in them.
        let mut uniq: Vec<Vec<usize>> = Vec::with_capacity(d);
        let mut pos: Vec<Vec<(usize, usize)>> = Vec::with_capacity(d);
        for ax in axes {
            let mut u: Vec<usize> = ax.cells.iter().flat_map(|&(a, b)| [a, b]).collect();
            u.sort_unstable();
            u.dedup();
            let p = ax
                .cells
                .iter()
                .map(|&(a, b)| (u.binary_search(&a).unwrap(), u.binary_search(&b).unwrap()))
                .collect();
            uniq.push(u);
            pos.push(p);
        }

        // Gather the lattice of exclusive prefix values.
        let mut shape: Vec<usize> = uniq.iter().map(Vec::len).collect();
        let lattice_len: usize = shape.iter().product();
        let mut buf = vec![0.0; lattice_len * slots];
        if lattice_len > 0 {
            let offsets: Vec<Vec<Option<usize>>> = uniq
                .iter()
                .zip(&self.strides)
                .map(|(u, &s)| u.iter().map(|&i| i.checked_sub(1).map(|c| c * s)).collect())
                .collect();
            let mut idx = vec![0usize; d];
            for out in 0..lattice_len {
                let mut cell = Some(0usize);
                for k in 0..d {
                    cell = match (cell, offsets[k][idx[k]]) {
                        (Some(c), Some(o)) => Some(c + o),
                        _ => None,
                    };
                }
                if let Some(c) = cell {
                    buf[out * slots..(out + 1) * slots].copy_from_slice(&self.table[c * slots..(c + 1) * slots]);
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

        // Adjacent differences, one axis at a time.
        for k in 0..d {
            let outer: usize = shape[..k].iter().product();
            let inner: usize = shape[k + 1..].iter().product::<usize>() * slots;
            let old_len = shape[k];
            let cells = &pos[k];
            let mut next = vec![0.0; outer * cells.len() * inner];
            for o in 0..outer {
                let src = o * old_len * inner;
                let dst = o * cells.len() * inner;
                for (t, &(pa, pb)) in cells.iter().enumerate() {
                    let hi = &buf[src + pb * inner..src + (pb + 1) * inner];
                    let lo = &buf[src + pa * inner..src + (pa + 1) * inner];
                    let out = &mut next[dst + t * inner..dst + (t + 1) * inner];
                    for ((o, h), l) in out.iter_mut().zip(hi).zip(lo) {
                        *o = h - l;
                    }
                }
            }
            buf = next;
            shape[k] = cells.len();
        }
        DescriptorGrid {
            shape,
            slots,
            values: buf,
        }
    }
}

/// Builds a finalized histogram over `points`, which must lie in `bounds`.
/// The histogram measure's local range is taken from the points themselves.
pub fn build_ih(
    schema: &Schema,
    points: &[DataPoint],
    bounds: &Range,
    max_cells_per_dim: u32,
    config: DescriptorConfig,
) -> Result<IntegralHistogram> {
    let geometry = IhGeometry::for_bounds(schema, bounds, max_cells_per_dim)?;
    let local_range = match config {
        DescriptorConfig::Histogram { measure, .. } => points
            .iter()
            .filter_map(|p| p.measures.get(measure).copied())
            .fold(None, |acc: Option<(f64, f64)>, v| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
            }),
        DescriptorConfig::Aggregate { .. } => None,
    };
    let mut ih = IntegralHistogram::with_geometry(schema, geometry, config, local_range)?;
    for p in points {
        if !bounds.contains_point(&p.coords) {
            return Err(Error::Construction(format!("point {:?} outside bounds", p.coords)));
        }
        ih.insert(p)?;
    }
    ih.finalize();
    Ok(ih)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DimensionSpec, Interval};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schema2(scales: u32) -> Schema {
        Schema::new(
            vec![
                DimensionSpec::numeric("x", 0.0, 8.0, scales).unwrap(),
                DimensionSpec::numeric("y", 0.0, 8.0, scales).unwrap(),
            ],
            vec!["m".into()],
        )
        .unwrap()
    }

    fn random_points(n: usize, seed: u64) -> Vec<DataPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                DataPoint::new(
                    vec![rng.gen_range(0.0..8.0), rng.gen_range(0.0..8.0)],
                    vec![rng.gen_range(0.0..10.0)],
                )
            })
            .collect()
    }

    fn agg() -> DescriptorConfig {
        DescriptorConfig::Aggregate { measures: 1 }
    }

    fn brute_count(points: &[DataPoint], rect: &Range) -> f64 {
        let s = schema2(8);
        points.iter().filter(|p| s.range_contains(rect, &p.coords)).count() as f64
    }

    #[test]
    fn empty_input_gives_zero_table() {
        let s = schema2(8);
        let ih = build_ih(&s, &[], &s.full_range(), 8, agg()).unwrap();
        assert!(ih.table().iter().all(|&v| v == 0.0));
        assert!(ih.total().is_zero());
    }

    #[test]
    fn single_point_indicator() {
        let s = schema2(8);
        let p = DataPoint::new(vec![2.5, 5.5], vec![3.0]);
        let ih = build_ih(&s, &[p], &s.full_range(), 8, agg()).unwrap();
        for x in 0..8 {
            for y in 0..8 {
                let c = ih.table()[(x * 8 + y) * 2];
                let expected = if x >= 2 && y >= 5 { 1.0 } else { 0.0 };
                assert_eq!(c, expected, "cell ({x},{y})");
            }
        }
    }

    #[test]
    fn total_count_is_conserved() {
        let s = schema2(8);
        let pts = random_points(1000, 1);
        let ih = build_ih(&s, &pts, &s.full_range(), 8, agg()).unwrap();
        assert_eq!(ih.total().values[0], 1000.0);
        let sum: f64 = pts.iter().map(|p| p.measures[0]).sum();
        assert!((ih.total().values[1] - sum).abs() < 1e-9);
    }

    #[test]
    fn full_rect_collapses_to_total() {
        let s = schema2(8);
        let pts = random_points(500, 2);
        let ih = build_ih(&s, &pts, &s.full_range(), 8, agg()).unwrap();
        for r in [Rounding::Nearest, Rounding::Inner, Rounding::Outer] {
            let d = ih.query_rect(&s.full_range(), r).unwrap();
            assert_eq!(d, ih.total());
        }
    }

    #[test]
    fn aligned_rects_match_brute_force() {
        let s = schema2(8);
        let pts = random_points(2000, 3);
        let ih = build_ih(&s, &pts, &s.full_range(), 8, agg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let mut ivs = Vec::new();
            for _ in 0..2 {
                let a = rng.gen_range(0..8u32);
                let b = rng.gen_range(a + 1..=8u32);
                ivs.push(Interval::new(a as f64, b as f64));
            }
            let rect = Range::new(ivs);
            let got = ih.query_rect(&rect, Rounding::Nearest).unwrap();
            assert_eq!(got.values[0], brute_count(&pts, &rect), "{rect:?}");
        }
    }

    #[test]
    fn inner_nearest_outer_are_ordered() {
        let s = schema2(8);
        let pts = random_points(2000, 5);
        let ih = build_ih(&s, &pts, &s.full_range(), 8, agg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let mut ivs = Vec::new();
            for _ in 0..2 {
                let a: f64 = rng.gen_range(0.0..8.0);
                let b: f64 = rng.gen_range(a..=8.0);
                ivs.push(Interval::new(a, b));
            }
            let rect = Range::new(ivs);
            let inner = ih.query_rect(&rect, Rounding::Inner).unwrap().values[0];
            let nearest = ih.query_rect(&rect, Rounding::Nearest).unwrap().values[0];
            let outer = ih.query_rect(&rect, Rounding::Outer).unwrap().values[0];
            let exact = brute_count(&pts, &rect);
            assert!(inner <= nearest && nearest <= outer);
            assert!(inner <= exact && exact <= outer);
        }
    }

    #[test]
    fn disjoint_rect_is_zero() {
        let s = schema2(8);
        let pts: Vec<_> = random_points(100, 7)
            .into_iter()
            .map(|mut p| {
                p.coords[0] *= 0.5;
                p
            })
            .collect();
        let bounds = Range::new(vec![Interval::new(0.0, 4.0), Interval::new(0.0, 8.0)]);
        let ih = build_ih(&s, &pts, &bounds, 8, agg()).unwrap();
        let rect = Range::new(vec![Interval::new(5.0, 7.0), Interval::new(0.0, 8.0)]);
        assert!(ih.query_rect(&rect, Rounding::Outer).unwrap().is_zero());
    }

    #[test]
    fn point_outside_bounds_is_rejected() {
        let s = schema2(8);
        let bounds = Range::new(vec![Interval::new(0.0, 2.0), Interval::new(0.0, 2.0)]);
        let p = DataPoint::new(vec![5.0, 1.0], vec![0.0]);
        assert!(build_ih(&s, &[p], &bounds, 8, agg()).is_err());
    }

    #[test]
    fn grid_matches_per_cell_rects_bitwise() {
        let s = schema2(64);
        let pts = random_points(3000, 8);
        let ih = build_ih(&s, &pts, &s.full_range(), 64, agg()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let axes: Vec<Vec<f64>> = (0..2)
                .map(|_| {
                    let mut e: Vec<f64> = (0..11).map(|_| rng.gen_range(-1.0..9.0)).collect();
                    e.sort_by(f64::total_cmp);
                    e
                })
                .collect();
            for r in [Rounding::Nearest, Rounding::Inner, Rounding::Outer] {
                let grid = ih.query_grid(&axes, r).unwrap();
                assert_eq!(grid.shape, vec![10, 10]);
                for i in 0..10 {
                    for j in 0..10 {
                        let rect = Range::new(vec![
                            Interval::new(axes[0][i], axes[0][i + 1]),
                            Interval::new(axes[1][j], axes[1][j + 1]),
                        ]);
                        let single = ih.query_rect(&rect, r).unwrap();
                        let cell = grid.cell(i * 10 + j);
                        for (a, b) in cell.iter().zip(&single.values) {
                            assert_eq!(a.to_bits(), b.to_bits());
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn degenerate_grid_equals_rect() {
        let s = schema2(8);
        let pts = random_points(300, 10);
        let ih = build_ih(&s, &pts, &s.full_range(), 8, agg()).unwrap();
        let rect = Range::new(vec![Interval::new(1.3, 6.6), Interval::new(0.2, 7.9)]);
        let grid = ih
            .query_grid(&[vec![1.3, 6.6], vec![0.2, 7.9]], Rounding::Nearest)
            .unwrap();
        assert_eq!(grid.values, ih.query_rect(&rect, Rounding::Nearest).unwrap().values);
    }

    #[test]
    fn coarse_cells_cover_several_scales() {
        let s = schema2(64);
        let geo = IhGeometry::for_bounds(&s, &s.full_range(), 8).unwrap();
        assert_eq!(geo.cell_counts(), vec![8, 8]);
        assert_eq!(geo.cell_edges[0], vec![0, 8, 16, 24, 32, 40, 48, 56, 64]);
        let b = Range::new(vec![Interval::new(0.3, 0.4), Interval::new(7.99, 8.0)]);
        let geo = IhGeometry::for_bounds(&s, &b, 8).unwrap();
        assert_eq!(geo.cell_edges[0], vec![2, 3, 4]);
        assert_eq!(geo.cell_edges[1], vec![63, 64]);
    }

    #[test]
    fn histogram_descriptor_uses_local_range() {
        let s = schema2(8);
        let pts = random_points(400, 11);
        let cfg = DescriptorConfig::Histogram { measure: 0, bins: 16 };
        let ih = build_ih(&s, &pts, &s.full_range(), 8, cfg).unwrap();
        let (lo, hi) = ih.local_range().unwrap();
        let min = pts.iter().map(|p| p.measures[0]).fold(f64::INFINITY, f64::min);
        let max = pts.iter().map(|p| p.measures[0]).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((lo, hi), (min, max));
        assert_eq!(ih.total().count(), 400.0);
    }
}
