//! Replayable query workloads.
//!
//! An aligned query has every filter bound and bin edge on the scale
//! lattice. A misaligned one is the same shape with bounds drawn freely, sent
//! with `align_scales` off so the engine sees it as drawn.

use ihcube_core::descriptor::Measure;
use ihcube_core::model::{Interval, Range, Schema};
use ihcube_core::query::{AccuracyMode, ComputationalGrid, GroupAxis, QuerySpec};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Independent random windows.
    Random,
    /// Nested windows shrinking towards a focus point.
    Zoom,
    /// A fixed-width window sliding along one dimension.
    Brush,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub policy: Policy,
    pub queries: usize,
    pub aligned: bool,
    /// Dimensions binned per query (1 or 2 for charts).
    pub group_dims: usize,
    /// Bins per group axis, inclusive range.
    pub bins: [usize; 2],
    /// Restrict the non-group dimensions too, not only the grouped ones.
    pub filter_other_dims: bool,
    /// Window side as a fraction of the domain, inclusive range.
    pub extent: [f64; 2],
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            policy: Policy::Random,
            queries: 100,
            aligned: false,
            group_dims: 2,
            bins: [4, 20],
            filter_other_dims: true,
            extent: [0.1, 1.0],
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LabeledQuery {
    pub spec: QuerySpec,
    pub aligned: bool,
    pub policy: Policy,
}

#[derive(Debug, Clone, Default)]
pub struct Workload {
    pub queries: Vec<LabeledQuery>,
}

impl Workload {
    pub fn generate(schema: &Schema, cfg: &WorkloadConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut g = Gen {
            schema,
            cfg,
            rng: &mut rng,
        };
        let queries = match cfg.policy {
            Policy::Random => (0..cfg.queries).map(|_| g.random()).collect(),
            Policy::Zoom => g.zoom(),
            Policy::Brush => g.brush(),
        };
        Workload { queries }
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Same queries with a different accuracy mode.
    pub fn with_mode(&self, mode: AccuracyMode) -> Self {
        let mut w = self.clone();
        for q in &mut w.queries {
            q.spec.mode = mode;
        }
        w
    }
}

struct Gen<'a> {
    schema: &'a Schema,
    cfg: &'a WorkloadConfig,
    rng: &'a mut ChaCha8Rng,
}

impl Gen<'_> {
    /// Window `[lo, hi]` on dimension `k` with side `frac` of the domain,
    /// starting at fraction `at` of the remaining room.
    fn window(&mut self, k: usize, frac: f64, at: f64, bins: usize) -> Interval {
        let d = &self.schema.dimensions[k];
        let n = d.scale_count;
        if self.cfg.aligned {
            // Whole lattice units, at least one per bin.
            let w = ((frac * n as f64).round() as u32)
                .clamp(bins as u32, n.max(bins as u32))
                .min(n);
            let lo = ((n - w) as f64 * at).round() as u32;
            Interval::new(d.scale_edge(lo), d.scale_edge(lo + w))
        } else {
            let ext = d.extent();
            let w = (frac * ext).min(ext);
            let lo = d.domain_min + (ext - w) * at;
            Interval::new(lo, (lo + w).min(d.domain_max))
        }
    }

    /// Edges dividing `iv` into `bins`; lattice edges when aligned.
    fn edges(&self, k: usize, iv: Interval, bins: usize) -> Vec<f64> {
        let d = &self.schema.dimensions[k];
        if self.cfg.aligned {
            let a = d.nearest_scale_boundary(iv.lo);
            let b = d.nearest_scale_boundary(iv.hi);
            let mut e: Vec<u32> = (0..=bins)
                .map(|i| a + ((i as u64 * (b - a) as u64) / bins as u64) as u32)
                .collect();
            e.dedup();
            e.into_iter().map(|k| d.scale_edge(k)).collect()
        } else {
            let w = iv.width() / bins as f64;
            let mut e: Vec<f64> = (0..bins).map(|i| iv.lo + w * i as f64).collect();
            e.push(iv.hi);
            e
        }
    }

    fn spec(&mut self, filter: Range, group: &[usize], bins: &[usize]) -> LabeledQuery {
        let groups = group
            .iter()
            .zip(bins)
            .map(|(&k, &b)| GroupAxis {
                dim: k,
                edges: self.edges(k, filter.intervals[k], b),
            })
            .collect();
        let mut spec = QuerySpec::new(ComputationalGrid { filter, groups }, Measure::Count);
        spec.align_scales = self.cfg.aligned;
        LabeledQuery {
            spec,
            aligned: self.cfg.aligned,
            policy: self.cfg.policy,
        }
    }

    fn pick_group(&mut self) -> (Vec<usize>, Vec<usize>) {
        let d = self.schema.ndims();
        let g = self.cfg.group_dims.min(d);
        let mut dims = sample(self.rng, d, g).into_vec();
        dims.sort_unstable();
        let [b0, b1] = self.cfg.bins;
        let bins = dims.iter().map(|_| self.rng.gen_range(b0..=b1.max(b0))).collect();
        (dims, bins)
    }

    fn frac(&mut self) -> f64 {
        let [a, b] = self.cfg.extent;
        if a >= b {
            a
        } else {
            self.rng.gen_range(a..=b)
        }
    }

    fn random(&mut self) -> LabeledQuery {
        let (group, bins) = self.pick_group();
        let mut filter = self.schema.full_range();
        for k in 0..self.schema.ndims() {
            let b = group.iter().position(|&g| g == k).map_or(1, |i| bins[i]);
            if group.contains(&k) || self.cfg.filter_other_dims {
                let (f, at) = (self.frac(), self.rng.gen());
                filter.intervals[k] = self.window(k, f, at, b);
            }
        }
        self.spec(filter, &group, &bins)
    }

    fn zoom(&mut self) -> Vec<LabeledQuery> {
        let mut out = Vec::with_capacity(self.cfg.queries);
        while out.len() < self.cfg.queries {
            let (group, bins) = self.pick_group();
            let focus: Vec<f64> = (0..self.schema.ndims()).map(|_| self.rng.gen()).collect();
            let [hi, lo] = [self.cfg.extent[1], self.cfg.extent[0].max(1e-3)];
            let mut frac = hi;
            while frac >= lo && out.len() < self.cfg.queries {
                let mut filter = self.schema.full_range();
                for (k, &at) in focus.iter().enumerate() {
                    if group.contains(&k) || self.cfg.filter_other_dims {
                        let b = group.iter().position(|&g| g == k).map_or(1, |i| bins[i]);
                        filter.intervals[k] = self.window(k, frac, at, b);
                    }
                }
                out.push(self.spec(filter, &group, &bins));
                frac *= 0.7;
            }
        }
        out
    }

    fn brush(&mut self) -> Vec<LabeledQuery> {
        let mut out = Vec::with_capacity(self.cfg.queries);
        while out.len() < self.cfg.queries {
            let (group, bins) = self.pick_group();
            let d = self.schema.ndims();
            // The brushed dimension is one that is not binned when possible.
            let brushed = (0..d).find(|k| !group.contains(k)).unwrap_or(group[0]);
            let frac = self.frac().min(0.5);
            let steps = 10;
            for s in 0..=steps {
                if out.len() >= self.cfg.queries {
                    break;
                }
                let mut filter = self.schema.full_range();
                let b = group.iter().position(|&g| g == brushed).map_or(1, |i| bins[i]);
                filter.intervals[brushed] = self.window(brushed, frac, s as f64 / steps as f64, b);
                out.push(self.spec(filter, &group, &bins));
            }
        }
        out
    }
}

/// A `bins × bins` heatmap over dimensions `(x, y)` restricted to `region`.
pub fn heatmap(schema: &Schema, region: &Range, x: usize, y: usize, bins: usize) -> QuerySpec {
    let groups = [x, y]
        .iter()
        .map(|&k| {
            let iv = region.intervals[k];
            let w = iv.width() / bins as f64;
            let mut edges: Vec<f64> = (0..bins).map(|i| iv.lo + w * i as f64).collect();
            edges.push(iv.hi);
            GroupAxis { dim: k, edges }
        })
        .collect();
    let mut filter = schema.full_range();
    for (f, r) in filter.intervals.iter_mut().zip(&region.intervals) {
        *f = *r;
    }
    QuerySpec::new(ComputationalGrid { filter, groups }, Measure::Count)
}
