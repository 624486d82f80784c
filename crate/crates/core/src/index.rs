//! The finalized index: frozen tree topology, one integral histogram per
//! leaf subspace, and the LSH lookup layer.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::descriptor::{add_slots, DescriptorConfig};
use crate::error::{Error, Result};
use crate::ih::{IhGeometry, IntegralHistogram};
use crate::lsh::{candidates_for_range, index_subspaces, LshBuckets, LshFamily, LshParams};
use crate::model::{DataPoint, Interval, Range, Schema};
use crate::rtree::{RTree, TreeParams};

/// A re-readable stream of points. Construction scans it up to four times.
pub trait PointSource {
    fn scan(&self) -> Result<Box<dyn Iterator<Item = Result<DataPoint>> + '_>>;
}

impl PointSource for [DataPoint] {
    fn scan(&self) -> Result<Box<dyn Iterator<Item = Result<DataPoint>> + '_>> {
        Ok(Box::new(self.iter().cloned().map(Ok)))
    }
}

impl PointSource for Vec<DataPoint> {
    fn scan(&self) -> Result<Box<dyn Iterator<Item = Result<DataPoint>> + '_>> {
        self.as_slice().scan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildConfig {
    /// Maximum entries per tree node.
    pub m_max: usize,
    /// Minimum entries per node; defaults to 40% of `m_max`.
    pub m_min: Option<usize>,
    /// Fraction of rows inserted exactly to form the skeleton tree.
    pub sample_rate: f64,
    /// Upper bound on the skeleton sample size.
    pub sample_cap: Option<usize>,
    /// Maximum integral-histogram cells per dimension per leaf.
    pub max_cells_per_dim: u32,
    pub seed: u64,
    pub lsh: LshParams,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            m_max: 64,
            m_min: None,
            sample_rate: 1.0,
            sample_cap: None,
            max_cells_per_dim: 64,
            seed: 0x1c_0be,
            lsh: LshParams::default(),
        }
    }
}

impl BuildConfig {
    pub fn tree_params(&self) -> TreeParams {
        let mut p = TreeParams::with_max(self.m_max);
        if let Some(m) = self.m_min {
            p.m_min = m;
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::Config(format!(
                "sample_rate must be in (0, 1], got {}",
                self.sample_rate
            )));
        }
        if self.sample_cap == Some(0) {
            return Err(Error::Config("sample_cap must be positive".into()));
        }
        if self.max_cells_per_dim == 0 {
            return Err(Error::Config("max_cells_per_dim must be positive".into()));
        }
        self.tree_params().validate()
    }

    fn samples_everything(&self) -> bool {
        self.sample_rate >= 1.0 && self.sample_cap.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub level: u32,
    pub mbr: Range,
    pub children: Vec<u32>,
    /// Leaf index for level-0 nodes.
    pub leaf: Option<u32>,
    /// Sum of descendant descriptors (`DescriptorConfig::total_slots` values).
    pub total: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Leaf {
    pub node: u32,
    pub mbr: Range,
    pub ih: IntegralHistogram,
    pub points: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BuildStats {
    pub rows: u64,
    pub sample_size: u64,
    pub tree_height: u32,
    pub subspaces: u64,
    /// Largest per-dimension cell count of any leaf histogram.
    pub bins: u32,
    pub cells: u64,
    pub storage_bytes: u64,
    pub build_millis: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Index {
    pub(crate) schema: Schema,
    pub(crate) descriptor: DescriptorConfig,
    pub(crate) build: BuildConfig,
    pub(crate) nodes: Vec<TreeNode>,
    pub(crate) root: Option<u32>,
    pub(crate) leaves: Vec<Leaf>,
    pub(crate) lsh: LshFamily,
    pub(crate) buckets: LshBuckets,
    /// Per measure dimension, the smallest value seen (`+inf` when empty).
    pub(crate) measure_min: Vec<f64>,
    pub(crate) stats: BuildStats,
}

impl Index {
    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn descriptor(&self) -> &DescriptorConfig {
        &self.descriptor
    }

    pub fn build_config(&self) -> &BuildConfig {
        &self.build
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root(&self) -> Option<u32> {
        self.root
    }

    pub fn leaves(&self) -> &[Leaf] {
        &self.leaves
    }

    pub fn lsh_family(&self) -> &LshFamily {
        &self.lsh
    }

    pub fn lsh_buckets(&self) -> &LshBuckets {
        &self.buckets
    }

    pub fn stats(&self) -> &BuildStats {
        &self.stats
    }

    pub fn measure_min(&self) -> &[f64] {
        &self.measure_min
    }

    pub fn height(&self) -> u32 {
        self.root.map_or(0, |r| self.nodes[r as usize].level + 1)
    }

    /// Total number of indexed rows, read from the leaf histograms.
    pub fn total_count(&self) -> f64 {
        self.leaves.iter().map(|l| l.ih.total().count()).sum()
    }

    /// Leaves whose rectangle intersects `query`, by pruned tree descent.
    pub fn candidates_exact(&self, query: &Range) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .nodes_intersecting(query, 0)
            .into_iter()
            .filter_map(|n| self.nodes[n as usize].leaf)
            .collect();
        out.sort_unstable();
        out
    }

    /// Nodes at `level` whose rectangle intersects `query`, in node order.
    pub fn nodes_intersecting(&self, query: &Range, level: u32) -> Vec<u32> {
        let mut out = Vec::new();
        let mut stack: Vec<u32> = self.root.into_iter().collect();
        while let Some(id) = stack.pop() {
            let n = &self.nodes[id as usize];
            if !n.mbr.intersects(query) {
                continue;
            }
            if n.level == level {
                out.push(id);
            } else if n.level > level {
                stack.extend(n.children.iter().rev());
            }
        }
        out.sort_unstable();
        out
    }

    /// LSH lookup without rectangle validation.
    pub fn candidates_lsh_raw(&self, query: &Range) -> Vec<u32> {
        if self.leaves.is_empty() {
            return Vec::new();
        }
        let q = self.to_scale_range(query);
        candidates_for_range(&self.lsh, &self.buckets, &q)
    }

    /// LSH candidates that survive exact rectangle validation.
    pub fn candidates_lsh(&self, query: &Range) -> Vec<u32> {
        self.candidates_lsh_raw(query)
            .into_iter()
            .filter(|&l| self.leaves[l as usize].mbr.intersects(query))
            .collect()
    }

    pub(crate) fn to_scale_range(&self, r: &Range) -> Range {
        Range::new(
            self.schema
                .dimensions
                .iter()
                .zip(&r.intervals)
                .map(|(d, iv)| Interval::new(d.scale_position(iv.lo), d.scale_position(iv.hi)))
                .collect(),
        )
    }

    /// Rebuilds the LSH layer with different parameters; the histograms are
    /// untouched.
    pub fn with_lsh(&self, params: &LshParams) -> Result<Index> {
        let mut out = self.clone();
        out.build.lsh = params.clone();
        out.lsh = LshFamily::from_params(self.schema.ndims(), params, self.schema.scale_diagonal())?;
        let rects: Vec<Range> = self.leaves.iter().map(|l| self.to_scale_range(&l.mbr)).collect();
        out.buckets = index_subspaces(&out.lsh, &rects);
        out.stats.storage_bytes = crate::store::encoded_len(&out) as u64;
        Ok(out)
    }
}

fn check_point(schema: &Schema, descriptor: &DescriptorConfig, p: &DataPoint) -> Result<()> {
    if p.coords.len() != schema.ndims() {
        return Err(Error::Construction(format!(
            "point has {} coordinates, schema {}",
            p.coords.len(),
            schema.ndims()
        )));
    }
    for (d, &v) in schema.dimensions.iter().zip(&p.coords) {
        if !(v >= d.domain_min && v <= d.domain_max) {
            return Err(Error::Construction(format!("{} = {v} outside domain", d.name)));
        }
    }
    let needed = match *descriptor {
        DescriptorConfig::Aggregate { measures } => measures,
        DescriptorConfig::Histogram { measure, .. } => measure + 1,
    };
    if p.measures.len() < needed || p.measures.iter().any(|m| !m.is_finite()) {
        return Err(Error::Construction("missing or non-finite measure value".into()));
    }
    Ok(())
}

/// Builds an index from `source`.
///
/// 1. A uniform sample (Bernoulli at `sample_rate`, then a reservoir of at
///    most `sample_cap`) is inserted into an R*-tree, which is then frozen.
/// 2. Every row is routed to a leaf containing it, or else to the leaf with
///    the lowest insertion cost, whose rectangle grows; nothing splits.
/// 3. Leaf histograms are laid out over the final rectangles and every row
///    is accumulated into the first leaf (depth-first) that contains it.
///
/// With `sample_rate = 1` and no cap, step 2 is skipped.
pub fn build_index(
    schema: &Schema,
    source: &dyn PointSource,
    descriptor: DescriptorConfig,
    cfg: &BuildConfig,
) -> Result<Index> {
    let started = Instant::now();
    schema.validate()?;
    cfg.validate()?;
    if let DescriptorConfig::Aggregate { measures } = descriptor {
        if measures > schema.measures.len() {
            return Err(Error::Config(
                "descriptor sums more measures than the schema has".into(),
            ));
        }
    }
    if let DescriptorConfig::Histogram { measure, bins } = descriptor {
        if measure >= schema.measures.len() || bins == 0 {
            return Err(Error::Config(
                "histogram descriptor needs a valid measure and bins > 0".into(),
            ));
        }
    }
    let d = schema.ndims();

    // Pass 1: sample.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample: Vec<Vec<f64>> = Vec::new();
    let mut selected = 0u64;
    let mut rows = 0u64;
    let mut measure_min = vec![f64::INFINITY; schema.measures.len()];
    for p in source.scan()? {
        let p = p?;
        check_point(schema, &descriptor, &p)?;
        rows += 1;
        for (m, &v) in measure_min.iter_mut().zip(&p.measures) {
            *m = m.min(v);
        }
        if cfg.sample_rate < 1.0 && rng.gen::<f64>() >= cfg.sample_rate {
            continue;
        }
        selected += 1;
        match cfg.sample_cap {
            Some(cap) if sample.len() >= cap => {
                let j = rng.gen_range(0..selected);
                if (j as usize) < cap {
                    sample[j as usize] = p.coords;
                }
            }
            _ => sample.push(p.coords),
        }
    }
    // A positive rate must yield a skeleton whenever rows exist.
    if sample.is_empty() && rows > 0 {
        if let Some(p) = source.scan()?.next() {
            sample.push(p?.coords);
        }
    }

    let mut tree = RTree::new(d, cfg.tree_params())?;
    let sample_size = sample.len() as u64;
    for p in sample {
        tree.insert(p)?;
    }
    tree.freeze();
    let leaf_nodes = tree.leaves();

    // Pass 2: frozen routing with rectangle expansion.
    if !cfg.samples_everything() && !leaf_nodes.is_empty() {
        for p in source.scan()? {
            let p = p?;
            tree.route(&p.coords, &leaf_nodes);
        }
    }

    // Leaf order follows depth-first tree order.
    let mut leaf_of_node = vec![u32::MAX; tree.nodes().len()];
    for (i, &n) in leaf_nodes.iter().enumerate() {
        leaf_of_node[n] = i as u32;
    }

    let local_ranges: Vec<Option<(f64, f64)>> = match descriptor {
        DescriptorConfig::Histogram { measure, .. } => {
            let mut ranges: Vec<Option<(f64, f64)>> = vec![None; leaf_nodes.len()];
            for p in source.scan()? {
                let p = p?;
                let leaf = assigned_leaf(&tree, &leaf_of_node, &p)?;
                let v = p.measures[measure];
                let r = &mut ranges[leaf];
                *r = Some(r.map_or((v, v), |(lo, hi)| (lo.min(v), hi.max(v))));
            }
            ranges
        }
        DescriptorConfig::Aggregate { .. } => vec![None; leaf_nodes.len()],
    };

    let mut histograms = Vec::with_capacity(leaf_nodes.len());
    for (i, &n) in leaf_nodes.iter().enumerate() {
        let geo = IhGeometry::for_bounds(schema, &tree.node(n).mbr, cfg.max_cells_per_dim)?;
        histograms.push(IntegralHistogram::with_geometry(
            schema,
            geo,
            descriptor.clone(),
            local_ranges[i],
        )?);
    }

    // Pass 3: accumulate descriptors.
    let mut leaf_points = vec![0u64; leaf_nodes.len()];
    if !leaf_nodes.is_empty() {
        for p in source.scan()? {
            let p = p?;
            let leaf = assigned_leaf(&tree, &leaf_of_node, &p)?;
            histograms[leaf].insert(&p)?;
            leaf_points[leaf] += 1;
        }
    }
    for ih in &mut histograms {
        ih.finalize();
    }

    // Compact the frozen topology in depth-first preorder.
    let mut nodes = Vec::new();
    let mut leaves = Vec::with_capacity(leaf_nodes.len());
    let mut hist_slots: Vec<Option<IntegralHistogram>> = histograms.into_iter().map(Some).collect();
    let root = tree.root().map(|r| {
        compact(
            &tree,
            r,
            &leaf_of_node,
            &descriptor,
            &mut hist_slots,
            &leaf_points,
            &mut nodes,
            &mut leaves,
        )
    });
    leaves.sort_by_key(|l: &Leaf| leaf_index_of(&nodes, l.node));

    let lsh = LshFamily::from_params(d, &cfg.lsh, schema.scale_diagonal())?;
    let mut index = Index {
        schema: schema.clone(),
        descriptor,
        build: cfg.clone(),
        nodes,
        root,
        leaves,
        lsh,
        buckets: LshBuckets::default(),
        measure_min,
        stats: BuildStats::default(),
    };
    let rects: Vec<Range> = index.leaves.iter().map(|l| index.to_scale_range(&l.mbr)).collect();
    index.buckets = index_subspaces(&index.lsh, &rects);

    index.stats = BuildStats {
        rows,
        sample_size,
        tree_height: index.height(),
        subspaces: index.leaves.len() as u64,
        bins: index
            .leaves
            .iter()
            .flat_map(|l| l.ih.cell_counts().iter().copied())
            .max()
            .unwrap_or(0) as u32,
        cells: index
            .leaves
            .iter()
            .map(|l| l.ih.cell_counts().iter().product::<usize>() as u64)
            .sum(),
        storage_bytes: 0,
        build_millis: started.elapsed().as_millis() as u64,
    };
    index.stats.storage_bytes = crate::store::encoded_len(&index) as u64;
    Ok(index)
}

fn leaf_index_of(nodes: &[TreeNode], node: u32) -> u32 {
    nodes[node as usize].leaf.expect("leaf node")
}

fn assigned_leaf(tree: &RTree, leaf_of_node: &[u32], p: &DataPoint) -> Result<usize> {
    let n = tree
        .find_containing_leaf(&p.coords)
        .ok_or_else(|| Error::Construction(format!("no leaf contains {:?}", p.coords)))?;
    Ok(leaf_of_node[n] as usize)
}

#[allow(clippy::too_many_arguments)]
fn compact(
    tree: &RTree,
    node: usize,
    leaf_of_node: &[u32],
    descriptor: &DescriptorConfig,
    hists: &mut [Option<IntegralHistogram>],
    leaf_points: &[u64],
    out: &mut Vec<TreeNode>,
    leaves: &mut Vec<Leaf>,
) -> u32 {
    let id = out.len() as u32;
    let n = tree.node(node);
    out.push(TreeNode {
        level: n.level,
        mbr: n.mbr.clone(),
        children: Vec::new(),
        leaf: None,
        total: vec![0.0; descriptor.total_slots()],
    });
    if n.is_leaf() {
        let li = leaf_of_node[node];
        let ih = hists[li as usize].take().expect("each leaf compacted once");
        let total = ih.total();
        let t = &mut out[id as usize];
        t.leaf = Some(li);
        t.total = match descriptor {
            DescriptorConfig::Aggregate { .. } => total.values.clone(),
            DescriptorConfig::Histogram { .. } => vec![total.count()],
        };
        leaves.push(Leaf {
            node: id,
            mbr: n.mbr.clone(),
            ih,
            points: leaf_points[li as usize],
        });
    } else {
        let mut children = Vec::new();
        let mut total = vec![0.0; descriptor.total_slots()];
        for c in n.children() {
            let cid = compact(tree, c, leaf_of_node, descriptor, hists, leaf_points, out, leaves);
            add_slots(&mut total, &out[cid as usize].total);
            children.push(cid);
        }
        let t = &mut out[id as usize];
        t.children = children;
        t.total = total;
    }
    id
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DimensionSpec;
    use rand_distr::{Distribution, Normal};

    fn schema() -> Schema {
        Schema::new(
            vec![
                DimensionSpec::numeric("x", 0.0, 100.0, 120).unwrap(),
                DimensionSpec::numeric("y", 0.0, 100.0, 120).unwrap(),
            ],
            vec!["w".into()],
        )
        .unwrap()
    }

    fn points(n: usize, seed: u64) -> Vec<DataPoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(30.0, 8.0).unwrap();
        (0..n)
            .map(|i| {
                let (x, y): (f64, f64) = if i % 3 == 0 {
                    (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0))
                } else {
                    (g.sample(&mut rng), g.sample(&mut rng) + 20.0)
                };
                DataPoint::new(
                    vec![x.clamp(0.0, 100.0), y.clamp(0.0, 100.0)],
                    vec![rng.gen_range(0.0..5.0)],
                )
            })
            .collect()
    }

    fn agg() -> DescriptorConfig {
        DescriptorConfig::Aggregate { measures: 1 }
    }

    #[test]
    fn empty_input_gives_empty_index() {
        let idx = build_index(&schema(), &Vec::<DataPoint>::new(), agg(), &BuildConfig::default()).unwrap();
        assert_eq!(idx.leaves().len(), 0);
        assert_eq!(idx.height(), 0);
        assert_eq!(idx.total_count(), 0.0);
        assert!(idx.candidates_exact(&idx.schema().full_range()).is_empty());
    }

    #[test]
    fn exact_build_conserves_counts() {
        let pts = points(5000, 1);
        let cfg = BuildConfig {
            m_max: 16,
            ..Default::default()
        };
        let idx = build_index(&schema(), &pts, agg(), &cfg).unwrap();
        assert_eq!(idx.total_count(), 5000.0);
        assert_eq!(idx.leaves().iter().map(|l| l.points).sum::<u64>(), 5000);
        assert_eq!(idx.stats().rows, 5000);
        assert_eq!(idx.stats().subspaces as usize, idx.leaves().len());
        let root = idx.root().unwrap() as usize;
        assert_eq!(idx.nodes()[root].total[0], 5000.0);
        for l in idx.leaves() {
            let bounds = l.ih.geometry().bounds(idx.schema());
            assert!(bounds.contains_range(&l.mbr));
        }
    }

    #[test]
    fn progressive_build_conserves_and_contains() {
        let pts = points(20_000, 2);
        let cfg = BuildConfig {
            m_max: 16,
            sample_rate: 0.05,
            ..Default::default()
        };
        let idx = build_index(&schema(), &pts, agg(), &cfg).unwrap();
        assert_eq!(idx.total_count(), 20_000.0);
        assert!(idx.stats().sample_size < 2000);
        for p in &pts {
            assert!(idx.leaves().iter().any(|l| l.mbr.contains_point(&p.coords)));
        }
        // Ancestors cover their descendants after expansion.
        for n in idx.nodes() {
            for &c in &n.children {
                assert!(n.mbr.contains_range(&idx.nodes()[c as usize].mbr));
            }
        }
    }

    #[test]
    fn full_rate_matches_exact_only_build() {
        let pts = points(3000, 3);
        let exact = build_index(&schema(), &pts, agg(), &BuildConfig::default()).unwrap();
        let capped = BuildConfig {
            sample_cap: Some(10_000),
            ..Default::default()
        };
        let routed = build_index(&schema(), &pts, agg(), &capped).unwrap();
        assert_eq!(exact.nodes(), routed.nodes());
        assert_eq!(exact.leaves().len(), routed.leaves().len());
        for (a, b) in exact.leaves().iter().zip(routed.leaves()) {
            assert_eq!(a.ih.table(), b.ih.table());
        }
    }

    #[test]
    fn sample_cap_bounds_skeleton() {
        let pts = points(20_000, 4);
        let cfg = BuildConfig {
            sample_rate: 0.5,
            sample_cap: Some(500),
            m_max: 16,
            ..Default::default()
        };
        let idx = build_index(&schema(), &pts, agg(), &cfg).unwrap();
        assert_eq!(idx.stats().sample_size, 500);
        assert_eq!(idx.total_count(), 20_000.0);
    }

    #[test]
    fn deterministic_builds() {
        let pts = points(4000, 5);
        let cfg = BuildConfig {
            sample_rate: 0.1,
            m_max: 16,
            ..Default::default()
        };
        let a = build_index(&schema(), &pts, agg(), &cfg).unwrap();
        let b = build_index(&schema(), &pts, agg(), &cfg).unwrap();
        assert_eq!(a.nodes(), b.nodes());
        assert_eq!(a.buckets, b.buckets);
    }

    #[test]
    fn exact_candidates_match_brute_force() {
        let pts = points(6000, 6);
        let cfg = BuildConfig {
            m_max: 16,
            ..Default::default()
        };
        let idx = build_index(&schema(), &pts, agg(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x0: f64 = rng.gen_range(0.0..100.0);
            let y0: f64 = rng.gen_range(0.0..100.0);
            let q = Range::new(vec![
                Interval::new(x0, (x0 + rng.gen_range(0.0..30.0)).min(100.0)),
                Interval::new(y0, (y0 + rng.gen_range(0.0..30.0)).min(100.0)),
            ]);
            let exact = idx.candidates_exact(&q);
            let brute: Vec<u32> = (0..idx.leaves().len() as u32)
                .filter(|&l| idx.leaves()[l as usize].mbr.intersects(&q))
                .collect();
            assert_eq!(exact, brute);
            let lsh = idx.candidates_lsh(&q);
            assert!(lsh.iter().all(|l| exact.contains(l)));
        }
        let full = idx.candidates_lsh(&idx.schema().full_range());
        assert_eq!(full.len(), idx.leaves().len());
    }

    #[test]
    fn out_of_domain_point_is_rejected() {
        let pts = vec![DataPoint::new(vec![150.0, 1.0], vec![0.0])];
        assert!(build_index(&schema(), &pts, agg(), &BuildConfig::default()).is_err());
    }
}
