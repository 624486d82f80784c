//! p-stable LSH over subspace rectangles.
//!
//! Each projection `a` (standard Gaussian) maps a point to
//! `floor((a . v + b) / r)`. A rectangle projects onto an interval of each
//! line; that interval is sampled at `tables` stratified midpoints and sample
//! `t` is hashed into table `t`, in ascending order. A query probes, in every
//! table, the buckets its own projected interval covers: a point-in-range
//! search over the subspace samples. The query's own samples, taken in
//! descending order, always fall inside that bucket span, so their
//! collisions are included. A subspace is a candidate when it is hit on
//! every projection. Candidates may include false positives (removed by
//! exact rectangle validation) and miss overlaps where the query falls
//! between two samples of a subspace that lie in different buckets.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Range;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LshParams {
    /// Number of projection lines; `None` means `2 * d`.
    pub projections: Option<usize>,
    /// Hash tables (samples) per projection.
    pub tables: usize,
    /// Bucket width in lattice units; `None` derives it from the domain
    /// diagonal (`diagonal / bucket_divisor`).
    pub bucket_width: Option<f64>,
    pub bucket_divisor: f64,
    pub seed: u64,
}

impl Default for LshParams {
    fn default() -> Self {
        LshParams {
            projections: None,
            tables: 8,
            bucket_width: None,
            bucket_divisor: 64.0,
            seed: 0x5eed_1a5b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LshFamily {
    pub projections: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub bucket_width: f64,
    pub tables: usize,
    pub seed: u64,
}

impl LshFamily {
    /// Draws `count` projections for `ndims`-dimensional input.
    pub fn new(ndims: usize, count: usize, tables: usize, bucket_width: f64, seed: u64) -> Result<Self> {
        if !(bucket_width > 0.0 && bucket_width.is_finite()) {
            return Err(Error::Config(format!(
                "bucket width must be positive, got {bucket_width}"
            )));
        }
        if count == 0 || tables == 0 || ndims == 0 {
            return Err(Error::Config(
                "projections, tables and dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projections = (0..count)
            .map(|_| (0..ndims).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let offsets = (0..count).map(|_| rng.gen_range(0.0..bucket_width)).collect();
        Ok(LshFamily {
            projections,
            offsets,
            bucket_width,
            tables,
            seed,
        })
    }

    pub fn from_params(ndims: usize, params: &LshParams, diagonal: f64) -> Result<Self> {
        let count = params.projections.unwrap_or(2 * ndims);
        let width = params.bucket_width.unwrap_or(diagonal / params.bucket_divisor);
        Self::new(ndims, count, params.tables, width, params.seed)
    }

    pub fn ndims(&self) -> usize {
        self.projections.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn key(&self, projection: usize, position: f64) -> i64 {
        ((position + self.offsets[projection]) / self.bucket_width).floor() as i64
    }

    pub fn project(&self, projection: usize, v: &[f64]) -> f64 {
        self.projections[projection].iter().zip(v).map(|(a, x)| a * x).sum()
    }

    /// One bucket key per projection.
    pub fn hash_point(&self, v: &[f64]) -> Vec<i64> {
        (0..self.projections.len())
            .map(|p| self.key(p, self.project(p, v)))
            .collect()
    }

    /// Interval covered by the rectangle's projection onto line `projection`.
    pub fn project_rect(&self, projection: usize, rect: &Range) -> (f64, f64) {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for (a, iv) in self.projections[projection].iter().zip(&rect.intervals) {
            let (x, y) = (a * iv.lo, a * iv.hi);
            lo += x.min(y);
            hi += x.max(y);
        }
        (lo, hi)
    }

    /// `tables` stratified samples of `[lo, hi]`, ascending: the midpoints
    /// of `tables` equal slices, so the widest unsampled stretch is
    /// `(hi - lo) / tables` and shrinks as tables are added.
    pub fn sample_positions(&self, lo: f64, hi: f64) -> Vec<f64> {
        let t = self.tables as f64;
        (0..self.tables)
            .map(|j| lo + (hi - lo) * ((j as f64 + 0.5) / t))
            .collect()
    }
}

/// Bucket maps, one per (projection, table).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LshBuckets {
    pub tables: usize,
    pub maps: Vec<BTreeMap<i64, Vec<u32>>>,
    pub subspaces: usize,
}

impl LshBuckets {
    pub fn map(&self, projection: usize, table: usize) -> &BTreeMap<i64, Vec<u32>> {
        &self.maps[projection * self.tables + table]
    }

    pub fn bucket_count(&self) -> usize {
        self.maps.iter().map(BTreeMap::len).sum()
    }
}

/// Hashes every subspace rectangle (in lattice coordinates) into the tables.
pub fn index_subspaces(fam: &LshFamily, subspaces: &[Range]) -> LshBuckets {
    let t = fam.tables;
    let mut maps = vec![BTreeMap::<i64, Vec<u32>>::new(); fam.projections.len() * t];
    for (id, rect) in subspaces.iter().enumerate() {
        for p in 0..fam.projections.len() {
            let (lo, hi) = fam.project_rect(p, rect);
            for (j, pos) in fam.sample_positions(lo, hi).into_iter().enumerate() {
                let bucket = maps[p * t + j].entry(fam.key(p, pos)).or_default();
                if bucket.last() != Some(&(id as u32)) {
                    bucket.push(id as u32);
                }
            }
        }
    }
    LshBuckets {
        tables: t,
        maps,
        subspaces: subspaces.len(),
    }
}

/// Subspaces hit by `query` (lattice coordinates) in at least one table of
/// every projection. Unvalidated: callers check rectangles.
pub fn candidates_for_range(fam: &LshFamily, buckets: &LshBuckets, query: &Range) -> Vec<u32> {
    let n = buckets.subspaces;
    let projections = fam.projections.len();
    if n == 0 || projections == 0 {
        return Vec::new();
    }
    let t = buckets.tables;
    let mut hits = vec![0u32; n];
    let mut stamp = vec![u32::MAX; n];
    for p in 0..projections {
        let (lo, hi) = fam.project_rect(p, query);
        let (k_lo, k_hi) = (fam.key(p, lo), fam.key(p, hi));
        for table in (0..t).rev() {
            for ids in buckets.map(p, table).range(k_lo..=k_hi).map(|(_, v)| v) {
                for &id in ids {
                    let i = id as usize;
                    if stamp[i] != p as u32 && hits[i] == p as u32 {
                        stamp[i] = p as u32;
                        hits[i] += 1;
                    }
                }
            }
        }
    }
    (0..n as u32)
        .filter(|&i| hits[i as usize] as usize == projections)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Interval;

    fn fixed_family(a: Vec<f64>, b: f64, r: f64, tables: usize) -> LshFamily {
        LshFamily {
            projections: vec![a],
            offsets: vec![b],
            bucket_width: r,
            tables,
            seed: 0,
        }
    }

    #[test]
    fn hash_formula() {
        let f = fixed_family(vec![1.0, 0.0], 0.5, 2.0, 1);
        assert_eq!(f.hash_point(&[3.0, 7.0]), vec![1]);
        // Same projection, same key.
        assert_eq!(f.hash_point(&[3.0, -40.0]), f.hash_point(&[3.0, 7.0]));
    }

    #[test]
    fn shifting_along_projection_by_width_moves_one_bucket() {
        let f = LshFamily::new(3, 4, 1, 0.7, 42).unwrap();
        let v = [0.3, -1.2, 2.2];
        let base = f.hash_point(&v);
        for (p, a) in f.projections.iter().enumerate() {
            let norm2: f64 = a.iter().map(|x| x * x).sum();
            // Move by exactly r along a: a . (v + r a / |a|^2) = a . v + r.
            let shifted: Vec<f64> = v.iter().zip(a).map(|(x, ai)| x + 0.7 * ai / norm2).collect();
            let pos = f.project(p, &shifted);
            let k = f.key(p, pos);
            let expected = f.key(p, f.project(p, &v) + 0.7);
            assert_eq!(k, expected);
            assert!((k - base[p]).abs() <= 1);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = LshFamily::new(5, 10, 8, 1.5, 9).unwrap();
        let b = LshFamily::new(5, 10, 8, 1.5, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, LshFamily::new(5, 10, 8, 1.5, 10).unwrap());
    }

    #[test]
    fn single_table_hashes_midpoint() {
        let f = fixed_family(vec![1.0, 0.0], 0.0, 1.0, 1);
        let r = Range::new(vec![Interval::new(2.0, 4.0), Interval::new(0.0, 1.0)]);
        let b = index_subspaces(&f, &[r]);
        assert_eq!(b.map(0, 0).get(&3), Some(&vec![0]));
        assert_eq!(b.bucket_count(), 1);
    }

    #[test]
    fn wide_interval_spans_many_buckets() {
        // Interval of length 3r sampled 8 times covers at least 3 buckets.
        let f = fixed_family(vec![1.0], 0.25, 1.0, 8);
        let r = Range::new(vec![Interval::new(10.0, 13.0)]);
        let b = index_subspaces(&f, &[r]);
        let keys: std::collections::BTreeSet<i64> = (0..8).flat_map(|t| b.map(0, t).keys().copied()).collect();
        assert!(keys.len() >= 3, "{keys:?}");
    }

    #[test]
    fn every_subspace_is_indexed_everywhere() {
        let f = LshFamily::new(2, 4, 3, 0.5, 1).unwrap();
        let rects: Vec<Range> = (0..20)
            .map(|i| {
                let x = i as f64;
                Range::new(vec![Interval::new(x, x + 1.0), Interval::new(-x, -x + 2.0)])
            })
            .collect();
        let b = index_subspaces(&f, &rects);
        for p in 0..4 {
            for t in 0..3 {
                let mut seen: Vec<u32> = b.map(p, t).values().flatten().copied().collect();
                seen.sort_unstable();
                seen.dedup();
                assert_eq!(seen.len(), 20);
            }
        }
    }

    #[test]
    fn full_domain_and_separated_queries() {
        let f = LshFamily::new(2, 4, 8, 4.0, 3).unwrap();
        let rects: Vec<Range> = (0..10)
            .map(|i| {
                let x = 2.0 * i as f64;
                Range::new(vec![Interval::new(x, x + 1.0), Interval::new(x, x + 1.0)])
            })
            .collect();
        let b = index_subspaces(&f, &rects);
        let far = Range::new(vec![Interval::new(500.0, 501.0), Interval::new(500.0, 501.0)]);
        assert!(candidates_for_range(&f, &b, &far).is_empty());
        let own = candidates_for_range(&f, &b, &rects[4]);
        assert!(own.contains(&4));
        let full = Range::new(vec![Interval::new(0.0, 20.0), Interval::new(0.0, 20.0)]);
        assert_eq!(candidates_for_range(&f, &b, &full).len(), 10);
    }

    #[test]
    fn query_between_samples_of_wide_subspace() {
        // Samples at 0, 10, 20 with width-1 buckets: a query inside (10, 20)
        // that covers no sample bucket is missed; widening the buckets fixes it.
        let narrow = fixed_family(vec![1.0], 0.0, 1.0, 3);
        let wide = fixed_family(vec![1.0], 0.0, 8.0, 3);
        let rect = Range::new(vec![Interval::new(0.0, 20.0)]);
        let q = Range::new(vec![Interval::new(14.2, 14.8)]);
        assert!(candidates_for_range(&narrow, &index_subspaces(&narrow, std::slice::from_ref(&rect)), &q).is_empty());
        assert_eq!(
            candidates_for_range(&wide, &index_subspaces(&wide, &[rect]), &q),
            vec![0]
        );
    }
}
