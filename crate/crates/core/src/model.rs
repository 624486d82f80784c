//! Dataset schema, points and ranges.
//!
//! Every indexed dimension carries a *scale lattice*: its domain is divided
//! into `scale_count` equal units and all integral-histogram cell edges sit on
//! lattice boundaries. Interval membership is half-open `[lo, hi)`, except an
//! interval whose upper end reaches the domain maximum, which is closed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionSpec {
    pub name: String,
    pub kind: DimKind,
    pub domain_min: f64,
    pub domain_max: f64,
    pub scale_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category_labels: Option<Vec<String>>,
}

impl DimensionSpec {
    pub fn numeric(name: impl Into<String>, min: f64, max: f64, scale_count: u32) -> Result<Self> {
        let spec = DimensionSpec {
            name: name.into(),
            kind: DimKind::Numeric,
            domain_min: min,
            domain_max: max,
            scale_count,
            category_labels: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A categorical dimension maps label `k` to the value `k`; each category
    /// occupies one scale unit `[k, k+1)`.
    pub fn categorical(name: impl Into<String>, labels: Vec<String>) -> Result<Self> {
        let spec = DimensionSpec {
            name: name.into(),
            kind: DimKind::Categorical,
            domain_min: 0.0,
            domain_max: labels.len() as f64,
            scale_count: labels.len() as u32,
            category_labels: Some(labels),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.domain_min.is_finite() && self.domain_max.is_finite()) {
            return Err(Error::Schema(format!("{}: domain must be finite", self.name)));
        }
        if self.domain_min >= self.domain_max {
            return Err(Error::Schema(format!(
                "{}: domain_min ({}) must be below domain_max ({})",
                self.name, self.domain_min, self.domain_max
            )));
        }
        if self.scale_count == 0 {
            return Err(Error::Schema(format!("{}: scale_count must be positive", self.name)));
        }
        match self.kind {
            DimKind::Numeric => {
                if !is_smooth_235(self.scale_count as u64) {
                    return Err(Error::Schema(format!(
                        "{}: scale_count {} has a prime factor other than 2, 3, 5",
                        self.name, self.scale_count
                    )));
                }
            }
            DimKind::Categorical => {
                let labels = self
                    .category_labels
                    .as_ref()
                    .ok_or_else(|| Error::Schema(format!("{}: categorical dimension without labels", self.name)))?;
                if labels.len() as u32 != self.scale_count {
                    return Err(Error::Schema(format!(
                        "{}: {} labels but scale_count {}",
                        self.name,
                        labels.len(),
                        self.scale_count
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn extent(&self) -> f64 {
        self.domain_max - self.domain_min
    }

    /// Value of lattice boundary `k` (`0..=scale_count`).
    #[inline]
    pub fn scale_edge(&self, k: u32) -> f64 {
        if k == 0 {
            self.domain_min
        } else if k >= self.scale_count {
            self.domain_max
        } else {
            self.domain_min + self.extent() * (k as f64 / self.scale_count as f64)
        }
    }

    /// Lattice unit containing `v`, consistent with comparisons against
    /// [`scale_edge`](Self::scale_edge). Out-of-domain values clamp.
    #[inline]
    pub fn scale_cell(&self, v: f64) -> u32 {
        let s = self.scale_count;
        if v.is_nan() || v <= self.domain_min {
            return 0;
        }
        if v >= self.domain_max {
            return s - 1;
        }
        let guess = ((v - self.domain_min) / self.extent() * s as f64).floor();
        let mut c = (guess.max(0.0) as u32).min(s - 1);
        while c > 0 && v < self.scale_edge(c) {
            c -= 1;
        }
        while c + 1 < s && v >= self.scale_edge(c + 1) {
            c += 1;
        }
        c
    }

    /// Lattice boundary closest to `v`; ties go to the lower boundary.
    pub fn nearest_scale_boundary(&self, v: f64) -> u32 {
        let c = self.scale_cell(v);
        let lo = self.scale_edge(c);
        let hi = self.scale_edge(c + 1);
        if (v - lo).abs() <= (hi - v).abs() {
            c
        } else {
            c + 1
        }
    }

    /// Position of `v` in lattice units, `0.0..=scale_count`.
    pub fn scale_position(&self, v: f64) -> f64 {
        ((v - self.domain_min) / self.extent() * self.scale_count as f64).clamp(0.0, self.scale_count as f64)
    }

    pub fn category_index(&self, label: &str) -> Option<u32> {
        self.category_labels
            .as_ref()?
            .iter()
            .position(|l| l == label)
            .map(|i| i as u32)
    }

    pub fn full_interval(&self) -> Interval {
        Interval::new(self.domain_min, self.domain_max)
    }

    /// Membership under the half-open rule, closed at the domain maximum.
    #[inline]
    pub fn interval_contains(&self, iv: &Interval, v: f64) -> bool {
        v >= iv.lo && (v < iv.hi || (iv.hi >= self.domain_max && v <= iv.hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub dimensions: Vec<DimensionSpec>,
    /// Names of the aggregate (measure) dimensions; `DataPoint::measures`
    /// follows this order.
    pub measures: Vec<String>,
}

impl Schema {
    pub fn new(dimensions: Vec<DimensionSpec>, measures: Vec<String>) -> Result<Self> {
        let schema = Schema { dimensions, measures };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dimensions.is_empty() {
            return Err(Error::Schema("at least one index dimension is required".into()));
        }
        for d in &self.dimensions {
            d.validate()?;
        }
        let mut names: Vec<&str> = self.dimensions.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Schema("duplicate index dimension name".into()));
        }
        Ok(())
    }

    pub fn ndims(&self) -> usize {
        self.dimensions.len()
    }

    pub fn dim_index(&self, name: &str) -> Option<usize> {
        self.dimensions.iter().position(|d| d.name == name)
    }

    pub fn measure_index(&self, name: &str) -> Option<usize> {
        self.measures.iter().position(|m| m == name)
    }

    pub fn full_range(&self) -> Range {
        Range {
            intervals: self.dimensions.iter().map(|d| d.full_interval()).collect(),
        }
    }

    pub fn range_contains(&self, range: &Range, coords: &[f64]) -> bool {
        self.dimensions
            .iter()
            .zip(&range.intervals)
            .zip(coords)
            .all(|((d, iv), &v)| d.interval_contains(iv, v))
    }

    /// Euclidean diagonal of the domain measured in lattice units.
    pub fn scale_diagonal(&self) -> f64 {
        self.dimensions
            .iter()
            .map(|d| (d.scale_count as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_scale_coords(&self, coords: &[f64]) -> Vec<f64> {
        self.dimensions
            .iter()
            .zip(coords)
            .map(|(d, &v)| d.scale_position(v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub coords: Vec<f64>,
    pub measures: Vec<f64>,
}

impl DataPoint {
    pub fn new(coords: Vec<f64>, measures: Vec<f64>) -> Self {
        DataPoint { coords, measures }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn intersects(&self, other: &Interval) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Interval {
        Interval::new(self.lo.clamp(lo, hi), self.hi.clamp(lo, hi))
    }
}

/// Axis-aligned hyper-rectangle, one interval per indexed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub intervals: Vec<Interval>,
}

impl Range {
    pub fn new(intervals: Vec<Interval>) -> Self {
        Range { intervals }
    }

    pub fn point(coords: &[f64]) -> Self {
        Range {
            intervals: coords.iter().map(|&c| Interval::new(c, c)).collect(),
        }
    }

    pub fn ndims(&self) -> usize {
        self.intervals.len()
    }

    /// Closed-box intersection test.
    pub fn intersects(&self, other: &Range) -> bool {
        self.intervals
            .iter()
            .zip(&other.intervals)
            .all(|(a, b)| a.intersects(b))
    }

    pub fn contains_point(&self, coords: &[f64]) -> bool {
        self.intervals
            .iter()
            .zip(coords)
            .all(|(iv, &v)| v >= iv.lo && v <= iv.hi)
    }

    pub fn contains_range(&self, other: &Range) -> bool {
        self.intervals
            .iter()
            .zip(&other.intervals)
            .all(|(a, b)| a.lo <= b.lo && b.hi <= a.hi)
    }

    pub fn expand_to_point(&mut self, coords: &[f64]) {
        for (iv, &v) in self.intervals.iter_mut().zip(coords) {
            if v < iv.lo {
                iv.lo = v;
            }
            if v > iv.hi {
                iv.hi = v;
            }
        }
    }

    pub fn expand_to_range(&mut self, other: &Range) {
        for (iv, o) in self.intervals.iter_mut().zip(&other.intervals) {
            iv.lo = iv.lo.min(o.lo);
            iv.hi = iv.hi.max(o.hi);
        }
    }

    pub fn area(&self) -> f64 {
        self.intervals.iter().map(Interval::width).product()
    }

    pub fn margin(&self) -> f64 {
        self.intervals.iter().map(Interval::width).sum()
    }

    pub fn center(&self) -> Vec<f64> {
        self.intervals.iter().map(|iv| 0.5 * (iv.lo + iv.hi)).collect()
    }

    /// Volume of the intersection; zero when disjoint.
    pub fn overlap_area(&self, other: &Range) -> f64 {
        let mut v = 1.0;
        for (a, b) in self.intervals.iter().zip(&other.intervals) {
            let w = a.hi.min(b.hi) - a.lo.max(b.lo);
            if w <= 0.0 {
                return 0.0;
            }
            v *= w;
        }
        v
    }

    pub fn area_enlarged_by_point(&self, coords: &[f64]) -> f64 {
        self.intervals
            .iter()
            .zip(coords)
            .map(|(iv, &v)| iv.hi.max(v) - iv.lo.min(v))
            .product()
    }

    pub fn area_enlarged_by_range(&self, other: &Range) -> f64 {
        self.intervals
            .iter()
            .zip(&other.intervals)
            .map(|(a, b)| a.hi.max(b.hi) - a.lo.min(b.lo))
            .product()
    }
}

/// True when `n` has no prime factor other than 2, 3 and 5.
pub fn is_smooth_235(mut n: u64) -> bool {
    if n == 0 {
        return false;
    }
    for p in [2, 3, 5] {
        while n.is_multiple_of(p) {
            n /= p;
        }
    }
    n == 1
}

/// Closest 2-3-5-smooth count to `n`; ties resolve to the larger count.
pub fn nearest_smooth_235(n: u64) -> u64 {
    if n <= 1 {
        return 1;
    }
    let below = (1..=n).rev().find(|&k| is_smooth_235(k)).unwrap_or(1);
    let above = (n..).find(|&k| is_smooth_235(k)).expect("smooth numbers are unbounded");
    if n - below < above - n {
        below
    } else {
        above
    }
}
