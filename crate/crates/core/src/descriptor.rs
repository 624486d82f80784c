//! Feature descriptors and measure estimation.
//!
//! A descriptor is a fixed-length accumulator vector. The aggregate kind
//! stores `[count, sum_0, .., sum_{m-1}]` (one sum per measure dimension);
//! the histogram kind stores `B` bin counts of a single measure dimension
//! over edges owned by the enclosing integral histogram.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    Aggregate,
    Histogram,
}

/// Index-wide descriptor layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DescriptorConfig {
    /// Count plus one sum slot per measure dimension.
    Aggregate { measures: usize },
    /// `bins` local bins over measure dimension `measure`.
    Histogram { measure: usize, bins: usize },
}

impl DescriptorConfig {
    pub fn kind(&self) -> DescriptorKind {
        match self {
            DescriptorConfig::Aggregate { .. } => DescriptorKind::Aggregate,
            DescriptorConfig::Histogram { .. } => DescriptorKind::Histogram,
        }
    }

    pub fn slots(&self) -> usize {
        match *self {
            DescriptorConfig::Aggregate { measures } => 1 + measures,
            DescriptorConfig::Histogram { bins, .. } => bins,
        }
    }

    /// Slots kept per tree node for coarse (non-leaf) answers: the full
    /// aggregate vector, or just the count for histograms.
    pub fn total_slots(&self) -> usize {
        match *self {
            DescriptorConfig::Aggregate { measures } => 1 + measures,
            DescriptorConfig::Histogram { .. } => 1,
        }
    }

    pub fn zero(&self) -> FeatureDescriptor {
        FeatureDescriptor {
            kind: self.kind(),
            values: vec![0.0; self.slots()],
        }
    }
}

/// Accumulator vector for the points of one cell or range.
///
/// Slots are `f64`; counts stay integer-exact below 2^53.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDescriptor {
    pub kind: DescriptorKind,
    pub values: Vec<f64>,
}

impl FeatureDescriptor {
    pub fn new(kind: DescriptorKind, values: Vec<f64>) -> Self {
        FeatureDescriptor { kind, values }
    }

    pub fn aggregate(values: Vec<f64>) -> Self {
        Self::new(DescriptorKind::Aggregate, values)
    }

    pub fn histogram(values: Vec<f64>) -> Self {
        Self::new(DescriptorKind::Histogram, values)
    }

    pub fn zero_like(&self) -> Self {
        Self::new(self.kind, vec![0.0; self.values.len()])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.kind != other.kind || self.values.len() != other.values.len() {
            return Err(Error::Schema(format!(
                "descriptor mismatch: {:?}[{}] vs {:?}[{}]",
                self.kind,
                self.values.len(),
                other.kind,
                other.values.len()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(Self::new(self.kind, values))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_compatible(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(Self::new(self.kind, values))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_compatible(other)?;
        add_slots(&mut self.values, &other.values);
        Ok(())
    }

    /// Number of points summarized.
    pub fn count(&self) -> f64 {
        match self.kind {
            DescriptorKind::Aggregate => self.values.first().copied().unwrap_or(0.0),
            DescriptorKind::Histogram => self.values.iter().sum(),
        }
    }
}

/// Elementwise sum into `acc`.
pub fn descriptor_add(a: &FeatureDescriptor, b: &FeatureDescriptor) -> Result<FeatureDescriptor> {
    a.add(b)
}

#[inline]
pub(crate) fn add_slots(acc: &mut [f64], other: &[f64]) {
    for (a, b) in acc.iter_mut().zip(other) {
        *a += *b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "dimension", rename_all = "snake_case")]
pub enum Measure {
    Count,
    Sum(usize),
    Mean(usize),
    Median(usize),
}

impl Measure {
    pub fn target(&self) -> Option<usize> {
        match *self {
            Measure::Count => None,
            Measure::Sum(m) | Measure::Mean(m) | Measure::Median(m) => Some(m),
        }
    }

    /// Count and sum add across disjoint ranges.
    pub fn is_distributive(&self) -> bool {
        matches!(self, Measure::Count | Measure::Sum(_))
    }

    pub fn name(&self) -> &'static str {
        match self {
            Measure::Count => "count",
            Measure::Sum(_) => "sum",
            Measure::Mean(_) => "mean",
            Measure::Median(_) => "median",
        }
    }

    /// Checks that descriptors laid out as `config` can answer this measure.
    pub fn check_supported(&self, config: &DescriptorConfig) -> Result<()> {
        match (*self, config) {
            (Measure::Count, _) => Ok(()),
            (Measure::Sum(m) | Measure::Mean(m), DescriptorConfig::Aggregate { measures }) => {
                if m < *measures {
                    Ok(())
                } else {
                    Err(Error::query("measure", format!("unknown measure dimension {m}")))
                }
            }
            (Measure::Median(m), DescriptorConfig::Histogram { measure, .. }) => {
                if m == *measure {
                    Ok(())
                } else {
                    Err(Error::Unsupported(format!(
                        "median needs a histogram over measure {m}; index holds measure {measure}"
                    )))
                }
            }
            (Measure::Median(_), DescriptorConfig::Aggregate { .. }) => {
                Err(Error::Unsupported("median requires histogram descriptors".into()))
            }
            (Measure::Sum(_) | Measure::Mean(_), DescriptorConfig::Histogram { .. }) => {
                Err(Error::Unsupported("sum/mean require aggregate descriptors".into()))
            }
        }
    }
}

/// Measure value, `None` for an empty selection (mean/median of nothing).
pub type Estimate = Option<f64>;

/// Evaluates `measure` on one descriptor. Histogram descriptors need their
/// bin `edges` (`B + 1` values).
pub fn estimate_measure(d: &FeatureDescriptor, measure: Measure, edges: Option<&[f64]>) -> Result<Estimate> {
    match (measure, d.kind) {
        (Measure::Count, _) => Ok(Some(d.count())),
        (Measure::Sum(m), DescriptorKind::Aggregate) => slot(d, 1 + m).map(Some),
        (Measure::Mean(m), DescriptorKind::Aggregate) => {
            let count = d.count();
            let sum = slot(d, 1 + m)?;
            Ok(if count > 0.0 { Some(sum / count) } else { None })
        }
        (Measure::Median(_), DescriptorKind::Histogram) => {
            let edges = edges.ok_or_else(|| Error::Schema("median needs bin edges".into()))?;
            if edges.len() != d.values.len() + 1 {
                return Err(Error::Schema(format!(
                    "{} edges for {} bins",
                    edges.len(),
                    d.values.len()
                )));
            }
            Ok(histogram_median(&[(edges, &d.values)]))
        }
        (m, k) => Err(Error::Unsupported(format!("{} on {:?} descriptor", m.name(), k))),
    }
}

fn slot(d: &FeatureDescriptor, i: usize) -> Result<f64> {
    d.values
        .get(i)
        .copied()
        .ok_or_else(|| Error::Schema(format!("descriptor has no slot {i}")))
}

/// Median of a mixture of histograms, each uniform within its bins. The
/// value where cumulative mass reaches one half is linearly interpolated
/// inside the bin that contains it.
pub fn histogram_median(parts: &[(&[f64], &[f64])]) -> Estimate {
    let total: f64 = parts.iter().flat_map(|(_, c)| c.iter()).sum();
    if total <= 0.0 {
        return None;
    }
    let mut breaks: Vec<f64> = parts.iter().flat_map(|(e, _)| e.iter().copied()).collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let half = 0.5 * total;

    let cdf = |x: f64| -> f64 {
        let mut acc = 0.0;
        for (edges, counts) in parts {
            for (b, &c) in counts.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                let (lo, hi) = (edges[b], edges[b + 1]);
                if x >= hi {
                    acc += c;
                } else if x > lo {
                    acc += c * (x - lo) / (hi - lo);
                }
            }
        }
        acc
    };

    // Mass sitting on zero-width bins jumps the CDF at a single value.
    let mut prev_x = breaks[0];
    let mut prev_f = 0.0;
    for &x in &breaks {
        let f = cdf(x);
        if f >= half {
            if f - prev_f <= 0.0 || x == prev_x {
                return Some(x);
            }
            let t = (half - prev_f) / (f - prev_f);
            return Some(prev_x + t * (x - prev_x));
        }
        prev_x = x;
        prev_f = f;
    }
    breaks.last().copied()
}

/// Equi-width bin edges over `[lo, hi]`.
pub fn equi_width_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    (0..=bins)
        .map(|i| {
            if i == bins {
                hi
            } else {
                lo + (hi - lo) * (i as f64 / bins as f64)
            }
        })
        .collect()
}

/// Bin of `v` among `edges`: half-open bins, the last one closed. Values
/// outside the edge range clamp to the first or last bin.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    let i = edges.partition_point(|&e| e <= v);
    i.saturating_sub(1).min(bins - 1)
}
