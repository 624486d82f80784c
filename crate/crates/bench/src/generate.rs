//! Seeded synthetic datasets.
//!
//! Both generators are pure functions of their spec: every scan replays the
//! same rows, so a dataset can be streamed several times (the progressive
//! build does) without being held in memory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ihcube_core::index::PointSource;
use ihcube_core::ingest::{Auto, ColumnConfig, ColumnKind, DescriptorSection, Role, SchemaConfig};
use ihcube_core::model::{is_smooth_235, DataPoint, DimensionSpec, Interval, Range, Schema};
use ihcube_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One Gaussian component, axis-aligned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub mean: Vec<f64>,
    pub sigma: Vec<f64>,
    pub weight: f64,
}

/// Scatterplot-matrix style data: a uniform background plus Gaussian
/// clusters over `[0, 1]^dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplomSpec {
    pub dims: usize,
    pub rows: u64,
    /// Scale count per dimension (the bin count charts use).
    pub bins: u32,
    pub clusters: usize,
    pub uniform_fraction: f64,
    pub seed: u64,
}

impl Default for SplomSpec {
    fn default() -> Self {
        SplomSpec {
            dims: 5,
            rows: 100_000,
            bins: 10,
            clusters: 8,
            uniform_fraction: 0.2,
            seed: 42,
        }
    }
}

/// Two-dimensional data with strongly uneven density, in the spirit of
/// points of interest on a map: a few tight dense clusters, wider sparse
/// ones, and a thin uniform background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkewSpec {
    pub rows: u64,
    pub scale_count: u32,
    pub clusters: usize,
    pub uniform_fraction: f64,
    pub seed: u64,
}

impl Default for SkewSpec {
    fn default() -> Self {
        SkewSpec {
            rows: 1_000_000,
            scale_count: 360,
            clusters: 12,
            uniform_fraction: 0.05,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    Splom(SplomSpec),
    Skewed(SkewSpec),
}

/// A generator ready to stream rows.
#[derive(Debug, Clone)]
pub struct Dataset {
    schema: Schema,
    rows: u64,
    clusters: Vec<Cluster>,
    uniform_fraction: f64,
    seed: u64,
}

const PARAM_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl Dataset {
    pub fn new(spec: &DatasetSpec) -> Result<Self> {
        match spec {
            DatasetSpec::Splom(s) => Self::splom(s),
            DatasetSpec::Skewed(s) => Self::skewed(s),
        }
    }

    pub fn splom(spec: &SplomSpec) -> Result<Self> {
        if !(1..=5).contains(&spec.dims) {
            return Err(Error::Config(format!("splom dims must be 1..=5, got {}", spec.dims)));
        }
        if !is_smooth_235(spec.bins as u64) {
            return Err(Error::Config(format!("bins {} is not 2-3-5-smooth", spec.bins)));
        }
        let dims = (1..=spec.dims)
            .map(|i| DimensionSpec::numeric(format!("d{i}"), 0.0, 1.0, spec.bins))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ PARAM_STREAM);
        // Means stay far enough from the border that truncation barely
        // shifts them.
        let clusters = (0..spec.clusters)
            .map(|_| Cluster {
                mean: (0..spec.dims).map(|_| rng.gen_range(0.3..0.7)).collect(),
                sigma: (0..spec.dims).map(|_| rng.gen_range(0.02..0.08)).collect(),
                weight: rng.gen_range(0.5..1.5),
            })
            .collect();
        Self::with(
            Schema::new(dims, vec![])?,
            spec.rows,
            clusters,
            spec.uniform_fraction,
            spec.seed,
        )
    }

    pub fn skewed(spec: &SkewSpec) -> Result<Self> {
        let dims = ["x", "y"]
            .iter()
            .map(|n| DimensionSpec::numeric(*n, 0.0, 1.0, spec.scale_count))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ PARAM_STREAM);
        let clusters = (0..spec.clusters)
            .map(|i| {
                // Spread is log-uniform, weight heavy-tailed, so tight
                // clusters carry most of the mass.
                let sigma = 0.004 * (20f64).powf(rng.gen::<f64>());
                let aspect = rng.gen_range(0.5..2.0);
                Cluster {
                    mean: vec![rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
                    sigma: vec![sigma * aspect, sigma / aspect],
                    weight: 1.0 / (1.0 + i as f64).powf(1.2),
                }
            })
            .collect();
        Self::with(
            Schema::new(dims, vec![])?,
            spec.rows,
            clusters,
            spec.uniform_fraction,
            spec.seed,
        )
    }

    fn with(schema: Schema, rows: u64, clusters: Vec<Cluster>, uniform_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&uniform_fraction) || (clusters.is_empty() && uniform_fraction < 1.0) {
            return Err(Error::Config(
                "uniform_fraction must be in [0, 1] and 1 without clusters".into(),
            ));
        }
        Ok(Dataset {
            schema,
            rows,
            clusters,
            uniform_fraction,
            seed,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Same distribution, different row count.
    pub fn with_rows(&self, rows: u64) -> Self {
        Dataset { rows, ..self.clone() }
    }

    /// Rows tagged with their source component (`None` for background).
    pub fn labeled(&self) -> impl Iterator<Item = (Option<usize>, DataPoint)> + '_ {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let total: f64 = self.clusters.iter().map(|c| c.weight).sum();
        let cdf: Vec<f64> = self
            .clusters
            .iter()
            .scan(0.0, |acc, c| {
                *acc += c.weight / total;
                Some(*acc)
            })
            .collect();
        let d = self.schema.ndims();
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.rows).map(move |_| {
            if rng.gen::<f64>() < self.uniform_fraction {
                let coords = (0..d).map(|_| rng.gen::<f64>()).collect();
                return (None, DataPoint::new(coords, vec![]));
            }
            let u: f64 = rng.gen();
            let k = cdf.partition_point(|&c| c < u).min(cdf.len() - 1);
            let c = &self.clusters[k];
            let coords = (0..d)
                .map(|j| loop {
                    let v = c.mean[j] + c.sigma[j] * std.sample(&mut rng);
                    if (0.0..=1.0).contains(&v) {
                        break v;
                    }
                })
                .collect();
            (Some(k), DataPoint::new(coords, vec![]))
        })
    }

    pub fn points(&self) -> impl Iterator<Item = DataPoint> + '_ {
        self.labeled().map(|(_, p)| p)
    }

    pub fn collect(&self) -> Vec<DataPoint> {
        self.points().collect()
    }

    /// Whole domain, the box around the densest cluster, and the box around
    /// the sparsest one (each 3 sigma wide, clipped to the domain).
    pub fn regions(&self) -> Vec<(String, Range)> {
        let mut out = vec![("global".to_string(), self.schema.full_range())];
        let density = |c: &Cluster| c.weight / c.sigma.iter().product::<f64>();
        let by_density = |a: &&Cluster, b: &&Cluster| density(a).total_cmp(&density(b));
        let boxed = |c: &Cluster| {
            Range::new(
                c.mean
                    .iter()
                    .zip(&c.sigma)
                    .map(|(m, s)| Interval::new((m - 3.0 * s).max(0.0), (m + 3.0 * s).min(1.0)))
                    .collect(),
            )
        };
        if let Some(c) = self.clusters.iter().max_by(by_density) {
            out.push(("dense".into(), boxed(c)));
        }
        if let Some(c) = self.clusters.iter().min_by(by_density) {
            out.push(("sparse".into(), boxed(c)));
        }
        out
    }

    /// Ingest configuration that reproduces this schema from the CSV.
    pub fn ingest_config(&self) -> SchemaConfig {
        SchemaConfig {
            columns: self
                .schema
                .dimensions
                .iter()
                .map(|d| ColumnConfig {
                    name: d.name.clone(),
                    kind: ColumnKind::Numeric,
                    role: Role::Index,
                    domain: Auto::Value([d.domain_min, d.domain_max]),
                    scale_count: Auto::Value(d.scale_count as u64),
                    categories: None,
                })
                .collect(),
            descriptor: DescriptorSection::Aggregate,
            target_resolution: 360,
            build: Default::default(),
            lsh: None,
        }
    }

    /// Writes a header plus one line per row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
        w.write_record(self.schema.dimensions.iter().map(|d| d.name.as_str()))?;
        for p in self.points() {
            // Display prints the shortest text that parses back exactly.
            w.write_record(p.coords.iter().map(f64::to_string))?;
        }
        w.flush()?;
        w.into_inner().map_err(|e| Error::Io(e.into_error()))?.flush()?;
        Ok(())
    }
}

impl PointSource for Dataset {
    fn scan(&self) -> Result<Box<dyn Iterator<Item = Result<DataPoint>> + '_>> {
        Ok(Box::new(self.points().map(Ok)))
    }
}
