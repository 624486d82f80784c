//! Schema configuration and CSV ingestion.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::descriptor::DescriptorConfig;
use crate::error::{Error, Result};
use crate::index::{build_index, BuildConfig, Index, PointSource};
use crate::lsh::LshParams;
use crate::model::{nearest_smooth_235, DataPoint, DimensionSpec, Schema};

pub const DEFAULT_RESOLUTION: u64 = 360;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    #[default]
    Numeric,
    Categorical,
    /// Seconds since the epoch; numeric with one-second scale units when the
    /// span allows it.
    Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Index,
    Measure,
    Both,
}

/// `"auto"` or an explicit value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Auto<T> {
    Auto(AutoTag),
    Value(T),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoTag {
    Auto,
}

impl<T> Default for Auto<T> {
    fn default() -> Self {
        Auto::Auto(AutoTag::Auto)
    }
}

impl<T: Clone> Auto<T> {
    fn value(&self) -> Option<T> {
        match self {
            Auto::Auto(_) => None,
            Auto::Value(v) => Some(v.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnConfig {
    pub name: String,
    #[serde(default)]
    pub kind: ColumnKind,
    #[serde(default)]
    pub role: Role,
    #[serde(default)]
    pub domain: Auto<[f64; 2]>,
    #[serde(default)]
    pub scale_count: Auto<u64>,
    /// Category labels in code order; collected from the data when absent.
    #[serde(default)]
    pub categories: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DescriptorSection {
    /// Count plus a sum per measure column.
    #[default]
    Aggregate,
    Histogram {
        measure: String,
        bins: usize,
    },
}

/// The whole configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    #[serde(rename = "column")]
    pub columns: Vec<ColumnConfig>,
    #[serde(default)]
    pub descriptor: DescriptorSection,
    /// Scale count used for `"auto"` numeric dimensions.
    #[serde(default = "default_resolution")]
    pub target_resolution: u64,
    #[serde(default)]
    pub build: BuildConfig,
    #[serde(default)]
    pub lsh: Option<LshParams>,
}

fn default_resolution() -> u64 {
    DEFAULT_RESOLUTION
}

impl SchemaConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build_config(&self) -> BuildConfig {
        let mut b = self.build.clone();
        if let Some(l) = &self.lsh {
            b.lsh = l.clone();
        }
        b
    }

    fn needs_scan(&self) -> bool {
        self.columns.iter().any(|c| {
            matches!(c.role, Role::Index | Role::Both)
                && match c.kind {
                    ColumnKind::Categorical => c.categories.is_none(),
                    _ => c.domain.value().is_none(),
                }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Slot {
    Numeric,
    Categorical(HashMap<String, u32>),
}

/// A configuration resolved against a file: concrete schema plus the CSV
/// column that feeds each dimension and measure.
#[derive(Debug, Clone, PartialEq)]
pub struct IngestPlan {
    pub schema: Schema,
    pub descriptor: DescriptorConfig,
    pub build: BuildConfig,
    pub warnings: Vec<String>,
    dim_columns: Vec<(usize, Slot)>,
    measure_columns: Vec<usize>,
}

impl IngestPlan {
    fn parse_row(&self, rec: &csv::StringRecord) -> Option<DataPoint> {
        let mut coords = Vec::with_capacity(self.dim_columns.len());
        for ((col, slot), d) in self.dim_columns.iter().zip(&self.schema.dimensions) {
            let raw = rec.get(*col)?.trim();
            let v = match slot {
                Slot::Numeric => raw.parse::<f64>().ok().filter(|v| v.is_finite())?,
                Slot::Categorical(map) => *map.get(raw)? as f64,
            };
            if v < d.domain_min || v > d.domain_max {
                return None;
            }
            coords.push(v);
        }
        let mut measures = Vec::with_capacity(self.measure_columns.len());
        for &col in &self.measure_columns {
            measures.push(rec.get(col)?.trim().parse::<f64>().ok().filter(|v| v.is_finite())?);
        }
        Some(DataPoint { coords, measures })
    }
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Ingest(format!("missing column `{name}`")))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    Ok(csv::ReaderBuilder::new().flexible(true).from_path(path)?)
}

/// Resolves `"auto"` domains, scale counts and category sets (scanning the
/// file once when needed) and maps columns.
pub fn resolve(config: &SchemaConfig, path: &Path) -> Result<IngestPlan> {
    let mut rdr = reader(path)?;
    let headers = rdr.headers()?.clone();
    let mut warnings = Vec::new();

    let index_cols: Vec<&ColumnConfig> = config
        .columns
        .iter()
        .filter(|c| matches!(c.role, Role::Index | Role::Both))
        .collect();
    let measure_cols: Vec<&ColumnConfig> = config
        .columns
        .iter()
        .filter(|c| matches!(c.role, Role::Measure | Role::Both))
        .collect();
    if index_cols.is_empty() {
        return Err(Error::Config("at least one index column is required".into()));
    }
    if index_cols.len() > 5 {
        warnings.push(format!(
            "{} index dimensions; histogram storage grows quickly beyond five",
            index_cols.len()
        ));
    }
    if let Some(c) = measure_cols.iter().find(|c| c.kind == ColumnKind::Categorical) {
        return Err(Error::Config(format!(
            "measure column `{}` cannot be categorical",
            c.name
        )));
    }
    let idx_pos: Vec<usize> = index_cols
        .iter()
        .map(|c| header_index(&headers, &c.name))
        .collect::<Result<_>>()?;
    let measure_pos: Vec<usize> = measure_cols
        .iter()
        .map(|c| header_index(&headers, &c.name))
        .collect::<Result<_>>()?;

    // First pass only for "auto" settings.
    let mut lo = vec![f64::INFINITY; index_cols.len()];
    let mut hi = vec![f64::NEG_INFINITY; index_cols.len()];
    let mut labels: Vec<BTreeSet<String>> = vec![BTreeSet::new(); index_cols.len()];
    if config.needs_scan() {
        for rec in rdr.records() {
            let Ok(rec) = rec else { continue };
            for (i, c) in index_cols.iter().enumerate() {
                let Some(raw) = rec.get(idx_pos[i]).map(str::trim) else {
                    continue;
                };
                match c.kind {
                    ColumnKind::Categorical => {
                        if !raw.is_empty() {
                            labels[i].insert(raw.to_string());
                        }
                    }
                    _ => {
                        if let Ok(v) = raw.parse::<f64>() {
                            if v.is_finite() {
                                lo[i] = lo[i].min(v);
                                hi[i] = hi[i].max(v);
                            }
                        }
                    }
                }
            }
        }
    }

    let mut dims = Vec::with_capacity(index_cols.len());
    let mut dim_columns = Vec::with_capacity(index_cols.len());
    for (i, c) in index_cols.iter().enumerate() {
        match c.kind {
            ColumnKind::Categorical => {
                let l: Vec<String> = match &c.categories {
                    Some(l) => l.clone(),
                    None => labels[i].iter().cloned().collect(),
                };
                if l.is_empty() {
                    return Err(Error::Ingest(format!("column `{}` has no categories", c.name)));
                }
                let map = l.iter().enumerate().map(|(k, s)| (s.clone(), k as u32)).collect();
                dims.push(DimensionSpec::categorical(&c.name, l)?);
                dim_columns.push((idx_pos[i], Slot::Categorical(map)));
            }
            ColumnKind::Numeric | ColumnKind::Time => {
                let [min, max] = match c.domain.value() {
                    Some(d) => d,
                    None => {
                        if lo[i] > hi[i] {
                            return Err(Error::Ingest(format!("column `{}` has no numeric values", c.name)));
                        }
                        [lo[i], if hi[i] > lo[i] { hi[i] } else { lo[i] + 1.0 }]
                    }
                };
                let requested = match (c.scale_count.value(), c.kind) {
                    (Some(n), _) => n,
                    (None, ColumnKind::Time) if (max - min) <= 1e6 => (max - min).ceil().max(1.0) as u64,
                    (None, _) => config.target_resolution,
                };
                let n = nearest_smooth_235(requested);
                if n != requested {
                    warnings.push(format!("{}: scale count {requested} replaced by {n}", c.name));
                }
                let n = u32::try_from(n).map_err(|_| Error::Config(format!("{}: scale count too large", c.name)))?;
                dims.push(DimensionSpec::numeric(&c.name, min, max, n)?);
                dim_columns.push((idx_pos[i], Slot::Numeric));
            }
        }
    }
    let schema = Schema::new(dims, measure_cols.iter().map(|c| c.name.clone()).collect())?;
    let descriptor = match &config.descriptor {
        DescriptorSection::Aggregate => DescriptorConfig::Aggregate {
            measures: schema.measures.len(),
        },
        DescriptorSection::Histogram { measure, bins } => DescriptorConfig::Histogram {
            measure: schema
                .measure_index(measure)
                .ok_or_else(|| Error::Config(format!("histogram measure `{measure}` is not a measure column")))?,
            bins: *bins,
        },
    };
    Ok(IngestPlan {
        schema,
        descriptor,
        build: config.build_config(),
        warnings,
        dim_columns,
        measure_columns: measure_pos,
    })
}

/// Re-readable CSV point stream. Malformed rows are skipped and counted.
pub struct CsvSource {
    path: PathBuf,
    plan: IngestPlan,
    rows: AtomicU64,
    skipped: AtomicU64,
}

impl CsvSource {
    pub fn new(path: impl Into<PathBuf>, plan: IngestPlan) -> Self {
        CsvSource {
            path: path.into(),
            plan,
            rows: AtomicU64::new(0),
            skipped: AtomicU64::new(0),
        }
    }

    pub fn plan(&self) -> &IngestPlan {
        &self.plan
    }

    /// Valid rows seen by the most recent complete scan.
    pub fn rows(&self) -> u64 {
        self.rows.load(Ordering::Relaxed)
    }

    /// Rows skipped by the most recent complete scan.
    pub fn skipped(&self) -> u64 {
        self.skipped.load(Ordering::Relaxed)
    }

    /// Reads every point into memory.
    pub fn collect(&self) -> Result<Vec<DataPoint>> {
        self.scan()?.collect()
    }
}

struct CsvIter<'a> {
    src: &'a CsvSource,
    records: csv::StringRecordsIntoIter<std::fs::File>,
    rows: u64,
    skipped: u64,
}

impl Iterator for CsvIter<'_> {
    type Item = Result<DataPoint>;

    fn next(&mut self) -> Option<Self::Item> {
        for rec in self.records.by_ref() {
            match rec {
                Ok(rec) => match self.src.plan.parse_row(&rec) {
                    Some(p) => {
                        self.rows += 1;
                        return Some(Ok(p));
                    }
                    None => self.skipped += 1,
                },
                Err(e) if e.is_io_error() => return Some(Err(e.into())),
                Err(_) => self.skipped += 1,
            }
        }
        self.src.rows.store(self.rows, Ordering::Relaxed);
        self.src.skipped.store(self.skipped, Ordering::Relaxed);
        None
    }
}

impl PointSource for CsvSource {
    fn scan(&self) -> Result<Box<dyn Iterator<Item = Result<DataPoint>> + '_>> {
        let rdr = reader(&self.path)?;
        Ok(Box::new(CsvIter {
            src: self,
            records: rdr.into_records(),
            rows: 0,
            skipped: 0,
        }))
    }
}

/// Opens `path` under `config`.
pub fn ingest_csv(path: &Path, config: &SchemaConfig) -> Result<CsvSource> {
    Ok(CsvSource::new(path, resolve(config, path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub rows: u64,
    pub skipped: u64,
    pub warnings: Vec<String>,
}

/// Ingests `path` and builds an index over it.
pub fn build_from_csv(path: &Path, config: &SchemaConfig) -> Result<(Index, IngestReport)> {
    let src = ingest_csv(path, config)?;
    let plan = src.plan().clone();
    let index = build_index(&plan.schema, &src, plan.descriptor.clone(), &plan.build)?;
    if src.rows() == 0 {
        return Err(Error::Ingest("no valid rows".into()));
    }
    let report = IngestReport {
        rows: src.rows(),
        skipped: src.skipped(),
        warnings: plan.warnings,
    };
    Ok((index, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(body.as_bytes()).unwrap();
        p
    }

    const CONFIG: &str = r#"
target_resolution = 100

[[column]]
name = "x"
domain = [0.0, 10.0]
scale_count = 10

[[column]]
name = "day"
kind = "categorical"

[[column]]
name = "w"
role = "measure"
"#;

    #[test]
    fn well_formed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,day,w\n1.5,mon,2\n3,tue,4\n9.5,mon,1\n");
        let cfg = SchemaConfig::from_toml_str(CONFIG).unwrap();
        let src = ingest_csv(&p, &cfg).unwrap();
        let pts = src.collect().unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(src.skipped(), 0);
        assert_eq!(pts[1], DataPoint::new(vec![3.0, 1.0], vec![4.0]));
        assert_eq!(
            src.plan().schema.dimensions[1].category_labels.as_deref().unwrap(),
            ["mon", "tue"]
        );
    }

    #[test]
    fn malformed_rows_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "a.csv",
            "x,day,w\n1.5,mon,2\nabc,tue,4\n3,tue\n11,mon,1\n2,mon,5\n",
        );
        let cfg = SchemaConfig::from_toml_str(CONFIG).unwrap();
        let (index, report) = build_from_csv(&p, &cfg).unwrap();
        assert_eq!(report.rows, 2);
        assert_eq!(report.skipped, 3);
        assert_eq!(index.total_count(), 2.0);
    }

    #[test]
    fn missing_column_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SchemaConfig::from_toml_str(CONFIG).unwrap();
        let p = write(&dir, "a.csv", "x,w\n1,2\n");
        assert!(matches!(ingest_csv(&p, &cfg), Err(Error::Ingest(_))));
        let p = write(&dir, "b.csv", "x,day,w\nfoo,mon,1\n");
        assert!(build_from_csv(&p, &cfg).is_err());
    }

    #[test]
    fn auto_domain_and_smooth_scales() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "x,y\n-2,5\n4,7\n1,6\n");
        let cfg = SchemaConfig::from_toml_str(
            r#"
[[column]]
name = "x"
scale_count = 3571

[[column]]
name = "y"
role = "both"
"#,
        )
        .unwrap();
        let plan = resolve(&cfg, &p).unwrap();
        let x = &plan.schema.dimensions[0];
        assert_eq!((x.domain_min, x.domain_max, x.scale_count), (-2.0, 4.0, 3600));
        assert_eq!(plan.schema.dimensions[1].scale_count, 360);
        assert_eq!(plan.schema.measures, vec!["y".to_string()]);
        assert_eq!(plan.warnings.len(), 1);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(SchemaConfig::from_toml_str("[[column]]\nname = \"x\"\nbogus = 1\n").is_err());
        let cfg = SchemaConfig::from_toml_str(CONFIG).unwrap();
        let back = SchemaConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
