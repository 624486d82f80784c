//! JSON request and response documents.

use std::collections::BTreeMap;

use ihcube_core::descriptor::{DescriptorConfig, Measure};
use ihcube_core::model::{DimKind, Interval, Schema};
use ihcube_core::query::{make_grid, AccuracyMode, Binning, CategoryFilter, QueryResult, QuerySpec};
use ihcube_core::{Error, Index, Result};
use serde::{Deserialize, Serialize};

/// Restriction of one dimension: a `[lo, hi]` interval or a category set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FilterSpec {
    Interval([f64; 2]),
    Categories(CategorySet),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategorySet {
    pub categories: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSpec {
    pub dim: String,
    /// `equi_width`, `log`, `equi_data`, `explicit` or `categories`.
    #[serde(default)]
    pub strategy: Option<String>,
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default)]
    pub edges: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSpec {
    /// `count`, `sum`, `mean` or `median`.
    pub kind: String,
    /// Measure column for everything but `count`.
    #[serde(default)]
    pub field: Option<String>,
}

impl Default for MeasureSpec {
    fn default() -> Self {
        MeasureSpec {
            kind: "count".into(),
            field: None,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRequest {
    #[serde(default)]
    pub filter: BTreeMap<String, FilterSpec>,
    #[serde(default)]
    pub group: Vec<GroupSpec>,
    #[serde(default)]
    pub measure: MeasureSpec,
    #[serde(default)]
    pub accuracy_mode: AccuracyMode,
    #[serde(default)]
    pub want_error_bounds: bool,
    #[serde(default = "yes")]
    pub align_scales: bool,
    /// Adds `elapsed_micros` to the response body (the timing header is
    /// always sent).
    #[serde(default)]
    pub timing: bool,
}

impl Default for QueryRequest {
    fn default() -> Self {
        QueryRequest {
            filter: BTreeMap::new(),
            group: Vec::new(),
            measure: MeasureSpec::default(),
            accuracy_mode: AccuracyMode::Tree,
            want_error_bounds: false,
            align_scales: true,
            timing: false,
        }
    }
}

fn dim(schema: &Schema, field: &str, name: &str) -> Result<usize> {
    schema
        .dim_index(name)
        .ok_or_else(|| Error::query(field, format!("unknown dimension `{name}`")))
}

/// Translates a request into an engine query.
pub fn to_spec(index: &Index, req: &QueryRequest) -> Result<QuerySpec> {
    let schema = index.schema();
    let mut filter = schema.full_range();
    let mut categories = Vec::new();
    for (name, f) in &req.filter {
        let field = format!("filter.{name}");
        let k = dim(schema, &field, name)?;
        let d = &schema.dimensions[k];
        match f {
            FilterSpec::Interval([lo, hi]) => {
                if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                    return Err(Error::query(field, "expected [lo, hi] with lo <= hi"));
                }
                filter.intervals[k] = Interval::new(*lo, *hi);
            }
            FilterSpec::Categories(set) => {
                if d.kind != DimKind::Categorical {
                    return Err(Error::query(field, "category filter on a numeric dimension"));
                }
                let codes = set
                    .categories
                    .iter()
                    .map(|l| {
                        d.category_index(l)
                            .ok_or_else(|| Error::query(field.clone(), format!("unknown category `{l}`")))
                    })
                    .collect::<Result<Vec<u32>>>()?;
                categories.push(CategoryFilter { dim: k, codes });
            }
        }
    }
    let mut axes = Vec::with_capacity(req.group.len());
    for (i, g) in req.group.iter().enumerate() {
        let field = format!("group[{i}]");
        let k = dim(schema, &format!("{field}.dim"), &g.dim)?;
        let categorical = schema.dimensions[k].kind == DimKind::Categorical;
        let strategy = g.strategy.as_deref().unwrap_or(if categorical {
            "categories"
        } else if g.edges.is_some() {
            "explicit"
        } else {
            "equi_width"
        });
        let bins = || {
            g.bins
                .ok_or_else(|| Error::query(format!("{field}.bins"), format!("`{strategy}` needs a bin count")))
        };
        let binning = match strategy {
            "equi_width" => Binning::EquiWidth { bins: bins()? },
            "log" => Binning::Log { bins: bins()? },
            "equi_data" => Binning::EquiData { bins: bins()? },
            "explicit" => Binning::Explicit {
                edges: g
                    .edges
                    .clone()
                    .ok_or_else(|| Error::query(format!("{field}.edges"), "explicit binning needs edges"))?,
            },
            "categories" => Binning::Categories,
            other => {
                return Err(Error::query(
                    format!("{field}.strategy"),
                    format!("unknown strategy `{other}`"),
                ))
            }
        };
        axes.push((k, binning));
    }
    let grid = make_grid(index, filter, &axes).map_err(|e| match e {
        Error::InvalidQuery { field, message } => {
            // Name group fields by request position.
            let field = req
                .group
                .iter()
                .enumerate()
                .find_map(|(i, g)| {
                    let prefix = format!("group.{}", g.dim);
                    let rest = field.strip_prefix(&prefix)?;
                    (rest.is_empty() || rest.starts_with('.')).then(|| format!("group[{i}]{rest}"))
                })
                .unwrap_or(field);
            Error::InvalidQuery { field, message }
        }
        e => e,
    })?;
    let m = &req.measure;
    let target = || -> Result<usize> {
        let name = m
            .field
            .as_deref()
            .ok_or_else(|| Error::query("measure.field", format!("`{}` needs a measure field", m.kind)))?;
        schema
            .measure_index(name)
            .ok_or_else(|| Error::query("measure.field", format!("unknown measure `{name}`")))
    };
    let measure = match m.kind.as_str() {
        "count" => Measure::Count,
        "sum" => Measure::Sum(target()?),
        "mean" => Measure::Mean(target()?),
        "median" => Measure::Median(target()?),
        other => return Err(Error::query("measure.kind", format!("unknown measure kind `{other}`"))),
    };
    Ok(QuerySpec {
        grid,
        measure,
        mode: req.accuracy_mode,
        want_error_bounds: req.want_error_bounds,
        align_scales: req.align_scales,
        categories,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResponseMeta {
    pub candidates: usize,
    pub coincident_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_micros: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryResponse {
    pub group_dims: Vec<String>,
    pub shape: Vec<usize>,
    pub edges: Vec<Vec<f64>>,
    /// Effective filter per dimension after alignment.
    pub filter: BTreeMap<String, [f64; 2]>,
    pub values: Vec<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<Option<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<Vec<Option<f64>>>,
    pub meta: ResponseMeta,
}

impl QueryResponse {
    pub fn from_result(schema: &Schema, r: QueryResult, timing: bool) -> Self {
        QueryResponse {
            group_dims: r
                .grid
                .groups
                .iter()
                .map(|g| schema.dimensions[g.dim].name.clone())
                .collect(),
            shape: r.shape,
            edges: r.grid.groups.iter().map(|g| g.edges.clone()).collect(),
            filter: schema
                .dimensions
                .iter()
                .zip(&r.grid.filter.intervals)
                .map(|(d, iv)| (d.name.clone(), [iv.lo, iv.hi]))
                .collect(),
            values: r.values,
            lower: r.lower,
            upper: r.upper,
            error: r.error,
            meta: ResponseMeta {
                candidates: r.meta.candidates,
                coincident_fraction: r.meta.coincident_fraction,
                elapsed_micros: timing.then_some(r.meta.elapsed_micros),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionInfo {
    pub name: String,
    pub kind: String,
    pub domain: [f64; 2],
    pub scale_count: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaResponse {
    pub dimensions: Vec<DimensionInfo>,
    pub measures: Vec<String>,
    pub descriptor: DescriptorConfig,
    pub tree_height: u32,
}

impl SchemaResponse {
    pub fn new(index: &Index) -> Self {
        let s = index.schema();
        SchemaResponse {
            dimensions: s
                .dimensions
                .iter()
                .map(|d| DimensionInfo {
                    name: d.name.clone(),
                    kind: match d.kind {
                        DimKind::Numeric => "numeric".into(),
                        DimKind::Categorical => "categorical".into(),
                    },
                    domain: [d.domain_min, d.domain_max],
                    scale_count: d.scale_count,
                    categories: d.category_labels.clone(),
                })
                .collect(),
            measures: s.measures.clone(),
            descriptor: index.descriptor().clone(),
            tree_height: index.height(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsResponse {
    pub rows: u64,
    pub tree_height: u32,
    pub subspaces: u64,
    pub bins: u32,
    pub storage_bytes: u64,
    pub build_seconds: f64,
    pub sample_size: u64,
    pub cells: u64,
}

impl StatsResponse {
    pub fn new(index: &Index) -> Self {
        let s = index.stats();
        StatsResponse {
            rows: s.rows,
            tree_height: s.tree_height,
            subspaces: s.subspaces,
            bins: s.bins,
            storage_bytes: s.storage_bytes,
            build_seconds: s.build_millis as f64 / 1000.0,
            sample_size: s.sample_size,
            cells: s.cells,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub message: String,
}
