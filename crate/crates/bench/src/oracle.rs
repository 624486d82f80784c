//! Exact answers by linear scan.
//!
//! Cells are located with [`ComputationalGrid::locate`], the same membership
//! rule the engine's bins use, so a difference against the engine is
//! approximation error and never a bin-rule mismatch.

use ihcube_core::descriptor::Measure;
use ihcube_core::index::PointSource;
use ihcube_core::model::{DataPoint, Schema};
use ihcube_core::query::{CategoryFilter, ComputationalGrid, QueryResult, QuerySpec};
use ihcube_core::Result;

/// Exact values over `grid` for `measure`. Empty cells are `Some(0)` for
/// count and sum and `None` for mean and median.
pub fn oracle_points<'a>(
    schema: &Schema,
    points: impl IntoIterator<Item = &'a DataPoint>,
    grid: &ComputationalGrid,
    categories: &[CategoryFilter],
    measure: Measure,
) -> Vec<Option<f64>> {
    let n = grid.cell_count();
    let target = measure.target();
    let mut count = vec![0u64; n];
    let mut sum = vec![0.0; n];
    let mut samples: Vec<Vec<f64>> = match measure {
        Measure::Median(_) => vec![Vec::new(); n],
        _ => Vec::new(),
    };
    for p in points {
        if !categories
            .iter()
            .all(|cf| cf.codes.iter().any(|&c| c as f64 == p.coords[cf.dim]))
        {
            continue;
        }
        let Some(cell) = grid.locate(schema, &p.coords) else {
            continue;
        };
        count[cell] += 1;
        if let Some(m) = target {
            let v = p.measures[m];
            sum[cell] += v;
            if !samples.is_empty() {
                samples[cell].push(v);
            }
        }
    }
    (0..n)
        .map(|i| match measure {
            Measure::Count => Some(count[i] as f64),
            Measure::Sum(_) => Some(sum[i]),
            Measure::Mean(_) => (count[i] > 0).then(|| sum[i] / count[i] as f64),
            Measure::Median(_) => median(&mut samples[i]),
        })
        .collect()
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Exact answer for the grid the engine actually evaluated.
pub fn oracle_for<'a>(
    schema: &Schema,
    points: impl IntoIterator<Item = &'a DataPoint>,
    spec: &QuerySpec,
    result: &QueryResult,
) -> Vec<Option<f64>> {
    oracle_points(schema, points, &result.grid, &spec.categories, spec.measure)
}

/// Streaming variant over any point source (a CSV file, a generator).
pub fn oracle(
    schema: &Schema,
    source: &dyn PointSource,
    grid: &ComputationalGrid,
    categories: &[CategoryFilter],
    measure: Measure,
) -> Result<Vec<Option<f64>>> {
    let points = source.scan()?.collect::<Result<Vec<_>>>()?;
    Ok(oracle_points(schema, &points, grid, categories, measure))
}
