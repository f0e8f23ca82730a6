//! Global-descriptor database, top-k retrieval and recall metrics.

use crate::error::{Error, Result};
use ndarray::Array1;

/// Default radius (meters) within which a retrieved entry counts as a
/// correct match for the query's true position.
pub const DEFAULT_POSITIVE_RADIUS: f64 = 25.0;

/// One stored submap: its global descriptor, metric position and a label.
#[derive(Debug, Clone)]
pub struct DbEntry {
    pub descriptor: Array1<f64>,
    /// planar metric position in meters
    pub position: [f64; 2],
    pub id: String,
}

#[derive(Debug, Clone, Default)]
pub struct DescriptorDatabase {
    entries: Vec<DbEntry>,
}

/// Ranked retrieval output: database indices with ascending L2 distances.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub ranked: Vec<(usize, f64)>,
}

impl DescriptorDatabase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: DbEntry) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.descriptor.len() != entry.descriptor.len() {
                return Err(Error::shape(format!(
                    "descriptor width {} differs from database width {}",
                    entry.descriptor.len(),
                    first.descriptor.len()
                )));
            }
        }
        if entry.descriptor.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite descriptor for entry {}",
                entry.id
            )));
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[DbEntry] {
        &self.entries
    }
}

/// k nearest database entries by L2 distance, ascending; ties keep
/// insertion order.
pub fn query_topk(db: &DescriptorDatabase, q: &Array1<f64>, k: usize) -> Result<RetrievalResult> {
    if db.is_empty() {
        return Err(Error::invalid("query against an empty database"));
    }
    if k == 0 || k > db.len() {
        return Err(Error::invalid(format!(
            "k = {k} out of range for a database of {}",
            db.len()
        )));
    }
    let mut ranked: Vec<(usize, f64)> = db
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.descriptor.len() != q.len() {
                return Err(Error::shape(format!(
                    "query width {} vs database width {}",
                    q.len(),
                    e.descriptor.len()
                )));
            }
            let d: f64 = e
                .descriptor
                .iter()
                .zip(q.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            Ok((i, d))
        })
        .collect::<Result<_>>()?;
    // stable sort keeps insertion order on ties
    ranked.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite distances"));
    ranked.truncate(k);
    Ok(RetrievalResult { ranked })
}

/// A query with its descriptor and true position.
#[derive(Debug, Clone)]
pub struct Query {
    pub descriptor: Array1<f64>,
    pub position: [f64; 2],
}

fn planar_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Percentage of queries whose top-n retrievals contain at least one entry
/// within `positive_radius` of the query's true position.
pub fn recall_at_n(
    queries: &[Query],
    db: &DescriptorDatabase,
    n: usize,
    positive_radius: f64,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::invalid("recall over zero queries"));
    }
    if n == 0 {
        return Err(Error::invalid("recall depth must be at least 1"));
    }
    let depth = n.min(db.len());
    let mut hits = 0usize;
    for q in queries {
        let res = query_topk(db, &q.descriptor, depth)?;
        if res
            .ranked
            .iter()
            .any(|&(i, _)| planar_dist(db.entries[i].position, q.position) < positive_radius)
        {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / queries.len() as f64)
}

/// Recall at every depth 1..=max_n; non-decreasing by construction.
pub fn recall_curve(
    queries: &[Query],
    db: &DescriptorDatabase,
    max_n: usize,
    positive_radius: f64,
) -> Result<Vec<f64>> {
    if max_n == 0 || max_n > db.len() {
        return Err(Error::invalid(format!(
            "curve depth {max_n} out of range for a database of {}",
            db.len()
        )));
    }
    (1..=max_n)
        .map(|n| recall_at_n(queries, db, n, positive_radius))
        .collect()
}
