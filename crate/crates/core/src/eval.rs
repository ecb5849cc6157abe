//! Retrieval evaluation: exhaustive L2 matching, Recall@N, PR curves and F1-max.

use alloc::vec::Vec;

use crate::descriptor::Model;
use crate::error::{Error, Result};
use crate::event::{geo_distance, EventVolume, GeoPose};

/// Cut-offs reported by [`MetricReport`].
pub const RECALL_NS: [usize; 4] = [1, 5, 10, 20];
/// Default geographic threshold sweep, meters.
pub const DEFAULT_PHIS: [f64; 5] = [15.0, 30.0, 45.0, 60.0, 75.0];

/// Ranked database entries for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryMatch {
    /// Database ids by ascending distance, ties by id.
    pub ranking: Vec<usize>,
    /// L2 distances aligned with `ranking`.
    pub distances: Vec<f64>,
    pub pose: Option<GeoPose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub queries: Vec<QueryMatch>,
    pub db_poses: Vec<Option<GeoPose>>,
}

pub fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    crate::math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Brute-force ranking of every database descriptor for every query.
pub fn match_descriptors(
    queries: &[Vec<f64>],
    query_poses: &[Option<GeoPose>],
    db: &[Vec<f64>],
    db_poses: &[Option<GeoPose>],
) -> Result<RetrievalResult> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if queries.len() != query_poses.len() || db.len() != db_poses.len() {
        return Err(Error::Shape("one pose slot per descriptor required".into()));
    }
    let dim = db[0].len();
    if db.iter().chain(queries).any(|d| d.len() != dim) {
        return Err(Error::Shape("descriptors differ in length".into()));
    }
    let queries = queries
        .iter()
        .zip(query_poses)
        .map(|(q, pose)| {
            let mut scored: Vec<(f64, usize)> = db.iter().enumerate().map(|(i, d)| (l2_distance(q, d), i)).collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            QueryMatch { ranking: scored.iter().map(|s| s.1).collect(), distances: scored.iter().map(|s| s.0).collect(), pose: *pose }
        })
        .collect();
    Ok(RetrievalResult { queries, db_poses: db_poses.to_vec() })
}

/// Describe query and database volumes with the model and match them.
/// Each volume has its own time-surface sampling seed.
pub fn match_volumes(
    queries: &[&EventVolume],
    query_seeds: &[u64],
    db: &[&EventVolume],
    db_seeds: &[u64],
    model: &Model,
) -> Result<RetrievalResult> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let qd: Vec<Vec<f64>> = model.describe_volumes(queries, query_seeds)?.into_iter().map(|d| d.descriptor).collect();
    let dd: Vec<Vec<f64>> = model.describe_volumes(db, db_seeds)?.into_iter().map(|d| d.descriptor).collect();
    let qp: Vec<_> = queries.iter().map(|v| v.pose).collect();
    let dp: Vec<_> = db.iter().map(|v| v.pose).collect();
    match_descriptors(&qd, &qp, &dd, &dp)
}

fn within(a: &GeoPose, b: Option<&GeoPose>, phi: f64) -> bool {
    match b {
        Some(b) => geo_distance(a, b).map(|d| d <= phi).unwrap_or(false),
        None => false,
    }
}

impl RetrievalResult {
    /// Queries that have a pose and so can be scored.
    pub fn scored(&self) -> impl Iterator<Item = (&QueryMatch, &GeoPose)> {
        self.queries.iter().filter_map(|q| q.pose.as_ref().map(|p| (q, p)))
    }

    pub fn skipped(&self) -> usize {
        self.queries.iter().filter(|q| q.pose.is_none()).count()
    }

    fn correct_at(&self, q: &QueryMatch, pose: &GeoPose, rank: usize, phi: f64) -> bool {
        within(pose, self.db_poses[q.ranking[rank]].as_ref(), phi)
    }
}

/// Fraction of scorable queries with a database entry within `phi` meters among the top `n`.
pub fn recall_at_n(result: &RetrievalResult, n: usize, phi: f64) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for (q, pose) in result.scored() {
        total += 1;
        if (0..n.min(q.ranking.len())).any(|r| result.correct_at(q, pose, r, phi)) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Sweep the acceptance threshold over the distinct rank-1 distances.
/// A query is accepted when its rank-1 distance is at most `tau`.
pub fn pr_curve(result: &RetrievalResult, phi: f64) -> Vec<PrPoint> {
    let mut firsts: Vec<(f64, bool)> =
        result.scored().filter(|(q, _)| !q.ranking.is_empty()).map(|(q, p)| (q.distances[0], result.correct_at(q, p, 0, phi))).collect();
    let total = result.scored().count();
    firsts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut points = Vec::new();
    let (mut accepted, mut correct) = (0usize, 0usize);
    let mut i = 0;
    while i < firsts.len() {
        let tau = firsts[i].0;
        while i < firsts.len() && firsts[i].0 == tau {
            accepted += 1;
            correct += firsts[i].1 as usize;
            i += 1;
        }
        points.push(PrPoint { tau, precision: correct as f64 / accepted as f64, recall: correct as f64 / total as f64 });
    }
    points
}

pub fn f1(p: &PrPoint) -> f64 {
    if p.precision + p.recall == 0.0 {
        0.0
    } else {
        2.0 * p.precision * p.recall / (p.precision + p.recall)
    }
}

pub fn f1_max(points: &[PrPoint]) -> f64 {
    points.iter().map(f1).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub phi: f64,
    /// `(N, recall)` for each of [`RECALL_NS`].
    pub recall: Vec<(usize, f64)>,
    pub pr: Vec<PrPoint>,
    pub f1_max: f64,
    pub queries: usize,
    pub skipped: usize,
}

impl MetricReport {
    pub fn recall_at(&self, n: usize) -> Option<f64> {
        self.recall.iter().find(|r| r.0 == n).map(|r| r.1)
    }
}

pub fn metric_report(result: &RetrievalResult, phi: f64) -> MetricReport {
    let pr = pr_curve(result, phi);
    MetricReport {
        phi,
        recall: RECALL_NS.iter().map(|&n| (n, recall_at_n(result, n, phi))).collect(),
        f1_max: f1_max(&pr),
        pr,
        queries: result.queries.len(),
        skipped: result.skipped(),
    }
}

/// One report per threshold, all from the same ranking.
pub fn sweep_thresholds(result: &RetrievalResult, phis: &[f64]) -> Result<Vec<MetricReport>> {
    if phis.iter().any(|p| !(*p > 0.0)) || phis.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("thresholds must be positive and ascending".into()));
    }
    Ok(phis.iter().map(|&phi| metric_report(result, phi)).collect())
}
