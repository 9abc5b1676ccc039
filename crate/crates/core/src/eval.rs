//! Retrieval-based localization metric: nearest-neighbour search, the
//! distance-ratio test, precision-recall sweep and its area.
//!
//! CSV outputs are UTF-8 with LF line endings:
//!
//! ```text
//! pr.csv:       threshold,precision,recall          then one row per threshold
//!               # auc=<value>                        final line
//! queries.csv:  frame,best,d1,d2,correct            correct is 1 or 0
//! ```
//!
//! Thresholds are printed with 6 decimals, every other real with 9.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::config::RatioDirection;
use crate::error::{Error, Result};
use crate::model::Embedding;
use crate::tensor::Real;

/// Nearest and second-nearest database entries for one query.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub index: usize,
    pub d1: f64,
    pub d2: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query_frame: u32,
    pub best_frame: u32,
    pub d1: f64,
    pub d2: f64,
}

impl RetrievalResult {
    /// `d1 / d2`; a query whose two best distances are both zero is
    /// maximally ambiguous and gets ratio 1.
    pub fn ratio(&self) -> f64 {
        if self.d2 > 0.0 {
            self.d1 / self.d2
        } else {
            1.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub accepted: usize,
    pub true_positives: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

fn distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Exhaustive Euclidean scan. Ties go to the lower database index.
pub fn retrieve<T: Real, V: AsRef<[T]>>(query: &[T], db: &[V]) -> Result<Match> {
    if db.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "retrieval needs at least 2 database entries, got {}",
            db.len()
        )));
    }
    let mut best = Match {
        index: 0,
        d1: f64::INFINITY,
        d2: f64::INFINITY,
    };
    for (j, entry) in db.iter().enumerate() {
        let entry = entry.as_ref();
        if entry.len() != query.len() {
            return Err(Error::ShapeMismatch {
                op: "retrieve",
                left: vec![query.len()],
                right: vec![entry.len()],
            });
        }
        let d = distance(query, entry);
        if d < best.d1 {
            best.d2 = best.d1;
            best.d1 = d;
            best.index = j;
        } else if d < best.d2 {
            best.d2 = d;
        }
    }
    Ok(best)
}

/// `|query_frame − best_frame| <= tolerance`.
pub fn is_true_positive(query_frame: u32, best_frame: u32, tolerance: u32) -> bool {
    query_frame.abs_diff(best_frame) <= tolerance
}

/// `n` evenly spaced thresholds `1/n, 2/n, …, 1`.
pub fn even_thresholds(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / n as f64).collect()
}

fn accepts(direction: RatioDirection, ratio: f64, threshold: f64) -> bool {
    match direction {
        RatioDirection::AtMost => ratio <= threshold,
        RatioDirection::AtLeast => ratio >= threshold,
    }
}

/// Area under `(precision, recall)` points: trapezoids over recall-sorted
/// points, starting from recall 0 at the first point's precision.
pub fn auc_from_points(points: &[(f64, f64)]) -> f64 {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let Some(&(p0, r0)) = sorted.first() else { return 0.0 };
    let mut area = p0 * r0;
    for w in sorted.windows(2) {
        let ((pa, ra), (pb, rb)) = (w[0], w[1]);
        area += 0.5 * (pa + pb) * (rb - ra);
    }
    area
}

/// Precision-recall curve over ratio-test thresholds. Thresholds must be
/// non-decreasing and lie in `(0, 1]`.
pub fn pr_curve(
    results: &[RetrievalResult],
    tolerance: u32,
    thresholds: &[f64],
    direction: RatioDirection,
) -> Result<PrCurve> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("no retrieval results".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("no thresholds".into()));
    }
    if thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) || thresholds.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidArgument(
            "thresholds must be non-decreasing values in (0, 1]".into(),
        ));
    }
    let scored: Vec<(f64, bool)> = results
        .iter()
        .map(|r| (r.ratio(), is_true_positive(r.query_frame, r.best_frame, tolerance)))
        .collect();
    let total = results.len() as f64;
    let points: Vec<PrPoint> = thresholds
        .iter()
        .map(|&threshold| {
            let (mut accepted, mut tp) = (0, 0);
            for &(ratio, correct) in &scored {
                if accepts(direction, ratio, threshold) {
                    accepted += 1;
                    tp += usize::from(correct);
                }
            }
            PrPoint {
                threshold,
                precision: if accepted == 0 { 1.0 } else { tp as f64 / accepted as f64 },
                recall: tp as f64 / total,
                accepted,
                true_positives: tp,
            }
        })
        .collect();
    let auc = auc_from_points(&points.iter().map(|p| (p.precision, p.recall)).collect::<Vec<_>>());
    Ok(PrCurve { points, auc })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub results: Vec<RetrievalResult>,
    pub curve: PrCurve,
}

/// Retrieves every query against the database and sweeps `n_thresholds`
/// evenly spaced thresholds.
pub fn evaluate_vectors<T: Real, V: AsRef<[T]> + Sync>(
    db_frames: &[u32],
    db: &[V],
    query_frames: &[u32],
    queries: &[V],
    tolerance: u32,
    n_thresholds: usize,
    direction: RatioDirection,
) -> Result<Evaluation> {
    if db.is_empty() || queries.is_empty() {
        return Err(Error::InvalidArgument("database and query sets must be non-empty".into()));
    }
    if db_frames.len() != db.len() || query_frames.len() != queries.len() {
        return Err(Error::InvalidArgument("frame ids do not match the vector count".into()));
    }
    let results = queries
        .par_iter()
        .zip(query_frames.par_iter())
        .map(|(q, &frame)| {
            let m = retrieve(q.as_ref(), db)?;
            Ok(RetrievalResult {
                query_frame: frame,
                best_frame: db_frames[m.index],
                d1: m.d1,
                d2: m.d2,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let curve = pr_curve(&results, tolerance, &even_thresholds(n_thresholds), direction)?;
    Ok(Evaluation { results, curve })
}

pub fn evaluate(
    db: &[Embedding],
    queries: &[Embedding],
    tolerance: u32,
    n_thresholds: usize,
    direction: RatioDirection,
) -> Result<Evaluation> {
    let db_frames: Vec<u32> = db.iter().map(|e| e.source_id).collect();
    let q_frames: Vec<u32> = queries.iter().map(|e| e.source_id).collect();
    let db_vals: Vec<&[f32]> = db.iter().map(|e| e.values.as_slice()).collect();
    let q_vals: Vec<&[f32]> = queries.iter().map(|e| e.values.as_slice()).collect();
    evaluate_vectors(&db_frames, &db_vals, &q_frames, &q_vals, tolerance, n_thresholds, direction)
}

pub fn pr_csv(curve: &PrCurve) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in &curve.points {
        let _ = writeln!(s, "{:.6},{:.9},{:.9}", p.threshold, p.precision, p.recall);
    }
    let _ = writeln!(s, "# auc={:.9}", curve.auc);
    s
}

pub fn queries_csv(results: &[RetrievalResult], tolerance: u32) -> String {
    let mut s = String::from("frame,best,d1,d2,correct\n");
    for r in results {
        let _ = writeln!(
            s,
            "{},{},{:.9},{:.9},{}",
            r.query_frame,
            r.best_frame,
            r.d1,
            r.d2,
            u8::from(is_true_positive(r.query_frame, r.best_frame, tolerance))
        );
    }
    s
}
