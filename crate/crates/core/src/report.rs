//! Learning-curve tables and 2D selection snapshots.

use std::collections::{HashMap, HashSet};

use ndarray::{Array1, Array2, Axis};
use thiserror::Error;

use crate::eval::Metrics;
use crate::experiment::RoundRecord;
use crate::strategies::EmbeddingMatrix;

const POWER_MAX_ITER: usize = 1000;
const POWER_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("projection needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("snapshot requested but no embeddings were computed")]
    MissingEmbeddings,
    #[error("csv: {0}")]
    Csv(String),
}

/// 2D coordinates per input row.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coords: Vec<(f64, f64)>,
    /// Every row was identical; coordinates are all zero.
    pub degenerate: bool,
    /// Principal axes used, as unit vectors.
    pub axes: Vec<Array1<f64>>,
}

fn orthogonalize(v: &mut Array1<f64>, basis: &[Array1<f64>]) {
    for b in basis {
        let proj = v.dot(b);
        v.scaled_add(-proj, b);
    }
}

fn normalize(v: &mut Array1<f64>) -> f64 {
    let norm = v.dot(v).sqrt();
    if norm > 0.0 {
        *v /= norm;
    }
    norm
}

/// Leading eigenvector of symmetric PSD `cov`, orthogonal to `found`.
fn power_iteration(cov: &Array2<f64>, found: &[Array1<f64>]) -> Array1<f64> {
    let d = cov.nrows();
    let mut v = Array1::from_elem(d, 1.0);
    orthogonalize(&mut v, found);
    if normalize(&mut v) < 1e-12 {
        // Fall back to the first basis vector with a usable residual.
        for i in 0..d {
            let mut e = Array1::zeros(d);
            e[i] = 1.0;
            orthogonalize(&mut e, found);
            if normalize(&mut e) > 1e-6 {
                v = e;
                break;
            }
        }
    }
    for _ in 0..POWER_MAX_ITER {
        let mut w = cov.dot(&v);
        orthogonalize(&mut w, found);
        if normalize(&mut w) == 0.0 {
            break;
        }
        let delta = (&w - &v).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        v = w;
        if delta < POWER_TOL {
            break;
        }
    }
    orthogonalize(&mut v, found);
    normalize(&mut v);
    // Largest-magnitude loading positive; earliest index on ties.
    let mut pivot = 0;
    for i in 1..d {
        if v[i].abs() > v[pivot].abs() {
            pivot = i;
        }
    }
    if v[pivot] < 0.0 {
        v.mapv_inplace(|x| -x);
    }
    v
}

/// Projects rows onto the top two principal axes of their covariance.
pub fn project_2d(rows: &Array2<f64>) -> Result<Projection, ReportError> {
    let n = rows.nrows();
    if n < 2 {
        return Err(ReportError::TooFewRows(n));
    }
    let first = rows.row(0);
    if rows.rows().into_iter().all(|r| r == first) {
        return Ok(Projection {
            coords: vec![(0.0, 0.0); n],
            degenerate: true,
            axes: Vec::new(),
        });
    }
    let mean = rows.mean_axis(Axis(0)).unwrap();
    let centered = rows - &mean;
    let cov = centered.t().dot(&centered) / (n - 1) as f64;
    let mut axes = Vec::with_capacity(2);
    for _ in 0..rows.ncols().min(2) {
        let axis = power_iteration(&cov, &axes);
        axes.push(axis);
    }
    let xs = centered.dot(&axes[0]);
    let ys = match axes.get(1) {
        Some(a) => centered.dot(a),
        None => Array1::zeros(n),
    };
    Ok(Projection {
        coords: xs.iter().copied().zip(ys.iter().copied()).collect(),
        degenerate: false,
        axes,
    })
}

pub const CURVE_HEADER: [&str; 9] = [
    "round",
    "n_labeled",
    "precision",
    "recall",
    "f1",
    "token_accuracy",
    "val_f1",
    "strategy",
    "fraction_labeled",
];

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Learning curve CSV: one row per round, plus a `passive` row when a
/// baseline is given.
pub fn emit_curves(
    records: &[RoundRecord],
    strategy: &str,
    train_size: usize,
    passive: Option<(&Metrics, f64)>,
) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CURVE_HEADER).unwrap();
    let fraction = |n: usize| num(if train_size == 0 { 0.0 } else { n as f64 / train_size as f64 });
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.n_labeled.to_string(),
            num(r.test.precision),
            num(r.test.recall),
            num(r.test.f1),
            num(r.test.token_accuracy),
            num(r.val_f1),
            strategy.to_string(),
            fraction(r.n_labeled),
        ])
        .unwrap();
    }
    if let Some((m, val_f1)) = passive {
        w.write_record([
            "passive".to_string(),
            train_size.to_string(),
            num(m.precision),
            num(m.recall),
            num(m.f1),
            num(m.token_accuracy),
            num(val_f1),
            "passive".to_string(),
            fraction(train_size),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SnapshotStatus {
    Labeled,
    SelectedThisRound,
    Pool,
}

impl SnapshotStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SnapshotStatus::Labeled => "labeled",
            SnapshotStatus::SelectedThisRound => "selected",
            SnapshotStatus::Pool => "pool",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotRow {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub status: SnapshotStatus,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSnapshot {
    pub round: usize,
    pub rows: Vec<SnapshotRow>,
}

/// What the loop knows about the train split when a round's batch is chosen.
pub struct RoundState<'a> {
    pub round: usize,
    /// Embeddings of every train sentence under the acquisition snapshot.
    pub embeddings: Option<&'a EmbeddingMatrix>,
    pub labeled_before: &'a HashSet<usize>,
    pub selected: &'a HashSet<usize>,
    pub clusters: &'a HashMap<usize, usize>,
}

pub fn selection_snapshot(state: &RoundState) -> Result<ProjectionSnapshot, ReportError> {
    let emb = state.embeddings.ok_or(ReportError::MissingEmbeddings)?;
    let proj = project_2d(&emb.rows)?;
    let rows = emb
        .ids
        .iter()
        .zip(&proj.coords)
        .map(|(&id, &(x, y))| SnapshotRow {
            id,
            x,
            y,
            status: if state.selected.contains(&id) {
                SnapshotStatus::SelectedThisRound
            } else if state.labeled_before.contains(&id) {
                SnapshotStatus::Labeled
            } else {
                SnapshotStatus::Pool
            },
            cluster: state.clusters.get(&id).copied(),
        })
        .collect();
    Ok(ProjectionSnapshot {
        round: state.round,
        rows,
    })
}

impl ProjectionSnapshot {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["round", "id", "x", "y", "status", "cluster"]).unwrap();
        for r in &self.rows {
            w.write_record([
                self.round.to_string(),
                r.id.to_string(),
                num(r.x),
                num(r.y),
                r.status.as_str().to_string(),
                r.cluster.map(|c| c.to_string()).unwrap_or_default(),
            ])
            .unwrap();
        }
        String::from_utf8(w.into_inner().unwrap()).unwrap()
    }
}

/// Emits the selection snapshot for a round as CSV.
pub fn emit_selection_snapshot(state: &RoundState) -> Result<String, ReportError> {
    Ok(selection_snapshot(state)?.to_csv())
}

/// Numeric fields of a curves CSV, keyed by the `round` column.
pub fn parse_curves(text: &str) -> Result<Vec<(String, Vec<f64>)>, ReportError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| ReportError::Csv(e.to_string()))?;
        let mut values = Vec::new();
        for (i, field) in rec.iter().enumerate() {
            if i == 0 || CURVE_HEADER[i] == "strategy" {
                continue;
            }
            values.push(field.parse::<f64>().map_err(|e| ReportError::Csv(e.to_string()))?);
        }
        out.push((rec[0].to_string(), values));
    }
    Ok(out)
}
