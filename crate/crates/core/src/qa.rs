//! Annotation quality checks: box overlap and inter-rater agreement.

use serde::{Deserialize, Serialize};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QaError {
    #[error("degenerate box ({x1}, {y1}, {x2}, {y2}): need x1 < x2 and y1 < y2")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("rating matrix: {0}")]
    Ratings(String),
    #[error("chance agreement is 1 (every rating falls in one category); kappa is undefined")]
    DegenerateAgreement,
}

/// Half-open axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, QaError> {
        let b = Box { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), QaError> {
        // Also rejects NaN coordinates.
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(QaError::DegenerateBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            });
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

pub fn iou(a: &Box, b: &Box) -> Result<f64, QaError> {
    a.validate()?;
    b.validate()?;
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        return Ok(0.0);
    }
    let inter = w * h;
    Ok(inter / (a.area() + b.area() - inter))
}

/// Indices of pairs with IoU at or above `threshold`, in input order.
pub fn filter_by_iou(pairs: &[(Box, Box)], threshold: f64) -> Result<Vec<usize>, QaError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(QaError::Threshold(threshold));
    }
    let mut kept = Vec::new();
    for (i, (a, b)) in pairs.iter().enumerate() {
        if iou(a, b)? >= threshold {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// `N × q` matrix of rater counts; every row sums to the same `n ≥ 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u64>>", into = "Vec<Vec<u64>>")]
pub struct RatingMatrix {
    rows: Vec<Vec<u64>>,
    raters: u64,
}

impl RatingMatrix {
    pub fn new(rows: Vec<Vec<u64>>) -> Result<Self, QaError> {
        let bad = |m: String| Err(QaError::Ratings(m));
        let Some(first) = rows.first() else {
            return bad("no items".into());
        };
        let q = first.len();
        if q < 2 {
            return bad(format!("need at least 2 categories, got {q}"));
        }
        let raters: u64 = first.iter().sum();
        if raters < 2 {
            return bad(format!("need at least 2 raters per item, got {raters}"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != q {
                return bad(format!("item {i} has {} categories, expected {q}", r.len()));
            }
            let n: u64 = r.iter().sum();
            if n != raters {
                return bad(format!("item {i} has {n} ratings, expected {raters}"));
            }
        }
        Ok(RatingMatrix { rows, raters })
    }

    pub fn items(&self) -> usize {
        self.rows.len()
    }

    pub fn categories(&self) -> usize {
        self.rows[0].len()
    }

    pub fn raters(&self) -> u64 {
        self.raters
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.rows
    }
}

impl TryFrom<Vec<Vec<u64>>> for RatingMatrix {
    type Error = QaError;

    fn try_from(rows: Vec<Vec<u64>>) -> Result<Self, QaError> {
        RatingMatrix::new(rows)
    }
}

impl From<RatingMatrix> for Vec<Vec<u64>> {
    fn from(m: RatingMatrix) -> Self {
        m.rows
    }
}

/// Fleiss' kappa `(P̄ − P̄e) / (1 − P̄e)`.
pub fn fleiss_kappa(m: &RatingMatrix) -> Result<f64, QaError> {
    let n = m.raters as f64;
    let items = m.items() as f64;
    let mut p_bar = 0.0;
    let mut totals = vec![0u64; m.categories()];
    for row in &m.rows {
        let agree: f64 = row.iter().map(|&c| (c * c.saturating_sub(1)) as f64).sum();
        p_bar += agree / (n * (n - 1.0));
        for (t, &c) in totals.iter_mut().zip(row) {
            *t += c;
        }
    }
    p_bar /= items;
    let all = items * n;
    let p_e: f64 = totals.iter().map(|&t| (t as f64 / all).powi(2)).sum();
    if p_e >= 1.0 {
        return Err(QaError::DegenerateAgreement);
    }
    Ok((p_bar - p_e) / (1.0 - p_e))
}
