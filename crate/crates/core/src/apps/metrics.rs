use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Average precision of a descending-score ranking, ties kept in input order.
/// `None` when there are no positives.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Result<Option<f64>> {
    if scores.len() != truth.len() {
        return Err(Error::shape("scores and truth flags differ in length"));
    }
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (k, &idx) in order.iter().enumerate() {
        if truth[idx] {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(Some(ap / positives as f64))
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = r;
        }
        start = end;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    /// Two-sided p-value from the t approximation with `n − 2` degrees of freedom.
    pub p_value: f64,
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (saa > 0.0 && sbb > 0.0).then(|| (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation; `None` when either vector is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<Spearman>> {
    if a.len() != b.len() {
        return Err(Error::shape("rank correlation inputs differ in length"));
    }
    if a.len() < 3 {
        return Err(Error::domain("rank correlation needs at least 3 points"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::domain("rank correlation inputs must be finite"));
    }
    let Some(rho) = pearson(&average_ranks(a), &average_ranks(b)) else {
        return Ok(None);
    };
    let df = (a.len() - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::numerical(e.to_string()))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Some(Spearman { rho, p_value }))
}
