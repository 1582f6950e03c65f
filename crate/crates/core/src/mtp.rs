//! Benjamini–Hochberg step-up and Storey's null-proportion-adaptive variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Outcome of a step-up procedure, aligned with the input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionResult {
    pub rejected: Vec<bool>,
    /// Realized p-value cutoff `P_(k*)`, zero when nothing is rejected.
    pub threshold: f64,
    pub k_star: usize,
}

impl RejectionResult {
    pub fn count(&self) -> usize {
        self.rejected.iter().filter(|&&r| r).count()
    }
}

fn check_pvalues(pvalues: &[f64]) -> Result<()> {
    match pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        Some(p) => Err(Error::domain(format!("p-values must lie in [0,1], got {p}"))),
        None => Ok(()),
    }
}

fn check_level(alpha: f64, what: &str) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::domain(format!("{what} must lie in (0,1), got {alpha}")));
    }
    Ok(())
}

/// Indices ordered by p-value, ties by position.
fn order(pvalues: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pvalues.len()).collect();
    idx.sort_by(|&a, &b| pvalues[a].total_cmp(&pvalues[b]));
    idx
}

/// Rejects every `p_i ≤ P_(k*)` with `k* = max{ℓ : P_(ℓ) ≤ αℓ/n}`.
pub fn bh_reject(pvalues: &[f64], alpha: f64) -> Result<RejectionResult> {
    check_pvalues(pvalues)?;
    check_level(alpha, "alpha")?;
    let n = pvalues.len();
    let idx = order(pvalues);
    let k_star = (1..=n)
        .rev()
        .find(|&l| pvalues[idx[l - 1]] <= alpha * l as f64 / n as f64)
        .unwrap_or(0);
    let threshold = if k_star == 0 { 0.0 } else { pvalues[idx[k_star - 1]] };
    let rejected = pvalues.iter().map(|&p| k_star > 0 && p <= threshold).collect();
    Ok(RejectionResult {
        rejected,
        threshold,
        k_star,
    })
}

/// Step-up adjusted p-values `min(1, min_{j≥i} n p_(j)/j)` in input order.
pub fn bh_adjust(pvalues: &[f64]) -> Result<Vec<f64>> {
    check_pvalues(pvalues)?;
    let n = pvalues.len();
    let idx = order(pvalues);
    let mut adjusted = vec![0.0; n];
    let mut running = 1.0f64;
    for rank in (1..=n).rev() {
        let i = idx[rank - 1];
        // The ratio is at least one, so rounding never lands below `p`.
        running = running.min(n as f64 / rank as f64 * pvalues[i]);
        adjusted[i] = running;
    }
    Ok(adjusted)
}

/// `π̂₀ = (1 + #{p_i > λ}) / (n(1 - λ))`, capped at one.
pub fn storey_pi0(pvalues: &[f64], lambda: f64) -> Result<f64> {
    check_pvalues(pvalues)?;
    check_level(lambda, "lambda")?;
    if pvalues.is_empty() {
        return Err(Error::Input("storey_pi0 needs at least one p-value".into()));
    }
    let above = pvalues.iter().filter(|&&p| p > lambda).count();
    Ok(((1 + above) as f64 / (pvalues.len() as f64 * (1.0 - lambda))).min(1.0))
}

/// BH at level `min(α/π̂₀, 1 - 10⁻¹²)`.
pub fn storey_reject(pvalues: &[f64], alpha: f64, lambda: f64) -> Result<RejectionResult> {
    check_level(alpha, "alpha")?;
    let pi0 = storey_pi0(pvalues, lambda)?;
    bh_reject(pvalues, (alpha / pi0).min(1.0 - 1e-12))
}
