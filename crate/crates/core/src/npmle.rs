//! Nonparametric maximum likelihood estimation of the variance prior.
//!
//! Sample variances follow `S_i² | σ_i² ~ (σ_i²/ν) χ²_ν` with `σ_i² ~ G`.
//! The estimate maximizes `Σ_i log f_G(S_i²)` over distributions supported
//! on a log-spaced grid between a low empirical quantile and the maximum
//! of the observed variances. Two solvers are provided: a constrained
//! Newton method (the default) and the multiplicative EM fixed point with
//! SQUAREM extrapolation. Either way the first-order optimality condition
//! `max_j (1/n) Σ_i p(S_i² | σ_j²) / f_G(S_i²) ≤ 1` is reported as a KKT gap.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{DegreesOfFreedom, ScaledChisq};
use crate::error::{Error, Result};
use crate::quad;
use crate::summarize::SummaryDataset;

/// A finitely supported distribution on variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscretePrior {
    support: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscretePrior {
    /// Builds a prior from atoms and weights that already sum to one (to
    /// within `1e-9`); weights are renormalized exactly.
    pub fn new(support: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != weights.len() {
            return Err(Error::domain(format!(
                "prior needs matching nonempty support and weights ({} vs {})",
                support.len(),
                weights.len()
            )));
        }
        if support.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::domain("prior support must be positive and finite"));
        }
        if support.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::domain("prior support must be strictly increasing"));
        }
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::domain("prior weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("prior weights sum to {total}, not 1")));
        }
        let weights = weights.into_iter().map(|w| w / total).collect();
        Ok(Self { support, weights })
    }

    /// Builds a prior from arbitrary `(atom, mass)` pairs: atoms are sorted,
    /// coincident atoms merged, zero masses dropped and the rest normalized.
    pub fn from_atoms(atoms: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut atoms: Vec<(f64, f64)> = atoms.into_iter().collect();
        if atoms.iter().any(|&(s, w)| !(s > 0.0 && s.is_finite()) || !(w >= 0.0 && w.is_finite())) {
            return Err(Error::domain("atoms must be positive with nonnegative mass"));
        }
        atoms.retain(|&(_, w)| w > 0.0);
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut support: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut weights: Vec<f64> = Vec::with_capacity(atoms.len());
        for (s, w) in atoms {
            match support.last() {
                Some(&last) if last == s => *weights.last_mut().unwrap() += w,
                _ => {
                    support.push(s);
                    weights.push(w);
                }
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::domain("prior has no positive mass"));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { support, weights })
    }

    pub fn point_mass(sigma2: f64) -> Result<Self> {
        Self::from_atoms([(sigma2, 1.0)])
    }

    /// Mass `w` at `v1` and `1 - w` at `v2`.
    pub fn two_point(v1: f64, v2: f64, w: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::domain(format!("mixing weight must lie in [0,1], got {w}")));
        }
        Self::from_atoms([(v1, w), (v2, 1.0 - w)])
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (&s, &w) in self.support.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return s;
            }
        }
        *self.support.last().unwrap()
    }

    /// Posterior probabilities of the atoms given one observed `s²`.
    /// Computed with max-subtraction so extreme `s²` cannot underflow all terms.
    pub fn posterior(&self, s2: f64, chisq: &ScaledChisq) -> Vec<f64> {
        let mut logs: Vec<f64> = self
            .support
            .iter()
            .zip(&self.weights)
            .map(|(&s, &w)| if w > 0.0 { w.ln() + chisq.logpdf(s2, s) } else { f64::NEG_INFINITY })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for l in logs.iter_mut() {
            *l = (*l - max).exp();
            total += *l;
        }
        logs.iter_mut().for_each(|l| *l /= total);
        logs
    }

    /// `ln f_G(s²; ν)` by log-sum-exp over the atoms.
    pub fn log_marginal(&self, s2: f64, chisq: &ScaledChisq) -> f64 {
        log_sum_exp(
            self.support
                .iter()
                .zip(&self.weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(&s, &w)| w.ln() + chisq.logpdf(s2, s)),
        )
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// How the support grid is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub grid_size: usize,
    /// Lower grid end as an empirical quantile of the sample variances.
    pub lower_quantile: f64,
    /// Overrides both ends when set.
    pub explicit_bounds: Option<(f64, f64)>,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            grid_size: 300,
            lower_quantile: 0.01,
            explicit_bounds: None,
        }
    }
}

/// Nearest-rank empirical quantile; `q = 0` gives the minimum.
pub fn nearest_rank_quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Log-equispaced grid between the configured lower quantile and the
/// maximum of `s2_values`; a single point when the two coincide.
pub fn build_grid(s2_values: &[f64], config: &GridConfig) -> Result<Vec<f64>> {
    if s2_values.is_empty() {
        return Err(Error::Input("cannot build a grid from no sample variances".into()));
    }
    if s2_values.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::domain("sample variances must be positive and finite"));
    }
    if !(0.0..1.0).contains(&config.lower_quantile) {
        return Err(Error::domain(format!(
            "lower quantile must lie in [0,1), got {}",
            config.lower_quantile
        )));
    }
    let (lo, hi) = match config.explicit_bounds {
        Some((lo, hi)) => {
            if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
                return Err(Error::domain(format!("invalid grid bounds ({lo}, {hi})")));
            }
            (lo, hi)
        }
        None => (
            nearest_rank_quantile(s2_values, config.lower_quantile),
            s2_values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ),
    };
    if lo == hi {
        return Ok(vec![lo]);
    }
    if config.grid_size < 2 {
        return Err(Error::domain("grid size must be at least 2 when the bounds differ"));
    }
    let m = config.grid_size;
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());
    let step = (ln_hi - ln_lo) / (m - 1) as f64;
    let mut grid: Vec<f64> = (0..m).map(|j| (ln_lo + step * j as f64).exp()).collect();
    grid[0] = lo;
    grid[m - 1] = hi;
    Ok(grid)
}

/// Optimization algorithm for the grid-restricted NPMLE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Support-adding constrained Newton steps: each iteration adds the
    /// grid points where the gradient peaks above one, solves a
    /// nonnegative least-squares model of the log-likelihood on the
    /// current support and line-searches toward its solution.
    ConstrainedNewton,
    /// Multiplicative EM fixed point, optionally SQUAREM-accelerated.
    Em,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub algorithm: Algorithm,
    /// Relative log-likelihood change below which a certified iterate stops.
    pub tol: f64,
    pub max_iter: usize,
    /// SQUAREM extrapolation for [`Algorithm::Em`].
    pub acceleration: bool,
    /// KKT gap at which the iteration stops.
    pub kkt_tol: f64,
    /// Above this many bytes the likelihood matrix is recomputed per pass.
    pub memory_budget: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::ConstrainedNewton,
            tol: 1e-9,
            max_iter: 50_000,
            acceleration: true,
            kkt_tol: 1e-7,
            memory_budget: 1 << 30,
        }
    }
}

/// KKT gap every accepted fit must meet.
pub const KKT_CERTIFICATE: f64 = 1e-6;

/// Gap below which a stalled iteration may stop; the margin under the
/// certificate absorbs the change from pruning tiny weights.
const STALL_GAP: f64 = 0.5 * KKT_CERTIFICATE;

/// Weights below this are dropped from the reported prior.
pub const PRUNE_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct NpmleFit {
    pub prior: DiscretePrior,
    pub log_likelihood: f64,
    pub kkt_gap: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grid: Vec<f64>,
    /// Log-likelihood of every accepted iterate.
    pub trace: Vec<f64>,
}

/// Serialized form of a fit (the trace is omitted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpmleFitRecord {
    pub grid_lower: f64,
    pub grid_upper: f64,
    pub grid_size: usize,
    pub support: Vec<f64>,
    pub weights: Vec<f64>,
    pub log_likelihood: f64,
    pub kkt_gap: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl NpmleFit {
    pub fn record(&self) -> NpmleFitRecord {
        NpmleFitRecord {
            grid_lower: self.grid[0],
            grid_upper: *self.grid.last().unwrap(),
            grid_size: self.grid.len(),
            support: self.prior.support().to_vec(),
            weights: self.prior.weights().to_vec(),
            log_likelihood: self.log_likelihood,
            kkt_gap: self.kkt_gap,
            iterations: self.iterations,
            converged: self.converged,
        }
    }
}


const ROW_BLOCK: usize = 512;

/// Scaled mixture values below this are treated as underflowed.
const UNDERFLOW: f64 = 1e-250;

fn underflows(f: &[f64]) -> bool {
    f.iter().any(|&v| v <= UNDERFLOW)
}

/// Likelihoods `p(S_i² | σ_j²)` scaled by their row maximum. Mixture
/// values built from these rows are `f_i · exp(-row_max_i)`, so ratios
/// `p_ij / f_i` need no rescaling.
struct Likelihood<'a> {
    s2: &'a [f64],
    grid: &'a [f64],
    chisq: ScaledChisq,
    ln_grid: Vec<f64>,
    /// Row-major `n × m` block of `exp(ln p_ij - max_j ln p_ij)` when cached.
    dense: Option<Vec<f64>>,
    row_max: Vec<f64>,
}

impl<'a> Likelihood<'a> {
    fn new(s2: &'a [f64], grid: &'a [f64], nu: f64, memory_budget: usize) -> Self {
        let chisq = ScaledChisq::new(nu);
        let ln_grid: Vec<f64> = grid.iter().map(|g| g.ln()).collect();
        let m = grid.len();
        let row_max: Vec<f64> = s2
            .par_iter()
            .map(|&s| row_log_max(&chisq, s, grid, &ln_grid))
            .collect();
        let bytes = s2.len().saturating_mul(m).saturating_mul(8);
        let dense = (bytes <= memory_budget).then(|| {
            let mut data = vec![0.0; s2.len() * m];
            data.par_chunks_mut(m).zip(s2.par_iter().zip(&row_max)).for_each(|(row, (&s, &mx))| {
                fill_row(&chisq, s, mx, &ln_grid, grid, row);
            });
            data
        });
        Self {
            s2,
            grid,
            chisq,
            ln_grid,
            dense,
            row_max,
        }
    }

    fn n(&self) -> usize {
        self.s2.len()
    }

    fn m(&self) -> usize {
        self.grid.len()
    }

    /// Runs `body` over fixed blocks of rows and returns one accumulator
    /// per block in block order, so reductions over the result do not
    /// depend on the thread count.
    fn blocks<T, I, F>(&self, init: I, body: F) -> Vec<T>
    where
        T: Send,
        I: Fn() -> T + Sync,
        F: Fn(&mut T, usize, &[f64]) + Sync,
    {
        let n = self.n();
        let m = self.m();
        (0..n.div_ceil(ROW_BLOCK))
            .into_par_iter()
            .map(|b| {
                let lo = b * ROW_BLOCK;
                let hi = (lo + ROW_BLOCK).min(n);
                let mut acc = init();
                let mut scratch = vec![0.0; if self.dense.is_some() { 0 } else { m }];
                for i in lo..hi {
                    let row: &[f64] = match &self.dense {
                        Some(data) => &data[i * m..(i + 1) * m],
                        None => {
                            fill_row(&self.chisq, self.s2[i], self.row_max[i], &self.ln_grid, self.grid, &mut scratch);
                            &scratch
                        }
                    };
                    body(&mut acc, i, row);
                }
                acc
            })
            .collect()
    }

    /// Scaled mixture values `f_i` for sparse weights, and the log-likelihood.
    fn mix(&self, atoms: &[(usize, f64)]) -> (f64, Vec<f64>) {
        let parts = self.blocks(
            || (0.0, Vec::with_capacity(ROW_BLOCK)),
            |(ll, f): &mut (f64, Vec<f64>), i, row| {
                let v = atoms.iter().map(|&(j, w)| w * row[j]).sum::<f64>();
                if v >= UNDERFLOW {
                    *ll += v.ln() + self.row_max[i];
                } else {
                    // Far below the row maximum: redo this row in log space
                    // so the likelihood is not overstated by a clamp.
                    let (s, g, lg) = (self.s2[i], self.grid, &self.ln_grid);
                    *ll += log_sum_exp(atoms.iter().map(|&(j, w)| {
                        w.ln() + self.chisq.data_term(s) - self.chisq.half_nu() * (lg[j] + s / g[j])
                    }));
                }
                f.push(v.max(UNDERFLOW));
            },
        );
        let mut ll = 0.0;
        let mut f = Vec::with_capacity(self.n());
        for (part_ll, part_f) in parts {
            ll += part_ll;
            f.extend(part_f);
        }
        (ll, f)
    }

    /// `ratio_j = (1/n) Σ_i p_ij / f_i` on the whole grid.
    fn ratio(&self, f: &[f64]) -> Vec<f64> {
        let m = self.m();
        let parts = self.blocks(
            || vec![0.0; m],
            |acc: &mut Vec<f64>, i, row| {
                let inv = 1.0 / f[i];
                for (a, l) in acc.iter_mut().zip(row) {
                    *a += l * inv;
                }
            },
        );
        let mut ratio = vec![0.0; m];
        for acc in parts {
            for (r, a) in ratio.iter_mut().zip(&acc) {
                *r += a;
            }
        }
        let inv_n = 1.0 / self.n() as f64;
        ratio.iter_mut().for_each(|r| *r *= inv_n);
        ratio
    }

    /// Gram matrix `SᵀS` and `Sᵀ1` of `S_ij = p_ij / f_i` restricted to `cols`.
    fn gram(&self, cols: &[usize], f: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let k = cols.len();
        let parts = self.blocks(
            || (DMatrix::<f64>::zeros(k, k), DVector::<f64>::zeros(k), vec![0.0; k]),
            |(q, c, srow): &mut (DMatrix<f64>, DVector<f64>, Vec<f64>), i, row| {
                let inv = 1.0 / f[i];
                for (s, &j) in srow.iter_mut().zip(cols) {
                    *s = row[j] * inv;
                }
                for a in 0..k {
                    let sa = srow[a];
                    c[a] += sa;
                    for b in a..k {
                        q[(a, b)] += sa * srow[b];
                    }
                }
            },
        );
        let mut q = DMatrix::<f64>::zeros(k, k);
        let mut c = DVector::<f64>::zeros(k);
        for (pq, pc, _) in parts {
            q += pq;
            c += pc;
        }
        for a in 0..k {
            for b in 0..a {
                q[(a, b)] = q[(b, a)];
            }
        }
        (q, c)
    }
}

fn row_log_max(chisq: &ScaledChisq, s2: f64, grid: &[f64], ln_grid: &[f64]) -> f64 {
    grid.iter()
        .zip(ln_grid)
        .map(|(&g, &lg)| -chisq.half_nu() * (lg + s2 / g))
        .fold(f64::NEG_INFINITY, f64::max)
        + chisq.data_term(s2)
}

fn fill_row(chisq: &ScaledChisq, s2: f64, row_max: f64, ln_grid: &[f64], grid: &[f64], out: &mut [f64]) {
    let base = chisq.data_term(s2) - row_max;
    let h = chisq.half_nu();
    for ((o, &g), &lg) in out.iter_mut().zip(grid).zip(ln_grid) {
        *o = (base - h * (lg + s2 / g)).exp();
    }
}

fn gap_of(ratio: &[f64]) -> f64 {
    (ratio.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 1.0).max(0.0)
}

fn sparse(w: &[f64]) -> Vec<(usize, f64)> {
    w.iter().enumerate().filter(|(_, &x)| x > 0.0).map(|(j, &x)| (j, x)).collect()
}

/// Fits the grid-restricted NPMLE to a dataset's sample variances.
pub fn fit_npmle(dataset: &SummaryDataset, grid: &GridConfig, solver: &SolverConfig) -> Result<NpmleFit> {
    fit_npmle_s2(&dataset.s2_values(), dataset.nu(), grid, solver)
}

/// Fits the grid-restricted NPMLE to bare sample variances.
pub fn fit_npmle_s2(
    s2: &[f64],
    nu: DegreesOfFreedom,
    grid_config: &GridConfig,
    solver: &SolverConfig,
) -> Result<NpmleFit> {
    let grid = build_grid(s2, grid_config)?;
    fit_on_grid(s2, nu, grid, solver)
}

struct Progress {
    weights: Vec<f64>,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

/// Fits the NPMLE restricted to a caller-supplied grid.
pub fn fit_on_grid(s2: &[f64], nu: DegreesOfFreedom, grid: Vec<f64>, solver: &SolverConfig) -> Result<NpmleFit> {
    if s2.is_empty() {
        return Err(Error::Input("cannot fit a prior to an empty dataset".into()));
    }
    if s2.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::domain("sample variances must be positive and finite"));
    }
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) || grid[0] <= 0.0 {
        return Err(Error::domain("grid must be positive and strictly increasing"));
    }
    let lik = Likelihood::new(s2, &grid, nu.get(), solver.memory_budget);

    let progress = if grid.len() == 1 {
        let (ll, _) = lik.mix(&[(0, 1.0)]);
        Progress {
            weights: vec![1.0],
            trace: vec![ll],
            iterations: 0,
            converged: true,
        }
    } else {
        match solver.algorithm {
            Algorithm::ConstrainedNewton => constrained_newton(&lik, solver),
            Algorithm::Em => em(&lik, solver),
        }
    };

    // Prune negligible atoms and certify the reported prior itself.
    let kept: Vec<(usize, f64)> = progress
        .weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w >= PRUNE_THRESHOLD)
        .map(|(j, &w)| (j, w))
        .collect();
    let total: f64 = kept.iter().map(|a| a.1).sum();
    let kept: Vec<(usize, f64)> = kept.into_iter().map(|(j, w)| (j, w / total)).collect();
    let prior = DiscretePrior::from_atoms(kept.iter().map(|&(j, w)| (grid[j], w)))?;
    let (final_ll, f) = lik.mix(&kept);
    let kkt_gap = gap_of(&lik.ratio(&f));
    let converged = progress.converged && kkt_gap <= KKT_CERTIFICATE;
    if !converged {
        log::warn!(
            "NPMLE stopped after {} iterations with KKT gap {kkt_gap:e}",
            progress.iterations
        );
    }
    Ok(NpmleFit {
        prior,
        log_likelihood: final_ll,
        kkt_gap,
        iterations: progress.iterations,
        converged,
        grid,
        trace: progress.trace,
    })
}

fn constrained_newton(lik: &Likelihood, solver: &SolverConfig) -> Progress {
    const ARMIJO: f64 = 1.0 / 3.0;
    let m = lik.m();
    let n = lik.n() as f64;

    // Start from a coarse uniform sub-grid; atoms are added where needed.
    let stride = m.div_ceil(20).max(1);
    let mut w = vec![0.0; m];
    let mut start: Vec<usize> = (0..m).step_by(stride).collect();
    if *start.last().unwrap() != m - 1 {
        start.push(m - 1);
    }
    for &j in &start {
        w[j] = 1.0 / start.len() as f64;
    }
    let (mut ll, mut f) = lik.mix(&sparse(&w));
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let ratio = lik.ratio(&f);
        let gap = gap_of(&ratio);
        if gap <= solver.kkt_tol {
            converged = true;
            break;
        }
        if iterations >= solver.max_iter {
            break;
        }
        iterations += 1;
        let previous = ll;

        let mut cols: Vec<usize> = (0..m).filter(|&j| w[j] > 0.0).collect();
        for j in 0..m {
            let peak = ratio[j] > 1.0
                && (j == 0 || ratio[j] >= ratio[j - 1])
                && (j == m - 1 || ratio[j] >= ratio[j + 1]);
            if peak && w[j] == 0.0 {
                cols.push(j);
            }
        }
        cols.sort_unstable();

        // Quadratic model of the log-likelihood in the weights on `cols`:
        // minimize |S π - 2|² with π ≥ 0 and a penalty pulling Σπ to one.
        // Skipped while some observation is essentially unsupported: its
        // row would swamp the model, and plain EM steps repair that first.
        let mut pi = DVector::<f64>::zeros(cols.len());
        if !underflows(&f) {
            let (mut q, c) = lik.gram(&cols, &f);
            let k = cols.len();
            let rho = q.trace() / k as f64;
            q.add_scalar_mut(rho);
            let b = c * 2.0 + DVector::from_element(k, rho);
            pi = nnls_normal(&q, &b);
        }
        let total: f64 = pi.iter().sum();

        let mut accepted = false;
        if total > 0.0 && total.is_finite() {
            pi /= total;
            let dir: Vec<(usize, f64)> = cols.iter().enumerate().map(|(a, &j)| (j, pi[a] - w[j])).collect();
            let slope: f64 = n * dir.iter().map(|&(j, d)| d * (ratio[j] - 1.0)).sum::<f64>();
            if slope > 0.0 {
                let mut t = 1.0;
                for _ in 0..60 {
                    let mut trial = w.clone();
                    for &(j, d) in &dir {
                        trial[j] = (w[j] + t * d).max(0.0);
                    }
                    let s: f64 = trial.iter().sum();
                    trial.iter_mut().for_each(|x| *x /= s);
                    let (ll_t, f_t) = lik.mix(&sparse(&trial));
                    // A full step may strip the only support of an isolated
                    // observation; shorter steps keep a fraction of it.
                    let kept = f_t.iter().zip(&f).all(|(a, b)| *a >= 1e-2 * b);
                    if kept && ll_t >= ll + ARMIJO * t * slope {
                        w = trial;
                        ll = ll_t;
                        f = f_t;
                        accepted = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
        }
        if !accepted {
            // Vertex-direction step toward the steepest grid point; this
            // can revive atoms the quadratic model dropped.
            // The log-likelihood is far from linear along this ray when an
            // observation is badly fit, so take the best halving step
            // rather than an Armijo one.
            let top = (0..m).max_by(|&a, &b| ratio[a].total_cmp(&ratio[b])).unwrap();
            let mut t = 1.0;
            for _ in 0..80 {
                let mut trial: Vec<f64> = w.iter().map(|x| (1.0 - t) * x).collect();
                trial[top] += t;
                let (ll_t, f_t) = lik.mix(&sparse(&trial));
                if ll_t > ll {
                    w = trial;
                    ll = ll_t;
                    f = f_t;
                    accepted = true;
                } else if accepted {
                    break;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            // Plain EM step on the full grid: monotone and always defined.
            for j in 0..m {
                w[j] *= ratio[j];
            }
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= s);
            let (ll_em, f_em) = lik.mix(&sparse(&w));
            ll = ll_em;
            f = f_em;
        }
        // Drop vanishing atoms, unless that costs likelihood (an atom can
        // be the only support near an isolated observation).
        if w.iter().any(|&x| x > 0.0 && x < 1e-14) {
            let mut clean: Vec<f64> = w.iter().map(|&x| if x < 1e-14 { 0.0 } else { x }).collect();
            normalize(&mut clean);
            let (ll_clean, f_clean) = lik.mix(&sparse(&clean));
            if ll_clean >= ll && !underflows(&f_clean) {
                w = clean;
                ll = ll_clean;
                f = f_clean;
            }
        }
        trace.push(ll);

        let rel = (ll - previous).abs() / previous.abs().max(1.0);
        if rel < solver.tol && gap <= STALL_GAP {
            converged = true;
            break;
        }
    }
    Progress {
        weights: w,
        trace,
        iterations,
        converged,
    }
}

/// Lawson–Hanson active-set solution of `min ½ xᵀAx - bᵀx` over `x ≥ 0`
/// for symmetric positive definite `A`.
fn nnls_normal(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let k = b.len();
    let scale = b.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    let mut x = DVector::<f64>::zeros(k);
    let mut passive = vec![false; k];
    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..k).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| a[(idx[r], idx[c])]);
        let rhs = DVector::from_fn(idx.len(), |r, _| b[idx[r]]);
        let sol = match sub.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => sub.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(idx.len())),
        };
        let mut z = DVector::<f64>::zeros(k);
        for (r, &j) in idx.iter().enumerate() {
            z[j] = sol[r];
        }
        z
    };
    for _ in 0..3 * k + 10 {
        let grad = b - a * &x;
        let candidate = (0..k)
            .filter(|&j| !passive[j] && grad[j] > tol)
            .max_by(|&i, &j| grad[i].total_cmp(&grad[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        for _ in 0..3 * k + 10 {
            let z = solve_passive(&passive);
            if (0..k).filter(|&i| passive[i]).all(|i| z[i] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = 1.0f64;
            for i in (0..k).filter(|&i| passive[i] && z[i] <= 0.0) {
                alpha = alpha.min(x[i] / (x[i] - z[i]));
            }
            x += (z - &x) * alpha;
            for i in 0..k {
                if passive[i] && x[i] <= 0.0 {
                    passive[i] = false;
                    x[i] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}

fn em(lik: &Likelihood, solver: &SolverConfig) -> Progress {
    let m = lik.m();
    let mut w = vec![1.0 / m as f64; m];
    let (mut ll, mut f) = lik.mix(&sparse(&w));
    let mut ratio = lik.ratio(&f);
    let mut trace = vec![ll];
    let mut iterations = 0;
    let mut converged = false;

    while iterations < solver.max_iter {
        let gap = gap_of(&ratio);
        if gap <= solver.kkt_tol {
            converged = true;
            break;
        }
        iterations += 1;
        let previous = ll;

        let w1 = em_update(&w, &ratio);
        let (ll1, f1) = lik.mix(&sparse(&w1));
        let ratio1 = lik.ratio(&f1);
        let w2 = em_update(&w1, &ratio1);

        let mut next = None;
        if solver.acceleration {
            if let Some(wp) = squarem_point(&w, &w1, &w2) {
                let (llp, fp) = lik.mix(&sparse(&wp));
                // Extrapolated point must not fall below the plain EM path.
                if llp.is_finite() && llp >= ll1 {
                    next = Some((wp, llp, fp));
                }
            }
        }
        let (wn, lln, fnext) = match next {
            Some(v) => v,
            None => {
                let (ll2, f2) = lik.mix(&sparse(&w2));
                (w2, ll2, f2)
            }
        };
        w = wn;
        ll = lln;
        f = fnext;
        ratio = lik.ratio(&f);
        trace.push(ll);

        let rel = (ll - previous).abs() / previous.abs().max(1.0);
        if rel < solver.tol && gap_of(&ratio) <= STALL_GAP {
            converged = true;
            break;
        }
    }
    Progress {
        weights: w,
        trace,
        iterations,
        converged,
    }
}

/// One EM step; weights that underflow are set to zero so later passes
/// never run on subnormal numbers.
fn em_update(w: &[f64], ratio: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = w.iter().zip(ratio).map(|(w, r)| w * r).collect();
    normalize(&mut out);
    for x in out.iter_mut() {
        if *x < 1e-250 {
            *x = 0.0;
        }
    }
    out
}

fn normalize(w: &mut [f64]) {
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
}

/// SQUAREM (scheme 3) extrapolation from `w0 → w1 → w2`. Backtracks the
/// step length toward plain EM until every weight stays nonnegative.
fn squarem_point(w0: &[f64], w1: &[f64], w2: &[f64]) -> Option<Vec<f64>> {
    let mut r2 = 0.0;
    let mut v2 = 0.0;
    for j in 0..w0.len() {
        let r = w1[j] - w0[j];
        let v = w2[j] - 2.0 * w1[j] + w0[j];
        r2 += r * r;
        v2 += v * v;
    }
    if !(v2 > 0.0) {
        return None;
    }
    let mut alpha = -(r2 / v2).sqrt();
    if !(alpha < -1.0) {
        return None;
    }
    let mut out = vec![0.0; w0.len()];
    for _ in 0..20 {
        let mut ok = true;
        for j in 0..w0.len() {
            let r = w1[j] - w0[j];
            let v = w2[j] - 2.0 * w1[j] + w0[j];
            let x = w0[j] - 2.0 * alpha * r + alpha * alpha * v;
            if !(x >= 0.0) {
                ok = false;
                break;
            }
            out[j] = if x < 1e-250 { 0.0 } else { x };
        }
        if ok {
            normalize(&mut out);
            return Some(out);
        }
        alpha = 0.5 * (alpha - 1.0);
        if alpha > -1.0 - 1e-3 {
            break;
        }
    }
    None
}

/// Marginal density `f_G(s²; ν)` of a sample variance under prior `G`.
pub fn marginal_density(prior: &DiscretePrior, s2: f64, nu: DegreesOfFreedom) -> Result<f64> {
    if !(s2 > 0.0) {
        return Err(Error::domain(format!("s2 must be > 0, got {s2}")));
    }
    Ok(prior.log_marginal(s2, &ScaledChisq::new(nu.get())).exp())
}

/// `Σ_i ln f_G(S_i²)`.
pub fn log_marginal_likelihood(prior: &DiscretePrior, dataset: &SummaryDataset) -> f64 {
    log_marginal_likelihood_s2(prior, &dataset.s2_values(), dataset.nu())
}

pub fn log_marginal_likelihood_s2(prior: &DiscretePrior, s2: &[f64], nu: DegreesOfFreedom) -> f64 {
    let chisq = ScaledChisq::new(nu.get());
    s2.iter().map(|&s| prior.log_marginal(s, &chisq)).sum()
}

/// Largest excess over one of `(1/n) Σ_i p(S_i² | σ²) / f_G(S_i²)` across
/// the grid, floored at zero. Zero exactly at the grid-restricted optimum.
pub fn kkt_gap(prior: &DiscretePrior, dataset: &SummaryDataset, grid: &[f64]) -> f64 {
    kkt_gap_s2(prior, &dataset.s2_values(), dataset.nu(), grid)
}

pub fn kkt_gap_s2(prior: &DiscretePrior, s2: &[f64], nu: DegreesOfFreedom, grid: &[f64]) -> f64 {
    let chisq = ScaledChisq::new(nu.get());
    let log_f: Vec<f64> = s2.iter().map(|&s| prior.log_marginal(s, &chisq)).collect();
    let n = s2.len() as f64;
    let worst = grid
        .iter()
        .map(|&g| {
            s2.iter()
                .zip(&log_f)
                .map(|(&s, &lf)| (chisq.logpdf(s, g) - lf).exp())
                .sum::<f64>()
                / n
        })
        .fold(f64::NEG_INFINITY, f64::max);
    (worst - 1.0).max(0.0)
}

/// Hellinger distance `sqrt(½ ∫ (√f - √g)²)` between two densities on
/// `(0, ∞)`, integrated in `ln t` over a range outside which both
/// densities carry negligible mass.
pub fn hellinger_distance<F, G>(f: F, g: G) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    const TAIL: f64 = 1e-13;
    let mass = |t: f64| f(t).max(g(t)) * t;
    let mut hi = 1.0;
    let mut steps = 0;
    while mass(hi) > TAIL || steps < 2 {
        hi *= 2.0;
        steps += 1;
        if steps > 1100 {
            return Err(Error::Quadrature("upper integration limit not found".into()));
        }
    }
    let mut lo = 1.0;
    steps = 0;
    while mass(lo) > TAIL || steps < 2 {
        lo *= 0.5;
        steps += 1;
        if steps > 1100 {
            return Err(Error::Quadrature("lower integration limit not found".into()));
        }
    }
    let integrand = |y: f64| {
        let t = y.exp();
        let d = f(t).sqrt() - g(t).sqrt();
        0.5 * d * d * t
    };
    let est = quad::integrate(integrand, lo.ln(), hi.ln(), 1e-13, 1e-10)?;
    Ok(est.value.max(0.0).sqrt())
}

/// Hellinger distance between the sample-variance marginals of two priors.
pub fn marginal_hellinger(a: &DiscretePrior, b: &DiscretePrior, nu: DegreesOfFreedom) -> Result<f64> {
    let chisq = ScaledChisq::new(nu.get());
    hellinger_distance(
        |t| a.log_marginal(t, &chisq).exp(),
        |t| b.log_marginal(t, &chisq).exp(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{sample, stream, Law};
    use approx::assert_relative_eq;

    fn nu(v: f64) -> DegreesOfFreedom {
        DegreesOfFreedom::sampling(v).unwrap()
    }

    #[test]
    fn prior_validation() {
        assert!(DiscretePrior::new(vec![], vec![]).is_err());
        assert!(DiscretePrior::new(vec![2.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(DiscretePrior::new(vec![1.0], vec![0.7]).is_err());
        assert!(DiscretePrior::new(vec![-1.0], vec![1.0]).is_err());
        let merged = DiscretePrior::from_atoms([(1.0, 0.5), (1.0, 0.5)]).unwrap();
        assert_eq!(merged, DiscretePrior::point_mass(1.0).unwrap());
        let tp = DiscretePrior::two_point(10.0, 1.0, 0.5).unwrap();
        assert_eq!(tp.support(), &[1.0, 10.0]);
    }

    #[test]
    fn grid_construction() {
        assert_eq!(build_grid(&[1.0, 1.0, 1.0], &GridConfig::default()).unwrap(), vec![1.0]);
        let cfg = GridConfig {
            grid_size: 3,
            lower_quantile: 0.0,
            explicit_bounds: None,
        };
        let g = build_grid(&[0.01, 3.0, 100.0, 0.5], &cfg).unwrap();
        assert_eq!(g[0], 0.01);
        assert_relative_eq!(g[1], 1.0, max_relative = 1e-14);
        assert_eq!(g[2], 100.0);
        assert!(build_grid(&[], &cfg).is_err());
    }

    #[test]
    fn grid_uses_nearest_rank_lower_quantile() {
        let values: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        let g = build_grid(&values, &GridConfig::default()).unwrap();
        // ceil(0.01 * 1000) = 10th smallest value.
        assert_eq!(g[0], 10.0);
        assert_eq!(*g.last().unwrap(), 1000.0);
        assert_eq!(g.len(), 300);
        let ratios: Vec<f64> = g.windows(2).map(|w| w[1] / w[0]).collect();
        for r in &ratios {
            assert_relative_eq!(*r, ratios[0], max_relative = 1e-9);
        }
    }

    #[test]
    fn marginal_density_point_mass() {
        let prior = DiscretePrior::point_mass(1.0).unwrap();
        let v = marginal_density(&prior, 1.0, nu(2.0)).unwrap();
        assert_relative_eq!(v, (-1f64).exp(), max_relative = 1e-13);
        assert!(marginal_density(&prior, 0.0, nu(2.0)).is_err());
    }

    #[test]
    fn identical_variances_give_point_mass() {
        let s2 = vec![0.7; 25];
        let fit = fit_npmle_s2(&s2, nu(4.0), &GridConfig::default(), &SolverConfig::default()).unwrap();
        assert_eq!(fit.prior, DiscretePrior::point_mass(0.7).unwrap());
        let expected = 25.0 * ScaledChisq::new(4.0).logpdf(0.7, 0.7);
        assert_relative_eq!(fit.log_likelihood, expected, max_relative = 1e-12);
        assert_eq!(fit.kkt_gap, 0.0);
        assert!(fit.converged);
    }

    #[test]
    fn kkt_gap_positive_away_from_optimum() {
        let s2 = [0.1, 0.12, 9.0, 11.0];
        let prior = DiscretePrior::two_point(1.0, 10.0, 0.5).unwrap();
        // Uniform weights on a grid whose atoms miss the small cluster.
        let gap = kkt_gap_s2(&prior, &s2, nu(4.0), &[0.1, 1.0, 10.0]);
        assert!(gap > 0.1, "gap={gap}");
    }

    #[test]
    fn fit_is_certified_and_monotone() {
        let mut rng = stream(5, 0);
        let s2: Vec<f64> = (0..2000)
            .map(|_| {
                let sigma2 = sample(&mut rng, Law::ScaledInvChiSquared { nu0: 6.0, s0sq: 1.0 }).unwrap();
                sigma2 * sample(&mut rng, Law::ChiSquared { nu: 4.0 }).unwrap() / 4.0
            })
            .collect();
        let fit = fit_npmle_s2(&s2, nu(4.0), &GridConfig::default(), &SolverConfig::default()).unwrap();
        assert!(fit.converged);
        assert!(fit.kkt_gap <= KKT_CERTIFICATE, "gap={}", fit.kkt_gap);
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        let lo = fit.grid[0];
        let hi = *fit.grid.last().unwrap();
        assert!(fit.prior.support().iter().all(|&s| s >= lo && s <= hi));
        assert_relative_eq!(fit.prior.weights().iter().sum::<f64>(), 1.0, max_relative = 1e-12);
        let recomputed = log_marginal_likelihood_s2(&fit.prior, &s2, nu(4.0));
        assert_relative_eq!(fit.log_likelihood, recomputed, max_relative = 1e-10);
    }

    #[test]
    fn streaming_matches_dense() {
        let mut rng = stream(9, 0);
        let s2: Vec<f64> = (0..700)
            .map(|_| {
                let sigma2 = if rng.random::<f64>() < 0.5 { 1.0 } else { 10.0 };
                sigma2 * sample(&mut rng, Law::ChiSquared { nu: 3.0 }).unwrap() / 3.0
            })
            .collect();
        let dense = fit_npmle_s2(&s2, nu(3.0), &GridConfig::default(), &SolverConfig::default()).unwrap();
        let streaming = SolverConfig {
            memory_budget: 0,
            ..SolverConfig::default()
        };
        let stream_fit = fit_npmle_s2(&s2, nu(3.0), &GridConfig::default(), &streaming).unwrap();
        assert_eq!(dense.prior, stream_fit.prior);
        assert_eq!(dense.log_likelihood, stream_fit.log_likelihood);
    }

    #[test]
    fn em_reaches_the_same_optimum() {
        let mut rng = stream(21, 0);
        let s2: Vec<f64> = (0..300)
            .map(|_| {
                let sigma2 = if rng.random::<f64>() < 0.3 { 0.5 } else { 4.0 };
                sigma2 * sample(&mut rng, Law::ChiSquared { nu: 6.0 }).unwrap() / 6.0
            })
            .collect();
        let grid = GridConfig {
            grid_size: 60,
            ..GridConfig::default()
        };
        let newton = fit_npmle_s2(&s2, nu(6.0), &grid, &SolverConfig::default()).unwrap();
        let em_cfg = SolverConfig {
            algorithm: Algorithm::Em,
            max_iter: 3000,
            ..SolverConfig::default()
        };
        let em = fit_npmle_s2(&s2, nu(6.0), &grid, &em_cfg).unwrap();
        assert!(newton.converged);
        assert!(em.log_likelihood <= newton.log_likelihood + 1e-8);
        assert!(newton.log_likelihood - em.log_likelihood < 1e-3);
        for w in em.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-12 * w[0].abs());
        }
    }

    #[test]
    fn hellinger_basic_properties() {
        let a = DiscretePrior::point_mass(1.0).unwrap();
        let b = DiscretePrior::point_mass(4.0).unwrap();
        let same = marginal_hellinger(&a, &a, nu(2.0)).unwrap();
        assert!(same < 1e-7);
        let ab = marginal_hellinger(&a, &b, nu(2.0)).unwrap();
        let ba = marginal_hellinger(&b, &a, nu(2.0)).unwrap();
        assert!((ab - ba).abs() < 1e-7);
        // Closed form at ν = 2: exponentials with rates 1 and 1/4 have
        // Bhattacharyya coefficient 2 sqrt(λμ)/(λ+μ) = 0.8.
        assert!((ab - (1.0f64 - 0.8).sqrt()).abs() < 1e-6, "ab={ab}");
    }
}
