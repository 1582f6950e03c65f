//! Monte-Carlo benchmark of the testing pipelines on simulated summary data.
//!
//! A replicate draws `σ_i²` from a variance prior, marks a fixed number of
//! hypotheses as null (at random, or adversarially the ones with the
//! largest variances), draws the alternative means from a signal law and
//! then `Z_i ~ N(μ_i, σ_i²)`, `S_i² ~ (σ_i²/ν) χ²_ν`. Every replicate runs
//! on its own RNG stream, so results do not depend on scheduling.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{sample, stream, DegreesOfFreedom, Law};
use crate::error::{Error, Result};
use crate::mtp::{bh_reject, storey_reject, RejectionResult};
use crate::npmle::{fit_npmle_s2, DiscretePrior, GridConfig, SolverConfig};
use crate::pvalues::{fit_limma, LimmaPrior, OraclePrior, PvalueMethod};
use crate::summarize::SummaryDataset;

/// Law of the true variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum VariancePrior {
    Dirac { c: f64 },
    ScaledInvChisq { nu0: f64, s0sq: f64 },
    /// Mass `w` at `v1`, `1 - w` at `v2`.
    TwoPoint { v1: f64, v2: f64, w: f64 },
}

impl VariancePrior {
    /// The prior as the oracle sees it: exact, never grid-discretized.
    pub fn oracle(&self) -> Result<OraclePrior> {
        Ok(match *self {
            VariancePrior::Dirac { c } => OraclePrior::Discrete(DiscretePrior::point_mass(c)?),
            VariancePrior::TwoPoint { v1, v2, w } => OraclePrior::Discrete(DiscretePrior::two_point(v1, v2, w)?),
            VariancePrior::ScaledInvChisq { nu0, s0sq } => OraclePrior::Limma(LimmaPrior::new(nu0, s0sq)?),
        })
    }
}

/// Law of the means of the non-null hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalLaw {
    /// `μ ~ N(0, γ σ²)`.
    NormalScaled { gamma: f64 },
    /// `μ ~ N(0, τ²)`.
    NormalFixed { tau2: f64 },
    /// `μ = m`.
    Dirac { m: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NullOrdering {
    Random,
    /// Nulls are the hypotheses with the largest true variances.
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSetting {
    pub name: String,
    #[serde(default = "default_n")]
    pub n: usize,
    pub nu: DegreesOfFreedom,
    pub variance_prior: VariancePrior,
    #[serde(default = "default_null_prop")]
    pub null_prop: f64,
    #[serde(default = "default_signal")]
    pub signal_law: SignalLaw,
    #[serde(default = "default_ordering")]
    pub ordering: NullOrdering,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_lambda")]
    pub storey_lambda: f64,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_n() -> usize {
    10_000
}
fn default_null_prop() -> f64 {
    0.9
}
fn default_signal() -> SignalLaw {
    SignalLaw::NormalScaled { gamma: 16.0 }
}
fn default_ordering() -> NullOrdering {
    NullOrdering::Random
}
fn default_alpha() -> f64 {
    0.1
}
fn default_lambda() -> f64 {
    0.5
}

impl SimSetting {
    /// A setting with the default size, null proportion, signal and level.
    pub fn new(name: impl Into<String>, nu: f64, variance_prior: VariancePrior) -> Result<Self> {
        let setting = Self {
            name: name.into(),
            n: default_n(),
            nu: DegreesOfFreedom::sampling(nu)?,
            variance_prior,
            null_prop: default_null_prop(),
            signal_law: default_signal(),
            ordering: default_ordering(),
            alpha: default_alpha(),
            storey_lambda: default_lambda(),
            grid: GridConfig::default(),
            solver: SolverConfig::default(),
        };
        setting.validate()?;
        Ok(setting)
    }

    /// Named settings: `dirac` (σ² = 1), `scaled_inv_chisq` (ν₀ = 6,
    /// s₀² = 1), `two_point` (½δ₁₀ + ½δ₁) and `two_point_adversarial`.
    pub fn preset(name: &str, nu: f64) -> Result<Self> {
        let (prior, ordering) = match name {
            "dirac" => (VariancePrior::Dirac { c: 1.0 }, NullOrdering::Random),
            "scaled_inv_chisq" => (VariancePrior::ScaledInvChisq { nu0: 6.0, s0sq: 1.0 }, NullOrdering::Random),
            "two_point" => (VariancePrior::TwoPoint { v1: 10.0, v2: 1.0, w: 0.5 }, NullOrdering::Random),
            "two_point_adversarial" => (
                VariancePrior::TwoPoint { v1: 10.0, v2: 1.0, w: 0.5 },
                NullOrdering::Adversarial,
            ),
            other => return Err(Error::Input(format!("unknown preset {other:?}"))),
        };
        let mut setting = Self::new(format!("{name}_nu{nu}"), nu, prior)?;
        setting.ordering = ordering;
        Ok(setting)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Input("n must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.null_prop) {
            return Err(Error::domain(format!("null_prop must lie in [0,1], got {}", self.null_prop)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::domain(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if !(self.storey_lambda > 0.0 && self.storey_lambda < 1.0) {
            return Err(Error::domain("storey_lambda must lie in (0,1)"));
        }
        DegreesOfFreedom::sampling(self.nu.get())?;
        self.variance_prior.oracle()?;
        match self.signal_law {
            SignalLaw::NormalScaled { gamma } if !(gamma > 0.0) => Err(Error::domain("gamma must be > 0")),
            SignalLaw::NormalFixed { tau2 } if !(tau2 > 0.0) => Err(Error::domain("tau2 must be > 0")),
            SignalLaw::Dirac { m } if m == 0.0 || !m.is_finite() => {
                Err(Error::domain("a point-mass signal must be finite and nonzero"))
            }
            _ => Ok(()),
        }
    }

    pub fn null_count(&self) -> usize {
        (self.n as f64 * self.null_prop).ceil() as usize
    }
}

/// The latent parameters behind one simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub null_mask: Vec<bool>,
}

/// Draws one dataset. The draw order is fixed: variances, null set,
/// alternative means, then `Z` and `S²` per hypothesis.
pub fn sample_dataset<R: Rng + ?Sized>(setting: &SimSetting, rng: &mut R) -> Result<(SummaryDataset, SimTruth)> {
    let n = setting.n;
    let law_prior;
    let law = match setting.variance_prior {
        VariancePrior::Dirac { c } => {
            law_prior = DiscretePrior::point_mass(c)?;
            Law::Discrete(&law_prior)
        }
        VariancePrior::TwoPoint { v1, v2, w } => {
            law_prior = DiscretePrior::two_point(v1, v2, w)?;
            Law::Discrete(&law_prior)
        }
        VariancePrior::ScaledInvChisq { nu0, s0sq } => Law::ScaledInvChiSquared { nu0, s0sq },
    };
    let sigma2: Vec<f64> = (0..n).map(|_| sample(rng, law)).collect::<Result<_>>()?;

    let n0 = setting.null_count();
    let mut order: Vec<usize> = (0..n).collect();
    match setting.ordering {
        NullOrdering::Random => order.shuffle(rng),
        NullOrdering::Adversarial => order.sort_by(|&a, &b| sigma2[b].total_cmp(&sigma2[a])),
    }
    let mut null_mask = vec![false; n];
    for &i in &order[..n0] {
        null_mask[i] = true;
    }

    let mut mu = vec![0.0; n];
    for i in (0..n).filter(|&i| !null_mask[i]) {
        mu[i] = match setting.signal_law {
            SignalLaw::NormalScaled { gamma } => (gamma * sigma2[i]).sqrt() * sample(rng, Law::StandardNormal)?,
            SignalLaw::NormalFixed { tau2 } => tau2.sqrt() * sample(rng, Law::StandardNormal)?,
            SignalLaw::Dirac { m } => m,
        };
    }

    let nu = setting.nu.get();
    let mut z = Vec::with_capacity(n);
    let mut s2 = Vec::with_capacity(n);
    for i in 0..n {
        z.push(mu[i] + sigma2[i].sqrt() * sample(rng, Law::StandardNormal)?);
        s2.push(sigma2[i] * sample(rng, Law::ChiSquared { nu })? / nu);
    }
    let dataset = SummaryDataset::from_vectors(&z, &s2, setting.nu)?;
    Ok((dataset, SimTruth { mu, sigma2, null_mask }))
}

/// The five compared pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    TtestBh,
    LimmaBh,
    NpmleBh,
    OracleBh,
    OracleStorey,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::TtestBh,
        Method::LimmaBh,
        Method::NpmleBh,
        Method::OracleBh,
        Method::OracleStorey,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::TtestBh => "ttest_bh",
            Method::LimmaBh => "limma_bh",
            Method::NpmleBh => "npmle_bh",
            Method::OracleBh => "oracle_bh",
            Method::OracleStorey => "oracle_storey",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: Method,
    pub pvalues: Vec<f64>,
    pub rejection: RejectionResult,
}

/// Runs every pipeline on one dataset. The NPMLE is refit from this
/// dataset's sample variances; the oracle uses the setting's true prior.
pub fn run_methods(dataset: &SummaryDataset, setting: &SimSetting) -> Result<Vec<MethodOutcome>> {
    let s2 = dataset.s2_values();
    let fit = fit_npmle_s2(&s2, dataset.nu(), &setting.grid, &setting.solver)?;
    let limma = fit_limma(&s2, dataset.nu())?;
    let oracle = PvalueMethod::Oracle(setting.variance_prior.oracle()?);
    let p_ttest = PvalueMethod::TTest.pvalues(dataset)?;
    let p_limma = PvalueMethod::Limma(limma).pvalues(dataset)?;
    let p_npmle = PvalueMethod::Npmle(fit.prior).pvalues(dataset)?;
    let p_oracle = oracle.pvalues(dataset)?;
    let alpha = setting.alpha;
    Ok(vec![
        MethodOutcome {
            method: Method::TtestBh,
            rejection: bh_reject(&p_ttest, alpha)?,
            pvalues: p_ttest,
        },
        MethodOutcome {
            method: Method::LimmaBh,
            rejection: bh_reject(&p_limma, alpha)?,
            pvalues: p_limma,
        },
        MethodOutcome {
            method: Method::NpmleBh,
            rejection: bh_reject(&p_npmle, alpha)?,
            pvalues: p_npmle,
        },
        MethodOutcome {
            method: Method::OracleBh,
            rejection: bh_reject(&p_oracle, alpha)?,
            pvalues: p_oracle.clone(),
        },
        MethodOutcome {
            method: Method::OracleStorey,
            rejection: storey_reject(&p_oracle, alpha, setting.storey_lambda)?,
            pvalues: p_oracle,
        },
    ])
}

/// Per-replicate error metrics of one method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateMetrics {
    pub fdp: f64,
    pub power: f64,
    pub fndr: f64,
    /// Whether the null with the smallest sample variance has `p ≤ 0.2`;
    /// `None` when there are no nulls.
    pub min_svar_fp: Option<f64>,
}

/// P-value cutoff of the smallest-variance null metric.
pub const MIN_SVAR_LEVEL: f64 = 0.2;

pub fn compute_metrics(
    truth: &SimTruth,
    s2: &[f64],
    pvalues: &[f64],
    rejection: &RejectionResult,
) -> Result<ReplicateMetrics> {
    let n = truth.null_mask.len();
    if [truth.mu.len(), truth.sigma2.len(), s2.len(), pvalues.len(), rejection.rejected.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::Dimension("metric inputs must all have the same length".into()));
    }
    let n0 = truth.null_mask.iter().filter(|&&h| h).count();
    let r = rejection.rejected.iter().filter(|&&x| x).count();
    let v = truth
        .null_mask
        .iter()
        .zip(&rejection.rejected)
        .filter(|(&h, &x)| h && x)
        .count();
    let missed = truth
        .null_mask
        .iter()
        .zip(&rejection.rejected)
        .filter(|(&h, &x)| !h && !x)
        .count();
    let min_svar_fp = (0..n)
        .filter(|&i| truth.null_mask[i])
        .min_by(|&a, &b| s2[a].total_cmp(&s2[b]))
        .map(|i| if pvalues[i] <= MIN_SVAR_LEVEL { 1.0 } else { 0.0 });
    Ok(ReplicateMetrics {
        fdp: v as f64 / r.max(1) as f64,
        power: if n == n0 { 0.0 } else { (r - v) as f64 / (n - n0) as f64 },
        fndr: missed as f64 / (n - r).max(1) as f64,
        min_svar_fp,
    })
}

/// Monte-Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
    /// Replicates that contributed.
    pub replicates: usize,
}

impl McEstimate {
    /// Mean and standard error, both summed pairwise in index order.
    pub fn from_values(values: &[f64]) -> Self {
        let k = values.len();
        if k == 0 {
            return Self {
                estimate: f64::NAN,
                stderr: f64::NAN,
                replicates: 0,
            };
        }
        let mean = pairwise_sum(values) / k as f64;
        let stderr = if k > 1 {
            let dev: Vec<f64> = values.iter().map(|x| (x - mean) * (x - mean)).collect();
            (pairwise_sum(&dev) / (k - 1) as f64 / k as f64).sqrt()
        } else {
            0.0
        };
        Self {
            estimate: mean,
            stderr,
            replicates: k,
        }
    }
}

fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub fdr: McEstimate,
    pub power: McEstimate,
    pub fndr: McEstimate,
    pub min_svar_fp: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub setting: SimSetting,
    pub replicates: usize,
    pub seed: u64,
    pub methods: Vec<MethodSummary>,
}

impl SimReport {
    pub fn method(&self, method: Method) -> &MethodSummary {
        self.methods.iter().find(|m| m.method == method).expect("every method is summarized")
    }
}

/// One replicate on stream `(seed, index)`.
pub fn run_replicate(setting: &SimSetting, seed: u64, index: u64) -> Result<Vec<(Method, ReplicateMetrics)>> {
    let mut rng = stream(seed, index);
    let (dataset, truth) = sample_dataset(setting, &mut rng)?;
    let s2 = dataset.s2_values();
    run_methods(&dataset, setting)?
        .into_iter()
        .map(|o| Ok((o.method, compute_metrics(&truth, &s2, &o.pvalues, &o.rejection)?)))
        .collect()
}

/// Runs `replicates` independent replicates on `threads` worker threads
/// (all available cores when `None`) and summarizes each metric.
pub fn monte_carlo(setting: &SimSetting, replicates: usize, seed: u64, threads: Option<usize>) -> Result<SimReport> {
    setting.validate()?;
    if replicates == 0 {
        return Err(Error::Input("at least one replicate is required".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start thread pool: {e}")))?;
    let per_replicate: Vec<Vec<(Method, ReplicateMetrics)>> = pool.install(|| {
        (0..replicates)
            .into_par_iter()
            .map(|r| {
                run_replicate(setting, seed, r as u64).map_err(|e| Error::Replicate {
                    index: r,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()
    })?;

    let methods = Method::ALL
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let rows: Vec<&ReplicateMetrics> = per_replicate.iter().map(|rep| &rep[k].1).collect();
            let pick = |f: fn(&ReplicateMetrics) -> f64| McEstimate::from_values(&rows.iter().map(|m| f(m)).collect::<Vec<_>>());
            let minsvar: Vec<f64> = rows.iter().filter_map(|m| m.min_svar_fp).collect();
            MethodSummary {
                method,
                fdr: pick(|m| m.fdp),
                power: pick(|m| m.power),
                fndr: pick(|m| m.fndr),
                min_svar_fp: McEstimate::from_values(&minsvar),
            }
        })
        .collect();
    Ok(SimReport {
        setting: setting.clone(),
        replicates,
        seed,
        methods,
    })
}

/// Tidy CSV: `setting,method,metric,estimate,stderr,replicates,seed`.
pub fn write_report_csv<W: Write>(writer: W, reports: &[SimReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["setting", "method", "metric", "estimate", "stderr", "replicates", "seed"])?;
    for report in reports {
        for m in &report.methods {
            for (metric, est) in [
                ("fdr", &m.fdr),
                ("power", &m.power),
                ("fndr", &m.fndr),
                ("min_svar_fp", &m.min_svar_fp),
            ] {
                out.write_record([
                    report.setting.name.clone(),
                    m.method.name().to_string(),
                    metric.to_string(),
                    est.estimate.to_string(),
                    est.stderr.to_string(),
                    est.replicates.to_string(),
                    report.seed.to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_report_json<W: Write>(writer: W, reports: &[SimReport]) -> Result<()> {
    serde_json::to_writer_pretty(writer, reports)?;
    Ok(())
}
