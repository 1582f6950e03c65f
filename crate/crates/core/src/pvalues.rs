//! P-values for `H_0: μ_i = 0` under the three testing strategies:
//! conditional on `S_i²` under a discrete variance prior, the moderated t
//! of the conjugate (scaled inverse chi-square) prior, and the plain t-test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dist::{digamma, t_survival_unchecked, trigamma, trigamma_inverse, two_sided_normal, DegreesOfFreedom, ScaledChisq};
use crate::error::{Error, Result};
use crate::npmle::DiscretePrior;
use crate::quad;
use crate::summarize::SummaryDataset;

/// `ν₀` written to JSON in place of infinity.
pub const NU0_SERIAL_CAP: f64 = 1e8;

/// Scaled inverse chi-square prior: `1/σ² ~ χ²_{ν₀} / (ν₀ s₀²)`.
/// `nu0 = ∞` is the point mass at `s₀²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimmaPrior {
    nu0: f64,
    s0sq: f64,
}

impl LimmaPrior {
    pub fn new(nu0: f64, s0sq: f64) -> Result<Self> {
        if !(nu0 > 0.0) || !(s0sq > 0.0 && s0sq.is_finite()) {
            return Err(Error::domain(format!(
                "limma prior needs nu0 > 0 and finite s0sq > 0, got ({nu0}, {s0sq})"
            )));
        }
        Ok(Self { nu0, s0sq })
    }

    pub fn point_mass(s0sq: f64) -> Result<Self> {
        Self::new(f64::INFINITY, s0sq)
    }

    pub fn nu0(&self) -> f64 {
        self.nu0
    }

    pub fn s0sq(&self) -> f64 {
        self.s0sq
    }

    pub fn is_point_mass(&self) -> bool {
        self.nu0.is_infinite()
    }

    /// Density of `σ²`: inverse gamma with shape `ν₀/2` and scale `ν₀s₀²/2`.
    /// Zero everywhere for the point-mass limit.
    pub fn density(&self, sigma2: f64) -> f64 {
        if self.is_point_mass() || !(sigma2 > 0.0) {
            return 0.0;
        }
        let a = 0.5 * self.nu0;
        let b = a * self.s0sq;
        (a * b.ln() - ln_gamma(a) - (a + 1.0) * sigma2.ln() - b / sigma2).exp()
    }

    /// Marginal density of `S²` on `ν` degrees of freedom: `S²/s₀²` is
    /// F-distributed with `(ν, ν₀)` degrees of freedom.
    pub fn marginal_density(&self, s2: f64, nu: DegreesOfFreedom) -> f64 {
        if !(s2 > 0.0) {
            return 0.0;
        }
        if self.is_point_mass() {
            return ScaledChisq::new(nu.get()).logpdf(s2, self.s0sq).exp();
        }
        let (d1, d2) = (nu.get(), self.nu0);
        let x = s2 / self.s0sq;
        let ln_beta = ln_gamma(0.5 * d1) + ln_gamma(0.5 * d2) - ln_gamma(0.5 * (d1 + d2));
        let log_f = 0.5 * d1 * (d1 / d2).ln() + (0.5 * d1 - 1.0) * x.ln()
            - 0.5 * (d1 + d2) * (1.0 + d1 * x / d2).ln()
            - ln_beta;
        (log_f - self.s0sq.ln()).exp()
    }

    pub fn record(&self) -> LimmaPriorRecord {
        LimmaPriorRecord {
            nu0: self.nu0.min(NU0_SERIAL_CAP),
            s0sq: self.s0sq,
            nu0_infinite: self.is_point_mass(),
        }
    }
}

/// JSON form of [`LimmaPrior`]; infinite `ν₀` is capped and flagged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LimmaPriorRecord {
    pub nu0: f64,
    pub s0sq: f64,
    pub nu0_infinite: bool,
}

impl TryFrom<LimmaPriorRecord> for LimmaPrior {
    type Error = Error;

    fn try_from(r: LimmaPriorRecord) -> Result<Self> {
        LimmaPrior::new(if r.nu0_infinite { f64::INFINITY } else { r.nu0 }, r.s0sq)
    }
}

/// A known variance prior handed to the oracle.
#[derive(Debug, Clone, PartialEq)]
pub enum OraclePrior {
    Discrete(DiscretePrior),
    Limma(LimmaPrior),
}

#[derive(Debug, Clone, PartialEq)]
pub enum PvalueMethod {
    Npmle(DiscretePrior),
    Limma(LimmaPrior),
    TTest,
    Oracle(OraclePrior),
}

impl PvalueMethod {
    pub fn name(&self) -> &'static str {
        match self {
            PvalueMethod::Npmle(_) => "npmle",
            PvalueMethod::Limma(_) => "limma",
            PvalueMethod::TTest => "ttest",
            PvalueMethod::Oracle(_) => "oracle",
        }
    }

    pub fn pvalue(&self, z: f64, s2: f64, nu: DegreesOfFreedom) -> Result<f64> {
        match self {
            PvalueMethod::Npmle(prior) | PvalueMethod::Oracle(OraclePrior::Discrete(prior)) => {
                conditional_pvalue(prior, z, s2, nu)
            }
            PvalueMethod::Limma(prior) | PvalueMethod::Oracle(OraclePrior::Limma(prior)) => {
                limma_pvalue(prior, z, s2, nu)
            }
            PvalueMethod::TTest => ttest_pvalue(z, s2, nu),
        }
    }

    /// P-values for every pair of a dataset, in input order.
    pub fn pvalues(&self, dataset: &SummaryDataset) -> Result<Vec<f64>> {
        let nu = dataset.nu();
        dataset
            .pairs()
            .par_iter()
            .map(|p| self.pvalue(p.z, p.s2, nu))
            .collect()
    }

    /// A variance scale beyond which no threshold search needs to look.
    fn variance_scale(&self, s2: f64) -> f64 {
        match self {
            PvalueMethod::Npmle(prior) | PvalueMethod::Oracle(OraclePrior::Discrete(prior)) => {
                *prior.support().last().unwrap()
            }
            PvalueMethod::Limma(prior) | PvalueMethod::Oracle(OraclePrior::Limma(prior)) => prior.s0sq.max(s2),
            PvalueMethod::TTest => s2,
        }
    }
}

fn check_inputs(z: f64, s2: f64) -> Result<()> {
    if !z.is_finite() {
        return Err(Error::domain(format!("z must be finite, got {z}")));
    }
    if !(s2 > 0.0 && s2.is_finite()) {
        return Err(Error::domain(format!("s2 must be positive and finite, got {s2}")));
    }
    Ok(())
}

/// `P_G(z, s²) = E_G[2(1 - Φ(|z|/σ)) | S² = s²]` for a discrete prior.
pub fn conditional_pvalue(prior: &DiscretePrior, z: f64, s2: f64, nu: DegreesOfFreedom) -> Result<f64> {
    check_inputs(z, s2)?;
    if z == 0.0 {
        return Ok(1.0);
    }
    let post = prior.posterior(s2, &ScaledChisq::new(nu.get()));
    let p: f64 = post
        .iter()
        .zip(prior.support())
        .map(|(w, &sigma2)| w * two_sided_normal(z / sigma2.sqrt()))
        .sum();
    Ok(p.min(1.0))
}

/// The same p-value through its one-dimensional integral representation,
/// which only involves the marginal densities of `S²` on `ν` and `ν + 1`
/// degrees of freedom:
///
/// `P = C(ν) (s²)^{ν/2-1} / f(s²; ν) · ∫_{|z|}^∞ 2/(ν+1) · x^{-(ν-1)/2} f(x; ν+1) du`
/// with `x = (u² + νs²)/(ν+1)` and
/// `C(ν) = (1+1/ν)^{-ν/2} Γ((ν+1)/2) / (√π (ν+1)^{-1/2} Γ(ν/2))`.
pub fn conditional_pvalue_integral(prior: &DiscretePrior, z: f64, s2: f64, nu: DegreesOfFreedom) -> Result<f64> {
    check_inputs(z, s2)?;
    if z == 0.0 {
        return Ok(1.0);
    }
    let v = nu.get();
    let lower = ScaledChisq::new(v);
    let upper = ScaledChisq::new(v + 1.0);
    let ln_c = -0.5 * v * (1.0 + 1.0 / v).ln() + ln_gamma(0.5 * (v + 1.0))
        - 0.5 * std::f64::consts::PI.ln()
        + 0.5 * (v + 1.0).ln()
        - ln_gamma(0.5 * v);
    let ln_front = ln_c + (0.5 * v - 1.0) * s2.ln() - prior.log_marginal(s2, &lower) + (2.0 / (v + 1.0)).ln();
    let integrand = |u: f64| {
        let x = (u * u + v * s2) / (v + 1.0);
        (ln_front - 0.5 * (v - 1.0) * x.ln() + prior.log_marginal(x, &upper)).exp()
    };
    // Integrate in units of the posterior standard deviation of the mean.
    let post = prior.posterior(s2, &lower);
    let scale = post
        .iter()
        .zip(prior.support())
        .map(|(w, s)| w * s.sqrt())
        .sum::<f64>()
        .max(f64::MIN_POSITIVE);
    let a = z.abs();
    let est = quad::integrate_to_infinity(|t| scale * integrand(a + scale * t), 0.0, 1e-11, 1e-10)?;
    Ok(est.value.clamp(0.0, 1.0))
}

/// Method-of-moments fit of the scaled inverse chi-square prior on the
/// log sample variances.
pub fn fit_limma(s2_values: &[f64], nu: DegreesOfFreedom) -> Result<LimmaPrior> {
    if s2_values.len() < 2 {
        return Err(Error::Input(format!(
            "the moment fit needs at least 2 sample variances, got {}",
            s2_values.len()
        )));
    }
    if s2_values.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::domain("sample variances must be positive and finite"));
    }
    let half = 0.5 * nu.get();
    let n = s2_values.len() as f64;
    let logs: Vec<f64> = s2_values.iter().map(|s| s.ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / n;
    let var_log = logs.iter().map(|l| (l - mean_log).powi(2)).sum::<f64>() / (n - 1.0);
    // E[ln S²] = ln σ² + ψ(ν/2) - ln(ν/2), Var[ln S² | σ²] = ψ'(ν/2).
    let mean_e = mean_log - digamma(half)? + half.ln();
    let excess = var_log - trigamma(half)?;
    if excess > 0.0 {
        let half_nu0 = trigamma_inverse(excess)?;
        let s0sq = (mean_e + digamma(half_nu0)? - half_nu0.ln()).exp();
        LimmaPrior::new(2.0 * half_nu0, s0sq)
    } else {
        LimmaPrior::point_mass(mean_e.exp())
    }
}

/// Moderated-t p-value: `2 F̄_{t, ν₀+ν}(|z|/s̃)` with
/// `s̃² = (ν₀s₀² + νs²)/(ν₀ + ν)`; a z-test against `s₀` when `ν₀ = ∞`.
pub fn limma_pvalue(prior: &LimmaPrior, z: f64, s2: f64, nu: DegreesOfFreedom) -> Result<f64> {
    check_inputs(z, s2)?;
    if z == 0.0 {
        return Ok(1.0);
    }
    if prior.is_point_mass() {
        return Ok(two_sided_normal(z / prior.s0sq.sqrt()));
    }
    let v = nu.get();
    let df = prior.nu0 + v;
    let s_tilde2 = (prior.nu0 * prior.s0sq + v * s2) / df;
    Ok((2.0 * t_survival_unchecked(z.abs() / s_tilde2.sqrt(), df)).min(1.0))
}

/// Two-sided t-test p-value `2 F̄_{t,ν}(|z|/s)`.
pub fn ttest_pvalue(z: f64, s2: f64, nu: DegreesOfFreedom) -> Result<f64> {
    check_inputs(z, s2)?;
    if z == 0.0 {
        return Ok(1.0);
    }
    Ok((2.0 * t_survival_unchecked(z.abs() / s2.sqrt(), nu.get())).min(1.0))
}

/// P-values of every pair under a discrete prior, in input order.
pub fn conditional_pvalues(prior: &DiscretePrior, dataset: &SummaryDataset) -> Result<Vec<f64>> {
    PvalueMethod::Npmle(prior.clone()).pvalues(dataset)
}

/// Posterior mean of `1/σ²` given `S² = s²`, from the posterior over atoms.
pub fn tweedie_precision(prior: &DiscretePrior, s2: f64, nu: DegreesOfFreedom) -> Result<f64> {
    check_inputs(0.0, s2)?;
    let post = prior.posterior(s2, &ScaledChisq::new(nu.get()));
    Ok(post.iter().zip(prior.support()).map(|(w, s)| w / s).sum())
}

/// How the marginal-density derivative is obtained in the Tweedie formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MarginalDerivative {
    Analytic,
    /// Central difference with step `1e-6 · s²`.
    FiniteDifference,
}

/// Posterior mean of `1/σ²` through the marginal density alone:
/// `(ν-2)/(ν s²) - (2/ν) f'(s²)/f(s²)`.
pub fn tweedie_precision_formula(
    prior: &DiscretePrior,
    s2: f64,
    nu: DegreesOfFreedom,
    derivative: MarginalDerivative,
) -> Result<f64> {
    check_inputs(0.0, s2)?;
    let v = nu.get();
    let chisq = ScaledChisq::new(v);
    let score = match derivative {
        MarginalDerivative::Analytic => {
            // d/ds² ln p(s² | σ²) = (ν/2 - 1)/s² - ν/(2σ²), averaged under
            // the weights w_j p_j / f.
            let post = prior.posterior(s2, &chisq);
            post.iter()
                .zip(prior.support())
                .map(|(w, &sigma2)| w * ((0.5 * v - 1.0) / s2 - 0.5 * v / sigma2))
                .sum::<f64>()
        }
        MarginalDerivative::FiniteDifference => {
            let h = 1e-6 * s2;
            let centre = prior.log_marginal(s2, &chisq);
            let up = (prior.log_marginal(s2 + h, &chisq) - centre).exp();
            let down = (prior.log_marginal(s2 - h, &chisq) - centre).exp();
            (up - down) / (2.0 * h)
        }
    };
    Ok((v - 2.0) / (v * s2) - 2.0 / v * score)
}

/// For each `s²`, the smallest `z ≥ 0` whose p-value is at most
/// `p_threshold`; `+∞` when no such `z` exists within `10³` standard
/// deviations of the largest relevant variance.
pub fn rejection_threshold_curve(
    method: &PvalueMethod,
    p_threshold: f64,
    s2_grid: &[f64],
    nu: DegreesOfFreedom,
) -> Result<Vec<f64>> {
    if !(p_threshold > 0.0 && p_threshold < 1.0) {
        return Err(Error::domain(format!("p threshold must lie in (0,1), got {p_threshold}")));
    }
    s2_grid
        .par_iter()
        .map(|&s2| {
            let p = |z: f64| method.pvalue(z, s2, nu);
            let cap = 1e3 * method.variance_scale(s2).sqrt();
            let mut hi = 1.0;
            while p(hi)? > p_threshold {
                if hi > cap {
                    return Ok(f64::INFINITY);
                }
                hi *= 2.0;
            }
            let mut lo = if hi == 1.0 { 0.0 } else { 0.5 * hi };
            while hi - lo > 1e-8 * hi.max(1.0) {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if p(mid)? <= p_threshold {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            Ok(hi)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{sample, std_normal_quantile, stream, Law};
    use approx::assert_relative_eq;
    use rand::Rng;

    fn nu(v: f64) -> DegreesOfFreedom {
        DegreesOfFreedom::sampling(v).unwrap()
    }

    #[test]
    fn point_mass_reduces_to_z_test() {
        let prior = DiscretePrior::point_mass(1.0).unwrap();
        for s2 in [1e-3, 0.5, 1.0, 40.0] {
            let p = conditional_pvalue(&prior, 1.959964, s2, nu(3.0)).unwrap();
            assert!((p - 0.05).abs() < 1e-6, "p={p}");
        }
        let p = conditional_pvalue_integral(&prior, 2.0, 1.0, nu(2.0)).unwrap();
        assert!((p - two_sided_normal(2.0)).abs() < 1e-8, "p={p}");
        assert_eq!(conditional_pvalue(&prior, 0.0, 2.0, nu(2.0)).unwrap(), 1.0);
        assert_eq!(conditional_pvalue_integral(&prior, 0.0, 2.0, nu(2.0)).unwrap(), 1.0);
        assert!(conditional_pvalue(&prior, 1.0, 0.0, nu(2.0)).is_err());
    }

    #[test]
    fn larger_sample_variance_gives_larger_pvalue() {
        let prior = DiscretePrior::two_point(1.0, 10.0, 0.5).unwrap();
        let small = conditional_pvalue(&prior, 2.5, 0.5, nu(4.0)).unwrap();
        let large = conditional_pvalue(&prior, 2.5, 5.0, nu(4.0)).unwrap();
        assert!(small <= large);
    }

    #[test]
    fn integral_form_matches_mixture_form() {
        let mut rng = stream(3, 0);
        for _ in 0..40 {
            let atoms: Vec<(f64, f64)> = (0..3).map(|_| (10f64.powf(rng.random_range(-1.5..1.5)), rng.random())).collect();
            let prior = DiscretePrior::from_atoms(atoms).unwrap();
            let v = [2.0, 3.0, 5.0, 12.0][rng.random_range(0..4)];
            let s2 = 10f64.powf(rng.random_range(-1.5..1.5));
            let z = rng.random_range(-8.0..8.0);
            let a = conditional_pvalue(&prior, z, s2, nu(v)).unwrap();
            let b = conditional_pvalue_integral(&prior, z, s2, nu(v)).unwrap();
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        let prior = DiscretePrior::point_mass(1.0).unwrap();
        assert!(conditional_pvalue_integral(&prior, 40.0, 1.0, nu(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn limma_fit_recovers_parameters() {
        let mut rng = stream(11, 0);
        let s2: Vec<f64> = (0..100_000)
            .map(|_| {
                let sigma2 = sample(&mut rng, Law::ScaledInvChiSquared { nu0: 6.0, s0sq: 1.0 }).unwrap();
                sigma2 * sample(&mut rng, Law::ChiSquared { nu: 4.0 }).unwrap() / 4.0
            })
            .collect();
        let fit = fit_limma(&s2, nu(4.0)).unwrap();
        assert!((fit.nu0() - 6.0).abs() < 0.3, "nu0={}", fit.nu0());
        assert!((fit.s0sq() - 1.0).abs() < 0.03, "s0sq={}", fit.s0sq());
    }

    #[test]
    fn limma_fit_equal_variances_is_point_mass() {
        let fit = fit_limma(&[0.3; 10], nu(4.0)).unwrap();
        assert!(fit.is_point_mass());
        // exp(ln s² - ψ(ν/2) + ln(ν/2)) at ν = 4: ψ(2) = 1 - γ.
        let expected = 0.3 * (2f64.ln() - (1.0 - 0.577_215_664_901_532_9)).exp();
        assert_relative_eq!(fit.s0sq(), expected, max_relative = 1e-12);
        assert!(fit_limma(&[1.0], nu(4.0)).is_err());
        let rec = fit.record();
        assert_eq!(rec.nu0, NU0_SERIAL_CAP);
        assert!(rec.nu0_infinite);
        assert_eq!(LimmaPrior::try_from(rec).unwrap(), fit);
    }

    #[test]
    fn limma_limits() {
        for (z, s2) in [(0.5, 0.2), (2.0, 1.0), (3.0, 4.0)] {
            let big = limma_pvalue(&LimmaPrior::new(1e8, 1.5).unwrap(), z, s2, nu(4.0)).unwrap();
            let inf = limma_pvalue(&LimmaPrior::point_mass(1.5).unwrap(), z, s2, nu(4.0)).unwrap();
            assert!((big - two_sided_normal(z / 1.5f64.sqrt())).abs() < 1e-4);
            assert!((inf - two_sided_normal(z / 1.5f64.sqrt())).abs() < 1e-15);
            let tiny = limma_pvalue(&LimmaPrior::new(1e-8, 1.5).unwrap(), z, s2, nu(4.0)).unwrap();
            assert!((tiny - ttest_pvalue(z, s2, nu(4.0)).unwrap()).abs() < 1e-4);
        }
    }

    #[test]
    fn limma_marginal_integrates_to_one() {
        let prior = LimmaPrior::new(5.0, 0.7).unwrap();
        let total = quad::integrate_to_infinity(|x| prior.marginal_density(x, nu(4.0)), 0.0, 1e-12, 1e-10).unwrap();
        assert!((total.value - 1.0).abs() < 1e-8);
        let mass = quad::integrate_to_infinity(|x| prior.density(x), 0.0, 1e-12, 1e-10).unwrap();
        assert!((mass.value - 1.0).abs() < 1e-8);
    }

    #[test]
    fn ttest_reference_values() {
        assert_eq!(ttest_pvalue(0.0, 1.0, nu(2.0)).unwrap(), 1.0);
        let p = ttest_pvalue(2f64.sqrt(), 1.0, nu(2.0)).unwrap();
        assert!((p - 2.0 * (0.5 - 2f64.sqrt() / 4.0)).abs() < 1e-12);
    }

    #[test]
    fn tweedie_point_mass_and_identity() {
        let prior = DiscretePrior::point_mass(2.5).unwrap();
        assert_relative_eq!(tweedie_precision(&prior, 0.7, nu(4.0)).unwrap(), 0.4, max_relative = 1e-15);
        let f = tweedie_precision_formula(&prior, 0.7, nu(4.0), MarginalDerivative::Analytic).unwrap();
        assert_relative_eq!(f, 0.4, max_relative = 1e-12);
        let prior = DiscretePrior::two_point(0.3, 4.0, 0.4).unwrap();
        for s2 in [0.1, 1.0, 6.0] {
            let direct = tweedie_precision(&prior, s2, nu(5.0)).unwrap();
            let fd = tweedie_precision_formula(&prior, s2, nu(5.0), MarginalDerivative::FiniteDifference).unwrap();
            assert!(((fd - direct) / direct).abs() < 1e-4);
        }
    }

    #[test]
    fn threshold_curves() {
        let t = rejection_threshold_curve(&PvalueMethod::TTest, 0.05, &[0.25, 1.0, 9.0], nu(4.0)).unwrap();
        for (thr, s) in t.iter().zip([0.5, 1.0, 3.0]) {
            assert!((thr - 2.776_445_105_197_8 * s).abs() < 1e-6, "{thr}");
        }
        let dirac = PvalueMethod::Npmle(DiscretePrior::point_mass(1.0).unwrap());
        let z = std_normal_quantile(0.975).unwrap();
        for thr in rejection_threshold_curve(&dirac, 0.05, &[0.01, 1.0, 100.0], nu(4.0)).unwrap() {
            assert!((thr - z).abs() < 1e-7);
        }
        let mix = PvalueMethod::Npmle(DiscretePrior::two_point(0.5, 8.0, 0.5).unwrap());
        let grid: Vec<f64> = (0..40).map(|i| 10f64.powf(-2.0 + 0.1 * i as f64)).collect();
        let curve = rejection_threshold_curve(&mix, 0.01, &grid, nu(3.0)).unwrap();
        for w in curve.windows(2) {
            assert!(w[1] >= w[0] - 1e-7);
        }
    }
}
