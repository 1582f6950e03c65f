// P-values that are exact conditional on the observed sample variance,
// for a known two-point variance prior, next to the t-test.
//
// The same statistic `z` is far more significant when its sample variance
// says the unit sits in the low-variance component.

use partial_bayes::dist::DegreesOfFreedom;
use partial_bayes::npmle::DiscretePrior;
use partial_bayes::pvalues::{
    conditional_pvalue, conditional_pvalue_integral, ttest_pvalue, tweedie_precision, tweedie_precision_formula,
    MarginalDerivative,
};
use partial_bayes::Result;

pub fn run_example() -> Result<()> {
    let prior = DiscretePrior::two_point(1.0, 10.0, 0.5)?;
    let nu = DegreesOfFreedom::sampling(4.0)?;
    let z = 4.0;

    println!("{:>6} {:>12} {:>12} {:>12}", "s2", "conditional", "integral", "t-test");
    for s2 in [0.3, 1.0, 3.0, 10.0, 30.0] {
        let p = conditional_pvalue(&prior, z, s2, nu)?;
        let q = conditional_pvalue_integral(&prior, z, s2, nu)?;
        assert!((p - q).abs() < 1e-6);
        println!("{s2:>6} {p:>12.3e} {q:>12.3e} {:>12.3e}", ttest_pvalue(z, s2, nu)?);
    }

    // Posterior mean of 1/σ², directly and through the marginal density.
    let s2 = 2.0;
    let direct = tweedie_precision(&prior, s2, nu)?;
    let formula = tweedie_precision_formula(&prior, s2, nu, MarginalDerivative::Analytic)?;
    println!("E[1/sigma2 | s2 = {s2}]: {direct:.10} (direct), {formula:.10} (marginal)");
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
