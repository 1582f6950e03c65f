// NPMLE, limma and t-test p-values on one simulated dataset whose
// variances follow a two-point law, which the limma prior cannot match.

use partial_bayes::dist::stream;
use partial_bayes::mtp::bh_reject;
use partial_bayes::npmle::fit_npmle;
use partial_bayes::pvalues::{fit_limma, PvalueMethod};
use partial_bayes::simbench::{sample_dataset, SimSetting};
use partial_bayes::Result;

pub fn run_example() -> Result<()> {
    let mut setting = SimSetting::preset("two_point", 4.0)?;
    setting.n = 4000;
    let (data, truth) = sample_dataset(&setting, &mut stream(11, 0))?;

    let fit = fit_npmle(&data, &setting.grid, &setting.solver)?;
    let limma = fit_limma(&data.s2_values(), data.nu())?;
    println!("limma prior: nu0 = {:.3}, s0^2 = {:.3}", limma.nu0(), limma.s0sq());
    println!("npmle prior: {} atoms, KKT gap {:.1e}", fit.prior.len(), fit.kkt_gap);

    for method in [PvalueMethod::Npmle(fit.prior.clone()), PvalueMethod::Limma(limma), PvalueMethod::TTest] {
        let p = method.pvalues(&data)?;
        let r = bh_reject(&p, setting.alpha)?;
        let false_hits = r.rejected.iter().zip(&truth.null_mask).filter(|(r, n)| **r && **n).count();
        println!(
            "{:>6}: {:>4} discoveries, {:>3} false, BH threshold {:.3e}",
            method.name(),
            r.count(),
            false_hits,
            r.threshold
        );
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
