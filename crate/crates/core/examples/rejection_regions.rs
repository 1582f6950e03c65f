// Smallest |z| that is rejected at a fixed p-value cutoff, as a function
// of the sample variance, for each method.

use partial_bayes::dist::stream;
use partial_bayes::npmle::fit_npmle;
use partial_bayes::pvalues::{fit_limma, rejection_threshold_curve, PvalueMethod};
use partial_bayes::simbench::{sample_dataset, SimSetting};
use partial_bayes::Result;

pub fn run_example() -> Result<()> {
    let mut setting = SimSetting::preset("scaled_inv_chisq", 4.0)?;
    setting.n = 3000;
    let (data, _) = sample_dataset(&setting, &mut stream(3, 0))?;
    let fit = fit_npmle(&data, &setting.grid, &setting.solver)?;
    let limma = fit_limma(&data.s2_values(), data.nu())?;

    let s2_grid = [0.05, 0.2, 0.5, 1.0, 2.0, 5.0, 20.0];
    let methods = [PvalueMethod::Npmle(fit.prior), PvalueMethod::Limma(limma), PvalueMethod::TTest];
    print!("{:>8}", "s2");
    for m in &methods {
        print!("{:>10}", m.name());
    }
    println!();
    let curves: Vec<Vec<f64>> = methods
        .iter()
        .map(|m| rejection_threshold_curve(m, 1e-3, &s2_grid, data.nu()))
        .collect::<Result<_>>()?;
    for (k, s2) in s2_grid.iter().enumerate() {
        print!("{s2:>8}");
        for c in &curves {
            print!("{:>10.3}", c[k]);
        }
        println!();
    }
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
