// Benjamini-Hochberg rejections, adjusted p-values and Storey's
// null-proportion-adaptive variant.

use partial_bayes::mtp::{bh_adjust, bh_reject, storey_pi0, storey_reject};
use partial_bayes::Result;

pub fn run_example() -> Result<()> {
    let p = [0.001, 0.008, 0.039, 0.041, 0.042, 0.06, 0.074, 0.205, 0.212, 0.216, 0.6, 0.9];
    let alpha = 0.05;

    let bh = bh_reject(&p, alpha)?;
    let adj = bh_adjust(&p)?;
    println!("BH at {alpha}: k* = {}, threshold {}", bh.k_star, bh.threshold);
    for ((pi, ai), ri) in p.iter().zip(&adj).zip(&bh.rejected) {
        println!("  p {pi:<6} adjusted {ai:<8.4} rejected {ri}");
    }

    let pi0 = storey_pi0(&p, 0.5)?;
    let storey = storey_reject(&p, alpha, 0.5)?;
    println!("Storey: pi0 = {pi0:.3}, {} rejections", storey.count());
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
