// Reduce replicate measurements to `(z, s²)` pairs with a least-squares
// contrast, then round-trip them through the pairs CSV format.
//
// ```bash
// cargo run -p partial-bayes --example summarize_contrast
// ```

use std::path::Path;

use nalgebra::DMatrix;
use partial_bayes::summarize::{read_pairs_from, write_pairs, ContrastFit, SummaryDataset, SummaryPair};
use partial_bayes::Result;

pub fn run_example() -> Result<()> {
    // Two groups of three samples; the contrast picks the group effect.
    let design = DMatrix::from_row_slice(6, 2, &[1., 0., 1., 0., 1., 0., 1., 1., 1., 1., 1., 1.]);
    let fit = ContrastFit::new(&design, &[0.0, 1.0])?;

    let units = [
        ("geneA", [4.1, 3.9, 4.3, 6.0, 6.4, 5.8]),
        ("geneB", [2.0, 2.2, 1.7, 2.1, 1.9, 2.3]),
        ("geneC", [7.5, 8.1, 7.0, 7.9, 9.2, 8.4]),
    ];
    let mut pairs = Vec::new();
    for (id, y) in &units {
        let s = fit.summarize(y)?;
        println!("{id}: z = {:+.4}, s2 = {:.5}, df = {}", s.z, s.s2, s.nu);
        pairs.push(SummaryPair::new(*id, s.z, s.s2)?);
    }
    let nu = partial_bayes::dist::DegreesOfFreedom::sampling(fit.df() as f64)?;
    let dataset = SummaryDataset::new(pairs, nu)?;

    let mut csv = Vec::new();
    write_pairs(&mut csv, &dataset)?;
    let back = read_pairs_from(csv.as_slice(), Path::new("<memory>"), nu)?;
    assert_eq!(back, dataset);
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
