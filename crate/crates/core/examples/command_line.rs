// The `pbayes` pipeline driven in-process: write a pairs file, run
// `test`, and read back the results table.

use std::fs;

use partial_bayes::dist::stream;
use partial_bayes::simbench::{sample_dataset, SimSetting};
use partial_bayes::summarize::write_pairs_with_df;
use partial_bayes::{cli, Error, Result};

pub fn run_example() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let mut setting = SimSetting::preset("dirac", 4.0)?;
    setting.n = 2000;
    let (data, _) = sample_dataset(&setting, &mut stream(5, 0))?;
    let input = dir.path().join("pairs.csv");
    write_pairs_with_df(fs::File::create(&input)?, &data)?;

    let results = dir.path().join("results.csv");
    let args = ["pbayes", "test", "--alpha", "0.1", "--out"]
        .map(String::from)
        .into_iter()
        .chain([results.display().to_string(), input.display().to_string()]);
    let mut stdout = Vec::new();
    let code = cli::run(args, &mut stdout);
    if code != 0 {
        return Err(Error::Input(format!("pbayes exited with status {code}")));
    }
    print!("{}", String::from_utf8_lossy(&stdout));
    let table = fs::read_to_string(&results)?;
    println!("{}", table.lines().next().unwrap_or_default());
    println!("sidecar: {} bytes", fs::metadata(results.with_extension("json"))?.len());
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
