//! The `pbayes` command line: `test`, `diagnose`, `simulate` and
//! `summarize`.
//!
//! Every output file is staged next to its destination and renamed into
//! place only once all outputs of a command have been written, so a failed
//! run leaves no partial files behind.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;
use sha2::{Digest, Sha256};
use tempfile::NamedTempFile;

use crate::error::{Error, Result};
use crate::mtp::{bh_adjust, bh_reject, RejectionResult};
use crate::npmle::{
    build_grid, fit_npmle, marginal_density, Algorithm, GridConfig, NpmleFit, NpmleFitRecord, SolverConfig,
    KKT_CERTIFICATE,
};
use crate::pvalues::{fit_limma, rejection_threshold_curve, LimmaPrior, LimmaPriorRecord, PvalueMethod};
use crate::simbench::{monte_carlo, write_report_csv, SimReport, SimSetting};
use crate::summarize::{parse_contrast, read_matrix, read_pairs_with_df, write_pairs_with_df, SummaryDataset};

#[derive(Debug, Parser, Serialize)]
#[command(name = "pbayes", version, about = "Empirical partially Bayes multiple testing")]
pub struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Test every unit of a pairs file and apply BH.
    Test(TestArgs),
    /// Write plot-ready tables of the fitted priors and rejection regions.
    Diagnose(DiagnoseArgs),
    /// Run the Monte-Carlo benchmark.
    Simulate(SimulateArgs),
    /// Turn a replicate matrix and design into a pairs file.
    Summarize(SummarizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    Npmle,
    Limma,
    Ttest,
    All,
}

impl MethodChoice {
    fn expand(self) -> Vec<MethodChoice> {
        match self {
            MethodChoice::All => vec![MethodChoice::Npmle, MethodChoice::Limma, MethodChoice::Ttest],
            m => vec![m],
        }
    }

    fn name(self) -> &'static str {
        match self {
            MethodChoice::Npmle => "npmle",
            MethodChoice::Limma => "limma",
            MethodChoice::Ttest => "ttest",
            MethodChoice::All => "all",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverChoice {
    Newton,
    Em,
}

/// NPMLE settings shared by `test` and `diagnose`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    /// Number of log-spaced support points.
    #[arg(long, default_value_t = 300)]
    pub grid_size: usize,
    /// Lower support end as a quantile of the sample variances, or `min`.
    #[arg(long, default_value = "0.01", value_parser = parse_quantile)]
    pub lower_quantile: f64,
    #[arg(long, value_enum, default_value_t = SolverChoice::Newton)]
    pub solver: SolverChoice,
    /// KKT gap at which the solver stops.
    #[arg(long, default_value_t = 1e-7)]
    pub kkt_tol: f64,
    #[arg(long, default_value_t = 50_000)]
    pub max_iter: usize,
    /// Exit with status 3 when the fit misses the KKT certificate.
    #[arg(long)]
    pub strict: bool,
}

impl FitArgs {
    fn grid(&self) -> GridConfig {
        GridConfig {
            grid_size: self.grid_size,
            lower_quantile: self.lower_quantile,
            explicit_bounds: None,
        }
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig {
            algorithm: match self.solver {
                SolverChoice::Newton => Algorithm::ConstrainedNewton,
                SolverChoice::Em => Algorithm::Em,
            },
            kkt_tol: self.kkt_tol,
            max_iter: self.max_iter,
            ..SolverConfig::default()
        }
    }

    fn fit(&self, dataset: &SummaryDataset) -> Result<NpmleFit> {
        let fit = fit_npmle(dataset, &self.grid(), &self.solver())?;
        info!(
            "npmle: {} atoms, log-likelihood {}, KKT gap {:e}, {} iterations",
            fit.prior.len(),
            fit.log_likelihood,
            fit.kkt_gap,
            fit.iterations
        );
        if fit.kkt_gap > KKT_CERTIFICATE {
            let msg = format!("NPMLE KKT gap {:e} exceeds {KKT_CERTIFICATE:e}", fit.kkt_gap);
            if self.strict {
                return Err(Error::Numerical(msg));
            }
            warn!("{msg}");
        }
        Ok(fit)
    }
}

fn parse_quantile(s: &str) -> std::result::Result<f64, String> {
    if s == "min" {
        return Ok(0.0);
    }
    match s.parse::<f64>() {
        Ok(q) if (0.0..1.0).contains(&q) => Ok(q),
        _ => Err(format!("expected `min` or a number in [0,1), got {s:?}")),
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TestArgs {
    /// Pairs CSV with header `id,z,s2`.
    pub input: PathBuf,
    /// Degrees of freedom of the sample variances; overrides a `# df=` line.
    #[arg(long)]
    pub df: Option<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    #[arg(long, value_enum, default_value_t = MethodChoice::All)]
    pub method: MethodChoice,
    #[command(flatten)]
    pub fit: FitArgs,
    /// Results CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Fit sidecar JSON; defaults to the results path with a `.json` extension.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DiagnoseArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub df: Option<f64>,
    /// Level of the BH procedure whose realized threshold is drawn.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Histogram bins of the sample variances.
    #[arg(long, default_value_t = 40)]
    pub bins: usize,
    /// Space the histogram bins evenly on the log scale.
    #[arg(long)]
    pub log_bins: bool,
    /// Points of the sample-variance grid for threshold curves and prior densities.
    #[arg(long, default_value_t = 200)]
    pub s2_grid: usize,
    /// Unadjusted p-value threshold for the first set of curves.
    #[arg(long, default_value_t = 0.05)]
    pub p_threshold: f64,
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("setting").required(true).args(["setting_file", "preset"])))]
pub struct SimulateArgs {
    /// JSON file holding one setting or an array of settings.
    #[arg(long)]
    pub setting_file: Option<PathBuf>,
    /// Named setting: dirac, scaled_inv_chisq, two_point or two_point_adversarial.
    #[arg(long, requires = "nu")]
    pub preset: Option<String>,
    /// Degrees of freedom for a preset; comma-separated values give one setting each.
    #[arg(long, value_delimiter = ',')]
    pub nu: Vec<f64>,
    /// Hypotheses per replicate (preset only).
    #[arg(long)]
    pub n: Option<usize>,
    /// Nominal FDR level (preset only).
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 200)]
    pub replicates: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads; all cores when omitted. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output stem; `<stem>.json` and `<stem>.csv` are written.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SummarizeArgs {
    /// Replicate matrix CSV `id,y1,...,yK`.
    pub matrix: PathBuf,
    /// Design CSV, one row per sample.
    #[arg(long)]
    pub design: PathBuf,
    /// Contrast coefficients, comma-separated.
    #[arg(long, allow_hyphen_values = true)]
    pub contrast: String,
    /// Pairs CSV to write.
    #[arg(long)]
    pub out: PathBuf,
}

/// Exit status for an error: 2 input, 3 numerical, 4 I/O.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) => 4,
        Error::Csv(e) if e.is_io_error() => 4,
        Error::Json(e) if e.is_io() => 4,
        Error::Numerical(_) | Error::Quadrature(_) => 3,
        Error::Replicate { source, .. } => exit_code(source),
        _ => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit status. Human-readable results go to `out`.
pub fn run<I, T, W>(args: I, out: &mut W) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    W: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match execute(&cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute<W: Write>(cli: &Cli, out: &mut W) -> Result<()> {
    match &cli.command {
        Command::Test(args) => cmd_test(cli, args, out),
        Command::Diagnose(args) => cmd_diagnose(cli, args, out),
        Command::Simulate(args) => cmd_simulate(cli, args, out),
        Command::Summarize(args) => cmd_summarize(cli, args, out),
    }
}

/// Reproducibility record embedded in every JSON output.
#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a Command,
    inputs: Vec<InputDigest>,
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct InputDigest {
    path: PathBuf,
    sha256: String,
}

impl<'a> Manifest<'a> {
    fn new(cli: &'a Cli, inputs: &[&Path], seed: Option<u64>) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.to_path_buf(),
                    sha256: hex::encode(Sha256::digest(fs::read(p)?)),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tool: "pbayes",
            version: env!("CARGO_PKG_VERSION"),
            command: &cli.command,
            inputs,
            seed,
        })
    }
}

/// Output files written to temporaries first and renamed together.
struct Staged(Vec<(NamedTempFile, PathBuf)>);

impl Staged {
    fn new() -> Self {
        Staged(Vec::new())
    }

    fn write(&mut self, path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = NamedTempFile::new_in(dir)?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            fill(&mut w)?;
            w.flush()?;
        }
        self.0.push((tmp, path.to_path_buf()));
        Ok(())
    }

    fn json<T: Serialize>(&mut self, path: &Path, value: &T) -> Result<()> {
        self.write(path, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)?;
            Ok(())
        })
    }

    fn commit(self) -> Result<()> {
        for (tmp, path) in self.0 {
            tmp.persist(&path).map_err(|e| Error::Io(e.error))?;
        }
        Ok(())
    }
}

/// BH outcome of one method, as recorded in the sidecar.
#[derive(Debug, Serialize)]
struct MethodRecord {
    method: &'static str,
    alpha: f64,
    discoveries: usize,
    k_star: usize,
    /// Realized BH p-value cutoff, zero without discoveries.
    bh_threshold: f64,
}

#[derive(Debug, Serialize)]
struct TestSidecar<'a> {
    manifest: Manifest<'a>,
    n: usize,
    nu: f64,
    npmle: NpmleFitRecord,
    limma: LimmaPriorRecord,
    methods: Vec<MethodRecord>,
}

struct Fitted {
    npmle: NpmleFit,
    limma: LimmaPrior,
}

impl Fitted {
    fn new(dataset: &SummaryDataset, fit: &FitArgs) -> Result<Self> {
        let npmle = fit.fit(dataset)?;
        let limma = fit_limma(&dataset.s2_values(), dataset.nu())?;
        info!("limma: nu0 {}, s0^2 {}", limma.nu0(), limma.s0sq());
        Ok(Self { npmle, limma })
    }

    fn method(&self, choice: MethodChoice) -> PvalueMethod {
        match choice {
            MethodChoice::Npmle => PvalueMethod::Npmle(self.npmle.prior.clone()),
            MethodChoice::Limma => PvalueMethod::Limma(self.limma),
            MethodChoice::Ttest | MethodChoice::All => PvalueMethod::TTest,
        }
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("--alpha must lie in (0,1), got {alpha}")))
    }
}

fn cmd_test<W: Write>(cli: &Cli, args: &TestArgs, out: &mut W) -> Result<()> {
    check_alpha(args.alpha)?;
    let dataset = read_pairs_with_df(&args.input, args.df)?;
    let fitted = Fitted::new(&dataset, &args.fit)?;
    let all = [MethodChoice::Npmle, MethodChoice::Limma, MethodChoice::Ttest];
    let pvalues: Vec<Vec<f64>> = all
        .iter()
        .map(|&m| fitted.method(m).pvalues(&dataset))
        .collect::<Result<_>>()?;

    let selected = args.method.expand();
    let mut adjusted = Vec::new();
    let mut rejections: Vec<RejectionResult> = Vec::new();
    for &m in &selected {
        let p = &pvalues[all.iter().position(|&a| a == m).unwrap()];
        adjusted.push(bh_adjust(p)?);
        rejections.push(bh_reject(p, args.alpha)?);
    }

    let mut staged = Staged::new();
    staged.write(&args.out, |w| {
        let mut csv = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["id", "z", "s2", "p_npmle", "p_limma", "p_ttest"].map(String::from).to_vec();
        for &m in &selected {
            header.push(format!("adj_p_{}", m.name()));
        }
        for &m in &selected {
            header.push(format!("rejected_{}", m.name()));
        }
        csv.write_record(&header)?;
        for (i, pair) in dataset.pairs().iter().enumerate() {
            let mut row = vec![pair.id.clone(), pair.z.to_string(), pair.s2.to_string()];
            row.extend(pvalues.iter().map(|p| p[i].to_string()));
            row.extend(adjusted.iter().map(|a| a[i].to_string()));
            row.extend(rejections.iter().map(|r| r.rejected[i].to_string()));
            csv.write_record(&row)?;
        }
        csv.flush()?;
        Ok(())
    })?;
    let methods: Vec<MethodRecord> = selected
        .iter()
        .zip(&rejections)
        .map(|(&m, r)| MethodRecord {
            method: m.name(),
            alpha: args.alpha,
            discoveries: r.count(),
            k_star: r.k_star,
            bh_threshold: r.threshold,
        })
        .collect();
    let sidecar = TestSidecar {
        manifest: Manifest::new(cli, &[&args.input], None)?,
        n: dataset.len(),
        nu: dataset.nu().get(),
        npmle: fitted.npmle.record(),
        limma: fitted.limma.record(),
        methods,
    };
    let sidecar_path = args.sidecar.clone().unwrap_or_else(|| args.out.with_extension("json"));
    staged.json(&sidecar_path, &sidecar)?;
    staged.commit()?;

    for m in &sidecar.methods {
        writeln!(
            out,
            "{}: {} discoveries at alpha {} (BH p-value threshold {:e})",
            m.method, m.discoveries, m.alpha, m.bh_threshold
        )?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct DiagnoseSidecar<'a> {
    manifest: Manifest<'a>,
    n: usize,
    nu: f64,
    npmle: NpmleFitRecord,
    limma: LimmaPriorRecord,
    methods: Vec<MethodRecord>,
}

fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 || lo == hi {
        return vec![lo];
    }
    let step = (hi / lo).ln() / (points - 1) as f64;
    (0..points).map(|k| lo * (step * k as f64).exp()).collect()
}

fn cmd_diagnose<W: Write>(cli: &Cli, args: &DiagnoseArgs, out: &mut W) -> Result<()> {
    check_alpha(args.alpha)?;
    if args.bins == 0 || args.s2_grid == 0 {
        return Err(Error::Input("--bins and --s2-grid must be positive".into()));
    }
    let dataset = read_pairs_with_df(&args.input, args.df)?;
    let nu = dataset.nu();
    let s2 = dataset.s2_values();
    let fitted = Fitted::new(&dataset, &args.fit)?;
    let n = dataset.len();
    let (lo, hi) = s2
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));

    // Histogram of S² against both fitted marginal densities.
    let edges: Vec<f64> = if args.log_bins {
        log_grid(lo, hi, args.bins + 1)
    } else {
        (0..=args.bins).map(|k| lo + (hi - lo) * k as f64 / args.bins as f64).collect()
    };
    let mut counts = vec![0usize; args.bins];
    for &v in &s2 {
        let k = edges[1..].partition_point(|&e| e < v).min(args.bins - 1);
        counts[k] += 1;
    }

    let chosen = [MethodChoice::Npmle, MethodChoice::Limma, MethodChoice::Ttest];
    let methods: Vec<PvalueMethod> = chosen.iter().map(|&m| fitted.method(m)).collect();
    let mut records = Vec::new();
    let mut bh_levels = Vec::new();
    for (&m, method) in chosen.iter().zip(&methods) {
        let r = bh_reject(&method.pvalues(&dataset)?, args.alpha)?;
        // Without discoveries the most stringent step, α/n, is shown.
        bh_levels.push(if r.k_star == 0 { args.alpha / n as f64 } else { r.threshold });
        records.push(MethodRecord {
            method: m.name(),
            alpha: args.alpha,
            discoveries: r.count(),
            k_star: r.k_star,
            bh_threshold: r.threshold,
        });
    }
    let s2_grid = log_grid(lo, hi, args.s2_grid);
    let mut curves = Vec::new();
    for ((&m, method), &bh) in chosen.iter().zip(&methods).zip(&bh_levels) {
        for (level, p) in [("unadjusted", args.p_threshold), ("bh", bh)] {
            curves.push((m.name(), level, p, rejection_threshold_curve(method, p, &s2_grid, nu)?));
        }
    }

    fs::create_dir_all(&args.out_dir)?;
    let dir = &args.out_dir;
    let mut staged = Staged::new();
    staged.write(&dir.join("histogram.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["bin_lower", "bin_upper", "midpoint", "count", "density", "f_npmle", "f_limma"])?;
        for (k, &c) in counts.iter().enumerate() {
            let (a, b) = (edges[k], edges[k + 1]);
            let mid = 0.5 * (a + b);
            let width = b - a;
            let density = if width > 0.0 { c as f64 / (n as f64 * width) } else { f64::NAN };
            csv.write_record([
                a.to_string(),
                b.to_string(),
                mid.to_string(),
                c.to_string(),
                density.to_string(),
                marginal_density(&fitted.npmle.prior, mid, nu)?.to_string(),
                fitted.limma.marginal_density(mid, nu).to_string(),
            ])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    staged.write(&dir.join("prior_atoms.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["sigma2", "weight"])?;
        let prior = &fitted.npmle.prior;
        for (s, p) in prior.support().iter().zip(prior.weights()) {
            csv.write_record([s.to_string(), p.to_string()])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    staged.write(&dir.join("limma_prior_density.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["sigma2", "density"])?;
        let grid = build_grid(&s2, &args.fit.grid())?;
        for sigma2 in log_grid(grid[0], *grid.last().unwrap(), args.s2_grid) {
            csv.write_record([sigma2.to_string(), fitted.limma.density(sigma2).to_string()])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    staged.write(&dir.join("thresholds.csv"), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["method", "level", "p_threshold", "s2", "z_threshold"])?;
        for (method, level, p, zs) in &curves {
            for (s, z) in s2_grid.iter().zip(zs) {
                csv.write_record([method.to_string(), level.to_string(), p.to_string(), s.to_string(), z.to_string()])?;
            }
        }
        csv.flush()?;
        Ok(())
    })?;
    let sidecar = DiagnoseSidecar {
        manifest: Manifest::new(cli, &[&args.input], None)?,
        n,
        nu: nu.get(),
        npmle: fitted.npmle.record(),
        limma: fitted.limma.record(),
        methods: records,
    };
    staged.json(&dir.join("diagnose.json"), &sidecar)?;
    staged.commit()?;
    writeln!(out, "wrote diagnostics for {n} units to {}", dir.display())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimulateOutput<'a> {
    manifest: Manifest<'a>,
    reports: &'a [SimReport],
}

fn simulate_settings(args: &SimulateArgs) -> Result<Vec<SimSetting>> {
    if let Some(path) = &args.setting_file {
        let text = fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let settings: Vec<SimSetting> = if value.is_array() {
            serde_json::from_value(value)?
        } else {
            vec![serde_json::from_value(value)?]
        };
        for s in &settings {
            s.validate()?;
        }
        return Ok(settings);
    }
    let name = args.preset.as_deref().unwrap_or_default();
    if args.nu.is_empty() {
        return Err(Error::Input("--preset needs at least one --nu".into()));
    }
    args.nu
        .iter()
        .map(|&nu| {
            let mut s = SimSetting::preset(name, nu)?;
            if let Some(n) = args.n {
                s.n = n;
            }
            if let Some(alpha) = args.alpha {
                s.alpha = alpha;
            }
            s.validate()?;
            Ok(s)
        })
        .collect()
}

fn cmd_simulate<W: Write>(cli: &Cli, args: &SimulateArgs, out: &mut W) -> Result<()> {
    let settings = simulate_settings(args)?;
    let mut reports = Vec::with_capacity(settings.len());
    for setting in &settings {
        info!("simulating {} ({} replicates)", setting.name, args.replicates);
        reports.push(monte_carlo(setting, args.replicates, args.seed, args.threads)?);
    }
    let inputs: Vec<&Path> = args.setting_file.iter().map(PathBuf::as_path).collect();
    let output = SimulateOutput {
        manifest: Manifest::new(cli, &inputs, Some(args.seed))?,
        reports: &reports,
    };
    let mut staged = Staged::new();
    staged.json(&args.out.with_extension("json"), &output)?;
    staged.write(&args.out.with_extension("csv"), |w| write_report_csv(w, &reports))?;
    staged.commit()?;
    for report in &reports {
        writeln!(out, "{} ({} replicates)", report.setting.name, report.replicates)?;
        for m in &report.methods {
            writeln!(
                out,
                "  {:<14} FDR {:.4} ± {:.4}  power {:.4}  MinSVarFP {:.3}",
                m.method.name(),
                m.fdr.estimate,
                m.fdr.stderr,
                m.power.estimate,
                m.min_svar_fp.estimate
            )?;
        }
    }
    Ok(())
}

fn cmd_summarize<W: Write>(_cli: &Cli, args: &SummarizeArgs, out: &mut W) -> Result<()> {
    let contrast = parse_contrast(&args.contrast)?;
    let summary = read_matrix(&args.matrix, &args.design, &contrast)?;
    let mut staged = Staged::new();
    staged.write(&args.out, |w| write_pairs_with_df(w, &summary.dataset))?;
    staged.commit()?;
    writeln!(
        out,
        "summarized {} units on {} degrees of freedom; dropped {} with zero residual variance",
        summary.dataset.len(),
        summary.dataset.nu().get(),
        summary.dropped.len()
    )?;
    Ok(())
}

