//! Command-line front end.
//!
//! Every run echoes its resolved configuration and the crate version in the
//! output header (`# ` comment lines for CSV, `version`/`config` keys for
//! JSON). The thread count and output path are left out of the header since
//! they do not affect results.
//!
//! Exit codes: 0 on success, 1 when a `verify` suite has a failing check,
//! 2 on usage or configuration errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bounds::{bound_table, write_csv, BoundReport, ConstantsUsed, DEFAULT_B};
use crate::disorder::{DisorderLaw, LawKind};
use crate::estimators::{
    coarse_graining_check, estimate_free_energy, estimate_free_energy_with,
    fractional_moment_spot_check, penalization_check, trimmed_moment_check, FreeEnergyEstimate,
    PenalizationPlan, SubadditiveConstants, TrimmedPlan,
};
use crate::kernel::{
    check_eta_defect_report, defect_kk, green_constant, FamilyKind, RenewalKernel,
    SlowlyVaryingFamily, DEFAULT_ETA,
};
use crate::partition::{brute_force_log_z, log_annealed_z, log_z, QuenchedInstance};
use crate::seeding::{derive_seed, replica_rng};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(
    name = "copolymer",
    version,
    about = "Disordered copolymer model: partition functions, estimates and bounds"
)]
struct Cli {
    #[command(flatten)]
    options: Options,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Monte Carlo estimate of the quenched free energy with brackets.
    Estimate,
    /// Exact annealed partition function over an h grid.
    Annealed,
    /// Closed-form bounds over an h grid.
    Bounds,
    /// Run a verification suite and print a JSON report per check.
    Verify {
        #[arg(value_enum)]
        suite: Suite,
    },
    /// Estimates and bounds side by side over an h grid.
    Sweep,
    /// Kernel normalization and defects.
    KernelInfo,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Annealed => "annealed",
            Command::Bounds => "bounds",
            Command::Verify { .. } => "verify",
            Command::Sweep => "sweep",
            Command::KernelInfo => "kernel-info",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Oracle,
    Moments,
    Penalization,
    Coarse,
    All,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

/// Flags, also accepted as keys of the `--config` TOML file. Flags win.
#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct Options {
    /// TOML file with any of the options below.
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// sub-log, log or super-log.
    #[arg(long, global = true)]
    family: Option<String>,
    #[arg(long, global = true)]
    upsilon: Option<f64>,
    #[arg(long = "cl", global = true)]
    cl: Option<f64>,
    /// gaussian or binary.
    #[arg(long, global = true)]
    law: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    h: Option<f64>,
    /// Comma-separated list of h values.
    #[arg(
        long = "h-grid",
        global = true,
        value_delimiter = ',',
        allow_negative_numbers = true
    )]
    h_grid: Option<Vec<f64>>,
    #[arg(long, global = true)]
    n: Option<usize>,
    #[arg(long, global = true)]
    replicas: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Support cap of the tabulated kernel.
    #[arg(long = "n-max", global = true)]
    n_max: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    c4: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    c5: Option<f64>,
}

impl Options {
    fn or(self, file: Options) -> Options {
        Options {
            config: self.config,
            family: self.family.or(file.family),
            upsilon: self.upsilon.or(file.upsilon),
            cl: self.cl.or(file.cl),
            law: self.law.or(file.law),
            beta: self.beta.or(file.beta),
            h: self.h.or(file.h),
            h_grid: self.h_grid.or(file.h_grid),
            n: self.n.or(file.n),
            replicas: self.replicas.or(file.replicas),
            seed: self.seed.or(file.seed),
            threads: self.threads.or(file.threads),
            out: self.out.or(file.out),
            format: self.format.or(file.format),
            n_max: self.n_max.or(file.n_max),
            c4: self.c4.or(file.c4),
            c5: self.c5.or(file.c5),
        }
    }
}

/// Fully resolved run configuration, as echoed in output headers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub suite: Option<Suite>,
    pub family: FamilyKind,
    pub upsilon: f64,
    pub c_l: f64,
    pub law: LawKind,
    pub beta: Option<f64>,
    pub h: Vec<f64>,
    pub n: usize,
    pub replicas: Option<usize>,
    pub seed: u64,
    pub n_max: usize,
    pub format: Format,
    pub c4: Option<f64>,
    pub c5: Option<f64>,
    #[serde(skip)]
    pub threads: Option<usize>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
}

pub const DEFAULT_N: usize = 1000;
pub const DEFAULT_REPLICAS: usize = 64;
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_N_MAX: usize = 1_000_000;

enum Failure {
    Config(String),
    Verify,
}

impl From<crate::Error> for Failure {
    fn from(e: crate::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(format!("i/o error: {e}"))
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(Failure::Verify) => 1,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    let config = resolve(cli.command, cli.options)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads.unwrap_or(0))
        .build()
        .map_err(|e| Failure::Config(format!("threads: {e}")))?;
    let (text, passed) = pool.install(|| dispatch(cli.command, &config))?;
    match &config.out {
        Some(path) => std::fs::write(path, text.as_bytes())?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    if passed {
        Ok(())
    } else {
        Err(Failure::Verify)
    }
}

fn resolve(command: Command, flags: Options) -> Result<RunConfig, Failure> {
    let file = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Failure::Config(format!("config: cannot read {}: {e}", path.display()))
            })?;
            toml::from_str::<Options>(&text)
                .map_err(|e| Failure::Config(format!("config: {}: {e}", path.display())))?
        }
        None => Options::default(),
    };
    let o = flags.or(file);
    let family: FamilyKind = o.family.as_deref().unwrap_or("log").parse()?;
    let law: LawKind = o.law.as_deref().unwrap_or("gaussian").parse()?;
    let upsilon = o.upsilon.unwrap_or(2.0);
    let c_l = o.cl.unwrap_or(1.0);
    SlowlyVaryingFamily::new(family, upsilon, c_l)?;
    if let Some(b) = o.beta {
        if !(b >= 0.0 && b.is_finite()) {
            return Err(Failure::Config(format!(
                "beta must be finite and >= 0, got {b}"
            )));
        }
    }
    let h = match (o.h_grid, o.h) {
        (Some(grid), _) => grid,
        (None, Some(h)) => vec![h],
        (None, None) => Vec::new(),
    };
    if h.iter().any(|x| !x.is_finite()) {
        return Err(Failure::Config("h: values must be finite".into()));
    }
    let n = o.n.unwrap_or(DEFAULT_N);
    let n_max = o.n_max.unwrap_or(DEFAULT_N_MAX);
    if n == 0 {
        return Err(Failure::Config("n must be >= 1".into()));
    }
    if n > n_max {
        return Err(Failure::Config(format!("n = {n} exceeds n-max = {n_max}")));
    }
    if o.c4.is_some() != o.c5.is_some() {
        return Err(Failure::Config("c4 and c5 must be given together".into()));
    }
    if o.threads == Some(0) {
        return Err(Failure::Config("threads must be >= 1".into()));
    }
    Ok(RunConfig {
        command: command.name().to_string(),
        suite: match command {
            Command::Verify { suite } => Some(suite),
            _ => None,
        },
        family,
        upsilon,
        c_l,
        law,
        beta: o.beta,
        h,
        n,
        replicas: o.replicas,
        seed: o.seed.unwrap_or(DEFAULT_SEED),
        n_max,
        format: o.format.unwrap_or_default(),
        c4: o.c4,
        c5: o.c5,
        threads: o.threads,
        out: o.out,
    })
}

impl RunConfig {
    fn family(&self) -> SlowlyVaryingFamily {
        SlowlyVaryingFamily::new(self.family, self.upsilon, self.c_l)
            .expect("validated at resolution")
    }

    fn kernel(&self) -> Result<RenewalKernel, Failure> {
        Ok(RenewalKernel::build(
            self.family(),
            self.n_max.max(RenewalKernel::MIN_SUPPORT),
        )?)
    }

    fn law(&self) -> DisorderLaw {
        DisorderLaw::new(self.law)
    }

    fn beta(&self) -> Result<f64, Failure> {
        self.beta.ok_or_else(|| {
            Failure::Config(
                "missing required parameter `beta` (use --beta or set beta in the config file)"
                    .into(),
            )
        })
    }

    fn h_values(&self) -> Result<&[f64], Failure> {
        if self.h.is_empty() {
            Err(Failure::Config(
                "missing required parameter `h` (use --h or --h-grid)".into(),
            ))
        } else {
            Ok(&self.h)
        }
    }

    /// `h` values, or the given default grid when none were set.
    fn h_or(&self, default: Vec<f64>) -> Vec<f64> {
        if self.h.is_empty() {
            default
        } else {
            self.h.clone()
        }
    }

    fn constants(&self) -> Option<SubadditiveConstants> {
        Some(SubadditiveConstants {
            c4: self.c4?,
            c5: self.c5?,
            empirical: false,
        })
    }
}

fn halving_grid(top: f64, points: i32) -> Vec<f64> {
    (0..points).map(|j| top * 0.5f64.powi(j)).collect()
}

fn descending(mut grid: Vec<f64>) -> Vec<f64> {
    grid.sort_by(|a, b| b.total_cmp(a));
    grid.dedup();
    grid
}

fn dispatch(command: Command, config: &RunConfig) -> Result<(String, bool), Failure> {
    match command {
        Command::Estimate => cmd_estimate(config).map(|t| (t, true)),
        Command::Annealed => cmd_annealed(config).map(|t| (t, true)),
        Command::Bounds => cmd_bounds(config).map(|t| (t, true)),
        Command::Verify { suite } => cmd_verify(config, suite),
        Command::Sweep => cmd_sweep(config).map(|t| (t, true)),
        Command::KernelInfo => cmd_kernel_info(config).map(|t| (t, true)),
    }
}

fn csv_header(config: &RunConfig) -> String {
    format!(
        "# copolymer {VERSION}\n# config {}\n",
        serde_json::to_string(config).expect("config serializes")
    )
}

fn json_document(config: &RunConfig, data: Value) -> String {
    let doc = json!({ "version": VERSION, "config": config, "data": data });
    let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
    s.push('\n');
    s
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn cell(v: f64) -> String {
    v.to_string()
}

fn estimate_at(
    config: &RunConfig,
    kernel: &RenewalKernel,
    beta: f64,
    h: f64,
) -> Result<FreeEnergyEstimate, Failure> {
    let law = config.law();
    let replicas = config.replicas.unwrap_or(DEFAULT_REPLICAS);
    Ok(match config.constants() {
        Some(c) => {
            estimate_free_energy_with(kernel, &law, beta, h, config.n, replicas, config.seed, c)?
        }
        None => estimate_free_energy(kernel, &law, beta, h, config.n, replicas, config.seed)?,
    })
}

pub const ESTIMATE_COLUMNS: [&str; 16] = [
    "family",
    "upsilon",
    "c_L",
    "law",
    "beta",
    "h",
    "n",
    "replicas",
    "mean_log_z_per_site",
    "stderr",
    "lower_bracket",
    "upper_bracket",
    "z",
    "c4",
    "c5",
    "constants_empirical",
];

fn cmd_estimate(config: &RunConfig) -> Result<String, Failure> {
    let beta = config.beta()?;
    let hs = config.h_values()?.to_vec();
    let kernel = config.kernel()?;
    let rows = hs
        .iter()
        .map(|&h| estimate_at(config, &kernel, beta, h))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(match config.format {
        Format::Json => json_document(config, to_value(&rows)),
        Format::Csv => {
            let mut s = csv_header(config);
            writeln!(s, "{}", ESTIMATE_COLUMNS.join(",")).unwrap();
            for e in &rows {
                writeln!(
                    s,
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    config.family,
                    config.upsilon,
                    config.c_l,
                    config.law,
                    e.beta,
                    e.h,
                    e.n,
                    e.replicas,
                    cell(e.mean_log_z_per_site),
                    cell(e.stderr),
                    cell(e.lower_bracket),
                    cell(e.upper_bracket),
                    e.z,
                    e.constants.c4,
                    e.constants.c5,
                    e.constants.empirical
                )
                .unwrap();
            }
            s
        }
    })
}

#[derive(Serialize)]
struct AnnealedRow {
    h: f64,
    n: usize,
    log_annealed_z: f64,
    per_site: f64,
}

fn cmd_annealed(config: &RunConfig) -> Result<String, Failure> {
    let kernel = config.kernel()?;
    let hs = config.h_or(vec![0.0]);
    let rows = hs
        .iter()
        .map(|&h| {
            let v = log_annealed_z(&kernel, config.n, h)?;
            Ok(AnnealedRow {
                h,
                n: config.n,
                log_annealed_z: v,
                per_site: v / config.n as f64,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    Ok(match config.format {
        Format::Json => json_document(config, to_value(&rows)),
        Format::Csv => {
            let mut s = csv_header(config);
            s.push_str("h,n,log_annealed_z,per_site\n");
            for r in &rows {
                writeln!(s, "{},{},{},{}", r.h, r.n, r.log_annealed_z, r.per_site).unwrap();
            }
            s
        }
    })
}

fn cmd_bounds(config: &RunConfig) -> Result<String, Failure> {
    let beta = config.beta()?;
    let family = config.family();
    let grid = descending(config.h_or(halving_grid(0.2, 8)));
    let table = bound_table(
        &family,
        &config.law(),
        beta,
        &grid,
        ConstantsUsed::defaults(&family),
    )?;
    Ok(match config.format {
        Format::Json => json_document(config, to_value(&table)),
        Format::Csv => {
            let mut s = csv_header(config);
            match table.h_star {
                Some(h) => writeln!(s, "# h_star {h}").unwrap(),
                None => s.push_str("# h_star none\n"),
            }
            let mut buf = Vec::new();
            write_csv(&mut buf, &table.rows)?;
            s.push_str(&String::from_utf8(buf).expect("ascii csv"));
            s
        }
    })
}

fn cmd_sweep(config: &RunConfig) -> Result<String, Failure> {
    let beta = config.beta()?;
    let family = config.family();
    let kernel = config.kernel()?;
    let law = config.law();
    let grid = descending(config.h_or(halving_grid(0.4, 5)));
    let constants = ConstantsUsed::defaults(&family);
    let mut rows = Vec::with_capacity(grid.len());
    for &h in &grid {
        let estimate = estimate_at(config, &kernel, beta, h)?;
        let bounds = if h > 0.0 {
            Some(BoundReport::evaluate(&family, &law, beta, h, constants)?)
        } else {
            None
        };
        rows.push((estimate, bounds));
    }
    Ok(match config.format {
        Format::Json => {
            let data: Vec<Value> = rows
                .iter()
                .map(|(e, b)| json!({ "estimate": e, "bounds": b }))
                .collect();
            json_document(config, Value::Array(data))
        }
        Format::Csv => {
            let mut s = csv_header(config);
            s.push_str(
                "h,mean_log_z_per_site,stderr,lower_bracket,upper_bracket,log_upper_general,log_lower_rss,log_lower_sublog\n",
            );
            for (e, b) in &rows {
                let (up, rss, sub) = match b {
                    Some(b) => (
                        cell(b.log_upper_general),
                        cell(b.log_lower_rss),
                        b.log_lower_sublog.map(cell).unwrap_or_default(),
                    ),
                    None => Default::default(),
                };
                writeln!(
                    s,
                    "{},{},{},{},{},{},{},{}",
                    e.h,
                    cell(e.mean_log_z_per_site),
                    cell(e.stderr),
                    cell(e.lower_bracket),
                    cell(e.upper_bracket),
                    up,
                    rss,
                    sub
                )
                .unwrap();
            }
            s
        }
    })
}

#[derive(Serialize)]
struct KernelDefectRow {
    h: f64,
    phi: f64,
    k: u64,
    defect_kk: f64,
    check_eta_defect: f64,
    check_eta_required: f64,
    check_eta_passes: bool,
}

fn cmd_kernel_info(config: &RunConfig) -> Result<String, Failure> {
    let kernel = config.kernel()?;
    let family = config.family();
    let rows = config
        .h_or(halving_grid(0.1, 7))
        .into_iter()
        .map(|h| {
            let k = family.penalization_length(h, DEFAULT_B)?;
            let eta = check_eta_defect_report(&kernel, h, DEFAULT_ETA)?;
            Ok(KernelDefectRow {
                h,
                phi: family.phi(h, DEFAULT_B)?,
                k,
                defect_kk: defect_kk(&kernel, h, k)?,
                check_eta_defect: eta.defect,
                check_eta_required: eta.required,
                check_eta_passes: eta.passes,
            })
        })
        .collect::<Result<Vec<_>, Failure>>()?;
    let info = json!({
        "family": config.family,
        "upsilon": config.upsilon,
        "c_L": config.c_l,
        "n_max": kernel.support_cap,
        "normalization": kernel.normalization,
        "tail_mass": kernel.tail_mass,
        "max_n_k": kernel.max_n_k(),
        "b": DEFAULT_B,
        "eta": DEFAULT_ETA,
        "defects": rows,
    });
    Ok(match config.format {
        Format::Json => json_document(config, info),
        Format::Csv => {
            let mut s = csv_header(config);
            writeln!(s, "# normalization {}", kernel.normalization).unwrap();
            writeln!(s, "# tail_mass {}", kernel.tail_mass).unwrap();
            s.push_str("h,phi,k,defect_kk,check_eta_defect,check_eta_required,check_eta_passes\n");
            for r in &rows {
                writeln!(
                    s,
                    "{},{},{},{},{},{},{}",
                    r.h,
                    r.phi,
                    r.k,
                    r.defect_kk,
                    r.check_eta_defect,
                    r.check_eta_required,
                    r.check_eta_passes
                )
                .unwrap();
            }
            s
        }
    })
}

// ---------------------------------------------------------------------------
// Verification suites

/// One verification check. Scanned checks report values but never fail the
/// run.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub assertable: bool,
    pub passed: bool,
    pub report: Value,
}

impl Check {
    fn asserted(name: &str, passed: bool, report: Value) -> Self {
        Check {
            name: name.into(),
            assertable: true,
            passed,
            report,
        }
    }

    fn scanned(name: &str, passed: bool, report: Value) -> Self {
        Check {
            name: name.into(),
            assertable: false,
            passed,
            report,
        }
    }
}

fn cmd_verify(config: &RunConfig, suite: Suite) -> Result<(String, bool), Failure> {
    let kernel = config.kernel()?;
    let mut checks = Vec::new();
    let all = suite == Suite::All;
    if all || suite == Suite::Oracle {
        checks.extend(verify_oracle(config, &kernel)?);
    }
    if all || suite == Suite::Moments {
        checks.extend(verify_moments(config, &kernel)?);
    }
    if all || suite == Suite::Penalization {
        checks.extend(verify_penalization(config, &kernel)?);
    }
    if all || suite == Suite::Coarse {
        checks.extend(verify_coarse(config, &kernel)?);
    }
    let passed = checks.iter().all(|c| !c.assertable || c.passed);
    let data = json!({ "suite": suite, "passed": passed, "checks": checks });
    Ok((json_document(config, data), passed))
}

const ORACLE_TUPLES: usize = 50;
const ORACLE_MAX_N: usize = 12;

fn verify_oracle(config: &RunConfig, kernel: &RenewalKernel) -> Result<Vec<Check>, Failure> {
    let mut rng = replica_rng(derive_seed(config.seed, 0x0AC1E), 0);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..ORACLE_TUPLES {
        let law = if rng.random::<bool>() {
            DisorderLaw::gaussian()
        } else {
            DisorderLaw::binary()
        };
        let beta = 2.0 * rng.random::<f64>();
        let h = 2.0 * rng.random::<f64>() - 1.0;
        let n = rng.random_range(1..=ORACLE_MAX_N);
        let inst = QuenchedInstance::sample(&law, n, beta, h, &mut rng)?;
        let dp = log_z(&inst, kernel).value;
        let exact = brute_force_log_z(&inst, kernel)?.value;
        let err = (dp - exact).abs() / dp.abs().max(1.0);
        worst = worst.max(err);
        if err > 1e-10 {
            failures.push(json!({ "tuple": i, "law": law.kind, "beta": beta, "h": h, "n": n, "dp": dp, "enumeration": exact }));
        }
    }
    Ok(vec![Check::asserted(
        "dp-matches-enumeration",
        failures.is_empty(),
        json!({ "tuples": ORACLE_TUPLES, "max_relative_error": worst, "tolerance": 1e-10, "failures": failures }),
    )])
}

/// Scaled trimmed plan used by `verify moments`.
pub const MOMENTS_LONG_MIN: usize = 10;
pub const MOMENTS_SHORT_MAX: usize = 3;
pub const MOMENTS_REPLICAS: usize = 10_000;

fn verify_moments(config: &RunConfig, kernel: &RenewalKernel) -> Result<Vec<Check>, Failure> {
    let law = config.law();
    let beta = config.beta.unwrap_or(0.5);
    let h = config.h.first().copied().unwrap_or(0.3);
    let replicas = config.replicas.unwrap_or(MOMENTS_REPLICAS);
    let plan = TrimmedPlan::scaled(MOMENTS_LONG_MIN, MOMENTS_SHORT_MAX)?;
    let r = trimmed_moment_check(kernel, &law, beta, h, &plan, replicas, config.seed)?;
    let zero = trimmed_moment_check(kernel, &law, 0.0, h, &plan, 100, config.seed)?;
    Ok(vec![
        Check::asserted("second-moment-identity", r.identity_holds, to_value(&r)),
        Check::asserted(
            "first-moment-exceeds-product",
            r.first_moment_strict,
            json!({ "log_first_moment": r.log_first_moment, "log_product": r.log_first_moment_product }),
        ),
        Check::asserted(
            "zero-beta-ratio-is-one",
            zero.second_moment_ratio.mean == 1.0 && zero.overlap_expectation.mean == 1.0,
            json!({ "lhs": zero.second_moment_ratio, "rhs": zero.overlap_expectation }),
        ),
        Check::scanned(
            "induction-bound",
            r.overlap_expectation.mean.ln() <= r.log_induction_bound,
            json!({
                "log_induction_bound": r.log_induction_bound,
                "log_overlap_expectation": r.overlap_expectation.mean.ln(),
                "constant": r.induction_constant,
                "density_ratio_sup": r.density_ratio_sup,
                "density_ratio_inf": r.density_ratio_inf,
            }),
        ),
    ])
}

fn verify_penalization(config: &RunConfig, kernel: &RenewalKernel) -> Result<Vec<Check>, Failure> {
    let law = config.law();
    let beta = config.beta.unwrap_or(1.0);
    let grid = config.h_or(halving_grid(0.1, 7));
    let mut identical = true;
    let mut reports = Vec::new();
    let mut first_positive_defect = None;
    let mut success_above_half = true;
    for &h in &grid {
        let plan = PenalizationPlan::new(&kernel.family, &law, beta, h, DEFAULT_B)?;
        let r = penalization_check(kernel, &law, beta, h, &plan)?;
        let direct = crate::bounds::log_upper_general(&kernel.family, &law, beta, h, DEFAULT_B)?;
        identical &= r.log_bound.to_bits() == direct.to_bits();
        if !r.defect_nonpositive && first_positive_defect.is_none() {
            first_positive_defect = Some(h);
        }
        success_above_half &= r.tilted_success > 0.5;
        reports.push(r);
    }
    let q = law.log_mgf_derivative(beta)?;
    let near_one = law.rate_function((1.0 - 1e-9) * q)?.sigma;
    let q1 = law.q1(beta)?;
    Ok(vec![
        Check::asserted(
            "bound-matches-closed-form",
            identical,
            json!({ "points": grid.len() }),
        ),
        Check::asserted(
            "rate-tends-to-q1",
            (near_one - q1).abs() <= 1e-6 * q1.max(1.0),
            json!({ "rate_near_b_one": near_one, "q1": q1 }),
        ),
        Check::scanned(
            "penalized-defect-nonpositive",
            first_positive_defect.is_none(),
            json!({ "first_failing_h": first_positive_defect, "reports": reports }),
        ),
        Check::scanned("tilted-success-above-half", success_above_half, Value::Null),
    ])
}

fn verify_coarse(config: &RunConfig, kernel: &RenewalKernel) -> Result<Vec<Check>, Failure> {
    let law = config.law();
    let beta = config.beta.unwrap_or(1.0);
    let h = config.h.first().copied().unwrap_or(0.06);
    let q1 = law.q1(beta)?;
    let c3 = 0.8 * q1;
    let r = coarse_graining_check(kernel, &law, beta, h, c3, DEFAULT_ETA, 0.1)?;
    let routes = match r.integral_direct {
        Some(d) => (d - r.integral_substituted).abs() <= 1e-6 * d.abs().max(1e-300),
        None => true,
    };
    let green_h = 0.05;
    let g1 = green_constant(kernel, green_h, DEFAULT_ETA, 5000)?;
    let g2 = green_constant(kernel, green_h, DEFAULT_ETA, 10_000)?;
    let change = (g2.log_constant - g1.log_constant).exp() - 1.0;
    let spot_h = 0.4;
    let spot_c3 = spot_h * 1000f64.ln();
    let spot = fractional_moment_spot_check(
        kernel,
        &law,
        beta,
        spot_h,
        spot_c3,
        DEFAULT_ETA,
        config.replicas.unwrap_or(1000),
        config.seed,
    )?;
    let mut spot_report = to_value(&spot);
    if let Some(v) = spot_report.get_mut("violations") {
        let count = v.as_array().map_or(0, Vec::len);
        *v = json!(count);
    }
    Ok(vec![
        Check::asserted(
            "integral-routes-agree",
            routes,
            json!({ "direct": r.integral_direct, "substituted": r.integral_substituted }),
        ),
        Check::scanned("rho-at-most-one", r.rho_at_most_one, to_value(&r)),
        Check::scanned(
            "green-constant-stable",
            change.abs() < 0.1,
            json!({ "h": green_h, "eta": DEFAULT_ETA, "at_5000": g1, "at_10000": g2, "relative_change": change }),
        ),
        Check::scanned("fractional-moment-spot-check", spot.holds, spot_report),
    ])
}
