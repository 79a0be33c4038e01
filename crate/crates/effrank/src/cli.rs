//! Command-line front end: config parsing, experiment dispatch,
//! deterministic seeding, CSV/JSON emission.
//!
//! Precedence is flags over config file over built-in defaults. A config
//! file is either line-oriented `key = value` text or a JSON object; keys
//! match the long flag names. Every run writes
//! `<out>/<family>-<confighash>.{csv,json}` and prints a one-line summary.
//!
//! Exit codes: 0 success, 2 config error, 3 numerical or degenerate result.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{
    estimate_reff, Estimate, EstimatorConfig, ExactKernelSource, FrobeniusMode, SketchProbeSource,
};
use crate::experiments::{
    concentration_tail, fit_affine_in_inverse_n, limit_sweep, ntk_infinite_width_gate,
    powerlaw_sweep, width_sweep, ConcentrationConfig, FitResult, InfiniteWidthGate,
    LimitSweepConfig, SweepResult, WidthSweepConfig,
};
use crate::io::{fmt, write_csv, write_json};
use crate::kernels::{
    gram, mc_kernel_moments, sample_dataset, DistSpec, KernelSpec,
};
use crate::linalg::{
    effective_rank_exact, effective_rank_grad, effective_rank_grad_fd, GramMatrix,
};
use crate::ntk::{mlp_init, MlpSpec};
use crate::rng::{mix, Role};
use crate::sketch::ProbeKind;

#[derive(Parser)]
#[command(
    name = "effrank",
    version,
    about = "Effective rank of kernel Gram matrices: exact tools and a sketch/probe estimator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exact effective rank of a sampled kernel Gram matrix
    Exact(ExactArgs),
    /// Subsampled sketch/probe estimate of the effective rank
    Estimate(EstimateArgs),
    /// Effective rank across n with an affine-in-1/n fit
    LimitSweep(LimitSweepArgs),
    /// Tail probabilities of |r_eff - r_inf| across n and eps
    Concentration(ConcentrationArgs),
    /// Growth of r_inf(N) for truncated power-law spectra
    Powerlaw(PowerlawArgs),
    /// Finite-width kernel deviations from the infinite-width limit
    WidthSweep(WidthSweepArgs),
    /// Analytic effective-rank gradient against finite differences
    GradCheck(GradCheckArgs),
    /// Monte-Carlo kernel moments a, b and their ratio
    Moments(MomentsArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Config file (`key = value` lines or a JSON object); flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default ./out)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; all randomness derives from it
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap (env EFFRANK_THREADS as fallback); never affects results
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct KernelArgs {
    /// Kernel family: rbf | linear | polynomial | mercer-powerlaw
    #[arg(long)]
    kernel: Option<String>,
    #[arg(long)]
    lengthscale: Option<f64>,
    #[arg(long)]
    degree: Option<u32>,
    #[arg(long)]
    offset: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    truncation: Option<usize>,
    /// Data distribution: uniform01 | sphere | gaussian
    #[arg(long)]
    dist: Option<String>,
    /// Input dimension
    #[arg(long)]
    d: Option<usize>,
}

#[derive(Args, Clone)]
struct BudgetArgs {
    /// Diagonal samples
    #[arg(long = "M")]
    diag_samples: Option<usize>,
    /// Pair samples
    #[arg(long = "P")]
    pair_samples: Option<usize>,
    /// Output probes per entry estimate
    #[arg(long = "G")]
    probes: Option<usize>,
    /// CountSketch buckets
    #[arg(long = "R")]
    sketch_buckets: Option<usize>,
    /// Probe law: rademacher | gaussian
    #[arg(long)]
    probe: Option<String>,
    /// Frobenius estimator: split | plain
    #[arg(long)]
    frobenius_mode: Option<String>,
    /// Sweep all diagonal entries and ordered pairs exactly once
    #[arg(long)]
    exhaustive: bool,
}

#[derive(Args)]
struct ExactArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Dataset size
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    budget: BudgetArgs,
    /// Model source: mlp (omit to estimate on exact kernel entries)
    #[arg(long)]
    net: Option<String>,
    /// Hidden layers of the MLP
    #[arg(long)]
    depth: Option<usize>,
    /// Hidden width of the MLP
    #[arg(long)]
    width: Option<usize>,
    /// Logit count of the MLP
    #[arg(long)]
    outputs: Option<usize>,
    /// Dataset size
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct LimitSweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    #[command(flatten)]
    budget: BudgetArgs,
    /// Comma-separated dataset sizes
    #[arg(long)]
    n_list: Option<String>,
    /// Seeds per n
    #[arg(long)]
    seeds: Option<usize>,
    /// Use the subsampling estimator instead of exact per-sample ranks
    #[arg(long)]
    estimator: bool,
}

#[derive(Args)]
struct ConcentrationArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Comma-separated dataset sizes
    #[arg(long)]
    n_list: Option<String>,
    /// Comma-separated deviation thresholds
    #[arg(long)]
    eps_list: Option<String>,
    /// Trials per (n, eps) cell
    #[arg(long)]
    trials: Option<usize>,
    /// Monte-Carlo samples for the r_inf reference
    #[arg(long)]
    ref_samples: Option<usize>,
}

#[derive(Args)]
struct PowerlawArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated decay exponents
    #[arg(long)]
    alphas: Option<String>,
    /// Comma-separated truncation sizes
    #[arg(long = "N-list")]
    n_list: Option<String>,
    /// Eigenvalue scale (cancels in the ratio)
    #[arg(long)]
    scale: Option<f64>,
}

#[derive(Args)]
struct WidthSweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Input dimension
    #[arg(long)]
    d: Option<usize>,
    /// Hidden layers
    #[arg(long)]
    depth: Option<usize>,
    /// Logit count
    #[arg(long)]
    outputs: Option<usize>,
    /// Dataset size
    #[arg(long)]
    n: Option<usize>,
    /// Data distribution
    #[arg(long)]
    dist: Option<String>,
    /// Comma-separated hidden widths
    #[arg(long)]
    m_list: Option<String>,
    /// Seeds per width
    #[arg(long)]
    seeds: Option<usize>,
    /// Validate the analytic limit against Monte Carlo at this width first
    #[arg(long)]
    check_infinite_width: Option<usize>,
    /// Seeds for the validation
    #[arg(long)]
    gate_seeds: Option<usize>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Matrix order
    #[arg(long)]
    n: Option<usize>,
    /// Number of sampled matrices
    #[arg(long)]
    matrices: Option<usize>,
}

#[derive(Args)]
struct MomentsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    kernel: KernelArgs,
    /// Monte-Carlo samples
    #[arg(long)]
    samples: Option<usize>,
}

/// Entry point behind the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_)
                | Error::Parse(_)
                | Error::Dim(_)
                | Error::Budget(_)
                | Error::UnsupportedAlpha(_) => 2,
                _ => 3,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = match &cli.cmd {
        Cmd::Exact(a) => a.common.clone(),
        Cmd::Estimate(a) => a.common.clone(),
        Cmd::LimitSweep(a) => a.common.clone(),
        Cmd::Concentration(a) => a.common.clone(),
        Cmd::Powerlaw(a) => a.common.clone(),
        Cmd::WidthSweep(a) => a.common.clone(),
        Cmd::GradCheck(a) => a.common.clone(),
        Cmd::Moments(a) => a.common.clone(),
    };
    setup_threads(common.threads)?;
    match cli.cmd {
        Cmd::Exact(a) => cmd_exact(a),
        Cmd::Estimate(a) => cmd_estimate(a),
        Cmd::LimitSweep(a) => cmd_limit_sweep(a),
        Cmd::Concentration(a) => cmd_concentration(a),
        Cmd::Powerlaw(a) => cmd_powerlaw(a),
        Cmd::WidthSweep(a) => cmd_width_sweep(a),
        Cmd::GradCheck(a) => cmd_grad_check(a),
        Cmd::Moments(a) => cmd_moments(a),
    }
}

fn setup_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var("EFFRANK_THREADS") {
            Ok(raw) => Some(raw.parse::<usize>().map_err(|e| {
                Error::Config(format!("invalid EFFRANK_THREADS value {raw:?}: {e}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool setup failed: {e}")))?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Config file handling

struct FileConfig(BTreeMap<String, String>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig(BTreeMap::new()));
        };
        let text = fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        if text.trim_start().starts_with('{') {
            let value: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("bad JSON config: {e}")))?;
            let obj = value
                .as_object()
                .ok_or_else(|| Error::Config("JSON config must be an object".into()))?;
            for (k, v) in obj {
                let s = match v {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Bool(b) => b.to_string(),
                    serde_json::Value::Number(n) => n.to_string(),
                    _ => {
                        return Err(Error::Config(format!(
                            "key \"{k}\": unsupported value type in config"
                        )))
                    }
                };
                map.insert(k.clone(), s);
            }
        } else {
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    Error::Config(format!("config line {}: expected key = value", lineno + 1))
                })?;
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn check_known(&self, allowed: &[&str]) -> Result<()> {
        let unknown: Vec<String> = self
            .0
            .keys()
            .filter(|k| !allowed.contains(&k.as_str()))
            .cloned()
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )))
        }
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.0.get(key) {
            None => Ok(false),
            Some(raw) => raw
                .parse::<bool>()
                .map_err(|e| Error::Config(format!("invalid value for key \"{key}\": {e}"))),
        }
    }
}

fn pick<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    if let Some(v) = flag {
        return Ok(v);
    }
    match file.0.get(key) {
        Some(raw) => raw
            .parse::<T>()
            .map_err(|e| Error::Config(format!("invalid value for key \"{key}\": {e}"))),
        None => Ok(default),
    }
}

fn parse_list<T: FromStr>(raw: &str, key: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| Error::Config(format!("invalid entry in \"{key}\": {e}")))
        })
        .collect()
}

fn at_least(key: &str, v: usize, min: usize) -> Result<usize> {
    if v < min {
        return Err(Error::Config(format!("{key} must be >= {min}, got {v}")));
    }
    Ok(v)
}

const KERNEL_KEYS: &[&str] = &[
    "kernel",
    "lengthscale",
    "degree",
    "offset",
    "alpha",
    "scale",
    "truncation",
    "dist",
    "d",
];
const BUDGET_KEYS: &[&str] = &["M", "P", "G", "R", "probe", "frobenius-mode", "exhaustive"];
const COMMON_KEYS: &[&str] = &["seed", "out"];

struct ResolvedKernel {
    kernel: KernelSpec,
    dist: DistSpec,
    dim: usize,
}

fn resolve_kernel(
    args: &KernelArgs,
    file: &FileConfig,
    default_dist: &str,
    default_dim: usize,
    echo: &mut BTreeMap<String, String>,
) -> Result<ResolvedKernel> {
    let family = pick(args.kernel.clone(), file, "kernel", "rbf".to_string())?;
    let kernel = match family.as_str() {
        "rbf" => KernelSpec::Rbf {
            lengthscale: pick(args.lengthscale, file, "lengthscale", 0.2)?,
        },
        "linear" => KernelSpec::Linear,
        "polynomial" => KernelSpec::Polynomial {
            degree: pick(args.degree, file, "degree", 2)?,
            offset: pick(args.offset, file, "offset", 1.0)?,
        },
        "mercer-powerlaw" => KernelSpec::MercerPowerLaw {
            alpha: pick(args.alpha, file, "alpha", 2.0)?,
            scale: pick(args.scale, file, "scale", 1.0)?,
            truncation: pick(args.truncation, file, "truncation", 50)?,
        },
        other => return Err(Error::Config(format!("unknown kernel {other:?}"))),
    };
    kernel.validate()?;
    let dist = DistSpec::parse(&pick(
        args.dist.clone(),
        file,
        "dist",
        default_dist.to_string(),
    )?)?;
    let dim = at_least("d", pick(args.d, file, "d", default_dim)?, 1)?;
    if matches!(kernel, KernelSpec::MercerPowerLaw { .. }) {
        if dim != 1 {
            return Err(Error::Config("mercer-powerlaw requires d = 1".into()));
        }
        if dist != DistSpec::UniformCube {
            return Err(Error::Config(
                "mercer-powerlaw is defined on uniform01 data".into(),
            ));
        }
    }
    echo.insert("kernel".into(), kernel.name().into());
    match kernel {
        KernelSpec::Rbf { lengthscale } => {
            echo.insert("lengthscale".into(), lengthscale.to_string());
        }
        KernelSpec::Linear => {}
        KernelSpec::Polynomial { degree, offset } => {
            echo.insert("degree".into(), degree.to_string());
            echo.insert("offset".into(), offset.to_string());
        }
        KernelSpec::MercerPowerLaw {
            alpha,
            scale,
            truncation,
        } => {
            echo.insert("alpha".into(), alpha.to_string());
            echo.insert("scale".into(), scale.to_string());
            echo.insert("truncation".into(), truncation.to_string());
        }
    }
    echo.insert("dist".into(), dist.name().into());
    echo.insert("d".into(), dim.to_string());
    Ok(ResolvedKernel { kernel, dist, dim })
}

fn resolve_budget(
    args: &BudgetArgs,
    file: &FileConfig,
    master_seed: u64,
    echo: &mut BTreeMap<String, String>,
) -> Result<EstimatorConfig> {
    let diag_samples = at_least("M", pick(args.diag_samples, file, "M", 800)?, 1)?;
    let pair_samples = at_least("P", pick(args.pair_samples, file, "P", 3000)?, 1)?;
    let probes = at_least("G", pick(args.probes, file, "G", 16)?, 1)?;
    let sketch_buckets = at_least("R", pick(args.sketch_buckets, file, "R", 128)?, 1)?;
    let probe_kind = ProbeKind::parse(&pick(
        args.probe.clone(),
        file,
        "probe",
        "rademacher".to_string(),
    )?)?;
    let frobenius_mode = FrobeniusMode::parse(&pick(
        args.frobenius_mode.clone(),
        file,
        "frobenius-mode",
        "split".to_string(),
    )?)?;
    let exhaustive = args.exhaustive || file.flag("exhaustive")?;
    echo.insert("M".into(), diag_samples.to_string());
    echo.insert("P".into(), pair_samples.to_string());
    echo.insert("G".into(), probes.to_string());
    echo.insert("R".into(), sketch_buckets.to_string());
    echo.insert("probe".into(), probe_kind.name().into());
    echo.insert("frobenius-mode".into(), frobenius_mode.name().into());
    echo.insert("exhaustive".into(), exhaustive.to_string());
    Ok(EstimatorConfig {
        diag_samples,
        pair_samples,
        probes,
        sketch_buckets,
        probe_kind,
        frobenius_mode,
        master_seed,
        exhaustive,
    })
}

fn resolve_common(
    common: &CommonArgs,
    file: &FileConfig,
    echo: &mut BTreeMap<String, String>,
) -> Result<(PathBuf, u64)> {
    let out = match &common.out {
        Some(p) => p.clone(),
        None => PathBuf::from(pick(
            None::<String>,
            file,
            "out",
            "./out".to_string(),
        )?),
    };
    let seed = pick(common.seed, file, "seed", 0u64)?;
    echo.insert("seed".into(), seed.to_string());
    Ok((out, seed))
}

fn allowed(extra: &[&str]) -> Vec<&'static str> {
    // Leaks are fine here: tiny, once per process.
    let mut keys: Vec<&'static str> = Vec::new();
    keys.extend_from_slice(COMMON_KEYS);
    for k in extra {
        keys.push(Box::leak(k.to_string().into_boxed_str()));
    }
    keys
}

// ---------------------------------------------------------------------------
// Subcommands

#[derive(Serialize)]
struct ExactOutput {
    n: usize,
    trace: f64,
    frob2: f64,
    reff: f64,
}

fn cmd_exact(args: ExactArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut keys = allowed(KERNEL_KEYS);
    keys.push("n");
    file.check_known(&keys)?;
    let mut echo = BTreeMap::new();
    let (out, seed) = resolve_common(&args.common, &file, &mut echo)?;
    let rk = resolve_kernel(&args.kernel, &file, "uniform01", 1, &mut echo)?;
    let n = at_least("n", pick(args.n, &file, "n", 256)?, 1)?;
    echo.insert("n".into(), n.to_string());

    let data = sample_dataset(rk.dist, n, rk.dim, seed)?;
    let k = gram(&rk.kernel, &data)?;
    let reff = effective_rank_exact(&k)?;
    let output = ExactOutput {
        n,
        trace: k.trace(),
        frob2: k.frob_sq(),
        reff,
    };
    let json = write_json(&out, "exact", &echo, &output)?;
    write_csv(
        &out,
        "exact",
        &echo,
        &["n", "trace", "frob2", "reff"],
        &[vec![
            n.to_string(),
            fmt(output.trace),
            fmt(output.frob2),
            fmt(output.reff),
        ]],
    )?;
    println!(
        "r_eff = {} (exact, n={}, kernel={}) -> {}",
        fmt(reff),
        n,
        rk.kernel.name(),
        json.display()
    );
    Ok(())
}

fn estimate_rows(est: &Estimate) -> Vec<Vec<String>> {
    vec![vec![
        fmt(est.trace_hat),
        fmt(est.frob2_hat),
        est.reff_hat.map(fmt).unwrap_or_default(),
        est.se_reff.map(fmt).unwrap_or_default(),
        fmt(est.var_trace),
        fmt(est.var_frob2),
        est.diag_samples.to_string(),
        est.pair_samples.to_string(),
        est.probes.to_string(),
        est.sketch_buckets.to_string(),
        est.mode.clone(),
        est.seed.to_string(),
    ]]
}

const ESTIMATE_COLUMNS: &[&str] = &[
    "trace_hat",
    "frob2_hat",
    "reff_hat",
    "se_reff",
    "var_trace",
    "var_frob2",
    "M",
    "P",
    "G",
    "R",
    "mode",
    "seed",
];

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut keys = allowed(KERNEL_KEYS);
    keys.extend_from_slice(&allowed(BUDGET_KEYS));
    for k in ["net", "depth", "width", "outputs", "n"] {
        keys.push(k);
    }
    file.check_known(&keys)?;

    let mut echo = BTreeMap::new();
    let (out, seed) = resolve_common(&args.common, &file, &mut echo)?;
    let net = match pick(args.net.clone(), &file, "net", String::new())? {
        s if s.is_empty() => None,
        s if s == "mlp" => Some(s),
        other => return Err(Error::Config(format!("unknown net {other:?}"))),
    };

    let (est, summary_src) = if net.is_some() {
        let depth = at_least("depth", pick(args.depth, &file, "depth", 2)?, 1)?;
        let width = at_least("width", pick(args.width, &file, "width", 256)?, 1)?;
        let outputs = at_least("outputs", pick(args.outputs, &file, "outputs", 10)?, 1)?;
        let dim = at_least("d", pick(args.kernel.d, &file, "d", 8)?, 1)?;
        let dist = DistSpec::parse(&pick(
            args.kernel.dist.clone(),
            &file,
            "dist",
            "gaussian".to_string(),
        )?)?;
        let n = at_least("n", pick(args.n, &file, "n", 512)?, 1)?;
        echo.insert("net".into(), "mlp".into());
        echo.insert("depth".into(), depth.to_string());
        echo.insert("width".into(), width.to_string());
        echo.insert("outputs".into(), outputs.to_string());
        echo.insert("d".into(), dim.to_string());
        echo.insert("dist".into(), dist.name().into());
        echo.insert("n".into(), n.to_string());
        let cfg = resolve_budget(&args.budget, &file, seed, &mut echo)?;
        let spec = MlpSpec {
            input_dim: dim,
            width,
            depth,
            outputs,
        };
        let params = mlp_init(spec, seed)?;
        let data = sample_dataset(dist, n, dim, seed)?;
        let source = SketchProbeSource::from_mlp(&params, &data)?;
        (estimate_reff(&source, &cfg), "mlp")
    } else {
        let rk = resolve_kernel(&args.kernel, &file, "uniform01", 1, &mut echo)?;
        let n = at_least("n", pick(args.n, &file, "n", 256)?, 1)?;
        echo.insert("n".into(), n.to_string());
        let cfg = resolve_budget(&args.budget, &file, seed, &mut echo)?;
        let data = sample_dataset(rk.dist, n, rk.dim, seed)?;
        let source = ExactKernelSource {
            kernel: &rk.kernel,
            data: &data,
        };
        (estimate_reff(&source, &cfg), "kernel")
    };

    match est {
        Ok(est) => {
            let json = write_json(&out, "estimate", &echo, &est)?;
            write_csv(&out, "estimate", &echo, ESTIMATE_COLUMNS, &estimate_rows(&est))?;
            println!(
                "reff_hat = {} ± {} (source={}, trace_hat={}, frob2_hat={}) -> {}",
                fmt(est.reff_hat.expect("ok estimate")),
                fmt(est.se_reff.expect("ok estimate")),
                summary_src,
                fmt(est.trace_hat),
                fmt(est.frob2_hat),
                json.display()
            );
            Ok(())
        }
        Err(Error::DegenerateEstimate(est)) => {
            // Diagnostics still go to disk; the exit code reports failure.
            write_json(&out, "estimate", &echo, &est)?;
            write_csv(&out, "estimate", &echo, ESTIMATE_COLUMNS, &estimate_rows(&est))?;
            Err(Error::DegenerateEstimate(est))
        }
        Err(e) => Err(e),
    }
}

#[derive(Serialize)]
struct LimitSweepOutput {
    sweep: SweepResult,
    fit: Option<FitResult>,
}

fn cmd_limit_sweep(args: LimitSweepArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut keys = allowed(KERNEL_KEYS);
    keys.extend_from_slice(&allowed(BUDGET_KEYS));
    for k in ["n-list", "seeds", "estimator"] {
        keys.push(k);
    }
    file.check_known(&keys)?;

    let mut echo = BTreeMap::new();
    let (out, seed) = resolve_common(&args.common, &file, &mut echo)?;
    let rk = resolve_kernel(&args.kernel, &file, "uniform01", 1, &mut echo)?;
    let n_list: Vec<usize> = parse_list(
        &pick(
            args.n_list.clone(),
            &file,
            "n-list",
            "100,300,1000,3000".to_string(),
        )?,
        "n-list",
    )?;
    let seeds = at_least("seeds", pick(args.seeds, &file, "seeds", 20)?, 1)?;
    let use_estimator = args.estimator || file.flag("estimator")?;
    echo.insert(
        "n-list".into(),
        n_list
            .iter()
            .map(|n| n.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    echo.insert("seeds".into(), seeds.to_string());
    echo.insert("estimator".into(), use_estimator.to_string());
    let est_cfg = if use_estimator {
        Some(resolve_budget(&args.budget, &file, seed, &mut echo)?)
    } else {
        None
    };

    let sweep = limit_sweep(&LimitSweepConfig {
        kernel: &rk.kernel,
        dist: rk.dist,
        dim: rk.dim,
        n_list: &n_list,
        seeds,
        exact: !use_estimator,
        estimator: est_cfg,
        master_seed: seed,
    })?;
    let fit = if n_list.len() >= 3 {
        Some(fit_affine_in_inverse_n(&sweep)?)
    } else {
        None
    };

    let rows: Vec<Vec<String>> = sweep
        .rows
        .iter()
        .map(|r| {
            vec![
                fmt(r.x),
                fmt(r.mean),
                fmt(r.sd),
                r.seeds.to_string(),
            ]
        })
        .collect();
    write_csv(&out, "limit-sweep", &echo, &["n", "mean", "sd", "seeds"], &rows)?;
    let json = write_json(
        &out,
        "limit-sweep",
        &echo,
        &LimitSweepOutput { sweep, fit },
    )?;
    match fit {
        Some(f) => println!(
            "fitted r_inf = {} ± {} (slope vs 1/n = {}) -> {}",
            fmt(f.intercept),
            fmt(f.se_intercept),
            fmt(f.slope),
            json.display()
        ),
        None => println!("limit sweep written (no fit: fewer than 3 sizes) -> {}", json.display()),
    }
    Ok(())
}

fn cmd_concentration(args: ConcentrationArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut keys = allowed(KERNEL_KEYS);
    for k in ["n-list", "eps-list", "trials", "ref-samples"] {
        keys.push(k);
    }
    file.check_known(&keys)?;

    let mut echo = BTreeMap::new();
    let (out, seed) = resolve_common(&args.common, &file, &mut echo)?;
    let rk = resolve_kernel(&args.kernel, &file, "uniform01", 1, &mut echo)?;
    let n_list: Vec<usize> = parse_list(
        &pick(args.n_list.clone(), &file, "n-list", "40,80,160,320".to_string())?,
        "n-list",
    )?;
    let eps_list: Vec<f64> = parse_list(
        &pick(
            args.eps_list.clone(),
            &file,
            "eps-list",
            "0.2,0.3,0.4".to_string(),
        )?,
        "eps-list",
    )?;
    let trials = at_least("trials", pick(args.trials, &file, "trials", 1000)?, 200)?;
    let ref_samples = at_least(
        "ref-samples",
        pick(args.ref_samples, &file, "ref-samples", 1_000_000)?,
        100,
    )?;
    echo.insert(
        "n-list".into(),
        n_list.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
    );
    echo.insert(
        "eps-list".into(),
        eps_list.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(","),
    );
    echo.insert("trials".into(), trials.to_string());
    echo.insert("ref-samples".into(), ref_samples.to_string());

    let table = concentration_tail(&ConcentrationConfig {
        kernel: &rk.kernel,
        dist: rk.dist,
        dim: rk.dim,
        n_list: &n_list,
        eps_list: &eps_list,
        trials,
        ref_samples,
        master_seed: seed,
    })?;

    let rows: Vec<Vec<String>> = table
        .cells
        .iter()
        .map(|c| {
            vec![
                c.n.to_string(),
                fmt(c.eps),
                c.exceed.to_string(),
                c.trials.to_string(),
                fmt(c.p_hat),
                fmt(c.wilson_lo),
                fmt(c.wilson_hi),
            ]
        })
        .collect();
    write_csv(
        &out,
        "concentration",
        &echo,
        &["n", "eps", "exceed", "trials", "p_hat", "wilson_lo", "wilson_hi"],
        &rows,
    )?;
    let json = write_json(&out, "concentration", &echo, &table)?;
    let n_fit = table
        .fits_logp_vs_n
        .first()
        .map(|f| format!("slope {} (t = {})", fmt(f.fit.slope), fmt(f.fit.slope_t())))
        .unwrap_or_else(|| "no usable cells".to_string());
    println!(
        "r_inf = {}; log-tail vs n at eps={}: {} -> {}",
        fmt(table.r_inf_ref),
        table
            .fits_logp_vs_n
            .first()
            .map(|f| fmt(f.fixed))
            .unwrap_or_else(|| "-".into()),
        n_fit,
        json.display()
    );
    Ok(())
}

fn cmd_powerlaw(args: PowerlawArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut keys = allowed(&["alphas", "N-list", "scale"]);
    keys.retain(|k| *k != "seed");
    keys.push("seed");
    file.check_known(&keys)?;

    let mut echo = BTreeMap::new();
    let (out, _seed) = resolve_common(&args.common, &file, &mut echo)?;
    echo.remove("seed"); // fully deterministic family
    let alphas: Vec<f64> = parse_list(
        &pick(args.alphas.clone(), &file, "alphas", "0.75,1.0,2.0".to_string())?,
        "alphas",
    )?;
    let n_list: Vec<usize> = parse_list(
        &pick(
            args.n_list.clone(),
            &file,
            "N-list",
            "1000,10000,100000,1000000".to_string(),
        )?,
        "N-list",
    )?;
    let scale = pick(args.scale, &file, "scale", 1.0)?;
    echo.insert(
        "alphas".into(),
        alphas.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(","),
    );
    echo.insert(
        "N-list".into(),
        n_list.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(","),
    );
    echo.insert("scale".into(), scale.to_string());

    let sweep = powerlaw_sweep(&alphas, scale, &n_list)?;
    let mut rows = Vec::new();
    for row in &sweep.rows {
        for &(n, r) in &row.values {
            rows.push(vec![fmt(row.alpha), n.to_string(), fmt(r)]);
        }
    }
    write_csv(&out, "powerlaw", &echo, &["alpha", "N", "r_inf"], &rows)?;
    let json = write_json(&out, "powerlaw", &echo, &sweep)?;
    println!(
        "powerlaw growth over {} alphas x {} truncations -> {}",
        alphas.len(),
        n_list.len(),
        json.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct WidthSweepOutput {
    gate: Option<InfiniteWidthGate>,
    sweep: crate::experiments::WidthSweep,
}

fn cmd_width_sweep(args: WidthSweepArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let keys = allowed(&[
        "d",
        "depth",
        "outputs",
        "n",
        "dist",
        "m-list",
        "seeds",
        "check-infinite-width",
        "gate-seeds",
    ]);
    file.check_known(&keys)?;

    let mut echo = BTreeMap::new();
    let (out, seed) = resolve_common(&args.common, &file, &mut echo)?;
    let dim = at_least("d", pick(args.d, &file, "d", 8)?, 1)?;
    let depth = at_least("depth", pick(args.depth, &file, "depth", 2)?, 1)?;
    let outputs = at_least("outputs", pick(args.outputs, &file, "outputs", 1)?, 1)?;
    let n = at_least("n", pick(args.n, &file, "n", 32)?, 1)?;
    let dist = DistSpec::parse(&pick(args.dist.clone(), &file, "dist", "sphere".to_string())?)?;
    let m_list: Vec<usize> = parse_list(
        &pick(
            args.m_list.clone(),
            &file,
            "m-list",
            "64,128,256,512,1024,2048".to_string(),
        )?,
        "m-list",
    )?;
    let seeds = at_least("seeds", pick(args.seeds, &file, "seeds", 20)?, 1)?;
    let check_width = pick(args.check_infinite_width, &file, "check-infinite-width", 0)?;
    let gate_seeds = at_least("gate-seeds", pick(args.gate_seeds, &file, "gate-seeds", 12)?, 3)?;
    echo.insert("d".into(), dim.to_string());
    echo.insert("depth".into(), depth.to_string());
    echo.insert("outputs".into(), outputs.to_string());
    echo.insert("n".into(), n.to_string());
    echo.insert("dist".into(), dist.name().into());
    echo.insert(
        "m-list".into(),
        m_list.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
    );
    echo.insert("seeds".into(), seeds.to_string());
    echo.insert("check-infinite-width".into(), check_width.to_string());
    echo.insert("gate-seeds".into(), gate_seeds.to_string());

    let base = MlpSpec {
        input_dim: dim,
        width: 1,
        depth,
        outputs,
    };
    let data = sample_dataset(dist, n, dim, seed)?;
    let gate = if check_width > 0 {
        let gate = ntk_infinite_width_gate(
            base,
            &data,
            check_width,
            gate_seeds,
            mix(seed, Role::Init, 1),
        )?;
        if !gate.passes() {
            return Err(Error::Numerical(format!(
                "infinite-width validation failed at width {check_width}: mean_z = {}, frac beyond 3se = {}",
                gate.mean_z, gate.frac_beyond_3se
            )));
        }
        Some(gate)
    } else {
        None
    };

    let sweep = width_sweep(&WidthSweepConfig {
        base,
        m_list: &m_list,
        data: &data,
        seeds,
        master_seed: seed,
    })?;
    let rows: Vec<Vec<String>> = sweep
        .rows
        .iter()
        .map(|r| {
            vec![
                r.width.to_string(),
                fmt(r.median_op_gap),
                fmt(r.median_reff_gap),
                r.seeds.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out,
        "width-sweep",
        &echo,
        &["m", "median_op_gap", "median_reff_gap", "seeds"],
        &rows,
    )?;
    let op_slope = sweep.op_fit.map(|f| fmt(f.slope)).unwrap_or_else(|| "-".into());
    let reff_slope = sweep.reff_fit.map(|f| fmt(f.slope)).unwrap_or_else(|| "-".into());
    let json = write_json(&out, "width-sweep", &echo, &WidthSweepOutput { gate, sweep })?;
    println!(
        "width sweep: op-gap slope = {op_slope}, reff-gap slope = {reff_slope} -> {}",
        json.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct GradCheckRow {
    index: usize,
    rel_err: f64,
    inner_rel: f64,
}

#[derive(Serialize)]
struct GradCheckOutput {
    matrices: usize,
    max_rel_err: f64,
    max_inner_rel: f64,
    rows: Vec<GradCheckRow>,
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut keys = allowed(KERNEL_KEYS);
    keys.push("n");
    keys.push("matrices");
    file.check_known(&keys)?;

    let mut echo = BTreeMap::new();
    let (out, seed) = resolve_common(&args.common, &file, &mut echo)?;
    let rk = resolve_kernel(&args.kernel, &file, "uniform01", 1, &mut echo)?;
    let n = at_least("n", pick(args.n, &file, "n", 16)?, 2)?;
    let matrices = at_least("matrices", pick(args.matrices, &file, "matrices", 5)?, 1)?;
    echo.insert("n".into(), n.to_string());
    echo.insert("matrices".into(), matrices.to_string());

    let mut rows = Vec::new();
    let mut max_rel_err = 0.0f64;
    let mut max_inner_rel = 0.0f64;
    for t in 0..matrices {
        let data = sample_dataset(rk.dist, n, rk.dim, mix(seed, Role::Data, t as u64))?;
        let k = gram(&rk.kernel, &data)?;
        let rel_err = grad_fd_rel_err(&k)?;
        let g = effective_rank_grad(&k)?;
        let inner = g.frob_inner(&k)?;
        let scale = (g.frob_sq().sqrt() * k.frob_sq().sqrt()).max(1e-300);
        let inner_rel = inner.abs() / scale;
        max_rel_err = max_rel_err.max(rel_err);
        max_inner_rel = max_inner_rel.max(inner_rel);
        rows.push(GradCheckRow {
            index: t,
            rel_err,
            inner_rel,
        });
    }
    let output = GradCheckOutput {
        matrices,
        max_rel_err,
        max_inner_rel,
        rows: rows,
    };
    let csv_rows: Vec<Vec<String>> = output
        .rows
        .iter()
        .map(|r| vec![r.index.to_string(), fmt(r.rel_err), fmt(r.inner_rel)])
        .collect();
    write_csv(&out, "grad-check", &echo, &["index", "rel_err", "inner_rel"], &csv_rows)?;
    let json = write_json(&out, "grad-check", &echo, &output)?;
    println!(
        "grad check over {} matrices: max rel err = {}, max |<grad,K>| / scale = {} -> {}",
        matrices,
        fmt(max_rel_err),
        fmt(max_inner_rel),
        json.display()
    );
    Ok(())
}

/// Worst-case entrywise relative error of the analytic gradient against
/// central finite differences at step `1e-6 ||K||_F`.
fn grad_fd_rel_err(k: &GramMatrix) -> Result<f64> {
    let g = effective_rank_grad(k)?;
    let fd = effective_rank_grad_fd(k, 1e-6 * k.frob_sq().sqrt())?;
    let scale = g.max_abs_entry();
    let mut worst = 0.0f64;
    for (a, b) in g.entries().iter().zip(fd.entries()) {
        let denom = a.abs().max(1e-8 * scale);
        worst = worst.max((a - b).abs() / denom);
    }
    Ok(worst)
}

fn cmd_moments(args: MomentsArgs) -> Result<()> {
    let file = FileConfig::load(args.common.config.as_deref())?;
    let mut keys = allowed(KERNEL_KEYS);
    keys.push("samples");
    file.check_known(&keys)?;

    let mut echo = BTreeMap::new();
    let (out, seed) = resolve_common(&args.common, &file, &mut echo)?;
    let rk = resolve_kernel(&args.kernel, &file, "uniform01", 1, &mut echo)?;
    let samples = at_least("samples", pick(args.samples, &file, "samples", 100_000)?, 100)?;
    echo.insert("samples".into(), samples.to_string());

    let est = mc_kernel_moments(&rk.kernel, rk.dist, rk.dim, samples, seed)?;
    write_csv(
        &out,
        "moments",
        &echo,
        &["a_hat", "se_a", "b_hat", "se_b", "r_inf_hat", "se_r_inf", "samples"],
        &[vec![
            fmt(est.a_hat),
            fmt(est.se_a),
            fmt(est.b_hat),
            fmt(est.se_b),
            fmt(est.r_inf_hat),
            fmt(est.se_r_inf),
            est.samples.to_string(),
        ]],
    )?;
    let json = write_json(&out, "moments", &echo, &est)?;
    println!(
        "r_inf_hat = {} ± {} (a_hat = {} ± {}, b_hat = {} ± {}) -> {}",
        fmt(est.r_inf_hat),
        fmt(est.se_r_inf),
        fmt(est.a_hat),
        fmt(est.se_a),
        fmt(est.b_hat),
        fmt(est.se_b),
        json.display()
    );
    Ok(())
}
