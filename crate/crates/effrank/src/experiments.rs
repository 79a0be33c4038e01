//! Desk-scale experiment families with regression fitting.
//!
//! Each family measures one limit behavior of the effective rank:
//!
//! * [`limit_sweep`] — r_eff of sampled Gram matrices across n, against the
//!   moment prediction `a^2 / b`;
//! * [`concentration_tail`] — exceedance frequencies of `|r_eff - r_inf|`;
//! * [`width_sweep`] — finite-width tangent kernels against the analytic
//!   limit, gap decay in the width;
//! * [`powerlaw_sweep`] — growth of `r_inf(N)` under truncated power-law
//!   spectra.
//!
//! Every sweep is reproducible bit-for-bit from its config and master seed;
//! cells run in parallel with per-cell substreams.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimator::{estimate_reff, EstimatorConfig, ExactKernelSource};
use crate::kernels::{
    gram_trace_frob_sq, mc_kernel_moments, powerlaw_growth, sample_dataset, DistSpec, KernelSpec,
};
use crate::linalg::{effective_rank_exact, operator_norm, GramMatrix};
use crate::ntk::{ntk_finite, ntk_infinite_relu, mlp_init, MlpSpec};
use crate::rng::{mix, tree_mean, tree_sample_variance, Role};

/// One aggregated cell of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    /// Independent variable (n, width, ...).
    pub x: f64,
    pub mean: f64,
    pub sd: f64,
    pub seeds: usize,
}

/// Sweep rows plus the configuration they came from.
#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub meta: BTreeMap<String, String>,
}

/// Ordinary least-squares line fit with coefficient standard errors.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitResult {
    pub intercept: f64,
    pub slope: f64,
    pub se_intercept: f64,
    pub se_slope: f64,
    pub residual_rms: f64,
    pub points: usize,
}

impl FitResult {
    /// t-statistic of the slope against zero.
    pub fn slope_t(&self) -> f64 {
        if self.se_slope == 0.0 {
            if self.slope == 0.0 {
                0.0
            } else {
                f64::INFINITY * self.slope.signum()
            }
        } else {
            self.slope / self.se_slope
        }
    }
}

/// Least-squares fit of `y = intercept + slope * x`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<FitResult> {
    let n = xs.len();
    if n != ys.len() {
        return Err(Error::Dim(format!("{} xs vs {} ys", n, ys.len())));
    }
    if n < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {n}")));
    }
    let xbar = xs.iter().sum::<f64>() / n as f64;
    let ybar = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    if sxx == 0.0 {
        return Err(Error::Fit("degenerate design: all x equal".into()));
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let dof = (n - 2) as f64;
    let sigma_sq = if dof > 0.0 { rss / dof } else { 0.0 };
    let se_slope = (sigma_sq / sxx).sqrt();
    let se_intercept = (sigma_sq * (1.0 / n as f64 + xbar * xbar / sxx)).sqrt();
    Ok(FitResult {
        intercept,
        slope,
        se_intercept,
        se_slope,
        residual_rms: (rss / n as f64).sqrt(),
        points: n,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn kernel_meta(kernel: &KernelSpec, meta: &mut BTreeMap<String, String>) {
    meta.insert("kernel".into(), kernel.name().into());
    match *kernel {
        KernelSpec::Rbf { lengthscale } => {
            meta.insert("lengthscale".into(), lengthscale.to_string());
        }
        KernelSpec::Linear => {}
        KernelSpec::Polynomial { degree, offset } => {
            meta.insert("degree".into(), degree.to_string());
            meta.insert("offset".into(), offset.to_string());
        }
        KernelSpec::MercerPowerLaw {
            alpha,
            scale,
            truncation,
        } => {
            meta.insert("alpha".into(), alpha.to_string());
            meta.insert("scale".into(), scale.to_string());
            meta.insert("truncation".into(), truncation.to_string());
        }
    }
}

/// Inputs for [`limit_sweep`].
#[derive(Debug, Clone)]
pub struct LimitSweepConfig<'a> {
    pub kernel: &'a KernelSpec,
    pub dist: DistSpec,
    pub dim: usize,
    pub n_list: &'a [usize],
    pub seeds: usize,
    /// Exact per-sample effective rank; otherwise the subsampling estimator
    /// with `estimator` runs on exact kernel entries.
    pub exact: bool,
    pub estimator: Option<EstimatorConfig>,
    pub master_seed: u64,
}

/// Effective rank of sampled Gram matrices for each `n`, aggregated over
/// seeds.
pub fn limit_sweep(cfg: &LimitSweepConfig) -> Result<SweepResult> {
    cfg.kernel.validate()?;
    if cfg.n_list.is_empty() || cfg.seeds == 0 {
        return Err(Error::Config("need at least one n and one seed".into()));
    }
    if cfg.n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("n list must be strictly ascending".into()));
    }
    if cfg.exact && *cfg.n_list.last().unwrap() > crate::kernels::MAX_GRAM_ORDER {
        return Err(Error::Budget(format!(
            "exact sweeps support n <= {}",
            crate::kernels::MAX_GRAM_ORDER
        )));
    }
    if !cfg.exact && cfg.estimator.is_none() {
        return Err(Error::Config(
            "estimator sweep requires an estimator config".into(),
        ));
    }

    let cells: Vec<(usize, usize)> = (0..cfg.n_list.len())
        .flat_map(|ni| (0..cfg.seeds).map(move |s| (ni, s)))
        .collect();
    let values: Vec<Result<f64>> = cells
        .par_iter()
        .map(|&(ni, s)| {
            let n = cfg.n_list[ni];
            let cell = (ni * cfg.seeds + s) as u64;
            let data_seed = mix(cfg.master_seed, Role::Data, cell);
            let data = sample_dataset(cfg.dist, n, cfg.dim, data_seed)?;
            if cfg.exact {
                let (t, f2) = gram_trace_frob_sq(cfg.kernel, &data)?;
                if f2 == 0.0 {
                    return Err(Error::ZeroMatrix);
                }
                Ok(t * t / f2)
            } else {
                let mut est_cfg = cfg.estimator.expect("checked above");
                est_cfg.master_seed = mix(cfg.master_seed, Role::Trial, cell);
                let source = ExactKernelSource {
                    kernel: cfg.kernel,
                    data: &data,
                };
                let est = estimate_reff(&source, &est_cfg)?;
                Ok(est.reff_hat.expect("positive frobenius on exact entries"))
            }
        })
        .collect();
    let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(cfg.n_list.len());
    for (ni, &n) in cfg.n_list.iter().enumerate() {
        let cell_values: Vec<f64> = (0..cfg.seeds)
            .map(|s| values[ni * cfg.seeds + s])
            .collect();
        rows.push(SweepRow {
            x: n as f64,
            mean: tree_mean(&cell_values),
            sd: tree_sample_variance(&cell_values).sqrt(),
            seeds: cfg.seeds,
        });
    }

    let mut meta = BTreeMap::new();
    kernel_meta(cfg.kernel, &mut meta);
    meta.insert("dist".into(), cfg.dist.name().into());
    meta.insert("d".into(), cfg.dim.to_string());
    meta.insert("seeds".into(), cfg.seeds.to_string());
    meta.insert("master_seed".into(), cfg.master_seed.to_string());
    meta.insert(
        "mode".into(),
        if cfg.exact { "exact" } else { "estimator" }.into(),
    );
    Ok(SweepResult { rows, meta })
}

/// Least-squares fit of mean effective rank against `1/n`; the intercept is
/// the fitted large-n limit.
pub fn fit_affine_in_inverse_n(sweep: &SweepResult) -> Result<FitResult> {
    let mut distinct: Vec<f64> = sweep.rows.iter().map(|r| r.x).collect();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Fit(format!(
            "need at least 3 distinct n, got {}",
            distinct.len()
        )));
    }
    let xs: Vec<f64> = sweep.rows.iter().map(|r| 1.0 / r.x).collect();
    let ys: Vec<f64> = sweep.rows.iter().map(|r| r.mean).collect();
    fit_line(&xs, &ys)
}

/// One `(n, eps)` cell of the concentration experiment.
#[derive(Debug, Clone, Serialize)]
pub struct TailCell {
    pub n: usize,
    pub eps: f64,
    pub exceed: usize,
    pub trials: usize,
    pub p_hat: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
}

/// Regression of log tail probability against one variable, at a fixed
/// value of the other.
#[derive(Debug, Clone, Serialize)]
pub struct TailFit {
    /// The fixed eps (for fits vs n) or fixed n (for fits vs eps^2).
    pub fixed: f64,
    pub fit: FitResult,
}

/// Concentration experiment output.
#[derive(Debug, Clone, Serialize)]
pub struct TailTable {
    pub r_inf_ref: f64,
    pub r_inf_se: f64,
    pub cells: Vec<TailCell>,
    pub fits_logp_vs_n: Vec<TailFit>,
    pub fits_logp_vs_eps2: Vec<TailFit>,
    pub meta: BTreeMap<String, String>,
}

/// Inputs for [`concentration_tail`].
#[derive(Debug, Clone)]
pub struct ConcentrationConfig<'a> {
    pub kernel: &'a KernelSpec,
    pub dist: DistSpec,
    pub dim: usize,
    pub n_list: &'a [usize],
    pub eps_list: &'a [f64],
    pub trials: usize,
    /// Monte-Carlo sample count for the `r_inf` reference.
    pub ref_samples: usize,
    pub master_seed: u64,
}

/// Minimum exceedance count for a cell to enter the log-probability
/// regressions; the log of near-zero frequencies is unstable.
pub const MIN_EXCEEDANCES_FOR_FIT: usize = 5;

fn wilson_interval(successes: usize, trials: usize) -> (f64, f64) {
    let z = 1.959_963_984_540_054f64; // 95%
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Empirical exceedance frequencies of `|r_eff(K_n) - r_inf| > eps` with
/// Wilson confidence intervals, plus companion regressions of the log tail
/// probability on `n` (fixed eps) and on `eps^2` (fixed n).
pub fn concentration_tail(cfg: &ConcentrationConfig) -> Result<TailTable> {
    cfg.kernel.validate()?;
    if cfg.trials < 200 {
        return Err(Error::Config(format!(
            "need at least 200 trials per cell, got {}",
            cfg.trials
        )));
    }
    if cfg.n_list.is_empty() || cfg.eps_list.is_empty() {
        return Err(Error::Config("need at least one n and one eps".into()));
    }

    let reference = mc_kernel_moments(
        cfg.kernel,
        cfg.dist,
        cfg.dim,
        cfg.ref_samples,
        mix(cfg.master_seed, Role::Init, 0),
    )?;
    let r_inf = reference.r_inf_hat;

    // One batch of r_eff draws per n, shared across the eps thresholds.
    let mut cells = Vec::new();
    let mut per_n_values: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_list.len());
    for (ni, &n) in cfg.n_list.iter().enumerate() {
        let values: Vec<Result<f64>> = (0..cfg.trials)
            .into_par_iter()
            .map(|t| {
                let cell = ((ni as u64) << 32) | t as u64;
                let data_seed = mix(cfg.master_seed, Role::Data, cell);
                let data = sample_dataset(cfg.dist, n, cfg.dim, data_seed)?;
                let (tr, f2) = gram_trace_frob_sq(cfg.kernel, &data)?;
                if f2 == 0.0 {
                    return Err(Error::ZeroMatrix);
                }
                Ok(tr * tr / f2)
            })
            .collect();
        let values: Vec<f64> = values.into_iter().collect::<Result<_>>()?;
        for &eps in cfg.eps_list {
            let exceed = values.iter().filter(|&&r| (r - r_inf).abs() > eps).count();
            let (lo, hi) = wilson_interval(exceed, cfg.trials);
            cells.push(TailCell {
                n,
                eps,
                exceed,
                trials: cfg.trials,
                p_hat: exceed as f64 / cfg.trials as f64,
                wilson_lo: lo,
                wilson_hi: hi,
            });
        }
        per_n_values.push(values);
    }

    let usable = |c: &TailCell| c.exceed >= MIN_EXCEEDANCES_FOR_FIT;
    let mut fits_logp_vs_n = Vec::new();
    for &eps in cfg.eps_list {
        let pts: Vec<(f64, f64)> = cells
            .iter()
            .filter(|c| c.eps == eps && usable(c))
            .map(|c| (c.n as f64, c.p_hat.ln()))
            .collect();
        if pts.len() >= 3 {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            fits_logp_vs_n.push(TailFit {
                fixed: eps,
                fit: fit_line(&xs, &ys)?,
            });
        }
    }
    let mut fits_logp_vs_eps2 = Vec::new();
    for &n in cfg.n_list {
        let pts: Vec<(f64, f64)> = cells
            .iter()
            .filter(|c| c.n == n && usable(c))
            .map(|c| (c.eps * c.eps, c.p_hat.ln()))
            .collect();
        if pts.len() >= 3 {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            fits_logp_vs_eps2.push(TailFit {
                fixed: n as f64,
                fit: fit_line(&xs, &ys)?,
            });
        }
    }

    let mut meta = BTreeMap::new();
    kernel_meta(cfg.kernel, &mut meta);
    meta.insert("dist".into(), cfg.dist.name().into());
    meta.insert("d".into(), cfg.dim.to_string());
    meta.insert("trials".into(), cfg.trials.to_string());
    meta.insert("ref_samples".into(), cfg.ref_samples.to_string());
    meta.insert("master_seed".into(), cfg.master_seed.to_string());
    Ok(TailTable {
        r_inf_ref: r_inf,
        r_inf_se: reference.se_r_inf,
        cells,
        fits_logp_vs_n,
        fits_logp_vs_eps2,
        meta,
    })
}

/// One width cell of the stability sweep.
#[derive(Debug, Clone, Serialize)]
pub struct WidthRow {
    pub width: usize,
    /// Median over seeds of the operator norm of `K_m - K_inf`.
    pub median_op_gap: f64,
    /// Median over seeds of `|r_eff(K_m) - r_eff(K_inf)|`.
    pub median_reff_gap: f64,
    pub seeds: usize,
}

/// Width stability sweep output.
#[derive(Debug, Clone, Serialize)]
pub struct WidthSweep {
    pub reff_inf: f64,
    pub rows: Vec<WidthRow>,
    /// Log-log fit of the median operator gap against the width.
    pub op_fit: Option<FitResult>,
    /// Log-log fit of the median effective-rank gap against the width.
    pub reff_fit: Option<FitResult>,
    pub meta: BTreeMap<String, String>,
}

/// Inputs for [`width_sweep`]. The `width` field of `base` is ignored;
/// widths come from `m_list`.
#[derive(Debug, Clone)]
pub struct WidthSweepConfig<'a> {
    pub base: MlpSpec,
    pub m_list: &'a [usize],
    pub data: &'a crate::kernels::Dataset,
    pub seeds: usize,
    pub master_seed: u64,
}

/// Finite-width kernel deviations from the analytic limit across widths;
/// medians over seeds (gaps are stochastic-order quantities, and medians are
/// robust to heavy seed tails).
pub fn width_sweep(cfg: &WidthSweepConfig) -> Result<WidthSweep> {
    if cfg.m_list.is_empty() || cfg.seeds == 0 {
        return Err(Error::Config("need at least one width and one seed".into()));
    }
    if cfg.m_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("width list must be strictly ascending".into()));
    }
    let k_inf = ntk_infinite_relu(
        MlpSpec {
            width: 1,
            ..cfg.base
        },
        cfg.data,
    )?;
    let reff_inf = effective_rank_exact(&k_inf)?;

    let cells: Vec<(usize, usize)> = (0..cfg.m_list.len())
        .flat_map(|mi| (0..cfg.seeds).map(move |s| (mi, s)))
        .collect();
    let gaps: Vec<Result<(f64, f64)>> = cells
        .par_iter()
        .map(|&(mi, s)| {
            let spec = MlpSpec {
                width: cfg.m_list[mi],
                ..cfg.base
            };
            let seed = mix(cfg.master_seed, Role::Trial, ((mi as u64) << 32) | s as u64);
            let params = mlp_init(spec, seed)?;
            let k_m = ntk_finite(&params, cfg.data)?;
            let delta = k_m.sub(&k_inf)?;
            let op = operator_norm(&delta)?;
            let reff_gap = (effective_rank_exact(&k_m)? - reff_inf).abs();
            Ok((op, reff_gap))
        })
        .collect();
    let gaps: Vec<(f64, f64)> = gaps.into_iter().collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(cfg.m_list.len());
    for (mi, &m) in cfg.m_list.iter().enumerate() {
        let mut ops: Vec<f64> = (0..cfg.seeds)
            .map(|s| gaps[mi * cfg.seeds + s].0)
            .collect();
        let mut reffs: Vec<f64> = (0..cfg.seeds)
            .map(|s| gaps[mi * cfg.seeds + s].1)
            .collect();
        rows.push(WidthRow {
            width: m,
            median_op_gap: median(&mut ops),
            median_reff_gap: median(&mut reffs),
            seeds: cfg.seeds,
        });
    }

    let loglog = |values: Vec<(f64, f64)>| -> Option<FitResult> {
        if values.len() < 3 || values.iter().any(|&(_, y)| y <= 0.0) {
            return None;
        }
        let xs: Vec<f64> = values.iter().map(|&(x, _)| x.ln()).collect();
        let ys: Vec<f64> = values.iter().map(|&(_, y)| y.ln()).collect();
        fit_line(&xs, &ys).ok()
    };
    let op_fit = loglog(
        rows.iter()
            .map(|r| (r.width as f64, r.median_op_gap))
            .collect(),
    );
    let reff_fit = loglog(
        rows.iter()
            .map(|r| (r.width as f64, r.median_reff_gap))
            .collect(),
    );

    let mut meta = BTreeMap::new();
    meta.insert("d".into(), cfg.base.input_dim.to_string());
    meta.insert("depth".into(), cfg.base.depth.to_string());
    meta.insert("outputs".into(), cfg.base.outputs.to_string());
    meta.insert("n".into(), cfg.data.n.to_string());
    meta.insert("seeds".into(), cfg.seeds.to_string());
    meta.insert("master_seed".into(), cfg.master_seed.to_string());
    Ok(WidthSweep {
        reff_inf,
        rows,
        op_fit,
        reff_fit,
        meta,
    })
}

/// Validation report of the analytic infinite-width kernel against
/// wide-network Monte Carlo at a check width.
#[derive(Debug, Clone, Serialize)]
pub struct InfiniteWidthGate {
    pub check_width: usize,
    pub seeds: usize,
    /// z-score of the global mean discrepancy over entries.
    pub mean_z: f64,
    /// Fraction of (upper-triangle) entries outside 3 standard errors.
    pub frac_beyond_3se: f64,
    pub max_abs_z: f64,
}

impl InfiniteWidthGate {
    /// Acceptance rule: the global mean discrepancy within 3 standard
    /// errors, and no more than a small fraction of entries (about the
    /// null rate at 3 SE, with binomial slack) individually outside.
    pub fn passes(&self) -> bool {
        self.mean_z.abs() <= 3.0 && self.frac_beyond_3se <= 0.02
    }
}

/// Monte-Carlo check of [`ntk_infinite_relu`] at `check_width`: per-entry
/// z-scores of the analytic kernel against the across-seed mean.
pub fn ntk_infinite_width_gate(
    base: MlpSpec,
    data: &crate::kernels::Dataset,
    check_width: usize,
    seeds: usize,
    master_seed: u64,
) -> Result<InfiniteWidthGate> {
    if seeds < 3 {
        return Err(Error::Config("gate needs at least 3 seeds".into()));
    }
    let spec = MlpSpec {
        width: check_width,
        ..base
    };
    let k_inf = ntk_infinite_relu(spec, data)?;
    let n = data.n;
    let grams: Vec<Result<GramMatrix>> = (0..seeds)
        .into_par_iter()
        .map(|s| {
            let params = mlp_init(spec, mix(master_seed, Role::Trial, s as u64))?;
            ntk_finite(&params, data)
        })
        .collect();
    let grams: Vec<GramMatrix> = grams.into_iter().collect::<Result<_>>()?;

    // Global mean discrepancy per seed.
    let entries = (n * (n + 1) / 2) as f64;
    let per_seed: Vec<f64> = grams
        .iter()
        .map(|g| {
            let mut acc = 0.0;
            for i in 0..n {
                for j in i..n {
                    acc += g.get(i, j) - k_inf.get(i, j);
                }
            }
            acc / entries
        })
        .collect();
    let mean_d = tree_mean(&per_seed);
    let se_d = (tree_sample_variance(&per_seed) / seeds as f64).sqrt();
    let mean_z = if se_d > 0.0 { mean_d / se_d } else { 0.0 };

    let mut beyond = 0usize;
    let mut max_abs_z = 0.0f64;
    for i in 0..n {
        for j in i..n {
            let vals: Vec<f64> = grams.iter().map(|g| g.get(i, j)).collect();
            let mean = tree_mean(&vals);
            let se = (tree_sample_variance(&vals) / seeds as f64).sqrt();
            let z = if se > 0.0 {
                (mean - k_inf.get(i, j)) / se
            } else {
                0.0
            };
            max_abs_z = max_abs_z.max(z.abs());
            if z.abs() > 3.0 {
                beyond += 1;
            }
        }
    }
    Ok(InfiniteWidthGate {
        check_width,
        seeds,
        mean_z,
        frac_beyond_3se: beyond as f64 / entries,
        max_abs_z,
    })
}

/// Regime-appropriate summary of `r_inf(N)` growth.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "regime")]
pub enum RegimeFit {
    /// Convergent spectrum: value at the largest N and the relative
    /// variation over the plateau window.
    Plateau {
        value: f64,
        max_rel_variation: f64,
        from_n: usize,
    },
    /// Boundary decay: ratios `r_inf(N) / (ln N)^2` and their relative
    /// spread over the window.
    LogSquared {
        ratios: Vec<(usize, f64)>,
        max_rel_spread: f64,
        from_n: usize,
    },
    /// Divergent regime: log-log growth exponent.
    PowerLaw { fit: FitResult },
}

/// Growth table and fit for one decay exponent.
#[derive(Debug, Clone, Serialize)]
pub struct PowerlawRow {
    pub alpha: f64,
    pub values: Vec<(usize, f64)>,
    pub fit: RegimeFit,
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerlawSweep {
    pub rows: Vec<PowerlawRow>,
    pub meta: BTreeMap<String, String>,
}

/// Window start for plateau/ratio summaries.
const POWERLAW_WINDOW_START: usize = 10_000;

/// `r_inf(N)` across truncation sizes for each exponent, with a
/// regime-appropriate fit: plateau above 1, `(ln N)^2` ratios at 1, and a
/// log-log exponent below 1.
pub fn powerlaw_sweep(alphas: &[f64], scale: f64, n_list: &[usize]) -> Result<PowerlawSweep> {
    if alphas.is_empty() || n_list.is_empty() {
        return Err(Error::Config("need at least one alpha and one N".into()));
    }
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let values = powerlaw_growth(alpha, scale, n_list)?;
        let window: Vec<&(usize, f64)> = {
            let in_window: Vec<&(usize, f64)> = values
                .iter()
                .filter(|(n, _)| *n >= POWERLAW_WINDOW_START)
                .collect();
            if in_window.len() >= 2 {
                in_window
            } else {
                values.iter().skip(values.len().saturating_sub(3)).collect()
            }
        };
        let from_n = window.first().map(|(n, _)| *n).unwrap_or(0);
        let fit = if (alpha - 1.0).abs() < 1e-12 {
            let ratios: Vec<(usize, f64)> = window
                .iter()
                .map(|&&(n, r)| (n, r / (n as f64).ln().powi(2)))
                .collect();
            let max = ratios.iter().map(|&(_, v)| v).fold(f64::MIN, f64::max);
            let min = ratios.iter().map(|&(_, v)| v).fold(f64::MAX, f64::min);
            RegimeFit::LogSquared {
                ratios,
                max_rel_spread: (max - min) / min,
                from_n,
            }
        } else if alpha > 1.0 {
            let last = values.last().expect("non-empty").1;
            let max_rel_variation = window
                .iter()
                .map(|&&(_, r)| (r - last).abs() / last)
                .fold(0.0f64, f64::max);
            RegimeFit::Plateau {
                value: last,
                max_rel_variation,
                from_n,
            }
        } else {
            let xs: Vec<f64> = values.iter().map(|&(n, _)| (n as f64).ln()).collect();
            let ys: Vec<f64> = values.iter().map(|&(_, r)| r.ln()).collect();
            RegimeFit::PowerLaw {
                fit: fit_line(&xs, &ys)?,
            }
        };
        rows.push(PowerlawRow {
            alpha,
            values,
            fit,
        });
    }
    let mut meta = BTreeMap::new();
    meta.insert("scale".into(), scale.to_string());
    meta.insert(
        "alphas".into(),
        alphas
            .iter()
            .map(|a| a.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    Ok(PowerlawSweep { rows, meta })
}
