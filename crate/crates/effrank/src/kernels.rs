//! Closed-form kernels, samplable data distributions, Gram assembly, and
//! kernel moments.
//!
//! The moments `a = E[k(x,x)]` and `b = E[k(x,x')^2]` determine the
//! large-sample effective rank of a kernel Gram matrix: it settles at
//! `r_inf = a^2 / b`. For kernels given by an orthonormal-expansion spectrum
//! those moments reduce to partial sums, `a = sum(lambda_i)` and
//! `b = sum(lambda_i^2)`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::GramMatrix;
use crate::rng::{substream, tree_mean, tree_sample_variance, Role};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Kernel family with its parameters. All provided kernels are bounded on
/// their domains and produce PSD Gram matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    /// `exp(-||x - x'||^2 / (2 l^2))`.
    Rbf { lengthscale: f64 },
    /// `<x, x'>`.
    Linear,
    /// `(<x, x'> + offset)^degree`.
    Polynomial { degree: u32, offset: f64 },
    /// Truncated orthonormal cosine expansion on `[0, 1]` (scalar inputs):
    /// `k(x, x') = sum_{i=1..N} scale * i^(-alpha) * phi_i(x) phi_i(x')` with
    /// `phi_i(x) = sqrt(2) cos(2 pi i x)`, an orthonormal family in
    /// `L^2(Uniform[0,1])`. The eigenvalues are known in closed form, which
    /// makes moment identities testable without quadrature.
    MercerPowerLaw {
        alpha: f64,
        scale: f64,
        truncation: usize,
    },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { lengthscale } => {
                if !(lengthscale > 0.0) {
                    return Err(Error::Config(format!(
                        "lengthscale must be positive, got {lengthscale}"
                    )));
                }
            }
            KernelSpec::Linear => {}
            KernelSpec::Polynomial { degree, offset } => {
                if degree < 1 {
                    return Err(Error::Config("degree must be >= 1".into()));
                }
                if !(offset >= 0.0) {
                    return Err(Error::Config(format!(
                        "offset must be >= 0, got {offset}"
                    )));
                }
            }
            KernelSpec::MercerPowerLaw {
                alpha,
                scale,
                truncation,
            } => {
                if !(alpha > 0.5) {
                    return Err(Error::UnsupportedAlpha(alpha));
                }
                if !(scale > 0.0) {
                    return Err(Error::Config(format!("scale must be positive, got {scale}")));
                }
                if truncation < 1 {
                    return Err(Error::Config("truncation must be >= 1".into()));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Rbf { .. } => "rbf",
            KernelSpec::Linear => "linear",
            KernelSpec::Polynomial { .. } => "polynomial",
            KernelSpec::MercerPowerLaw { .. } => "mercer-powerlaw",
        }
    }

    /// Known eigenvalue sequence, for families with a closed-form spectrum.
    pub fn mercer_spectrum(&self) -> Option<Vec<f64>> {
        match *self {
            KernelSpec::MercerPowerLaw {
                alpha,
                scale,
                truncation,
            } => Some(
                (1..=truncation)
                    .map(|i| scale * (i as f64).powf(-alpha))
                    .collect(),
            ),
            _ => None,
        }
    }

    /// Evaluate `k(x, y)`. Symmetric in its arguments for every family.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::Dim(format!(
                "kernel arguments of lengths {} and {}",
                x.len(),
                y.len()
            )));
        }
        match *self {
            KernelSpec::Rbf { lengthscale } => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                Ok((-d2 / (2.0 * lengthscale * lengthscale)).exp())
            }
            KernelSpec::Linear => Ok(dot(x, y)),
            KernelSpec::Polynomial { degree, offset } => {
                Ok((dot(x, y) + offset).powi(degree as i32))
            }
            KernelSpec::MercerPowerLaw {
                alpha,
                scale,
                truncation,
            } => {
                if x.len() != 1 {
                    return Err(Error::Dim(format!(
                        "mercer-powerlaw is defined on scalars, got dim {}",
                        x.len()
                    )));
                }
                let (u, v) = (x[0], y[0]);
                if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                    return Err(Error::Domain(format!(
                        "mercer-powerlaw inputs must lie in [0,1], got {u} and {v}"
                    )));
                }
                let mut acc = 0.0;
                for i in 1..=truncation {
                    let fi = i as f64;
                    let lam = scale * fi.powf(-alpha);
                    // cu * cv groups symmetrically, keeping eval(x,y) ==
                    // eval(y,x) bitwise.
                    let cu = (TWO_PI * fi * u).cos();
                    let cv = (TWO_PI * fi * v).cos();
                    acc += (lam * 2.0) * (cu * cv);
                }
                Ok(acc)
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Sampling distribution for dataset rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DistSpec {
    /// Uniform on `[0, 1]^d`.
    UniformCube,
    /// Uniform on the unit sphere in `R^d`.
    UnitSphere,
    /// Standard Gaussian on `R^d`.
    StandardGaussian,
}

impl DistSpec {
    pub fn name(&self) -> &'static str {
        match self {
            DistSpec::UniformCube => "uniform01",
            DistSpec::UnitSphere => "sphere",
            DistSpec::StandardGaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform01" | "uniform" | "cube" => Ok(DistSpec::UniformCube),
            "sphere" | "unit-sphere" => Ok(DistSpec::UnitSphere),
            "gaussian" | "normal" => Ok(DistSpec::StandardGaussian),
            other => Err(Error::Config(format!("unknown distribution {other:?}"))),
        }
    }

    fn sample_row(&self, d: usize, rng: &mut impl Rng, out: &mut [f64]) {
        match self {
            DistSpec::UniformCube => {
                for v in out.iter_mut().take(d) {
                    *v = rng.random_range(0.0..1.0);
                }
            }
            DistSpec::StandardGaussian => {
                for v in out.iter_mut().take(d) {
                    *v = StandardNormal.sample(rng);
                }
            }
            DistSpec::UnitSphere => loop {
                let mut norm_sq = 0.0;
                for v in out.iter_mut().take(d) {
                    let g: f64 = StandardNormal.sample(rng);
                    *v = g;
                    norm_sq += g * g;
                }
                if norm_sq > 0.0 {
                    let inv = 1.0 / norm_sq.sqrt();
                    out.iter_mut().take(d).for_each(|v| *v *= inv);
                    break;
                }
            },
        }
    }
}

/// A sampled dataset: `n` rows of dimension `d`, reproducible from
/// `(dist, n, d, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub d: usize,
    pub dist: DistSpec,
    pub seed: u64,
    points: Vec<f64>,
}

impl Dataset {
    /// Wrap externally supplied points (row-major `n x d`). Reproducibility
    /// from the seed only holds for datasets built by [`sample_dataset`].
    pub fn from_raw_points(n: usize, d: usize, points: Vec<f64>) -> Self {
        debug_assert_eq!(points.len(), n * d);
        Dataset {
            n,
            d,
            dist: DistSpec::StandardGaussian,
            seed: u64::MAX,
            points,
        }
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Write as CSV with header `# dataset n=<n> d=<d> dist=<name> seed=<seed>`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(
            w,
            "# dataset n={} d={} dist={} seed={}",
            self.n,
            self.d,
            self.dist.name(),
            self.seed
        )?;
        for i in 0..self.n {
            let row: Vec<String> = self.point(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let header = header.trim();
        let body = header
            .strip_prefix("# dataset ")
            .ok_or_else(|| Error::Parse(format!("bad dataset header: {header:?}")))?;
        let mut n = None;
        let mut d = None;
        let mut dist = None;
        let mut seed = None;
        for part in body.split_whitespace() {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad dataset header field {part:?}")))?;
            match key {
                "n" => n = Some(value.parse().map_err(|e| Error::Parse(format!("n: {e}")))?),
                "d" => d = Some(value.parse().map_err(|e| Error::Parse(format!("d: {e}")))?),
                "dist" => dist = Some(DistSpec::parse(value)?),
                "seed" => {
                    seed = Some(value.parse().map_err(|e| Error::Parse(format!("seed: {e}")))?)
                }
                other => return Err(Error::Parse(format!("unknown header field {other:?}"))),
            }
        }
        let (n, d, dist, seed) = match (n, d, dist, seed) {
            (Some(n), Some(d), Some(dist), Some(seed)) => (n, d, dist, seed),
            _ => return Err(Error::Parse("incomplete dataset header".into())),
        };
        let mut points = Vec::with_capacity(n * d);
        for line in r.lines().take(n) {
            let line = line?;
            for field in line.trim().split(',') {
                points.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad point entry {field:?}: {e}")))?,
                );
            }
        }
        if points.len() != n * d {
            return Err(Error::Parse(format!(
                "expected {} values, got {}",
                n * d,
                points.len()
            )));
        }
        Ok(Dataset {
            n,
            d,
            dist,
            seed,
            points,
        })
    }
}

/// Draw `n` i.i.d. rows from `dist`. Row `i` comes from the substream
/// `(seed, Data, i)`, so the result is independent of evaluation order.
pub fn sample_dataset(dist: DistSpec, n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n < 1 || d < 1 {
        return Err(Error::Config(format!("need n >= 1 and d >= 1, got n={n} d={d}")));
    }
    let mut points = vec![0.0; n * d];
    for (i, row) in points.chunks_exact_mut(d).enumerate() {
        let mut rng = substream(seed, Role::Data, i as u64);
        dist.sample_row(d, &mut rng, row);
    }
    Ok(Dataset {
        n,
        d,
        dist,
        seed,
        points,
    })
}

/// Largest order accepted for dense Gram assembly.
pub const MAX_GRAM_ORDER: usize = 8192;

/// Assemble the dense Gram matrix `K[i][j] = k(x_i, x_j)`. Rows of the upper
/// triangle are computed in parallel; the result does not depend on the
/// worker count.
pub fn gram(kernel: &KernelSpec, data: &Dataset) -> Result<GramMatrix> {
    kernel.validate()?;
    if data.n > MAX_GRAM_ORDER {
        return Err(Error::Budget(format!(
            "dense gram assembly supports n <= {MAX_GRAM_ORDER}, got {}",
            data.n
        )));
    }
    let n = data.n;
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = data.point(i);
            (i..n).map(|j| kernel.eval(xi, data.point(j))).collect()
        })
        .collect();
    let rows: Vec<Vec<f64>> = rows.into_iter().collect::<Result<_>>()?;
    GramMatrix::from_upper_rows(n, rows)
}

/// Trace and squared Frobenius norm of the Gram matrix of `data` without
/// materializing it. Same numbers as assembling and reducing, in O(n) memory.
pub fn gram_trace_frob_sq(kernel: &KernelSpec, data: &Dataset) -> Result<(f64, f64)> {
    let n = data.n;
    let per_row: Vec<Result<(f64, f64)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = data.point(i);
            let kii = kernel.eval(xi, xi)?;
            let mut off = 0.0;
            for j in (i + 1)..n {
                let v = kernel.eval(xi, data.point(j))?;
                off += v * v;
            }
            Ok((kii, off))
        })
        .collect();
    let mut trace = 0.0;
    let mut frob_sq = 0.0;
    for r in per_row {
        let (kii, off) = r?;
        trace += kii;
        frob_sq += kii * kii + 2.0 * off;
    }
    Ok((trace, frob_sq))
}

/// Exact moments of a nonnegative spectrum: `a = sum(lambda)`,
/// `b = sum(lambda^2)`, and their ratio `r_inf = a^2 / b`.
pub fn mercer_moments(lambda: &[f64]) -> Result<(f64, f64, f64)> {
    if lambda.iter().any(|&l| l < 0.0) {
        return Err(Error::Config("spectrum entries must be >= 0".into()));
    }
    let a: f64 = lambda.iter().sum();
    let b: f64 = lambda.iter().map(|l| l * l).sum();
    if b == 0.0 {
        return Err(Error::ZeroSpectrum);
    }
    Ok((a, b, a * a / b))
}

/// `r_inf(N)` for the truncated spectrum `lambda_i = c i^(-alpha)`, evaluated
/// at each `N` in ascending `n_list` by incremental partial sums. The overall
/// scale `c` cancels in the ratio.
pub fn powerlaw_growth(alpha: f64, c: f64, n_list: &[usize]) -> Result<Vec<(usize, f64)>> {
    if !(alpha > 0.5) {
        return Err(Error::UnsupportedAlpha(alpha));
    }
    if !(c > 0.0) {
        return Err(Error::Config(format!("scale must be positive, got {c}")));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("N list must be strictly ascending".into()));
    }
    let mut out = Vec::with_capacity(n_list.len());
    let mut a = 0.0f64;
    let mut b = 0.0f64;
    let mut i = 0usize;
    for &n in n_list {
        if n < 1 {
            return Err(Error::Config("N must be >= 1".into()));
        }
        while i < n {
            i += 1;
            let lam = c * (i as f64).powf(-alpha);
            a += lam;
            b += lam * lam;
        }
        out.push((n, a * a / b));
    }
    Ok(out)
}

/// Monte-Carlo estimates of the kernel moments with standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct MomentEstimate {
    /// Sample mean of `k(x, x)`.
    pub a_hat: f64,
    /// Sample mean of `k(x, x')^2` over disjoint pairs.
    pub b_hat: f64,
    /// `a_hat^2 / b_hat`.
    pub r_inf_hat: f64,
    pub se_a: f64,
    pub se_b: f64,
    /// First-order propagated standard error of the ratio.
    pub se_r_inf: f64,
    pub samples: usize,
}

/// Estimate `a = E[k(x,x)]` and `b = E[k(x,x')^2]` from `samples` i.i.d.
/// points and `samples` disjoint fresh pairs (so `x != x'` almost surely).
pub fn mc_kernel_moments(
    kernel: &KernelSpec,
    dist: DistSpec,
    d: usize,
    samples: usize,
    seed: u64,
) -> Result<MomentEstimate> {
    kernel.validate()?;
    if samples < 100 {
        return Err(Error::Config(format!(
            "need at least 100 samples, got {samples}"
        )));
    }
    let diag: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(seed, Role::Data, t as u64);
            let mut x = vec![0.0; d];
            dist.sample_row(d, &mut rng, &mut x);
            kernel.eval(&x, &x)
        })
        .collect();
    let diag: Vec<f64> = diag.into_iter().collect::<Result<_>>()?;

    let pairs: Vec<Result<f64>> = (0..samples)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(seed, Role::Pair, t as u64);
            let mut x = vec![0.0; d];
            let mut y = vec![0.0; d];
            dist.sample_row(d, &mut rng, &mut x);
            dist.sample_row(d, &mut rng, &mut y);
            let v = kernel.eval(&x, &y)?;
            Ok(v * v)
        })
        .collect();
    let pairs: Vec<f64> = pairs.into_iter().collect::<Result<_>>()?;

    let a_hat = tree_mean(&diag);
    let b_hat = tree_mean(&pairs);
    let se_a = (tree_sample_variance(&diag) / samples as f64).sqrt();
    let se_b = (tree_sample_variance(&pairs) / samples as f64).sqrt();
    if b_hat <= 0.0 {
        return Err(Error::Numerical(format!(
            "non-positive second-moment estimate b_hat = {b_hat}"
        )));
    }
    let r_inf_hat = a_hat * a_hat / b_hat;
    let se_r_inf =
        r_inf_hat * (4.0 * se_a * se_a / (a_hat * a_hat) + se_b * se_b / (b_hat * b_hat)).sqrt();
    Ok(MomentEstimate {
        a_hat,
        b_hat,
        r_inf_hat,
        se_a,
        se_b,
        se_r_inf,
        samples,
    })
}
