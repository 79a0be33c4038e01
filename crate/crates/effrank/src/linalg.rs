//! Dense symmetric-matrix primitives.
//!
//! The quantity of interest throughout the crate is the effective rank
//!
//! ```text
//! r_eff(K) = tr(K)^2 / ||K||_F^2
//! ```
//!
//! For a PSD matrix it lies in `[1, rank(K)]` and acts as a smooth count of
//! the dominant eigendirections. Everything here works on plain dense
//! symmetric matrices: an eigenvalue oracle (cyclic Jacobi rotations), the
//! effective rank computed straight from entries, its analytic gradient, and
//! the operator norm.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::rng::{substream, Role};
use rand_distr::{Distribution, StandardNormal};

/// Dense symmetric matrix, row-major storage. Symmetry is enforced at
/// construction and preserved by every operation, so `entries[i*n+j] ==
/// entries[j*n+i]` holds exactly (bitwise).
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl GramMatrix {
    /// Build from a row-major entry buffer. Fails on non-finite entries or
    /// any exact asymmetry.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 || entries.len() != n * n {
            return Err(Error::Dim(format!(
                "expected {}x{} entries, got {}",
                n,
                n,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix);
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if entries[i * n + j] != entries[j * n + i] {
                    return Err(Error::InvalidMatrix);
                }
            }
        }
        Ok(Self { n, entries })
    }

    /// Build by evaluating `f(i, j)` on the upper triangle and mirroring,
    /// which makes the result symmetric by construction.
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                if !v.is_finite() {
                    return Err(Error::InvalidMatrix);
                }
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        Ok(Self { n, entries })
    }

    /// Assemble from precomputed rows of the upper triangle: `rows[i][t]`
    /// holds entry `(i, i + t)`. Used by parallel builders.
    pub(crate) fn from_upper_rows(n: usize, rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut entries = vec![0.0; n * n];
        for (i, row) in rows.iter().enumerate() {
            for (t, &v) in row.iter().enumerate() {
                let j = i + t;
                if !v.is_finite() {
                    return Err(Error::InvalidMatrix);
                }
                entries[i * n + j] = v;
                entries[j * n + i] = v;
            }
        }
        Ok(Self { n, entries })
    }

    pub fn identity(n: usize) -> Self {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        Self { n, entries }
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        Self::from_fn(n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    /// Sum of diagonal entries.
    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Entrywise sum of squares (squared Frobenius norm).
    pub fn frob_sq(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.entries.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// PSD tolerance used throughout: `1e-8 * max|entry|`. Finite-precision
    /// Gram assembly leaves eigenvalues slightly below zero at this scale.
    pub fn tol_psd(&self) -> f64 {
        1e-8 * self.max_abs_entry()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            n: self.n,
            entries: self.entries.iter().map(|v| c * v).collect(),
        }
    }

    /// Entrywise difference `self - other`.
    pub fn sub(&self, other: &GramMatrix) -> Result<Self> {
        if self.n != other.n {
            return Err(Error::Dim(format!("{} vs {}", self.n, other.n)));
        }
        Ok(Self {
            n: self.n,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn matvec(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.entries[i * n..(i + 1) * n];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// Frobenius inner product with another matrix of the same order.
    pub fn frob_inner(&self, other: &GramMatrix) -> Result<f64> {
        if self.n != other.n {
            return Err(Error::Dim(format!("{} vs {}", self.n, other.n)));
        }
        Ok(self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Write as CSV: header line `# gram n=<n>`, then one row per line.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# gram n={}", self.n)?;
        for i in 0..self.n {
            let row: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    /// Read back the CSV form produced by [`GramMatrix::write_csv`].
    pub fn read_csv<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let header = header.trim();
        let n: usize = header
            .strip_prefix("# gram n=")
            .ok_or_else(|| Error::Parse(format!("bad gram header: {header:?}")))?
            .parse()
            .map_err(|e| Error::Parse(format!("bad gram order: {e}")))?;
        let mut entries = Vec::with_capacity(n * n);
        for line in r.lines().take(n) {
            let line = line?;
            for field in line.trim().split(',') {
                entries.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("bad gram entry {field:?}: {e}")))?,
                );
            }
        }
        Self::from_entries(n, entries)
    }
}

/// Eigenvalues of a symmetric matrix, sorted descending.
#[derive(Debug, Clone)]
pub struct Spectrum {
    eigenvalues: Vec<f64>,
}

impl Spectrum {
    pub fn new(mut eigenvalues: Vec<f64>) -> Self {
        eigenvalues.sort_by(|a, b| b.partial_cmp(a).expect("finite eigenvalues"));
        Self { eigenvalues }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty spectrum")
    }

    pub fn sum(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.eigenvalues.iter().map(|v| v * v).sum()
    }

    /// Count of eigenvalues above `tol * max eigenvalue`; the numerical rank
    /// backing the `1 <= r_eff <= rank` invariant.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let cutoff = tol * self.eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
        self.eigenvalues.iter().filter(|&&v| v > cutoff).count()
    }
}

/// Maximum matrix order accepted by the dense eigen oracle.
pub const MAX_EIGEN_ORDER: usize = 4096;

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations.
///
/// Plane rotations annihilate one off-diagonal entry at a time; repeated
/// sweeps drive the off-diagonal mass to zero quadratically. Robust for all
/// real symmetric matrices; intended as the oracle for orders up to 4096.
pub fn sym_eigenvalues(k: &GramMatrix) -> Result<Spectrum> {
    let n = k.n();
    if n > MAX_EIGEN_ORDER {
        return Err(Error::Budget(format!(
            "eigen oracle supports n <= {MAX_EIGEN_ORDER}, got {n}"
        )));
    }
    if n == 1 {
        return Ok(Spectrum::new(vec![k.get(0, 0)]));
    }

    let mut a = k.entries().to_vec();
    let frob = k.frob_sq().sqrt();
    if frob == 0.0 {
        return Ok(Spectrum::new(vec![0.0; n]));
    }

    const MAX_SWEEPS: usize = 64;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if (2.0 * off).sqrt() <= 1e-15 * frob {
            let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
            return Ok(Spectrum::new(diag));
        }

        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // Rotation angle from the stable Rutishauser formulation.
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e150 {
                    // Degenerate slope: tan collapses to 1/(2 theta).
                    0.5 / theta
                } else {
                    let sgn = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sgn / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;

                for j in 0..n {
                    if j == p || j == q {
                        continue;
                    }
                    let g = a[p * n + j];
                    let h = a[q * n + j];
                    let gp = g - s * (h + g * tau);
                    let hq = h + s * (g - h * tau);
                    a[p * n + j] = gp;
                    a[j * n + p] = gp;
                    a[q * n + j] = hq;
                    a[j * n + q] = hq;
                }
            }
        }
    }
    Err(Error::Numerical(
        "Jacobi rotations did not converge".to_string(),
    ))
}

/// Effective rank `tr(K)^2 / ||K||_F^2`, computed from the entries
/// (diagonal sum and entrywise square sum), not via eigendecomposition.
pub fn effective_rank_exact(k: &GramMatrix) -> Result<f64> {
    let t = k.trace();
    let f2 = k.frob_sq();
    if f2 == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    Ok(t * t / f2)
}

/// Gradient of `K -> tr(K)^2 / ||K||_F^2` as a matrix of partial derivatives:
///
/// ```text
/// grad = (2 T / F^2) I - (2 T^2 / F^4) K,   T = tr(K), F^2 = ||K||_F^2.
/// ```
///
/// The functional is scale invariant, so `<grad, K> = 0`.
pub fn effective_rank_grad(k: &GramMatrix) -> Result<GramMatrix> {
    let t = k.trace();
    let f2 = k.frob_sq();
    if f2 == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let n = k.n();
    let diag_coeff = 2.0 * t / f2;
    let mat_coeff = 2.0 * t * t / (f2 * f2);
    GramMatrix::from_fn(n, |i, j| {
        let id = if i == j { diag_coeff } else { 0.0 };
        id - mat_coeff * k.get(i, j)
    })
}

/// Effective rank evaluated on a raw (not necessarily symmetric) buffer.
/// Definition only needs the diagonal sum and the entrywise square sum, so
/// this is the natural target for per-entry finite differences.
fn effective_rank_raw(n: usize, entries: &[f64]) -> f64 {
    let t: f64 = (0..n).map(|i| entries[i * n + i]).sum();
    let f2: f64 = entries.iter().map(|v| v * v).sum();
    t * t / f2
}

/// Central finite-difference gradient of the effective rank, perturbing one
/// entry at a time with step `h`. Independent check of
/// [`effective_rank_grad`]; also behind the `grad-check` CLI command.
pub fn effective_rank_grad_fd(k: &GramMatrix, h: f64) -> Result<GramMatrix> {
    if k.frob_sq() == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    if !(h > 0.0) {
        return Err(Error::Numerical(format!("step must be positive, got {h}")));
    }
    let n = k.n();
    let mut work = k.entries().to_vec();
    let mut grad = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let orig = work[i * n + j];
            work[i * n + j] = orig + h;
            let up = effective_rank_raw(n, &work);
            work[i * n + j] = orig - h;
            let down = effective_rank_raw(n, &work);
            work[i * n + j] = orig;
            grad[i * n + j] = (up - down) / (2.0 * h);
        }
    }
    // Symmetrize: d/dK_ij and d/dK_ji agree analytically for symmetric K,
    // and averaging removes odd round-off so the constructor check passes.
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (grad[i * n + j] + grad[j * n + i]);
            grad[i * n + j] = avg;
            grad[j * n + i] = avg;
        }
    }
    GramMatrix::from_entries(n, grad)
}

/// Largest Jacobi order used before switching to power iteration.
const OPERATOR_NORM_DENSE_CUTOFF: usize = 512;

/// Spectral norm of a symmetric matrix (max |eigenvalue|).
///
/// Small orders go through the eigen oracle; larger ones use power iteration
/// on `K^2`, which converges to `max lambda^2` regardless of the sign of the
/// extreme eigenvalue.
pub fn operator_norm(k: &GramMatrix) -> Result<f64> {
    let n = k.n();
    if n <= OPERATOR_NORM_DENSE_CUTOFF {
        return Ok(sym_eigenvalues(k)?.max_abs());
    }

    let mut rng = substream(0x6f70_6e6f_726d, Role::Init, n as u64);
    let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm0);

    let mut w = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut prev = 0.0f64;
    for _ in 0..20_000 {
        k.matvec(&v, &mut w);
        let est = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if est == 0.0 {
            return Ok(0.0);
        }
        k.matvec(&w, &mut y);
        let ny = y.iter().map(|x| x * x).sum::<f64>().sqrt();
        if ny == 0.0 {
            return Ok(est);
        }
        v.iter_mut().zip(&y).for_each(|(vi, yi)| *vi = yi / ny);
        if (est - prev).abs() <= 1e-9 * est {
            return Ok(est);
        }
        prev = est;
    }
    Ok(prev)
}
