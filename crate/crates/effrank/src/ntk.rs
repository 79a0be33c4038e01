//! Fully-connected ReLU tangent kernels: finite width via explicit
//! Jacobians, and the infinite-width limit via the arc-cosine recursion.
//!
//! # Network and parameterization
//!
//! An MLP with `L` hidden layers of width `m`, input dim `d`, `C` outputs,
//! no biases, ReLU activations, and every weight entry i.i.d. standard
//! normal. Fan-in scaling sits outside the weights:
//!
//! ```text
//! z^1 = W_1 x / sqrt(d),   h^l = relu(z^l),
//! z^{l+1} = W_{l+1} h^l / sqrt(m)   (l = 1..L-1),
//! f(x) = W_{L+1} h^L / sqrt(m)  in R^C.
//! ```
//!
//! With this scaling the per-entry deviation of the finite-width tangent
//! kernel from its limit decays like `m^{-1/2}`.
//!
//! # Tangent kernel
//!
//! `k_m(x, x') = tr(J(x) J(x')^T)` where `J(x)` is the `C x p` Jacobian of
//! the logits with respect to all `p` parameters. Each layer's gradient
//! block is a rank-one outer product (sensitivity times layer input), so
//! the trace factorizes per layer:
//!
//! ```text
//! k_m(x,x') = sum_l (1/fan_l) <delta^l(x), delta^l(x')>_F <a^{l-1}(x), a^{l-1}(x')>
//! ```
//!
//! which is what [`ntk_finite`] evaluates; full Jacobians are never stored.
//!
//! # Infinite-width recursion
//!
//! For the parameterization above (no extra activation gain), with
//! `u = S(x,x)`, `v = S(x',x')`, `w = S(x,x')` and `cos t = w / sqrt(uv)`:
//!
//! ```text
//! S_0 = <x, x'> / d
//! S_{l+1} = sqrt(uv) / (2 pi) * (sin t + (pi - t) cos t)     (ReLU moment)
//! Sdot_l  = (pi - t) / (2 pi)                                 (ReLU' moment)
//! T_0 = S_0,   T_{l+1} = S_{l+1} + Sdot_l * T_l       (l = 0..L-1)
//! K_inf(x, x') = C * T_L
//! ```
//!
//! The `C` factor matches the trace over logits on the finite-width side.
//! On the diagonal the recursion closes: `K_inf(x,x) = C (L+1) 2^{-L} |x|^2 / d`.
//! [`ntk_infinite_relu`] implements exactly this recursion; it is validated
//! against wide-network Monte Carlo in the test suites before the width
//! experiments rely on it.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::Dataset;
use crate::linalg::GramMatrix;
use crate::rng::{substream, Role};

/// Architecture of the fully-connected ReLU network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub width: usize,
    /// Number of hidden layers (>= 1).
    pub depth: usize,
    pub outputs: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 || self.width < 1 || self.depth < 1 || self.outputs < 1 {
            return Err(Error::Config(format!("all MLP dimensions must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Total parameter count `p = m d + (L-1) m^2 + C m`.
    pub fn param_count(&self) -> usize {
        let (d, m, l, c) = (self.input_dim, self.width, self.depth, self.outputs);
        m * d + (l - 1) * m * m + c * m
    }

    /// Number of weight matrices (`L + 1`).
    fn layer_count(&self) -> usize {
        self.depth + 1
    }

    /// (rows, cols) of weight matrix `l` (0-based).
    fn layer_dims(&self, l: usize) -> (usize, usize) {
        let (d, m, depth, c) = (self.input_dim, self.width, self.depth, self.outputs);
        if l == 0 {
            (m, d)
        } else if l < depth {
            (m, m)
        } else {
            (c, m)
        }
    }
}

/// Sampled weights for an [`MlpSpec`], reproducible from the seed.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub seed: u64,
    layers: Vec<Vec<f64>>,
}

/// Draw all weights i.i.d. standard normal. Row `r` of layer `l` comes from
/// the substream `(seed, Weights, l << 40 | r)`, so initialization is
/// deterministic and rows can be filled in parallel.
pub fn mlp_init(spec: MlpSpec, seed: u64) -> Result<MlpParams> {
    spec.validate()?;
    let layers = (0..spec.layer_count())
        .map(|l| {
            let (rows, cols) = spec.layer_dims(l);
            let mut w = vec![0.0; rows * cols];
            w.par_chunks_mut(cols).enumerate().for_each(|(r, chunk)| {
                let mut rng = substream(seed, Role::Weights, ((l as u64) << 40) | r as u64);
                for v in chunk {
                    *v = StandardNormal.sample(&mut rng);
                }
            });
            w
        })
        .collect();
    Ok(MlpParams { spec, seed, layers })
}

impl MlpParams {
    pub fn layer(&self, l: usize) -> &[f64] {
        &self.layers[l]
    }

    #[cfg(test)]
    fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.layers[l]
    }

    /// Forward pass returning logits only.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_state(x)?.1)
    }

    /// Forward pass keeping pre-activations; `pres[l]` is `z^{l+1}` in the
    /// module-level notation (0-based hidden layer index).
    fn forward_state(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let spec = &self.spec;
        if x.len() != spec.input_dim {
            return Err(Error::Dim(format!(
                "input dim {} but network expects {}",
                x.len(),
                spec.input_dim
            )));
        }
        let mut pres: Vec<Vec<f64>> = Vec::with_capacity(spec.depth);
        let mut act: Vec<f64> = x.to_vec();
        for l in 0..spec.depth {
            let (rows, cols) = spec.layer_dims(l);
            let inv = 1.0 / (cols as f64).sqrt();
            let w = &self.layers[l];
            let z: Vec<f64> = (0..rows)
                .map(|i| {
                    let row = &w[i * cols..(i + 1) * cols];
                    inv * row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            act = z.iter().map(|&v| v.max(0.0)).collect();
            pres.push(z);
        }
        let (rows, cols) = spec.layer_dims(spec.depth);
        let inv = 1.0 / (cols as f64).sqrt();
        let w = &self.layers[spec.depth];
        let logits: Vec<f64> = (0..rows)
            .map(|i| {
                let row = &w[i * cols..(i + 1) * cols];
                inv * row.iter().zip(&act).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok((pres, logits))
    }

    /// Layer inputs and per-output sensitivities at `x`; everything needed
    /// to reconstruct the parameter Jacobian without materializing it.
    pub fn jacobian_factors(&self, x: &[f64]) -> Result<JacobianFactors> {
        let spec = self.spec;
        let (pres, _) = self.forward_state(x)?;
        let m = spec.width;
        let c = spec.outputs;

        // inputs[l] feeds weight matrix l: inputs[0] = x, inputs[l] = h^l.
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(spec.depth + 1);
        inputs.push(x.to_vec());
        for z in &pres {
            inputs.push(z.iter().map(|&v| v.max(0.0)).collect());
        }

        // ReLU subgradient at 0 is 0.
        let gate = |v: f64| if v > 0.0 { 1.0 } else { 0.0 };

        // sens[l][c*m + i] = d logit_c / d z^{l+1}_i (0-based hidden layer l).
        let mut sens: Vec<Vec<f64>> = vec![Vec::new(); spec.depth];
        let inv_m = 1.0 / (m as f64).sqrt();
        let w_out = &self.layers[spec.depth];
        let z_last = &pres[spec.depth - 1];
        let mut last = vec![0.0; c * m];
        for ci in 0..c {
            for i in 0..m {
                last[ci * m + i] = inv_m * w_out[ci * m + i] * gate(z_last[i]);
            }
        }
        sens[spec.depth - 1] = last;

        for l in (0..spec.depth - 1).rev() {
            let w = &self.layers[l + 1]; // m x m, maps h^l -> z^{l+1}
            let upper = sens[l + 1].clone();
            let z = &pres[l];
            let mut cur = vec![0.0; c * m];
            for ci in 0..c {
                let up = &upper[ci * m..(ci + 1) * m];
                let dst = &mut cur[ci * m..(ci + 1) * m];
                for (i, row) in w.chunks_exact(m).enumerate() {
                    let di = up[i];
                    if di == 0.0 {
                        continue;
                    }
                    for (j, &wij) in row.iter().enumerate() {
                        dst[j] += wij * di;
                    }
                }
                for j in 0..m {
                    dst[j] *= inv_m * gate(z[j]);
                }
            }
            sens[l] = cur;
        }

        Ok(JacobianFactors {
            spec,
            inputs,
            sens,
        })
    }
}

/// Per-layer factorization of the parameter Jacobian at one input.
///
/// `inputs[l]` is what weight matrix `l` multiplies; `sens[l]` holds the
/// `C x m` sensitivities of the logits to that layer's pre-activations. The
/// gradient block for layer `l` is `sens[l][c] (outer) inputs[l] / sqrt(fan_l)`,
/// and the output-layer block is `e_c (outer) inputs[L] / sqrt(m)`.
#[derive(Debug, Clone)]
pub struct JacobianFactors {
    spec: MlpSpec,
    inputs: Vec<Vec<f64>>,
    sens: Vec<Vec<f64>>,
}

impl JacobianFactors {
    pub fn output_dim(&self) -> usize {
        self.spec.outputs
    }

    pub fn param_dim(&self) -> usize {
        self.spec.param_count()
    }

    /// `tr(J(x) J(x')^T)` from the factors of the two points.
    pub fn ntk_entry(&self, other: &JacobianFactors) -> f64 {
        let spec = &self.spec;
        let m = spec.width;
        let c = spec.outputs;
        let mut acc = 0.0;
        for l in 0..spec.depth {
            let fan = if l == 0 { spec.input_dim } else { m };
            let s: f64 = self.sens[l]
                .iter()
                .zip(&other.sens[l])
                .map(|(a, b)| a * b)
                .sum();
            let a: f64 = self.inputs[l]
                .iter()
                .zip(&other.inputs[l])
                .map(|(x, y)| x * y)
                .sum();
            acc += s * a / fan as f64;
        }
        let top: f64 = self.inputs[spec.depth]
            .iter()
            .zip(&other.inputs[spec.depth])
            .map(|(x, y)| x * y)
            .sum();
        acc + c as f64 * top / m as f64
    }

    /// Write `J(x)^T g` into `out` (length `p`), combining the logit rows
    /// with weights `g` in a single pass over the factor blocks.
    pub fn probe_combination(&self, g: &[f64], out: &mut [f64]) -> Result<()> {
        let spec = &self.spec;
        let m = spec.width;
        let c = spec.outputs;
        if g.len() != c {
            return Err(Error::Dim(format!("probe dim {} but outputs {}", g.len(), c)));
        }
        if out.len() != spec.param_count() {
            return Err(Error::Dim(format!(
                "output buffer {} but param count {}",
                out.len(),
                spec.param_count()
            )));
        }
        let mut offset = 0usize;
        for l in 0..spec.depth {
            let fan = if l == 0 { spec.input_dim } else { m };
            let inv = 1.0 / (fan as f64).sqrt();
            // g-weighted sensitivity for this layer.
            let mut mixed = vec![0.0; m];
            for ci in 0..c {
                let gc = g[ci];
                if gc == 0.0 {
                    continue;
                }
                for (mi, &s) in self.sens[l][ci * m..(ci + 1) * m].iter().enumerate() {
                    mixed[mi] += gc * s;
                }
            }
            let a = &self.inputs[l];
            for (i, &di) in mixed.iter().enumerate() {
                let base = offset + i * fan;
                let di = di * inv;
                for (j, &aj) in a.iter().enumerate() {
                    out[base + j] = di * aj;
                }
            }
            offset += m * fan;
        }
        let inv = 1.0 / (m as f64).sqrt();
        let h_last = &self.inputs[spec.depth];
        for (ci, &gc) in g.iter().enumerate() {
            let base = offset + ci * m;
            for (j, &hj) in h_last.iter().enumerate() {
                out[base + j] = gc * inv * hj;
            }
        }
        Ok(())
    }
}

/// Dense `C x p` Jacobian, row per logit.
#[derive(Debug, Clone)]
pub struct Jacobian {
    pub outputs: usize,
    pub params: usize,
    data: Vec<f64>,
}

impl Jacobian {
    pub fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.params..(c + 1) * self.params]
    }

    /// `tr(A B^T)` over the flattened rows.
    pub fn trace_inner(&self, other: &Jacobian) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Context that maps an input point to its logit Jacobian. `khat` and the
/// estimator consume this surface, so sources other than an MLP (fixtures,
/// other models) can plug in.
pub trait JacobianProvider: Sync {
    fn output_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    /// Overwrite `out` (length `param_dim`) with `J(x)^T g`.
    fn probe_combination(&self, x: &[f64], g: &[f64], out: &mut [f64]) -> Result<()>;

    /// Materialize `J(x)` by probing with basis vectors.
    fn jacobian(&self, x: &[f64]) -> Result<Jacobian> {
        let c = self.output_dim();
        let p = self.param_dim();
        if c * p > 200_000_000 {
            return Err(Error::Budget(format!(
                "dense Jacobian of {c} x {p} entries is above the materialization budget"
            )));
        }
        let mut data = vec![0.0; c * p];
        let mut g = vec![0.0; c];
        for ci in 0..c {
            g[ci] = 1.0;
            self.probe_combination(x, &g, &mut data[ci * p..(ci + 1) * p])?;
            g[ci] = 0.0;
        }
        Ok(Jacobian {
            outputs: c,
            params: p,
            data,
        })
    }
}

/// [`JacobianProvider`] backed by MLP parameters; recomputes the factor
/// bundle per call. Estimators that revisit the same points should cache
/// [`JacobianFactors`] instead.
pub struct MlpJacobianProvider {
    pub params: MlpParams,
}

impl JacobianProvider for MlpJacobianProvider {
    fn output_dim(&self) -> usize {
        self.params.spec.outputs
    }

    fn param_dim(&self) -> usize {
        self.params.spec.param_count()
    }

    fn probe_combination(&self, x: &[f64], g: &[f64], out: &mut [f64]) -> Result<()> {
        self.params.jacobian_factors(x)?.probe_combination(g, out)
    }
}

/// Exact `C x p` Jacobian of all logits at `x` by reverse accumulation.
pub fn mlp_jacobian(params: &MlpParams, x: &[f64]) -> Result<Jacobian> {
    let provider = MlpJacobianProvider {
        params: params.clone(),
    };
    provider.jacobian(x)
}

/// Desk-scale guards for the pairwise kernel assembly.
const MAX_NTK_POINTS: usize = 512;
const MAX_NTK_PARAMS: usize = 100_000_000;

/// Finite-width tangent kernel Gram matrix
/// `K[i][j] = tr(J(x_i) J(x_j)^T)` over the dataset.
pub fn ntk_finite(params: &MlpParams, data: &Dataset) -> Result<GramMatrix> {
    let spec = params.spec;
    if data.d != spec.input_dim {
        return Err(Error::Dim(format!(
            "dataset dim {} but network expects {}",
            data.d, spec.input_dim
        )));
    }
    if data.n > MAX_NTK_POINTS || spec.param_count() > MAX_NTK_PARAMS {
        return Err(Error::Budget(format!(
            "finite-width kernel assembly supports n <= {MAX_NTK_POINTS} and p <= {MAX_NTK_PARAMS}, got n={} p={}",
            data.n,
            spec.param_count()
        )));
    }
    let factors: Vec<Result<JacobianFactors>> = (0..data.n)
        .into_par_iter()
        .map(|i| params.jacobian_factors(data.point(i)))
        .collect();
    let factors: Vec<JacobianFactors> = factors.into_iter().collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = (0..data.n)
        .into_par_iter()
        .map(|i| {
            (i..data.n)
                .map(|j| factors[i].ntk_entry(&factors[j]))
                .collect()
        })
        .collect();
    GramMatrix::from_upper_rows(data.n, rows)
}

#[inline]
fn relu_pair_moment(u: f64, v: f64, w: f64) -> (f64, f64) {
    // E[relu(a) relu(b)] and E[relu'(a) relu'(b)] for centered jointly
    // Gaussian (a, b) with variances (u, v) and covariance w.
    let uv = (u * v).sqrt();
    let cos_t = (w / uv).clamp(-1.0, 1.0);
    let t = cos_t.acos();
    let pi = std::f64::consts::PI;
    let s = uv / (2.0 * pi) * (t.sin() + (pi - t) * cos_t);
    let sdot = (pi - t) / (2.0 * pi);
    (s, sdot)
}

/// Infinite-width tangent kernel of the ReLU MLP on a dataset, by the
/// recursion documented at module level. Fails on zero input vectors, where
/// the angle is undefined.
pub fn ntk_infinite_relu(spec: MlpSpec, data: &Dataset) -> Result<GramMatrix> {
    spec.validate()?;
    if data.d != spec.input_dim {
        return Err(Error::Dim(format!(
            "dataset dim {} but network expects {}",
            data.d, spec.input_dim
        )));
    }
    let d = spec.input_dim as f64;
    let norms_sq: Vec<f64> = (0..data.n)
        .map(|i| data.point(i).iter().map(|v| v * v).sum::<f64>())
        .collect();
    if let Some(i) = norms_sq.iter().position(|&v| v == 0.0) {
        return Err(Error::Domain(format!(
            "input {i} is the zero vector; the angle recursion is undefined"
        )));
    }

    let entry = |i: usize, j: usize| -> f64 {
        let mut u = norms_sq[i] / d;
        let mut v = norms_sq[j] / d;
        let mut w = data.point(i)
            .iter()
            .zip(data.point(j))
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / d;
        let mut ntk = w;
        for _ in 0..spec.depth {
            let (s, sdot) = relu_pair_moment(u, v, w);
            ntk = s + sdot * ntk;
            w = s;
            u *= 0.5;
            v *= 0.5;
        }
        spec.outputs as f64 * ntk
    };

    let rows: Vec<Vec<f64>> = (0..data.n)
        .into_par_iter()
        .map(|i| (i..data.n).map(|j| entry(i, j)).collect())
        .collect();
    GramMatrix::from_upper_rows(data.n, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{sample_dataset, DistSpec};
    use crate::linalg::{effective_rank_exact, sym_eigenvalues};
    use crate::rng::{tree_mean, tree_sample_variance};

    fn spec(d: usize, m: usize, l: usize, c: usize) -> MlpSpec {
        MlpSpec {
            input_dim: d,
            width: m,
            depth: l,
            outputs: c,
        }
    }

    #[test]
    fn init_is_deterministic_and_counts_params() {
        let s = spec(3, 4, 1, 2);
        assert_eq!(s.param_count(), 4 * 3 + 2 * 4);
        let a = mlp_init(s, 5).unwrap();
        let b = mlp_init(s, 5).unwrap();
        for l in 0..2 {
            assert_eq!(a.layer(l), b.layer(l));
        }
    }

    #[test]
    fn first_layer_mean_is_near_zero() {
        let s = spec(16, 64, 1, 1);
        let p = mlp_init(s, 3).unwrap();
        let w1 = p.layer(0);
        let mean = w1.iter().sum::<f64>() / w1.len() as f64;
        // 4 / sqrt(m d) CLT bound
        assert!(mean.abs() < 4.0 / ((64.0 * 16.0) as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let s = spec(3, 8, 2, 2);
        let mut params = mlp_init(s, 11).unwrap();
        let data = sample_dataset(DistSpec::StandardGaussian, 1, 3, 2).unwrap();
        let x = data.point(0).to_vec();
        let jac = mlp_jacobian(&params, &x).unwrap();

        let h = 1e-5;
        let mut col = 0usize;
        for l in 0..s.layer_count() {
            let len = params.layer(l).len();
            for idx in 0..len {
                let orig = params.layer(l)[idx];
                params.layer_mut(l)[idx] = orig + h;
                let up = params.forward(&x).unwrap();
                params.layer_mut(l)[idx] = orig - h;
                let down = params.forward(&x).unwrap();
                params.layer_mut(l)[idx] = orig;
                for c in 0..s.outputs {
                    let fd = (up[c] - down[c]) / (2.0 * h);
                    let an = jac.row(c)[col];
                    let denom = an.abs().max(1e-8);
                    assert!(
                        (fd - an).abs() <= 1e-4 * denom,
                        "layer {l} entry {idx} output {c}: fd {fd} vs {an}"
                    );
                }
                col += 1;
            }
        }
        assert_eq!(col, s.param_count());
    }

    #[test]
    fn jacobian_at_zero_input_is_zero() {
        let s = spec(4, 6, 2, 3);
        let params = mlp_init(s, 1).unwrap();
        let jac = mlp_jacobian(&params, &[0.0; 4]).unwrap();
        for c in 0..3 {
            assert!(jac.row(c).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn last_layer_block_replicates_activations() {
        let s = spec(3, 5, 2, 3);
        let params = mlp_init(s, 7).unwrap();
        let data = sample_dataset(DistSpec::StandardGaussian, 1, 3, 9).unwrap();
        let x = data.point(0);
        let factors = params.jacobian_factors(x).unwrap();
        let jac = mlp_jacobian(&params, x).unwrap();
        let m = s.width;
        let off = s.param_count() - s.outputs * m;
        let inv = 1.0 / (m as f64).sqrt();
        let h_last = &factors.inputs[s.depth];
        for c in 0..s.outputs {
            for cp in 0..s.outputs {
                for j in 0..m {
                    let want = if c == cp { inv * h_last[j] } else { 0.0 };
                    assert!((jac.row(c)[off + cp * m + j] - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn ntk_finite_matches_flat_jacobian_grams() {
        let s = spec(3, 8, 2, 2);
        let params = mlp_init(s, 21).unwrap();
        let data = sample_dataset(DistSpec::StandardGaussian, 6, 3, 4).unwrap();
        let k = ntk_finite(&params, &data).unwrap();
        // Independent route: materialize flat Jacobians, direct dot loop.
        let jacs: Vec<Jacobian> = (0..6)
            .map(|i| mlp_jacobian(&params, data.point(i)).unwrap())
            .collect();
        for i in 0..6 {
            for j in 0..6 {
                let mut direct = 0.0;
                for c in 0..s.outputs {
                    direct += jacs[i]
                        .row(c)
                        .iter()
                        .zip(jacs[j].row(c))
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
                let got = k.get(i, j);
                assert!(
                    (got - direct).abs() <= 1e-10 * direct.abs().max(1e-12),
                    "entry ({i},{j}): {got} vs {direct}"
                );
            }
        }
    }

    #[test]
    fn ntk_finite_single_point_positive_and_psd() {
        let s = spec(4, 16, 2, 2);
        let params = mlp_init(s, 2).unwrap();
        let one = sample_dataset(DistSpec::StandardGaussian, 1, 4, 3).unwrap();
        let k1 = ntk_finite(&params, &one).unwrap();
        assert!(k1.get(0, 0) > 0.0);

        let data = sample_dataset(DistSpec::StandardGaussian, 12, 4, 3).unwrap();
        let k = ntk_finite(&params, &data).unwrap();
        let min = sym_eigenvalues(&k).unwrap().min();
        assert!(min >= -k.tol_psd());
    }

    #[test]
    fn probe_combination_agrees_with_dense_jacobian() {
        let s = spec(3, 6, 2, 3);
        let params = mlp_init(s, 13).unwrap();
        let data = sample_dataset(DistSpec::StandardGaussian, 1, 3, 5).unwrap();
        let x = data.point(0);
        let jac = mlp_jacobian(&params, x).unwrap();
        let g = [0.7, -1.3, 0.4];
        let mut combo = vec![0.0; s.param_count()];
        params
            .jacobian_factors(x)
            .unwrap()
            .probe_combination(&g, &mut combo)
            .unwrap();
        for (idx, &v) in combo.iter().enumerate() {
            let direct: f64 = (0..3).map(|c| g[c] * jac.row(c)[idx]).sum();
            assert!((v - direct).abs() < 1e-12, "param {idx}: {v} vs {direct}");
        }
    }

    #[test]
    fn infinite_diagonal_matches_closed_form() {
        // K_inf(x, x) = C (L+1) 2^-L |x|^2 / d.
        for depth in 1..=3 {
            let s = spec(5, 7, depth, 2);
            let data = sample_dataset(DistSpec::StandardGaussian, 4, 5, 8).unwrap();
            let k = ntk_infinite_relu(s, &data).unwrap();
            for i in 0..4 {
                let norm_sq: f64 = data.point(i).iter().map(|v| v * v).sum();
                let want = 2.0 * (depth as f64 + 1.0) / (1u64 << depth) as f64 * norm_sq / 5.0;
                assert!(
                    (k.get(i, i) - want).abs() < 1e-12 * want,
                    "depth {depth}: {} vs {want}",
                    k.get(i, i)
                );
            }
        }
    }

    #[test]
    fn infinite_hand_recursion_one_layer() {
        // Orthogonal unit inputs, L = 1: entry is sqrt(uv) / (2 pi) with
        // u = v = 1/d.
        let s = spec(2, 3, 1, 1);
        let data = Dataset::from_raw_points(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let k = ntk_infinite_relu(s, &data).unwrap();
        let want = (0.5f64 * 0.5).sqrt() / (2.0 * std::f64::consts::PI);
        assert!((k.get(0, 1) - want).abs() < 1e-15);
        // Diagonal: u = 1/2, theta = 0 -> entry u.
        assert!((k.get(0, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn infinite_rejects_zero_input() {
        let s = spec(2, 3, 1, 1);
        let data = Dataset::from_raw_points(2, 2, vec![1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            ntk_infinite_relu(s, &data),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn infinite_is_permutation_equivariant() {
        let s = spec(3, 4, 2, 2);
        let data = sample_dataset(DistSpec::UnitSphere, 5, 3, 6).unwrap();
        let k = ntk_infinite_relu(s, &data).unwrap();
        let perm = [4, 2, 0, 1, 3];
        let mut permuted = Vec::new();
        for &i in &perm {
            permuted.extend_from_slice(data.point(i));
        }
        let pdata = Dataset::from_raw_points(5, 3, permuted);
        let pk = ntk_infinite_relu(s, &pdata).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                assert_eq!(pk.get(a, b), k.get(perm[a], perm[b]));
            }
        }
    }

    #[test]
    fn infinite_matches_wide_network_monte_carlo() {
        // Two orthogonal unit inputs, L = 1, C = 1, m = 8192: the analytic
        // off-diagonal entry must sit within 3 standard errors of the
        // across-seed mean of the finite-width kernel.
        let s = spec(2, 8192, 1, 1);
        let data = Dataset::from_raw_points(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let k_inf = ntk_infinite_relu(spec(2, 3, 1, 1), &data).unwrap();
        let entries: Vec<f64> = (0..30)
            .map(|seed| {
                let params = mlp_init(s, 1000 + seed).unwrap();
                ntk_finite(&params, &data).unwrap().get(0, 1)
            })
            .collect();
        let mean = tree_mean(&entries);
        let se = (tree_sample_variance(&entries) / entries.len() as f64).sqrt();
        let want = k_inf.get(0, 1);
        assert!(
            (mean - want).abs() <= 3.0 * se,
            "mc mean {mean} vs analytic {want} (se {se})"
        );
    }

    #[test]
    fn finite_width_deviation_shrinks_with_width() {
        // Median deviation from the infinite-width entries roughly halves
        // per 4x width.
        let data = sample_dataset(DistSpec::UnitSphere, 2, 4, 44).unwrap();
        let k_inf = ntk_infinite_relu(spec(4, 3, 1, 1), &data).unwrap();
        let mut medians = Vec::new();
        for &m in &[64usize, 256, 1024, 4096] {
            let mut devs: Vec<f64> = (0..9)
                .map(|seed| {
                    let params = mlp_init(spec(4, m, 1, 1), 50 + seed).unwrap();
                    let k = ntk_finite(&params, &data).unwrap();
                    (k.get(0, 1) - k_inf.get(0, 1)).abs()
                })
                .collect();
            devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(devs[4]);
        }
        // Overall drop across 64 -> 4096 should be near 1/8 (m^-1/2).
        let ratio = medians[0] / medians[3];
        assert!(
            (2.5..40.0).contains(&ratio),
            "medians {medians:?}, ratio {ratio}"
        );
        assert!(medians[3] < medians[0]);
    }

    #[test]
    fn input_scaling_is_quadratic_and_rank_invariant() {
        let s = spec(3, 12, 2, 2);
        let params = mlp_init(s, 77).unwrap();
        let data = sample_dataset(DistSpec::UnitSphere, 6, 3, 21).unwrap();
        let k = ntk_finite(&params, &data).unwrap();
        let scaled_points: Vec<f64> = data.points().iter().map(|v| 3.0 * v).collect();
        let scaled = Dataset::from_raw_points(6, 3, scaled_points);
        let ks = ntk_finite(&params, &scaled).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let want = 9.0 * k.get(i, j);
                assert!(
                    (ks.get(i, j) - want).abs() <= 1e-10 * want.abs().max(1e-12),
                    "entry ({i},{j})"
                );
            }
        }
        let r = effective_rank_exact(&k).unwrap();
        let rs = effective_rank_exact(&ks).unwrap();
        assert!((r - rs).abs() <= 1e-12 * r);
    }

    #[test]
    fn budget_guard_rejects_oversized_requests() {
        let s = spec(2, 4, 1, 1);
        let params = mlp_init(s, 0).unwrap();
        let data = sample_dataset(DistSpec::StandardGaussian, 600, 2, 0).unwrap();
        assert!(matches!(
            ntk_finite(&params, &data),
            Err(Error::Budget(_))
        ));
    }
}
