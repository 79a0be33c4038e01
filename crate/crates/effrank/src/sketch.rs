//! CountSketch of parameter-space vectors and the probe-based kernel entry
//! estimator.
//!
//! Two layers of randomness make a single kernel entry cheap:
//!
//! * output probes `g` with `E[g g^T] = I_C` turn the `C x p` Jacobian into
//!   one `p`-vector `J(x)^T g`, unbiased for the trace inner product
//!   `E_g[<J(x)^T g, J(x')^T g>] = tr(J(x) J(x')^T)`;
//! * a CountSketch `Phi` with independently hashed buckets and signs
//!   compresses those `p`-vectors to `R` buckets while preserving inner
//!   products in expectation; with 4-wise independent hashes the variance is
//!   exactly `(|u|^2 |v|^2 + <u,v>^2 - 2 sum_j u_j^2 v_j^2) / R`.
//!
//! The entry estimate averages `G` probes under one sketch draw.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ntk::JacobianProvider;
use crate::rng::{substream, Role};

/// Probe vector law. Both choices satisfy `E[g g^T] = I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    Gaussian,
    Rademacher,
}

impl ProbeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::Gaussian => "gaussian",
            ProbeKind::Rademacher => "rademacher",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(ProbeKind::Gaussian),
            "rademacher" => Ok(ProbeKind::Rademacher),
            other => Err(Error::Config(format!("unknown probe kind {other:?}"))),
        }
    }

    pub(crate) fn fill(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            ProbeKind::Gaussian => {
                for v in out {
                    *v = StandardNormal.sample(rng);
                }
            }
            ProbeKind::Rademacher => {
                for v in out {
                    *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
            }
        }
    }
}

/// Probe configuration: law, probes per estimate, and the seed the probe
/// substreams key off.
#[derive(Debug, Clone, Copy)]
pub struct ProbeSpec {
    pub kind: ProbeKind,
    /// Probes averaged per estimate (G >= 1).
    pub count: usize,
    pub seed: u64,
}

impl ProbeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::Config("probe count must be >= 1".into()));
        }
        Ok(())
    }
}

// Mersenne prime field for the hash polynomials.
const HASH_PRIME: u64 = (1 << 61) - 1;

#[inline]
fn mod_p(mut v: u64) -> u64 {
    v = (v & HASH_PRIME) + (v >> 61);
    if v >= HASH_PRIME {
        v - HASH_PRIME
    } else {
        v
    }
}

#[inline]
fn mul_mod(a: u64, b: u64) -> u64 {
    let z = a as u128 * b as u128;
    let folded = (z & HASH_PRIME as u128) as u64 + (z >> 61) as u64;
    mod_p(folded)
}

/// Degree-3 hash polynomial over the 2^61 - 1 field; a 4-wise independent
/// family. Pairwise independence already gives unbiased sketched inner
/// products, but their variance only scales cleanly as 1/R when 4-tuples of
/// hash values are independent too, so the stronger family is used.
#[derive(Debug, Clone, Copy)]
struct PolyHash {
    coeffs: [u64; 4],
}

impl PolyHash {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let mut coeffs = [0u64; 4];
        for c in &mut coeffs {
            *c = rng.random_range(0..HASH_PRIME);
        }
        PolyHash { coeffs }
    }

    #[inline]
    fn eval(&self, x: u64) -> u64 {
        let mut acc = self.coeffs[3];
        for &c in self.coeffs[..3].iter().rev() {
            acc = mod_p(mul_mod(acc, x) + c);
        }
        acc
    }
}

/// CountSketch `Phi in R^{R x p}`: coordinate `j` lands in bucket `h(j)` with
/// sign `s(j)`, both from independent 4-wise independent polynomial hash
/// families.
#[derive(Debug, Clone, Copy)]
pub struct CountSketch {
    buckets: usize,
    input_dim: usize,
    bucket_hash: PolyHash,
    sign_hash: PolyHash,
}

impl CountSketch {
    /// Draw hash parameters from the substream `(seed, Sketch, 0)`.
    pub fn new(buckets: usize, input_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, Role::Sketch, 0);
        Self::from_rng(buckets, input_dim, &mut rng)
    }

    /// Draw hash parameters from an already-positioned stream.
    pub fn from_rng(buckets: usize, input_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if buckets < 1 {
            return Err(Error::Config("bucket count must be >= 1".into()));
        }
        if input_dim as u64 >= HASH_PRIME {
            return Err(Error::Budget(format!(
                "sketch input dim {input_dim} exceeds the hash key range"
            )));
        }
        Ok(CountSketch {
            buckets,
            input_dim,
            bucket_hash: PolyHash::draw(rng),
            sign_hash: PolyHash::draw(rng),
        })
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Bucket of coordinate `j`.
    #[inline]
    pub fn bucket(&self, j: usize) -> usize {
        // Fixed-point scaling of the 61-bit hash value into [0, R).
        ((self.bucket_hash.eval(j as u64) as u128 * self.buckets as u128) >> 61) as usize
    }

    /// Sign of coordinate `j`.
    #[inline]
    pub fn sign(&self, j: usize) -> f64 {
        if self.sign_hash.eval(j as u64) & 1 == 1 {
            -1.0
        } else {
            1.0
        }
    }

    /// `Phi u`: bucket `r` accumulates `sum_{j: h(j)=r} s(j) u_j`.
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.input_dim {
            return Err(Error::Dim(format!(
                "sketch input of length {}, expected {}",
                u.len(),
                self.input_dim
            )));
        }
        let mut out = vec![0.0; self.buckets];
        self.apply_into(u, &mut out);
        Ok(out)
    }

    #[inline]
    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &uj) in u.iter().enumerate() {
            if uj != 0.0 {
                out[self.bucket(j)] += self.sign(j) * uj;
            }
        }
    }

    /// `<Phi u, Phi v>`; unbiased for `<u, v>` over the hash draw.
    pub fn inner(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        if u.len() != v.len() {
            return Err(Error::Dim(format!(
                "sketch operands of lengths {} and {}",
                u.len(),
                v.len()
            )));
        }
        let su = self.apply(u)?;
        let sv = self.apply(v)?;
        Ok(su.iter().zip(&sv).map(|(a, b)| a * b).sum())
    }

    /// Tabulate buckets and signs for all coordinates. Worth it whenever the
    /// same sketch is applied more than once (e.g. across probes).
    fn plan(&self) -> SketchPlan {
        let mut buckets = Vec::with_capacity(self.input_dim);
        let mut signs = Vec::with_capacity(self.input_dim);
        for j in 0..self.input_dim {
            buckets.push(self.bucket(j) as u32);
            signs.push(self.sign(j));
        }
        SketchPlan { buckets, signs }
    }
}

struct SketchPlan {
    buckets: Vec<u32>,
    signs: Vec<f64>,
}

impl SketchPlan {
    #[inline]
    fn apply_into(&self, u: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (j, &uj) in u.iter().enumerate() {
            if uj != 0.0 {
                out[self.buckets[j] as usize] += self.signs[j] * uj;
            }
        }
    }
}

/// Shared core of the entry estimator: average over `count` probes of
/// `<Phi a_g, Phi b_g>` where `a_g`/`b_g` are filled by the two closures.
pub(crate) fn khat_with(
    output_dim: usize,
    param_dim: usize,
    probes: &ProbeSpec,
    cs: &CountSketch,
    mut fill_a: impl FnMut(&[f64], &mut [f64]) -> Result<()>,
    mut fill_b: impl FnMut(&[f64], &mut [f64]) -> Result<()>,
) -> Result<f64> {
    probes.validate()?;
    if cs.input_dim() != param_dim {
        return Err(Error::Dim(format!(
            "sketch input dim {} but parameter dim {}",
            cs.input_dim(),
            param_dim
        )));
    }
    let plan = cs.plan();
    let mut g = vec![0.0; output_dim];
    let mut va = vec![0.0; param_dim];
    let mut vb = vec![0.0; param_dim];
    let mut sa = vec![0.0; cs.buckets()];
    let mut sb = vec![0.0; cs.buckets()];
    let mut acc = 0.0;
    for gi in 0..probes.count {
        let mut rng = substream(probes.seed, Role::Probe, gi as u64);
        probes.kind.fill(&mut rng, &mut g);
        fill_a(&g, &mut va)?;
        fill_b(&g, &mut vb)?;
        if va.iter().chain(vb.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(
                "non-finite Jacobian combination in entry estimator".into(),
            ));
        }
        plan.apply_into(&va, &mut sa);
        plan.apply_into(&vb, &mut sb);
        acc += sa.iter().zip(&sb).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(acc / probes.count as f64)
}

/// Sketch/probe estimate of the kernel entry `k(x, x') = tr(J(x) J(x')^T)`:
///
/// ```text
/// khat(x, x') = (1/G) sum_g <Phi J(x)^T g, Phi J(x')^T g>
/// ```
///
/// Conditionally unbiased for the exact entry over the joint probe and
/// sketch randomness.
pub fn khat<J: JacobianProvider + ?Sized>(
    jp: &J,
    x: &[f64],
    y: &[f64],
    probes: &ProbeSpec,
    cs: &CountSketch,
) -> Result<f64> {
    khat_with(
        jp.output_dim(),
        jp.param_dim(),
        probes,
        cs,
        |g, out| jp.probe_combination(x, g, out),
        |g, out| jp.probe_combination(y, g, out),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{sample_dataset, DistSpec};
    use crate::ntk::{mlp_init, mlp_jacobian, MlpJacobianProvider, MlpSpec};
    use crate::rng::{tree_mean, tree_sample_variance};
    use proptest::prelude::*;

    fn gaussian_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = substream(seed, Role::Init, len as u64);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    /// Find a sketch seed whose bucket hash is injective on `support`.
    fn injective_sketch(buckets: usize, dim: usize, support: &[usize]) -> CountSketch {
        for seed in 0..10_000u64 {
            let cs = CountSketch::new(buckets, dim, seed).unwrap();
            let mut seen = std::collections::HashSet::new();
            if support.iter().all(|&j| seen.insert(cs.bucket(j))) {
                return cs;
            }
        }
        panic!("no injective sketch found for support of {}", support.len());
    }

    #[test]
    fn apply_of_zero_is_zero() {
        let cs = CountSketch::new(8, 32, 1).unwrap();
        let out = cs.apply(&vec![0.0; 32]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn basis_vector_lands_in_one_bucket_with_unit_sign() {
        let cs = CountSketch::new(16, 64, 3).unwrap();
        for j in [0usize, 17, 63] {
            let mut u = vec![0.0; 64];
            u[j] = 1.0;
            let out = cs.apply(&u).unwrap();
            let nonzero: Vec<(usize, f64)> = out
                .iter()
                .cloned()
                .enumerate()
                .filter(|(_, v)| *v != 0.0)
                .collect();
            assert_eq!(nonzero.len(), 1);
            assert_eq!(nonzero[0].0, cs.bucket(j));
            assert_eq!(nonzero[0].1.abs(), 1.0);
        }
    }

    #[test]
    fn injective_support_preserves_inner_products_exactly() {
        let support = [2usize, 11, 29];
        let cs = injective_sketch(64, 32, &support);
        let mut u = vec![0.0; 32];
        let mut v = vec![0.0; 32];
        u[2] = 1.5;
        u[11] = -0.5;
        v[11] = 2.0;
        v[29] = 4.0;
        let exact: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        assert_eq!(cs.inner(&u, &v).unwrap(), exact);
    }

    #[test]
    fn disjoint_support_without_collisions_gives_zero() {
        let support = [1usize, 5, 9, 13];
        let cs = injective_sketch(64, 16, &support);
        let mut u = vec![0.0; 16];
        let mut v = vec![0.0; 16];
        u[1] = 3.0;
        u[5] = -2.0;
        v[9] = 1.0;
        v[13] = 7.0;
        assert_eq!(cs.inner(&u, &v).unwrap(), 0.0);
    }

    #[test]
    fn sketch_inner_is_unbiased_and_variance_bounded() {
        // Monte Carlo over sketch seeds against the exact dot product, plus
        // the 1/R variance bound for independent draws of u and v.
        let p = 256;
        let r = 32;
        let u = gaussian_vec(p, 10);
        let v = gaussian_vec(p, 11);
        let exact: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let trials = 20_000;
        let vals: Vec<f64> = (0..trials)
            .map(|s| {
                CountSketch::new(r, p, s as u64)
                    .unwrap()
                    .inner(&u, &v)
                    .unwrap()
            })
            .collect();
        let mean = tree_mean(&vals);
        let var = tree_sample_variance(&vals);
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - exact).abs() <= 4.0 * se,
            "mean {mean} vs exact {exact} (se {se})"
        );
        let nu: f64 = u.iter().map(|a| a * a).sum();
        let nv: f64 = v.iter().map(|a| a * a).sum();
        assert!(
            var <= 1.05 * nu * nv / r as f64,
            "var {var} vs bound {}",
            nu * nv / r as f64
        );
    }

    #[test]
    fn sketch_is_linear() {
        let cs = CountSketch::new(16, 40, 7).unwrap();
        let u = gaussian_vec(40, 1);
        let v = gaussian_vec(40, 2);
        let sum: Vec<f64> = u.iter().zip(&v).map(|(a, b)| 2.0 * a - 3.0 * b).collect();
        let su = cs.apply(&u).unwrap();
        let sv = cs.apply(&v).unwrap();
        let ssum = cs.apply(&sum).unwrap();
        for i in 0..16 {
            assert!((ssum[i] - (2.0 * su[i] - 3.0 * sv[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn khat_exact_in_rademacher_no_collision_configuration() {
        // C = 1 and g^2 = 1, with an injective sketch over all parameters:
        // every probe reproduces <J(x), J(x')> exactly.
        let spec = MlpSpec {
            input_dim: 3,
            width: 4,
            depth: 1,
            outputs: 1,
        };
        let params = mlp_init(spec, 5).unwrap();
        let p = spec.param_count();
        let data = sample_dataset(DistSpec::StandardGaussian, 2, 3, 7).unwrap();
        let all: Vec<usize> = (0..p).collect();
        let cs = injective_sketch(4 * p, p, &all);
        let provider = MlpJacobianProvider {
            params: params.clone(),
        };
        let ja = mlp_jacobian(&params, data.point(0)).unwrap();
        let jb = mlp_jacobian(&params, data.point(1)).unwrap();
        let exact = ja.trace_inner(&jb);
        for seed in 0..5 {
            let probes = ProbeSpec {
                kind: ProbeKind::Rademacher,
                count: 1,
                seed,
            };
            let est = khat(&provider, data.point(0), data.point(1), &probes, &cs).unwrap();
            assert!(
                (est - exact).abs() <= 1e-10 * exact.abs().max(1e-12),
                "seed {seed}: {est} vs {exact}"
            );
        }

        // x = x': strictly positive and unbiased for |J(x)|_F^2.
        let diag = khat(
            &provider,
            data.point(0),
            data.point(0),
            &ProbeSpec {
                kind: ProbeKind::Rademacher,
                count: 1,
                seed: 0,
            },
            &cs,
        )
        .unwrap();
        let want = ja.trace_inner(&ja);
        assert!(diag > 0.0);
        assert!((diag - want).abs() <= 1e-10 * want);
    }

    #[test]
    fn khat_mean_matches_exact_entry_across_seed_pairs() {
        let spec = MlpSpec {
            input_dim: 3,
            width: 8,
            depth: 1,
            outputs: 2,
        };
        let params = mlp_init(spec, 9).unwrap();
        let data = sample_dataset(DistSpec::StandardGaussian, 2, 3, 13).unwrap();
        let provider = MlpJacobianProvider {
            params: params.clone(),
        };
        let exact = mlp_jacobian(&params, data.point(0))
            .unwrap()
            .trace_inner(&mlp_jacobian(&params, data.point(1)).unwrap());
        let p = spec.param_count();
        for (kind, collisions) in [
            (ProbeKind::Gaussian, true),
            (ProbeKind::Gaussian, false),
            (ProbeKind::Rademacher, true),
            (ProbeKind::Rademacher, false),
        ] {
            let buckets = if collisions { 8 } else { 8 * p };
            let trials = 10_000;
            let vals: Vec<f64> = (0..trials)
                .map(|t| {
                    let cs = CountSketch::new(buckets, p, 90_000 + t as u64).unwrap();
                    let probes = ProbeSpec {
                        kind,
                        count: 2,
                        seed: 50_000 + t as u64,
                    };
                    khat(&provider, data.point(0), data.point(1), &probes, &cs).unwrap()
                })
                .collect();
            let mean = tree_mean(&vals);
            let se = (tree_sample_variance(&vals) / trials as f64).sqrt();
            assert!(
                (mean - exact).abs() <= 4.0 * se,
                "{kind:?} collisions={collisions}: mean {mean} vs exact {exact} (se {se})"
            );
        }
    }

    #[test]
    fn khat_variance_splits_across_probes_and_buckets() {
        // Empirical Var(khat) ~ c_g / G + c_r / R: doubling G with huge R
        // roughly halves the variance, and so does doubling R at fixed G.
        let spec = MlpSpec {
            input_dim: 3,
            width: 8,
            depth: 1,
            outputs: 3,
        };
        let params = mlp_init(spec, 31).unwrap();
        let data = sample_dataset(DistSpec::StandardGaussian, 2, 3, 17).unwrap();
        let provider = MlpJacobianProvider {
            params: params.clone(),
        };
        let p = spec.param_count();
        let trials = 30_000;
        let var_at = |g: usize, r: usize, tag: u64| -> f64 {
            let vals: Vec<f64> = (0..trials)
                .map(|t| {
                    let cs = CountSketch::new(r, p, tag * 1_000_000 + t as u64).unwrap();
                    let probes = ProbeSpec {
                        kind: ProbeKind::Gaussian,
                        count: g,
                        seed: (tag + 7) * 1_000_000 + t as u64,
                    };
                    khat(&provider, data.point(0), data.point(1), &probes, &cs).unwrap()
                })
                .collect();
            tree_sample_variance(&vals)
        };
        let huge_r = 64 * p;
        let v_g1 = var_at(1, huge_r, 1);
        let v_g2 = var_at(2, huge_r, 2);
        let ratio_g = v_g2 / v_g1;
        assert!(
            (0.35..0.65).contains(&ratio_g),
            "probe doubling ratio {ratio_g}"
        );
        let v_r8 = var_at(64, 8, 3);
        let v_r16 = var_at(64, 16, 4);
        let ratio_r = v_r16 / v_r8;
        assert!(
            (0.35..0.70).contains(&ratio_r),
            "bucket doubling ratio {ratio_r}"
        );
    }

    #[test]
    fn khat_is_bilinear_in_jacobian_rows_at_fixed_seeds() {
        // Scaling all weights of the readout layer scales J linearly in the
        // probed rows; with frozen probe and sketch seeds khat scales
        // accordingly on both sides.
        let spec = MlpSpec {
            input_dim: 2,
            width: 4,
            depth: 1,
            outputs: 1,
        };
        let params = mlp_init(spec, 3).unwrap();
        let data = sample_dataset(DistSpec::StandardGaussian, 2, 2, 5).unwrap();
        let provider = MlpJacobianProvider {
            params: params.clone(),
        };
        let cs = CountSketch::new(64, spec.param_count(), 11).unwrap();
        let probes = ProbeSpec {
            kind: ProbeKind::Gaussian,
            count: 4,
            seed: 13,
        };
        let base = khat(&provider, data.point(0), data.point(1), &probes, &cs).unwrap();
        let scaled_x: Vec<f64> = data.point(0).iter().map(|v| 2.0 * v).collect();
        // First layer is linear pre-activation; scaling the input by c > 0
        // scales J(x) rows by c for a 1-hidden-layer ReLU net.
        let scaled = khat(&provider, &scaled_x, data.point(1), &probes, &cs).unwrap();
        assert!(
            (scaled - 2.0 * base).abs() <= 1e-10 * base.abs().max(1e-12),
            "{scaled} vs {}",
            2.0 * base
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bucket_and_sign_are_in_range(seed in 0u64..5_000, j in 0usize..4096) {
            let cs = CountSketch::new(48, 4096, seed).unwrap();
            prop_assert!(cs.bucket(j) < 48);
            let s = cs.sign(j);
            prop_assert!(s == 1.0 || s == -1.0);
        }
    }
}
