//! End-to-end effective-rank estimator: subsampled trace, subsampled squared
//! Frobenius norm, and their plug-in ratio.
//!
//! With `n` points and an entry source `khat(i, j)`,
//!
//! ```text
//! trace_hat = (n / M) sum_t khat(i_t, i_t)         i_t ~ Unif[n]
//! frob2_hat = (n^2 / P) sum_t w_t                  (a_t, b_t) ~ Unif[n]^2
//! reff_hat  = trace_hat^2 / frob2_hat
//! ```
//!
//! In `Split` mode `w_t` multiplies two independent entry estimates, which
//! keeps `frob2_hat` unbiased even when entries are noisy; `Plain` mode
//! squares a single estimate and is biased upward by the entry variance.
//! Both are provided. All index, probe, and sketch randomness flows from
//! counter-based substreams keyed by `(master_seed, role, sample index)`,
//! so estimates are reproducible for any degree of parallelism.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{Dataset, KernelSpec};
use crate::linalg::GramMatrix;
use crate::ntk::{JacobianFactors, MlpParams};
use crate::rng::{mix, substream, tree_mean, tree_sample_variance, tree_sum, Role};
use crate::sketch::{khat_with, CountSketch, ProbeKind, ProbeSpec};

/// How the squared entry in the Frobenius sum is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrobeniusMode {
    /// Product of two independent entry estimates; unbiased for the square.
    Split,
    /// Square of a single estimate; biased upward by the entry variance.
    Plain,
}

impl FrobeniusMode {
    pub fn name(&self) -> &'static str {
        match self {
            FrobeniusMode::Split => "split",
            FrobeniusMode::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "split" => Ok(FrobeniusMode::Split),
            "plain" => Ok(FrobeniusMode::Plain),
            other => Err(Error::Config(format!("unknown frobenius mode {other:?}"))),
        }
    }
}

/// Sampling budget and randomness contract for one estimate.
#[derive(Debug, Clone, Copy)]
pub struct EstimatorConfig {
    /// Diagonal samples (M).
    pub diag_samples: usize,
    /// Pair samples (P).
    pub pair_samples: usize,
    /// Output probes per entry estimate (G).
    pub probes: usize,
    /// CountSketch buckets (R).
    pub sketch_buckets: usize,
    pub probe_kind: ProbeKind,
    pub frobenius_mode: FrobeniusMode,
    pub master_seed: u64,
    /// Sweep every diagonal entry and every ordered pair exactly once
    /// instead of sampling. With exact entries this reproduces the direct
    /// computation up to summation order.
    pub exhaustive: bool,
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.diag_samples < 1
            || self.pair_samples < 1
            || self.probes < 1
            || self.sketch_buckets < 1
        {
            return Err(Error::Config(
                "estimator budgets M, P, G, R must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One finished estimate with its sampling diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct Estimate {
    pub trace_hat: f64,
    pub frob2_hat: f64,
    /// Present only when `frob2_hat > 0`.
    pub reff_hat: Option<f64>,
    /// First-order standard error of the ratio.
    pub se_reff: Option<f64>,
    pub var_trace: f64,
    pub var_frob2: f64,
    #[serde(rename = "M")]
    pub diag_samples: usize,
    #[serde(rename = "P")]
    pub pair_samples: usize,
    #[serde(rename = "G")]
    pub probes: usize,
    #[serde(rename = "R")]
    pub sketch_buckets: usize,
    pub mode: String,
    pub seed: u64,
    #[serde(skip)]
    pub wall_time_ms: f64,
}

/// Source of (possibly noisy) kernel entry values over `n` indexed points.
///
/// `eval_index` identifies the evaluation slot; sources that consume probe
/// or sketch randomness must key it off `(cfg.master_seed, eval_index)` so
/// each slot is an independent draw.
pub trait EntrySource: Sync {
    fn n(&self) -> usize;
    fn entry(&self, i: usize, j: usize, cfg: &EstimatorConfig, eval_index: u64) -> Result<f64>;
}

/// Exact entries from a dense Gram matrix.
pub struct ExactGramSource<'a> {
    pub gram: &'a GramMatrix,
}

impl EntrySource for ExactGramSource<'_> {
    fn n(&self) -> usize {
        self.gram.n()
    }

    fn entry(&self, i: usize, j: usize, _cfg: &EstimatorConfig, _eval: u64) -> Result<f64> {
        Ok(self.gram.get(i, j))
    }
}

/// Exact entries evaluated on demand from a kernel and dataset, without
/// assembling the Gram matrix.
pub struct ExactKernelSource<'a> {
    pub kernel: &'a KernelSpec,
    pub data: &'a Dataset,
}

impl EntrySource for ExactKernelSource<'_> {
    fn n(&self) -> usize {
        self.data.n
    }

    fn entry(&self, i: usize, j: usize, _cfg: &EstimatorConfig, _eval: u64) -> Result<f64> {
        self.kernel.eval(self.data.point(i), self.data.point(j))
    }
}

/// Sketch/probe entries over cached Jacobian factors of a network. Each
/// evaluation slot draws a fresh sketch and fresh probes.
pub struct SketchProbeSource {
    factors: Vec<JacobianFactors>,
    output_dim: usize,
    param_dim: usize,
}

impl SketchProbeSource {
    pub fn from_mlp(params: &MlpParams, data: &Dataset) -> Result<Self> {
        if data.d != params.spec.input_dim {
            return Err(Error::Dim(format!(
                "dataset dim {} but network expects {}",
                data.d, params.spec.input_dim
            )));
        }
        let factors: Vec<Result<JacobianFactors>> = (0..data.n)
            .into_par_iter()
            .map(|i| params.jacobian_factors(data.point(i)))
            .collect();
        let factors: Vec<JacobianFactors> = factors.into_iter().collect::<Result<_>>()?;
        Ok(SketchProbeSource {
            output_dim: params.spec.outputs,
            param_dim: params.spec.param_count(),
            factors,
        })
    }
}

impl EntrySource for SketchProbeSource {
    fn n(&self) -> usize {
        self.factors.len()
    }

    fn entry(&self, i: usize, j: usize, cfg: &EstimatorConfig, eval_index: u64) -> Result<f64> {
        let probes = ProbeSpec {
            kind: cfg.probe_kind,
            count: cfg.probes,
            seed: mix(cfg.master_seed, Role::Probe, eval_index),
        };
        let cs = CountSketch::new(
            cfg.sketch_buckets,
            self.param_dim,
            mix(cfg.master_seed, Role::Sketch, eval_index),
        )?;
        khat_with(
            self.output_dim,
            self.param_dim,
            &probes,
            &cs,
            |g, out| self.factors[i].probe_combination(g, out),
            |g, out| self.factors[j].probe_combination(g, out),
        )
    }
}

// Evaluation slot layout: diagonal slot t is t; pair slot t owns two ids in
// a disjoint range so no slot ever shares probe or sketch randomness.
const PAIR_EVAL_BASE: u64 = 1 << 62;

/// Subsampled trace estimate; returns `(trace_hat, var_of_estimate)`.
pub fn estimate_trace(source: &dyn EntrySource, cfg: &EstimatorConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let n = source.n();
    if cfg.exhaustive {
        let vals: Vec<Result<f64>> = (0..n)
            .into_par_iter()
            .map(|i| source.entry(i, i, cfg, i as u64))
            .collect();
        let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
        return Ok((tree_sum(&vals), 0.0));
    }
    let m = cfg.diag_samples;
    let vals: Vec<Result<f64>> = (0..m)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(cfg.master_seed, Role::Diag, t as u64);
            let i = rng.random_range(0..n);
            Ok(n as f64 * source.entry(i, i, cfg, t as u64)?)
        })
        .collect();
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    Ok((tree_mean(&vals), tree_sample_variance(&vals) / m as f64))
}

/// Subsampled squared-Frobenius estimate; returns `(frob2_hat, var)`.
pub fn estimate_frobenius(source: &dyn EntrySource, cfg: &EstimatorConfig) -> Result<(f64, f64)> {
    cfg.validate()?;
    let n = source.n();
    let squared = |a: usize, b: usize, slot: u64| -> Result<f64> {
        let first = source.entry(a, b, cfg, PAIR_EVAL_BASE + 2 * slot)?;
        match cfg.frobenius_mode {
            FrobeniusMode::Plain => Ok(first * first),
            FrobeniusMode::Split => {
                let second = source.entry(a, b, cfg, PAIR_EVAL_BASE + 2 * slot + 1)?;
                Ok(first * second)
            }
        }
    };
    if cfg.exhaustive {
        let rows: Vec<Result<f64>> = (0..n)
            .into_par_iter()
            .map(|a| {
                let mut acc = Vec::with_capacity(n);
                for b in 0..n {
                    acc.push(squared(a, b, (a * n + b) as u64)?);
                }
                Ok(tree_sum(&acc))
            })
            .collect();
        let rows: Vec<f64> = rows.into_iter().collect::<Result<_>>()?;
        return Ok((tree_sum(&rows), 0.0));
    }
    let p = cfg.pair_samples;
    let vals: Vec<Result<f64>> = (0..p)
        .into_par_iter()
        .map(|t| {
            let mut rng = substream(cfg.master_seed, Role::Pair, t as u64);
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            Ok((n * n) as f64 * squared(a, b, t as u64)?)
        })
        .collect();
    let vals: Vec<f64> = vals.into_iter().collect::<Result<_>>()?;
    Ok((tree_mean(&vals), tree_sample_variance(&vals) / p as f64))
}

/// Full effective-rank estimate with diagnostics. Fails with
/// [`Error::DegenerateEstimate`] when the Frobenius component is not
/// positive (possible in `Split` mode, where products carry signs); the raw
/// components ride along in the error.
pub fn estimate_reff(source: &dyn EntrySource, cfg: &EstimatorConfig) -> Result<Estimate> {
    let start = std::time::Instant::now();
    let (trace_hat, var_trace) = estimate_trace(source, cfg)?;
    let (frob2_hat, var_frob2) = estimate_frobenius(source, cfg)?;
    let mut est = Estimate {
        trace_hat,
        frob2_hat,
        reff_hat: None,
        se_reff: None,
        var_trace,
        var_frob2,
        diag_samples: cfg.diag_samples,
        pair_samples: cfg.pair_samples,
        probes: cfg.probes,
        sketch_buckets: cfg.sketch_buckets,
        mode: cfg.frobenius_mode.name().to_string(),
        seed: cfg.master_seed,
        wall_time_ms: 0.0,
    };
    if frob2_hat <= 0.0 {
        est.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        return Err(Error::DegenerateEstimate(Box::new(est)));
    }
    let reff = trace_hat * trace_hat / frob2_hat;
    // First-order error propagation for x^2 / y.
    let se = if trace_hat != 0.0 {
        reff * (4.0 * var_trace / (trace_hat * trace_hat)
            + var_frob2 / (frob2_hat * frob2_hat))
            .sqrt()
    } else {
        0.0
    };
    est.reff_hat = Some(reff);
    est.se_reff = Some(se);
    est.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gram, sample_dataset, DistSpec};
    use crate::linalg::effective_rank_exact;
    use crate::ntk::{mlp_init, ntk_finite, MlpSpec};

    fn cfg(m: usize, p: usize, g: usize, r: usize, seed: u64) -> EstimatorConfig {
        EstimatorConfig {
            diag_samples: m,
            pair_samples: p,
            probes: g,
            sketch_buckets: r,
            probe_kind: ProbeKind::Rademacher,
            frobenius_mode: FrobeniusMode::Split,
            master_seed: seed,
            exhaustive: false,
        }
    }

    #[test]
    fn trace_exact_on_identity_for_any_budget() {
        let id = GramMatrix::identity(9);
        let source = ExactGramSource { gram: &id };
        for m in [1usize, 3, 17] {
            let (t, _) = estimate_trace(&source, &cfg(m, 1, 1, 1, m as u64)).unwrap();
            assert_eq!(t, 9.0);
        }
    }

    #[test]
    fn trace_exact_on_constant_diagonal() {
        let k = GramMatrix::from_diag(&[2.5; 7]).unwrap();
        let source = ExactGramSource { gram: &k };
        let (t, v) = estimate_trace(&source, &cfg(5, 1, 1, 1, 3)).unwrap();
        assert_eq!(t, 7.0 * 2.5);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn trace_unbiased_and_variance_scales_inversely_in_m() {
        let data = sample_dataset(DistSpec::UniformCube, 64, 1, 5).unwrap();
        let k = gram(&KernelSpec::MercerPowerLaw { alpha: 1.0, scale: 1.0, truncation: 16 }, &data)
            .unwrap();
        let source = ExactGramSource { gram: &k };
        let exact = k.trace();
        let seeds = 600;
        let mut means = Vec::new();
        let mut vars = Vec::new();
        for &m in &[32usize, 128] {
            let ests: Vec<f64> = (0..seeds)
                .map(|s| estimate_trace(&source, &cfg(m, 1, 1, 1, s as u64)).unwrap().0)
                .collect();
            means.push(tree_mean(&ests));
            vars.push(tree_sample_variance(&ests));
        }
        for mean in &means {
            let se = (vars[0] / seeds as f64).sqrt().max(1e-12);
            assert!((mean - exact).abs() <= 4.0 * se.max((vars[1] / seeds as f64).sqrt()));
        }
        let ratio = vars[0] / vars[1];
        assert!((2.4..6.8).contains(&ratio), "var ratio {ratio} (expect ~4)");
    }

    #[test]
    fn frobenius_exact_on_all_ones() {
        let ones = GramMatrix::from_fn(2, |_, _| 1.0).unwrap();
        let source = ExactGramSource { gram: &ones };
        for p in [1usize, 4, 33] {
            let (f2, _) = estimate_frobenius(&source, &cfg(1, p, 1, 1, p as u64)).unwrap();
            assert_eq!(f2, 4.0);
        }
    }

    #[test]
    fn frobenius_expectation_matches_pair_enumeration() {
        // Uniform ordered pairs on [3]x[3]: expectation of n^2 w equals the
        // enumerated average, which is the squared Frobenius norm.
        let k = GramMatrix::from_diag(&[3.0, -1.0, 0.5]).unwrap();
        let mut enumerated = 0.0;
        for a in 0..3 {
            for b in 0..3 {
                enumerated += k.get(a, b) * k.get(a, b);
            }
        }
        assert!((enumerated - k.frob_sq()).abs() < 1e-14);
        let source = ExactGramSource { gram: &k };
        let seeds = 4000;
        let ests: Vec<f64> = (0..seeds)
            .map(|s| estimate_frobenius(&source, &cfg(1, 16, 1, 1, s as u64)).unwrap().0)
            .collect();
        let mean = tree_mean(&ests);
        let se = (tree_sample_variance(&ests) / seeds as f64).sqrt();
        assert!(
            (mean - enumerated).abs() <= 4.0 * se,
            "mean {mean} vs {enumerated} (se {se})"
        );
    }

    #[test]
    fn split_mode_unbiased_plain_mode_biased_on_sketch_source() {
        let spec = MlpSpec {
            input_dim: 3,
            width: 8,
            depth: 1,
            outputs: 2,
        };
        let params = mlp_init(spec, 4).unwrap();
        let data = sample_dataset(DistSpec::StandardGaussian, 8, 3, 6).unwrap();
        let exact = ntk_finite(&params, &data).unwrap().frob_sq();
        let source = SketchProbeSource::from_mlp(&params, &data).unwrap();
        let seeds = 800;
        let run = |mode: FrobeniusMode, seed: u64| {
            let mut c = cfg(1, 64, 2, 16, seed);
            c.frobenius_mode = mode;
            estimate_frobenius(&source, &c).unwrap().0
        };
        let split: Vec<f64> = (0..seeds).map(|s| run(FrobeniusMode::Split, s as u64)).collect();
        let plain: Vec<f64> = (0..seeds).map(|s| run(FrobeniusMode::Plain, s as u64)).collect();
        let split_mean = tree_mean(&split);
        let split_se = (tree_sample_variance(&split) / seeds as f64).sqrt();
        assert!(
            (split_mean - exact).abs() <= 4.0 * split_se,
            "split mean {split_mean} vs exact {exact} (se {split_se})"
        );
        let plain_mean = tree_mean(&plain);
        let plain_se = (tree_sample_variance(&plain) / seeds as f64).sqrt();
        // Upward bias beyond noise.
        assert!(
            plain_mean - exact > 4.0 * plain_se.min(split_se),
            "plain mean {plain_mean} not above exact {exact}"
        );
    }

    #[test]
    fn exhaustive_mode_reproduces_exact_effective_rank() {
        let data = sample_dataset(DistSpec::UniformCube, 12, 1, 8).unwrap();
        let k = gram(&KernelSpec::Rbf { lengthscale: 0.3 }, &data).unwrap();
        let exact = effective_rank_exact(&k).unwrap();
        let source = ExactGramSource { gram: &k };
        let mut c = cfg(12, 144, 1, 1, 0);
        c.exhaustive = true;
        let est = estimate_reff(&source, &c).unwrap();
        let got = est.reff_hat.unwrap();
        assert!((got - exact).abs() <= 1e-12 * exact, "{got} vs {exact}");
        assert!((est.trace_hat - k.trace()).abs() <= 1e-12 * k.trace());
        assert!((est.frob2_hat - k.frob_sq()).abs() <= 1e-12 * k.frob_sq());

        let id = GramMatrix::identity(6);
        let mut c = cfg(6, 36, 1, 1, 0);
        c.exhaustive = true;
        let est = estimate_reff(&ExactGramSource { gram: &id }, &c).unwrap();
        assert_eq!(est.reff_hat.unwrap(), 6.0);
    }

    #[test]
    fn estimates_are_deterministic_given_config() {
        let spec = MlpSpec {
            input_dim: 2,
            width: 6,
            depth: 1,
            outputs: 2,
        };
        let params = mlp_init(spec, 1).unwrap();
        let data = sample_dataset(DistSpec::StandardGaussian, 10, 2, 2).unwrap();
        let source = SketchProbeSource::from_mlp(&params, &data).unwrap();
        let c = cfg(16, 32, 2, 8, 99);
        let a = estimate_reff(&source, &c).unwrap();
        let b = estimate_reff(&source, &c).unwrap();
        assert_eq!(a.trace_hat.to_bits(), b.trace_hat.to_bits());
        assert_eq!(a.frob2_hat.to_bits(), b.frob2_hat.to_bits());
        assert_eq!(
            a.reff_hat.unwrap().to_bits(),
            b.reff_hat.unwrap().to_bits()
        );
    }

    struct AlternatingSource {
        n: usize,
    }

    impl EntrySource for AlternatingSource {
        fn n(&self) -> usize {
            self.n
        }

        fn entry(&self, _i: usize, _j: usize, _cfg: &EstimatorConfig, eval: u64) -> Result<f64> {
            // Diagonal slots stay exact; pair slots alternate sign so each
            // split product is -1.
            if eval < PAIR_EVAL_BASE {
                Ok(1.0)
            } else {
                Ok(if eval % 2 == 0 { 1.0 } else { -1.0 })
            }
        }
    }

    #[test]
    fn degenerate_split_products_are_reported_not_clamped() {
        // Every split pair multiplies +1 by -1, so frob2_hat = -n^2 < 0.
        let source = AlternatingSource { n: 4 };
        let err = estimate_reff(&source, &cfg(4, 8, 1, 1, 0)).unwrap_err();
        match err {
            Error::DegenerateEstimate(est) => {
                assert!(est.frob2_hat < 0.0);
                assert!(est.reff_hat.is_none());
                assert_eq!(est.trace_hat, 4.0);
            }
            other => panic!("expected degenerate estimate, got {other:?}"),
        }
    }

    #[test]
    fn estimate_json_shape_matches_contract() {
        let id = GramMatrix::identity(3);
        let mut c = cfg(3, 9, 2, 4, 7);
        c.exhaustive = true;
        let est = estimate_reff(&ExactGramSource { gram: &id }, &c).unwrap();
        let json = serde_json::to_value(&est).unwrap();
        let obj = json.as_object().unwrap();
        for key in [
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
        ] {
            assert!(obj.contains_key(key), "missing {key}");
        }
        assert!(!obj.contains_key("wall_time_ms"));
    }
}
