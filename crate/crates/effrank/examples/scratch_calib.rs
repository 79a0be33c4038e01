// Temporary calibration harness; deleted before release.
use effrank::estimator::*;
use effrank::experiments::*;
use effrank::kernels::*;
use effrank::linalg::*;
use effrank::ntk::*;
use effrank::rng::*;
use effrank::sketch::ProbeKind;

fn var_over_seeds(f: impl Fn(u64) -> f64 + Sync, seeds: u64) -> f64 {
    let vals: Vec<f64> = (0..seeds).map(|s| f(s)).collect();
    tree_sample_variance(&vals)
}

fn main() {
    let t0 = std::time::Instant::now();
    // --- criterion 5 calibration ---
    let spec = MlpSpec { input_dim: 3, width: 16, depth: 1, outputs: 3 };
    let params = mlp_init(spec, 11).unwrap();
    let data = sample_dataset(DistSpec::StandardGaussian, 48, 3, 7).unwrap();
    let source = SketchProbeSource::from_mlp(&params, &data).unwrap();
    let k_exact = ntk_finite(&params, &data).unwrap();
    let exact_src = ExactGramSource { gram: &k_exact };

    let base = |m, p, g, r, seed| EstimatorConfig {
        diag_samples: m, pair_samples: p, probes: g, sketch_buckets: r,
        probe_kind: ProbeKind::Gaussian, frobenius_mode: FrobeniusMode::Split,
        master_seed: seed, exhaustive: false,
    };

    // M slope
    let seeds = 600;
    let ms = [16usize, 32, 64, 128, 256];
    let mut xs = Vec::new(); let mut ys = Vec::new();
    for &m in &ms {
        let v = var_over_seeds(|s| estimate_trace(&source, &base(m, 1, 4, 32, 1000 + s)).unwrap().0, seeds);
        xs.push((m as f64).ln()); ys.push(v.ln());
        println!("M={m}: var={v:.4}");
    }
    let fit = fit_line(&xs, &ys).unwrap();
    println!("M slope = {:.4} +- {:.4}", fit.slope, fit.se_slope);

    // P slope
    let ps = [16usize, 32, 64, 128, 256];
    let mut xs = Vec::new(); let mut ys = Vec::new();
    for &p in &ps {
        let v = var_over_seeds(|s| estimate_frobenius(&source, &base(1, p, 4, 32, 2000 + s)).unwrap().0, seeds);
        xs.push((p as f64).ln()); ys.push(v.ln());
        println!("P={p}: var={v:.1}");
    }
    let fit = fit_line(&xs, &ys).unwrap();
    println!("P slope = {:.4} +- {:.4}", fit.slope, fit.se_slope);

    // G excess halving (R huge)
    let seeds_gr = 2000;
    let p_fix = 64;
    let floor = var_over_seeds(|s| estimate_frobenius(&exact_src, &base(1, p_fix, 1, 1, 3000 + s)).unwrap().0, seeds_gr);
    println!("floor (exact entries) = {floor:.1}");
    for (ga, gb) in [(1usize, 2usize), (2, 4), (4, 8)] {
        let va = var_over_seeds(|s| estimate_frobenius(&source, &base(1, p_fix, ga, 4096, 3000 + s)).unwrap().0, seeds_gr);
        let vb = var_over_seeds(|s| estimate_frobenius(&source, &base(1, p_fix, gb, 4096, 3000 + s)).unwrap().0, seeds_gr);
        let ra = va - floor; let rb = vb - floor;
        println!("G {ga}->{gb}: var {va:.1} -> {vb:.1}, excess {ra:.1} -> {rb:.1}, ratio = {:.3}", rb / ra);
    }
    // R excess halving (G at its own floor), common random numbers with the floor
    let g_fix = 256;
    for (ra_, rb_) in [(8usize, 16usize), (16, 32), (32, 64)] {
        let va = var_over_seeds(|s| estimate_frobenius(&source, &base(1, p_fix, g_fix, ra_, 3000 + s)).unwrap().0, seeds_gr);
        let vb = var_over_seeds(|s| estimate_frobenius(&source, &base(1, p_fix, g_fix, rb_, 3000 + s)).unwrap().0, seeds_gr);
        let ea = va - floor; let eb = vb - floor;
        println!("R {ra_}->{rb_}: var {va:.1} -> {vb:.1}, excess {ea:.1} -> {eb:.1}, ratio = {:.3}", eb / ea);
    }
    println!("criterion5 elapsed: {:.1}s", t0.elapsed().as_secs_f64());

    // --- criterion 6 ladder ---
    let t1 = std::time::Instant::now();
    let data128 = sample_dataset(DistSpec::UniformCube, 128, 1, 77).unwrap();
    let kernel = KernelSpec::Rbf { lengthscale: 0.2 };
    let g128 = gram(&kernel, &data128).unwrap();
    let exact = effective_rank_exact(&g128).unwrap();
    let src = ExactGramSource { gram: &g128 };
    let ladder = [(50usize, 100usize, 2usize, 16usize), (200, 400, 8, 64), (800, 3000, 16, 128)];
    let n_seeds = 101;
    let mut medians = Vec::new();
    for &(m, p, g, r) in &ladder {
        let mut errs: Vec<f64> = (0..n_seeds)
            .map(|s| {
                let est = estimate_reff(&src, &base(m, p, g, r, 9000 + s)).unwrap();
                (est.reff_hat.unwrap() - exact).abs()
            })
            .collect();
        errs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let med = errs[n_seeds as usize / 2];
        medians.push(med);
        println!("budget ({m},{p},{g},{r}): median |err| = {med:.5} rel = {:.4}", med / exact);
    }
    println!("exact = {exact:.5}, monotone: {}", medians.windows(2).all(|w| w[1] < w[0]));
    println!("criterion6 elapsed: {:.1}s", t1.elapsed().as_secs_f64());

    // --- criterion 7 ---
    let t2 = std::time::Instant::now();
    let mom = mc_kernel_moments(&kernel, DistSpec::UniformCube, 1, 1_000_000, 5).unwrap();
    let sweep = limit_sweep(&LimitSweepConfig {
        kernel: &kernel, dist: DistSpec::UniformCube, dim: 1,
        n_list: &[100, 300, 1000, 3000], seeds: 20, exact: true, estimator: None, master_seed: 31,
    }).unwrap();
    let fit = fit_affine_in_inverse_n(&sweep).unwrap();
    println!("mc r_inf = {:.5} +- {:.5}", mom.r_inf_hat, mom.se_r_inf);
    for r in &sweep.rows { println!("n={}: mean={:.5} sd={:.5}", r.x, r.mean, r.sd); }
    println!("intercept = {:.5} (rel dev from mc = {:.4})", fit.intercept, (fit.intercept - mom.r_inf_hat).abs() / mom.r_inf_hat);
    println!("mean(3000) vs intercept rel = {:.4}", (sweep.rows[3].mean - fit.intercept).abs() / fit.intercept);
    println!("criterion7 elapsed: {:.1}s", t2.elapsed().as_secs_f64());
}
