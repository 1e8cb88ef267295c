//! Invariant suites run by the `verify` command.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::ckn::{global_pool, Network};
use crate::config::{parse_config_str, seed_stream, RunConfig};
use crate::data::Dataset;
use crate::deformation::{apply_deformation, generate_tau, probe_commutator_norm, probe_norm, BaseGrid};
use crate::error::Result;
use crate::kernel::{certify_nonexpansive, kernel_eval, KernelSpec};
use crate::nystrom::{embed_patch, fit_nystrom};
use crate::rng::{derive_seed, rng_from};
use crate::signal::{fm_distance, lift, FeatureMap};
use crate::stability::{
    lipschitz_prediction_gap, linear_prediction_gap, rademacher_bound, readout_vector, verify_stability_telescoping,
    Readout,
};
use crate::sweep::{
    build_protocol_sets, equivariance_records, fit_model, schur_probe_records, split_for_protocol, CheckSummary,
    Model, TauParams,
};

fn check(name: &str, passed: bool, detail: String) -> CheckSummary {
    CheckSummary {
        name: name.into(),
        passed,
        hard: true,
        detail,
    }
}

fn random_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Kernel identities on `n` seeded pairs, plus a fitted embedding's
/// non-expansiveness.
pub fn kernel_suite(kernels: &[KernelSpec], n: usize, seed: u64) -> Result<Vec<CheckSummary>> {
    let mut out = Vec::new();
    for (i, spec) in kernels.iter().enumerate() {
        let s = derive_seed(seed, i as u64);
        let cert = certify_nonexpansive(spec, n, s)?;
        out.push(check(
            &format!("kernel_nonexpansive[{spec}]"),
            cert.passed(),
            format!(
                "k'(1) = {}, {} map violations (max excess {:e}), {} linear lower-bound violations (max deficit {:e})",
                cert.k_prime_one,
                cert.nonexpansive_violations,
                cert.max_nonexpansive_excess,
                cert.lower_bound_violations,
                cert.max_lower_bound_deficit
            ),
        ));
        let mut rng = rng_from(derive_seed(s, 1));
        let mut worst = 0.0f64;
        for _ in 0..n {
            let dim = rng.random_range(2..=6);
            let x = random_vec(&mut rng, dim);
            let nx2: f64 = x.iter().map(|v| v * v).sum();
            worst = worst.max((kernel_eval(spec, &x, &x)? - nx2).abs());
        }
        out.push(check(
            &format!("kernel_diagonal[{spec}]"),
            worst <= 1e-10,
            format!("max |K(x,x) - |x|^2| = {worst:e}"),
        ));

        let mut rng = rng_from(derive_seed(s, 2));
        let train: Vec<Vec<f64>> = (0..300).map(|_| random_vec(&mut rng, 6)).collect();
        let emb = fit_nystrom(&train, 16, spec, 1e-6, derive_seed(s, 3))?;
        let mut excess = f64::NEG_INFINITY;
        for _ in 0..n {
            let x = random_vec(&mut rng, 6);
            let y: Vec<f64> = if rng.random_bool(0.5) {
                random_vec(&mut rng, 6)
            } else {
                let d = 10f64.powf(rng.random_range(-3.0..0.0));
                x.iter().map(|v| v + d * rng.sample::<f64, _>(StandardNormal)).collect()
            };
            let (px, py) = (embed_patch(&emb, &x)?, embed_patch(&emb, &y)?);
            let lhs = crate::stability::euclid(&px, &py);
            let rhs = crate::stability::euclid(&x, &y);
            excess = excess.max(lhs - rhs);
        }
        out.push(check(
            &format!("embedding_nonexpansive[{spec}]"),
            excess <= 1e-6,
            format!("max ||psi(x)-psi(y)|| - ||x-y|| = {excess:e}"),
        ));
    }
    Ok(out)
}

/// Equivariance, pooling and bound checks on a fitted network.
pub fn network_suite(net: &Network, inputs: &[FeatureMap], probes: usize, triples: usize, tau_params: TauParams, seed: u64) -> Result<Vec<CheckSummary>> {
    let mut out = Vec::new();
    let x = &inputs[0];
    let recs = equivariance_records(net, x)?;
    let exact = recs.iter().filter(|r| r.lattice_exact).map(|r| r.relative_error).fold(0.0, f64::max);
    out.push(check(
        "equivariance_lattice",
        exact <= 1e-9,
        format!("max relative error over lattice-exact elements {exact:e}"),
    ));
    for r in recs.iter().filter(|r| !r.lattice_exact) {
        out.push(CheckSummary {
            name: format!("equivariance_off_lattice[{}]", r.element),
            passed: r.relative_error <= 0.05,
            hard: false,
            detail: format!("relative error {}", r.relative_error),
        });
    }

    let schur = schur_probe_records(net, probes, derive_seed(seed, 1))?;
    let worst = schur.iter().map(|p| p.max_ratio).fold(0.0, f64::max);
    out.push(check(
        "pooling_schur",
        worst <= 1.0 + 1e-10,
        format!("max ||A_k x|| / ||x|| over {probes} probes per layer = {worst}"),
    ));
    let mut gap = 0.0f64;
    for k in 0..net.n_layers() {
        let probe = crate::deformation::band_limited_probe(net.group(), 2, derive_seed(seed, 100 + k as u64))?;
        let f = crate::ckn::PoolingFilter::gaussian(net.group(), net.layer(k).sigma, net.layer(k).fiber_pooling)?;
        gap = gap.max(fm_distance(&f.apply(&probe)?, &f.apply_cross_correlation(&probe)?)?);
    }
    out.push(check(
        "pooling_cross_correlation",
        gap <= 1e-10,
        format!("max ||pool - cross-correlation|| = {gap:e}"),
    ));

    let grid = BaseGrid::of_group(net.group())?;
    let smooth = tau_params.smoothness * net.group().grid_step();
    let alphas = [0.1, 0.5, 1.0, 2.5, 5.0];
    let mut held = 0;
    let mut worst_slack = f64::NEG_INFINITY;
    for i in 0..triples {
        let tau = generate_tau(grid, smooth, tau_params.grad, derive_seed(seed, 200 + i as u64))?;
        let c = verify_stability_telescoping(net, &inputs[i % inputs.len()], &tau, alphas[i % alphas.len()])?;
        held += c.holds as usize;
        worst_slack = worst_slack.max(c.lhs - c.rhs);
    }
    out.push(check(
        "telescoping_bound",
        held == triples,
        format!("{held} of {triples} triples hold; max lhs - rhs = {worst_slack:e}"),
    ));

    // Probe monotonicity checks.
    let tau = generate_tau(grid, smooth, tau_params.grad, derive_seed(seed, 300))?;
    let n = net.n_layers() - 1;
    let channels = net.layer(n).embedding.p();
    let pool_n = |x: &FeatureMap| net.pool_layer(n, x);
    let mut comm = Vec::new();
    for a in [0.1, 0.5, 1.0] {
        let l = |x: &FeatureMap| apply_deformation(x, &tau, a);
        comm.push(probe_commutator_norm(&pool_n, &l, net.group(), channels, probes.min(20), derive_seed(seed, 301))?);
    }
    out.push(check(
        "commutator_monotone_in_alpha",
        comm.windows(2).all(|w| w[1] >= w[0]),
        format!("||[A_N, L_(alpha tau)]|| probes at alpha 0.1, 0.5, 1: {comm:?}"),
    ));
    let mut shift = Vec::new();
    for s in [1.0, 3.0, 5.0, 10.0] {
        let f = crate::ckn::PoolingFilter::gaussian(net.group(), s, false)?;
        let op = |x: &FeatureMap| -> Result<FeatureMap> {
            let ax = f.apply(x)?;
            apply_deformation(&ax, &tau, 1.0)?.sub(&ax)
        };
        shift.push(probe_norm(&op, net.group(), channels, probes.min(20), derive_seed(seed, 302))?);
    }
    out.push(check(
        "deformation_gap_monotone_in_sigma",
        shift.windows(2).all(|w| w[1] <= w[0]),
        format!("||(L_tau - I) A_sigma|| probes at sigma 1, 3, 5, 10: {shift:?}"),
    ));

    // Linear predictors cannot move more than ||w|| times the representation gap.
    let mut rng = rng_from(derive_seed(seed, 400));
    let mut cs_ok = 0;
    let samples = 100;
    let reps: Vec<Vec<f64>> = inputs.iter().map(|x| Ok(readout_vector(&net.forward(x)?, Readout::GlobalPool))).collect::<Result<_>>()?;
    let deformed: Vec<Vec<f64>> = inputs
        .iter()
        .map(|x| Ok(readout_vector(&net.forward(&apply_deformation(x, &tau, 2.0)?)?, Readout::GlobalPool)))
        .collect::<Result<_>>()?;
    for i in 0..samples {
        let j = i % reps.len();
        let w = random_vec(&mut rng, reps[j].len());
        let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gap = linear_prediction_gap(&w, &deformed[j], &reps[j])?;
        let bound = lipschitz_prediction_gap(wn, crate::stability::euclid(&deformed[j], &reps[j]))?;
        cs_ok += (gap <= bound + 1e-10) as usize;
    }
    out.push(check(
        "lipschitz_prediction_gap",
        cs_ok == samples,
        format!("{cs_ok} of {samples} random linear predictors within ||w|| * gap"),
    ));
    let pooled = global_pool(&net.forward(x)?);
    out.push(check(
        "global_pool_finite",
        pooled.iter().all(|v| v.is_finite()),
        format!("{} pooled channels", pooled.len()),
    ));
    Ok(out)
}

/// Closed-form fixtures for the complexity and prediction-gap formulas.
pub fn formula_suite() -> Result<Vec<CheckSummary>> {
    let cases = [
        (vec![1.0], 1.0, 1.0),
        (vec![1.0; 4], 2.0, 1.0),
        (vec![4.0, 0.0], 1.0, 1.0),
        (vec![1.0; 25], 3.0, 0.6),
    ];
    let mut worst = 0.0f64;
    for (diag, lambda, expect) in &cases {
        worst = worst.max((rademacher_bound(diag, *lambda)? - expect).abs());
    }
    let lip = (lipschitz_prediction_gap(2.0, 0.3)? - 0.6).abs();
    Ok(vec![
        check("rademacher_fixtures", worst <= 1e-12, format!("max error {worst:e}")),
        check("lipschitz_fixture", lip <= 1e-12, format!("error {lip:e}")),
        check(
            "rademacher_rejects_negative",
            rademacher_bound(&[1.0, -1.0], 1.0).is_err(),
            "negative diagonal entry is an error".into(),
        ),
    ])
}

/// Runs every suite for `cfg` and returns the check list.
pub fn run_verify(cfg: &RunConfig, dataset: &Dataset) -> Result<Vec<CheckSummary>> {
    let seed = derive_seed(cfg.seed, seed_stream::VERIFY);
    let mut kernels: Vec<KernelSpec> = vec![KernelSpec::exponential(), KernelSpec::arc_cosine1()];
    for k in cfg.sweep.kernels.iter().chain(&cfg.sweep.panel_kernels).chain(std::iter::once(&cfg.network.kernel)) {
        if k.spec.is_certified_nonexpansive() && !kernels.contains(&k.spec) {
            kernels.push(k.spec);
        }
    }
    let mut out = kernel_suite(&kernels, 10_000, derive_seed(seed, 1))?;

    let (fit_set, protocol_set) = split_for_protocol(dataset, cfg.data.train);
    let n = &cfg.network;
    let net = fit_model(cfg, Model::Equivariant, &n.kernel, n.kappa, n.sigma, derive_seed(seed, 2), &fit_set)?;
    let group = net.group().clone();
    let inputs: Vec<FeatureMap> = protocol_set
        .images
        .iter()
        .take(5)
        .map(|im| match cfg.group {
            crate::config::GroupConfig::S2 { scale, .. } => crate::signal::stereographic_project(im, &group, scale),
            _ => lift(im, &group),
        })
        .collect::<Result<_>>()?;
    let tau = TauParams {
        smoothness: cfg.protocol.tau_smoothness,
        grad: cfg.protocol.tau_grad,
    };
    out.extend(network_suite(&net, &inputs, cfg.sweep.probes, cfg.sweep.bound_triples, tau, derive_seed(seed, 3))?);

    let counts = protocol_set.class_counts();
    if counts.iter().all(|&c| c >= cfg.protocol.refs_per_class) {
        let sets = build_protocol_sets(&protocol_set, &cfg.sweep.alphas, tau, cfg.protocol.refs_per_class, cfg.protocol.mixed_pool, derive_seed(seed, 4))?;
        let r = cfg.protocol.refs_per_class;
        let a = cfg.sweep.alphas.len();
        let ok = sets.n_references() == 10 * r
            && sets.n_deformed() == 10 * r * a
            && sets.same_class.iter().all(|p| p.len() == r * a)
            && sets.mixed.iter().all(|p| p.len() == cfg.protocol.mixed_pool);
        out.push(check(
            "protocol_counts",
            ok,
            format!(
                "{} references, {} deformed, pools of {} and {}",
                sets.n_references(),
                sets.n_deformed(),
                sets.same_class[0].len(),
                sets.mixed[0].len()
            ),
        ));
    }

    out.extend(formula_suite()?);
    let again = parse_config_str(&cfg.to_text())?;
    out.push(check(
        "config_round_trip",
        again.hash() == cfg.hash(),
        format!("hash {}", cfg.hash()),
    ));
    Ok(out)
}
