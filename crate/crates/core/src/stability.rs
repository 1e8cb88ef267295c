//! Stability measurements and per-signal bound checks.

use serde::{Deserialize, Serialize};

use crate::ckn::{global_pool, Network};
use crate::deformation::{apply_deformation, DeformationField};
use crate::error::{Error, Result};
use crate::group::GroupElement;
use crate::signal::{fm_distance, group_translate, FeatureMap};

/// Slack allowed on every asserted inequality.
pub const BOUND_TOL: f64 = 1e-8;

/// Which vector a representation comparison uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Haar-weighted average over the group, one value per channel.
    #[default]
    GlobalPool,
    /// The full map, scaled so Euclidean distance equals the Haar L² distance.
    Map,
}

impl std::str::FromStr for Readout {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "global_pool" | "global" => Ok(Readout::GlobalPool),
            "map" => Ok(Readout::Map),
            other => Err(format!("unknown readout `{other}` (global_pool | map)")),
        }
    }
}

impl std::fmt::Display for Readout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Readout::GlobalPool => "global_pool",
            Readout::Map => "map",
        })
    }
}

/// Turns a feature map into a plain vector under `readout`.
pub fn readout_vector(phi: &FeatureMap, readout: Readout) -> Vec<f64> {
    match readout {
        Readout::GlobalPool => global_pool(phi),
        Readout::Map => {
            let c = phi.channels();
            phi.group()
                .haar_weights()
                .iter()
                .enumerate()
                .flat_map(|(i, w)| {
                    let s = w.sqrt();
                    phi.values()[i * c..(i + 1) * c].iter().map(move |v| v * s)
                })
                .collect()
        }
    }
}

/// `readout(Φ(x))`.
pub fn represent(net: &Network, x: &FeatureMap, readout: Readout) -> Result<Vec<f64>> {
    Ok(readout_vector(&net.forward(x)?, readout))
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(1/|S|) Σ ‖φ′ − φ‖ / ‖φ‖` over precomputed representation vectors.
pub fn relative_distance_mean(reference: &[f64], pool: &[&[f64]]) -> Result<f64> {
    if pool.is_empty() {
        return Err(Error::param("pool", "must contain at least one representation"));
    }
    let n = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(n >= 1e-12) {
        return Err(Error::DegenerateReference { norm: n });
    }
    let mut total = 0.0;
    for p in pool {
        if p.len() != reference.len() {
            return Err(Error::DimensionMismatch {
                expected: reference.len(),
                got: p.len(),
            });
        }
        total += euclid(p, reference) / n;
    }
    Ok(total / pool.len() as f64)
}

/// Mean relative distance of `Φ` over `pool` around `reference`, measured on
/// full maps.
pub fn mean_relative_distance(net: &Network, reference: &FeatureMap, pool: &[FeatureMap]) -> Result<f64> {
    mean_relative_distance_with(net, reference, pool, Readout::Map)
}

pub fn mean_relative_distance_with(
    net: &Network,
    reference: &FeatureMap,
    pool: &[FeatureMap],
    readout: Readout,
) -> Result<f64> {
    let r = represent(net, reference, readout)?;
    let reps = pool
        .iter()
        .map(|x| represent(net, x, readout))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[f64]> = reps.iter().map(Vec::as_slice).collect();
    relative_distance_mean(&r, &refs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Telescoping,
    GlobalInvariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundTerm {
    pub name: String,
    pub value: f64,
}

/// One checked inequality `lhs ≤ rhs + slack`, with everything needed to
/// audit it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub kind: BoundKind,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub terms: Vec<BoundTerm>,
    pub alpha: f64,
    pub tau_grad_sup: f64,
    pub tau_sup: f64,
    pub tau_seed: u64,
    pub admissible: bool,
    pub warning: Option<String>,
    /// Free-form context, such as the triple index in a harness run.
    pub label: Option<String>,
}

impl BoundCheck {
    fn new(kind: BoundKind, tau: &DeformationField, alpha: f64) -> Self {
        let admissible = crate::deformation::within_invertibility_limit(alpha, tau.grad_sup());
        BoundCheck {
            kind,
            lhs: 0.0,
            rhs: 0.0,
            holds: true,
            terms: Vec::new(),
            alpha,
            tau_grad_sup: tau.grad_sup(),
            tau_sup: tau.sup(),
            tau_seed: tau.seed(),
            admissible,
            warning: (!admissible).then(|| {
                format!(
                    "α‖∇τ‖∞ = {} exceeds 1/2; the deformation may not be invertible",
                    alpha * tau.grad_sup()
                )
            }),
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    fn push(&mut self, name: String, value: f64) {
        self.terms.push(BoundTerm { name, value });
    }
}

/// Checks `‖Φ(Lx) − Φ(x)‖ ≤ Σᵢ ‖Sᵢ(L zᵢ₋₁) − L Sᵢ(zᵢ₋₁)‖ + ‖L Φ(x) − Φ(x)‖`
/// with `L = L_{ατ}`, stages `Sᵢ` running through `P₁A₀, M₁, P₂A₁, …, M_N, A_N`
/// and `zᵢ` the stored intermediates of `Φ(x)`.
///
/// Every stage is non-expansive, so the inequality holds whenever the
/// implementation is consistent.
pub fn verify_stability_telescoping(
    net: &Network,
    x: &FeatureMap,
    tau: &DeformationField,
    alpha: f64,
) -> Result<BoundCheck> {
    let mut check = BoundCheck::new(BoundKind::Telescoping, tau, alpha);
    let l = |m: &FeatureMap| apply_deformation(m, tau, alpha);
    let trace = net.forward_trace(x)?;
    let phi = trace.output();
    check.lhs = fm_distance(&net.forward(&l(x)?)?, phi)?;

    let mut z = x.clone();
    for k in 0..net.n_layers() {
        let lt = &trace.layers[k];
        let lz = l(&z)?;
        let pre = if k == 0 {
            net.smooth_input(&lz)?
        } else {
            net.pool_layer(k - 1, &lz)?
        };
        let b = fm_distance(&net.patches(k, &pre)?, &l(&lt.patches)?)?;
        check.push(format!("[P{}A{}, L]", k + 1, k), b);
        let m = fm_distance(&net.embed(k, &l(&lt.patches)?)?, &l(&lt.embedded)?)?;
        check.push(format!("[M{}, L]", k + 1), m);
        z = lt.embedded.clone();
    }
    let n = net.n_layers();
    let a = fm_distance(&net.pool_layer(n - 1, &l(&z)?)?, &l(phi)?)?;
    check.push(format!("[A{n}, L]"), a);
    check.push("(L - I)Phi(x)".into(), fm_distance(&l(phi)?, phi)?);

    check.rhs = check.terms.iter().map(|t| t.value).sum();
    check.holds = check.lhs <= check.rhs + BOUND_TOL;
    Ok(check)
}

/// Checks `‖AΦ(L_g L_{ατ} x) − AΦ(x)‖ ≤ ‖Φ(L_g L_{ατ} x) − L_g Φ(x)‖` with
/// `A` the global pool.
///
/// For off-lattice `g`, `A L_g` differs from `A` by interpolation error; that
/// defect is measured, recorded as a term, and added to the slack.
pub fn verify_global_invariance(
    net: &Network,
    x: &FeatureMap,
    g: &GroupElement,
    tau: &DeformationField,
    alpha: f64,
) -> Result<BoundCheck> {
    let mut check = BoundCheck::new(BoundKind::GlobalInvariance, tau, alpha);
    let moved = group_translate(&apply_deformation(x, tau, alpha)?, g)?;
    let phi_moved = net.forward(&moved)?;
    let phi_x = net.forward(x)?;
    let g_phi = group_translate(&phi_x, g)?;
    let a_moved = global_pool(&phi_moved);
    let a_x = global_pool(&phi_x);
    check.lhs = euclid(&a_moved, &a_x);
    check.rhs = fm_distance(&phi_moved, &g_phi)?;
    let defect = euclid(&global_pool(&g_phi), &a_x);
    check.push("pool invariance defect".into(), defect);
    check.holds = check.lhs <= check.rhs + defect + BOUND_TOL;
    Ok(check)
}

/// `λ √((1/M) Σ K(xᵢ, xᵢ)) / √M`.
pub fn rademacher_bound(gram_diag: &[f64], lambda: f64) -> Result<f64> {
    if gram_diag.is_empty() {
        return Err(Error::param("gram_diag", "need at least one sample"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::param("lambda", format!("must be finite and > 0, got {lambda}")));
    }
    if let Some(v) = gram_diag.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::param(
            "gram_diag",
            format!("diagonal entries must be finite and ≥ 0, got {v}"),
        ));
    }
    let m = gram_diag.len() as f64;
    let mean = gram_diag.iter().sum::<f64>() / m;
    Ok(lambda * mean.sqrt() / m.sqrt())
}

/// `‖f‖ · ‖Φ(L_τ x) − Φ(x)‖`, the largest possible change of a prediction.
pub fn lipschitz_prediction_gap(f_norm: f64, rep_gap: f64) -> Result<f64> {
    for (name, v) in [("f_norm", f_norm), ("rep_gap", rep_gap)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::param(name, format!("must be finite and ≥ 0, got {v}")));
        }
    }
    Ok(f_norm * rep_gap)
}

/// `|⟨w, a⟩ − ⟨w, b⟩|` for a linear predictor `w`.
pub fn linear_prediction_gap(w: &[f64], a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != w.len() || b.len() != w.len() {
        return Err(Error::DimensionMismatch {
            expected: w.len(),
            got: if a.len() != w.len() { a.len() } else { b.len() },
        });
    }
    Ok(w.iter().zip(a.iter().zip(b)).map(|(w, (a, b))| w * (a - b)).sum::<f64>().abs())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `softplus(4u) / 4`.
    SmoothedRelu,
    /// `exp(u − 1)`.
    Exp,
}

impl Activation {
    pub fn eval(self, u: f64) -> f64 {
        match self {
            Activation::SmoothedRelu => {
                let t = 4.0 * u;
                (t.max(0.0) + (-t.abs()).exp().ln_1p()) / 4.0
            }
            Activation::Exp => (u - 1.0).exp(),
        }
    }
}

/// `‖x‖ σ(⟨g, x⟩ / ‖x‖)`, extended by 0 at `x = 0`.
pub fn homogeneous_activation_eval(g: &[f64], x: &[f64], activation: Activation) -> Result<f64> {
    if g.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: g.len(),
            got: x.len(),
        });
    }
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 {
        return Ok(0.0);
    }
    let u = g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / n;
    Ok(n * activation.eval(u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckn::{fit_network, LayerSpec, NetworkSpec};
    use crate::deformation::{generate_tau, BaseGrid};
    use crate::group::{build_group, DiscretizedGroup, GroupKind};
    use crate::kernel::KernelSpec;
    use crate::rng::rng_from;
    use rand::Rng;
    use std::f64::consts::FRAC_PI_2;
    use std::sync::Arc;

    fn group() -> Arc<DiscretizedGroup> {
        Arc::new(
            build_group(GroupKind::Se2 {
                height: 8,
                width: 8,
                n_theta: 4,
            })
            .unwrap(),
        )
    }

    fn random_map(g: &Arc<DiscretizedGroup>, seed: u64) -> FeatureMap {
        let mut rng = rng_from(seed);
        let v = (0..g.len()).map(|_| rng.random::<f64>()).collect();
        crate::ckn::pool(&FeatureMap::new(g.clone(), 1, v).unwrap(), 0.7).unwrap()
    }

    fn network(g: &Arc<DiscretizedGroup>) -> Network {
        let training: Vec<FeatureMap> = (0..3).map(|s| random_map(g, s)).collect();
        let spec = NetworkSpec {
            sigma0: 0.5,
            layers: vec![
                LayerSpec::new(2.0, 1.0, 4, KernelSpec::exponential()),
                LayerSpec::new(2.0, 2.0, 4, KernelSpec::exponential()),
            ],
            eps: 1e-6,
            seed: 9,
            fit_patches: 200,
        };
        fit_network(g, &training, &spec).unwrap()
    }

    #[test]
    fn relative_distance_examples() {
        let r = [3.0, 4.0];
        assert_eq!(relative_distance_mean(&r, &[&r]).unwrap(), 0.0);
        let d = [6.0, 8.0];
        assert!((relative_distance_mean(&r, &[&d, &d]).unwrap() - 1.0).abs() < 1e-15);
        // Relative offsets of 0.3 and 0.5 along the reference direction.
        let a = [3.0 * 1.3, 4.0 * 1.3];
        let b = [3.0 * 0.5, 4.0 * 0.5];
        assert!((relative_distance_mean(&r, &[&a, &b]).unwrap() - 0.4).abs() < 1e-12);
        assert!(matches!(
            relative_distance_mean(&[0.0, 0.0], &[&r]),
            Err(Error::DegenerateReference { .. })
        ));
        assert!(relative_distance_mean(&r, &[]).is_err());
    }

    #[test]
    fn network_relative_distance_of_reference_pool_is_zero() {
        let g = group();
        let net = network(&g);
        let x = random_map(&g, 11);
        assert_eq!(mean_relative_distance(&net, &x, std::slice::from_ref(&x)).unwrap(), 0.0);
        let zero = FeatureMap::zeros(g.clone(), 1);
        // The zero map yields a non-zero constant under the exponential profile,
        // so only a zero representation is degenerate.
        let r = mean_relative_distance(&net, &zero, &[x]);
        assert!(r.is_ok() || matches!(r, Err(Error::DegenerateReference { .. })));
    }

    #[test]
    fn map_readout_matches_haar_distance() {
        let g = group();
        let a = random_map(&g, 1);
        let b = random_map(&g, 2);
        let d = euclid(&readout_vector(&a, Readout::Map), &readout_vector(&b, Readout::Map));
        assert!((d - fm_distance(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn telescoping_holds_and_vanishes_at_zero() {
        let g = group();
        let net = network(&g);
        let grid = BaseGrid::of_group(&g).unwrap();
        let tau = generate_tau(grid, 1.5, 0.1, 5).unwrap();
        let x = random_map(&g, 21);
        let zero = verify_stability_telescoping(&net, &x, &tau, 0.0).unwrap();
        assert_eq!(zero.lhs, 0.0);
        assert_eq!(zero.rhs, 0.0);
        for (i, alpha) in [0.5, 1.0, 3.0].into_iter().enumerate() {
            let c = verify_stability_telescoping(&net, &random_map(&g, 30 + i as u64), &tau, alpha).unwrap();
            assert!(c.holds, "{c:?}");
            assert!(c.lhs > 0.0);
            assert_eq!(c.terms.len(), 2 * net.n_layers() + 2);
            assert!(c.admissible);
        }
        let wild = verify_stability_telescoping(&net, &x, &tau, 8.0).unwrap();
        assert!(!wild.admissible && wild.warning.is_some());
    }

    #[test]
    fn global_invariance_cases() {
        let g = group();
        let net = network(&g);
        let grid = BaseGrid::of_group(&g).unwrap();
        let x = random_map(&g, 40);
        let zero = DeformationField::zero(grid).unwrap();
        let rot = GroupElement::se2(2.0, -1.0, FRAC_PI_2);
        let c = verify_global_invariance(&net, &x, &rot, &zero, 1.0).unwrap();
        assert!(c.lhs <= 1e-9 && c.rhs <= 1e-9, "{c:?}");
        assert!(c.holds);

        let tau = generate_tau(grid, 1.5, 0.1, 6).unwrap();
        let id = GroupElement::se2(0.0, 0.0, 0.0);
        let c = verify_global_invariance(&net, &x, &id, &tau, 2.0).unwrap();
        let phi = net.forward(&x).unwrap();
        let phi_t = net.forward(&apply_deformation(&x, &tau, 2.0).unwrap()).unwrap();
        assert!((c.rhs - fm_distance(&phi_t, &phi).unwrap()).abs() < 1e-12);
        assert!(c.holds);

        let off = GroupElement::se2(0.3, 0.7, 0.4);
        assert!(verify_global_invariance(&net, &x, &off, &tau, 1.0).unwrap().holds);
    }

    #[test]
    fn rademacher_examples() {
        assert_eq!(rademacher_bound(&[1.0], 1.0).unwrap(), 1.0);
        assert!((rademacher_bound(&[1.0; 4], 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((rademacher_bound(&[1.0; 9], 1.5).unwrap() - 0.5).abs() < 1e-12);
        assert!(rademacher_bound(&[1.0, -0.1], 1.0).is_err());
        assert!(rademacher_bound(&[], 1.0).is_err());
        assert!(rademacher_bound(&[1.0], 0.0).is_err());
    }

    #[test]
    fn lipschitz_examples() {
        assert_eq!(lipschitz_prediction_gap(0.0, 17.0).unwrap(), 0.0);
        assert!((lipschitz_prediction_gap(2.0, 0.3).unwrap() - 0.6).abs() < 1e-15);
        assert!(lipschitz_prediction_gap(-1.0, 0.3).is_err());
        assert!((linear_prediction_gap(&[1.0, 2.0], &[1.0, 1.0], &[0.0, 0.0]).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn homogeneous_activation_examples() {
        assert_eq!(homogeneous_activation_eval(&[1.0, 0.0], &[0.0, 0.0], Activation::Exp).unwrap(), 0.0);
        assert!((homogeneous_activation_eval(&[1.0, 0.0], &[3.0, 0.0], Activation::Exp).unwrap() - 3.0).abs() < 1e-15);
        let g = [0.3, -0.8, 0.2];
        let x = [1.0, 0.5, -2.0];
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        for a in [Activation::Exp, Activation::SmoothedRelu] {
            let f1 = homogeneous_activation_eval(&g, &x, a).unwrap();
            let f2 = homogeneous_activation_eval(&g, &x2, a).unwrap();
            assert!((f2 - 2.0 * f1).abs() < 1e-10);
        }
        assert!((Activation::SmoothedRelu.eval(0.0) - 2f64.ln() / 4.0).abs() < 1e-15);
        assert!((Activation::SmoothedRelu.eval(50.0) - 50.0).abs() < 1e-12);
    }
}
