//! Homogeneous dot-product kernels `K(x, y) = ‖x‖‖y‖ k(⟨x, y⟩ / ‖x‖‖y‖)`.

use std::f64::consts::PI;
use std::fmt;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};

/// Vectors with norm below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

const DOMAIN_TOL: f64 = 1e-9;

/// Default offset `c` of the polynomial profile.
pub const POLY_OFFSET: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KernelFamily {
    /// `exp(u − 1)`.
    Exponential,
    /// `exp(−2α(1 − u))`, the Gaussian `exp(−α‖x − y‖²)` restricted to the sphere.
    RbfHomogeneous { alpha: f64 },
    /// Degree-1 arc-cosine profile `(sin t + (π − t) cos t) / π`, `t = acos u`.
    ArcCosine1,
    /// `((u + c) / (1 + c))^d`.
    Polynomial { degree: u32, offset: f64 },
}

impl KernelFamily {
    pub(crate) fn tag(&self) -> u8 {
        match self {
            KernelFamily::Exponential => 0,
            KernelFamily::RbfHomogeneous { .. } => 1,
            KernelFamily::ArcCosine1 => 2,
            KernelFamily::Polynomial { .. } => 3,
        }
    }

    pub(crate) fn params(&self) -> (f64, f64) {
        match *self {
            KernelFamily::Exponential | KernelFamily::ArcCosine1 => (0.0, 0.0),
            KernelFamily::RbfHomogeneous { alpha } => (alpha, 0.0),
            KernelFamily::Polynomial { degree, offset } => (degree as f64, offset),
        }
    }

    pub(crate) fn from_tag(tag: u8, p1: f64, p2: f64) -> Result<KernelFamily> {
        match tag {
            0 => Ok(KernelFamily::Exponential),
            1 => Ok(KernelFamily::RbfHomogeneous { alpha: p1 }),
            2 => Ok(KernelFamily::ArcCosine1),
            3 if p1 >= 1.0 && p1.fract() == 0.0 && p1 <= u32::MAX as f64 => Ok(KernelFamily::Polynomial {
                degree: p1 as u32,
                offset: p2,
            }),
            _ => Err(Error::Embedding(format!("unknown kernel tag {tag} (params {p1}, {p2})"))),
        }
    }
}

/// A validated kernel with cached `k(1)` and `k'(1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    k_one: f64,
    dk_one: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily) -> Result<Self> {
        let dk_one = match family {
            KernelFamily::Exponential | KernelFamily::ArcCosine1 => 1.0,
            KernelFamily::RbfHomogeneous { alpha } => {
                if !(alpha > 0.0 && alpha.is_finite()) {
                    return Err(Error::param("alpha", format!("must be finite and > 0, got {alpha}")));
                }
                2.0 * alpha
            }
            KernelFamily::Polynomial { degree, offset } => {
                if degree < 1 {
                    return Err(Error::param("degree", "must be ≥ 1"));
                }
                if !(offset >= 0.0 && offset.is_finite()) {
                    return Err(Error::param("offset", format!("must be finite and ≥ 0, got {offset}")));
                }
                degree as f64 / (1.0 + offset)
            }
        };
        let mut spec = KernelSpec {
            family,
            k_one: 1.0,
            dk_one,
        };
        spec.k_one = spec.profile(1.0);
        Ok(spec)
    }

    pub fn exponential() -> Self {
        Self::new(KernelFamily::Exponential).expect("parameter-free")
    }

    pub fn arc_cosine1() -> Self {
        Self::new(KernelFamily::ArcCosine1).expect("parameter-free")
    }

    pub fn rbf(alpha: f64) -> Result<Self> {
        Self::new(KernelFamily::RbfHomogeneous { alpha })
    }

    /// Bandwidth `b` maps to `α = 1 / b²`, i.e. the profile `exp(−2(1 − u) / b²)`.
    pub fn rbf_bandwidth(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::param("bandwidth", format!("must be finite and > 0, got {bandwidth}")));
        }
        Self::rbf(1.0 / (bandwidth * bandwidth))
    }

    pub fn polynomial(degree: u32) -> Result<Self> {
        Self::new(KernelFamily::Polynomial {
            degree,
            offset: POLY_OFFSET,
        })
    }

    /// Parses `exponential`, `arccos1`, `rbf:<bandwidth>`, `rbf_alpha:<α>`
    /// or `poly:<degree>`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let num = |v: &str, name: &'static str| -> Result<f64> {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::param(name, format!("cannot parse `{v}`")))
        };
        match s.split_once(':') {
            None => match s {
                "exponential" | "exp" => Ok(Self::exponential()),
                "arccos1" | "arc_cosine1" => Ok(Self::arc_cosine1()),
                _ => Err(Error::param("kernel", format!("unknown kernel `{s}`"))),
            },
            Some(("rbf", v)) => Self::rbf_bandwidth(num(v, "bandwidth")?),
            Some(("rbf_alpha", v)) => Self::rbf(num(v, "alpha")?),
            Some(("poly", v)) => {
                let d: u32 = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::param("degree", format!("cannot parse `{v}`")))?;
                Self::polynomial(d)
            }
            Some((f, _)) => Err(Error::param("kernel", format!("unknown kernel family `{f}`"))),
        }
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn k_one(&self) -> f64 {
        self.k_one
    }

    /// Analytic `k'(1)`.
    pub fn derivative_at_one(&self) -> f64 {
        self.dk_one
    }

    /// `0 ≤ k'(1) ≤ 1`.
    pub fn is_certified_nonexpansive(&self) -> bool {
        (0.0..=1.0).contains(&self.dk_one)
    }

    /// Profile evaluated at an in-range `u` (no domain check).
    pub(crate) fn profile(&self, u: f64) -> f64 {
        match self.family {
            KernelFamily::Exponential => (u - 1.0).exp(),
            KernelFamily::RbfHomogeneous { alpha } => (-2.0 * alpha * (1.0 - u)).exp(),
            KernelFamily::ArcCosine1 => {
                let t = u.clamp(-1.0, 1.0).acos();
                (t.sin() + (PI - t) * t.cos()) / PI
            }
            KernelFamily::Polynomial { degree, offset } => {
                ((u + offset) / (1.0 + offset)).powi(degree as i32)
            }
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            KernelFamily::Exponential => write!(f, "exponential"),
            KernelFamily::ArcCosine1 => write!(f, "arccos1"),
            KernelFamily::RbfHomogeneous { alpha } => write!(f, "rbf_alpha:{alpha}"),
            KernelFamily::Polynomial { degree, .. } => write!(f, "poly:{degree}"),
        }
    }
}

/// `k(u)`; inputs within 1e-9 outside `[−1, 1]` are clamped.
pub fn kappa_eval(spec: &KernelSpec, u: f64) -> Result<f64> {
    if !(u >= -1.0 - DOMAIN_TOL && u <= 1.0 + DOMAIN_TOL) {
        return Err(Error::OutOfDomain { value: u });
    }
    if !(-1.0..=1.0).contains(&u) {
        warn!("kernel argument {u} clamped into [-1, 1]");
    }
    Ok(spec.profile(u.clamp(-1.0, 1.0)))
}

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub(crate) fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `K(x, y)`; zero when either vector is (numerically) zero.
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    Ok(kernel_eval_with_norms(spec, x, norm(x), y, norm(y)))
}

pub(crate) fn kernel_eval_with_norms(spec: &KernelSpec, x: &[f64], nx: f64, y: &[f64], ny: f64) -> f64 {
    if nx < ZERO_NORM || ny < ZERO_NORM {
        return 0.0;
    }
    let u = (dot(x, y) / (nx * ny)).clamp(-1.0, 1.0);
    nx * ny * spec.profile(u)
}

/// Outcome of [`certify_nonexpansive`].
#[derive(Clone, Debug, Serialize)]
pub struct CertReport {
    pub kernel: String,
    pub k_prime_one: f64,
    pub analytic_pass: bool,
    pub n_samples: usize,
    pub nonexpansive_violations: usize,
    pub max_nonexpansive_excess: f64,
    pub lower_bound_violations: usize,
    pub max_lower_bound_deficit: f64,
    /// First pair found with `‖φ(x) − φ(y)‖² > ‖x − y‖² + 1e-9`.
    pub counterexample: Option<(Vec<f64>, Vec<f64>)>,
}

impl CertReport {
    pub fn sampled_pass(&self) -> bool {
        self.nonexpansive_violations == 0 && self.lower_bound_violations == 0
    }

    pub fn passed(&self) -> bool {
        self.analytic_pass && self.sampled_pass()
    }
}

/// Draws a random pair: half independent, half close perturbations (where
/// expansive kernels fail).
pub(crate) fn sample_pair(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let dim = rng.random_range(2..=6);
    let scale_x: f64 = rng.random_range(0.1..2.0);
    let x: Vec<f64> = (0..dim)
        .map(|_| scale_x * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let y = if rng.random_bool(0.5) {
        let scale_y: f64 = rng.random_range(0.1..2.0);
        (0..dim)
            .map(|_| scale_y * rng.sample::<f64, _>(StandardNormal))
            .collect()
    } else {
        let delta: f64 = 10f64.powf(rng.random_range(-2.0..-0.3));
        x.iter()
            .map(|v| v + delta * rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    (x, y)
}

/// Checks `0 ≤ k'(1) ≤ 1` analytically, then samples pairs for the
/// non-expansive map bound and the linear lower bound `K(x, y) ≥ ⟨x, y⟩`.
pub fn certify_nonexpansive(spec: &KernelSpec, n_samples: usize, seed: u64) -> Result<CertReport> {
    if n_samples == 0 {
        return Err(Error::param("n_samples", "must be ≥ 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CertReport {
        kernel: spec.to_string(),
        k_prime_one: spec.derivative_at_one(),
        analytic_pass: spec.is_certified_nonexpansive(),
        n_samples,
        nonexpansive_violations: 0,
        max_nonexpansive_excess: f64::NEG_INFINITY,
        lower_bound_violations: 0,
        max_lower_bound_deficit: f64::NEG_INFINITY,
        counterexample: None,
    };
    for _ in 0..n_samples {
        let (x, y) = sample_pair(&mut rng);
        let kxx = kernel_eval(spec, &x, &x)?;
        let kyy = kernel_eval(spec, &y, &y)?;
        let kxy = kernel_eval(spec, &x, &y)?;
        let d2: f64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
        let excess = (kxx + kyy - 2.0 * kxy) - d2;
        report.max_nonexpansive_excess = report.max_nonexpansive_excess.max(excess);
        if excess > 1e-9 {
            report.nonexpansive_violations += 1;
            if report.counterexample.is_none() {
                report.counterexample = Some((x.clone(), y.clone()));
            }
        }
        let deficit = dot(&x, &y) - kxy;
        report.max_lower_bound_deficit = report.max_lower_bound_deficit.max(deficit);
        if deficit > 1e-9 {
            report.lower_bound_violations += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_specs() -> Vec<KernelSpec> {
        vec![
            KernelSpec::exponential(),
            KernelSpec::arc_cosine1(),
            KernelSpec::rbf(0.25).unwrap(),
            KernelSpec::rbf(2.0).unwrap(),
            KernelSpec::rbf_bandwidth(5.0).unwrap(),
            KernelSpec::polynomial(1).unwrap(),
            KernelSpec::polynomial(3).unwrap(),
        ]
    }

    #[test]
    fn profile_examples() {
        let e = KernelSpec::exponential();
        assert_eq!(kappa_eval(&e, 1.0).unwrap(), 1.0);
        assert!((kappa_eval(&e, 0.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        let r = KernelSpec::rbf(0.25).unwrap();
        assert!((kappa_eval(&r, -1.0).unwrap() - (-1f64).exp()).abs() < 1e-15);
        assert!(matches!(kappa_eval(&e, 1.1), Err(Error::OutOfDomain { .. })));
        assert_eq!(kappa_eval(&e, 1.0 + 1e-10).unwrap(), 1.0);
    }

    #[test]
    fn arc_cosine_oracle() {
        // independent form: (√(1−u²) + (π − acos u) u) / π
        let a = KernelSpec::arc_cosine1();
        for &u in &[-1.0, -0.6, 0.0, 0.3, 0.9, 1.0] {
            let f: f64 = u;
            let expected = ((1.0 - f * f).sqrt() + (PI - f.acos()) * f) / PI;
            assert!((kappa_eval(&a, u).unwrap() - expected).abs() < 1e-14);
        }
        assert!((kappa_eval(&a, 0.0).unwrap() - 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn every_family_has_unit_k_one() {
        for s in all_specs() {
            assert!((s.k_one() - 1.0).abs() < 1e-12, "{s}");
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        for s in all_specs() {
            let h = 1e-9;
            let fd = (s.profile(1.0) - s.profile(1.0 - h)) / h;
            assert!(
                (fd - s.derivative_at_one()).abs() < 1e-4 * s.derivative_at_one().max(1.0),
                "{s}: {fd} vs {}",
                s.derivative_at_one()
            );
        }
    }

    #[test]
    fn kernel_eval_examples() {
        let e = KernelSpec::exponential();
        let v = kernel_eval(&e, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((v - (-1f64).exp()).abs() < 1e-15);
        assert_eq!(kernel_eval(&e, &[1.0, 2.0], &[0.0, 0.0]).unwrap(), 0.0);
        let x = [0.3, -1.2, 2.0];
        for s in all_specs() {
            let kxx = kernel_eval(&s, &x, &x).unwrap();
            assert!((kxx - dot(&x, &x)).abs() < 1e-10);
        }
        assert!(kernel_eval(&e, &[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn invalid_parameters() {
        assert!(KernelSpec::rbf(0.0).is_err());
        assert!(KernelSpec::rbf(-1.0).is_err());
        assert!(KernelSpec::polynomial(0).is_err());
        assert!(KernelSpec::parse("gauss").is_err());
    }

    #[test]
    fn parse_round_trip() {
        for s in all_specs() {
            assert_eq!(KernelSpec::parse(&s.to_string()).unwrap(), s);
        }
        let r = KernelSpec::parse("rbf:10").unwrap();
        assert_eq!(r.family(), KernelFamily::RbfHomogeneous { alpha: 0.01 });
    }

    #[test]
    fn certification_examples() {
        let e = certify_nonexpansive(&KernelSpec::exponential(), 2000, 1).unwrap();
        assert_eq!(e.k_prime_one, 1.0);
        assert!(e.passed(), "{e:?}");
        let r = certify_nonexpansive(&KernelSpec::rbf(0.25).unwrap(), 2000, 1).unwrap();
        assert_eq!(r.k_prime_one, 0.5);
        assert!(r.passed());
        let bad = certify_nonexpansive(&KernelSpec::rbf(2.0).unwrap(), 2000, 1).unwrap();
        assert_eq!(bad.k_prime_one, 4.0);
        assert!(!bad.analytic_pass);
        assert!(bad.counterexample.is_some());
        let p2 = certify_nonexpansive(&KernelSpec::polynomial(2).unwrap(), 2000, 1).unwrap();
        assert!(!p2.analytic_pass);
    }
}
