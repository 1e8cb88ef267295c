//! Smooth displacement fields `τ`, the deformation operator
//! `L_{ατ} x(u) = x(u − ατ(u))`, and randomized operator-norm probes.

use std::f64::consts::{PI, TAU};
use std::io::Write;
use std::sync::Arc;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::group::{geodesic, s2_angles, DiscretizedGroup, GroupElement, GroupKind};
use crate::rng::{derive_seed, rng_from};
use crate::signal::{fm_distance, point_stencil, FeatureMap, FiberInterp};

/// Base space on which a displacement field lives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BaseGrid {
    /// Periodic pixel lattice; displacements in grid units `(dx, dy)`.
    Plane { height: usize, width: usize },
    /// Equiangular sphere grid; displacements in radians along `(e_β, e_φ)`.
    Sphere { n_beta: usize, n_phi: usize },
}

impl BaseGrid {
    pub fn of_group(group: &DiscretizedGroup) -> Result<Self> {
        match group.kind() {
            GroupKind::Se2 { height, width, .. } => Ok(BaseGrid::Plane { height, width }),
            GroupKind::S2 { n_beta, n_phi } => Ok(BaseGrid::Sphere { n_beta, n_phi }),
            GroupKind::So3 { .. } => Err(Error::Unsupported("deformations of the SO(3) grid".into())),
        }
    }

    pub fn len(&self) -> usize {
        match *self {
            BaseGrid::Plane { height, width } => height * width,
            BaseGrid::Sphere { n_beta, n_phi } => n_beta * n_phi,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A displacement per base-grid point with cached norms.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeformationField {
    grid: BaseGrid,
    tau: Vec<[f64; 2]>,
    periodic: bool,
    grad_sup: f64,
    sup: f64,
    seed: u64,
    smoothness: f64,
    /// Norms before rescaling (generated fields only).
    raw_grad_sup: f64,
    raw_sup: f64,
}

impl DeformationField {
    /// Wraps explicit displacements. Non-periodic fields use one-sided
    /// differences at the lattice boundary.
    pub fn from_vectors(grid: BaseGrid, tau: Vec<[f64; 2]>, periodic: bool) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::InvalidDims("empty deformation grid".into()));
        }
        if tau.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: tau.len(),
            });
        }
        if tau.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::param("tau", "displacements must be finite"));
        }
        let mut f = DeformationField {
            grid,
            tau,
            periodic,
            grad_sup: 0.0,
            sup: 0.0,
            seed: 0,
            smoothness: 0.0,
            raw_grad_sup: 0.0,
            raw_sup: 0.0,
        };
        f.grad_sup = grad_sup_norm(&f);
        f.sup = sup_norm(&f);
        f.raw_grad_sup = f.grad_sup;
        f.raw_sup = f.sup;
        Ok(f)
    }

    pub fn zero(grid: BaseGrid) -> Result<Self> {
        Self::from_vectors(grid, vec![[0.0; 2]; grid.len()], true)
    }

    pub fn constant(grid: BaseGrid, c: [f64; 2]) -> Result<Self> {
        Self::from_vectors(grid, vec![c; grid.len()], true)
    }

    pub fn grid(&self) -> BaseGrid {
        self.grid
    }

    pub fn tau(&self) -> &[[f64; 2]] {
        &self.tau
    }

    pub fn grad_sup(&self) -> f64 {
        self.grad_sup
    }

    pub fn sup(&self) -> f64 {
        self.sup
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn smoothness(&self) -> f64 {
        self.smoothness
    }

    pub fn raw_grad_sup(&self) -> f64 {
        self.raw_grad_sup
    }

    pub fn raw_sup(&self) -> f64 {
        self.raw_sup
    }

    /// `‖∇τ‖∞ ≤ 1/2`.
    pub fn is_admissible(&self) -> bool {
        self.grad_sup <= 0.5
    }

    /// `c · τ`, with norms recomputed.
    pub fn scaled(&self, c: f64) -> DeformationField {
        let mut f = self.clone();
        f.tau.iter_mut().flatten().for_each(|v| *v *= c);
        f.grad_sup = grad_sup_norm(&f);
        f.sup = sup_norm(&f);
        f
    }

    /// Binary dump: `ETAU`, grid kind, two dims, seed, smoothness, then
    /// row-major displacement pairs, all little-endian.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(b"ETAU")?;
        let (kind, a, b) = match self.grid {
            BaseGrid::Plane { height, width } => (0u8, height, width),
            BaseGrid::Sphere { n_beta, n_phi } => (1u8, n_beta, n_phi),
        };
        w.write_all(&[kind])?;
        w.write_all(&(a as u32).to_le_bytes())?;
        w.write_all(&(b as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.smoothness.to_le_bytes())?;
        for v in self.tau.iter().flatten() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Largest singular value of `[[a, b], [c, d]]`.
fn spectral_norm_2x2(a: f64, b: f64, c: f64, d: f64) -> f64 {
    let s = a * a + b * b + c * c + d * d;
    let det = a * d - b * c;
    let disc = (s * s - 4.0 * det * det).max(0.0).sqrt();
    ((s + disc) / 2.0).sqrt()
}

/// Central-difference derivative along an axis of length `n` at `i`,
/// one-sided at the ends of non-periodic axes.
fn diff(n: usize, i: usize, periodic: bool, at: impl Fn(usize) -> f64) -> f64 {
    if n == 1 {
        return 0.0;
    }
    if periodic {
        (at((i + 1) % n) - at((i + n - 1) % n)) / 2.0
    } else if i == 0 {
        at(1) - at(0)
    } else if i == n - 1 {
        at(n - 1) - at(n - 2)
    } else {
        (at(i + 1) - at(i - 1)) / 2.0
    }
}

/// `sup_u ‖∇τ(u)‖₂` from finite differences. On the sphere the Jacobian is
/// taken in the `(β, φ)` chart with the `1/sin β` metric factor on
/// φ-derivatives, and the pole rings are skipped.
pub fn grad_sup_norm(tau: &DeformationField) -> f64 {
    let t = &tau.tau;
    match tau.grid {
        BaseGrid::Plane { height, width } => {
            let mut best: f64 = 0.0;
            for y in 0..height {
                for x in 0..width {
                    let at = |yy: usize, xx: usize, k: usize| t[yy * width + xx][k];
                    let dxx = diff(width, x, tau.periodic, |i| at(y, i, 0));
                    let dxy = diff(height, y, tau.periodic, |i| at(i, x, 0));
                    let dyx = diff(width, x, tau.periodic, |i| at(y, i, 1));
                    let dyy = diff(height, y, tau.periodic, |i| at(i, x, 1));
                    best = best.max(spectral_norm_2x2(dxx, dxy, dyx, dyy));
                }
            }
            best
        }
        BaseGrid::Sphere { n_beta, n_phi } => {
            let hb = PI / n_beta as f64;
            let hp = TAU / n_phi as f64;
            let mut best: f64 = 0.0;
            for i in 1..n_beta.saturating_sub(1) {
                let beta = PI * (2 * i + 1) as f64 / (2 * n_beta) as f64;
                for j in 0..n_phi {
                    let at = |ii: usize, jj: usize, k: usize| t[ii * n_phi + jj][k];
                    let db = |k| (at(i + 1, j, k) - at(i - 1, j, k)) / (2.0 * hb);
                    let dp = |k| {
                        (at(i, (j + 1) % n_phi, k) - at(i, (j + n_phi - 1) % n_phi, k))
                            / (2.0 * hp * beta.sin())
                    };
                    best = best.max(spectral_norm_2x2(db(0), dp(0), db(1), dp(1)));
                }
            }
            best
        }
    }
}

/// `sup_u ‖τ(u)‖₂`.
pub fn sup_norm(tau: &DeformationField) -> f64 {
    tau.tau
        .iter()
        .map(|v| v[0].hypot(v[1]))
        .fold(0.0, f64::max)
}

/// Periodic 1-D Gaussian weights folded onto `n` taps, normalized to sum 1.
fn periodic_gaussian(n: usize, sigma: f64) -> Vec<f64> {
    let reach = (4.0 * sigma).ceil() as i64;
    let mut taps = vec![0.0; n];
    for d in -reach..=reach {
        let g = (-((d * d) as f64) / (2.0 * sigma * sigma)).exp();
        taps[d.rem_euclid(n as i64) as usize] += g;
    }
    let z: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= z);
    taps
}

fn smooth_plane(field: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let kx = periodic_gaussian(w, sigma);
    let ky = periodic_gaussian(h, sigma);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (0..w).map(|d| kx[d] * field[y * w + (x + d) % w]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (0..h).map(|d| ky[d] * tmp[((y + d) % h) * w + x]).sum();
        }
    }
    out
}

fn sphere_frame(beta: f64, phi: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
    let (sb, cb) = beta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    (
        [sb * cp, sb * sp, cb],
        [cb * cp, cb * sp, -sb],
        [-sp, cp, 0.0],
    )
}

/// Gaussian-smoothed white noise rescaled so that `‖∇τ‖∞ = target_grad`.
/// Plane fields are periodic with `smoothness` in grid units; sphere fields
/// smooth ambient 3-D noise geodesically (radians) and keep the tangent part.
pub fn generate_tau(grid: BaseGrid, smoothness: f64, target_grad: f64, seed: u64) -> Result<DeformationField> {
    if !(target_grad > 0.0 && target_grad <= 0.5) {
        return Err(Error::param(
            "target_grad",
            format!("must lie in (0, 1/2], got {target_grad}"),
        ));
    }
    if !(smoothness > 0.0 && smoothness.is_finite()) {
        return Err(Error::param("smoothness", format!("must be finite and > 0, got {smoothness}")));
    }
    let mut rng = rng_from(seed);
    let tau: Vec<[f64; 2]> = match grid {
        BaseGrid::Plane { height, width } => {
            let n = height * width;
            let mut comps = [vec![0.0; n], vec![0.0; n]];
            for c in &mut comps {
                c.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            }
            let sx = smooth_plane(&comps[0], height, width, smoothness);
            let sy = smooth_plane(&comps[1], height, width, smoothness);
            sx.into_iter().zip(sy).map(|(a, b)| [a, b]).collect()
        }
        BaseGrid::Sphere { n_beta, n_phi } => {
            let pts: Vec<(f64, f64)> = (0..n_beta)
                .flat_map(|i| {
                    (0..n_phi).map(move |j| {
                        (
                            PI * (2 * i + 1) as f64 / (2 * n_beta) as f64,
                            TAU * j as f64 / n_phi as f64,
                        )
                    })
                })
                .collect();
            let units: Vec<[f64; 3]> = pts.iter().map(|&(b, p)| sphere_frame(b, p).0).collect();
            let weights: Vec<f64> = pts.iter().map(|&(b, _)| b.sin()).collect();
            let noise: Vec<[f64; 3]> = (0..pts.len())
                .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)])
                .collect();
            pts.iter()
                .zip(&units)
                .map(|(&(b, p), u)| {
                    let mut acc = [0.0; 3];
                    let mut z = 0.0;
                    for ((v, n), w) in units.iter().zip(&noise).zip(&weights) {
                        let d = geodesic(*u, *v);
                        let g = w * (-d * d / (2.0 * smoothness * smoothness)).exp();
                        z += g;
                        for k in 0..3 {
                            acc[k] += g * n[k];
                        }
                    }
                    let (_, eb, ep) = sphere_frame(b, p);
                    let a = [acc[0] / z, acc[1] / z, acc[2] / z];
                    [
                        a[0] * eb[0] + a[1] * eb[1] + a[2] * eb[2],
                        a[0] * ep[0] + a[1] * ep[1],
                    ]
                })
                .collect()
        }
    };
    let mut field = DeformationField::from_vectors(grid, tau, true)?;
    let raw_grad = field.grad_sup;
    let raw_sup = field.sup;
    if !(raw_grad > 1e-300) {
        return Err(Error::param("smoothness", "smoothed field is constant; cannot rescale its gradient"));
    }
    let mut scaled = field.scaled(target_grad / raw_grad);
    scaled.seed = seed;
    scaled.smoothness = smoothness;
    scaled.raw_grad_sup = raw_grad;
    scaled.raw_sup = raw_sup;
    field = scaled;
    Ok(field)
}

fn check_field(x: &FeatureMap, tau: &DeformationField) -> Result<()> {
    let grid = BaseGrid::of_group(x.group())?;
    if grid != tau.grid {
        return Err(Error::InvalidDims(format!(
            "field on {:?} applied to a map on {:?}",
            tau.grid, grid
        )));
    }
    Ok(())
}

/// Exponential map on the unit sphere: move from `(β, φ)` along the tangent
/// vector `v_β e_β + v_φ e_φ`.
fn sphere_step(beta: f64, phi: f64, v: [f64; 2]) -> GroupElement {
    let (p, eb, ep) = sphere_frame(beta, phi);
    let t = [
        v[0] * eb[0] + v[1] * ep[0],
        v[0] * eb[1] + v[1] * ep[1],
        v[0] * eb[2] + v[1] * ep[2],
    ];
    let len = v[0].hypot(v[1]);
    if len == 0.0 {
        return GroupElement::s2_point(beta, phi);
    }
    let (s, c) = len.sin_cos();
    let q = [
        c * p[0] + s * t[0] / len,
        c * p[1] + s * t[1] / len,
        c * p[2] + s * t[2] / len,
    ];
    let (b, f) = s2_angles(q);
    GroupElement::s2_point(b, f)
}

/// Whether `α‖∇τ‖∞ ≤ 1/2`, allowing a few ulps for fields rescaled to hit
/// the limit exactly.
pub fn within_invertibility_limit(alpha: f64, grad_sup: f64) -> bool {
    alpha * grad_sup <= 0.5 + 1e-12
}

/// `L_{ατ} x(u, h) = x(u − ατ(u), h)`; the fiber coordinate is untouched.
/// Warns when `α‖∇τ‖∞ > 1/2`.
pub fn apply_deformation(x: &FeatureMap, tau: &DeformationField, alpha: f64) -> Result<FeatureMap> {
    if !within_invertibility_limit(alpha, tau.grad_sup) {
        warn!(
            "deformation with α‖∇τ‖∞ = {} exceeds 1/2 and may not be invertible",
            alpha * tau.grad_sup
        );
    }
    deform(x, tau, alpha)
}

/// As [`apply_deformation`], but rejects `α‖∇τ‖∞ > 1/2`.
pub fn apply_deformation_strict(x: &FeatureMap, tau: &DeformationField, alpha: f64) -> Result<FeatureMap> {
    if !within_invertibility_limit(alpha, tau.grad_sup) {
        return Err(Error::param(
            "alpha",
            format!("α‖∇τ‖∞ = {} exceeds 1/2", alpha * tau.grad_sup),
        ));
    }
    deform(x, tau, alpha)
}

fn deform(x: &FeatureMap, tau: &DeformationField, alpha: f64) -> Result<FeatureMap> {
    check_field(x, tau)?;
    if alpha == 0.0 {
        return Ok(x.clone());
    }
    let group = x.group().clone();
    let c = x.channels();
    let f = group.fiber_len();
    let mut values = vec![0.0; group.len() * c];
    let result: Result<()> = values
        .par_chunks_mut(c * f)
        .enumerate()
        .try_for_each(|(base, out)| {
            let d = tau.tau[base];
            for j in 0..f {
                let point = match group.element(base * f + j) {
                    GroupElement::Se2 { tx, ty, theta } => {
                        GroupElement::se2(tx - alpha * d[0], ty - alpha * d[1], *theta)
                    }
                    GroupElement::S2Point { theta, phi } => {
                        sphere_step(*theta, *phi, [-alpha * d[0], -alpha * d[1]])
                    }
                    other => {
                        return Err(Error::VariantMismatch {
                            expected: "SE2",
                            got: other.variant_name(),
                        })
                    }
                };
                point_stencil(&group, &point, FiberInterp::Nearest)?.accumulate(
                    x,
                    1.0,
                    &mut out[j * c..(j + 1) * c],
                );
            }
            Ok(())
        });
    result?;
    Ok(FeatureMap::from_parts(group, c, values).with_layer(x.layer()))
}

/// An operator on feature maps, as used by the probes.
pub type Operator<'a> = dyn Fn(&FeatureMap) -> Result<FeatureMap> + Sync + 'a;

/// Unit-norm Gaussian-smoothed white noise (smoothing scale one grid step,
/// base space only).
pub fn band_limited_probe(group: &Arc<DiscretizedGroup>, channels: usize, seed: u64) -> Result<FeatureMap> {
    let mut rng = rng_from(seed);
    let values: Vec<f64> = (0..group.len() * channels)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let noise = FeatureMap::new(group.clone(), channels, values)?;
    let smooth = crate::ckn::pool(&noise, group.grid_step())?;
    let n = smooth.norm();
    if n < 1e-300 {
        return Err(Error::InsufficientData("probe signal vanished after smoothing".into()));
    }
    Ok(smooth.scaled(1.0 / n))
}

/// `max_x ‖op(x)‖` over `n_probes` band-limited unit probes; a lower bound
/// on the operator norm.
pub fn probe_norm(
    op: &Operator<'_>,
    group: &Arc<DiscretizedGroup>,
    channels: usize,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    let norms: Vec<f64> = (0..n_probes)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let x = band_limited_probe(group, channels, derive_seed(seed, i as u64))?;
            Ok(op(&x)?.norm())
        })
        .collect::<Result<_>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max))
}

/// `max_x ‖A(Bx) − B(Ax)‖` over `n_probes` band-limited unit probes.
pub fn probe_commutator_norm(
    op_a: &Operator<'_>,
    op_b: &Operator<'_>,
    group: &Arc<DiscretizedGroup>,
    channels: usize,
    n_probes: usize,
    seed: u64,
) -> Result<f64> {
    let norms: Vec<f64> = (0..n_probes)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let x = band_limited_probe(group, channels, derive_seed(seed, i as u64))?;
            let ab = op_a(&op_b(&x)?)?;
            let ba = op_b(&op_a(&x)?)?;
            fm_distance(&ab, &ba)
        })
        .collect::<Result<_>>()?;
    Ok(norms.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ckn::pool;
    use crate::group::build_group;
    use crate::signal::group_translate;

    fn se2(h: usize, w: usize, n: usize) -> Arc<DiscretizedGroup> {
        Arc::new(
            build_group(GroupKind::Se2 {
                height: h,
                width: w,
                n_theta: n,
            })
            .unwrap(),
        )
    }

    const PLANE: BaseGrid = BaseGrid::Plane { height: 16, width: 16 };

    #[test]
    fn rescaling_contract() {
        let f = generate_tau(PLANE, 2.0, 0.1, 3).unwrap();
        assert!((f.grad_sup() - 0.1).abs() < 1e-10);
        assert!((grad_sup_norm(&f) - f.grad_sup()).abs() < 1e-12);
        assert!((sup_norm(&f) - f.sup()).abs() < 1e-12);
        assert!(f.is_admissible());
        assert_eq!(generate_tau(PLANE, 2.0, 0.1, 3).unwrap(), f);
        assert!(generate_tau(PLANE, 2.0, 0.6, 3).is_err());
        assert!(generate_tau(PLANE, 2.0, 0.0, 3).is_err());
        assert!(generate_tau(PLANE, 0.0, 0.1, 3).is_err());
    }

    #[test]
    fn very_smooth_fields_are_nearly_constant() {
        match generate_tau(PLANE, 1e3, 0.1, 4) {
            Ok(f) => assert!(f.raw_grad_sup() <= 1e-3 * f.raw_sup()),
            Err(e) => assert!(matches!(e, Error::InvalidParameter { .. })),
        }
    }

    #[test]
    fn sphere_field() {
        let grid = BaseGrid::Sphere { n_beta: 12, n_phi: 12 };
        let f = generate_tau(grid, 0.5, 0.2, 5).unwrap();
        assert!((f.grad_sup() - 0.2).abs() < 1e-10);
    }

    #[test]
    fn norm_examples() {
        let z = DeformationField::zero(PLANE).unwrap();
        assert_eq!((z.grad_sup(), z.sup()), (0.0, 0.0));
        let c = DeformationField::constant(PLANE, [3.0, 4.0]).unwrap();
        assert_eq!((c.grad_sup(), c.sup()), (0.0, 5.0));
        let ramp: Vec<[f64; 2]> = (0..16)
            .flat_map(|_y| (0..16).map(|x| [0.1 * x as f64, 0.0]))
            .collect();
        let r = DeformationField::from_vectors(PLANE, ramp, false).unwrap();
        assert!((r.grad_sup() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn spectral_norm_oracle() {
        // [[3, 0], [4, 5]]: singular values √45 and √5
        assert!((spectral_norm_2x2(3.0, 0.0, 4.0, 5.0) - 45f64.sqrt()).abs() < 1e-12);
        assert!((spectral_norm_2x2(0.0, -2.0, 0.0, 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn scaling_is_linear() {
        let f = generate_tau(PLANE, 2.0, 0.2, 6).unwrap();
        for a in [0.1, 0.5, 1.0] {
            let s = f.scaled(a);
            assert!((s.grad_sup() - a * f.grad_sup()).abs() < 1e-14);
        }
    }

    #[test]
    fn deformation_examples() {
        let g = se2(16, 16, 4);
        let f = generate_tau(PLANE, 2.0, 0.2, 7).unwrap();
        let x = band_limited_probe(&g, 2, 1).unwrap();
        assert_eq!(apply_deformation(&x, &f, 0.0).unwrap(), x);
        let c = FeatureMap::constant(g.clone(), 1, 0.4).unwrap();
        let y = apply_deformation(&c, &f, 1.0).unwrap();
        assert!(y.values().iter().all(|v| (v - 0.4).abs() < 1e-14));
        let shift = DeformationField::constant(PLANE, [2.0, -3.0]).unwrap();
        let a = apply_deformation(&x, &shift, 1.0).unwrap();
        let b = group_translate(&x, &GroupElement::se2(2.0, -3.0, 0.0)).unwrap();
        assert_eq!(a, b);
        assert!(apply_deformation_strict(&x, &f, 3.0).is_err());
        let wrong = DeformationField::zero(BaseGrid::Plane { height: 8, width: 8 }).unwrap();
        assert!(apply_deformation(&x, &wrong, 1.0).is_err());
    }

    #[test]
    fn probes() {
        let g = se2(16, 16, 4);
        let p = band_limited_probe(&g, 1, 9).unwrap();
        assert!((p.norm() - 1.0).abs() < 1e-12);
        let pool_op = |x: &FeatureMap| pool(x, 2.0);
        let shift = |x: &FeatureMap| group_translate(x, &GroupElement::se2(3.0, 1.0, 0.0));
        assert_eq!(probe_commutator_norm(&pool_op, &pool_op, &g, 1, 4, 1).unwrap(), 0.0);
        assert!(probe_commutator_norm(&shift, &pool_op, &g, 1, 4, 1).unwrap() <= 1e-10);
        let f = generate_tau(PLANE, 2.0, 0.25, 11).unwrap();
        let deform_op = |x: &FeatureMap| apply_deformation(x, &f, 1.0);
        let n = probe_norm(&deform_op, &g, 1, 8, 2).unwrap();
        assert!(n <= 1.0 + 4.0 * f.grad_sup());
        assert!(probe_commutator_norm(&deform_op, &pool_op, &g, 1, 4, 3).unwrap() > 0.0);
    }
}
