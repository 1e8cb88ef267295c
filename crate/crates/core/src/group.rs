//! Groups SE(2), SO(3), SE(3), the homogeneous space S² = SO(3)/SO(2), and
//! their finite discretizations with normalized Haar weights.
//!
//! Angles are kept in `[0, 2π)`; the ZYZ polar angle lives in `[0, π]`.
//! Rotations are `R = Rz(α) Ry(β) Rz(γ)`.

use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Polar angles below this are treated as the gimbal-lock case.
const GIMBAL_EPS: f64 = 1e-9;

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Signed difference `a - b` wrapped into `(-π, π]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = wrap_angle(a - b);
    if d > PI {
        d - TAU
    } else {
        d
    }
}

/// A rotation in SO(3), stored as canonical ZYZ Euler angles plus the
/// matrix they generate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct So3 {
    alpha: f64,
    beta: f64,
    gamma: f64,
    matrix: [[f64; 3]; 3],
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn rot_y(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

impl So3 {
    pub fn identity() -> Self {
        Self::from_euler(0.0, 0.0, 0.0)
    }

    /// Builds a rotation from arbitrary ZYZ angles; the stored angles are
    /// canonicalized (β in `[0, π]`, gimbal cases folded into γ).
    pub fn from_euler(alpha: f64, beta: f64, gamma: f64) -> Self {
        let m = rot_z(alpha) * rot_y(beta) * rot_z(gamma);
        Self::from_matrix(&m)
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_euler(angle, 0.0, 0.0)
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_euler(0.0, angle, 0.0)
    }

    /// Recovers canonical ZYZ angles from a rotation matrix. The cached
    /// matrix is regenerated from the angles so the two always agree.
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        let sin_beta = m[(0, 2)].hypot(m[(1, 2)]);
        let beta = sin_beta.atan2(m[(2, 2)]);
        let (alpha, gamma) = if sin_beta > GIMBAL_EPS {
            (
                m[(1, 2)].atan2(m[(0, 2)]),
                m[(2, 1)].atan2(-m[(2, 0)]),
            )
        } else if m[(2, 2)] > 0.0 {
            // R = Rz(α + γ)
            (0.0, m[(1, 0)].atan2(m[(0, 0)]))
        } else {
            // R = Ry(π) Rz(γ) with α folded to zero
            (0.0, m[(1, 0)].atan2(m[(1, 1)]))
        };
        let (alpha, gamma) = (wrap_angle(alpha), wrap_angle(gamma));
        let beta = beta.clamp(0.0, PI);
        let r = rot_z(alpha) * rot_y(beta) * rot_z(gamma);
        let mut matrix = [[0.0; 3]; 3];
        for (i, row) in matrix.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[(i, j)];
            }
        }
        So3 {
            alpha,
            beta,
            gamma,
            matrix,
        }
    }

    pub fn euler(&self) -> (f64, f64, f64) {
        (self.alpha, self.beta, self.gamma)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let m = &self.matrix;
        Matrix3::new(
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        )
    }

    pub fn compose(&self, other: &So3) -> So3 {
        So3::from_matrix(&(self.matrix() * other.matrix()))
    }

    pub fn inverse(&self) -> So3 {
        So3::from_matrix(&self.matrix().transpose())
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let r = self.matrix() * Vector3::new(v[0], v[1], v[2]);
        [r[0], r[1], r[2]]
    }

    /// The rotation `Rz(φ) Ry(θ)` carrying the north pole to the point with
    /// colatitude `theta` and longitude `phi`.
    pub fn section(theta: f64, phi: f64) -> So3 {
        So3::from_euler(phi, theta, 0.0)
    }
}

/// An element of one of the supported groups, or a point of S².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GroupElement {
    /// Planar roto-translation: `(R_θ, t)` acting as `u ↦ R_θ u + t`.
    Se2 { tx: f64, ty: f64, theta: f64 },
    So3(So3),
    /// Rigid motion `(v, R)` acting as `u ↦ R u + v`.
    Se3 { v: [f64; 3], rot: So3 },
    /// Colatitude `theta ∈ [0, π]`, longitude `phi ∈ [0, 2π)`.
    S2Point { theta: f64, phi: f64 },
}

impl GroupElement {
    pub fn se2(tx: f64, ty: f64, theta: f64) -> Self {
        GroupElement::Se2 {
            tx,
            ty,
            theta: wrap_angle(theta),
        }
    }

    pub fn so3(alpha: f64, beta: f64, gamma: f64) -> Self {
        GroupElement::So3(So3::from_euler(alpha, beta, gamma))
    }

    pub fn se3(v: [f64; 3], rot: So3) -> Self {
        GroupElement::Se3 { v, rot }
    }

    pub fn s2_point(theta: f64, phi: f64) -> Self {
        // Reflect colatitudes outside [0, π] through the pole.
        let t = wrap_angle(theta);
        let (theta, phi) = if t > PI {
            (TAU - t, phi + PI)
        } else {
            (t, phi)
        };
        GroupElement::S2Point {
            theta,
            phi: wrap_angle(phi),
        }
    }

    pub fn variant_name(&self) -> &'static str {
        match self {
            GroupElement::Se2 { .. } => "SE2",
            GroupElement::So3(_) => "SO3",
            GroupElement::Se3 { .. } => "SE3",
            GroupElement::S2Point { .. } => "S2Point",
        }
    }

    /// The identity of the same variant as `self`.
    pub fn identity_like(&self) -> Result<Self> {
        match self {
            GroupElement::Se2 { .. } => Ok(GroupElement::se2(0.0, 0.0, 0.0)),
            GroupElement::So3(_) => Ok(GroupElement::So3(So3::identity())),
            GroupElement::Se3 { .. } => Ok(GroupElement::se3([0.0; 3], So3::identity())),
            GroupElement::S2Point { .. } => Err(not_a_group()),
        }
    }

    pub fn compose(&self, other: &GroupElement) -> Result<GroupElement> {
        match (self, other) {
            (
                GroupElement::Se2 { tx, ty, theta },
                GroupElement::Se2 {
                    tx: tx2,
                    ty: ty2,
                    theta: theta2,
                },
            ) => {
                let (s, c) = theta.sin_cos();
                Ok(GroupElement::se2(
                    tx + c * tx2 - s * ty2,
                    ty + s * tx2 + c * ty2,
                    theta + theta2,
                ))
            }
            (GroupElement::So3(a), GroupElement::So3(b)) => Ok(GroupElement::So3(a.compose(b))),
            (GroupElement::Se3 { v, rot }, GroupElement::Se3 { v: v2, rot: rot2 }) => {
                let rv = rot.apply(*v2);
                Ok(GroupElement::se3(
                    [v[0] + rv[0], v[1] + rv[1], v[2] + rv[2]],
                    rot.compose(rot2),
                ))
            }
            (GroupElement::S2Point { .. }, GroupElement::S2Point { .. }) => Err(not_a_group()),
            (a, b) => Err(Error::VariantMismatch {
                expected: a.variant_name(),
                got: b.variant_name(),
            }),
        }
    }

    pub fn inverse(&self) -> Result<GroupElement> {
        match self {
            GroupElement::Se2 { tx, ty, theta } => {
                let (s, c) = theta.sin_cos();
                Ok(GroupElement::se2(-(c * tx + s * ty), s * tx - c * ty, -theta))
            }
            GroupElement::So3(r) => Ok(GroupElement::So3(r.inverse())),
            GroupElement::Se3 { v, rot } => {
                let inv = rot.inverse();
                let w = inv.apply(*v);
                Ok(GroupElement::se3([-w[0], -w[1], -w[2]], inv))
            }
            GroupElement::S2Point { .. } => Err(not_a_group()),
        }
    }

    /// Acts on a point of the base space: ℝ² for SE(2), ℝ³ for SO(3) and SE(3).
    pub fn act_on_point(&self, u: &[f64]) -> Result<Vec<f64>> {
        match self {
            GroupElement::Se2 { tx, ty, theta } => {
                check_dim(2, u.len())?;
                let (s, c) = theta.sin_cos();
                Ok(vec![c * u[0] - s * u[1] + tx, s * u[0] + c * u[1] + ty])
            }
            GroupElement::So3(r) => {
                check_dim(3, u.len())?;
                Ok(r.apply([u[0], u[1], u[2]]).to_vec())
            }
            GroupElement::Se3 { v, rot } => {
                check_dim(3, u.len())?;
                let r = rot.apply([u[0], u[1], u[2]]);
                Ok(vec![r[0] + v[0], r[1] + v[1], r[2] + v[2]])
            }
            GroupElement::S2Point { .. } => Err(not_a_group()),
        }
    }

    /// Matrix representation: 3×3 homogeneous for SE(2), 3×3 for SO(3),
    /// 4×4 homogeneous for SE(3).
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self {
            GroupElement::Se2 { tx, ty, theta } => {
                let (s, c) = theta.sin_cos();
                Ok(DMatrix::from_row_slice(
                    3,
                    3,
                    &[c, -s, *tx, s, c, *ty, 0.0, 0.0, 1.0],
                ))
            }
            GroupElement::So3(r) => {
                let m = r.matrix();
                Ok(DMatrix::from_fn(3, 3, |i, j| m[(i, j)]))
            }
            GroupElement::Se3 { v, rot } => {
                let m = rot.matrix();
                Ok(DMatrix::from_fn(4, 4, |i, j| match (i, j) {
                    (3, 3) => 1.0,
                    (3, _) => 0.0,
                    (_, 3) => v[i],
                    _ => m[(i, j)],
                }))
            }
            GroupElement::S2Point { .. } => Err(not_a_group()),
        }
    }

    /// Unit vector of an S² point.
    pub fn unit_vector(&self) -> Option<[f64; 3]> {
        match self {
            GroupElement::S2Point { theta, phi } => Some(s2_unit(*theta, *phi)),
            _ => None,
        }
    }

    /// Euclidean size of the base-space component: translation length for
    /// SE(2)/SE(3), geodesic distance from the north pole for S², rotation
    /// angle for SO(3).
    pub fn base_magnitude(&self) -> f64 {
        match self {
            GroupElement::Se2 { tx, ty, .. } => tx.hypot(*ty),
            GroupElement::Se3 { v, .. } => (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt(),
            GroupElement::S2Point { theta, .. } => *theta,
            GroupElement::So3(r) => {
                let m = r.matrix();
                ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
            }
        }
    }

    /// Approximate equality, comparing angles through their wrapped difference
    /// and rotations through their matrices.
    pub fn approx_eq(&self, other: &GroupElement, tol: f64) -> bool {
        match (self, other) {
            (
                GroupElement::Se2 { tx, ty, theta },
                GroupElement::Se2 {
                    tx: a,
                    ty: b,
                    theta: c,
                },
            ) => (tx - a).abs() <= tol && (ty - b).abs() <= tol && angle_diff(*theta, *c).abs() <= tol,
            (GroupElement::So3(a), GroupElement::So3(b)) => matrices_close(a, b, tol),
            (GroupElement::Se3 { v, rot }, GroupElement::Se3 { v: w, rot: r2 }) => {
                v.iter().zip(w).all(|(x, y)| (x - y).abs() <= tol) && matrices_close(rot, r2, tol)
            }
            (GroupElement::S2Point { theta, phi }, GroupElement::S2Point { theta: t, phi: p }) => {
                let a = s2_unit(*theta, *phi);
                let b = s2_unit(*t, *p);
                a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= tol)
            }
            _ => false,
        }
    }
}

fn matrices_close(a: &So3, b: &So3, tol: f64) -> bool {
    (a.matrix() - b.matrix()).iter().all(|d| d.abs() <= tol)
}

fn not_a_group() -> Error {
    Error::Unsupported("S² is a homogeneous space; points have no group law".into())
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub fn s2_unit(theta: f64, phi: f64) -> [f64; 3] {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [st * cp, st * sp, ct]
}

/// Colatitude/longitude of a (not necessarily unit) vector.
pub fn s2_angles(v: [f64; 3]) -> (f64, f64) {
    let rho = v[0].hypot(v[1]);
    (rho.atan2(v[2]), wrap_angle(v[1].atan2(v[0])))
}

/// Geodesic distance between two unit vectors.
pub fn geodesic(a: [f64; 3], b: [f64; 3]) -> f64 {
    // atan2 form stays accurate for nearly coincident points.
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let c = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    c.atan2(d)
}

/// Which discretization a [`DiscretizedGroup`] samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupKind {
    /// Toroidal `height × width` pixel lattice times `n_theta` uniform angles.
    Se2 {
        height: usize,
        width: usize,
        n_theta: usize,
    },
    /// Equiangular sphere grid, `β_i = π(2i+1)/(2 n_beta)`, `φ_j = 2πj/n_phi`.
    S2 { n_beta: usize, n_phi: usize },
    /// ZYZ Euler grid with the polar angle sampled like the S² grid.
    So3 {
        n_alpha: usize,
        n_beta: usize,
        n_gamma: usize,
    },
}

impl GroupKind {
    pub fn name(&self) -> &'static str {
        match self {
            GroupKind::Se2 { .. } => "se2",
            GroupKind::S2 { .. } => "s2",
            GroupKind::So3 { .. } => "so3",
        }
    }

    fn dims(&self) -> Vec<usize> {
        match *self {
            GroupKind::Se2 {
                height,
                width,
                n_theta,
            } => vec![height, width, n_theta],
            GroupKind::S2 { n_beta, n_phi } => vec![n_beta, n_phi],
            GroupKind::So3 {
                n_alpha,
                n_beta,
                n_gamma,
            } => vec![n_alpha, n_beta, n_gamma],
        }
    }
}

/// Polar sample `i` of an equiangular grid with `n` rings.
pub fn polar_sample(i: usize, n: usize) -> f64 {
    PI * (2 * i + 1) as f64 / (2 * n) as f64
}

/// A finite sample of a group (or of S²) with normalized Haar weights.
/// Elements are enumerated row-major over the descriptor's dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscretizedGroup {
    kind: GroupKind,
    elements: Vec<GroupElement>,
    haar_weights: Vec<f64>,
}

pub fn build_group(kind: GroupKind) -> Result<DiscretizedGroup> {
    let dims = kind.dims();
    if dims.contains(&0) {
        return Err(Error::InvalidDims(format!(
            "{} grid dimensions must be positive, got {:?}",
            kind.name(),
            dims
        )));
    }
    let (elements, raw): (Vec<GroupElement>, Vec<f64>) = match kind {
        GroupKind::Se2 {
            height,
            width,
            n_theta,
        } => {
            let mut out = Vec::with_capacity(height * width * n_theta);
            for y in 0..height {
                for x in 0..width {
                    for j in 0..n_theta {
                        let theta = TAU * j as f64 / n_theta as f64;
                        out.push((GroupElement::se2(x as f64, y as f64, theta), 1.0));
                    }
                }
            }
            out.into_iter().unzip()
        }
        GroupKind::S2 { n_beta, n_phi } => {
            let mut out = Vec::with_capacity(n_beta * n_phi);
            for i in 0..n_beta {
                let beta = polar_sample(i, n_beta);
                for j in 0..n_phi {
                    let phi = TAU * j as f64 / n_phi as f64;
                    out.push((GroupElement::s2_point(beta, phi), beta.sin()));
                }
            }
            out.into_iter().unzip()
        }
        GroupKind::So3 {
            n_alpha,
            n_beta,
            n_gamma,
        } => {
            let mut out = Vec::with_capacity(n_alpha * n_beta * n_gamma);
            for a in 0..n_alpha {
                let alpha = TAU * a as f64 / n_alpha as f64;
                for b in 0..n_beta {
                    let beta = polar_sample(b, n_beta);
                    for g in 0..n_gamma {
                        let gamma = TAU * g as f64 / n_gamma as f64;
                        out.push((GroupElement::so3(alpha, beta, gamma), beta.sin()));
                    }
                }
            }
            out.into_iter().unzip()
        }
    };
    let total: f64 = raw.iter().sum();
    let haar_weights = raw.iter().map(|w| w / total).collect();
    Ok(DiscretizedGroup {
        kind,
        elements,
        haar_weights,
    })
}

impl DiscretizedGroup {
    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    pub fn element(&self, i: usize) -> &GroupElement {
        &self.elements[i]
    }

    pub fn haar_weights(&self) -> &[f64] {
        &self.haar_weights
    }

    /// Number of fiber samples per base point (angles for SE(2), 1 otherwise).
    pub fn fiber_len(&self) -> usize {
        match self.kind {
            GroupKind::Se2 { n_theta, .. } => n_theta,
            _ => 1,
        }
    }

    /// `(height, width, n_theta)` for SE(2) grids.
    pub fn se2_dims(&self) -> Option<(usize, usize, usize)> {
        match self.kind {
            GroupKind::Se2 {
                height,
                width,
                n_theta,
            } => Some((height, width, n_theta)),
            _ => None,
        }
    }

    /// `(n_beta, n_phi)` for S² grids.
    pub fn s2_dims(&self) -> Option<(usize, usize)> {
        match self.kind {
            GroupKind::S2 { n_beta, n_phi } => Some((n_beta, n_phi)),
            _ => None,
        }
    }

    /// Base-space grid spacing: one pixel for SE(2), one polar step for the
    /// angular grids.
    pub fn grid_step(&self) -> f64 {
        match self.kind {
            GroupKind::Se2 { .. } => 1.0,
            GroupKind::S2 { n_beta, .. } | GroupKind::So3 { n_beta, .. } => PI / n_beta as f64,
        }
    }
}

/// Offsets `S_k` around the identity used for patch extraction, with their
/// normalized Haar weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchShape {
    offsets: Vec<GroupElement>,
    weights: Vec<f64>,
    kappa: f64,
    sigma_prev: f64,
    fiber_offsets: bool,
    degenerate: bool,
    capped: bool,
}

/// Options for [`build_patch_shape_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchOptions {
    pub kappa: f64,
    pub sigma_prev: f64,
    /// Lattice stride between spatial offsets (SE(2) only).
    pub stride: usize,
    /// Also include ±1 fiber-angle steps (SE(2) only).
    pub fiber_offsets: bool,
    /// Clamp the spatial radius so the patch never wraps around the torus.
    pub cap_to_grid: bool,
}

impl PatchOptions {
    pub fn new(kappa: f64, sigma_prev: f64) -> Self {
        PatchOptions {
            kappa,
            sigma_prev,
            stride: 1,
            fiber_offsets: false,
            cap_to_grid: false,
        }
    }
}

/// All spatial offsets within radius `kappa * sigma_prev`, paired with the
/// identity fiber element.
pub fn build_patch_shape(
    group: &DiscretizedGroup,
    kappa: f64,
    sigma_prev: f64,
) -> Result<PatchShape> {
    build_patch_shape_with(group, PatchOptions::new(kappa, sigma_prev))
}

pub fn build_patch_shape_with(group: &DiscretizedGroup, opts: PatchOptions) -> Result<PatchShape> {
    if !(opts.kappa > 0.0 && opts.kappa.is_finite()) {
        return Err(Error::param("kappa", format!("must be > 0, got {}", opts.kappa)));
    }
    if !(opts.sigma_prev > 0.0 && opts.sigma_prev.is_finite()) {
        return Err(Error::param(
            "sigma_prev",
            format!("must be > 0, got {}", opts.sigma_prev),
        ));
    }
    if opts.stride == 0 {
        return Err(Error::param("stride", "must be ≥ 1"));
    }
    let radius = opts.kappa * opts.sigma_prev;
    let mut capped = false;
    let offsets = match group.kind() {
        GroupKind::Se2 {
            height,
            width,
            n_theta,
        } => {
            let mut r = radius;
            if opts.cap_to_grid {
                let max_r = ((height.min(width) - 1) / 2) as f64;
                if r > max_r {
                    r = max_r;
                    capped = true;
                }
            }
            let s = opts.stride as i64;
            let steps = (r / s as f64).floor() as i64;
            let mut spatial = Vec::new();
            for j in -steps..=steps {
                for i in -steps..=steps {
                    let (dx, dy) = (i * s, j * s);
                    if ((dx * dx + dy * dy) as f64) <= r * r {
                        spatial.push((dx, dy));
                    }
                }
            }
            // identity first, then by distance, then row-major
            spatial.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
            let fiber_steps: Vec<i64> = if opts.fiber_offsets && n_theta >= 3 {
                vec![0, 1, -1]
            } else {
                vec![0]
            };
            let mut out = Vec::with_capacity(spatial.len() * fiber_steps.len());
            for &f in &fiber_steps {
                for &(dx, dy) in &spatial {
                    let theta = TAU * f as f64 / n_theta as f64;
                    out.push(GroupElement::se2(dx as f64, dy as f64, theta));
                }
            }
            out
        }
        GroupKind::S2 { n_beta, n_phi } => {
            if opts.fiber_offsets {
                return Err(Error::Unsupported(
                    "fiber offsets are only defined for SE(2) patches".into(),
                ));
            }
            let mut out = vec![GroupElement::s2_point(0.0, 0.0)];
            for i in 0..n_beta {
                let beta = polar_sample(i, n_beta);
                if beta > radius {
                    break;
                }
                for j in 0..n_phi {
                    out.push(GroupElement::s2_point(beta, TAU * j as f64 / n_phi as f64));
                }
            }
            out
        }
        GroupKind::So3 { .. } => {
            return Err(Error::Unsupported(
                "patch shapes on the SO(3) Euler grid".into(),
            ))
        }
    };
    let degenerate = offsets.len() == 1;
    if degenerate {
        log::warn!(
            "patch radius {radius} is below one grid step; using the identity-only patch"
        );
    }
    let n = offsets.len();
    Ok(PatchShape {
        weights: vec![1.0 / n as f64; n],
        offsets,
        kappa: opts.kappa,
        sigma_prev: opts.sigma_prev,
        fiber_offsets: opts.fiber_offsets,
        degenerate,
        capped,
    })
}

impl PatchShape {
    /// A patch with explicit offsets and uniform weights. The identity is
    /// prepended when missing.
    pub fn from_offsets(mut offsets: Vec<GroupElement>) -> Result<Self> {
        let first = offsets
            .first()
            .ok_or_else(|| Error::param("offsets", "must not be empty"))?;
        let identity = match first {
            GroupElement::S2Point { .. } => GroupElement::s2_point(0.0, 0.0),
            other => other.identity_like()?,
        };
        if !offsets.iter().any(|o| o.approx_eq(&identity, 0.0)) {
            offsets.insert(0, identity);
        }
        let n = offsets.len();
        let sup = offsets
            .iter()
            .map(GroupElement::base_magnitude)
            .fold(0.0, f64::max);
        Ok(PatchShape {
            weights: vec![1.0 / n as f64; n],
            offsets,
            kappa: sup.max(f64::MIN_POSITIVE),
            sigma_prev: 1.0,
            fiber_offsets: false,
            degenerate: n == 1,
            capped: false,
        })
    }

    pub fn identity_only(group: &DiscretizedGroup) -> Result<Self> {
        let id = match group.kind() {
            GroupKind::Se2 { .. } => GroupElement::se2(0.0, 0.0, 0.0),
            GroupKind::S2 { .. } => GroupElement::s2_point(0.0, 0.0),
            GroupKind::So3 { .. } => GroupElement::So3(So3::identity()),
        };
        Self::from_offsets(vec![id])
    }

    pub fn offsets(&self) -> &[GroupElement] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn sigma_prev(&self) -> f64 {
        self.sigma_prev
    }

    pub fn has_fiber_offsets(&self) -> bool {
        self.fiber_offsets
    }

    /// Radius fell below one grid step and only the identity remains.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Radius was clamped to avoid wrapping around the grid.
    pub fn is_capped(&self) -> bool {
        self.capped
    }

    pub fn max_offset_magnitude(&self) -> f64 {
        self.offsets
            .iter()
            .map(GroupElement::base_magnitude)
            .fold(0.0, f64::max)
    }

    /// `sup_c |c| ≤ κ σ_prev`, checked exactly.
    pub fn validate(&self, kappa: f64, sigma_prev: f64) -> bool {
        self.max_offset_magnitude() <= kappa * sigma_prev
    }
}
