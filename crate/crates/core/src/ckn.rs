//! Patch extraction, kernel mapping, pooling and the stacked network.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index::sample;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::group::{
    angle_diff, build_group, build_patch_shape_with, geodesic, s2_angles, DiscretizedGroup,
    GroupElement, GroupKind, PatchOptions, PatchShape, So3,
};
use crate::ini;
use crate::kernel::KernelSpec;
use crate::nystrom::{fit_nystrom, NystromEmbedding};
use crate::rng::{derive_seed, rng_from};
use crate::signal::{check_compatible, point_stencil, FeatureMap, FiberInterp, Neumaier};

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

/// `P x(u) = (x(uv))_{v ∈ S}`, stored unweighted as a map with
/// `|S| · c` channels (offset-major).
#[derive(Clone, Debug)]
pub struct PatchField {
    raw: FeatureMap,
    weights: Vec<f64>,
    in_channels: usize,
}

impl PatchField {
    pub fn n_offsets(&self) -> usize {
        self.weights.len()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn dim(&self) -> usize {
        self.raw.channels()
    }

    /// Unweighted samples `x(uv)` for element `u`.
    pub fn patch(&self, element: usize) -> &[f64] {
        self.raw.value(element)
    }

    pub fn raw(&self) -> &FeatureMap {
        &self.raw
    }

    /// Samples scaled by `√w_v`, so that `‖P x‖ = ‖x‖` for lattice-exact patches.
    pub fn weighted(&self) -> FeatureMap {
        let c = self.in_channels;
        let scales: Vec<f64> = self.weights.iter().map(|w| w.sqrt()).collect();
        let mut values = self.raw.values().to_vec();
        for chunk in values.chunks_mut(self.dim()) {
            for (s, block) in scales.iter().zip(chunk.chunks_mut(c)) {
                block.iter_mut().for_each(|v| *v *= s);
            }
        }
        FeatureMap::from_parts(self.raw.group().clone(), self.dim(), values)
    }

    pub fn norm(&self) -> f64 {
        self.weighted().norm()
    }
}

/// Precomputed interpolation stencils of `uv` relative to `u`.
#[derive(Clone, Debug)]
pub(crate) struct PatchPlan {
    kind: GroupKind,
    /// `[key][offset]` → `(a, b, c, w)`; key is the fiber index on SE(2)
    /// and the ring index on S².
    stencils: Vec<Vec<Vec<(usize, usize, usize, f64)>>>,
    weights: Vec<f64>,
}

fn check_patch_variant(group: &DiscretizedGroup, patch: &PatchShape) -> Result<()> {
    let expected = match group.kind() {
        GroupKind::Se2 { .. } => "SE2",
        GroupKind::S2 { .. } => "S2Point",
        GroupKind::So3 { .. } => {
            return Err(Error::Unsupported("patches on the SO(3) Euler grid".into()))
        }
    };
    for o in patch.offsets() {
        if o.variant_name() != expected {
            return Err(Error::VariantMismatch {
                expected,
                got: o.variant_name(),
            });
        }
    }
    Ok(())
}

/// `uv` for an SE(2) element or an S² point transported by the section
/// `R_u = R_z(φ) R_y(β)`.
fn patch_point(u: &GroupElement, v: &GroupElement) -> Result<GroupElement> {
    match (u, v) {
        (GroupElement::S2Point { theta, phi }, GroupElement::S2Point { .. }) => {
            let r = So3::section(*theta, *phi);
            let (t, p) = s2_angles(r.apply(v.unit_vector().expect("S² point")));
            Ok(GroupElement::s2_point(t, p))
        }
        _ => u.compose(v),
    }
}

impl PatchPlan {
    pub(crate) fn new(group: &DiscretizedGroup, patch: &PatchShape) -> Result<Self> {
        check_patch_variant(group, patch)?;
        let kind = group.kind();
        let (keys, anchor): (usize, Box<dyn Fn(usize) -> GroupElement>) = match kind {
            GroupKind::Se2 { n_theta, .. } => (
                n_theta,
                Box::new(move |j| GroupElement::se2(0.0, 0.0, TAU * j as f64 / n_theta as f64)),
            ),
            GroupKind::S2 { n_beta, n_phi } => (
                n_beta,
                Box::new(move |i| *group.element(i * n_phi)),
            ),
            GroupKind::So3 { .. } => unreachable!("rejected above"),
        };
        let mut stencils = Vec::with_capacity(keys);
        for key in 0..keys {
            let u = anchor(key);
            let mut per_offset = Vec::with_capacity(patch.len());
            for v in patch.offsets() {
                let p = patch_point(&u, v)?;
                let s = point_stencil(group, &p, FiberInterp::Nearest)?;
                let entries = s
                    .entries()
                    .map(|(idx, w)| match kind {
                        GroupKind::Se2 { width, n_theta, .. } => {
                            let jj = idx % n_theta;
                            let xx = (idx / n_theta) % width;
                            let yy = idx / (n_theta * width);
                            (yy, xx, jj, w)
                        }
                        GroupKind::S2 { n_phi, .. } => (idx / n_phi, idx % n_phi, 0, w),
                        GroupKind::So3 { .. } => unreachable!(),
                    })
                    .collect();
                per_offset.push(entries);
            }
            stencils.push(per_offset);
        }
        Ok(PatchPlan {
            kind,
            stencils,
            weights: patch.weights().to_vec(),
        })
    }

    pub(crate) fn n_offsets(&self) -> usize {
        self.weights.len()
    }

    pub(crate) fn extract(&self, x: &FeatureMap) -> Result<PatchField> {
        if x.group().kind() != self.kind {
            return Err(Error::InvalidDims(format!(
                "patch plan built for {:?}, map lives on {:?}",
                self.kind,
                x.group().kind()
            )));
        }
        let c = x.channels();
        let s = self.n_offsets();
        let dim = s * c;
        let mut values = vec![0.0; x.group().len() * dim];
        let kind = self.kind;
        values.par_chunks_mut(dim).enumerate().for_each(|(e, out)| {
            let (key, locate): (usize, Box<dyn Fn(usize, usize, usize) -> usize>) = match kind {
                GroupKind::Se2 {
                    height,
                    width,
                    n_theta,
                } => {
                    let j = e % n_theta;
                    let xx = (e / n_theta) % width;
                    let yy = e / (n_theta * width);
                    (
                        j,
                        Box::new(move |a, b, jj| {
                            (((yy + a) % height) * width + (xx + b) % width) * n_theta + jj
                        }),
                    )
                }
                GroupKind::S2 { n_phi, .. } => {
                    let (i, j) = (e / n_phi, e % n_phi);
                    (i, Box::new(move |r, col, _| r * n_phi + (col + j) % n_phi))
                }
                GroupKind::So3 { .. } => unreachable!(),
            };
            for (o, entries) in self.stencils[key].iter().enumerate() {
                let block = &mut out[o * c..(o + 1) * c];
                for &(a, b, jj, w) in entries {
                    let src = x.value(locate(a, b, jj));
                    for (d, v) in block.iter_mut().zip(src) {
                        *d += w * v;
                    }
                }
            }
        });
        Ok(PatchField {
            raw: FeatureMap::from_parts(x.group().clone(), dim, values),
            weights: self.weights.clone(),
            in_channels: c,
        })
    }
}

/// Samples `x(uv)` for every element `u` and offset `v`.
pub fn extract_patches(x: &FeatureMap, patch: &PatchShape) -> Result<PatchField> {
    PatchPlan::new(x.group(), patch)?.extract(x)
}

/// Reference implementation: composes `u` with every offset and
/// interpolates each sample independently.
pub fn extract_patches_generic(x: &FeatureMap, patch: &PatchShape) -> Result<PatchField> {
    let group = x.group();
    check_patch_variant(group, patch)?;
    let c = x.channels();
    let dim = patch.len() * c;
    let mut values = vec![0.0; group.len() * dim];
    for (e, u) in group.elements().iter().enumerate() {
        for (o, v) in patch.offsets().iter().enumerate() {
            let p = patch_point(u, v)?;
            point_stencil(group, &p, FiberInterp::Nearest)?.accumulate(
                x,
                1.0,
                &mut values[e * dim + o * c..e * dim + (o + 1) * c],
            );
        }
    }
    Ok(PatchField {
        raw: FeatureMap::from_parts(group.clone(), dim, values),
        weights: patch.weights().to_vec(),
        in_channels: c,
    })
}

// ---------------------------------------------------------------------------
// Kernel mapping
// ---------------------------------------------------------------------------

/// Applies `ψ` pointwise to a map whose channels are patch vectors.
pub fn pointwise_embed(x: &FeatureMap, emb: &NystromEmbedding) -> Result<FeatureMap> {
    if x.channels() != emb.patch_dim() {
        return Err(Error::DimensionMismatch {
            expected: emb.patch_dim(),
            got: x.channels(),
        });
    }
    let p = emb.p();
    let mut values = vec![0.0; x.group().len() * p];
    values
        .par_chunks_mut(p)
        .enumerate()
        .for_each_init(|| Vec::with_capacity(p), |kv, (e, out)| {
            emb.embed_into(x.value(e), out, kv)
        });
    Ok(FeatureMap::from_parts(x.group().clone(), p, values))
}

/// `M P x`: the embedding applied to the weighted patch vectors.
pub fn kernel_map(patches: &PatchField, emb: &NystromEmbedding) -> Result<FeatureMap> {
    pointwise_embed(&patches.weighted(), emb)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

const TRUNCATION: f64 = 3.0;

fn within_support(r2: f64, sigma: f64) -> bool {
    r2 <= TRUNCATION * TRUNCATION * sigma * sigma * (1.0 + 1e-12)
}

fn gauss(r2: f64, sigma: f64) -> f64 {
    (-r2 / (2.0 * sigma * sigma)).exp()
}

#[derive(Clone, Debug)]
enum FilterImpl {
    Se2 {
        /// Folded periodic table `h[dy][dx]`, normalized to sum 1.
        table: Vec<f64>,
        taps: Vec<(usize, usize, f64)>,
        /// Normalizer of the unfolded truncated Gaussian, if Gaussian.
        gaussian_z: Option<f64>,
        fiber_average: bool,
    },
    S2 {
        rows: Vec<Vec<(usize, f64)>>,
        scaling: Vec<f64>,
    },
}

/// A discrete pooling operator `A` with `‖A‖ ≤ 1` that preserves constants.
#[derive(Clone, Debug)]
pub struct PoolingFilter {
    group: Arc<DiscretizedGroup>,
    sigma: f64,
    inner: FilterImpl,
}

impl PoolingFilter {
    /// Gaussian of scale `sigma` truncated at `3σ`. On SE(2) it acts on the
    /// base space only (optionally averaging over the fiber); on S² it is a
    /// geodesic Gaussian made weighted doubly stochastic by symmetric scaling.
    pub fn gaussian(group: &Arc<DiscretizedGroup>, sigma: f64, fiber_average: bool) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::param("sigma", format!("must be finite and > 0, got {sigma}")));
        }
        let inner = match group.kind() {
            GroupKind::Se2 { height, width, .. } => {
                let reach = (TRUNCATION * sigma).floor() as i64;
                let mut table = vec![0.0; height * width];
                let mut z = 0.0;
                for dy in -reach..=reach {
                    for dx in -reach..=reach {
                        let r2 = (dx * dx + dy * dy) as f64;
                        if !within_support(r2, sigma) {
                            continue;
                        }
                        let g = gauss(r2, sigma);
                        z += g;
                        let a = dy.rem_euclid(height as i64) as usize;
                        let b = dx.rem_euclid(width as i64) as usize;
                        table[a * width + b] += g;
                    }
                }
                table.iter_mut().for_each(|h| *h /= z);
                Self::se2_impl(table, width, Some(z), fiber_average)
            }
            GroupKind::S2 { .. } => {
                if fiber_average {
                    return Err(Error::Unsupported("fiber pooling on S²".into()));
                }
                s2_filter(group, sigma)?
            }
            GroupKind::So3 { .. } => {
                return Err(Error::Unsupported("pooling on the SO(3) Euler grid".into()))
            }
        };
        Ok(PoolingFilter {
            group: group.clone(),
            sigma,
            inner,
        })
    }

    /// A custom spatial table (row-major `height × width`, non-negative,
    /// summing to 1) for SE(2) grids with a single fiber sample.
    pub fn from_table(group: &Arc<DiscretizedGroup>, table: Vec<f64>) -> Result<Self> {
        let (h, w) = match group.se2_dims() {
            Some((h, w, 1)) => (h, w),
            _ => {
                return Err(Error::Unsupported(
                    "custom pooling tables need an SE(2) grid with n_theta = 1".into(),
                ))
            }
        };
        if table.len() != h * w {
            return Err(Error::DimensionMismatch {
                expected: h * w,
                got: table.len(),
            });
        }
        if table.iter().any(|v| !(*v >= 0.0)) || (table.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::param("table", "must be non-negative and sum to 1"));
        }
        Ok(PoolingFilter {
            group: group.clone(),
            sigma: f64::NAN,
            inner: Self::se2_impl(table, w, None, false),
        })
    }

    fn se2_impl(table: Vec<f64>, width: usize, gaussian_z: Option<f64>, fiber_average: bool) -> FilterImpl {
        let taps = table
            .iter()
            .enumerate()
            .filter(|(_, &h)| h != 0.0)
            .map(|(i, &h)| (i / width, i % width, h))
            .collect();
        FilterImpl::Se2 {
            table,
            taps,
            gaussian_z,
            fiber_average,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    fn check(&self, x: &FeatureMap) -> Result<()> {
        if x.group().kind() != self.group.kind() {
            return Err(Error::InvalidDims(format!(
                "filter built for {:?}, map lives on {:?}",
                self.group.kind(),
                x.group().kind()
            )));
        }
        Ok(())
    }

    /// `A x(u) = Σ_v h(v) x(uv)`.
    pub fn apply(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check(x)?;
        let c = x.channels();
        let mut values = vec![0.0; x.group().len() * c];
        match &self.inner {
            FilterImpl::Se2 {
                taps,
                fiber_average,
                ..
            } => {
                let (h, w, n) = self.group.se2_dims().expect("SE(2)");
                let inv_n = 1.0 / n as f64;
                values.par_chunks_mut(c).enumerate().for_each(|(e, out)| {
                    let j = e % n;
                    let xx = (e / n) % w;
                    let yy = e / (n * w);
                    for &(a, b, hv) in taps {
                        let base = (((yy + a) % h) * w + (xx + b) % w) * n;
                        if *fiber_average {
                            for jj in 0..n {
                                for (o, v) in out.iter_mut().zip(x.value(base + jj)) {
                                    *o += hv * inv_n * v;
                                }
                            }
                        } else {
                            for (o, v) in out.iter_mut().zip(x.value(base + j)) {
                                *o += hv * v;
                            }
                        }
                    }
                });
            }
            FilterImpl::S2 { rows, .. } => {
                values.par_chunks_mut(c).enumerate().for_each(|(i, out)| {
                    for &(j, a) in &rows[i] {
                        for (o, v) in out.iter_mut().zip(x.value(j)) {
                            *o += a * v;
                        }
                    }
                });
            }
        }
        Ok(FeatureMap::from_parts(x.group().clone(), c, values).with_layer(x.layer()))
    }

    /// The same operator written as `Σ_v h(u⁻¹v) x(v)` over all pairs,
    /// evaluating `u⁻¹v` with the group law.
    pub fn apply_cross_correlation(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check(x)?;
        let c = x.channels();
        let group = &self.group;
        let elements = group.elements();
        let mut values = vec![0.0; group.len() * c];
        match &self.inner {
            FilterImpl::Se2 {
                table,
                gaussian_z,
                fiber_average,
                ..
            } => {
                let (h, w, n) = group.se2_dims().expect("SE(2)");
                let fiber_factor = if *fiber_average { 1.0 / n as f64 } else { 1.0 };
                let images = match gaussian_z {
                    Some(_) => (TRUNCATION * self.sigma / h.min(w) as f64).ceil() as i64 + 1,
                    None => 0,
                };
                let result: Result<()> = values.par_chunks_mut(c).enumerate().try_for_each(|(ui, out)| {
                    let u_inv = elements[ui].inverse()?;
                    for (vi, v) in elements.iter().enumerate() {
                        let GroupElement::Se2 { tx, ty, theta } = *v else {
                            unreachable!()
                        };
                        let mut coef = 0.0;
                        for my in -images..=images {
                            for mx in -images..=images {
                                let vm = GroupElement::se2(
                                    tx + (mx * w as i64) as f64,
                                    ty + (my * h as i64) as f64,
                                    theta,
                                );
                                let GroupElement::Se2 {
                                    tx: gx,
                                    ty: gy,
                                    theta: gt,
                                } = u_inv.compose(&vm)?
                                else {
                                    unreachable!()
                                };
                                if !*fiber_average && angle_diff(gt, 0.0).abs() > 1e-9 {
                                    continue;
                                }
                                match gaussian_z {
                                    Some(z) => {
                                        let r2 = gx * gx + gy * gy;
                                        if within_support(r2, self.sigma) {
                                            coef += gauss(r2, self.sigma) / z;
                                        }
                                    }
                                    None => {
                                        let a = (gy.round() as i64).rem_euclid(h as i64) as usize;
                                        let b = (gx.round() as i64).rem_euclid(w as i64) as usize;
                                        coef += table[a * w + b];
                                    }
                                }
                            }
                        }
                        if coef != 0.0 {
                            for (o, xv) in out.iter_mut().zip(x.value(vi)) {
                                *o += fiber_factor * coef * xv;
                            }
                        }
                    }
                    Ok(())
                });
                result?;
            }
            FilterImpl::S2 { scaling, .. } => {
                let weights = group.haar_weights();
                let units: Vec<[f64; 3]> = elements
                    .iter()
                    .map(|e| e.unit_vector().expect("S² point"))
                    .collect();
                values.par_chunks_mut(c).enumerate().for_each(|(ui, out)| {
                    let GroupElement::S2Point { theta, phi } = elements[ui] else {
                        unreachable!()
                    };
                    let inv = So3::section(theta, phi).inverse();
                    for (vi, unit) in units.iter().enumerate() {
                        let (angle, _) = s2_angles(inv.apply(*unit));
                        let r2 = angle * angle;
                        if !within_support(r2, self.sigma) {
                            continue;
                        }
                        let a = scaling[ui] * gauss(r2, self.sigma) * scaling[vi] * weights[vi];
                        for (o, xv) in out.iter_mut().zip(x.value(vi)) {
                            *o += a * xv;
                        }
                    }
                });
            }
        }
        Ok(FeatureMap::from_parts(group.clone(), c, values).with_layer(x.layer()))
    }
}

fn s2_filter(group: &Arc<DiscretizedGroup>, sigma: f64) -> Result<FilterImpl> {
    let units: Vec<[f64; 3]> = group
        .elements()
        .iter()
        .map(|e| e.unit_vector().expect("S² point"))
        .collect();
    let weights = group.haar_weights();
    let n = units.len();
    let kernel: Vec<Vec<(usize, f64)>> = units
        .par_iter()
        .map(|a| {
            units
                .iter()
                .enumerate()
                .filter_map(|(j, b)| {
                    let d = geodesic(*a, *b);
                    within_support(d * d, sigma).then(|| (j, gauss(d * d, sigma)))
                })
                .collect()
        })
        .collect();
    // Symmetric Sinkhorn scaling: rows of d_i K_ij d_j w_j sum to one.
    let row_sum = |d: &[f64], i: usize| -> f64 {
        kernel[i].iter().map(|&(j, k)| k * d[j] * weights[j]).sum::<f64>() * d[i]
    };
    let mut d: Vec<f64> = (0..n)
        .map(|i| 1.0 / kernel[i].iter().map(|&(j, k)| k * weights[j]).sum::<f64>().sqrt())
        .collect();
    for _ in 0..10_000 {
        let sums: Vec<f64> = (0..n).map(|i| row_sum(&d, i)).collect();
        let err = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        if err < 1e-14 {
            break;
        }
        for (di, s) in d.iter_mut().zip(&sums) {
            *di /= s.sqrt();
        }
    }
    let final_err = (0..n).map(|i| (row_sum(&d, i) - 1.0).abs()).fold(0.0, f64::max);
    if final_err > 1e-10 {
        return Err(Error::param(
            "sigma",
            format!("geodesic filter normalization did not converge (row error {final_err:e})"),
        ));
    }
    let rows = kernel
        .iter()
        .enumerate()
        .map(|(i, row)| match row.as_slice() {
            // a lone self-weight must be exactly one
            [(j, _)] => vec![(*j, 1.0)],
            _ => row.iter().map(|&(j, k)| (j, d[i] * k * d[j] * weights[j])).collect(),
        })
        .collect();
    Ok(FilterImpl::S2 { rows, scaling: d })
}

/// Gaussian pooling at scale `sigma` (base space only).
pub fn pool(x: &FeatureMap, sigma: f64) -> Result<FeatureMap> {
    PoolingFilter::gaussian(x.group(), sigma, false)?.apply(x)
}

/// [`pool`] computed through the group cross-correlation form.
pub fn pool_as_cross_correlation(x: &FeatureMap, sigma: f64) -> Result<FeatureMap> {
    PoolingFilter::gaussian(x.group(), sigma, false)?.apply_cross_correlation(x)
}

/// Haar-weighted average over the group, per channel. Terms are summed in
/// sorted order so any weight-preserving permutation gives identical bits.
pub fn global_pool(x: &FeatureMap) -> Vec<f64> {
    let c = x.channels();
    let w = x.group().haar_weights();
    (0..c)
        .map(|ch| {
            let mut terms: Vec<f64> = (0..w.len()).map(|i| w[i] * x.value(i)[ch]).collect();
            terms.sort_unstable_by(f64::total_cmp);
            let mut acc = Neumaier::default();
            terms.into_iter().for_each(|t| acc.add(t));
            acc.total()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// Hyperparameters of one layer before fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kappa: f64,
    pub sigma: f64,
    pub channels: usize,
    pub kernel: KernelSpec,
    pub stride: usize,
    pub fiber_offsets: bool,
    pub cap_to_grid: bool,
    pub fiber_pooling: bool,
}

impl LayerSpec {
    pub fn new(kappa: f64, sigma: f64, channels: usize, kernel: KernelSpec) -> Self {
        LayerSpec {
            kappa,
            sigma,
            channels,
            kernel,
            stride: 1,
            fiber_offsets: false,
            cap_to_grid: false,
            fiber_pooling: false,
        }
    }
}

/// Hyperparameters of a whole network before fitting.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub sigma0: f64,
    pub layers: Vec<LayerSpec>,
    pub eps: f64,
    pub seed: u64,
    /// Maximum number of patch vectors sampled per layer for fitting.
    pub fit_patches: usize,
}

/// A fitted layer: patch shape, embedding, pooling scale.
#[derive(Clone, Debug)]
pub struct LayerConfig {
    pub patch: PatchShape,
    pub options: Option<PatchOptions>,
    pub embedding: NystromEmbedding,
    pub sigma: f64,
    pub fiber_pooling: bool,
}

#[derive(Clone, Debug)]
struct Layer {
    config: LayerConfig,
    plan: PatchPlan,
    filter: PoolingFilter,
}

/// `Φ = A_N M_N P_N ⋯ A_1 M_1 P_1 A_0`, where `A_0` is optional input
/// smoothing at scale `σ₀`.
#[derive(Clone, Debug)]
pub struct Network {
    group: Arc<DiscretizedGroup>,
    sigma0: f64,
    input_filter: Option<PoolingFilter>,
    layers: Vec<Layer>,
}

/// Intermediate maps of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `A_0 x`.
    pub smoothed: FeatureMap,
    /// Per layer: weighted patches, embedded map, pooled map.
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub patches: FeatureMap,
    pub embedded: FeatureMap,
    pub pooled: FeatureMap,
}

impl ForwardTrace {
    pub fn output(&self) -> &FeatureMap {
        &self.layers.last().expect("N ≥ 1").pooled
    }
}

impl Network {
    pub fn new(group: Arc<DiscretizedGroup>, sigma0: f64, configs: Vec<LayerConfig>) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::param("layers", "a network needs at least one layer"));
        }
        if !(sigma0 >= 0.0 && sigma0.is_finite()) {
            return Err(Error::param("sigma0", "must be finite and ≥ 0"));
        }
        let mut prev_sigma = if sigma0 > 0.0 { sigma0 } else { 1.0 };
        let mut prev_channels: Option<usize> = None;
        let mut layers = Vec::with_capacity(configs.len());
        for (k, config) in configs.into_iter().enumerate() {
            if !(config.sigma > 0.0 && config.sigma.is_finite()) {
                return Err(Error::param("sigma", format!("layer {}: must be > 0", k + 1)));
            }
            if k > 0 && config.sigma <= prev_sigma {
                return Err(Error::param(
                    "sigma",
                    format!(
                        "layer {}: pooling scales must strictly increase ({} after {})",
                        k + 1,
                        config.sigma,
                        prev_sigma
                    ),
                ));
            }
            if !config.patch.validate(config.patch.kappa(), prev_sigma) {
                return Err(Error::param(
                    "kappa",
                    format!(
                        "layer {}: patch radius {} exceeds κ·σ_prev = {}",
                        k + 1,
                        config.patch.max_offset_magnitude(),
                        config.patch.kappa() * prev_sigma
                    ),
                ));
            }
            let s = config.patch.len();
            let dim = config.embedding.patch_dim();
            match prev_channels {
                Some(c) if dim != s * c => {
                    return Err(Error::DimensionMismatch {
                        expected: s * c,
                        got: dim,
                    })
                }
                None if dim % s != 0 => {
                    return Err(Error::DimensionMismatch {
                        expected: s * (dim / s).max(1),
                        got: dim,
                    })
                }
                _ => {}
            }
            let plan = PatchPlan::new(&group, &config.patch)?;
            let filter = PoolingFilter::gaussian(&group, config.sigma, config.fiber_pooling)?;
            prev_sigma = config.sigma;
            prev_channels = Some(config.embedding.p());
            layers.push(Layer { config, plan, filter });
        }
        let input_filter = if sigma0 > 0.0 {
            Some(PoolingFilter::gaussian(&group, sigma0, false)?)
        } else {
            None
        };
        Ok(Network {
            group,
            sigma0,
            input_filter,
            layers,
        })
    }

    pub fn group(&self) -> &Arc<DiscretizedGroup> {
        &self.group
    }

    pub fn sigma0(&self) -> f64 {
        self.sigma0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, k: usize) -> &LayerConfig {
        &self.layers[k].config
    }

    pub fn input_channels(&self) -> usize {
        let first = &self.layers[0].config;
        first.embedding.patch_dim() / first.patch.len()
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().expect("N ≥ 1").config.embedding.p()
    }

    fn check_input(&self, x: &FeatureMap) -> Result<()> {
        if x.group().kind() != self.group.kind() {
            return Err(Error::InvalidDims(format!(
                "network runs on {:?}, input lives on {:?}",
                self.group.kind(),
                x.group().kind()
            )));
        }
        Ok(())
    }

    /// `A_0 x`.
    pub fn smooth_input(&self, x: &FeatureMap) -> Result<FeatureMap> {
        self.check_input(x)?;
        match &self.input_filter {
            Some(f) => f.apply(x),
            None => Ok(x.clone()),
        }
    }

    /// `P_k x` as weighted patch vectors (`k` is zero-based).
    pub fn patches(&self, k: usize, x: &FeatureMap) -> Result<FeatureMap> {
        Ok(self.layers[k].plan.extract(x)?.weighted())
    }

    /// `M_k` applied to weighted patch vectors.
    pub fn embed(&self, k: usize, patches: &FeatureMap) -> Result<FeatureMap> {
        pointwise_embed(patches, &self.layers[k].config.embedding)
    }

    /// `A_k x`.
    pub fn pool_layer(&self, k: usize, x: &FeatureMap) -> Result<FeatureMap> {
        self.layers[k].filter.apply(x)
    }

    pub fn forward(&self, x0: &FeatureMap) -> Result<FeatureMap> {
        let mut x = self.smooth_input(x0)?;
        for k in 0..self.layers.len() {
            let p = self.patches(k, &x)?;
            let m = self.embed(k, &p)?;
            x = self.pool_layer(k, &m)?.with_layer(k + 1);
        }
        Ok(x)
    }

    pub fn forward_trace(&self, x0: &FeatureMap) -> Result<ForwardTrace> {
        let smoothed = self.smooth_input(x0)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut x = smoothed.clone();
        for k in 0..self.layers.len() {
            let patches = self.patches(k, &x)?;
            let embedded = self.embed(k, &patches)?;
            let pooled = self.pool_layer(k, &embedded)?.with_layer(k + 1);
            x = pooled.clone();
            layers.push(LayerTrace {
                patches,
                embedded,
                pooled,
            });
        }
        Ok(ForwardTrace { smoothed, layers })
    }
}

/// `Φ(x)` for a fitted network.
pub fn forward(net: &Network, x0: &FeatureMap) -> Result<FeatureMap> {
    net.forward(x0)
}

/// `‖Φ(L_g x) − L_g Φ(x)‖ / ‖Φ(x)‖`.
pub fn verify_equivariance(net: &Network, x: &FeatureMap, g: &GroupElement) -> Result<f64> {
    let phi = net.forward(x)?;
    let n = phi.norm();
    if n < 1e-12 {
        return Err(Error::DegenerateReference { norm: n });
    }
    let lhs = net.forward(&crate::signal::group_translate(x, g)?)?;
    let rhs = crate::signal::group_translate(&phi, g)?;
    check_compatible(&lhs, &rhs)?;
    Ok(crate::signal::fm_distance(&lhs, &rhs)? / n)
}

/// Fits each layer's embedding on patches of the training maps propagated
/// through the layers fitted so far.
pub fn fit_network(group: &Arc<DiscretizedGroup>, training: &[FeatureMap], spec: &NetworkSpec) -> Result<Network> {
    if training.is_empty() {
        return Err(Error::InsufficientData("no training maps".into()));
    }
    if spec.layers.is_empty() {
        return Err(Error::param("layers", "a network needs at least one layer"));
    }
    if spec.fit_patches == 0 {
        return Err(Error::param("fit_patches", "must be ≥ 1"));
    }
    let mut configs: Vec<LayerConfig> = Vec::with_capacity(spec.layers.len());
    let mut prev_sigma = if spec.sigma0 > 0.0 { spec.sigma0 } else { 1.0 };
    for (k, ls) in spec.layers.iter().enumerate() {
        let options = PatchOptions {
            kappa: ls.kappa,
            sigma_prev: prev_sigma,
            stride: ls.stride,
            fiber_offsets: ls.fiber_offsets,
            cap_to_grid: ls.cap_to_grid,
        };
        let patch = build_patch_shape_with(group, options)?;
        // Propagate through the layers fitted so far.
        let partial = if configs.is_empty() {
            None
        } else {
            Some(Network::new(group.clone(), spec.sigma0, configs.clone())?)
        };
        let plan = PatchPlan::new(group, &patch)?;
        let maps: Vec<FeatureMap> = training
            .iter()
            .map(|x| -> Result<FeatureMap> {
                let y = match &partial {
                    Some(net) => net.forward(x)?,
                    None => match spec.sigma0 > 0.0 {
                        true => pool(x, spec.sigma0)?,
                        false => x.clone(),
                    },
                };
                Ok(plan.extract(&y)?.weighted())
            })
            .collect::<Result<_>>()?;
        let per_map = group.len();
        let total = per_map * maps.len();
        let layer_seed = derive_seed(spec.seed, k as u64);
        let mut rng = rng_from(derive_seed(layer_seed, 0xF17));
        let mut picks: Vec<usize> = sample(&mut rng, total, spec.fit_patches.min(total)).into_vec();
        picks.sort_unstable();
        let vectors: Vec<Vec<f64>> = picks
            .iter()
            .map(|&i| maps[i / per_map].value(i % per_map).to_vec())
            .collect();
        let embedding = fit_nystrom(&vectors, ls.channels, &ls.kernel, spec.eps, layer_seed)?;
        configs.push(LayerConfig {
            patch,
            options: Some(options),
            embedding,
            sigma: ls.sigma,
            fiber_pooling: ls.fiber_pooling,
        });
        prev_sigma = ls.sigma;
    }
    Network::new(group.clone(), spec.sigma0, configs)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

const MANIFEST: &str = "network.txt";

impl Network {
    /// Writes `network.txt` plus one embedding file per layer into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut text = String::from("[network]\n");
        match self.group.kind() {
            GroupKind::Se2 {
                height,
                width,
                n_theta,
            } => text.push_str(&format!(
                "group = se2\nheight = {height}\nwidth = {width}\nn_theta = {n_theta}\n"
            )),
            GroupKind::S2 { n_beta, n_phi } => {
                text.push_str(&format!("group = s2\nn_beta = {n_beta}\nn_phi = {n_phi}\n"))
            }
            GroupKind::So3 { .. } => unreachable!("networks never run on SO(3)"),
        }
        text.push_str(&format!("sigma0 = {}\nlayers = {}\n", self.sigma0, self.layers.len()));
        for (k, layer) in self.layers.iter().enumerate() {
            let c = &layer.config;
            let o = c.options.ok_or_else(|| {
                Error::Unsupported("saving layers with hand-built patch shapes".into())
            })?;
            let file = format!("layer_{}.eckn", k + 1);
            c.embedding.save(&dir.join(&file))?;
            text.push_str(&format!(
                "\n[layer.{}]\nkernel = {}\nchannels = {}\nkappa = {}\nsigma = {}\nsigma_prev = {}\n\
                 stride = {}\nfiber_offsets = {}\ncap_to_grid = {}\nfiber_pooling = {}\n\
                 epsilon = {}\nseed = {}\nembedding = {}\n",
                k + 1,
                c.embedding.kernel(),
                c.embedding.p(),
                o.kappa,
                c.sigma,
                o.sigma_prev,
                o.stride,
                o.fiber_offsets,
                o.cap_to_grid,
                c.fiber_pooling,
                c.embedding.eps(),
                c.embedding.seed(),
                file
            ));
        }
        let path = dir.join(MANIFEST);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Loads from a directory holding `network.txt`, or from the manifest path.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, manifest): (PathBuf, PathBuf) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST))
        } else {
            (
                path.parent().map(Path::to_path_buf).unwrap_or_default(),
                path.to_path_buf(),
            )
        };
        let text = std::fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let sections = ini::parse(&text)?;
        let net = sections
            .iter()
            .find(|s| s.name == "network")
            .ok_or_else(|| Error::MissingKey {
                section: "network".into(),
                key: "group".into(),
            })?;
        let kind = match net.require::<String>("group")?.as_str() {
            "se2" => GroupKind::Se2 {
                height: net.require("height")?,
                width: net.require("width")?,
                n_theta: net.require("n_theta")?,
            },
            "s2" => GroupKind::S2 {
                n_beta: net.require("n_beta")?,
                n_phi: net.require("n_phi")?,
            },
            other => {
                return Err(Error::Config {
                    line: net.line,
                    reason: format!("unsupported network group `{other}`"),
                })
            }
        };
        let group = Arc::new(build_group(kind)?);
        let sigma0: f64 = net.require("sigma0")?;
        let n: usize = net.require("layers")?;
        let mut configs = Vec::with_capacity(n);
        for k in 1..=n {
            let name = format!("layer.{k}");
            let s = sections
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::MissingKey {
                    section: name.clone(),
                    key: "kernel".into(),
                })?;
            let options = PatchOptions {
                kappa: s.require("kappa")?,
                sigma_prev: s.require("sigma_prev")?,
                stride: s.require("stride")?,
                fiber_offsets: s.require("fiber_offsets")?,
                cap_to_grid: s.require("cap_to_grid")?,
            };
            let file: String = s.require("embedding")?;
            let embedding = NystromEmbedding::load(&dir.join(file))?;
            let kernel = KernelSpec::parse(&s.require::<String>("kernel")?)?;
            if kernel != *embedding.kernel() {
                return Err(Error::Embedding(format!(
                    "layer {k}: manifest kernel {kernel} disagrees with embedding file"
                )));
            }
            configs.push(LayerConfig {
                patch: build_patch_shape_with(&group, options)?,
                options: Some(options),
                embedding,
                sigma: s.require("sigma")?,
                fiber_pooling: s.require("fiber_pooling")?,
            });
        }
        Network::new(group, sigma0, configs)
    }
}
