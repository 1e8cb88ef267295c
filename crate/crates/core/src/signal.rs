//! Signals on the plane, on S², and lifted to a discretized group.

use std::f64::consts::{PI, TAU};
use std::sync::{Arc, OnceLock};

use crate::error::{Error, Result};
use crate::group::{s2_angles, s2_unit, DiscretizedGroup, GroupElement, GroupKind, So3};

/// Coordinates within this distance of an integer are treated as lattice
/// points, so lattice-exact group elements resample without round-off.
const SNAP_TOL: f64 = 1e-9;

pub(crate) fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP_TOL {
        r
    } else {
        v
    }
}

/// A planar multi-channel image with pixels in `[0, 1]`, stored row-major
/// as `(row, col, channel)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl BaseImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidDims(format!(
                "image dims must be positive, got {height}×{width}×{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::DimensionMismatch {
                expected: height * width * channels,
                got: pixels.len(),
            });
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::param("pixels", format!("value {bad} outside [0, 1]")));
        }
        Ok(BaseImage {
            height,
            width,
            channels,
            pixels,
        })
    }

    /// Builds an image from arbitrary finite values, clamping into `[0, 1]`.
    pub fn from_clamped(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        let pixels = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(height, width, channels, pixels)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, 1, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * self.width + col) * self.channels + channel]
    }

    /// Root mean square over pixels (the uniform measure on the grid).
    pub fn norm(&self) -> f64 {
        let n = (self.height * self.width) as f64;
        (self.pixels.iter().map(|p| p * p).sum::<f64>() / n).sqrt()
    }

    /// Bilinear sample at fractional `(row, col)`; neighbors outside the
    /// image count as zero.
    pub fn sample_zero_padded(&self, row: f64, col: f64, channel: usize) -> f64 {
        let (row, col) = (snap(row), snap(col));
        let (r0, c0) = (row.floor(), col.floor());
        let (ar, ac) = (row - r0, col - c0);
        let mut acc = 0.0;
        for (dr, wr) in [(0.0, 1.0 - ar), (1.0, ar)] {
            for (dc, wc) in [(0.0, 1.0 - ac), (1.0, ac)] {
                let w = wr * wc;
                if w == 0.0 {
                    continue;
                }
                let (r, c) = (r0 + dr, c0 + dc);
                if r >= 0.0 && c >= 0.0 && (r as usize) < self.height && (c as usize) < self.width {
                    acc += w * self.get(r as usize, c as usize, channel);
                }
            }
        }
        acc
    }
}

/// A channel-valued signal over the elements of a [`DiscretizedGroup`],
/// stored as `(element, channel)` row-major.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    group: Arc<DiscretizedGroup>,
    channels: usize,
    values: Vec<f64>,
    layer: usize,
    norm: OnceLock<f64>,
}

impl PartialEq for FeatureMap {
    fn eq(&self, other: &Self) -> bool {
        self.group.kind() == other.group.kind()
            && self.channels == other.channels
            && self.values == other.values
    }
}

impl FeatureMap {
    pub fn new(group: Arc<DiscretizedGroup>, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("channels", "must be > 0"));
        }
        if values.len() != group.len() * channels {
            return Err(Error::DimensionMismatch {
                expected: group.len() * channels,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("values", "feature maps must be finite"));
        }
        Ok(FeatureMap {
            group,
            channels,
            values,
            layer: 0,
            norm: OnceLock::new(),
        })
    }

    pub fn zeros(group: Arc<DiscretizedGroup>, channels: usize) -> Self {
        let n = group.len() * channels;
        FeatureMap {
            group,
            channels,
            values: vec![0.0; n],
            layer: 0,
            norm: OnceLock::new(),
        }
    }

    pub fn constant(group: Arc<DiscretizedGroup>, channels: usize, value: f64) -> Result<Self> {
        let n = group.len() * channels;
        Self::new(group, channels, vec![value; n])
    }

    /// Internal constructor for values produced by crate code (already finite).
    pub(crate) fn from_parts(group: Arc<DiscretizedGroup>, channels: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), group.len() * channels);
        FeatureMap {
            group,
            channels,
            values,
            layer: 0,
            norm: OnceLock::new(),
        }
    }

    pub fn group(&self) -> &Arc<DiscretizedGroup> {
        &self.group
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn value(&self, element: usize) -> &[f64] {
        &self.values[element * self.channels..(element + 1) * self.channels]
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = layer;
        self
    }

    /// Haar-weighted L² norm, cached after first use.
    pub fn norm(&self) -> f64 {
        *self.norm.get_or_init(|| self.norm_sq_uncached().sqrt())
    }

    fn norm_sq_uncached(&self) -> f64 {
        let mut acc = Neumaier::default();
        for (i, w) in self.group.haar_weights().iter().enumerate() {
            let v = self.value(i);
            acc.add(w * v.iter().map(|x| x * x).sum::<f64>());
        }
        acc.total()
    }

    /// Recomputes the norm, bypassing the cache.
    pub fn recompute_norm(&self) -> f64 {
        self.norm_sq_uncached().sqrt()
    }

    pub fn scaled(&self, c: f64) -> FeatureMap {
        FeatureMap::from_parts(
            self.group.clone(),
            self.channels,
            self.values.iter().map(|v| v * c).collect(),
        )
        .with_layer(self.layer)
    }

    pub fn sub(&self, other: &FeatureMap) -> Result<FeatureMap> {
        check_compatible(self, other)?;
        Ok(FeatureMap::from_parts(
            self.group.clone(),
            self.channels,
            self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        ))
    }

    /// Per-base-point average over the fiber, as `(base_point, channel)`.
    pub fn fiber_average(&self) -> Vec<f64> {
        let f = self.group.fiber_len();
        let c = self.channels;
        let bases = self.group.len() / f;
        let mut out = vec![0.0; bases * c];
        for b in 0..bases {
            for j in 0..f {
                let v = self.value(b * f + j);
                for (o, x) in out[b * c..(b + 1) * c].iter_mut().zip(v) {
                    *o += x;
                }
            }
            for o in &mut out[b * c..(b + 1) * c] {
                *o /= f as f64;
            }
        }
        out
    }

    /// Converts an SE(2) map with a single fiber sample back to an image,
    /// clamping into `[0, 1]`.
    pub fn to_image(&self) -> Result<BaseImage> {
        match self.group.se2_dims() {
            Some((h, w, 1)) => BaseImage::from_clamped(h, w, self.channels, self.values.clone()),
            _ => Err(Error::Unsupported(
                "only SE(2) maps with n_theta = 1 convert back to images".into(),
            )),
        }
    }
}

#[derive(Default)]
pub(crate) struct Neumaier {
    sum: f64,
    c: f64,
}

impl Neumaier {
    pub(crate) fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.c += (self.sum - t) + x;
        } else {
            self.c += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn total(&self) -> f64 {
        self.sum + self.c
    }
}

pub(crate) fn check_compatible(a: &FeatureMap, b: &FeatureMap) -> Result<()> {
    if a.group.kind() != b.group.kind() {
        return Err(Error::InvalidDims(format!(
            "feature maps live on different groups: {:?} vs {:?}",
            a.group.kind(),
            b.group.kind()
        )));
    }
    if a.channels != b.channels {
        return Err(Error::DimensionMismatch {
            expected: a.channels,
            got: b.channels,
        });
    }
    Ok(())
}

/// `√(Σᵢ wᵢ ‖a(i) − b(i)‖²)`.
pub fn fm_distance(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    check_compatible(a, b)?;
    let c = a.channels;
    let mut acc = Neumaier::default();
    for (i, w) in a.group.haar_weights().iter().enumerate() {
        let d: f64 = a.values[i * c..(i + 1) * c]
            .iter()
            .zip(&b.values[i * c..(i + 1) * c])
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        acc.add(w * d);
    }
    Ok(acc.total().max(0.0).sqrt())
}

/// How fiber (angle) coordinates are resolved between samples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FiberInterp {
    #[default]
    Nearest,
    Linear,
}

/// Convex interpolation weights over grid elements.
#[derive(Clone, Debug, Default)]
pub(crate) struct Stencil {
    terms: Vec<(usize, f64)>,
}

impl Stencil {
    fn new() -> Self {
        Stencil {
            terms: Vec::with_capacity(8),
        }
    }

    fn push(&mut self, idx: usize, w: f64) {
        if w == 0.0 {
            return;
        }
        match self.terms.iter_mut().find(|(i, _)| *i == idx) {
            Some(t) => t.1 += w,
            None => self.terms.push((idx, w)),
        }
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.terms.iter().copied()
    }

    /// Accumulates `scale · Σ w x(idx)` into `out`.
    pub(crate) fn accumulate(&self, x: &FeatureMap, scale: f64, out: &mut [f64]) {
        for (i, w) in self.entries() {
            let sw = scale * w;
            for (o, v) in out.iter_mut().zip(x.value(i)) {
                *o += sw * v;
            }
        }
    }
}

/// Linear weights along a periodic axis of length `n` at coordinate `t`.
fn periodic_pair(t: f64, n: usize) -> ((usize, f64), (usize, f64)) {
    let t = snap(t);
    let f = t.floor();
    let a = t - f;
    let i0 = (f as i64).rem_euclid(n as i64) as usize;
    ((i0, 1.0 - a), ((i0 + 1) % n, a))
}

fn se2_stencil(
    dims: (usize, usize, usize),
    tx: f64,
    ty: f64,
    theta: f64,
    fiber: FiberInterp,
) -> Stencil {
    let (h, w, n) = dims;
    let ((x0, ax0), (x1, ax1)) = periodic_pair(tx, w);
    let ((y0, ay0), (y1, ay1)) = periodic_pair(ty, h);
    let t = snap(theta * n as f64 / TAU);
    let fibers: [(usize, f64); 2] = match fiber {
        FiberInterp::Nearest => {
            let j = ((t + 0.5).floor() as i64).rem_euclid(n as i64) as usize;
            [(j, 1.0), (0, 0.0)]
        }
        FiberInterp::Linear => {
            let (a, b) = periodic_pair(t, n);
            [a, b]
        }
    };
    let mut s = Stencil::new();
    for &(y, wy) in &[(y0, ay0), (y1, ay1)] {
        for &(x, wx) in &[(x0, ax0), (x1, ax1)] {
            for &(j, wj) in &fibers {
                s.push((y * w + x) * n + j, wy * wx * wj);
            }
        }
    }
    s
}

fn s2_stencil(dims: (usize, usize), theta: f64, phi: f64) -> Stencil {
    let (nb, np) = dims;
    let t = snap(theta * nb as f64 / PI - 0.5);
    let mut s = Stencil::new();
    let ring_at = |s: &mut Stencil, ring: usize, w: f64| {
        let ((j0, w0), (j1, w1)) = periodic_pair(phi * np as f64 / TAU, np);
        s.push(ring * np + j0, w * w0);
        s.push(ring * np + j1, w * w1);
    };
    let ring_mean = |s: &mut Stencil, ring: usize, w: f64| {
        for j in 0..np {
            s.push(ring * np + j, w / np as f64);
        }
    };
    // Inside a polar cap, blend the nearest ring with its mean (the pole value).
    if t < 0.0 {
        let a = 2.0 * (t + 0.5);
        ring_at(&mut s, 0, a);
        ring_mean(&mut s, 0, 1.0 - a);
    } else if t > (nb - 1) as f64 {
        let a = 2.0 * ((nb as f64 - 0.5) - t);
        ring_at(&mut s, nb - 1, a);
        ring_mean(&mut s, nb - 1, 1.0 - a);
    } else {
        let r0 = t.floor();
        let a = t - r0;
        let r0 = r0 as usize;
        ring_at(&mut s, r0, 1.0 - a);
        if a > 0.0 {
            ring_at(&mut s, r0 + 1, a);
        }
    }
    s
}

/// Interpolation stencil for a continuous point of the group's base space.
pub(crate) fn point_stencil(
    group: &DiscretizedGroup,
    point: &GroupElement,
    fiber: FiberInterp,
) -> Result<Stencil> {
    match (group.kind(), point) {
        (
            GroupKind::Se2 {
                height,
                width,
                n_theta,
            },
            GroupElement::Se2 { tx, ty, theta },
        ) => Ok(se2_stencil((height, width, n_theta), *tx, *ty, *theta, fiber)),
        (GroupKind::S2 { n_beta, n_phi }, GroupElement::S2Point { theta, phi }) => {
            Ok(s2_stencil((n_beta, n_phi), *theta, *phi))
        }
        (GroupKind::So3 { .. }, _) => Err(Error::Unsupported(
            "interpolation on the SO(3) Euler grid".into(),
        )),
        (kind, p) => Err(Error::VariantMismatch {
            expected: match kind {
                GroupKind::Se2 { .. } => "SE2",
                _ => "S2Point",
            },
            got: p.variant_name(),
        }),
    }
}

/// Bilinear in space, nearest-neighbor in the fiber angle.
pub fn sample_interpolated(x: &FeatureMap, point: &GroupElement) -> Result<Vec<f64>> {
    sample_interpolated_with(x, point, FiberInterp::Nearest)
}

pub fn sample_interpolated_with(
    x: &FeatureMap,
    point: &GroupElement,
    fiber: FiberInterp,
) -> Result<Vec<f64>> {
    let s = point_stencil(&x.group, point, fiber)?;
    let mut out = vec![0.0; x.channels];
    s.accumulate(x, 1.0, &mut out);
    Ok(out)
}

/// Canonical lift constant along the fiber. S² grids accept images already
/// sampled on the `n_beta × n_phi` grid.
pub fn lift(img: &BaseImage, group: &Arc<DiscretizedGroup>) -> Result<FeatureMap> {
    let c = img.channels;
    match group.kind() {
        GroupKind::Se2 {
            height,
            width,
            n_theta,
        } => {
            if (img.height, img.width) != (height, width) {
                return Err(Error::InvalidDims(format!(
                    "image is {}×{} but the SE(2) grid is {height}×{width}",
                    img.height, img.width
                )));
            }
            let mut values = Vec::with_capacity(group.len() * c);
            for p in 0..height * width {
                let px = &img.pixels[p * c..(p + 1) * c];
                for _ in 0..n_theta {
                    values.extend_from_slice(px);
                }
            }
            Ok(FeatureMap::from_parts(group.clone(), c, values))
        }
        GroupKind::S2 { n_beta, n_phi } => {
            if (img.height, img.width) != (n_beta, n_phi) {
                return Err(Error::InvalidDims(format!(
                    "planar {}×{} image on an S² grid needs stereographic_project",
                    img.height, img.width
                )));
            }
            Ok(FeatureMap::from_parts(group.clone(), c, img.pixels.clone()))
        }
        GroupKind::So3 { .. } => Err(Error::Unsupported("lifting onto the SO(3) grid".into())),
    }
}

/// `(L_g x)(u) = x(g⁻¹u)`. SE(2) maps take SE(2) elements; S² maps take
/// rotations.
pub fn group_translate(x: &FeatureMap, g: &GroupElement) -> Result<FeatureMap> {
    group_translate_with(x, g, FiberInterp::Nearest)
}

pub fn group_translate_with(x: &FeatureMap, g: &GroupElement, fiber: FiberInterp) -> Result<FeatureMap> {
    let group = x.group.clone();
    let c = x.channels;
    let mut values = vec![0.0; group.len() * c];
    match (group.kind(), g) {
        (GroupKind::Se2 { .. }, GroupElement::Se2 { tx, ty, theta }) => {
            if *tx == 0.0 && *ty == 0.0 && *theta == 0.0 {
                return Ok(x.clone());
            }
            let inv = g.inverse()?;
            for (i, h) in group.elements().iter().enumerate() {
                let p = inv.compose(h)?;
                point_stencil(&group, &p, fiber)?.accumulate(x, 1.0, &mut values[i * c..(i + 1) * c]);
            }
        }
        (GroupKind::S2 { .. }, GroupElement::So3(r)) => {
            if *r == So3::identity() {
                return Ok(x.clone());
            }
            let inv = r.inverse();
            for (i, h) in group.elements().iter().enumerate() {
                let v = inv.apply(h.unit_vector().expect("S² grid holds points"));
                let (t, p) = s2_angles(v);
                let q = GroupElement::s2_point(t, p);
                point_stencil(&group, &q, fiber)?.accumulate(x, 1.0, &mut values[i * c..(i + 1) * c]);
            }
        }
        (GroupKind::So3 { .. }, _) => {
            return Err(Error::Unsupported("translation on the SO(3) Euler grid".into()))
        }
        (GroupKind::Se2 { .. }, other) => {
            return Err(Error::VariantMismatch {
                expected: "SE2",
                got: other.variant_name(),
            })
        }
        (GroupKind::S2 { .. }, other) => {
            return Err(Error::VariantMismatch {
                expected: "SO3",
                got: other.variant_name(),
            })
        }
    }
    Ok(FeatureMap::from_parts(group, c, values).with_layer(x.layer))
}

/// Maps each S² grid point to the image plane with `r = scale · tan(β/2)`
/// (north pole at the image center, south pole at infinity) and samples
/// the image bilinearly; points landing outside the image read zero.
pub fn stereographic_project(
    img: &BaseImage,
    s2_grid: &Arc<DiscretizedGroup>,
    scale: f64,
) -> Result<FeatureMap> {
    if s2_grid.s2_dims().is_none() {
        return Err(Error::VariantMismatch {
            expected: "S2Point",
            got: match s2_grid.kind() {
                GroupKind::Se2 { .. } => "SE2",
                _ => "SO3",
            },
        });
    }
    if !(scale > 0.0) {
        return Err(Error::param("scale", "must be > 0"));
    }
    let c = img.channels;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut values = vec![0.0; s2_grid.len() * c];
    for (i, p) in s2_grid.elements().iter().enumerate() {
        let (px, py) = stereographic_plane_point(p, scale);
        let (col, row) = (cx + px, cy + py);
        if !(row > -1.0 && col > -1.0 && row < img.height as f64 && col < img.width as f64) {
            continue;
        }
        for ch in 0..c {
            values[i * c + ch] = img.sample_zero_padded(row, col, ch);
        }
    }
    Ok(FeatureMap::from_parts(s2_grid.clone(), c, values))
}

/// Plane coordinates (relative to the image center, in pixels) of an S² point.
pub fn stereographic_plane_point(p: &GroupElement, scale: f64) -> (f64, f64) {
    let v = p.unit_vector().unwrap_or([0.0, 0.0, 1.0]);
    let (theta, phi) = s2_angles(v);
    let r = scale * (theta / 2.0).tan();
    (r * phi.cos(), r * phi.sin())
}

#[allow(dead_code)]
pub(crate) fn s2_point_vector(p: &GroupElement) -> [f64; 3] {
    match p {
        GroupElement::S2Point { theta, phi } => s2_unit(*theta, *phi),
        _ => [0.0, 0.0, 1.0],
    }
}
