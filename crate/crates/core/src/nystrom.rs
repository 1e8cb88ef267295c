//! Finite-dimensional kernel maps from spherical k-means anchors and a
//! whitened anchor Gram matrix.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{dot, kernel_eval_with_norms, norm, KernelFamily, KernelSpec, ZERO_NORM};

const MAGIC: &[u8; 4] = b"ECKN";
const VERSION: u32 = 1;
const KMEANS_ITERS: usize = 50;

/// Default whitening regularizer.
pub const DEFAULT_EPS: f64 = 1e-6;

/// `ψ(x) = W [K(zᵢ, x)]ᵢ` with `W = (K_ZZ + εI)^{−1/2}`.
#[derive(Clone, Debug, PartialEq)]
pub struct NystromEmbedding {
    anchors: Vec<f64>,
    whitening: Vec<f64>,
    p: usize,
    patch_dim: usize,
    kernel: KernelSpec,
    eps: f64,
    seed: u64,
}

/// Spherical k-means over unit-normalized patches (cosine objective),
/// k-means++ seeding, then whitening by symmetric eigendecomposition.
pub fn fit_nystrom(
    patches: &[Vec<f64>],
    p: usize,
    kernel: &KernelSpec,
    eps: f64,
    seed: u64,
) -> Result<NystromEmbedding> {
    if p == 0 {
        return Err(Error::param("p", "must be ≥ 1"));
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::param("eps", format!("must be finite and > 0, got {eps}")));
    }
    let dim = match patches.first() {
        Some(v) => v.len(),
        None => return Err(Error::InsufficientPatches { needed: p, found: 0 }),
    };
    let mut points: Vec<Vec<f64>> = Vec::with_capacity(patches.len());
    for v in patches {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        let n = norm(v);
        if n >= ZERO_NORM {
            points.push(v.iter().map(|a| a / n).collect());
        }
    }
    let distinct = count_distinct(&points);
    if distinct < p {
        return Err(Error::InsufficientPatches { needed: p, found: distinct });
    }
    let anchors = spherical_kmeans(&points, p, seed);
    NystromEmbedding::from_anchors(anchors, dim, *kernel, eps, seed)
}

fn count_distinct(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|v| v.iter().map(|a| a.to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let s = dot(point, c);
        if s > best.1 {
            best = (k, s);
        }
    }
    best
}

fn kmeans_pp(points: &[Vec<f64>], p: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    // squared chordal distance 2(1 − cos) to the closest center
    let mut d2: Vec<f64> = points
        .iter()
        .map(|x| (2.0 - 2.0 * dot(x, &centers[0])).max(0.0))
        .collect();
    while centers.len() < p {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = d2.iter().rposition(|&d| d > 0.0).unwrap_or(0);
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            points
                .iter()
                .position(|x| !centers.contains(x))
                .unwrap_or(0)
        };
        let c = points[pick].clone();
        for (d, x) in d2.iter_mut().zip(points) {
            *d = d.min((2.0 - 2.0 * dot(x, &c)).max(0.0));
        }
        centers.push(c);
    }
    centers
}

fn spherical_kmeans(points: &[Vec<f64>], p: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = points[0].len();
    let mut centers = kmeans_pp(points, p, &mut rng);
    let mut assign = vec![0usize; points.len()];
    for _ in 0..KMEANS_ITERS {
        let mut worst = (0usize, f64::INFINITY);
        for (i, x) in points.iter().enumerate() {
            let (k, s) = nearest(x, &centers);
            assign[i] = k;
            if s < worst.1 {
                worst = (i, s);
            }
        }
        let mut sums = vec![vec![0.0; dim]; p];
        let mut counts = vec![0usize; p];
        for (x, &k) in points.iter().zip(&assign) {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(x) {
                *s += v;
            }
        }
        for k in 0..p {
            if counts[k] == 0 {
                // reseed an empty cluster at the worst-fit point
                centers[k] = points[worst.0].clone();
                worst.1 = f64::INFINITY;
                continue;
            }
            let n = norm(&sums[k]);
            if n >= ZERO_NORM {
                centers[k] = sums[k].iter().map(|s| s / n).collect();
            }
        }
    }
    centers
}

impl NystromEmbedding {
    /// Builds the whitening for given unit-norm anchor rows.
    pub fn from_anchors(
        anchors: Vec<Vec<f64>>,
        patch_dim: usize,
        kernel: KernelSpec,
        eps: f64,
        seed: u64,
    ) -> Result<Self> {
        let p = anchors.len();
        if p == 0 {
            return Err(Error::param("p", "must be ≥ 1"));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::param("eps", "must be finite and ≥ 0"));
        }
        for a in &anchors {
            if a.len() != patch_dim {
                return Err(Error::DimensionMismatch {
                    expected: patch_dim,
                    got: a.len(),
                });
            }
            if (norm(a) - 1.0).abs() > 1e-10 {
                return Err(Error::param("anchors", "rows must be unit-norm"));
            }
        }
        let gram = DMatrix::from_fn(p, p, |i, j| {
            kernel_eval_with_norms(&kernel, &anchors[i], 1.0, &anchors[j], 1.0)
        });
        let whitening = inverse_sqrt(&gram, eps)?;
        Ok(NystromEmbedding {
            anchors: anchors.into_iter().flatten().collect(),
            whitening: whitening.transpose().as_slice().to_vec(),
            p,
            patch_dim,
            kernel,
            eps,
            seed,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_dim
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn anchor(&self, i: usize) -> &[f64] {
        &self.anchors[i * self.patch_dim..(i + 1) * self.patch_dim]
    }

    /// Whitening matrix, row-major.
    pub fn whitening(&self) -> &[f64] {
        &self.whitening
    }

    pub fn whitening_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.p, self.p, &self.whitening)
    }

    pub fn gram(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.p, |i, j| {
            kernel_eval_with_norms(&self.kernel, self.anchor(i), 1.0, self.anchor(j), 1.0)
        })
    }

    /// Writes `ψ(x)` into `out` (length `p`).
    pub(crate) fn embed_into(&self, x: &[f64], out: &mut [f64], kv: &mut Vec<f64>) {
        let nx = norm(x);
        out.iter_mut().for_each(|o| *o = 0.0);
        if nx < ZERO_NORM {
            return;
        }
        kv.clear();
        kv.extend((0..self.p).map(|i| kernel_eval_with_norms(&self.kernel, self.anchor(i), 1.0, x, nx)));
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.whitening[i * self.p..(i + 1) * self.p], kv);
        }
    }
}

/// `ψ(x)`; the zero patch embeds to zero.
pub fn embed_patch(emb: &NystromEmbedding, patch: &[f64]) -> Result<Vec<f64>> {
    if patch.len() != emb.patch_dim {
        return Err(Error::DimensionMismatch {
            expected: emb.patch_dim,
            got: patch.len(),
        });
    }
    let mut out = vec![0.0; emb.p];
    emb.embed_into(patch, &mut out, &mut Vec::with_capacity(emb.p));
    Ok(out)
}

fn inverse_sqrt(gram: &DMatrix<f64>, eps: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(gram.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-8 || min + eps <= 0.0 {
        return Err(Error::NotPsd { eigenvalue: min });
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / (l + eps).sqrt()));
    let w = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok((&w + w.transpose()) * 0.5)
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Embedding(format!("truncated file: {e}")))?;
    Ok(b)
}

impl NystromEmbedding {
    /// Little-endian layout: magic, version, p, patch_dim, family tag,
    /// two family parameters, ε, seed, anchors (p × dim), whitening (p × p).
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        write_u32(w, self.p as u32)?;
        write_u32(w, self.patch_dim as u32)?;
        let fam = self.kernel.family();
        w.write_all(&[fam.tag()])?;
        let (a, b) = fam.params();
        write_f64(w, a)?;
        write_f64(w, b)?;
        write_f64(w, self.eps)?;
        w.write_all(&self.seed.to_le_bytes())?;
        for &v in self.anchors.iter().chain(&self.whitening) {
            write_f64(w, v)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        if &read_array::<4>(r)? != MAGIC {
            return Err(Error::Embedding("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(read_array(r)?);
        if version != VERSION {
            return Err(Error::Embedding(format!("unsupported version {version}")));
        }
        let p = u32::from_le_bytes(read_array(r)?) as usize;
        let patch_dim = u32::from_le_bytes(read_array(r)?) as usize;
        if p == 0 || patch_dim == 0 || p > 1 << 16 || patch_dim > 1 << 24 {
            return Err(Error::Embedding(format!("implausible dims p={p}, dim={patch_dim}")));
        }
        let tag = read_array::<1>(r)?[0];
        let a = f64::from_le_bytes(read_array(r)?);
        let b = f64::from_le_bytes(read_array(r)?);
        let kernel = KernelSpec::new(KernelFamily::from_tag(tag, a, b)?)
            .map_err(|e| Error::Embedding(e.to_string()))?;
        let eps = f64::from_le_bytes(read_array(r)?);
        let seed = u64::from_le_bytes(read_array(r)?);
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| Ok(f64::from_le_bytes(read_array(r)?))).collect()
        };
        let anchors = read_vec(p * patch_dim)?;
        let whitening = read_vec(p * p)?;
        if anchors.iter().chain(&whitening).any(|v| !v.is_finite()) || !eps.is_finite() {
            return Err(Error::Embedding("non-finite values".into()));
        }
        Ok(NystromEmbedding {
            anchors,
            whitening,
            p,
            patch_dim,
            kernel,
            eps,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::kernel_eval;
    use rand_distr::StandardNormal;

    fn cluster(center: &[f64], n: usize, spread: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|c| c + spread * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn single_anchor() {
        let v = vec![3.0, 4.0];
        let patches = vec![v.clone(); 5];
        let eps = 1e-3;
        let emb = fit_nystrom(&patches, 1, &KernelSpec::exponential(), eps, 0).unwrap();
        assert_eq!(emb.anchor(0), &[0.6, 0.8]);
        assert!((emb.whitening()[0] - 1.0 / (1.0 + eps).sqrt()).abs() < 1e-15);
        let x = [1.0, -2.0];
        let psi = embed_patch(&emb, &x).unwrap();
        let expected = kernel_eval(&KernelSpec::exponential(), &[0.6, 0.8], &x).unwrap() / (1.0 + eps).sqrt();
        assert!((psi[0] - expected).abs() < 1e-14);
        assert_eq!(embed_patch(&emb, &[0.0, 0.0]).unwrap(), vec![0.0]);
        assert!(embed_patch(&emb, &[1.0]).is_err());
    }

    #[test]
    fn two_orthogonal_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut patches = cluster(&[1.0, 0.0], 20, 0.0, &mut rng);
        patches.extend(cluster(&[0.0, 2.0], 20, 0.0, &mut rng));
        let eps = 1e-6;
        let emb = fit_nystrom(&patches, 2, &KernelSpec::exponential(), eps, 9).unwrap();
        let e = (-1f64).exp();
        // Eigenpairs of [[1+ε, e], [e, 1+ε]]: (1 + ε ± e) along (1, ±1)/√2.
        let a = 1.0 / (1.0 + eps + e).sqrt();
        let b = 1.0 / (1.0 + eps - e).sqrt();
        let diag = 0.5 * (a + b);
        let off = 0.5 * (a - b);
        let w = emb.whitening();
        assert!((w[0] - diag).abs() < 1e-10 && (w[3] - diag).abs() < 1e-10);
        assert!((w[1] - off).abs() < 1e-10 && (w[2] - off).abs() < 1e-10);
    }

    #[test]
    fn whitening_identity_and_landmark_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let patches: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..6).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        for &eps in &[1e-4, 1e-6] {
            let emb = fit_nystrom(&patches, 8, &KernelSpec::exponential(), eps, 11).unwrap();
            let w = emb.whitening_matrix();
            let k = emb.gram() + DMatrix::identity(8, 8) * eps;
            let id = &w * k * &w;
            assert!((id - DMatrix::identity(8, 8)).amax() < 1e-8);
            assert!((&w - w.transpose()).amax() == 0.0);
            let psis: Vec<Vec<f64>> = (0..8).map(|i| embed_patch(&emb, emb.anchor(i)).unwrap()).collect();
            let gram = emb.gram();
            for i in 0..8 {
                assert!((norm(emb.anchor(i)) - 1.0).abs() < 1e-10);
                for j in 0..8 {
                    assert!((dot(&psis[i], &psis[j]) - gram[(i, j)]).abs() <= 10.0 * eps);
                }
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let a = fit_nystrom(&patches, 5, &KernelSpec::exponential(), 1e-6, 42).unwrap();
        let b = fit_nystrom(&patches, 5, &KernelSpec::exponential(), 1e-6, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_few_patches() {
        let patches = vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 0.0]];
        assert!(matches!(
            fit_nystrom(&patches, 2, &KernelSpec::exponential(), 1e-6, 0),
            Err(Error::InsufficientPatches { needed: 2, found: 1 })
        ));
        assert!(fit_nystrom(&patches, 1, &KernelSpec::exponential(), 0.0, 0).is_err());
    }

    #[test]
    fn binary_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patches: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng.random::<f64>()).collect())
            .collect();
        let emb = fit_nystrom(&patches, 4, &KernelSpec::polynomial(2).unwrap(), 1e-5, 7).unwrap();
        let mut buf = Vec::new();
        emb.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"ECKN");
        let back = NystromEmbedding::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, emb);
        buf[0] = b'X';
        assert!(NystromEmbedding::read_from(&mut buf.as_slice()).is_err());
        let short = &buf[4..20];
        assert!(NystromEmbedding::read_from(&mut &short[..]).is_err());
    }
}
