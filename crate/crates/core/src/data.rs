//! Datasets: IDX files, rotated copies and a synthetic oriented-bar set.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::signal::{snap, BaseImage};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Environment variable naming a fallback root for relative dataset paths.
pub const DATA_DIR_VAR: &str = "ECKN_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<BaseImage>,
    pub labels: Vec<u8>,
    /// Source path(s) or generator description.
    pub provenance: String,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Vec<BaseImage>, labels: Vec<u8>, provenance: String, split: String) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: images.len(),
                got: labels.len(),
            });
        }
        Ok(Dataset {
            images,
            labels,
            provenance,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Number of images carrying each label `0..10`.
    pub fn class_counts(&self) -> [usize; 10] {
        let mut c = [0; 10];
        for &l in &self.labels {
            if (l as usize) < 10 {
                c[l as usize] += 1;
            }
        }
        c
    }

    /// The first `n` images as one split and the rest as another.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>, tag: &str| Dataset {
            images: self.images[r.clone()].to_vec(),
            labels: self.labels[r].to_vec(),
            provenance: self.provenance.clone(),
            split: format!("{}:{tag}", self.split),
        };
        (part(0..n, "train"), part(n..self.len(), "test"))
    }

    /// Bilinearly resamples every image to `height × width`.
    pub fn resized(&self, height: usize, width: usize) -> Result<Dataset> {
        let images = self
            .images
            .iter()
            .map(|im| resize(im, height, width))
            .collect::<Result<_>>()?;
        Ok(Dataset {
            images,
            labels: self.labels.clone(),
            provenance: format!("{} resized to {height}x{width}", self.provenance),
            split: self.split.clone(),
        })
    }
}

/// Resolves a dataset path, trying `$ECKN_DATA_DIR/<path>` when a relative
/// path does not exist.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_relative() && !path.exists() {
        if let Some(root) = std::env::var_os(DATA_DIR_VAR) {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_header(bytes: &[u8], path: &Path, magic: u32, n_dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * n_dims;
    if bytes.len() < need {
        return Err(idx_err(path, format!("truncated header ({} bytes)", bytes.len())));
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let found = word(0);
    if found != magic {
        return Err(idx_err(
            path,
            format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"),
        ));
    }
    Ok((1..=n_dims).map(|i| word(i) as usize).collect())
}

fn read_idx_images(path: &Path) -> Result<Vec<BaseImage>> {
    let ib = fs::read(path).map_err(|e| Error::io(path, e))?;
    let dims = read_header(&ib, path, IDX_IMAGES_MAGIC, 3)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if h == 0 || w == 0 {
        return Err(idx_err(path, format!("zero image size {h}×{w}")));
    }
    let body = &ib[16..];
    if body.len() != n * h * w {
        return Err(idx_err(
            path,
            format!("expected {} pixel bytes, found {}", n * h * w, body.len()),
        ));
    }
    body.chunks_exact(h * w)
        .map(|c| BaseImage::new(h, w, 1, c.iter().map(|&b| b as f64 / 255.0).collect()))
        .collect()
}

/// Parses an IDX image file on its own.
pub fn load_idx_images(path: &Path) -> Result<Vec<BaseImage>> {
    read_idx_images(&resolve_data_path(path))
}

/// Parses an IDX image file and its label file; pixels map to `byte / 255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images_path = resolve_data_path(images_path);
    let labels_path = resolve_data_path(labels_path);
    let images = read_idx_images(&images_path)?;
    let lb = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let ldims = read_header(&lb, &labels_path, IDX_LABELS_MAGIC, 1)?;
    let labels = lb[8..].to_vec();
    if labels.len() != ldims[0] {
        return Err(idx_err(
            &labels_path,
            format!("header promises {} labels, found {}", ldims[0], labels.len()),
        ));
    }
    if labels.len() != images.len() {
        return Err(idx_err(
            &labels_path,
            format!("{} labels for {} images", labels.len(), images.len()),
        ));
    }
    Dataset::new(
        images,
        labels,
        format!("{} + {}", images_path.display(), labels_path.display()),
        "idx".into(),
    )
}

/// Writes single-channel images (quantized to bytes) and labels as IDX.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (h, w) = match dataset.images.first() {
        Some(im) => (im.height(), im.width()),
        None => (0, 0),
    };
    let mut ib = Vec::with_capacity(16 + dataset.len() * h * w);
    ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [dataset.len(), h, w] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for im in &dataset.images {
        if im.height() != h || im.width() != w || im.channels() != 1 {
            return Err(Error::InvalidDims(
                "IDX needs single-channel images of one size".into(),
            ));
        }
        ib.extend(im.pixels().iter().map(|p| (p * 255.0).round() as u8));
    }
    let mut lb = Vec::with_capacity(8 + dataset.len());
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    lb.extend_from_slice(&dataset.labels);
    for (path, bytes) in [(images_path, ib), (labels_path, lb)] {
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Rotates counter-clockwise by `angle` about the image center with
/// bilinear resampling and zero padding.
pub fn rotate_image(img: &BaseImage, angle: f64) -> Result<BaseImage> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (s, co) = angle.sin_cos();
    let mut out = Vec::with_capacity(h * w * c);
    for r in 0..h {
        for col in 0..w {
            let (dx, dy) = (col as f64 - cx, r as f64 - cy);
            // Inverse rotation maps the output pixel back to its source.
            let sx = snap(cx + co * dx + s * dy);
            let sy = snap(cy - s * dx + co * dy);
            for ch in 0..c {
                out.push(img.sample_zero_padded(sy, sx, ch));
            }
        }
    }
    BaseImage::from_clamped(h, w, c, out)
}

/// Rotates every image by its own uniform angle in `[0, 2π)`.
pub fn make_rotated(dataset: &Dataset, seed: u64) -> Result<Dataset> {
    let dist = Uniform::new(0.0, TAU).expect("valid range");
    let images = dataset
        .images
        .iter()
        .enumerate()
        .map(|(i, im)| rotate_image(im, dist.sample(&mut rng_from(derive_seed(seed, i as u64)))))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        images,
        labels: dataset.labels.clone(),
        provenance: format!("{} rotated (seed {seed})", dataset.provenance),
        split: dataset.split.clone(),
    })
}

/// Bilinear resampling with pixel centers aligned.
pub fn resize(img: &BaseImage, height: usize, width: usize) -> Result<BaseImage> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidDims(format!("cannot resize to {height}×{width}")));
    }
    let fy = img.height() as f64 / height as f64;
    let fx = img.width() as f64 / width as f64;
    let c = img.channels();
    let mut out = Vec::with_capacity(height * width * c);
    for r in 0..height {
        let sy = ((r as f64 + 0.5) * fy - 0.5).clamp(0.0, img.height() as f64 - 1.0);
        for col in 0..width {
            let sx = ((col as f64 + 0.5) * fx - 0.5).clamp(0.0, img.width() as f64 - 1.0);
            for ch in 0..c {
                out.push(img.sample_zero_padded(sy, sx, ch));
            }
        }
    }
    BaseImage::from_clamped(height, width, c, out)
}

/// Orientation of the bar drawn for class `c`.
pub fn class_orientation(class: u8) -> f64 {
    class as f64 * PI / 10.0
}

/// One smoothed bar through the image center at `angle`, with a seeded
/// jitter of center, length, thickness and intensity.
pub fn synthetic_bar(height: usize, width: usize, angle: f64, seed: u64) -> Result<BaseImage> {
    let mut rng = rng_from(seed);
    let radius = (height.min(width) as f64 - 1.0) / 2.0;
    let jitter = 0.05 * radius;
    let cy = (height as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
    let cx = (width as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
    let half_len = radius * rng.random_range(0.6..=0.7);
    let thickness = (0.06 * radius).max(0.6) * rng.random_range(0.9..=1.1);
    let amp = rng.random_range(0.85..=1.0);
    let (s, c) = angle.sin_cos();
    let mut px = Vec::with_capacity(height * width);
    for r in 0..height {
        for col in 0..width {
            // Image rows grow downwards; the bar direction is (cos, −sin).
            let (dx, dy) = (col as f64 - cx, cy - r as f64);
            let along = dx * c + dy * s;
            let across = -dx * s + dy * c;
            let lateral = (-0.5 * (across / thickness).powi(2)).exp();
            let over = (along.abs() - half_len).max(0.0);
            let ends = (-0.5 * (over / thickness).powi(2)).exp();
            px.push(amp * lateral * ends);
        }
    }
    BaseImage::from_clamped(height, width, 1, px)
}

/// `n_per_class` bars per class `0..10`, class `c` oriented at `cπ/10`,
/// laid out class-major.
pub fn make_synthetic(n_per_class: usize, height: usize, width: usize, seed: u64) -> Result<Dataset> {
    let mut images = Vec::with_capacity(10 * n_per_class);
    let mut labels = Vec::with_capacity(10 * n_per_class);
    for class in 0..10u8 {
        for k in 0..n_per_class {
            let s = derive_seed(derive_seed(seed, class as u64), k as u64);
            images.push(synthetic_bar(height, width, class_orientation(class), s)?);
            labels.push(class);
        }
    }
    Dataset::new(
        images,
        labels,
        format!("synthetic bars {height}x{width}, {n_per_class} per class, seed {seed}"),
        "synthetic".into(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rms_distance(a: &BaseImage, b: &BaseImage) -> f64 {
        let n = a.pixels().len() as f64;
        (a.pixels()
            .iter()
            .zip(b.pixels())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n)
            .sqrt()
    }

    #[test]
    fn idx_round_trip_and_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let mut img = vec![0u8; 16];
        img[5] = 255;
        img[6] = 51;
        let ds = Dataset::new(
            vec![
                BaseImage::new(4, 4, 1, img.iter().map(|&b| b as f64 / 255.0).collect()).unwrap(),
                BaseImage::constant(4, 4, 1.0).unwrap(),
            ],
            vec![3, 7],
            "fixture".into(),
            "t".into(),
        )
        .unwrap();
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.labels, vec![3, 7]);
        assert_eq!(back.images[0].get(1, 1, 0), 1.0);
        assert_eq!(back.images[1].pixels(), &[1.0; 16]);
        let bytes: Vec<u8> = back.images[0].pixels().iter().map(|p| (p * 255.0).round() as u8).collect();
        assert_eq!(bytes, img);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        let ds = make_synthetic(1, 4, 4, 0).unwrap();
        write_idx(&ds, &ip, &lp).unwrap();

        let mut bad = fs::read(&ip).unwrap();
        bad[3] = 0x02;
        let bp = dir.path().join("bad");
        fs::write(&bp, &bad).unwrap();
        assert!(matches!(load_idx(&bp, &lp), Err(Error::Idx { .. })));

        let mut short = fs::read(&lp).unwrap();
        short.truncate(12);
        short[4..8].copy_from_slice(&4u32.to_be_bytes());
        let sp = dir.path().join("short");
        fs::write(&sp, &short).unwrap();
        assert!(matches!(load_idx(&ip, &sp), Err(Error::Idx { .. })));

        let trunc = &fs::read(&ip).unwrap()[..20];
        fs::write(&bp, trunc).unwrap();
        assert!(matches!(load_idx(&bp, &lp), Err(Error::Idx { .. })));
        assert!(load_idx(&dir.path().join("missing"), &lp).unwrap_err().is_io());
    }

    #[test]
    fn quarter_turns_permute_pixels() {
        let img = synthetic_bar(9, 9, 0.3, 1).unwrap();
        let r = rotate_image(&img, PI / 2.0).unwrap();
        for row in 0..9 {
            for col in 0..9 {
                assert_eq!(r.get(row, col, 0), img.get(8 - col, row, 0));
            }
        }
        let full = rotate_image(&rotate_image(&r, PI).unwrap(), PI / 2.0).unwrap();
        assert_eq!(full, img);
    }

    #[test]
    fn rotation_is_seeded_and_keeps_mass() {
        let ds = make_synthetic(10, 16, 16, 4).unwrap();
        let a = make_rotated(&ds, 8).unwrap();
        assert_eq!(a, make_rotated(&ds, 8).unwrap());
        assert_ne!(a, make_rotated(&ds, 9).unwrap());
        assert_eq!(a.labels, ds.labels);
        let mass = |d: &Dataset| d.images.iter().map(|i| i.pixels().iter().sum::<f64>()).sum::<f64>();
        let rel = (mass(&a) - mass(&ds)).abs() / mass(&ds);
        assert!(rel < 0.02, "mass changed by {rel}");
    }

    #[test]
    fn synthetic_classes_are_distinct_and_seeded() {
        let ds = make_synthetic(1, 16, 16, 3).unwrap();
        assert_eq!(ds.class_counts(), [1; 10]);
        for a in 0..10 {
            for b in a + 1..10 {
                let d = rms_distance(&ds.images[a], &ds.images[b]);
                assert!(d > 0.1, "classes {a} and {b} at distance {d}");
            }
        }
        assert_eq!(ds, make_synthetic(1, 16, 16, 3).unwrap());
        assert_ne!(ds, make_synthetic(1, 16, 16, 4).unwrap());
        assert!((class_orientation(3) - 3.0 * PI / 10.0).abs() < 1e-15);
    }

    #[test]
    fn bar_follows_its_orientation() {
        // A horizontal bar is brighter along the middle row than the middle column.
        let img = synthetic_bar(17, 17, 0.0, 0).unwrap();
        let row: f64 = (0..17).map(|c| img.get(8, c, 0)).sum();
        let col: f64 = (0..17).map(|r| img.get(r, 8, 0)).sum();
        assert!(row > 2.0 * col);
        let v = synthetic_bar(17, 17, PI / 2.0, 0).unwrap();
        let row_v: f64 = (0..17).map(|c| v.get(8, c, 0)).sum();
        let col_v: f64 = (0..17).map(|r| v.get(r, 8, 0)).sum();
        assert!(col_v > 2.0 * row_v);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = synthetic_bar(8, 8, 0.5, 2).unwrap();
        assert_eq!(resize(&img, 8, 8).unwrap(), img);
        let c = BaseImage::constant(28, 28, 0.4).unwrap();
        let r = resize(&c, 16, 16).unwrap();
        assert!(r.pixels().iter().all(|p| (p - 0.4).abs() < 1e-12));
    }

    #[test]
    fn split_keeps_order() {
        let ds = make_synthetic(2, 4, 4, 0).unwrap();
        let (a, b) = ds.split_at(15);
        assert_eq!((a.len(), b.len()), (15, 5));
        assert_eq!(b.labels[0], ds.labels[15]);
        assert_eq!(a.split, "synthetic:train");
    }
}
