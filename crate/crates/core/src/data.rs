//! Dataset generators, IDX image ingestion and deterministic splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd_full, Matrix};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Shuffles `0..n` and cuts it by `fractions = (train, val)`; the rest is
    /// test.
    pub fn random(n: usize, train_frac: f64, val_frac: f64, seed: u64) -> Result<Self> {
        if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "split fractions ({train_frac}, {val_frac}) out of range"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9E37_79B9_7F4A_7C15)));
        let n_train = (n as f64 * train_frac).round() as usize;
        let n_val = ((n as f64 * val_frac).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Ok(Splits {
            train: idx,
            val,
            test,
        })
    }

    /// The 70/10/20 default.
    pub fn standard(n: usize, seed: u64) -> Self {
        Self::random(n, 0.7, 0.1, seed).expect("valid fractions")
    }

    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return false;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataKind {
    Tabular,
    /// Square grayscale images with values in [0, 1).
    Image { side: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub generator: String,
    pub params: Vec<(String, f64)>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub splits: Splits,
    pub kind: DataKind,
    pub meta: DatasetMeta,
    /// Orthonormal columns spanning the data manifold, when known.
    pub embedding: Option<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    pub fn split_x(&self, split: Split) -> Matrix {
        self.x.select_rows(self.indices(split))
    }

    pub fn split_labels(&self, split: Split) -> Vec<usize> {
        self.indices(split).iter().map(|&i| self.labels[i]).collect()
    }
}

/// Two interleaved spirals. Class 0 is `(r cos t, r sin t)` with
/// `t ~ U[0, 2π·turns]` and `r = t / (2π·turns)`; class 1 is the negation of an
/// independent draw. Gaussian noise of `noise_std` is added to both
/// coordinates.
pub fn two_spiral(n_points: usize, noise_std: f64, turns: f64, seed: u64) -> Result<Dataset> {
    if n_points == 0 || n_points % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "two-spiral needs a positive even point count, got {n_points}"
        )));
    }
    if !(turns > 0.0 && noise_std >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "two-spiral needs turns > 0 and noise_std >= 0, got ({turns}, {noise_std})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_max = 2.0 * std::f64::consts::PI * turns;
    let mut data = Vec::with_capacity(2 * n_points);
    let mut labels = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let class = i % 2;
        let t = rng.random_range(0.0..t_max);
        let r = t / t_max;
        let sign = if class == 0 { 1.0 } else { -1.0 };
        for c in [t.cos(), t.sin()] {
            let e: f64 = StandardNormal.sample(&mut rng);
            data.push(sign * r * c + noise_std * e);
        }
        labels.push(class);
    }
    Ok(Dataset {
        x: Matrix::from_vec(n_points, 2, data)?,
        labels,
        n_classes: 2,
        splits: Splits::standard(n_points, seed),
        kind: DataKind::Tabular,
        meta: DatasetMeta {
            generator: "two-spiral".into(),
            params: vec![
                ("n_points".into(), n_points as f64),
                ("noise_std".into(), noise_std),
                ("turns".into(), turns),
            ],
            seed,
        },
        embedding: None,
    })
}

/// Settings for [`embedded_manifold`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSpec {
    pub n_ambient: usize,
    pub n_intrinsic: usize,
    pub n_points: usize,
    pub noise_std: f64,
    pub n_classes: usize,
    /// Standard deviation of the class means around the origin, in units of
    /// the within-class standard deviation (which is 1).
    pub separation: f64,
}

impl Default for ManifoldSpec {
    fn default() -> Self {
        ManifoldSpec {
            n_ambient: 16,
            n_intrinsic: 4,
            n_points: 5000,
            noise_std: 0.01,
            n_classes: 4,
            separation: 2.0,
        }
    }
}

/// Class-conditional Gaussian mixture in `ℝ^k` embedded by a random
/// orthonormal map into `ℝ^n`, plus isotropic noise in the orthogonal
/// complement.
pub fn embedded_manifold(spec: &ManifoldSpec, seed: u64) -> Result<Dataset> {
    let (n, k) = (spec.n_ambient, spec.n_intrinsic);
    if k == 0 || k > n || spec.n_classes == 0 || spec.n_points == 0 {
        return Err(Error::InvalidArgument(format!(
            "embedded manifold needs 0 < intrinsic <= ambient and positive counts, got {spec:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let g = Matrix::from_vec(n, n, (0..n * n).map(|_| normal(&mut rng)).collect())?;
    let q = svd_full(&g)?.u;
    let embed = q.slice_cols(0, k)?;
    let complement = q.slice_cols(k, n)?;

    let means: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| (0..k).map(|_| spec.separation * normal(&mut rng)).collect())
        .collect();
    let mut latent = Matrix::zeros(spec.n_points, k);
    let mut labels = Vec::with_capacity(spec.n_points);
    for r in 0..spec.n_points {
        let c = r % spec.n_classes;
        for (v, m) in latent.row_mut(r).iter_mut().zip(&means[c]) {
            *v = m + normal(&mut rng);
        }
        labels.push(c);
    }
    let mut x = latent.matmul_nt(&embed)?;
    if spec.noise_std > 0.0 && k < n {
        let e = Matrix::from_vec(
            spec.n_points,
            n - k,
            (0..spec.n_points * (n - k))
                .map(|_| spec.noise_std * normal(&mut rng))
                .collect(),
        )?;
        x.add_assign(&e.matmul_nt(&complement)?)?;
    }
    Ok(Dataset {
        x,
        labels,
        n_classes: spec.n_classes,
        splits: Splits::standard(spec.n_points, seed),
        kind: DataKind::Tabular,
        meta: DatasetMeta {
            generator: "embedded-manifold".into(),
            params: vec![
                ("n_ambient".into(), n as f64),
                ("n_intrinsic".into(), k as f64),
                ("n_points".into(), spec.n_points as f64),
                ("noise_std".into(), spec.noise_std),
                ("n_classes".into(), spec.n_classes as f64),
                ("separation".into(), spec.separation),
            ],
            seed,
        },
        embedding: Some(embed),
    })
}

/// Byte-valued images of a blurred disc with random centre, radius and
/// brightness, dequantized to [0, 1). The label is the quadrant of the centre.
pub fn synthetic_images(count: usize, side: usize, seed: u64) -> Result<Dataset> {
    if count == 0 || side < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need count > 0 and side >= 2, got ({count}, {side})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = side as f64;
    let mut x = Matrix::zeros(count, side * side);
    let mut labels = Vec::with_capacity(count);
    for r in 0..count {
        let cx = rng.random_range(0.25 * s..0.75 * s);
        let cy = rng.random_range(0.25 * s..0.75 * s);
        let radius = rng.random_range(0.12 * s..0.3 * s);
        let bright = rng.random_range(0.5..1.0);
        let row = x.row_mut(r);
        for i in 0..side {
            for j in 0..side {
                let d = ((i as f64 + 0.5 - cy).powi(2) + (j as f64 + 0.5 - cx).powi(2)).sqrt();
                let v = bright / (1.0 + ((d - radius) / 0.8).exp());
                let byte = (v * 255.0).round().clamp(0.0, 255.0);
                row[i * side + j] = (byte + rng.random::<f64>()) / 256.0;
            }
        }
        labels.push(usize::from(cx >= s / 2.0) + 2 * usize::from(cy >= s / 2.0));
    }
    Ok(Dataset {
        x,
        labels,
        n_classes: 4,
        splits: Splits::standard(count, seed),
        kind: DataKind::Image { side },
        meta: DatasetMeta {
            generator: "synthetic-images".into(),
            params: vec![("count".into(), count as f64), ("side".into(), s)],
            seed,
        },
        embedding: None,
    })
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses IDX image bytes into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, "images")? as usize;
    let rows = read_u32(bytes, 8, "images")? as usize;
    let cols = read_u32(bytes, 12, "images")? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("images: dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format(format!(
            "images: expected {need} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok((n, rows, cols, &body[..need]))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, "labels")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format(format!(
            "labels: expected {n} bytes, found {}",
            body.len()
        )));
    }
    Ok(&body[..n])
}

/// Builds a dataset from raw IDX bytes. Images are zero-padded (centred) to
/// `pad_to × pad_to`; pixels become `(p + u) / 256` with `u ~ U[0, 1)` when
/// dequantizing and `p / 256` otherwise.
pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8], pad_to: usize, dequantize: bool, seed: u64) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if rows != cols || pad_to < rows {
        return Err(Error::Format(format!(
            "cannot pad {rows}x{cols} images to {pad_to}x{pad_to}"
        )));
    }
    let off = (pad_to - rows) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Matrix::zeros(n, pad_to * pad_to);
    for i in 0..n {
        let img = &pixels[i * rows * cols..(i + 1) * rows * cols];
        let out = x.row_mut(i);
        for r in 0..pad_to {
            for c in 0..pad_to {
                let inside = (off..off + rows).contains(&r) && (off..off + cols).contains(&c);
                let p = if inside {
                    f64::from(img[(r - off) * cols + (c - off)])
                } else {
                    0.0
                };
                let u = if dequantize { rng.random::<f64>() } else { 0.0 };
                out[r * pad_to + c] = (p + u) / 256.0;
            }
        }
    }
    let labels: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        x,
        labels,
        n_classes,
        splits: Splits::standard(n, seed),
        kind: DataKind::Image { side: pad_to },
        meta: DatasetMeta {
            generator: "idx".into(),
            params: vec![
                ("pad_to".into(), pad_to as f64),
                ("dequantize".into(), f64::from(u8::from(dequantize))),
            ],
            seed,
        },
        embedding: None,
    })
}

pub fn load_idx_images(
    images: &Path,
    labels: &Path,
    pad_to: usize,
    dequantize: bool,
    seed: u64,
) -> Result<Dataset> {
    let ib = std::fs::read(images)
        .map_err(|e| Error::Io(format!("{}: {e}", images.display())))?;
    let lb = std::fs::read(labels)
        .map_err(|e| Error::Io(format!("{}: {e}", labels.display())))?;
    idx_dataset(&ib, &lb, pad_to, dequantize, seed)
}

/// Serializes images and labels in IDX format.
pub fn encode_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut ib = Vec::with_capacity(16 + images.len() * rows * cols);
    ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [images.len(), rows, cols] {
        ib.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for img in images {
        ib.extend_from_slice(img);
    }
    let mut lb = Vec::with_capacity(8 + labels.len());
    lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lb.extend_from_slice(labels);
    (ib, lb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_partition_and_repeat() {
        let a = Splits::standard(1000, 3);
        assert!(a.is_partition_of(1000));
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (700, 100, 200));
        assert_eq!(a, Splits::standard(1000, 3));
        assert_ne!(a, Splits::standard(1000, 4));
    }

    #[test]
    fn spiral_origin_and_balance() {
        let d = two_spiral(1000, 0.0, 1.75, 1).unwrap();
        assert_eq!(d.labels.iter().filter(|&&l| l == 0).count(), 500);
        let max_r = (0..d.len())
            .map(|i| d.x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        assert!(max_r <= 1.0 + 1e-12);
        assert!(two_spiral(7, 0.0, 1.0, 1).is_err());
        assert_eq!(two_spiral(10_000, 0.02, 1.75, 0).unwrap().splits.test.len(), 2000);
    }

    #[test]
    fn spiral_is_seeded() {
        let a = two_spiral(200, 0.02, 1.75, 9).unwrap();
        let b = two_spiral(200, 0.02, 1.75, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_manifold_has_intrinsic_rank() {
        let spec = ManifoldSpec {
            noise_std: 0.0,
            n_points: 500,
            ..ManifoldSpec::default()
        };
        let d = embedded_manifold(&spec, 2).unwrap();
        let cov = d.x.covariance();
        let ev = svd_full(&cov).unwrap().sigma;
        assert!(ev[3] > 0.1);
        assert!(ev[4..].iter().all(|v| *v < 1e-10), "{ev:?}");
        let e = d.embedding.unwrap();
        assert!(e.orthogonality_error() < 1e-10);
    }

    #[test]
    fn idx_padding_and_dequantization() {
        let (ib, lb) = encode_idx(&[vec![0u8; 784], vec![255u8; 784]], 28, 28, &[3, 7]);
        let d = idx_dataset(&ib, &lb, 32, false, 0).unwrap();
        assert_eq!(d.x.shape(), (2, 1024));
        assert!(d.x.row(0).iter().all(|v| *v == 0.0));
        assert_eq!(d.labels, vec![3, 7]);
        // Border is padding; the interior carries the pixel value.
        assert_eq!(d.x.row(1)[0], 0.0);
        assert_eq!(d.x.row(1)[2 * 32 + 2], 255.0 / 256.0);

        let q = idx_dataset(&ib, &lb, 32, true, 0).unwrap();
        let v = q.x.row(1)[5 * 32 + 5];
        assert!((255.0 / 256.0..1.0).contains(&v));
        assert!(q.x.as_slice().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn idx_errors() {
        let (mut ib, lb) = encode_idx(&[vec![1u8; 4]], 2, 2, &[0]);
        assert!(matches!(idx_dataset(&ib, &lb, 2, false, 0), Ok(_)));
        let (_, lb2) = encode_idx(&[], 2, 2, &[0, 1]);
        assert!(matches!(idx_dataset(&ib, &lb2, 2, false, 0), Err(Error::Format(_))));
        ib.truncate(18);
        assert!(matches!(idx_dataset(&ib, &lb, 2, false, 0), Err(Error::Format(_))));
        let mut bad = lb.clone();
        bad[3] = 0x03;
        assert!(matches!(parse_idx_labels(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn synthetic_images_in_unit_interval() {
        let d = synthetic_images(20, 16, 1).unwrap();
        assert_eq!(d.x.shape(), (20, 256));
        assert!(d.x.as_slice().iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(d.kind, DataKind::Image { side: 16 });
    }
}
