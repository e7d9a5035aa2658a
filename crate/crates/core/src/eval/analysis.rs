use serde::{Deserialize, Serialize};

use crate::data::DataKind;
use crate::error::{Error, Result};
use crate::linalg::{canonicalize_rotation, chordal_distance, svd_full, Matrix};
use crate::model::NeuralPcaModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    /// Remove the leading `κ` dimensions.
    Leading,
    /// Remove the trailing `κ` dimensions.
    Trailing,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Leading => "leading",
            Side::Trailing => "trailing",
        }
    }
}

impl std::str::FromStr for Side {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leading" => Ok(Side::Leading),
            "trailing" => Ok(Side::Trailing),
            other => Err(Error::InvalidArgument(format!(
                "side must be leading or trailing, got `{other}`"
            ))),
        }
    }
}

/// Latents with `kappa` dimensions removed from one end.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedRep {
    pub kappa: usize,
    pub side: Side,
    pub data: Matrix,
}

pub fn corrupt(z: &Matrix, kappa: usize, side: Side) -> Result<CorruptedRep> {
    let n = z.cols();
    if kappa >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot remove {kappa} of {n} dimensions"
        )));
    }
    let data = match side {
        Side::Leading => z.slice_cols(kappa, n)?,
        Side::Trailing => z.slice_cols(0, n - kappa)?,
    };
    Ok(CorruptedRep { kappa, side, data })
}

/// `count` evenly spaced removal counts from 0 to `n − 1` inclusive.
pub fn kappa_grid(n: usize, count: usize) -> Vec<usize> {
    if n <= 1 || count <= 1 {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..count)
        .map(|i| ((i as f64) * (n - 1) as f64 / (count - 1) as f64).round() as usize)
        .collect();
    out.dedup();
    out
}

/// Relative eigenvalue gap below which principal axes count as tied.
pub const POST_PCA_TIE: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct PostPca {
    /// Columns are principal axes of the centred training latents.
    pub v_post: Matrix,
    pub train: Matrix,
    pub test: Matrix,
    /// `‖ |V_post| − I ‖_F`, zero when the latents are already axis-aligned
    /// and variance-sorted.
    pub diagonal_diagnostic: f64,
    /// Some adjacent variances are within [`POST_PCA_TIE`] of each other,
    /// so the fitted axes are not well determined.
    pub degenerate: bool,
    pub rank_deficient: bool,
}

/// Centres by the training mean and rotates both splits onto the principal
/// axes of the training latents.
pub fn post_pca(train: &Matrix, test: &Matrix) -> Result<PostPca> {
    let n = train.cols();
    if test.cols() != n {
        return Err(Error::Shape(format!(
            "train has {n} dims, test has {}",
            test.cols()
        )));
    }
    if train.rows() < n {
        return Err(Error::InsufficientBatch(format!(
            "post-hoc pca needs at least {n} training rows"
        )));
    }
    let mean = train.column_means();
    let centre = |m: &Matrix| {
        let mut c = m.clone();
        for r in 0..c.rows() {
            c.row_mut(r).iter_mut().zip(&mean).for_each(|(v, mu)| *v -= mu);
        }
        c
    };
    let (ct, cs) = (centre(train), centre(test));
    let svd = svd_full(&ct)?;
    let v_post = canonicalize_rotation(&svd.v(), None)?;
    let var: Vec<f64> = svd.sigma.iter().map(|s| s * s).collect();
    let top = var.first().copied().unwrap_or(0.0);
    let rank_deficient = var.iter().any(|v| *v <= 1e-12 * top.max(f64::MIN_POSITIVE));
    let degenerate = var
        .windows(2)
        .any(|w| (w[0] - w[1]) <= POST_PCA_TIE * w[0]);
    let abs = v_post.map(f64::abs);
    let diagonal_diagnostic = abs.sub(&Matrix::identity(n))?.frobenius_norm();
    Ok(PostPca {
        train: ct.matmul(&v_post)?,
        test: cs.matmul(&v_post)?,
        v_post,
        diagonal_diagnostic,
        degenerate,
        rank_deficient,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationDistances {
    pub distances: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl RotationDistances {
    /// Counts over `bins` equal-width bins spanning `[0, upper]`.
    pub fn histogram(&self, bins: usize, upper: f64) -> Vec<usize> {
        let bins = bins.max(1);
        let mut h = vec![0; bins];
        for d in &self.distances {
            let k = ((d / upper) * bins as f64).floor() as usize;
            h[k.min(bins - 1)] += 1;
        }
        h
    }
}

/// `‖R − V⁽ᵐ⁾‖_F` for every `V⁽ᵐ⁾`.
pub fn rotation_distance_histogram(vs: &[Matrix], reference: &Matrix) -> Result<RotationDistances> {
    if vs.is_empty() {
        return Err(Error::InvalidArgument("no rotations given".into()));
    }
    let distances = vs
        .iter()
        .map(|v| chordal_distance(reference, v))
        .collect::<Result<Vec<_>>>()?;
    let m = distances.len() as f64;
    let mean = distances.iter().sum::<f64>() / m;
    let std = (distances.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / m).sqrt();
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let max = distances.iter().copied().fold(0.0, f64::max);
    Ok(RotationDistances {
        distances,
        mean,
        std,
        min,
        max,
    })
}

/// Default interpolation block: an eighth of the dimensions, at least one.
pub fn default_block_size(n: usize) -> usize {
    (n / 8).max(1)
}

/// `steps` values of `λ` from 0 to 1 inclusive.
pub fn lambda_grid(steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..steps).map(|i| i as f64 / (steps - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone)]
pub struct Interpolation {
    pub lambdas: Vec<f64>,
    /// One latent per `λ`.
    pub latents: Matrix,
    /// Generative images of the latents.
    pub outputs: Matrix,
}

impl Interpolation {
    /// Summed per-dimension variance of the outputs across the sweep.
    pub fn output_variance(&self) -> f64 {
        self.outputs.column_variances().iter().sum()
    }
}

/// Sets the leading (or trailing) `block_size` latent dimensions to
/// `−2λ + 2(1 − λ)` and the rest to zero, then maps each latent through the
/// generative direction.
pub fn interpolate_latents(
    model: &NeuralPcaModel,
    side: Side,
    block_size: usize,
    lambdas: &[f64],
) -> Result<Interpolation> {
    if !model.is_frozen() {
        return Err(Error::Usage("interpolation needs a frozen model".into()));
    }
    let n = model.dim();
    if block_size == 0 || block_size > n {
        return Err(Error::InvalidArgument(format!(
            "block size {block_size} outside 1..={n}"
        )));
    }
    let cols = match side {
        Side::Leading => 0..block_size,
        Side::Trailing => n - block_size..n,
    };
    let mut latents = Matrix::zeros(lambdas.len(), n);
    for (r, lam) in lambdas.iter().enumerate() {
        let value = -2.0 * lam + 2.0 * (1.0 - lam);
        for c in cols.clone() {
            latents[(r, c)] = value;
        }
    }
    let outputs = model.inverse(&latents)?;
    Ok(Interpolation {
        lambdas: lambdas.to_vec(),
        latents,
        outputs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimReport {
    pub nats_per_dim: f64,
    /// Present for image data only.
    pub bits_per_dim: Option<f64>,
}

/// Per-dimension NLL. For byte images dequantized to [0, 1) the bits per
/// dimension include the `log₂ 256` offset of the rescaling.
pub fn bits_per_dim(nll_nats: f64, n: usize, kind: DataKind) -> DimReport {
    let nats_per_dim = nll_nats / n as f64;
    let bits_per_dim = match kind {
        DataKind::Image { .. } => Some(nats_per_dim / std::f64::consts::LN_2 + 8.0),
        DataKind::Tabular => None,
    };
    DimReport {
        nats_per_dim,
        bits_per_dim,
    }
}
