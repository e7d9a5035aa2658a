//! Invertible layers and their composition into a normalizing flow.
//!
//! Every layer maps row vectors `x ↦ z` in the normalizing direction and
//! reports `log |det ∂z/∂x|` per sample. The generative direction is
//! [`FlowModel::inverse`].

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Mlp, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{householder_product, Matrix};

/// Bound on the coupling log-scale: `s = 5 tanh(raw / 5)`.
pub const SCALE_BOUND: f64 = 5.0;

/// `x2 ↦ x2 ⊙ exp(s(x1)) + t(x1)` where `x1` is the first `split` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineCoupling {
    pub split: usize,
    pub dim: usize,
    pub conditioner: Mlp,
}

impl AffineCoupling {
    /// Two tanh hidden layers of `width`; the output layer is zeroed so the
    /// coupling starts as the identity.
    pub fn new<R: Rng>(dim: usize, width: usize, rng: &mut R) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!(
                "affine coupling needs at least 2 dims, got {dim}"
            )));
        }
        let split = dim / 2;
        let out = 2 * (dim - split);
        Ok(AffineCoupling {
            split,
            dim,
            conditioner: Mlp::new(&[split, width, width, out], Activation::Tanh, true, rng),
        })
    }

    fn scale_shift(&self, x1: &Matrix) -> Result<(Matrix, Matrix)> {
        let k = self.dim - self.split;
        let h = self.conditioner.forward(x1)?;
        let s = h
            .slice_cols(0, k)?
            .map(|r| SCALE_BOUND * (r / SCALE_BOUND).tanh());
        Ok((s, h.slice_cols(k, 2 * k)?))
    }

    fn forward(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let x1 = x.slice_cols(0, self.split)?;
        let (s, t) = self.scale_shift(&x1)?;
        let mut z = x.clone();
        let mut logdet = vec![0.0; x.rows()];
        for r in 0..x.rows() {
            let (sr, tr) = (s.row(r), t.row(r));
            let row = &mut z.row_mut(r)[self.split..];
            for j in 0..row.len() {
                row[j] = row[j] * sr[j].exp() + tr[j];
            }
            logdet[r] = sr.iter().sum();
        }
        Ok((z, logdet))
    }

    fn inverse(&self, z: &Matrix) -> Result<Matrix> {
        let z1 = z.slice_cols(0, self.split)?;
        let (s, t) = self.scale_shift(&z1)?;
        let mut x = z.clone();
        for r in 0..z.rows() {
            let (sr, tr) = (s.row(r), t.row(r));
            let row = &mut x.row_mut(r)[self.split..];
            for j in 0..row.len() {
                row[j] = (row[j] - tr[j]) * (-sr[j]).exp();
            }
        }
        Ok(x)
    }

    fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let k = self.dim - self.split;
        let x1 = tape.slice_cols(x, 0, self.split)?;
        let x2 = tape.slice_cols(x, self.split, self.dim)?;
        let h = self
            .conditioner
            .forward_tape::<rand_chacha::ChaCha8Rng>(tape, vars, x1, None)?;
        let raw = tape.slice_cols(h, 0, k)?;
        let t = tape.slice_cols(h, k, 2 * k)?;
        let s = tape.scale(raw, 1.0 / SCALE_BOUND);
        let s = tape.tanh(s);
        let s = tape.scale(s, SCALE_BOUND);
        let e = tape.exp(s);
        let y2 = tape.mul(x2, e)?;
        let y2 = tape.add(y2, t)?;
        let z = tape.concat_cols(&[x1, y2])?;
        Ok((z, tape.row_sums(s)))
    }
}

/// `z = x ⊙ exp(log_scale) + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActNorm {
    pub log_scale: Matrix,
    pub bias: Matrix,
}

impl ActNorm {
    pub fn identity(dim: usize) -> Self {
        ActNorm {
            log_scale: Matrix::zeros(1, dim),
            bias: Matrix::zeros(1, dim),
        }
    }

    /// Scales must be non-zero; negative scales are stored by magnitude.
    pub fn new(scale: &[f64], bias: &[f64]) -> Result<Self> {
        if scale.len() != bias.len() {
            return Err(Error::Shape(format!(
                "actnorm scale {} vs bias {}",
                scale.len(),
                bias.len()
            )));
        }
        if scale.iter().any(|s| *s <= 0.0 || !s.is_finite()) {
            return Err(Error::InvalidArgument("actnorm scales must be positive".into()));
        }
        let ls: Vec<f64> = scale.iter().map(|s| s.ln()).collect();
        Ok(ActNorm {
            log_scale: Matrix::row_vector(&ls),
            bias: Matrix::row_vector(bias),
        })
    }

    fn forward(&self, x: &Matrix) -> (Matrix, Vec<f64>) {
        let s: Vec<f64> = self.log_scale.as_slice().iter().map(|l| l.exp()).collect();
        let b = self.bias.as_slice();
        let mut z = x.clone();
        for r in 0..z.rows() {
            for ((v, si), bi) in z.row_mut(r).iter_mut().zip(&s).zip(b) {
                *v = *v * si + bi;
            }
        }
        let ld = self.log_scale.sum();
        (z, vec![ld; x.rows()])
    }

    fn inverse(&self, z: &Matrix) -> Matrix {
        let s: Vec<f64> = self.log_scale.as_slice().iter().map(|l| (-l).exp()).collect();
        let b = self.bias.as_slice();
        let mut x = z.clone();
        for r in 0..x.rows() {
            for ((v, si), bi) in x.row_mut(r).iter_mut().zip(&s).zip(b) {
                *v = (*v - bi) * si;
            }
        }
        x
    }

    fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let (ls, b) = (vars[0], vars[1]);
        let s = tape.exp(ls);
        let z = tape.mul_row(x, s)?;
        let z = tape.add_row(z, b)?;
        Ok((z, broadcast_rows(tape, ls, x.rows())?))
    }
}

/// `B × 1` column whose every entry is the sum of `v`.
pub(crate) fn broadcast_rows(tape: &mut Tape, v: Var, rows: usize) -> Result<Var> {
    let total = tape.sum(v);
    let ones = tape.constant(Matrix::filled(rows, 1, 1.0));
    tape.matmul(ones, total)
}

/// Fixed column permutation: output column `j` is input column `perm[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    pub perm: Vec<usize>,
}

impl Permutation {
    /// Reverses the column order, so the coupling halves alternate.
    pub fn reverse(dim: usize) -> Self {
        Permutation {
            perm: (0..dim).rev().collect(),
        }
    }

    fn inverse_perm(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (j, &p) in self.perm.iter().enumerate() {
            inv[p] = j;
        }
        inv
    }
}

/// `z = x H₁ H₂ ⋯ Hₙ` with `Hᵢ = I − 2 vᵢᵀvᵢ / ‖vᵢ‖²`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholderRotation {
    pub vectors: Vec<Matrix>,
}

impl HouseholderRotation {
    /// `dim` standard-normal reflection vectors.
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let vectors = (0..dim)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
                Matrix::row_vector(&v)
            })
            .collect();
        HouseholderRotation { vectors }
    }

    pub fn rotation(&self) -> Result<Matrix> {
        let vs: Vec<Vec<f64>> = self.vectors.iter().map(|v| v.as_slice().to_vec()).collect();
        householder_product(&vs)
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.rotation()?)
    }

    fn inverse(&self, z: &Matrix) -> Result<Matrix> {
        z.matmul_nt(&self.rotation()?)
    }

    fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for v in vars {
            h = tape.householder(h, *v)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Coupling(AffineCoupling),
    ActNorm(ActNorm),
    Permutation(Permutation),
    Householder(HouseholderRotation),
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Coupling(_) => "affine-coupling",
            Layer::ActNorm(_) => "actnorm",
            Layer::Permutation(_) => "permutation",
            Layer::Householder(_) => "householder",
        }
    }

    pub fn params(&self) -> Vec<&Matrix> {
        match self {
            Layer::Coupling(c) => c.conditioner.params(),
            Layer::ActNorm(a) => vec![&a.log_scale, &a.bias],
            Layer::Permutation(_) => Vec::new(),
            Layer::Householder(h) => h.vectors.iter().collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Layer::Coupling(c) => c.conditioner.params_mut(),
            Layer::ActNorm(a) => vec![&mut a.log_scale, &mut a.bias],
            Layer::Permutation(_) => Vec::new(),
            Layer::Householder(h) => h.vectors.iter_mut().collect(),
        }
    }

    /// Returns `z` and the per-sample log-det, `None` when it is identically 0.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Option<Vec<f64>>)> {
        Ok(match self {
            Layer::Coupling(c) => {
                let (z, ld) = c.forward(x)?;
                (z, Some(ld))
            }
            Layer::ActNorm(a) => {
                let (z, ld) = a.forward(x);
                (z, Some(ld))
            }
            Layer::Permutation(p) => (x.select_cols(&p.perm), None),
            Layer::Householder(h) => (h.forward(x)?, None),
        })
    }

    pub fn inverse(&self, z: &Matrix) -> Result<Matrix> {
        match self {
            Layer::Coupling(c) => c.inverse(z),
            Layer::ActNorm(a) => Ok(a.inverse(z)),
            Layer::Permutation(p) => Ok(z.select_cols(&p.inverse_perm())),
            Layer::Householder(h) => h.inverse(z),
        }
    }

    /// `vars` are this layer's parameters in [`Layer::params`] order.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Option<Var>)> {
        match self {
            Layer::Coupling(c) => {
                let (z, ld) = c.forward_tape(tape, vars, x)?;
                Ok((z, Some(ld)))
            }
            Layer::ActNorm(a) => {
                let (z, ld) = a.forward_tape(tape, vars, x)?;
                Ok((z, Some(ld)))
            }
            Layer::Permutation(p) => Ok((tape.permute_cols(x, &p.perm)?, None)),
            Layer::Householder(h) => Ok((h.forward_tape(tape, vars, x)?, None)),
        }
    }
}

/// Composition of invertible layers applied in order in the normalizing
/// direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub dim: usize,
    pub layers: Vec<Layer>,
}

impl FlowModel {
    pub fn identity(dim: usize) -> Self {
        FlowModel {
            dim,
            layers: Vec::new(),
        }
    }

    /// `depth` blocks of (reverse permutation, affine coupling).
    pub fn coupling_stack<R: Rng>(dim: usize, depth: usize, width: usize, rng: &mut R) -> Result<Self> {
        let mut layers = Vec::with_capacity(2 * depth);
        for _ in 0..depth {
            layers.push(Layer::Permutation(Permutation::reverse(dim)));
            layers.push(Layer::Coupling(AffineCoupling::new(dim, width, rng)?));
        }
        Ok(FlowModel { dim, layers })
    }

    pub fn push(&mut self, layer: Layer) {
        self.layers.push(layer);
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.as_slice().len()).sum()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::Shape(format!(
                "flow of dim {} given {} columns",
                self.dim,
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        self.check_input(x)?;
        let mut z = x.clone();
        let mut logdet = vec![0.0; x.rows()];
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, ld) = layer.forward(&z)?;
            if !next.is_finite() {
                return Err(Error::NonFinite(format!("layer {i} ({})", layer.kind())));
            }
            if let Some(ld) = ld {
                logdet.iter_mut().zip(ld).for_each(|(a, b)| *a += b);
            }
            z = next;
        }
        Ok((z, logdet))
    }

    pub fn inverse(&self, z: &Matrix) -> Result<Matrix> {
        self.check_input(z)?;
        let mut x = z.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            x = layer.inverse(&x)?;
            if !x.is_finite() {
                return Err(Error::NonFinite(format!(
                    "inverse of layer {i} ({})",
                    layer.kind()
                )));
            }
        }
        Ok(x)
    }

    /// Forward on a tape with `vars` in [`FlowModel::params`] order. The
    /// log-det is `B × 1`, or `None` for a volume-preserving flow.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Option<Var>)> {
        let expected: usize = self.layers.iter().map(|l| l.params().len()).sum();
        if vars.len() != expected {
            return Err(Error::Shape(format!(
                "flow expects {expected} parameter vars, got {}",
                vars.len()
            )));
        }
        let mut h = x;
        let mut logdet: Option<Var> = None;
        let mut offset = 0;
        for layer in &self.layers {
            let k = layer.params().len();
            let (next, ld) = layer.forward_tape(tape, &vars[offset..offset + k], h)?;
            offset += k;
            h = next;
            if let Some(ld) = ld {
                logdet = Some(match logdet {
                    Some(acc) => tape.add(acc, ld)?,
                    None => ld,
                });
            }
        }
        Ok((h, logdet))
    }
}
