//! Gaussian base densities for the latent space, the per-dimension standard
//! deviation schedule, and a numerical check of the hierarchical lower bound
//! that justifies a fixed non-isotropic base.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaseKind {
    /// Isotropic Gaussian, all standard deviations 1.
    Isotropic,
    /// Non-isotropic Gaussian with descending standard deviations.
    NonIsotropic,
}

/// Zero-mean diagonal Gaussian `N(0, diag(σ₁², …, σₙ²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseDensity {
    kind: BaseKind,
    sigmas: Vec<f64>,
}

impl BaseDensity {
    pub fn isotropic(n: usize) -> Self {
        BaseDensity {
            kind: BaseKind::Isotropic,
            sigmas: vec![1.0; n],
        }
    }

    /// Requires `σ₁ ≥ σ₂ ≥ … ≥ σₙ > 0`.
    pub fn non_isotropic(sigmas: Vec<f64>) -> Result<Self> {
        if sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidArgument(
                "standard deviations must be finite and positive".into(),
            ));
        }
        if sigmas.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument(
                "standard deviations must be non-increasing".into(),
            ));
        }
        Ok(BaseDensity {
            kind: BaseKind::NonIsotropic,
            sigmas,
        })
    }

    pub fn from_schedule(n: usize, sigma_max: f64, sigma_min: f64) -> Result<Self> {
        Self::non_isotropic(sigma_schedule(n, sigma_max, sigma_min)?)
    }

    pub fn kind(&self) -> BaseKind {
        self.kind
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn dim(&self) -> usize {
        self.sigmas.len()
    }

    fn log_norm_const(&self) -> f64 {
        -self.sigmas.iter().map(|s| s.ln()).sum::<f64>() - 0.5 * self.dim() as f64 * LN_2PI
    }

    /// Per-sample `−½ Σ zᵢ²/σᵢ² − Σ log σᵢ − (n/2) log 2π`.
    pub fn log_prob(&self, z: &Matrix) -> Result<Vec<f64>> {
        if z.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "base density of dim {} given {} columns",
                self.dim(),
                z.cols()
            )));
        }
        let c = self.log_norm_const();
        let inv: Vec<f64> = self.sigmas.iter().map(|s| 1.0 / (s * s)).collect();
        Ok((0..z.rows())
            .map(|r| {
                let q: f64 = z.row(r).iter().zip(&inv).map(|(v, w)| v * v * w).sum();
                -0.5 * q + c
            })
            .collect())
    }

    /// Per-sample log density on a tape, `B × 1`.
    pub fn log_prob_tape(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        if z.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "base density of dim {} given {} columns",
                self.dim(),
                z.cols()
            )));
        }
        let w: Vec<f64> = self.sigmas.iter().map(|s| -0.5 / (s * s)).collect();
        let w = tape.constant(Matrix::row_vector(&w));
        let sq = tape.square(z);
        let weighted = tape.mul_row(sq, w)?;
        let quad = tape.row_sums(weighted);
        Ok(tape.add_scalar(quad, self.log_norm_const()))
    }

    /// `count` i.i.d. draws.
    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Matrix {
        let n = self.dim();
        let mut out = Matrix::zeros(count, n);
        for r in 0..count {
            for (v, s) in out.row_mut(r).iter_mut().zip(&self.sigmas) {
                let e: f64 = StandardNormal.sample(rng);
                *v = s * e;
            }
        }
        out
    }
}

/// `n` evenly spaced standard deviations from `sigma_max` down to `sigma_min`.
pub fn sigma_schedule(n: usize, sigma_max: f64, sigma_min: f64) -> Result<Vec<f64>> {
    if !(sigma_min > 0.0 && sigma_max >= sigma_min && sigma_max.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "sigma schedule needs sigma_max >= sigma_min > 0, got ({sigma_max}, {sigma_min})"
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("sigma schedule for zero dims".into()));
    }
    if n == 1 {
        return Ok(vec![sigma_max]);
    }
    let step = (sigma_max - sigma_min) / (n - 1) as f64;
    Ok((0..n)
        .map(|i| {
            if i == n - 1 {
                sigma_min
            } else {
                sigma_max - step * i as f64
            }
        })
        .collect())
}

/// Interval `[α, β]` of a uniform prior on a latent standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformScale {
    pub alpha: f64,
    pub beta: f64,
}

impl UniformScale {
    /// Solves `σ² = αβ`, `β − α = τ`.
    pub fn from_sigma(sigma: f64, tau: f64) -> Result<Self> {
        if !(sigma > 0.0 && tau > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "need sigma > 0 and tau > 0, got ({sigma}, {tau})"
            )));
        }
        let alpha = 0.5 * (-tau + (tau * tau + 4.0 * sigma * sigma).sqrt());
        let beta = alpha + tau;
        if !(alpha > 0.0 && beta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "no 0 < alpha < beta <= 1 for sigma {sigma}, tau {tau} (beta = {beta})"
            )));
        }
        Ok(UniformScale { alpha, beta })
    }

    /// `[β(1 − log β) − α(1 − log α)] / (β − α)`, which equals `−E[log σ̃]`.
    pub fn constant_term(&self) -> f64 {
        let f = |x: f64| x * (1.0 - x.ln());
        (f(self.beta) - f(self.alpha)) / (self.beta - self.alpha)
    }

    /// `log ∫_α^β (β−α)⁻¹ N(z; 0, s²) ds`, integrated in log space.
    pub fn log_marginal(&self, z: f64) -> f64 {
        let (a, b) = (self.alpha, self.beta);
        let width = b - a;
        let log_integrand = |s: f64| -0.5 * LN_2PI - s.ln() - z * z / (2.0 * s * s) - width.ln();
        let s_star = z.abs().clamp(a, b);
        let peak = log_integrand(s_star);
        let f = |s: f64| (log_integrand(s) - peak).exp();
        let integral = adaptive_simpson(&f, a, b, 1e-13, 50);
        peak + integral.ln()
    }
}

/// Outcome of [`verify_hierarchical_bound`] for one latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundCheck {
    /// `Σᵢ [−zᵢ²/(2αᵢβᵢ) − log √(2π) + cᵢ]`, the expected Gaussian log density
    /// under the uniform prior on each `σ̃ᵢ`.
    pub lhs: f64,
    /// `Σᵢ log ∫ U(σ̃ᵢ; αᵢ, βᵢ) N(zᵢ; 0, σ̃ᵢ²) dσ̃ᵢ`.
    pub rhs: f64,
    /// `C = Σᵢ cᵢ`.
    pub constant: f64,
    /// The fixed-variance objective term `−½ Σ zᵢ²/σᵢ² − Σ log σᵢ − (n/2) log 2π`.
    pub objective: f64,
    pub holds: bool,
}

/// Numerically checks that the fixed-σ objective, shifted by a constant, lower
/// bounds the log marginal of a hierarchical model with `σ̃ᵢ ~ U[αᵢ, βᵢ]`,
/// `σᵢ² = αᵢβᵢ`, `βᵢ − αᵢ = τ`.
pub fn verify_hierarchical_bound(sigmas: &[f64], z: &[f64], tau: f64) -> Result<BoundCheck> {
    if sigmas.len() != z.len() {
        return Err(Error::Shape(format!(
            "{} sigmas for a latent of length {}",
            sigmas.len(),
            z.len()
        )));
    }
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let mut constant = 0.0;
    let mut objective = 0.0;
    for (&s, &zi) in sigmas.iter().zip(z) {
        let u = UniformScale::from_sigma(s, tau)?;
        let c = u.constant_term();
        lhs += -zi * zi / (2.0 * u.alpha * u.beta) - 0.5 * LN_2PI + c;
        rhs += u.log_marginal(zi);
        constant += c;
        objective += -zi * zi / (2.0 * s * s) - s.ln() - 0.5 * LN_2PI;
    }
    Ok(BoundCheck {
        lhs,
        rhs,
        constant,
        objective,
        holds: lhs <= rhs + 1e-9 && constant > 0.0,
    })
}

fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fb, fm) = (f(a), f(b), f(m));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}
