use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    fn apply_tape(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Affine map `x W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Dense {
            weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Matrix::zeros(fan_in, fan_out),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        let b = self.bias.as_slice();
        for r in 0..y.rows() {
            y.row_mut(r).iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
        }
        Ok(y)
    }
}

/// Fully connected network; the activation follows every layer but the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes = [in, hidden…, out]`. With `zero_last` the output layer starts
    /// at zero, so the network initially outputs zeros.
    pub fn new<R: Rng>(sizes: &[usize], activation: Activation, zero_last: bool, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output sizes");
        let k = sizes.len() - 1;
        let layers = (0..k)
            .map(|i| {
                if zero_last && i + 1 == k {
                    Dense::zeros(sizes[i], sizes[i + 1])
                } else {
                    Dense::new(sizes[i], sizes[i + 1], rng)
                }
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.as_slice().len())
            .sum()
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.map(|v| self.activation.apply(v));
            }
        }
        Ok(h)
    }

    /// Forward on a tape using `vars` as the parameters (in [`Mlp::params`]
    /// order). With `dropout = Some((p, rng))`, hidden units are zeroed with
    /// probability `p` and the survivors scaled by `1/(1-p)`.
    pub fn forward_tape<R: Rng>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<Var> {
        if vars.len() != 2 * self.layers.len() {
            return Err(Error::Shape(format!(
                "mlp with {} layers got {} parameter vars",
                self.layers.len(),
                vars.len()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for i in 0..self.layers.len() {
            h = tape.matmul(h, vars[2 * i])?;
            h = tape.add_row(h, vars[2 * i + 1])?;
            if i < last {
                h = self.activation.apply_tape(tape, h);
                if let Some((p, rng)) = dropout.as_mut() {
                    if *p > 0.0 {
                        let keep = 1.0 - *p;
                        let (r, c) = h.shape();
                        let mask: Vec<f64> = (0..r * c)
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let m = tape.constant(Matrix::from_vec(r, c, mask)?);
                        h = tape.mul(h, m)?;
                    }
                }
            }
        }
        Ok(h)
    }
}

/// Registers every matrix as a trainable leaf, preserving order.
pub fn register_params(tape: &mut Tape, params: &[&Matrix]) -> Vec<Var> {
    params.iter().map(|p| tape.param((*p).clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_numeric_forward_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(&[3, 8, 8, 2], Activation::Tanh, false, &mut rng);
        let x = Matrix::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let mut tape = Tape::new();
        let vars = register_params(&mut tape, &net.params());
        let xv = tape.constant(x.clone());
        let y = net
            .forward_tape::<ChaCha8Rng>(&mut tape, &vars, xv, None)
            .unwrap();
        let diff = tape.value(y).sub(&net.forward(&x).unwrap()).unwrap();
        assert!(diff.max_abs() < 1e-14);
    }

    #[test]
    fn zero_last_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[2, 5, 3], Activation::Relu, true, &mut rng);
        let y = net.forward(&Matrix::filled(3, 2, 0.7)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }
}
