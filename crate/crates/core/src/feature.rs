use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// A fixed map from an input space to key space.
pub trait FeatureMap: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn map(&self, input: &DVector<f64>) -> Result<DVector<f64>>;
}

/// `x -> tanh(A x + b)`, the smooth nonlinearity used between editable layers.
#[derive(Debug, Clone, PartialEq)]
pub struct TanhMap {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl TanhMap {
    pub fn new(weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::dim("tanh map bias", weight.nrows(), bias.len()));
        }
        Ok(Self { weight, bias })
    }

    /// Gaussian weights with variance `gain^2 / input_dim` and gaussian bias
    /// with standard deviation `bias_scale`.
    pub fn random(rng: &mut Rng, input_dim: usize, output_dim: usize, gain: f64, bias_scale: f64) -> Self {
        let weight = rng::gaussian_matrix(rng, output_dim, input_dim, gain / (input_dim as f64).sqrt());
        let bias = rng::gaussian_vector(rng, output_dim, bias_scale);
        Self { weight, bias }
    }

    /// Returns the activation and its derivative `1 - tanh^2`.
    pub fn forward_with_slope(&self, input: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let act = (&self.weight * input + &self.bias).map(f64::tanh);
        let slope = act.map(|a| 1.0 - a * a);
        (act, slope)
    }
}

impl FeatureMap for TanhMap {
    fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    fn map(&self, input: &DVector<f64>) -> Result<DVector<f64>> {
        if input.len() != self.input_dim() {
            return Err(Error::dim("feature map input", self.input_dim(), input.len()));
        }
        Ok((&self.weight * input + &self.bias).map(f64::tanh))
    }
}
