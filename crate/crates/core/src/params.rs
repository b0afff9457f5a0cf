//! Parameter containers.
//!
//! Every container is generic over its leaf type so the same structure holds
//! concrete matrices (`Matrix`), tape handles (`Var`), gradients or optimizer
//! moments. `visit` walks leaves in a fixed order with stable names; that
//! order defines the flat parameter vector and the checkpoint layout.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::numerics::Matrix;

/// Row-vector affine map `y = x·W + b` with `W: in × out`, `b: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T = Matrix> {
    pub weight: T,
    pub bias: T,
}

impl Affine<Matrix> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    /// Weights uniform in ±1/√fan_in, zero bias.
    pub fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform_matrix(input, output, input, rng),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    /// Applies the map to every row of `x`.
    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(self.bias.as_slice()) {
                *v += b;
            }
        }
        y
    }
}

impl<T> Affine<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Affine<U> {
        Affine {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Self-normalizing network: each layer is an affine map followed by SELU.
#[derive(Clone, Debug, PartialEq)]
pub struct Snn<T = Matrix> {
    pub layers: Vec<Affine<T>>,
}

impl Snn<Matrix> {
    /// `depth` layers: `input → width → … → width`.
    pub fn init<R: Rng>(input: usize, width: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth)
            .map(|l| Affine::init(if l == 0 { input } else { width }, width, rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Affine::input_dim)
    }
}

impl<T> Snn<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> Snn<U> {
        Snn {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        for l in &mut self.layers {
            l.visit_mut(f);
        }
    }
}

/// Query/key/value projections, each `d × d`, applied as `X·W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights<T = Matrix> {
    pub query: T,
    pub key: T,
    pub value: T,
}

impl AttentionWeights<Matrix> {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        Self {
            query: uniform_matrix(d, d, d, rng),
            key: uniform_matrix(d, d, d, rng),
            value: uniform_matrix(d, d, d, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }
}

impl<T> AttentionWeights<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> AttentionWeights<U> {
        AttentionWeights {
            query: f(&self.query),
            key: f(&self.key),
            value: f(&self.value),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&format!("{prefix}.query"), &self.query);
        f(&format!("{prefix}.key"), &self.key);
        f(&format!("{prefix}.value"), &self.value);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.query);
        f(&mut self.key);
        f(&mut self.value);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T = Matrix> {
    pub gain: T,
    pub bias: T,
}

impl LayerNormParams<Matrix> {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }
}

impl<T> LayerNormParams<T> {
    pub fn map<U>(&self, f: &mut dyn FnMut(&T) -> U) -> LayerNormParams<U> {
        LayerNormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &T)) {
        f(&format!("{prefix}.gain"), &self.gain);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

pub(crate) fn uniform_matrix<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

pub(crate) fn normal_matrix<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}
