//! Deterministic weight initialization.
//!
//! Embeddings and linear weights use truncated normal (std 0.02); conv
//! kernels use Kaiming-uniform over fan-in; biases and norm offsets start
//! at zero, norm gains at one. Every tensor draws from the caller's RNG in
//! construction order, so a seed fixes the full parameter vector.

use crate::nn::tensor::Tensor;
use crate::rng::Rng;

pub fn trunc_normal(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Tensor {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.trunc_normal(std) as f32).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Kaiming-uniform with bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.uniform(-bound, bound) as f32).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

/// Conv kernel (Cout, Cin, kh, kw); fan_in = Cin * kh * kw.
pub fn conv_kernel(cout: usize, cin: usize, kh: usize, kw: usize, rng: &mut Rng) -> Tensor {
    kaiming_uniform(vec![cout, cin, kh, kw], cin * kh * kw, rng)
}

/// Transposed-conv kernel (Cin, Cout, kh, kw); fan_in = Cin * kh * kw.
pub fn conv_transpose_kernel(cin: usize, cout: usize, kh: usize, kw: usize, rng: &mut Rng) -> Tensor {
    kaiming_uniform(vec![cin, cout, kh, kw], cin * kh * kw, rng)
}

pub fn linear_weight(din: usize, dout: usize, rng: &mut Rng) -> Tensor {
    trunc_normal(vec![din, dout], 0.02, rng)
}

pub fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}

pub fn ones(shape: Vec<usize>) -> Tensor {
    Tensor::full(shape, 1.0)
}
