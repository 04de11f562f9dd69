//! Small building blocks shared by the field, encoder and discriminators.

use monoview_autodiff::{conv2d, lit, Bound, Scalar, Tensor, Var};
use rand::Rng;

/// He-uniform weight `[input, output]` and zero bias.
pub fn init_linear<T: Scalar, R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> (Tensor<T>, Tensor<T>) {
    let bound = (6.0 / input as f64).sqrt();
    let w = (0..input * output).map(|_| lit(rng.random_range(-bound..bound))).collect();
    (Tensor::from_parts([input, output], w), Tensor::zeros([output]))
}

/// He-uniform kernel `[out, in, k, k]` and zero bias.
pub fn init_conv<T: Scalar, R: Rng + ?Sized>(input: usize, output: usize, kernel: usize, rng: &mut R) -> (Tensor<T>, Tensor<T>) {
    let fan_in = input * kernel * kernel;
    let bound = (6.0 / fan_in as f64).sqrt();
    let w = (0..output * fan_in).map(|_| lit(rng.random_range(-bound..bound))).collect();
    (Tensor::from_parts([output, input, kernel, kernel], w), Tensor::zeros([output]))
}

pub fn linear<'g, T: Scalar>(x: Var<'g, T>, p: &Bound<'g, T>, name: &str) -> Var<'g, T> {
    x.matmul(p.get(&format!("{name}.weight"))).add_row(p.get(&format!("{name}.bias")))
}

pub fn conv<'g, T: Scalar>(x: Var<'g, T>, p: &Bound<'g, T>, name: &str, stride: usize, padding: usize) -> Var<'g, T> {
    conv2d(x, p.get(&format!("{name}.weight")), p.get(&format!("{name}.bias")), stride, padding)
}
