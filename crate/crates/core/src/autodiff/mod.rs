//! Minimal reverse-mode autodiff used by the encoders and the localizer.

mod graph;
mod tensor;

pub use graph::{gelu, Gradients, Graph, Var};
pub use tensor::{log_softmax, matmul, matmul_t, softmax, softmax_in_place, Tensor};
#[allow(unused_imports)]
pub(crate) use tensor::gemm;

/// Central-difference gradient of `f` at `x`.
pub fn numerical_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
