//! Benchmark-only crate; see `benches/kernels.rs`.

use facade_core::tensor::Tensor;

/// Deterministic pseudo-random tensor with values in `[-1, 1)`.
pub fn filled(shape: &[usize], seed: u64) -> Tensor {
    let mut state = seed.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape, data)
}
