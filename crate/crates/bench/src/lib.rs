//! Input fixtures shared by the benchmarks.

use ptnet_core::{Rng, Tensor};

/// Query, key and value rows drawn from `N(0, 1/d_k)`.
pub fn qkv(l: usize, dk: usize, seed: u64) -> [Tensor<f32>; 3] {
    let mut rng = Rng::new(seed);
    let std = (1.0 / dk as f64).sqrt();
    [(); 3].map(|_| Tensor::randn(&[l, dk], std, &mut rng))
}

/// Uniform `[0, 1)` image batch `[n, c, h, w]`.
pub fn image(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    Tensor::rand_uniform(&[n, c, h, w], 0.0, 1.0, &mut Rng::new(seed))
}
