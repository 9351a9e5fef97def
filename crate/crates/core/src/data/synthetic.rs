//! A smooth, deterministic contrast-inversion task standing in for paired
//! MRI modalities.

use super::{SlicePair, VolumeRecord};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// `[1, 2, 1]/4` along both axes of a `[.., X, Y]` tensor, replicating
/// edge pixels.
pub fn smooth_replicate(img: &Tensor<f32>) -> Tensor<f32> {
    let nd = img.ndim();
    let (x, y) = (img.dim(nd - 2), img.dim(nd - 1));
    let mut out = img.clone();
    for plane in out.data_mut().chunks_mut(x * y) {
        let src = plane.to_vec();
        let mut tmp = vec![0f32; x * y];
        for i in 0..x {
            for j in 0..y {
                let l = src[i * y + j.saturating_sub(1)];
                let r = src[i * y + (j + 1).min(y - 1)];
                tmp[i * y + j] = 0.25 * l + 0.5 * src[i * y + j] + 0.25 * r;
            }
        }
        for i in 0..x {
            let (u, d) = (i.saturating_sub(1), (i + 1).min(x - 1));
            for j in 0..y {
                plane[i * y + j] = 0.25 * tmp[u * y + j] + 0.5 * tmp[i * y + j] + 0.25 * tmp[d * y + j];
            }
        }
    }
    out
}

/// The fixed source→target operator: `clamp(1 − smooth(source), 0, 1)`.
pub fn synthetic_target(source: &Tensor<f32>) -> Tensor<f32> {
    smooth_replicate(source).map(|v| (1.0 - v).clamp(0.0, 1.0))
}

fn blobs(rng: &mut Rng, x: usize, y: usize) -> Tensor<f32> {
    let count = 3 + rng.below(6);
    let mut img = vec![0f64; x * y];
    for _ in 0..count {
        let cx = rng.uniform_in(0.15, 0.85) * x as f64;
        let cy = rng.uniform_in(0.15, 0.85) * y as f64;
        let sa = rng.uniform_in(0.05, 0.2) * x as f64;
        let sb = rng.uniform_in(0.05, 0.2) * y as f64;
        let theta = rng.uniform_in(0.0, std::f64::consts::PI);
        let amp = rng.uniform_in(0.4, 1.0);
        let (c, s) = (theta.cos(), theta.sin());
        for i in 0..x {
            for j in 0..y {
                let (dx, dy) = (i as f64 + 0.5 - cx, j as f64 + 0.5 - cy);
                let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
                img[i * y + j] += amp * (-0.5 * (u * u / (sa * sa) + v * v / (sb * sb))).exp();
            }
        }
    }
    let max = img.iter().copied().fold(0.0, f64::max);
    Tensor::from_vec(&[1, x, y], img.iter().map(|v| (v / max) as f32).collect()).unwrap()
}

/// Source: 3–8 random anisotropic Gaussian blobs scaled to peak 1.
/// Target: [`synthetic_target`] of the source.
pub fn gen_synthetic_pair(rng: &mut Rng, x: usize, y: usize) -> Result<SlicePair> {
    if x == 0 || y == 0 || x % 16 != 0 || y % 16 != 0 {
        return Err(Error::Config(format!(
            "synthetic extents must be positive multiples of 16, got {x}×{y}"
        )));
    }
    let source = blobs(rng, x, y);
    let target = synthetic_target(&source);
    Ok(SlicePair {
        source,
        target,
        volume_id: String::new(),
        z: 0,
    })
}

/// `z` independent pairs stacked into `[X, Y, Z]` source and target volumes.
pub fn gen_synthetic_volume(rng: &mut Rng, x: usize, y: usize, z: usize) -> Result<(VolumeRecord, VolumeRecord)> {
    let pairs = (0..z)
        .map(|_| gen_synthetic_pair(rng, x, y))
        .collect::<Result<Vec<_>>>()?;
    let stack = |f: fn(&SlicePair) -> &Tensor<f32>| {
        let slices: Vec<Tensor<f32>> = pairs.iter().map(|p| f(p).clone()).collect();
        super::stack_slices(&slices)
    };
    Ok((
        VolumeRecord::new("source", stack(|p| &p.source)?)?,
        VolumeRecord::new("target", stack(|p| &p.target)?)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_are_seeded_and_bounded() {
        let a = gen_synthetic_pair(&mut Rng::new(4), 32, 48).unwrap();
        let b = gen_synthetic_pair(&mut Rng::new(4), 32, 48).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.source.shape(), &[1, 32, 48]);
        for t in [&a.source, &a.target] {
            assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(gen_synthetic_pair(&mut Rng::new(0), 30, 32).is_err());
    }

    #[test]
    fn brightest_source_is_darkest_target() {
        for seed in 0..20 {
            let p = gen_synthetic_pair(&mut Rng::new(seed), 64, 64).unwrap();
            let (imax, _) = p
                .source
                .data()
                .iter()
                .enumerate()
                .fold((0, f32::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
            let mut sorted = p.target.data().to_vec();
            sorted.sort_by(f32::total_cmp);
            // within the darkest 2% of target pixels
            let bound = sorted[sorted.len() / 50];
            assert!(p.target.data()[imax] <= bound, "seed {seed}");
        }
    }

    #[test]
    fn target_mean_mirrors_source_mean() {
        for seed in 0..100 {
            let p = gen_synthetic_pair(&mut Rng::new(seed), 64, 64).unwrap();
            let (ms, mt) = (p.source.mean() as f64, p.target.mean() as f64);
            assert!((mt - (1.0 - ms)).abs() < 0.02, "seed {seed}: {ms} {mt}");
        }
    }

    #[test]
    fn target_is_a_function_of_source() {
        let p = gen_synthetic_pair(&mut Rng::new(8), 48, 32).unwrap();
        assert_eq!(synthetic_target(&p.source), p.target);
    }

    #[test]
    fn smoothing_preserves_constants() {
        let c = Tensor::<f32>::full(&[1, 5, 7], 0.3);
        assert!(crate::tensor::max_abs_diff(&smooth_replicate(&c), &c) < 1e-7);
    }
}
