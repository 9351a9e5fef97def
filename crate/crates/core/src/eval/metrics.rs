use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Stabilizing constants of the three SSIM factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for SsimConstants {
    /// `k1 = 0.01`, `k2 = 0.03`, `C3 = C2/2` at dynamic range 1.
    fn default() -> Self {
        let c2 = 0.03f64 * 0.03;
        Self {
            c1: 0.01 * 0.01,
            c2,
            c3: c2 / 2.0,
        }
    }
}

/// Luminance, contrast and structure factors; SSIM is their product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimFactors {
    pub luminance: f64,
    pub contrast: f64,
    pub structure: f64,
}

impl SsimFactors {
    pub fn value(&self) -> f64 {
        self.luminance * self.contrast * self.structure
    }
}

fn check<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, what: &str) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shapes(what, x.shape(), y.shape()));
    }
    if x.is_empty() {
        return Err(Error::Dimension(format!("{what} of empty tensors")));
    }
    Ok(())
}

/// SSIM factors from whole-tensor statistics (population moments).
pub fn ssim_factors<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, k: SsimConstants) -> Result<SsimFactors> {
    check(x, y, "ssim")?;
    let n = x.len() as f64;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (a, b) in x.data().iter().zip(y.data()) {
        sx += a.as_f64();
        sy += b.as_f64();
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.data().iter().zip(y.data()) {
        let (da, db) = (a.as_f64() - mx, b.as_f64() - my);
        vx += da * da;
        vy += db * db;
        cxy += da * db;
    }
    let (vx, vy, cxy) = (vx / n, vy / n, cxy / n);
    // σxσy as √(σx²σy²) so that identical inputs give factors of exactly 1
    let sxy = (vx * vy).sqrt();
    Ok(SsimFactors {
        luminance: (2.0 * mx * my + k.c1) / (mx * mx + my * my + k.c1),
        contrast: (2.0 * sxy + k.c2) / (vx + vy + k.c2),
        structure: (cxy + k.c3) / (sxy + k.c3),
    })
}

/// Global SSIM over the whole volume with the default constants.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    Ok(ssim_factors(x, y, SsimConstants::default())?.value())
}

/// Normalized truncated Gaussian taps of length `size`.
fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let t: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter along every axis. Taps falling outside the
/// tensor are dropped and the remaining weights renormalized.
fn gaussian_filter(data: &[f64], shape: &[usize], taps: &[f64]) -> Vec<f64> {
    let mut cur = data.to_vec();
    let half = taps.len() as isize / 2;
    for axis in 0..shape.len() {
        let ext = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut next = vec![0.0; cur.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * ext * inner + i;
                for p in 0..ext {
                    let (mut acc, mut wsum) = (0.0, 0.0);
                    for (t, &w) in taps.iter().enumerate() {
                        let q = p as isize + t as isize - half;
                        if q >= 0 && (q as usize) < ext {
                            acc += w * cur[base + q as usize * inner];
                            wsum += w;
                        }
                    }
                    next[base + p * inner] = acc / wsum;
                }
            }
        }
        cur = next;
    }
    cur
}

/// Mean of the local SSIM map under an `size`-wide Gaussian window
/// (σ = 1.5) applied along every axis, e.g. 11³ for volumes.
///
/// This is the windowed convention, offered for cross-checking against the
/// global default; it uses the usual two-factor form with `C3 = C2/2`.
pub fn ssim_windowed<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, size: usize) -> Result<f64> {
    check(x, y, "ssim_windowed")?;
    if size == 0 || size % 2 == 0 {
        return Err(Error::Config(format!("window size must be odd, got {size}")));
    }
    let k = SsimConstants::default();
    let taps = gaussian_taps(size, 1.5);
    let xs: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let ys: Vec<f64> = y.data().iter().map(|v| v.as_f64()).collect();
    let f = |v: &[f64]| gaussian_filter(v, x.shape(), &taps);
    let mx = f(&xs);
    let my = f(&ys);
    let xx = f(&xs.iter().map(|v| v * v).collect::<Vec<_>>());
    let yy = f(&ys.iter().map(|v| v * v).collect::<Vec<_>>());
    let xy = f(&xs.iter().zip(&ys).map(|(a, b)| a * b).collect::<Vec<_>>());
    let mut total = 0.0;
    for i in 0..xs.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = (xx[i] - a * a).max(0.0);
        let vy = (yy[i] - b * b).max(0.0);
        let cv = xy[i] - a * b;
        total += ((2.0 * a * b + k.c1) * (2.0 * cv + k.c2)) / ((a * a + b * b + k.c1) * (vx + vy + k.c2));
    }
    Ok(total / xs.len() as f64)
}

/// `10·log10(1/MSE)` for unit dynamic range; `+∞` when the inputs agree.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check(x, y, "psnr")?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        / x.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// Elementwise `|truth − pred|`.
pub fn abs_error_map<T: Scalar>(truth: &Tensor<T>, pred: &Tensor<T>) -> Result<Tensor<T>> {
    check(truth, pred, "abs_error_map")?;
    truth.zip_map(pred, |a, b| (a - b).abs())
}
