//! Image ↔ token conversion and spatial resizing.
//!
//! Images are `[N, C, X, Y]`. Tokens are `[N, L, D]` with `L` ordered
//! row-major over the output grid and each token holding its `n×n`
//! neighbourhood channel-major (`c·n² + i·n + j`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{linear_rows, linear_rows_backward};
use crate::tensor::{gemm_acc_strided, gemm_into, MatRef, Scalar, Tensor};

/// Window `n`, stride `S` and zero padding `p` of an unfold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnfoldSpec {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl UnfoldSpec {
    /// Same-style padding `floor(n/2)`.
    pub fn new(window: usize, stride: usize) -> Self {
        Self {
            window,
            stride,
            padding: window / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window % 2 == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "unfold needs an odd window and positive stride, got {self:?}"
            )));
        }
        Ok(())
    }

    /// `floor((X + 2p − n)/S) + 1`.
    pub fn grid_extent(&self, x: usize) -> usize {
        (x + 2 * self.padding).saturating_sub(self.window) / self.stride + 1
    }

    pub fn token_dim(&self, channels: usize) -> usize {
        channels * self.window * self.window
    }
}

fn image_dims<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [n, c, h, w] if h > 0 && w > 0 => Ok((n, c, h, w)),
        _ => Err(Error::Dimension(format!("{what} expects N×C×X×Y, got {:?}", x.shape()))),
    }
}

/// Extract one zero-padded `n×n` window per strided grid location.
pub fn unfold<T: Scalar>(x: &Tensor<T>, spec: UnfoldSpec) -> Result<Tensor<T>> {
    spec.validate()?;
    let (n, c, h, w) = image_dims(x, "unfold")?;
    let (gh, gw) = (spec.grid_extent(h), spec.grid_extent(w));
    let k = spec.window;
    let dim = spec.token_dim(c);
    let mut out = Tensor::zeros(&[n, gh * gw, dim]);
    for s in 0..n {
        let img = x.slab(s);
        let toks = out.slab_mut(s);
        for_each_run(spec, h, w, gh, gw, |tok, ki, kj, r, col, len| {
            for ch in 0..c {
                let t0 = tok * dim + ch * k * k + ki * k + kj;
                let i0 = (ch * h + r) * w + col;
                toks[t0..t0 + len].copy_from_slice(&img[i0..i0 + len]);
            }
        });
    }
    Ok(out)
}

/// Visit every in-bounds run of consecutive taps in one window row.
///
/// The callback gets the token, the window row, the first in-bounds tap
/// column, the source pixel of that tap and the run length.
fn for_each_run(
    spec: UnfoldSpec,
    h: usize,
    w: usize,
    gh: usize,
    gw: usize,
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let (k, st, p) = (spec.window as isize, spec.stride, spec.padding as isize);
    for oi in 0..gh {
        for ki in 0..k {
            let r = (oi * st) as isize + ki - p;
            if r < 0 || r >= h as isize {
                continue;
            }
            for oj in 0..gw {
                let c0 = (oj * st) as isize - p;
                let lo = (-c0).max(0);
                let hi = (w as isize - c0).min(k);
                if lo < hi {
                    f(oi * gw + oj, ki as usize, lo as usize, r as usize, (c0 + lo) as usize, (hi - lo) as usize);
                }
            }
        }
    }
}

/// Adjoint of [`unfold`]: scatter-add every token entry back to its pixel.
pub fn unfold_backward<T: Scalar>(t: &Tensor<T>, spec: UnfoldSpec, channels: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (gh, gw) = (spec.grid_extent(h), spec.grid_extent(w));
    let dim = spec.token_dim(channels);
    if t.ndim() != 3 || t.dim(1) != gh * gw || t.dim(2) != dim {
        return Err(Error::Dimension(format!(
            "tokens {:?} do not come from unfolding {channels}×{h}×{w} with {spec:?}",
            t.shape()
        )));
    }
    let n = t.dim(0);
    let k = spec.window;
    let mut out = Tensor::zeros(&[n, channels, h, w]);
    for s in 0..n {
        let toks = t.slab(s);
        let img = out.slab_mut(s);
        for_each_run(spec, h, w, gh, gw, |tok, ki, kj, r, col, len| {
            for ch in 0..channels {
                let t0 = tok * dim + ch * k * k + ki * k + kj;
                let i0 = (ch * h + r) * w + col;
                img[i0..i0 + len]
                    .iter_mut()
                    .zip(&toks[t0..t0 + len])
                    .for_each(|(a, &b)| *a += b);
            }
        });
    }
    Ok(out)
}

/// Zero-padded copy of one sample: `C` planes of `(h+2p)×(w+2p)`.
fn pad_channel_major<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, p: usize, out: &mut [T]) {
    let wp = w + 2 * p;
    let plane = (h + 2 * p) * wp;
    for ch in 0..c {
        for r in 0..h {
            let d = ch * plane + (r + p) * wp + p;
            out[d..d + w].copy_from_slice(&img[(ch * h + r) * w..(ch * h + r + 1) * w]);
        }
    }
}

/// Zero-padded, pixel-major copy of one sample: `(h+2p)·(w+2p)` rows of
/// `C` channels.
fn pad_pixel_major<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, p: usize, out: &mut [T]) {
    let wp = w + 2 * p;
    for ch in 0..c {
        for r in 0..h {
            let row = &img[(ch * h + r) * w..(ch * h + r + 1) * w];
            let base = (r + p) * wp + p;
            for (col, &v) in row.iter().enumerate() {
                out[(base + col) * c + ch] = v;
            }
        }
    }
}

/// `unfold(x, spec) · w + b` without materializing the tokens.
///
/// `w` is `[C·n², cout]` in token order. With stride 1 every window tap is
/// a constant pixel offset into the zero-padded image, so the projection
/// is one GEMM per tap over padded rows. Other strides unfold and run one
/// GEMM.
pub fn patch_project<T: Scalar>(
    x: &Tensor<T>,
    spec: UnfoldSpec,
    w: &[T],
    b: Option<&[T]>,
    cout: usize,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let (n, c, h, wd) = image_dims(x, "patch_project")?;
    let dim = spec.token_dim(c);
    if w.len() != dim * cout || b.is_some_and(|b| b.len() != cout) {
        return Err(Error::Dimension(format!(
            "projection of {dim}-wide tokens to {cout} given {} weights",
            w.len()
        )));
    }
    let (gh, gw) = (spec.grid_extent(h), spec.grid_extent(wd));
    let l = gh * gw;
    if spec.stride != 1 {
        let tokens = unfold(x, spec)?;
        let mut out = vec![T::zero(); n * l * cout];
        linear_rows(tokens.data(), n * l, dim, w, b, cout, &mut out);
        return Tensor::from_vec(&[n, l, cout], out);
    }
    let (k, p) = (spec.window, spec.padding);
    let wp = wd + 2 * p;
    // Output pixels on the padded row pitch; columns past `wd` are junk.
    let nq = (h - 1) * wp + wd;
    let plane = (h + 2 * p) * wp;
    let mut xpad = vec![T::zero(); c * plane];
    let mut wide = vec![T::zero(); cout * nq];
    let mut out = Tensor::zeros(&[n, l, cout]);
    for s in 0..n {
        pad_channel_major(x.slab(s), c, h, wd, p, &mut xpad);
        for (o, row) in wide.chunks_mut(nq).enumerate() {
            row.fill(b.map_or(T::zero(), |b| b[o]));
        }
        for ki in 0..k {
            for kj in 0..k {
                let tap = MatRef::strided(&w[(ki * k + kj) * cout..], cout, c, 1, k * k * cout);
                let src = MatRef::strided(&xpad[ki * wp + kj..], c, nq, plane, 1);
                gemm_into(tap, src, &mut wide, true);
            }
        }
        let toks = out.slab_mut(s);
        for oi in 0..h {
            for oj in 0..wd {
                let t = &mut toks[(oi * wd + oj) * cout..(oi * wd + oj + 1) * cout];
                for (o, v) in t.iter_mut().enumerate() {
                    *v = wide[o * nq + oi * wp + oj];
                }
            }
        }
    }
    Ok(out)
}

/// Backward of [`patch_project`]: accumulates `dw` and `db`, and returns
/// the image gradient when `want_dx`.
#[allow(clippy::too_many_arguments)]
pub fn patch_project_backward<T: Scalar>(
    x: &Tensor<T>,
    spec: UnfoldSpec,
    w: &[T],
    cout: usize,
    dy: &[T],
    dw: &mut [T],
    db: Option<&mut [T]>,
    want_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let (n, c, h, wd) = image_dims(x, "patch_project_backward")?;
    let dim = spec.token_dim(c);
    let (gh, gw) = (spec.grid_extent(h), spec.grid_extent(wd));
    let l = gh * gw;
    if dy.len() != n * l * cout || w.len() != dim * cout || dw.len() != w.len() {
        return Err(Error::Dimension(format!(
            "patch projection gradient of {} values for {n}×{l}×{cout} tokens",
            dy.len()
        )));
    }
    if spec.stride != 1 {
        let tokens = unfold(x, spec)?;
        let dt = linear_rows_backward(tokens.data(), dy, n * l, dim, cout, w, dw, db, want_dx);
        if !want_dx {
            return Ok(None);
        }
        return Ok(Some(unfold_backward(&Tensor::from_vec(tokens.shape(), dt)?, spec, c, h, wd)?));
    }
    if let Some(db) = db {
        for row in dy.chunks(cout) {
            db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
        }
    }
    let (k, p) = (spec.window, spec.padding);
    let wp = wd + 2 * p;
    let nq = (h - 1) * wp + wd;
    let plane = (h + 2 * p) * wp;
    // The weight gradient packs best from pixel-major operands and the
    // input gradient from channel-major ones.
    let mut xpad = vec![T::zero(); c * plane];
    let mut dpad = vec![T::zero(); if want_dx { c * plane } else { 0 }];
    let mut dpix = vec![T::zero(); nq * cout];
    let mut dchan = vec![T::zero(); if want_dx { cout * nq } else { 0 }];
    let mut dx = want_dx.then(|| Tensor::zeros(&[n, c, h, wd]));
    for s in 0..n {
        pad_pixel_major(x.slab(s), c, h, wd, p, &mut xpad);
        let g = &dy[s * l * cout..(s + 1) * l * cout];
        for oi in 0..h {
            dpix[oi * wp * cout..(oi * wp + wd) * cout].copy_from_slice(&g[oi * wd * cout..(oi + 1) * wd * cout]);
        }
        let dpm = MatRef::new(&dpix, nq, cout);
        for ki in 0..k {
            for kj in 0..k {
                let src = MatRef::strided(&xpad[(ki * wp + kj) * c..], nq, c, c, 1);
                gemm_acc_strided(src.t(), dpm, &mut dw[(ki * k + kj) * cout..], k * k * cout, 1);
            }
        }
        let Some(dx) = dx.as_mut() else { continue };
        for (q, row) in dpix.chunks(cout).enumerate() {
            for (o, &v) in row.iter().enumerate() {
                dchan[o * nq + q] = v;
            }
        }
        let dcm = MatRef::new(&dchan, cout, nq);
        dpad.fill(T::zero());
        for ki in 0..k {
            for kj in 0..k {
                let wt = MatRef::strided(&w[(ki * k + kj) * cout..], c, cout, k * k * cout, 1);
                gemm_acc_strided(wt, dcm, &mut dpad[ki * wp + kj..], plane, 1);
            }
        }
        let d = dx.slab_mut(s);
        for ch in 0..c {
            for r in 0..h {
                let src = ch * plane + (r + p) * wp + p;
                d[(ch * h + r) * wd..(ch * h + r + 1) * wd].copy_from_slice(&dpad[src..src + wd]);
            }
        }
    }
    Ok(dx)
}

/// Sum overlapping token contributions and divide by per-pixel coverage.
///
/// Pixels no window covers (only possible when the stride exceeds the
/// window) come back as zero.
pub fn fold_overlap<T: Scalar>(t: &Tensor<T>, spec: UnfoldSpec, h: usize, w: usize) -> Result<Tensor<T>> {
    spec.validate()?;
    if t.ndim() != 3 || t.dim(2) % (spec.window * spec.window) != 0 {
        return Err(Error::Dimension(format!("fold_overlap on tokens {:?}", t.shape())));
    }
    let channels = t.dim(2) / (spec.window * spec.window);
    let mut sum = unfold_backward(t, spec, channels, h, w)?;
    let mut count = vec![0u32; h * w];
    let (gh, gw) = (spec.grid_extent(h), spec.grid_extent(w));
    for_each_run(spec, h, w, gh, gw, |_, _, _, r, col, len| {
        count[r * w + col..r * w + col + len].iter_mut().for_each(|c| *c += 1)
    });
    for plane in sum.data_mut().chunks_mut(h * w) {
        for (v, &c) in plane.iter_mut().zip(&count) {
            *v = if c == 0 { T::zero() } else { *v / T::of(c as f64) };
        }
    }
    Ok(sum)
}

/// `[N, L, C]` tokens to a `[N, C, gx, gy]` feature map.
pub fn tokens_to_grid<T: Scalar>(t: &Tensor<T>, gx: usize, gy: usize) -> Result<Tensor<T>> {
    if t.ndim() != 3 || t.dim(1) != gx * gy {
        return Err(Error::Dimension(format!(
            "{:?} tokens cannot fill a {gx}×{gy} grid",
            t.shape()
        )));
    }
    let (n, l, c) = (t.dim(0), t.dim(1), t.dim(2));
    let mut out = Tensor::zeros(&[n, c, gx, gy]);
    for s in 0..n {
        let src = t.slab(s);
        let dst = out.slab_mut(s);
        for tok in 0..l {
            for ch in 0..c {
                dst[ch * l + tok] = src[tok * c + ch];
            }
        }
    }
    Ok(out)
}

/// Inverse of [`tokens_to_grid`]: `[N, C, X, Y]` to `[N, X·Y, C]`.
pub fn grid_to_tokens<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = image_dims(x, "grid_to_tokens")?;
    let l = h * w;
    let mut out = Tensor::zeros(&[n, l, c]);
    for s in 0..n {
        let src = x.slab(s);
        let dst = out.slab_mut(s);
        for ch in 0..c {
            for tok in 0..l {
                dst[tok * c + ch] = src[ch * l + tok];
            }
        }
    }
    Ok(out)
}

/// Interpolation used for pyramid down/upsampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    #[default]
    Bilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Up2,
    Down2,
}

/// Per-output-index source taps `(i0, i1, w1)`; value = `(1−w1)·x[i0] + w1·x[i1]`.
fn taps(input: usize, output: usize, mode: Interp) -> Vec<(usize, usize, f64)> {
    let ratio = input as f64 / output as f64;
    (0..output)
        .map(|d| match mode {
            Interp::Nearest => {
                let i = (((d as f64 + 0.5) * ratio).floor() as usize).min(input - 1);
                (i, i, 0.0)
            }
            Interp::Bilinear if input == 1 => (0, 0, 0.0),
            Interp::Bilinear => {
                // half-pixel centres; the outermost half pixel is linearly
                // extrapolated so affine images are reproduced exactly
                let src = (d as f64 + 0.5) * ratio - 0.5;
                let i0 = (src.floor().max(0.0) as usize).min(input - 2);
                (i0, i0 + 1, src - i0 as f64)
            }
        })
        .collect()
}

/// Resize the two trailing axes to `oh × ow`.
pub fn resize_to<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize, mode: Interp) -> Result<Tensor<T>> {
    let (n, c, h, w) = image_dims(x, "resize")?;
    if oh == 0 || ow == 0 {
        return Err(Error::Dimension(format!("resize to {oh}×{ow}")));
    }
    let (th, tw) = (taps(h, oh, mode), taps(w, ow, mode));
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut rowbuf = vec![T::zero(); h * ow];
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for r in 0..h {
            for (j, &(a, b, wt)) in tw.iter().enumerate() {
                let wt = T::of(wt);
                rowbuf[r * ow + j] = src[r * w + a] * (T::one() - wt) + src[r * w + b] * wt;
            }
        }
        for (i, &(a, b, wt)) in th.iter().enumerate() {
            let wt = T::of(wt);
            for j in 0..ow {
                dst[i * ow + j] = rowbuf[a * ow + j] * (T::one() - wt) + rowbuf[b * ow + j] * wt;
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`resize_to`] from `oh × ow` back to `h × w`.
pub fn resize_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize, mode: Interp) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = image_dims(dy, "resize_backward")?;
    let (th, tw) = (taps(h, oh, mode), taps(w, ow, mode));
    let mut out = Tensor::zeros(&[n, c, h, w]);
    let mut rowbuf = vec![T::zero(); h * ow];
    for (src, dst) in dy.data().chunks(oh * ow).zip(out.data_mut().chunks_mut(h * w)) {
        rowbuf.iter_mut().for_each(|v| *v = T::zero());
        for (i, &(a, b, wt)) in th.iter().enumerate() {
            let wt = T::of(wt);
            for j in 0..ow {
                let g = src[i * ow + j];
                rowbuf[a * ow + j] += g * (T::one() - wt);
                rowbuf[b * ow + j] += g * wt;
            }
        }
        for r in 0..h {
            for (j, &(a, b, wt)) in tw.iter().enumerate() {
                let wt = T::of(wt);
                let g = rowbuf[r * ow + j];
                dst[r * w + a] += g * (T::one() - wt);
                dst[r * w + b] += g * wt;
            }
        }
    }
    Ok(out)
}

/// Half-pixel-centred bilinear resize by a factor of two.
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, factor: Factor) -> Result<Tensor<T>> {
    let (_, _, h, w) = image_dims(x, "resize_bilinear")?;
    match factor {
        Factor::Up2 => resize_to(x, 2 * h, 2 * w, Interp::Bilinear),
        Factor::Down2 => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Dimension(format!("cannot halve odd extents {h}×{w}")));
            }
            resize_to(x, h / 2, w / 2, Interp::Bilinear)
        }
    }
}
