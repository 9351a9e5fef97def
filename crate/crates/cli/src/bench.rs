//! Exact against FAVOR+ attention timing.

use std::time::Instant;

use ptnet_core::attention::{attention_exact, attention_favor, FavorFeatures};
use ptnet_core::tensor::rel_l2_error;
use ptnet_core::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub l: usize,
    pub dk: usize,
    pub m: usize,
    /// Median wall time in milliseconds.
    pub exact_ms: f64,
    pub favor_ms: f64,
    /// Relative L2 error of FAVOR+ against exact attention.
    pub rel_error: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_ms(repeats: usize, mut f: impl FnMut() -> Result<Tensor<f32>>) -> Result<(f64, Tensor<f32>)> {
    let mut times = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let t = Instant::now();
        let out = f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
        last = Some(out);
    }
    Ok((median(times), last.expect("at least one repeat")))
}

/// Single-head attention on `N(0, 1/d_k)` inputs of each length, f32.
pub fn bench_attention(lengths: &[usize], dk: usize, m: usize, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if lengths.iter().any(|&l| l < 2) || dk == 0 || m == 0 || repeats == 0 {
        return Err(Error::Config(format!(
            "bench needs lengths ≥ 2 and positive d_k, m and repeats; got {lengths:?}, {dk}, {m}, {repeats}"
        )));
    }
    let mut rng = Rng::new(seed);
    let features = FavorFeatures::fixed(dk, m, &mut rng);
    let std = (1.0 / dk as f64).sqrt();
    lengths
        .iter()
        .map(|&l| {
            let q = Tensor::<f32>::randn(&[l, dk], std, &mut rng);
            let k = Tensor::<f32>::randn(&[l, dk], std, &mut rng);
            let v = Tensor::<f32>::randn(&[l, dk], std, &mut rng);
            let (exact_ms, exact) = time_ms(repeats, || attention_exact(&q, &k, &v))?;
            let (favor_ms, approx) = time_ms(repeats, || attention_favor(&q, &k, &v, &features))?;
            Ok(BenchRow {
                l,
                dk,
                m,
                exact_ms,
                favor_ms,
                rel_error: rel_l2_error(&approx, &exact),
            })
        })
        .collect()
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("L,d_k,m,exact_ms,favor_ms,rel_error\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.4},{:.4},{:.6}\n",
            r.l, r.dk, r.m, r.exact_ms, r.favor_ms, r.rel_error
        ));
    }
    s
}
