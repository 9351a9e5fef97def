//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero only on failures that are not known limitations.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ptnet_cli::bench_attention;
use ptnet_core::attention::{attention_exact, attention_favor, mha, FavorFeatures, MhaWeights};
use ptnet_core::data::{gen_synthetic_pair, SlicePair};
use ptnet_core::eval::{paired_ttest, psnr, ssim, validation_ssim};
use ptnet_core::model::{check_model_gradients, PtNet, PtNetConfig};
use ptnet_core::patching::{fold_overlap, unfold, UnfoldSpec};
use ptnet_core::tensor::gradcheck::GradCheckOptions;
use ptnet_core::tensor::rel_l2_error;
use ptnet_core::training::{train_with_validator, TrainPlan};
use ptnet_core::{Rng, Tensor};

struct Verdict {
    pass: bool,
    /// Failing only for a reason that cannot be satisfied by any
    /// implementation.
    known_limit: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict {
        pass,
        known_limit: false,
        detail,
    }
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let cfg = PtNetConfig::tiny();
    let r = check_model_gradients(&cfg, 0, (16, 16), &GradCheckOptions::default(), None).expect("gradcheck");
    let secs = t.elapsed().as_secs_f64();
    let coords: usize = r.params.iter().map(|q| q.checked).sum();
    verdict(
        r.passed() && r.max_rel_error() <= 1e-4 && secs <= 300.0,
        format!(
            "tiny PTNet f64 16x16, {} tensors / {coords} coordinates, max rel err {:.2e}, {secs:.1}s",
            r.params.len(),
            r.max_rel_error()
        ),
    )
}

/// Per-head softmax attention written as plain loops.
fn mha_oracle(x: &[f64], l: usize, d: usize, heads: usize, w: &[Vec<f64>; 4], bo: &[f64]) -> Vec<f64> {
    let proj = |m: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; l * d];
        for i in 0..l {
            for j in 0..d {
                for k in 0..d {
                    out[i * d + j] += x[i * d + k] * m[k * d + j];
                }
            }
        }
        out
    };
    let (q, k, v) = (proj(&w[0]), proj(&w[1]), proj(&w[2]));
    let dh = d / heads;
    let mut concat = vec![0.0; l * d];
    for h in 0..heads {
        for i in 0..l {
            let mut s = vec![0.0; l];
            for (j, sj) in s.iter_mut().enumerate() {
                for c in 0..dh {
                    *sj += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                }
                *sj /= (dh as f64).sqrt();
            }
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
            for (j, sj) in s.iter().enumerate() {
                let a = (sj - mx).exp() / z;
                for c in 0..dh {
                    concat[i * d + h * dh + c] += a * v[j * d + h * dh + c];
                }
            }
        }
    }
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        for j in 0..d {
            out[i * d + j] = bo[j] + (0..d).map(|k| concat[i * d + k] * w[3][k * d + j]).sum::<f64>();
        }
    }
    out
}

fn attention_oracle() -> Verdict {
    let mut rng = Rng::new(11);
    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let mut r = Rng::new(case);
        let l = 1 + (r.next_u64() % 8) as usize;
        let d = 1 + (r.next_u64() % 8) as usize;
        let divisors: Vec<usize> = (1..=d).filter(|h| d % h == 0).collect();
        let heads = divisors[(r.next_u64() % divisors.len() as u64) as usize];
        let x = Tensor::<f64>::randn(&[l, d], 1.0, &mut rng);
        let mats: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[d, d], 0.7, &mut rng)).collect();
        let bo = Tensor::<f64>::randn(&[d], 0.3, &mut rng);
        let w = MhaWeights {
            wq: mats[0].clone(),
            wk: mats[1].clone(),
            wv: mats[2].clone(),
            wo: mats[3].clone(),
            bo: Some(bo.clone()),
            heads,
        };
        let got = mha(&x, &w).expect("mha");
        let raw = [0, 1, 2, 3].map(|i| mats[i].data().to_vec());
        let want = mha_oracle(x.data(), l, d, heads, &raw, bo.data());
        for (a, b) in got.data().iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    verdict(worst <= 1e-6, format!("1000 cases with L,d <= 8, max abs diff {worst:.2e}"))
}

fn favor_approximation() -> Verdict {
    let (l, dk) = (64, 16);
    let ms = [16, 32, 64, 128, 256];
    let std = (1.0 / dk as f64).sqrt();
    let mut errs = vec![Vec::new(); ms.len()];
    for seed in 0..10u64 {
        let mut rng = Rng::new(1000 + seed);
        let q = Tensor::<f64>::randn(&[l, dk], std, &mut rng);
        let k = Tensor::<f64>::randn(&[l, dk], std, &mut rng);
        let v = Tensor::<f64>::randn(&[l, dk], std, &mut rng);
        let exact = attention_exact(&q, &k, &v).expect("exact");
        for (i, &m) in ms.iter().enumerate() {
            let f = FavorFeatures::fixed(dk, m, &mut Rng::new(seed * 7919 + m as u64));
            errs[i].push(rel_l2_error(&attention_favor(&q, &k, &v, &f).expect("favor"), &exact));
        }
    }
    let means: Vec<f64> = errs.iter().map(|e| e.iter().sum::<f64>() / e.len() as f64).collect();
    let mut last = errs[ms.len() - 1].clone();
    last.sort_by(f64::total_cmp);
    let median = 0.5 * (last[4] + last[5]);
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    let trend: Vec<String> = ms.iter().zip(&means).map(|(m, e)| format!("m={m}:{e:.4}")).collect();
    verdict(
        median <= 0.10 && monotone,
        format!("median at m=256 {median:.4}; seed means {}", trend.join(" ")),
    )
}

fn complexity() -> Verdict {
    let t = Instant::now();
    let rows = bench_attention(&[1024, 4096], 16, 32, 5, 0).expect("bench");
    let secs = t.elapsed().as_secs_f64();
    let exact = rows[1].exact_ms / rows[0].exact_ms;
    let favor = rows[1].favor_ms / rows[0].favor_ms;
    verdict(
        exact >= 8.0 && favor <= 6.0 && secs <= 120.0,
        format!(
            "L 1024->4096: exact {:.1}->{:.1} ms (x{exact:.1}), FAVOR+ m=32 {:.2}->{:.2} ms (x{favor:.1}), {secs:.0}s",
            rows[0].exact_ms, rows[1].exact_ms, rows[0].favor_ms, rows[1].favor_ms
        ),
    )
}

fn shapes() -> Verdict {
    let mut ok = true;
    let mut notes = Vec::new();
    for (name, cfg) in [("S", PtNetConfig::ptnet_s()), ("L", PtNetConfig::ptnet_l())] {
        let (net, p) = PtNet::new::<f32>(&cfg, 0).expect("build");
        for (h, w) in [(64, 64), (96, 80)] {
            let x = Tensor::<f32>::rand_uniform(&[1, 1, h, w], 0.0, 1.0, &mut Rng::new(3));
            let y = net.forward(&p, &x).expect("forward");
            let grid = net.deepest_grid(h, w);
            let good = y.shape() == [1, 1, h, w] && grid == (h / 16, w / 16) && y.is_finite();
            ok &= good;
            notes.push(format!("{name} {h}x{w}->{:?} grid {}x{}", &y.shape()[2..], grid.0, grid.1));
        }
    }
    verdict(ok, notes.join("; "))
}

fn pairs(rng: &mut Rng, n: usize, tag: &str) -> Vec<SlicePair> {
    (0..n)
        .map(|i| {
            let mut p = gen_synthetic_pair(rng, 64, 64).expect("pair");
            p.volume_id = format!("{tag}{i:03}");
            p
        })
        .collect()
}

fn convergence() -> Verdict {
    let cfg = PtNetConfig::ptnet_s_reduced();
    let mut rng = Rng::new(7);
    let train = pairs(&mut rng, 200, "tr");
    let val = pairs(&mut rng, 40, "va");
    let test = pairs(&mut rng, 40, "te");
    let plan = TrainPlan {
        epochs_fixed: 3,
        epochs_decay: 3,
        lr: 2e-4,
        batch_size: 4,
        seed: 0,
        ..TrainPlan::default()
    };
    let steps = plan.epochs() * plan.steps_per_epoch(train.len());
    let t = Instant::now();
    let out = train_with_validator(&cfg, &train, &plan, None, &mut |net, p| validation_ssim(net, p, &val, 8))
        .expect("train");
    let secs = t.elapsed().as_secs_f64();
    let scores: Vec<f64> = out.log.iter().map(|e| e.val_ssim).collect();
    let mut argmax = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[argmax] {
            argmax = i;
        }
    }
    let (bnet, bp) = out.best.clone().restore().expect("restore best");
    let replay = validation_ssim(&bnet, &bp, &val, 8).expect("val");
    let selected = out.best_epoch == argmax + 1 && replay == scores[argmax];
    let held_out = validation_ssim(&bnet, &bp, &test, 8).expect("test");
    let trace: Vec<String> = scores.iter().map(|s| format!("{s:.4}")).collect();
    verdict(
        held_out >= 0.90 && steps <= 2000 && secs <= 1800.0 && selected,
        format!(
            "{steps} steps in {secs:.0}s, val SSIM per epoch [{}], best epoch {} (argmax {}), held-out SSIM {held_out:.4}",
            trace.join(", "),
            out.best_epoch,
            argmax + 1
        ),
    )
}

/// Two-sided p of Student's t by Simpson integration of the density.
fn t_two_sided_oracle(t: f64, df: f64) -> f64 {
    let ln_c = ln_gamma_lanczos((df + 1.0) / 2.0) - ln_gamma_lanczos(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let pdf = |x: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + x * x / df).ln()).exp();
    let n = 200_000;
    let h = t.abs() / n as f64;
    let mut s = pdf(0.0) + pdf(t.abs());
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

fn ln_gamma_lanczos(x: f64) -> f64 {
    // g = 7, n = 9
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let x = x - 1.0;
    let t = x + 7.5;
    let s = C[0] + (1..9).map(|i| C[i] / (x + i as f64)).sum::<f64>();
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
}

fn metrics() -> Verdict {
    let x = Tensor::<f64>::rand_uniform(&[16, 12, 3], 0.0, 1.0, &mut Rng::new(5));
    let self_ssim = ssim(&x, &x).expect("ssim");
    let p1 = psnr(&x, &x.map(|v| v + 0.1)).expect("psnr");
    let p2 = psnr(&x, &x.map(|v| v + 0.01)).expect("psnr");
    let d = [0.5, 0.7, 0.3, 0.6, 0.4];
    let tt = paired_ttest(&d, &[0.0; 5]).expect("ttest");
    let oracle_p = t_two_sided_oracle(tt.t, tt.df as f64);
    let ok = self_ssim == 1.0
        && (p1 - 20.0).abs() <= 1e-9
        && (p2 - 40.0).abs() <= 1e-9
        && (tt.t - 7.0711).abs() <= 1e-3
        && (tt.p - 0.0021).abs() <= 1e-3
        && (tt.p - oracle_p).abs() <= 1e-6;
    verdict(
        ok,
        format!(
            "ssim(x,x)={self_ssim}, psnr {p1:.12}/{p2:.12} dB, t={:.4} df={} p={:.5} (oracle {oracle_p:.5})",
            tt.t, tt.df, tt.p
        ),
    )
}

fn ptnet(dir: &Path, args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_ptnet"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ptnet")
        .status
        .success()
}

fn identical(dir: &Path, a: &str, b: &str, files: &[&str]) -> bool {
    files
        .iter()
        .all(|f| std::fs::read(dir.join(a).join(f)).ok() == std::fs::read(dir.join(b).join(f)).ok())
}

fn round_trip_and_determinism() -> Verdict {
    let x = Tensor::<f64>::randn(&[2, 3, 16, 14], 1.0, &mut Rng::new(9));
    let mut failed = Vec::new();
    let mut cases = Vec::new();
    for n in [1, 3, 7] {
        for s in [1, 2] {
            let spec = UnfoldSpec::new(n, s);
            let back = fold_overlap(&unfold(&x, spec).expect("unfold"), spec, 16, 14).expect("fold");
            let err = rel_l2_error(&back, &x);
            cases.push(format!("({n},{s}) {err:.1e}"));
            if err > 1e-12 {
                failed.push((n, s));
            }
        }
    }

    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    std::fs::write(
        d.join("tiny.json"),
        r#"{"preset": "tiny", "train": {"epochs_fixed": 1, "epochs_decay": 1}}"#,
    )
    .expect("write config");
    let mut det = ptnet(d, &["gen-data", "-o", "data", "--volumes", "10", "--size", "32x32", "--slices", "3"]);
    for run in ["a", "b"] {
        det &= ptnet(d, &["train", "-c", "tiny.json", "-m", "data/manifest.json", "-o", run, "--seed", "5"]);
        let ck = format!("{run}/best.ptck");
        det &= ptnet(d, &["evaluate", "-k", &ck, "-m", "data/manifest.json", "-o", &format!("{run}/eval")]);
    }
    det &= identical(d, "a", "b", &["log.jsonl", "best.ptck", "epoch_001.ptck", "epoch_002.ptck"]);
    det &= identical(d, "a/eval", "b/eval", &["metrics.csv", "metrics.json"]);

    let only_uncovered = failed == [(1, 2)];
    let detail = format!(
        "fold(unfold) rel err {}; same-seed train/evaluate byte-identical: {det}{}",
        cases.join(" "),
        if only_uncovered {
            "; n=1,S=2 leaves every other row and column uncovered, so no fold can restore them"
        } else {
            ""
        }
    );
    Verdict {
        pass: failed.is_empty() && det,
        known_limit: only_uncovered && det,
        detail,
    }
}

fn parameter_counts() -> Verdict {
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, cfg, reported) in [
        ("PTNet-S", PtNetConfig::ptnet_s(), 8.78e6),
        ("PTNet-L", PtNetConfig::ptnet_l(), 27.69e6),
    ] {
        let (_, p) = PtNet::new::<f32>(&cfg, 0).expect("build");
        let n = p.count() as f64;
        let delta = (n - reported) / reported;
        ok &= delta.abs() <= 0.30;
        notes.push(format!("{name} {} vs {:.2}M ({:+.1}%)", p.count(), reported / 1e6, 100.0 * delta));
    }
    verdict(ok, notes.join("; "))
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("gradient correctness", gradients),
        ("attention oracle", attention_oracle),
        ("FAVOR+ approximation", favor_approximation),
        ("complexity", complexity),
        ("shape contract", shapes),
        ("synthetic convergence", convergence),
        ("metric fidelity", metrics),
        ("round trip and determinism", round_trip_and_determinism),
        ("parameter accounting", parameter_counts),
    ];
    let mut unexpected = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let v = f();
        let tag = match (v.pass, v.known_limit) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known limit)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!("criterion {} {name}: {tag} | {}", i + 1, v.detail);
    }
    if unexpected > 0 {
        eprintln!("{unexpected} criteria failed");
        std::process::exit(1);
    }
}
