//! One function per subcommand. Each writes `run_config.json` beside its
//! outputs.

use std::path::{Path, PathBuf};

use ptnet_core::data::{load_split, stack_slices, write_dataset, Split};
use ptnet_core::eval::{abs_error_map, evaluate as eval_split, predict_slices, write_pgm, MetricsReport};
use ptnet_core::model::{check_model_gradients, load_checkpoint, Checkpoint, PtNet, PtNetConfig};
use ptnet_core::tensor::gradcheck::GradCheckOptions;
use ptnet_core::tensor::io;
use ptnet_core::training::{self, TrainPlan};
use ptnet_core::{Error, ParameterStore, Result, Tensor};
use serde_json::json;

use crate::bench;
use crate::config::RunConfig;
use crate::{BenchArgs, EvaluateArgs, GenDataArgs, GradcheckArgs, SynthesizeArgs, TrainArgs};

pub const SNAPSHOT: &str = "run_config.json";

fn require_out<'a>(out: Option<&'a Path>, cmd: &str) -> Result<&'a Path> {
    out.ok_or_else(|| Error::Config(format!("{cmd} needs --out")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn restore(path: &Path) -> Result<(Checkpoint<f32>, PtNet, ParameterStore<f32>)> {
    let ckpt = load_checkpoint::<f32>(path)?;
    let (net, p) = ckpt.clone().restore()?;
    Ok((ckpt, net, p))
}

/// Run config recovered from a checkpoint's metadata.
fn checkpoint_config(ckpt: &Checkpoint<f32>) -> RunConfig {
    RunConfig {
        preset: None,
        model: ckpt.meta.config.clone(),
        train: TrainPlan {
            seed: ckpt.meta.seed,
            ..TrainPlan::default()
        },
    }
}

pub fn gen_data(cfg: &RunConfig, a: &GenDataArgs, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "gen-data")?;
    create_dir(out)?;
    cfg.write_snapshot(&out.join(SNAPSHOT))?;
    let s = write_dataset(out, a.volumes, a.size.0, a.size.1, a.slices, cfg.train.seed)?;
    println!("wrote {} volumes, {} slice pairs; manifest {}", s.volumes, s.slices, s.manifest.display());
    Ok(())
}

pub fn train(cfg: &RunConfig, a: &TrainArgs, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "train")?;
    let tr = load_split(&a.manifest, Split::Train)?;
    let val = load_split(&a.manifest, Split::Val)?;
    create_dir(out)?;
    cfg.write_snapshot(&out.join(SNAPSHOT))?;
    log::info!(
        "training on {} slices, validating on {}, {} epochs",
        tr.len(),
        val.len(),
        cfg.train.epochs()
    );
    let o = training::train(&cfg.model, &tr, &val, &cfg.train, Some(out))?;
    let best = &o.log[o.best_epoch - 1];
    println!(
        "best epoch {} (val SSIM {:.5}); checkpoint {}",
        o.best_epoch,
        best.val_ssim,
        out.join("best.ptck").display()
    );
    Ok(())
}

/// Mirror index without repeating the edge sample.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let r = i % (2 * (n - 1));
    if r < n {
        r
    } else {
        2 * (n - 1) - r
    }
}

/// Reflect-pads a `[1, X, Y]` slice at the far edges.
pub fn reflect_pad(s: &Tensor<f32>, px: usize, py: usize) -> Result<Tensor<f32>> {
    let (x, y) = (s.dim(1), s.dim(2));
    let d = s.data();
    let data = (0..px)
        .flat_map(|i| (0..py).map(move |j| d[reflect(i, x) * y + reflect(j, y)]))
        .collect();
    Tensor::from_vec(&[1, px, py], data)
}

fn crop(s: &Tensor<f32>, x: usize, y: usize) -> Result<Tensor<f32>> {
    let py = s.dim(2);
    let data = (0..x).flat_map(|i| s.data()[i * py..i * py + y].iter().copied()).collect();
    Tensor::from_vec(&[1, x, y], data)
}

/// Slice-wise synthesis of an `[X, Y, Z]` volume, clamped to `[0, 1]`.
pub fn synthesize_volume(net: &PtNet, p: &ParameterStore<f32>, vol: &Tensor<f32>, pad: bool, batch: usize) -> Result<Tensor<f32>> {
    let [x, y, z] = *vol.shape() else {
        return Err(Error::Dimension(format!("expected an X×Y×Z volume, got {:?}", vol.shape())));
    };
    let m = net.config.required_multiple();
    let (px, py) = (x.div_ceil(m) * m, y.div_ceil(m) * m);
    if (px, py) != (x, y) && !pad {
        return Err(Error::Config(format!(
            "slice extents {x}×{y} are not multiples of {m}; pass --pad to reflect-pad"
        )));
    }
    let d = vol.data();
    let slices = (0..z)
        .map(|k| {
            let s = Tensor::from_vec(&[1, x, y], (0..x * y).map(|q| d[q * z + k]).collect())?;
            reflect_pad(&s, px, py)
        })
        .collect::<Result<Vec<_>>>()?;
    let preds = predict_slices(net, p, &slices.iter().collect::<Vec<_>>(), batch)?;
    let cropped = preds.iter().map(|s| crop(s, x, y)).collect::<Result<Vec<_>>>()?;
    stack_slices(&cropped)
}

fn sidecar(out: &Path) -> PathBuf {
    let name = out.file_name().map_or_else(|| "output".into(), |n| n.to_string_lossy().into_owned());
    out.with_file_name(format!("{name}.{SNAPSHOT}"))
}

pub fn synthesize(a: &SynthesizeArgs, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "synthesize")?;
    let (ckpt, net, p) = restore(&a.checkpoint)?;
    let vol = io::load(&a.input)?.into_dtype::<f32>();
    let pred = synthesize_volume(&net, &p, &vol, a.pad, a.batch)?;
    checkpoint_config(&ckpt).write_snapshot(&sidecar(out))?;
    io::save(out, &pred)?;
    println!("wrote {:?} volume to {}", pred.shape(), out.display());
    Ok(())
}

fn plane(vol: &Tensor<f32>, k: usize) -> Vec<f32> {
    let (xy, z) = (vol.dim(0) * vol.dim(1), vol.dim(2));
    (0..xy).map(|q| vol.data()[q * z + k]).collect()
}

pub fn evaluate(_cfg: &RunConfig, a: &EvaluateArgs, out: Option<&Path>) -> Result<()> {
    let out = require_out(out, "evaluate")?;
    let (ckpt, net, p) = restore(&a.checkpoint)?;
    let pairs = load_split(&a.manifest, a.split)?;
    let (mut report, vols) = eval_split(&net, &p, &pairs, a.batch)?;
    if let Some(other) = &a.compare {
        let text = std::fs::read_to_string(other).map_err(|e| Error::io(other, e))?;
        report.compare(&MetricsReport::from_csv(&text)?)?;
    }
    let maps = out.join("error_maps");
    create_dir(&maps)?;
    checkpoint_config(&ckpt).write_snapshot(&out.join(SNAPSHOT))?;
    write_text(&out.join("metrics.csv"), &report.to_csv())?;
    write_text(&out.join("metrics.json"), &report.to_json()?)?;
    for v in &vols {
        let err = abs_error_map(&v.truth, &v.pred)?;
        io::save(maps.join(format!("{}.ptt", v.id)), &err)?;
        if a.pgm {
            for k in 0..err.dim(2) {
                write_pgm(&maps.join(format!("{}_z{k:03}.pgm", v.id)), &plane(&err, k), err.dim(0), err.dim(1))?;
            }
        }
    }
    println!(
        "{} volumes: mean SSIM {:.5}, mean pSNR {:.3} dB",
        report.rows.len(),
        report.mean_ssim,
        report.mean_psnr
    );
    if let Some(c) = &report.comparison {
        println!(
            "paired t-test over {} volumes: SSIM t={:.4} df={} p={:.4}",
            c.shared_volumes, c.ssim.t, c.ssim.df, c.ssim.p
        );
    }
    Ok(())
}

pub fn bench_attention(cfg: &RunConfig, a: &BenchArgs, out: Option<&Path>) -> Result<()> {
    let rows = bench::bench_attention(&a.lengths, a.dk, a.m, a.repeats, cfg.train.seed)?;
    let csv = bench::to_csv(&rows);
    print!("{csv}");
    if let Some(dir) = out {
        create_dir(dir)?;
        cfg.write_snapshot(&dir.join(SNAPSHOT))?;
        write_text(&dir.join("attention_bench.csv"), &csv)?;
    }
    Ok(())
}

/// Without `--config` the check runs on the `tiny` preset.
pub fn gradcheck(cfg: &RunConfig, configured: bool, a: &GradcheckArgs, out: Option<&Path>) -> Result<()> {
    let model = if configured { cfg.model.clone() } else { PtNetConfig::tiny() };
    let opts = GradCheckOptions {
        tol: a.tol,
        max_coords: a.max_coords,
        seed: cfg.train.seed,
        ..GradCheckOptions::default()
    };
    let report = check_model_gradients(
        &model,
        cfg.train.seed,
        (a.size, a.size),
        &opts,
        a.corrupt_backward.then_some(1.01),
    )?;
    for q in &report.params {
        println!("{:<48} {:>6} {:.3e}", q.name, q.checked, q.max_rel_error);
    }
    let verdict = if report.passed() { "PASS" } else { "FAIL" };
    println!("{verdict}: max relative error {:.3e} (tol {:.1e})", report.max_rel_error(), a.tol);
    if let Some(dir) = out {
        create_dir(dir)?;
        RunConfig {
            model,
            ..cfg.clone()
        }
        .write_snapshot(&dir.join(SNAPSHOT))?;
        let params: Vec<_> = report
            .params
            .iter()
            .map(|q| json!({"name": q.name, "checked": q.checked, "max_rel_error": q.max_rel_error}))
            .collect();
        let doc = json!({"passed": report.passed(), "tol": a.tol, "max_rel_error": report.max_rel_error(), "params": params});
        write_text(&dir.join("gradcheck.json"), &serde_json::to_string_pretty(&doc)?)?;
    }
    if !report.passed() {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.1e}",
            report.max_rel_error(),
            a.tol
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflection_mirrors_without_repeating_the_edge() {
        let got: Vec<usize> = (0..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![0, 1, 2, 3, 2, 1, 0, 1, 2]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let s = Tensor::from_vec(&[1, 3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = reflect_pad(&s, 5, 4).unwrap();
        assert_eq!(&p.data()[..4], &[1.0, 2.0, 1.0, 2.0]);
        assert_eq!(&p.data()[12..16], &[3.0, 4.0, 3.0, 4.0]);
        assert_eq!(crop(&p, 3, 2).unwrap(), s);
    }

    #[test]
    fn sidecar_sits_next_to_the_output() {
        assert_eq!(sidecar(Path::new("a/b.ptt")), Path::new("a/b.ptt.run_config.json"));
    }
}
