use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Serialize, Serializer};

use super::{paired_ttest, psnr, ssim, TTest};
use crate::data::{stack_slices, SlicePair};
use crate::error::{Error, Result};
use crate::model::PtNet;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

/// Writes `+∞` (identical inputs) as the string `"inf"`.
fn db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolumeMetrics {
    pub id: String,
    pub ssim: f64,
    #[serde(serialize_with = "db")]
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub shared_volumes: usize,
    pub ssim: TTest,
    /// Absent when a pSNR is infinite or the differences are constant.
    pub psnr: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub volumes: usize,
    pub mean_ssim: f64,
    #[serde(serialize_with = "db")]
    pub mean_psnr: f64,
    pub rows: Vec<VolumeMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<Comparison>,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<VolumeMetrics>) -> Self {
        let n = rows.len() as f64;
        Self {
            volumes: rows.len(),
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            rows,
            comparison: None,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,ssim,psnr\n");
        for r in &self.rows {
            writeln!(out, "{},{},{}", r.id, r.ssim, r.psnr).unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Vec<VolumeMetrics>> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("id,ssim,psnr") {
            return Err(Error::Format("metrics CSV must start with id,ssim,psnr".into()));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .enumerate()
            .map(|(i, l)| {
                let f: Vec<&str> = l.split(',').collect();
                let bad = || Error::Format(format!("metrics CSV row {}: {l:?}", i + 2));
                if f.len() != 3 {
                    return Err(bad());
                }
                Ok(VolumeMetrics {
                    id: f[0].to_string(),
                    ssim: f[1].trim().parse().map_err(|_| bad())?,
                    psnr: f[2].trim().parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Paired t-tests against `other` over the volume ids both contain.
    pub fn compare(&mut self, other: &[VolumeMetrics]) -> Result<()> {
        let index: HashMap<&str, &VolumeMetrics> = other.iter().map(|r| (r.id.as_str(), r)).collect();
        let pairs: Vec<(&VolumeMetrics, &VolumeMetrics)> = self
            .rows
            .iter()
            .filter_map(|r| index.get(r.id.as_str()).map(|o| (r, *o)))
            .collect();
        if pairs.is_empty() {
            return Err(Error::Config("the two reports share no volume ids".into()));
        }
        let col = |f: fn(&VolumeMetrics) -> f64| -> (Vec<f64>, Vec<f64>) {
            pairs.iter().map(|(a, b)| (f(a), f(b))).unzip()
        };
        let (a, b) = col(|r| r.ssim);
        let ssim = paired_ttest(&a, &b)?;
        let (a, b) = col(|r| r.psnr);
        let psnr = if a.iter().chain(&b).all(|v| v.is_finite()) {
            paired_ttest(&a, &b).ok()
        } else {
            None
        };
        self.comparison = Some(Comparison {
            shared_volumes: pairs.len(),
            ssim,
            psnr,
        });
        Ok(())
    }
}

/// Run the network on `[1, X, Y]` slices in batches; outputs are clamped
/// to `[0, 1]`.
pub fn predict_slices(net: &PtNet, p: &ParameterStore<f32>, sources: &[&Tensor<f32>], batch: usize) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(batch.max(1)) {
        let (x, y) = (chunk[0].dim(1), chunk[0].dim(2));
        let mut data = Vec::with_capacity(chunk.len() * x * y);
        for s in chunk {
            if s.shape() != [1, x, y] {
                return Err(Error::shapes("prediction batch", chunk[0].shape(), s.shape()));
            }
            data.extend_from_slice(s.data());
        }
        let pred = net.forward(p, &Tensor::from_vec(&[chunk.len(), 1, x, y], data)?)?;
        for i in 0..chunk.len() {
            let slice = pred.slab(i).iter().map(|v| v.clamp(0.0, 1.0)).collect();
            out.push(Tensor::from_vec(&[1, x, y], slice)?);
        }
    }
    Ok(out)
}

/// Per-volume predicted and true volumes, volumes in first-seen order and
/// slices ordered by z.
pub struct VolumePrediction {
    pub id: String,
    pub truth: Tensor<f32>,
    pub pred: Tensor<f32>,
}

pub fn predict_volumes(net: &PtNet, p: &ParameterStore<f32>, pairs: &[SlicePair], batch: usize) -> Result<Vec<VolumePrediction>> {
    let preds = predict_slices(net, p, &pairs.iter().map(|q| &q.source).collect::<Vec<_>>(), batch)?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, Vec<(usize, &Tensor<f32>, Tensor<f32>)>> = HashMap::new();
    for (pair, pred) in pairs.iter().zip(preds) {
        let g = groups.entry(pair.volume_id.as_str()).or_insert_with(|| {
            order.push(pair.volume_id.clone());
            Vec::new()
        });
        g.push((pair.z, &pair.target, pred));
    }
    order
        .into_iter()
        .map(|id| {
            let mut g = groups.remove(id.as_str()).unwrap();
            g.sort_by_key(|e| e.0);
            let truth: Vec<Tensor<f32>> = g.iter().map(|e| e.1.clone()).collect();
            let pred: Vec<Tensor<f32>> = g.into_iter().map(|e| e.2).collect();
            Ok(VolumePrediction {
                truth: stack_slices(&truth)?,
                pred: stack_slices(&pred)?,
                id,
            })
        })
        .collect()
}

/// Per-volume SSIM/pSNR of the network's predictions on `pairs`.
pub fn evaluate(net: &PtNet, p: &ParameterStore<f32>, pairs: &[SlicePair], batch: usize) -> Result<(MetricsReport, Vec<VolumePrediction>)> {
    if pairs.is_empty() {
        return Err(Error::Config("nothing to evaluate: the test split is empty".into()));
    }
    let vols = predict_volumes(net, p, pairs, batch)?;
    let rows = vols
        .iter()
        .map(|v| {
            Ok(VolumeMetrics {
                id: v.id.clone(),
                ssim: ssim(&v.truth, &v.pred)?,
                psnr: psnr(&v.truth, &v.pred)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((MetricsReport::from_rows(rows), vols))
}

/// Mean per-volume global SSIM, the model-selection score.
pub fn validation_ssim(net: &PtNet, p: &ParameterStore<f32>, pairs: &[SlicePair], batch: usize) -> Result<f64> {
    Ok(evaluate(net, p, pairs, batch)?.0.mean_ssim)
}

/// 8-bit binary PGM of an `X × Y` plane with values in `[0, 1]`; rows run
/// along X.
pub fn write_pgm(path: &Path, plane: &[f32], x: usize, y: usize) -> Result<()> {
    if plane.len() != x * y {
        return Err(Error::Dimension(format!("{} values do not form a {x}×{y} image", plane.len())));
    }
    let mut bytes = format!("P5\n{y} {x}\n255\n").into_bytes();
    bytes.extend(plane.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
