//! Volume preprocessing, dataset splits, a synthetic paired-image task and
//! the on-disk manifest.

mod manifest;
mod synthetic;

pub use manifest::{
    load_manifest, load_split, write_dataset, DatasetSummary, ManifestEntry, Split, VolumeSidecar,
};
pub use synthetic::{gen_synthetic_pair, gen_synthetic_volume, smooth_replicate, synthetic_target};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

/// Intensity window used by [`normalize_volume`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormMeta {
    pub min: f64,
    pub p9995: f64,
}

/// A 3-D intensity volume `[X, Y, Z]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    pub voxels: Tensor<f32>,
    pub norm: Option<NormMeta>,
}

impl VolumeRecord {
    pub fn new(id: impl Into<String>, voxels: Tensor<f32>) -> Result<Self> {
        if voxels.ndim() != 3 || voxels.is_empty() {
            return Err(Error::Dimension(format!(
                "volumes are X×Y×Z, got {:?}",
                voxels.shape()
            )));
        }
        Ok(Self {
            id: id.into(),
            voxels,
            norm: None,
        })
    }

    pub fn extents(&self) -> (usize, usize, usize) {
        (self.voxels.dim(0), self.voxels.dim(1), self.voxels.dim(2))
    }
}

/// One source/target slice pair, each `[1, X, Y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub source: Tensor<f32>,
    pub target: Tensor<f32>,
    pub volume_id: String,
    pub z: usize,
}

/// Percentile `q ∈ [0, 100]` with linear interpolation between order
/// statistics (rank `q/100·(n−1)`).
pub fn percentile(values: &[f32], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v: Vec<f32> = values.to_vec();
    v.sort_by(f32::total_cmp);
    let rank = q.clamp(0.0, 100.0) / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    v[lo] as f64 * (1.0 - frac) + v[hi] as f64 * frac
}

/// Map `[min, p99.95]` to `[0, 1]`, clamping everything above.
pub fn normalize_volume(v: &VolumeRecord) -> Result<VolumeRecord> {
    let data = v.voxels.data();
    if data.is_empty() {
        return Err(Error::Degenerate(format!("volume {} is empty", v.id)));
    }
    let min = data.iter().copied().fold(f32::INFINITY, f32::min) as f64;
    let p = percentile(data, 99.95);
    if p <= min {
        return Err(Error::Degenerate(format!(
            "volume {} has no intensity range below its 99.95th percentile",
            v.id
        )));
    }
    let scale = 1.0 / (p - min);
    Ok(VolumeRecord {
        id: v.id.clone(),
        voxels: v
            .voxels
            .map(|x| ((x as f64 - min) * scale).clamp(0.0, 1.0) as f32),
        norm: Some(NormMeta { min, p9995: p }),
    })
}

/// Inclusive X/Y bounding box of nonzero voxels over all slices.
pub fn nonzero_bbox(v: &Tensor<f32>) -> Option<[usize; 4]> {
    let (x, y, z) = (v.dim(0), v.dim(1), v.dim(2));
    let d = v.data();
    let mut b: Option<[usize; 4]> = None;
    for i in 0..x {
        for j in 0..y {
            if d[(i * y + j) * z..(i * y + j + 1) * z].iter().any(|&a| a != 0.0) {
                b = Some(match b {
                    None => [i, i, j, j],
                    Some([x0, x1, y0, y1]) => [x0.min(i), x1.max(i), y0.min(j), y1.max(j)],
                });
            }
        }
    }
    b
}

/// Outcome of [`crop_volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropInfo {
    pub bbox: [usize; 4],
    /// Nonzero content was wider than the target and got center-cropped.
    pub content_loss: bool,
}

/// Cut `bbox` out of the X/Y plane, then symmetrically zero-pad or
/// center-crop to `tx × ty`.
pub fn crop_to_box(v: &Tensor<f32>, bbox: [usize; 4], tx: usize, ty: usize) -> (Tensor<f32>, bool) {
    let z = v.dim(2);
    let yext = v.dim(1);
    let (bw, bh) = (bbox[1] - bbox[0] + 1, bbox[3] - bbox[2] + 1);
    // offset of the target window inside the box, negative means padding
    let off = |box_len: usize, target: usize| (box_len as isize - target as isize) / 2;
    let (ox, oy) = (off(bw, tx), off(bh, ty));
    let mut out = Tensor::zeros(&[tx, ty, z]);
    let src = v.data();
    let dst = out.data_mut();
    for i in 0..tx {
        let bi = i as isize + ox;
        if bi < 0 || bi >= bw as isize {
            continue;
        }
        for j in 0..ty {
            let bj = j as isize + oy;
            if bj < 0 || bj >= bh as isize {
                continue;
            }
            let s = ((bbox[0] + bi as usize) * yext + bbox[2] + bj as usize) * z;
            dst[(i * ty + j) * z..(i * ty + j + 1) * z].copy_from_slice(&src[s..s + z]);
        }
    }
    (out, bw > tx || bh > ty)
}

/// Crop away all-zero background in X/Y, then pad or center-crop to
/// `tx × ty`. Z is untouched.
pub fn crop_volume(v: &VolumeRecord, tx: usize, ty: usize) -> Result<(VolumeRecord, CropInfo)> {
    let (x, y, _) = v.extents();
    if tx > x || ty > y || tx == 0 || ty == 0 {
        return Err(Error::Config(format!(
            "crop target {tx}×{ty} must lie within the volume's {x}×{y}"
        )));
    }
    let bbox = nonzero_bbox(&v.voxels)
        .ok_or_else(|| Error::Degenerate(format!("volume {} is entirely zero", v.id)))?;
    let (voxels, content_loss) = crop_to_box(&v.voxels, bbox, tx, ty);
    Ok((
        VolumeRecord {
            id: v.id.clone(),
            voxels,
            norm: v.norm,
        },
        CropInfo { bbox, content_loss },
    ))
}

/// One `[1, X, Y]` slice per Z index, in order.
pub fn slice_volume(v: &VolumeRecord) -> Vec<Tensor<f32>> {
    let (x, y, z) = v.extents();
    let d = v.voxels.data();
    (0..z)
        .map(|k| {
            let s: Vec<f32> = (0..x * y).map(|p| d[p * z + k]).collect();
            Tensor::from_vec(&[1, x, y], s).expect("slice size")
        })
        .collect()
}

/// Inverse of [`slice_volume`].
pub fn stack_slices(slices: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Dimension("no slices to stack".into()))?;
    let (x, y) = (first.dim(first.ndim() - 2), first.dim(first.ndim() - 1));
    let z = slices.len();
    let mut out = vec![0f32; x * y * z];
    for (k, s) in slices.iter().enumerate() {
        if s.len() != x * y {
            return Err(Error::shapes("stack_slices", first.shape(), s.shape()));
        }
        for (p, &v) in s.data().iter().enumerate() {
            out[p * z + k] = v;
        }
    }
    Tensor::from_vec(&[x, y, z], out)
}

/// Volume ids per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle, then contiguous 7:1:2 partition (train and validation
/// sizes rounded, test takes the rest).
pub fn split_dataset(ids: &[String], seed: u64) -> Result<DatasetSplit> {
    let n = ids.len();
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 volumes to split, got {n}")));
    }
    let mut order = ids.to_vec();
    Rng::new(seed).shuffle(&mut order);
    let train = (0.7 * n as f64).round() as usize;
    let val = (0.1 * n as f64).round() as usize;
    let test = order.split_off(train + val);
    let val_ids = order.split_off(train);
    Ok(DatasetSplit {
        train: order,
        val: val_ids,
        test,
    })
}
