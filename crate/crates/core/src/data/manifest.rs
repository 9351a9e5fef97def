//! Dataset layout on disk.
//!
//! `manifest.json` is a JSON array with one entry per slice pair; slices and
//! whole volumes are PTT1 tensors, and `volumes.json` records per-volume
//! preprocessing metadata.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    crop_to_box, gen_synthetic_volume, nonzero_bbox, normalize_volume, slice_volume, split_dataset,
    NormMeta, SlicePair, VolumeRecord,
};
use crate::error::{Error, Result};
use crate::tensor::{io, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub path_source: String,
    pub path_target: String,
    pub z_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub id: String,
    pub split: Split,
    pub source_norm: NormMeta,
    pub target_norm: NormMeta,
    pub crop_bbox: [usize; 4],
    pub content_loss: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub volumes: usize,
    pub slices: usize,
}

/// Zero background width around each generated volume before cropping.
const BORDER: usize = 8;

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Simulated acquisition of one synthetic subject: both modalities at
/// scanner-like intensities inside a zero background.
fn raw_subject(rng: &mut Rng, x: usize, y: usize, z: usize) -> Result<(VolumeRecord, VolumeRecord)> {
    let (s, t) = gen_synthetic_volume(rng, x, y, z)?;
    let (px, py) = (x + 2 * BORDER, y + 2 * BORDER);
    let embed = |v: &Tensor<f32>, gain: f32| {
        let mut out = Tensor::<f32>::zeros(&[px, py, z]);
        for i in 0..x {
            for j in 0..y {
                let src = &v.data()[(i * y + j) * z..(i * y + j + 1) * z];
                let at = ((i + BORDER) * py + j + BORDER) * z;
                for (o, &a) in out.data_mut()[at..at + z].iter_mut().zip(src) {
                    *o = a * gain;
                }
            }
        }
        out
    };
    Ok((
        VolumeRecord::new("source", embed(&s.voxels, 1000.0))?,
        VolumeRecord::new("target", embed(&t.voxels, 700.0))?,
    ))
}

/// Generate `volumes` synthetic subjects of `x × y × z`, preprocess them
/// (normalize, crop away the background with a box shared by both
/// modalities, slice) and write the dataset under `dir`.
pub fn write_dataset(dir: &Path, volumes: usize, x: usize, y: usize, z: usize, seed: u64) -> Result<DatasetSummary> {
    if z == 0 {
        return Err(Error::Config("need at least one slice per volume".into()));
    }
    let ids: Vec<String> = (0..volumes).map(|i| format!("vol{i:03}")).collect();
    let split = split_dataset(&ids, seed)?;
    let split_of = |id: &String| {
        if split.train.contains(id) {
            Split::Train
        } else if split.val.contains(id) {
            Split::Val
        } else {
            Split::Test
        }
    };
    create_dir(&dir.join("volumes"))?;
    create_dir(&dir.join("slices"))?;
    let root = Rng::new(seed);
    let mut entries = Vec::new();
    let mut sidecar = Vec::new();
    for (i, id) in ids.iter().enumerate() {
        let mut rng = root.split(i as u64);
        let (s, t) = raw_subject(&mut rng, x, y, z)?;
        let (s, t) = (normalize_volume(&s)?, normalize_volume(&t)?);
        // one box for both modalities so the pair stays aligned
        let bbox = match (nonzero_bbox(&s.voxels), nonzero_bbox(&t.voxels)) {
            (Some(a), Some(b)) => [a[0].min(b[0]), a[1].max(b[1]), a[2].min(b[2]), a[3].max(b[3])],
            _ => return Err(Error::Degenerate(format!("volume {id} is empty"))),
        };
        let (sv, loss_s) = crop_to_box(&s.voxels, bbox, x, y);
        let (tv, loss_t) = crop_to_box(&t.voxels, bbox, x, y);
        let sp = split_of(id);
        io::save(dir.join(format!("volumes/{id}_source.ptt")), &sv)?;
        io::save(dir.join(format!("volumes/{id}_target.ptt")), &tv)?;
        let sv = VolumeRecord::new(id.clone(), sv)?;
        let tv = VolumeRecord::new(id.clone(), tv)?;
        for (k, (a, b)) in slice_volume(&sv).iter().zip(slice_volume(&tv).iter()).enumerate() {
            let ps = format!("slices/{id}_z{k:03}_source.ptt");
            let pt = format!("slices/{id}_z{k:03}_target.ptt");
            io::save(dir.join(&ps), a)?;
            io::save(dir.join(&pt), b)?;
            entries.push(ManifestEntry {
                id: id.clone(),
                split: sp,
                path_source: ps,
                path_target: pt,
                z_index: k,
            });
        }
        sidecar.push(VolumeSidecar {
            id: id.clone(),
            split: sp,
            source_norm: s.norm.unwrap(),
            target_norm: t.norm.unwrap(),
            crop_bbox: bbox,
            content_loss: loss_s || loss_t,
        });
    }
    let manifest = dir.join("manifest.json");
    write_json(&manifest, &entries)?;
    write_json(&dir.join("volumes.json"), &sidecar)?;
    Ok(DatasetSummary {
        manifest,
        volumes,
        slices: entries.len(),
    })
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn load_slice(path: &Path) -> Result<Tensor<f32>> {
    let t = io::load(path)?.into_dtype::<f32>();
    match *t.shape() {
        [1, _, _] => Ok(t),
        [x, y] => t.reshape(&[1, x, y]),
        _ => Err(Error::Format(format!(
            "{} holds {:?}, expected a 1×X×Y slice",
            path.display(),
            t.shape()
        ))),
    }
}

/// Slice pairs of one split, in manifest order. Paths are resolved relative
/// to the manifest's directory.
pub fn load_split(manifest: &Path, split: Split) -> Result<Vec<SlicePair>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    load_manifest(manifest)?
        .into_iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let source = load_slice(&base.join(&e.path_source))?;
            let target = load_slice(&base.join(&e.path_target))?;
            if source.shape() != target.shape() {
                return Err(Error::shapes(&format!("slice pair {} z={}", e.id, e.z_index), source.shape(), target.shape()));
            }
            Ok(SlicePair {
                source,
                target,
                volume_id: e.id,
                z: e.z_index,
            })
        })
        .collect()
}
