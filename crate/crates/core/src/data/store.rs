//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.json
//! root/id_0003/trk_05/frame_000.bin   image tensor [h, w, 3]
//! root/id_0003/trk_05/frame_000.json  skeleton keypoints (absent if masked)
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ingest::{load_skeleton_sequence, write_skeleton_frame};
use super::{DataConfig, Dataset, Source, Split, Tracklet};
use crate::error::{Error, Result};
use crate::skeleton::SkeletonGraph;
use crate::tensor::checkpoint::{load_tensor, save_tensor};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub split: Split,
    pub pid: usize,
    pub cam: usize,
    pub dir: String,
    pub frames: usize,
    pub source: Source,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub joints: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub config: Option<DataConfig>,
    pub tracklets: Vec<ManifestEntry>,
}

fn frame_stem(t: usize) -> String {
    format!("frame_{t:03}")
}

/// Writes the dataset under `root`. An existing manifest is only replaced
/// when `force` is set.
pub fn save_dataset(ds: &Dataset, root: &Path, force: bool) -> Result<()> {
    let manifest_path = root.join(MANIFEST_FILE);
    if manifest_path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", manifest_path.display())));
    }
    let graph = SkeletonGraph::h36m();
    let first = ds.train.first().or(ds.query.first()).ok_or_else(|| Error::Data("empty dataset".into()))?;
    let (height, width) = (first.images.shape()[1], first.images.shape()[2]);
    let mut entries = Vec::new();
    let mut per_id: std::collections::BTreeMap<usize, usize> = Default::default();
    for split in [Split::Train, Split::Query, Split::Gallery] {
        for trk in ds.split(split) {
            trk.check()?;
            let k = per_id.entry(trk.pid).or_default();
            let dir = format!("id_{:04}/trk_{:02}", trk.pid, k);
            *k += 1;
            let full = root.join(&dir);
            std::fs::create_dir_all(&full).map_err(|e| Error::io(&full, e))?;
            let (img_per, sk_per) = (height * width * 3, trk.skeletons.numel() / trk.frames());
            for t in 0..trk.frames() {
                let img = Tensor::new(&[height, width, 3], trk.images.data()[t * img_per..(t + 1) * img_per].to_vec())?;
                save_tensor(&full.join(format!("{}.bin", frame_stem(t))), &img)?;
                let json = full.join(format!("{}.json", frame_stem(t)));
                if trk.valid[t] {
                    write_skeleton_frame(&json, t, &trk.skeletons.data()[t * sk_per..(t + 1) * sk_per], &graph)?;
                } else if json.exists() {
                    std::fs::remove_file(&json).map_err(|e| Error::io(&json, e))?;
                }
            }
            entries.push(ManifestEntry { split, pid: trk.pid, cam: trk.cam, dir, frames: trk.frames(), source: trk.source });
        }
    }
    let manifest = Manifest { joints: graph.joints(), height, width, config: ds.config.clone(), tracklets: entries };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
}

fn load_tracklet(root: &Path, e: &ManifestEntry, m: &Manifest, graph: &SkeletonGraph) -> Result<Tracklet> {
    let dir = root.join(&e.dir);
    let mut images = Vec::with_capacity(e.frames * m.height * m.width * 3);
    for t in 0..e.frames {
        let p = dir.join(format!("{}.bin", frame_stem(t)));
        let img = load_tensor(&p)?;
        if img.shape() != [m.height, m.width, 3] {
            return Err(Error::Format { path: p, msg: format!("image of shape {:?}", img.shape()) });
        }
        images.extend_from_slice(img.data());
    }
    let paths: Vec<PathBuf> = (0..e.frames).map(|t| dir.join(format!("{}.json", frame_stem(t)))).collect();
    let seq = load_skeleton_sequence(&paths, graph)?;
    Ok(Tracklet {
        pid: e.pid,
        cam: e.cam,
        images: Tensor::new(&[e.frames, m.height, m.width, 3], images)?,
        skeletons: seq.joints,
        valid: seq.valid,
        source: e.source,
    })
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let mp = root.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mp, &e))?;
    let graph = SkeletonGraph::h36m();
    if m.joints != graph.joints() {
        return Err(Error::Format { path: mp, msg: format!("manifest declares {} joints, expected 17", m.joints) });
    }
    let mut ds = Dataset { config: m.config.clone(), train: vec![], query: vec![], gallery: vec![] };
    for e in &m.tracklets {
        let trk = load_tracklet(root, e, &m, &graph)?;
        match e.split {
            Split::Train => ds.train.push(trk),
            Split::Query => ds.query.push(trk),
            Split::Gallery => ds.gallery.push(trk),
        }
    }
    Ok(ds)
}
