//! Paired skeleton/image tracklets: synthetic generation, on-disk layout,
//! and ingestion of skeleton JSON, mesh vertices and joint regressors.

mod ingest;
mod store;
mod synth;

pub use ingest::{
    load_skeleton_frame, load_skeleton_sequence, parse_obj, regress_joints, skeleton_frame_json, write_skeleton_frame,
    JointRegressor, SkeletonFrame, SkeletonSequence,
};
pub use store::{load_dataset, save_dataset, Manifest, ManifestEntry, MANIFEST_FILE};
pub use synth::{base_pose, generate_dataset, DataConfig, IdentityParams};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Synthetic,
    Ingested,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub pid: usize,
    pub cam: usize,
    /// `[t, h, w, 3]`.
    pub images: Tensor,
    /// `[t, joints, 3]`.
    pub skeletons: Tensor,
    /// Per frame: false when the skeleton was missing.
    pub valid: Vec<bool>,
    pub source: Source,
}

impl Tracklet {
    pub fn frames(&self) -> usize {
        self.valid.len()
    }

    pub fn check(&self) -> Result<()> {
        let (is, ss) = (self.images.shape(), self.skeletons.shape());
        if is.len() != 4 || ss.len() != 3 || is[0] != ss[0] || ss[0] != self.valid.len() || is[3] != 3 || ss[2] != 3 {
            return Err(Error::Data(format!(
                "tracklet of id {} has inconsistent shapes: images {is:?}, skeletons {ss:?}, {} masks",
                self.pid,
                self.valid.len()
            )));
        }
        Ok(())
    }

    /// True when frame `t` has a detected, non-zero skeleton.
    pub fn frame_present(&self, t: usize) -> bool {
        let per = self.skeletons.numel() / self.frames().max(1);
        self.valid[t] && self.skeletons.data()[t * per..(t + 1) * per].iter().any(|&x| x != 0.0)
    }
}

fn select_frames(t: &Tensor, keep: &[usize]) -> Tensor {
    let per = t.numel() / t.shape()[0].max(1);
    let mut shape = t.shape().to_vec();
    shape[0] = keep.len();
    let data = keep.iter().flat_map(|&f| t.data()[f * per..(f + 1) * per].iter().copied()).collect();
    Tensor::new(&shape, data).expect("sizes agree")
}

/// Drops frames whose skeleton is masked or all-zero from both modalities,
/// keeping order.
pub fn discard_empty_frames(tracklet: &Tracklet) -> Result<Tracklet> {
    tracklet.check()?;
    let keep: Vec<usize> = (0..tracklet.frames()).filter(|&t| tracklet.frame_present(t)).collect();
    if keep.is_empty() {
        return Err(Error::Data(format!("tracklet fully empty (id {}, cam {})", tracklet.pid, tracklet.cam)));
    }
    Ok(Tracklet {
        pid: tracklet.pid,
        cam: tracklet.cam,
        images: select_frames(&tracklet.images, &keep),
        skeletons: select_frames(&tracklet.skeletons, &keep),
        valid: vec![true; keep.len()],
        source: tracklet.source,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: Option<DataConfig>,
    pub train: Vec<Tracklet>,
    pub query: Vec<Tracklet>,
    pub gallery: Vec<Tracklet>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[Tracklet] {
        match s {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.query.len() + self.gallery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training identities relabelled densely as `0..K` in ascending pid order.
    pub fn train_labels(&self) -> (Vec<usize>, Vec<usize>) {
        let mut pids: Vec<usize> = self.train.iter().map(|t| t.pid).collect();
        pids.sort_unstable();
        pids.dedup();
        let labels = self.train.iter().map(|t| pids.binary_search(&t.pid).expect("pid present")).collect();
        (labels, pids)
    }
}
