use crate::align::AlignHeads;
use crate::data::Tracklet;
use crate::error::{Error, Result};
use crate::nn::{Binder, Init, Linear, ParamStore, WeightInit};
use crate::pfu::Pfu;
use crate::sgtm::Sgtm;
use crate::skeleton::{SkeletonEncoder, SkeletonGraph};
use crate::tensor::{Graph, Tensor, Var};
use crate::visual::{sequence_feature, VisualEncoder};

use super::config::{ModelConfig, RetrievalFeature, Stage2Config, TrainMode};

/// Every module of the pipeline with its parameter prefix.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub classes: usize,
    pub visual: VisualEncoder,
    pub skeleton: SkeletonEncoder,
    pub align: AlignHeads,
    pub pfu: Pfu,
    pub sgtm: Sgtm,
    pub classifier: Linear,
}

pub const VISUAL: &str = "visual";
pub const SKELETON: &str = "skeleton";
pub const ALIGN: &str = "align";
pub const PFU: &str = "pfu";
pub const SGTM: &str = "sgtm";
pub const CLASSIFIER: &str = "classifier";

impl Model {
    /// Builds the modules and writes freshly initialised parameters, each a
    /// function of `(seed, path)` only.
    pub fn new(cfg: &ModelConfig, classes: usize, seed: u64) -> Result<(ParamStore, Model)> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 training identities, found {classes}")));
        }
        let mut store = ParamStore::new();
        let dim = cfg.visual.dim;
        let model = {
            let mut init = Init::new(&mut store, seed);
            Model {
                cfg: cfg.clone(),
                classes,
                visual: VisualEncoder::new(&mut init, VISUAL, &cfg.visual)?,
                skeleton: SkeletonEncoder::new(&mut init, SKELETON, &cfg.skeleton, &SkeletonGraph::h36m())?,
                align: AlignHeads::new(&mut init, ALIGN, dim, &cfg.align)?,
                pfu: Pfu::new(&mut init, PFU, dim, &cfg.pfu)?,
                sgtm: Sgtm::new(&mut init, SGTM, dim, classes, &cfg.sgtm)?,
                classifier: Linear::new(&mut init, CLASSIFIER, dim, classes, WeightInit::Uniform),
            }
        };
        Ok((store, model))
    }

    pub fn dim(&self) -> usize {
        self.cfg.visual.dim
    }
}

/// Stacked tensors for a set of tracklets.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[bs, t, h, w, 3]`.
    pub images: Tensor,
    /// `[bs, t, J, 3]`.
    pub joints: Tensor,
    pub labels: Vec<usize>,
}

/// Frame `f` of `t` taken from a tracklet of `len` frames, evenly spaced.
fn frame_index(f: usize, t: usize, len: usize) -> usize {
    f * len / t
}

impl Batch {
    /// Stacks tracklets, subsampling every one to the shortest length.
    pub fn new(tracklets: &[&Tracklet], labels: Vec<usize>) -> Result<Self> {
        let t = tracklets.iter().map(|x| x.frames()).min().ok_or_else(|| Error::Data("empty batch".into()))?;
        if t == 0 {
            return Err(Error::Data("empty tracklet in batch".into()));
        }
        let (is, ss) = (tracklets[0].images.shape().to_vec(), tracklets[0].skeletons.shape().to_vec());
        let (img_per, sk_per) = (is[1] * is[2] * 3, ss[1] * 3);
        let mut images = Vec::with_capacity(tracklets.len() * t * img_per);
        let mut joints = Vec::with_capacity(tracklets.len() * t * sk_per);
        for trk in tracklets {
            trk.check()?;
            if trk.images.shape()[1..] != is[1..] || trk.skeletons.shape()[1..] != ss[1..] {
                return Err(Error::Data("tracklets in a batch differ in frame size".into()));
            }
            for f in 0..t {
                let src = frame_index(f, t, trk.frames());
                images.extend_from_slice(&trk.images.data()[src * img_per..(src + 1) * img_per]);
                joints.extend_from_slice(&trk.skeletons.data()[src * sk_per..(src + 1) * sk_per]);
            }
        }
        let bs = tracklets.len();
        Ok(Batch {
            images: Tensor::new(&[bs, t, is[1], is[2], 3], images)?,
            joints: Tensor::new(&[bs, t, ss[1], 3], joints)?,
            labels,
        })
    }
}

/// Which per-tracklet feature to extract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    VisualSequence,
    SkeletonSequence,
    /// Visual sequence feature through the visual alignment head.
    AlignedVisual,
    /// Skeleton sequence feature through the skeleton alignment head.
    AlignedSkeleton,
    /// Test-time feature of the finetuned model; never reads skeletons in
    /// video mode.
    Retrieval,
}

impl Model {
    fn feature<'g>(&self, b: &Binder<'g>, batch: &Batch, kind: FeatureKind, stage2: &Stage2Config) -> Result<Var<'g>> {
        match kind {
            FeatureKind::VisualSequence => sequence_feature(&self.visual.encode(b, &batch.images)?),
            FeatureKind::SkeletonSequence => Ok(self.skeleton.encode(b, &batch.joints)?.sequence),
            FeatureKind::AlignedVisual => {
                self.align.project_visual(b, &sequence_feature(&self.visual.encode(b, &batch.images)?)?)
            }
            FeatureKind::AlignedSkeleton => self.align.project_skeleton(b, &self.skeleton.encode(b, &batch.joints)?.sequence),
            FeatureKind::Retrieval => match stage2.mode {
                TrainMode::Skeleton => Ok(self.skeleton.encode(b, &batch.joints)?.sequence),
                TrainMode::Video => self.visual_retrieval(b, &batch.images, stage2),
            },
        }
    }

    /// Video-mode test feature from images alone.
    pub fn visual_retrieval<'g>(&self, b: &Binder<'g>, images: &Tensor, stage2: &Stage2Config) -> Result<Var<'g>> {
        let tokens = self.visual.encode(b, images)?;
        if stage2.use_sgtm && stage2.retrieval_feature == RetrievalFeature::Sgtm {
            self.sgtm.inference_features(b, &tokens)
        } else {
            sequence_feature(&tokens)
        }
    }

    /// `[n, c]` features for `tracklets`, computed in chunks with every
    /// parameter constant.
    pub fn extract(&self, store: &ParamStore, tracklets: &[Tracklet], kind: FeatureKind, stage2: &Stage2Config) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(tracklets.len() * self.dim());
        let mut width = self.dim();
        for chunk in tracklets.chunks(16) {
            let refs: Vec<&Tracklet> = chunk.iter().collect();
            // chunks of unequal length are encoded one by one
            let groups: Vec<Vec<&Tracklet>> = if refs.iter().all(|t| t.frames() == refs[0].frames()) {
                vec![refs]
            } else {
                refs.into_iter().map(|t| vec![t]).collect()
            };
            for group in groups {
                let batch = Batch::new(&group, vec![0; group.len()])?;
                let g = Graph::new();
                let b = Binder::frozen_all(&g, store);
                let f = self.feature(&b, &batch, kind, stage2)?;
                width = f.shape()[1];
                rows.extend_from_slice(f.value().data());
            }
        }
        Tensor::new(&[tracklets.len(), width], rows)
    }
}
