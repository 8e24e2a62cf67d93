use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use crate::align::contrastive_losses;
use crate::data::{Dataset, Tracklet};
use crate::error::{Error, Result};
use crate::eval::{evaluate, l2_normalize, pairwise_distances, EvalReport, Identity};
use crate::losses::{batch_hard_triplet, SmoothedClassifier};
use crate::nn::{tile_matrix, Binder, ParamStore};
use crate::pfu::{csip_loss, fused_tokens, intra_id_pool};
use crate::sgtm::Mode;
use crate::skeleton::sgt_objective;
use crate::tensor::checkpoint::{load_checkpoint, save_checkpoint};
use crate::tensor::{Graph, Tensor, Var};
use crate::visual::sequence_feature;

use super::config::{LrSchedule, PipelineConfig, TrainMode};
use super::model::{Batch, FeatureKind, Model, ALIGN, CLASSIFIER, PFU, SGTM, SKELETON, VISUAL};
use super::optim::Adam;
use super::sampler::PkSampler;

pub const BANK_SKELETON: &str = "banks.skeleton_prototypes";
pub const BANK_VISUAL: &str = "banks.visual_prototypes";

/// Append-only JSON-lines log, optionally mirrored to a file.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub path: Option<PathBuf>,
    pub lines: Vec<String>,
    /// Adds wall-clock seconds to each record when false.
    pub timings: bool,
}

impl TrainLog {
    pub fn to_file(path: &Path) -> Self {
        TrainLog { path: Some(path.to_path_buf()), ..Default::default() }
    }

    pub fn record(&mut self, value: serde_json::Value) -> Result<()> {
        let line = value.to_string();
        if let Some(p) = &self.path {
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(p, e))?;
        }
        log::info!("{line}");
        self.lines.push(line);
        Ok(())
    }
}

/// Loss terms of one finetuning batch.
pub struct Stage2Terms<'g> {
    pub ce: Var<'g>,
    pub triplet: Var<'g>,
    pub csip: Option<Var<'g>>,
    pub frame: Option<Var<'g>>,
    pub total: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub cfg: PipelineConfig,
    pub model: Model,
    pub store: ParamStore,
    /// Identity prototypes fixed at the start of finetuning.
    pub banks: BTreeMap<String, Tensor>,
    /// Dense training labels, one per training tracklet.
    pub labels: Vec<usize>,
    /// Original pid of each dense label.
    pub pids: Vec<usize>,
}

fn finite(stage: &str, epoch: usize, batch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{stage} epoch {epoch} batch {batch}: loss is {loss}")))
    }
}

fn ids(tracklets: &[Tracklet]) -> Vec<Identity> {
    tracklets.iter().map(|t| Identity { pid: t.pid, cam: t.cam }).collect()
}

impl Session {
    pub fn new(cfg: &PipelineConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let (labels, pids) = ds.train_labels();
        let (store, model) = Model::new(&cfg.model, pids.len(), cfg.seed)?;
        Ok(Session { cfg: cfg.clone(), model, store, banks: BTreeMap::new(), labels, pids })
    }

    /// Parameters and banks in one map.
    pub fn checkpoint(&self) -> BTreeMap<String, Tensor> {
        let mut all = self.store.as_map().clone();
        all.extend(self.banks.clone());
        all
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.checkpoint())
    }

    /// Restores parameters (and banks if present) from a checkpoint written
    /// by an earlier stage.
    pub fn restore(&mut self, entries: &BTreeMap<String, Tensor>) -> Result<()> {
        let (banks, params): (BTreeMap<_, _>, BTreeMap<_, _>) =
            entries.iter().map(|(k, v)| (k.clone(), v.clone())).partition(|(k, _)| k.starts_with("banks."));
        self.store.load_from(&params)?;
        self.banks = banks;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.restore(&load_checkpoint(path)?)
    }

    fn batch(&self, ds: &Dataset, idx: &[usize]) -> Result<Batch> {
        let trks: Vec<&Tracklet> = idx.iter().map(|&i| &ds.train[i]).collect();
        Batch::new(&trks, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Shared epoch loop over `epochs`: PK batches, loss, Adam on the
    /// unfrozen paths, one log record per epoch.
    #[allow(clippy::too_many_arguments)]
    fn run_epochs<F>(
        &mut self,
        ds: &Dataset,
        stage: &str,
        epochs: std::ops::Range<usize>,
        schedule: &LrSchedule,
        frozen: &[&str],
        adam: &mut Adam,
        log: &mut TrainLog,
        mut loss_fn: F,
    ) -> Result<Vec<f64>>
    where
        F: for<'g> FnMut(&Session, &Binder<'g>, &Batch, u64) -> Result<(Var<'g>, Vec<(&'static str, f64)>)>,
    {
        let (p, k) = if stage == "stage2" { (self.cfg.stage2.p, self.cfg.stage2.k) } else { (self.cfg.stage1.p, self.cfg.stage1.k) };
        let sampler = PkSampler::new(&self.labels, p, k, self.cfg.seed.wrapping_add(stage_salt(stage)))?;
        let mut history = Vec::with_capacity(epochs.len());
        for epoch in epochs {
            let lr = schedule.lr_at(epoch);
            let started = Instant::now();
            let mut total = 0.0;
            let mut parts: BTreeMap<&'static str, f64> = BTreeMap::new();
            let batches = sampler.epoch(epoch);
            for (bi, idx) in batches.iter().enumerate() {
                let batch = self.batch(ds, idx)?;
                let grads = {
                    let g = Graph::new();
                    let b = frozen.iter().fold(Binder::new(&g, &self.store), |b, f| b.freeze(f));
                    let (loss, terms) = loss_fn(self, &b, &batch, adam.step)?;
                    let value = loss.item()?;
                    finite(stage, epoch, bi, value)?;
                    total += value;
                    for (name, v) in terms {
                        *parts.entry(name).or_default() += v;
                    }
                    b.grads(&g.backward(loss)?)
                };
                adam.step(&mut self.store, &grads, lr)?;
            }
            let n = batches.len() as f64;
            let mean = total / n;
            history.push(mean);
            let mut rec = json!({"stage": stage, "epoch": epoch, "lr": lr, "loss": mean});
            for (name, v) in parts {
                rec[name] = json!(v / n);
            }
            if log.timings {
                rec["secs"] = json!(started.elapsed().as_secs_f64());
            }
            log.record(rec)?;
        }
        Ok(history)
    }

    /// Self-supervised skeleton training with the prototype contrastive and
    /// masked reconstruction objectives. The prototype bank is recomputed
    /// from the current encoder at every epoch.
    pub fn sgt_pretrain(&mut self, ds: &Dataset, log: &mut TrainLog) -> Result<Vec<f64>> {
        let schedule = self.cfg.stage1.sgt_lr.clone();
        let frozen = [VISUAL, ALIGN, PFU, SGTM, CLASSIFIER];
        let seed = self.cfg.seed;
        let mut adam = Adam::new();
        let mut history = Vec::new();
        for epoch in 0..self.cfg.stage1.sgt_epochs {
            let feats = self.model.extract(&self.store, &ds.train, FeatureKind::SkeletonSequence, &self.cfg.stage2)?;
            let bank = intra_id_pool(&feats, &self.labels, self.pids.len())?;
            let losses = self.run_epochs(ds, "sgt", epoch..epoch + 1, &schedule, &frozen, &mut adam, log, |s, b, batch, step| {
                let enc = &s.model.skeleton;
                let feats = enc.encode(b, &batch.joints)?;
                let (bs, t) = (batch.labels.len(), batch.joints.shape()[1]);
                let frames = feats.frames.reshape(&[bs * t, s.model.dim()])?;
                let frame_labels: Vec<usize> = batch.labels.iter().flat_map(|&y| std::iter::repeat_n(y, t)).collect();
                let gpc = enc.gpc_loss(b, &feats.sequence, &batch.labels, &frames, &frame_labels, &bank)?;
                let stpr = enc.stpr_loss_at(b, &batch.joints, seed, step)?;
                let total = sgt_objective(&gpc, &stpr.total, enc.cfg.sgt_lambda)?;
                Ok((total, vec![("gpc", gpc.item()?), ("stpr", stpr.total.item()?)]))
            })?;
            history.extend(losses);
        }
        Ok(history)
    }

    /// Mean pooled training feature of each modality, stored as the
    /// alignment heads' input centers.
    pub fn refresh_align_centers(&mut self, ds: &Dataset) -> Result<()> {
        if self.model.align.centers.is_none() {
            return Ok(());
        }
        let s2 = &self.cfg.stage2;
        let v = self.model.extract(&self.store, &ds.train, FeatureKind::VisualSequence, s2)?;
        let s = self.model.extract(&self.store, &ds.train, FeatureKind::SkeletonSequence, s2)?;
        self.model.align.set_centers(&mut self.store, column_mean(&v), column_mean(&s))
    }

    /// Contrastive alignment: the helper encoder is frozen, the other
    /// encoder and both alignment heads train. Retrieval centers are set
    /// from the final encoders.
    pub fn stage1(&mut self, ds: &Dataset, log: &mut TrainLog) -> Result<Vec<f64>> {
        let frozen: Vec<&str> = match self.cfg.stage1.mode {
            TrainMode::Video => vec![VISUAL, PFU, SGTM, CLASSIFIER],
            TrainMode::Skeleton => vec![SKELETON, PFU, SGTM, CLASSIFIER],
        };
        let (schedule, epochs) = (self.cfg.stage1.lr.clone(), self.cfg.stage1.epochs);
        let history = self.run_epochs(ds, "stage1", 0..epochs, &schedule, &frozen, &mut Adam::new(), log, |s, b, batch, _| {
            let m = &s.model;
            let v = sequence_feature(&m.visual.encode(b, &batch.images)?)?;
            let sk = m.skeleton.encode(b, &batch.joints)?.sequence;
            let sim = m.align.similarity(b, &v, &sk)?;
            let (v2s, s2v) = contrastive_losses(&sim, &batch.labels, m.align.tau)?;
            let terms = vec![("v2s", v2s.item()?), ("s2v", s2v.item()?)];
            Ok((v2s.add(&s2v)?, terms))
        })?;
        if epochs > 0 {
            self.refresh_align_centers(ds)?;
        }
        Ok(history)
    }

    /// Identity prototypes of both modalities from the current encoders.
    pub fn compute_banks(&mut self, ds: &Dataset) -> Result<()> {
        let k = self.pids.len();
        let s2 = self.cfg.stage2.clone();
        let vis = self.model.extract(&self.store, &ds.train, FeatureKind::VisualSequence, &s2)?;
        let ske = self.model.extract(&self.store, &ds.train, FeatureKind::SkeletonSequence, &s2)?;
        self.banks.insert(BANK_VISUAL.into(), intra_id_pool(&vis, &self.labels, k)?);
        self.banks.insert(BANK_SKELETON.into(), intra_id_pool(&ske, &self.labels, k)?);
        Ok(())
    }

    fn bank(&self, name: &str) -> Result<&Tensor> {
        self.banks
            .get(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}`; run the prototype pass first")))
    }

    /// Finetuning loss of one batch.
    pub fn stage2_terms<'g>(&self, b: &Binder<'g>, batch: &Batch) -> Result<Stage2Terms<'g>> {
        let s2 = &self.cfg.stage2;
        let m = &self.model;
        let labels = &batch.labels;
        let need_pair = s2.use_pfu || s2.use_sgtm;
        let (feat, vis, ske) = match s2.mode {
            TrainMode::Video => {
                let vis = m.visual.encode(b, &batch.images)?;
                let ske = if need_pair { Some(m.skeleton.encode(b, &batch.joints)?.tokens) } else { None };
                (sequence_feature(&vis)?, Some(vis), ske)
            }
            TrainMode::Skeleton => {
                let sk = m.skeleton.encode(b, &batch.joints)?;
                let vis = if s2.use_pfu && s2.use_pfu_update { Some(m.visual.encode(b, &batch.images)?) } else { None };
                (sk.sequence, vis, Some(sk.tokens))
            }
        };
        let cls = SmoothedClassifier { classifier: m.classifier.clone(), eps: s2.smoothing };
        let ce = cls.loss(b, &feat, labels)?;
        let triplet = batch_hard_triplet(&feat, labels, s2.margin)?;
        let mut total = ce.add(&triplet)?;
        let csip = if s2.use_pfu {
            let g = b.graph();
            let (ps, pv) = (g.constant(self.bank(BANK_SKELETON)?.clone()), g.constant(self.bank(BANK_VISUAL)?.clone()));
            let fused = if s2.use_fusion { m.pfu.fuse(b, &ps, &pv)?.0 } else { pv };
            let protos = if s2.use_pfu_update {
                let (v, s) = (vis.as_ref().expect("encoded"), ske.as_ref().expect("encoded"));
                m.pfu.update(b, &fused, &fused_tokens(v, s)?)?
            } else {
                tile_matrix(&fused, labels.len())?
            };
            let l = csip_loss(&feat, labels, &protos)?;
            total = total.add(&l.scale(s2.lambda_csip))?;
            Some(l)
        } else {
            None
        };
        let frame = if s2.use_sgtm {
            let (v, s) = (vis.as_ref().expect("video mode"), ske.as_ref().expect("encoded"));
            let out = m.sgtm.forward(b, v, Some(s), Some(labels), Mode::Train)?;
            let l = out.frame_loss.expect("labels given");
            total = total.add(&l.scale(s2.lambda_frame))?;
            Some(l)
        } else {
            None
        };
        Ok(Stage2Terms { ce, triplet, csip, frame, total })
    }

    /// Identity finetuning. Prototype banks are computed first when absent.
    pub fn stage2(&mut self, ds: &Dataset, log: &mut TrainLog) -> Result<Vec<f64>> {
        if !self.banks.contains_key(BANK_VISUAL) || !self.banks.contains_key(BANK_SKELETON) {
            self.compute_banks(ds)?;
        }
        let frozen: Vec<&str> = match self.cfg.stage2.mode {
            TrainMode::Video => vec![SKELETON, ALIGN],
            TrainMode::Skeleton => vec![VISUAL, ALIGN, SGTM],
        };
        let schedule = self.cfg.stage2.lr.clone();
        let epochs = self.cfg.stage2.epochs;
        self.run_epochs(ds, "stage2", 0..epochs, &schedule, &frozen, &mut Adam::new(), log, |s, b, batch, _| {
            let t = s.stage2_terms(b, batch)?;
            let mut terms = vec![("ce", t.ce.item()?), ("triplet", t.triplet.item()?)];
            if let Some(c) = &t.csip {
                terms.push(("csip", c.item()?));
            }
            if let Some(f) = &t.frame {
                terms.push(("frame", f.item()?));
            }
            Ok((t.total, terms))
        })
    }

    fn report(&self, q: Tensor, qs: &[Tracklet], g: Tensor, gs: &[Tracklet]) -> Result<EvalReport> {
        let (q, g) = if self.cfg.eval.normalize { (l2_normalize(&q), l2_normalize(&g)) } else { (q, g) };
        evaluate(&pairwise_distances(&q, &g)?, &ids(qs), &ids(gs), self.cfg.eval.exclude_same_camera)
    }

    /// Skeleton queries against a visual gallery in the aligned space.
    pub fn eval_cross_modal(&self, ds: &Dataset) -> Result<EvalReport> {
        let s2 = &self.cfg.stage2;
        let q = self.model.extract(&self.store, &ds.query, FeatureKind::AlignedSkeleton, s2)?;
        let g = self.model.extract(&self.store, &ds.gallery, FeatureKind::AlignedVisual, s2)?;
        self.report(q, &ds.query, g, &ds.gallery)
    }

    /// Single-modality retrieval with the test-time feature.
    pub fn eval_retrieval(&self, ds: &Dataset) -> Result<EvalReport> {
        let s2 = &self.cfg.stage2;
        let q = self.model.extract(&self.store, &ds.query, FeatureKind::Retrieval, s2)?;
        let g = self.model.extract(&self.store, &ds.gallery, FeatureKind::Retrieval, s2)?;
        self.report(q, &ds.query, g, &ds.gallery)
    }
}

fn column_mean(t: &Tensor) -> Tensor {
    let (n, c) = (t.rows(), t.cols());
    Tensor::from_fn(&[c], |j| (0..n).map(|i| t.data()[i * c + j]).sum::<f64>() / n as f64)
}

fn stage_salt(stage: &str) -> u64 {
    match stage {
        "stage1" => 1,
        "stage2" => 2,
        _ => 3,
    }
}
