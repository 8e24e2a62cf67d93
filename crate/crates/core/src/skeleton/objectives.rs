use rand::seq::index::sample;

use super::SkeletonEncoder;
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::nn::Binder;
use crate::rng::{stream, Rng};
use crate::tensor::{Tensor, Var};

/// Which joints are hidden in each reconstruction pass, flattened over
/// `(sequence, frame, joint)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StprMasks {
    pub bs: usize,
    pub t: usize,
    pub j: usize,
    /// Joints hidden within each frame.
    pub structure: Vec<bool>,
    /// Frames hidden along each joint's trajectory.
    pub trajectory: Vec<bool>,
}

fn mask_count(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).clamp(1, n - 1)
}

pub fn draw_stpr_masks(bs: usize, t: usize, j: usize, ratio: f64, rng: &mut Rng) -> Result<StprMasks> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("mask ratio {ratio} outside (0, 1)")));
    }
    if t < 2 || j < 2 {
        return Err(Error::invalid("stpr_loss", format!("needs at least 2 frames and 2 joints, got t={t}, J={j}")));
    }
    let at = |b: usize, f: usize, k: usize| (b * t + f) * j + k;
    let mut structure = vec![false; bs * t * j];
    let per_frame = mask_count(ratio, j);
    for b in 0..bs {
        for f in 0..t {
            for k in sample(rng, j, per_frame) {
                structure[at(b, f, k)] = true;
            }
        }
    }
    let mut trajectory = vec![false; bs * t * j];
    let per_joint = mask_count(ratio, t);
    for b in 0..bs {
        for k in 0..j {
            for f in sample(rng, t, per_joint) {
                trajectory[at(b, f, k)] = true;
            }
        }
    }
    Ok(StprMasks {
        bs,
        t,
        j,
        structure,
        trajectory,
    })
}

/// Mean over rows of the L1 distance between `[m, 3]` predictions and targets.
pub fn masked_l1<'g>(pred: &Var<'g>, target: &Tensor) -> Result<Var<'g>> {
    let rows = pred.shape()[0].max(1);
    Ok(pred.sub(&pred.graph().constant(target.clone()))?.l1_norm().scale(1.0 / rows as f64))
}

pub struct StprTerms<'g> {
    pub structure: Var<'g>,
    pub trajectory: Var<'g>,
    pub total: Var<'g>,
}

/// `λ·gpc + (1−λ)·stpr`.
pub fn sgt_objective<'g>(gpc: &Var<'g>, stpr: &Var<'g>, lambda: f64) -> Result<Var<'g>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("sgt lambda {lambda} outside [0, 1]")));
    }
    gpc.scale(lambda).add(&stpr.scale(1.0 - lambda))
}

fn indices(flags: &[bool]) -> Vec<usize> {
    flags.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

impl SkeletonEncoder {
    /// Sequence-level and frame-level prototype contrastive terms against a
    /// fixed `[K, c]` bank of identity centroids.
    pub fn gpc_terms<'g>(
        &self,
        b: &Binder<'g>,
        seq: &Var<'g>,
        seq_labels: &[usize],
        frames: &Var<'g>,
        frame_labels: &[usize],
        bank: &Tensor,
    ) -> Result<(Var<'g>, Var<'g>)> {
        let bank = b.graph().constant(bank.clone());
        let seq_logits = seq.matmul(&bank.transpose()?)?.scale(1.0 / self.cfg.gpc_tau1);
        let seq_term = cross_entropy(&seq_logits, seq_labels)?;
        let projected = self.gpc_f1.forward(b, frames)?;
        let anchors = self.gpc_f2.forward(b, &bank)?;
        let frame_logits = projected.matmul(&anchors.transpose()?)?.scale(1.0 / self.cfg.gpc_tau2);
        let frame_term = cross_entropy(&frame_logits, frame_labels)?;
        Ok((seq_term, frame_term))
    }

    pub fn gpc_loss<'g>(
        &self,
        b: &Binder<'g>,
        seq: &Var<'g>,
        seq_labels: &[usize],
        frames: &Var<'g>,
        frame_labels: &[usize],
        bank: &Tensor,
    ) -> Result<Var<'g>> {
        let (s, f) = self.gpc_terms(b, seq, seq_labels, frames, frame_labels, bank)?;
        let a = self.cfg.gpc_alpha;
        s.scale(a).add(&f.scale(1.0 - a))
    }

    /// Masked reconstruction of `[bs, t, J, 3]` joints. The structure pass
    /// predicts each hidden joint from its own output token; the trajectory
    /// pass also sees the mean output of the same joint over visible frames.
    pub fn stpr_loss<'g>(&self, b: &Binder<'g>, joints: &Tensor, masks: &StprMasks) -> Result<StprTerms<'g>> {
        let (bs, t, j, c) = (masks.bs, masks.t, masks.j, self.cfg.dim);
        if joints.shape() != [bs, t, j, 3] {
            return Err(Error::shape("stpr_loss", joints.shape(), &[bs, t, j, 3]));
        }
        let g = b.graph();
        let coords = g.constant(joints.reshape(&[bs * t, j, 3])?);
        let flat_joints = joints.reshape(&[bs * t * j, 3])?;
        let targets = |idx: &[usize]| Tensor::from_fn(&[idx.len(), 3], |i| flat_joints.data()[idx[i / 3] * 3 + i % 3]);

        let hidden = indices(&masks.structure);
        let h = self.embed(b, &coords, Some((&masks.structure, &self.structure_token)))?;
        let out = self.run_blocks(b, &h)?.reshape(&[bs * t * j, c])?;
        let pred = self.structure_head.forward(b, &out.gather_rows(&hidden)?)?;
        let structure = masked_l1(&pred, &targets(&hidden))?;

        let hidden = indices(&masks.trajectory);
        let h = self.embed(b, &coords, Some((&masks.trajectory, &self.trajectory_token)))?;
        let out = self.run_blocks(b, &h)?.reshape(&[bs * t * j, c])?;
        let mut avg = Tensor::zeros(&[hidden.len(), bs * t * j]);
        for (row, &flat) in hidden.iter().enumerate() {
            let (bi, k) = (flat / (t * j), flat % j);
            let visible: Vec<usize> = (0..t)
                .map(|f| (bi * t + f) * j + k)
                .filter(|&i| !masks.trajectory[i])
                .collect();
            for &i in &visible {
                avg.data_mut()[row * bs * t * j + i] = 1.0 / visible.len() as f64;
            }
        }
        let context = g.constant(avg).matmul(&out)?;
        let head_in = Var::concat(&[out.gather_rows(&hidden)?, context], 1)?;
        let pred = self.trajectory_head.forward(b, &head_in)?;
        let trajectory = masked_l1(&pred, &targets(&hidden))?;

        let beta = self.cfg.stpr_beta;
        let total = structure.scale(beta).add(&trajectory.scale(1.0 - beta))?;
        Ok(StprTerms {
            structure,
            trajectory,
            total,
        })
    }

    /// [`Self::stpr_loss`] with masks drawn from the `(seed, "stpr", step)` stream.
    pub fn stpr_loss_at<'g>(&self, b: &Binder<'g>, joints: &Tensor, seed: u64, step: u64) -> Result<StprTerms<'g>> {
        let s = joints.shape();
        if s.len() != 4 {
            return Err(Error::invalid("stpr_loss", format!("expected [b, t, J, 3], got {s:?}")));
        }
        let masks = draw_stpr_masks(s[0], s[1], s[2], self.cfg.mask_ratio, &mut stream(seed, "stpr", step))?;
        self.stpr_loss(b, joints, &masks)
    }
}
