use serde::{Deserialize, Serialize};

use super::{laplacian_pe, SkeletonGraph};
use crate::error::{Error, Result};
use crate::nn::{add_slab, Binder, Init, Linear, TransformerBlock, WeightInit};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgtConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    /// Laplacian positional encoding width.
    pub pe_dim: usize,
    /// Weight of the sequence term in the prototype contrastive loss.
    pub gpc_alpha: f64,
    pub gpc_tau1: f64,
    pub gpc_tau2: f64,
    /// Weight of the structure term in the reconstruction loss.
    pub stpr_beta: f64,
    /// Weight of the contrastive loss against the reconstruction loss.
    pub sgt_lambda: f64,
    pub mask_ratio: f64,
}

impl Default for SgtConfig {
    fn default() -> Self {
        SgtConfig {
            layers: 1,
            heads: 4,
            dim: 64,
            pe_dim: 4,
            gpc_alpha: 0.5,
            gpc_tau1: 0.07,
            gpc_tau2: 0.07,
            stpr_beta: 0.5,
            sgt_lambda: 0.5,
            mask_ratio: 0.2,
        }
    }
}

impl SgtConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("gpc_alpha", self.gpc_alpha),
            ("stpr_beta", self.stpr_beta),
            ("sgt_lambda", self.sgt_lambda),
        ] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("skeleton.{name} = {w} outside [0, 1]")));
            }
        }
        if self.gpc_tau1 <= 0.0 || self.gpc_tau2 <= 0.0 {
            return Err(Error::Config("skeleton temperatures must be positive".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("skeleton.mask_ratio = {} outside (0, 1)", self.mask_ratio)));
        }
        Ok(())
    }
}

/// Encoder outputs for a batch of `bs` sequences of `t` frames.
pub struct SkeletonFeatures<'g> {
    /// `[bs, t, 1+J, c]`: summary token followed by the joint tokens.
    pub tokens: Var<'g>,
    /// `[bs, t, c]`: mean over joint tokens.
    pub frames: Var<'g>,
    /// `[bs, c]`: mean over frames.
    pub sequence: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct SkeletonEncoder {
    pub cfg: SgtConfig,
    pub joints: usize,
    /// `J×k` positional encoding; a fixed input, not a parameter.
    pub pe: Tensor,
    pub fc1: Linear,
    pub fc2: Linear,
    pub fc_pos: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub summary_path: String,
    pub gpc_f1: Linear,
    pub gpc_f2: Linear,
    pub structure_token: String,
    pub trajectory_token: String,
    pub structure_head: Linear,
    pub trajectory_head: Linear,
}

impl SkeletonEncoder {
    pub fn new(init: &mut Init, path: &str, cfg: &SgtConfig, graph: &SkeletonGraph) -> Result<Self> {
        cfg.validate()?;
        let pe = laplacian_pe(graph, cfg.pe_dim)?;
        Self::with_encoding(init, path, cfg, pe)
    }

    /// Builds the encoder around an explicit `J×k` positional encoding.
    pub fn with_encoding(init: &mut Init, path: &str, cfg: &SgtConfig, pe: Tensor) -> Result<Self> {
        let c = cfg.dim;
        let lin = |init: &mut Init, name: &str, i, o| Linear::new(init, &format!("{path}.{name}"), i, o, WeightInit::Uniform);
        let fc1 = lin(init, "embed.fc1", 3, c);
        let fc2 = lin(init, "embed.fc2", c, c);
        let fc_pos = lin(init, "embed.fc_pos", pe.shape()[1], c);
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(init, &format!("{path}.blocks.{i}"), c, cfg.heads, false))
            .collect::<Result<_>>()?;
        let summary_path = format!("{path}.summary_token");
        init.uniform(&summary_path, &[c], 0.1);
        let structure_token = format!("{path}.stpr.structure_token");
        let trajectory_token = format!("{path}.stpr.trajectory_token");
        init.uniform(&structure_token, &[c], 0.1);
        init.uniform(&trajectory_token, &[c], 0.1);
        Ok(SkeletonEncoder {
            cfg: cfg.clone(),
            joints: pe.shape()[0],
            gpc_f1: lin(init, "gpc.f1", c, c),
            gpc_f2: lin(init, "gpc.f2", c, c),
            structure_head: lin(init, "stpr.structure_head", c, 3),
            trajectory_head: lin(init, "stpr.trajectory_head", 2 * c, 3),
            pe,
            fc1,
            fc2,
            fc_pos,
            blocks,
            summary_path,
            structure_token,
            trajectory_token,
        })
    }

    /// `FC₂(ReLU(FC₁(x)))` for `[n, J, 3]` coordinates.
    pub fn coord_embed<'g>(&self, b: &Binder<'g>, coords: &Var<'g>) -> Result<Var<'g>> {
        self.fc2.forward(b, &self.fc1.forward(b, coords)?.relu())
    }

    /// `FC_pos(e_j)` for every joint: `[J, c]`.
    pub fn pos_embed<'g>(&self, b: &Binder<'g>) -> Result<Var<'g>> {
        self.fc_pos.forward(b, &b.graph().constant(self.pe.clone()))
    }

    /// Coordinate plus positional embedding, `[n, J, 3]` → `[n, J, c]`.
    /// With `mask`, the coordinate embedding of every flagged joint is
    /// replaced by the learnable token at `token_path` (positions are kept).
    pub fn embed<'g>(&self, b: &Binder<'g>, coords: &Var<'g>, mask: Option<(&[bool], &str)>) -> Result<Var<'g>> {
        let s = coords.shape();
        if s.len() != 3 || s[1] != self.joints || s[2] != 3 {
            return Err(Error::shape("graph_embed", &s, &[0, self.joints, 3]));
        }
        let mut h = self.coord_embed(b, coords)?;
        if let Some((flags, token_path)) = mask {
            let c = self.cfg.dim;
            let n = s[0] * self.joints;
            if flags.len() != n {
                return Err(Error::invalid("graph_embed", format!("{} mask flags for {n} joints", flags.len())));
            }
            let keep = Tensor::from_fn(&[s[0], self.joints, c], |i| if flags[i / c] { 0.0 } else { 1.0 });
            let put = keep.map(|k| 1.0 - k);
            let g = b.graph();
            let token = b.param(token_path)?.reshape(&[1, c])?.gather_rows(&vec![0; n])?.reshape(&[s[0], self.joints, c])?;
            h = h.mul(&g.constant(keep))?.add(&token.mul(&g.constant(put))?)?;
        }
        add_slab(&h, &self.pos_embed(b)?)
    }

    pub fn run_blocks<'g>(&self, b: &Binder<'g>, h: &Var<'g>) -> Result<Var<'g>> {
        let mut x = *h;
        for blk in &self.blocks {
            x = blk.forward(b, &x)?;
        }
        Ok(x)
    }

    /// Encodes `[bs, t, J, 3]` joint sequences.
    pub fn encode<'g>(&self, b: &Binder<'g>, joints: &Tensor) -> Result<SkeletonFeatures<'g>> {
        let s = joints.shape();
        if s.len() != 4 {
            return Err(Error::invalid("encode_sequence", format!("expected [b, t, J, 3], got {s:?}")));
        }
        let (bs, t, c) = (s[0], s[1], self.cfg.dim);
        if t == 0 {
            return Err(Error::Data("empty tracklet".into()));
        }
        let coords = b.graph().constant(joints.reshape(&[bs * t, s[2], s[3]])?);
        let out = self.run_blocks(b, &self.embed(b, &coords, None)?)?;
        let frames = out.mean_axis(1)?;
        let summary = frames.add_row(&b.param(&self.summary_path)?)?.reshape(&[bs * t, 1, c])?;
        let tokens = Var::concat(&[summary, out], 1)?.reshape(&[bs, t, 1 + self.joints, c])?;
        let frames = frames.reshape(&[bs, t, c])?;
        let sequence = frames.mean_axis(1)?;
        Ok(SkeletonFeatures {
            tokens,
            frames,
            sequence,
        })
    }
}
