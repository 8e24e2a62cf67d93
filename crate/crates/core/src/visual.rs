//! A small vision transformer that turns each image frame into a class token
//! plus one token per patch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{add_slab, tile_row, Binder, Init, Linear, TransformerBlock, WeightInit};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisualConfig {
    pub height: usize,
    pub width: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    /// Bound of the uniform draw for the class token and position table.
    pub token_init: f64,
}

impl Default for VisualConfig {
    fn default() -> Self {
        VisualConfig {
            height: 32,
            width: 16,
            patch_h: 8,
            patch_w: 8,
            depth: 1,
            heads: 4,
            dim: 64,
            token_init: 0.1,
        }
    }
}

impl VisualConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_h == 0 || self.patch_w == 0 || !self.height.is_multiple_of(self.patch_h) || !self.width.is_multiple_of(self.patch_w) {
            return Err(Error::Config(format!(
                "frame {}x{} is not divisible into {}x{} patches",
                self.height, self.width, self.patch_h, self.patch_w
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("frame dims must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_h) * (self.width / self.patch_w)
    }

    /// Tokens per frame including the class token.
    pub fn tokens(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * 3
    }
}

/// Splits `[n, h, w, 3]` frames into `[n, num_patches, ph·pw·3]`, patches in
/// row-major grid order and pixels row-major inside each patch.
pub fn patchify(frames: &Tensor, cfg: &VisualConfig) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != cfg.height || s[2] != cfg.width || s[3] != 3 {
        return Err(Error::shape("patchify", s, &[0, cfg.height, cfg.width, 3]));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / cfg.patch_h, w / cfg.patch_w);
    let plen = cfg.patch_len();
    let mut out = Vec::with_capacity(frames.numel());
    for f in 0..n {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..cfg.patch_h {
                    let row = py * cfg.patch_h + y;
                    let base = ((f * h + row) * w + px * cfg.patch_w) * 3;
                    out.extend_from_slice(&frames.data()[base..base + cfg.patch_w * 3]);
                }
            }
        }
    }
    Tensor::new(&[n, gh * gw, plen], out)
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: VisualConfig,
    pub patch_embed: Linear,
    pub cls_path: String,
    pub pos_path: String,
    pub blocks: Vec<TransformerBlock>,
}

impl VisualEncoder {
    pub fn new(init: &mut Init, path: &str, cfg: &VisualConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = Linear::new(init, &format!("{path}.patch_embed"), cfg.patch_len(), cfg.dim, WeightInit::Uniform);
        let cls_path = format!("{path}.cls_token");
        let pos_path = format!("{path}.pos_embed");
        init.uniform(&cls_path, &[cfg.dim], cfg.token_init);
        init.uniform(&pos_path, &[cfg.tokens(), cfg.dim], cfg.token_init);
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(init, &format!("{path}.blocks.{i}"), cfg.dim, cfg.heads, false))
            .collect::<Result<_>>()?;
        Ok(VisualEncoder {
            cfg: cfg.clone(),
            patch_embed,
            cls_path,
            pos_path,
            blocks,
        })
    }

    /// Token embeddings before the transformer blocks: `[n, 1+Np, c]`.
    pub fn embed<'g>(&self, b: &Binder<'g>, patches: &Var<'g>) -> Result<Var<'g>> {
        let n = patches.shape()[0];
        let emb = self.patch_embed.forward(b, patches)?;
        let cls = tile_row(&b.param(&self.cls_path)?, n)?;
        add_slab(&Var::concat(&[cls, emb], 1)?, &b.param(&self.pos_path)?)
    }

    /// Encodes `[bs, t, h, w, 3]` images into `[bs, t, 1+Np, c]` tokens;
    /// frames are processed independently.
    pub fn encode<'g>(&self, b: &Binder<'g>, images: &Tensor) -> Result<Var<'g>> {
        let s = images.shape();
        if s.len() != 5 {
            return Err(Error::invalid("encode_frames", format!("expected [b, t, h, w, 3], got {s:?}")));
        }
        let (bs, t) = (s[0], s[1]);
        let frames = images.reshape(&[bs * t, s[2], s[3], s[4]])?;
        let patches = b.graph().constant(patchify(&frames, &self.cfg)?);
        let mut x = self.embed(b, &patches)?;
        for blk in &self.blocks {
            x = blk.forward(b, &x)?;
        }
        x.reshape(&[bs, t, self.cfg.tokens(), self.cfg.dim])
    }
}

/// Mean over tokens and frames: `[bs, t, l, c]` → `[bs, c]`.
pub fn sequence_feature<'g>(tokens: &Var<'g>) -> Result<Var<'g>> {
    tokens.mean_axis(2)?.mean_axis(1)
}
