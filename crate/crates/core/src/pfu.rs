//! Identity prototypes: per-modality class means, gated fusion of the two
//! modalities, a per-sample attention update, and the prototype
//! classification loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::nn::{tile_matrix, Attention, Binder, Init, Mlp2, WeightInit};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfuConfig {
    pub heads: usize,
}

impl Default for PfuConfig {
    fn default() -> Self {
        PfuConfig { heads: 4 }
    }
}

/// Row `c` is the mean of the rows of `features` labelled `c`.
pub fn intra_id_pool(features: &Tensor, labels: &[usize], classes: usize) -> Result<Tensor> {
    let (n, c) = match features.shape() {
        [n, c] => (*n, *c),
        s => return Err(Error::invalid("intra_id_pool", format!("features must be [n, c], got {s:?}"))),
    };
    if labels.len() != n {
        return Err(Error::invalid("intra_id_pool", format!("{} labels for {n} features", labels.len())));
    }
    let mut sums = vec![0.0; classes * c];
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid("intra_id_pool", format!("label {y} outside {classes} identities")));
        }
        counts[y] += 1;
        for (s, v) in sums[y * c..(y + 1) * c].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&k| k == 0) {
        return Err(Error::Data(format!("identity {empty} has no samples to pool")));
    }
    for (y, &k) in counts.iter().enumerate() {
        sums[y * c..(y + 1) * c].iter_mut().for_each(|s| *s /= k as f64);
    }
    Tensor::new(&[classes, c], sums)
}

#[derive(Clone, Debug)]
pub struct Pfu {
    pub gate: Mlp2,
    pub self_attn: Attention,
    pub cross_attn: Attention,
    pub refine: Mlp2,
    pub dim: usize,
}

impl Pfu {
    pub fn new(init: &mut Init, path: &str, dim: usize, cfg: &PfuConfig) -> Result<Self> {
        Ok(Pfu {
            gate: Mlp2::new(init, &format!("{path}.gate"), 2 * dim, dim, 1, WeightInit::Uniform),
            self_attn: Attention::new(init, &format!("{path}.self_attn"), dim, cfg.heads, WeightInit::Uniform)?,
            cross_attn: Attention::new(init, &format!("{path}.cross_attn"), dim, cfg.heads, WeightInit::Uniform)?,
            refine: Mlp2::new(init, &format!("{path}.refine"), dim, 2 * dim, dim, WeightInit::Zero),
            dim,
        })
    }

    /// Per-identity gate `alpha = sigmoid(MLP([P_S | P_V]))` and the fused
    /// prototypes `alpha·P_S + (1−alpha)·P_V`.
    pub fn fuse<'g>(&self, b: &Binder<'g>, ps: &Var<'g>, pv: &Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
        if ps.shape() != pv.shape() {
            return Err(Error::shape("fuse", &ps.shape(), &pv.shape()));
        }
        let alpha = self.gate.forward(b, &Var::concat(&[*ps, *pv], 1)?)?.sigmoid();
        Ok((Var::lerp_rows(ps, pv, &alpha)?, alpha))
    }

    /// Per-sample prototypes `P_F + MLP(CrossAttn(SelfAttn(P_F), F))` for
    /// fused tokens `[bs, l, c]`, giving `[bs, K, c]`.
    pub fn update<'g>(&self, b: &Binder<'g>, fused: &Var<'g>, tokens: &Var<'g>) -> Result<Var<'g>> {
        let ts = tokens.shape();
        if ts.len() != 3 || ts[2] != self.dim {
            return Err(Error::shape("prototype_update", &fused.shape(), &ts));
        }
        let p = tile_matrix(fused, ts[0])?;
        let attended = self.self_attn.self_attend(b, &p)?;
        let context = self.cross_attn.forward(b, &attended, tokens)?;
        p.add(&self.refine.forward(b, &context)?)
    }
}

/// Fused token sequence for the update: frame means of the visual tokens
/// `[bs, t, Lv, c]` followed by those of the skeleton tokens `[bs, t, Ls, c]`.
pub fn fused_tokens<'g>(visual: &Var<'g>, skeleton: &Var<'g>) -> Result<Var<'g>> {
    Var::concat(&[visual.mean_axis(1)?, skeleton.mean_axis(1)?], 1)
}

/// Softmax over `f_i · P̂_{i,k}` against the one-hot identity, averaged
/// over the batch. `feats: [bs, c]`, `protos: [bs, K, c]`.
pub fn csip_loss<'g>(feats: &Var<'g>, labels: &[usize], protos: &Var<'g>) -> Result<Var<'g>> {
    let (fs, ps) = (feats.shape(), protos.shape());
    if fs.len() != 2 || ps.len() != 3 || ps[0] != fs[0] || ps[2] != fs[1] {
        return Err(Error::shape("csip_loss", &fs, &ps));
    }
    let logits = feats.reshape(&[fs[0], 1, fs[1]])?.bmm(protos, true)?.reshape(&[fs[0], ps[1]])?;
    cross_entropy(&logits, labels)
}
