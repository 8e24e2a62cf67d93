//! Cross-modal alignment of pooled visual and skeleton features with
//! supervised contrastive losses in both directions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Binder, Init, Linear, ParamStore, WeightInit};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    /// Shared projection width; 0 means the model dim.
    pub shared_dim: usize,
    pub tau: f64,
    /// Center each modality's features before projection: by the batch
    /// mean while training, by the stored training-set mean at retrieval.
    pub center_inputs: bool,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            shared_dim: 0,
            tau: 0.07,
            center_inputs: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlignHeads {
    pub visual: Linear,
    pub skeleton: Linear,
    pub tau: f64,
    /// Buffer paths of the input means, when centering is on.
    pub centers: Option<(String, String)>,
}

impl AlignHeads {
    pub fn new(init: &mut Init, path: &str, dim: usize, cfg: &AlignConfig) -> Result<Self> {
        if cfg.tau <= 0.0 {
            return Err(Error::Config(format!("align.tau = {} must be positive", cfg.tau)));
        }
        let shared = if cfg.shared_dim == 0 { dim } else { cfg.shared_dim };
        let centers = cfg.center_inputs.then(|| {
            let (v, s) = (format!("{path}.visual_center"), format!("{path}.skeleton_center"));
            init.constant(&v, &[dim], 0.0);
            init.constant(&s, &[dim], 0.0);
            (v, s)
        });
        Ok(AlignHeads {
            visual: Linear::new(init, &format!("{path}.visual_proj"), dim, shared, WeightInit::Uniform),
            skeleton: Linear::new(init, &format!("{path}.skeleton_proj"), dim, shared, WeightInit::Uniform),
            tau: cfg.tau,
            centers,
        })
    }

    fn project<'g>(&self, b: &Binder<'g>, head: &Linear, center: Option<&str>, x: &Var<'g>) -> Result<Var<'g>> {
        match center {
            Some(path) => head.forward(b, &x.add_row(&b.buffer(path)?.scale(-1.0))?),
            None => head.forward(b, x),
        }
    }

    /// `J_v` applied to `[bs, c]` pooled visual features.
    pub fn project_visual<'g>(&self, b: &Binder<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        self.project(b, &self.visual, self.centers.as_ref().map(|c| c.0.as_str()), x)
    }

    /// `J_s` applied to `[bs, c]` pooled skeleton features.
    pub fn project_skeleton<'g>(&self, b: &Binder<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        self.project(b, &self.skeleton, self.centers.as_ref().map(|c| c.1.as_str()), x)
    }

    /// Stores the mean visual and skeleton features subtracted before
    /// projection at retrieval. A no-op without centering.
    pub fn set_centers(&self, store: &mut ParamStore, visual: Tensor, skeleton: Tensor) -> Result<()> {
        if let Some((v, s)) = &self.centers {
            for (path, value) in [(v, visual), (s, skeleton)] {
                let slot = store.get_mut(path)?;
                if slot.shape() != value.shape() {
                    return Err(Error::shape("set_centers", slot.shape(), value.shape()));
                }
                *slot = value;
            }
        }
        Ok(())
    }

    /// `S[i][j] = J_v(v_i) · J_s(s_j)` for `[bs, c]` pooled features. With
    /// centering both inputs first lose their batch mean.
    pub fn similarity<'g>(&self, b: &Binder<'g>, visual: &Var<'g>, skeleton: &Var<'g>) -> Result<Var<'g>> {
        if visual.shape()[0] != skeleton.shape()[0] {
            return Err(Error::shape("similarity_matrix", &visual.shape(), &skeleton.shape()));
        }
        let center = |x: &Var<'g>| -> Result<Var<'g>> {
            if self.centers.is_some() {
                x.add_row(&x.mean_axis(0)?.scale(-1.0))
            } else {
                Ok(*x)
            }
        };
        let pv = self.visual.forward(b, &center(visual)?)?;
        let ps = self.skeleton.forward(b, &center(skeleton)?)?;
        pv.matmul(&ps.transpose()?)
    }
}

/// Row weights `1/|P_i|` on same-identity columns.
fn positive_weights(labels: &[usize]) -> Tensor {
    let n = labels.len();
    let counts: Vec<usize> = labels.iter().map(|y| labels.iter().filter(|z| *z == y).count()).collect();
    Tensor::from_fn(&[n, n], |k| {
        let (i, j) = (k / n, k % n);
        if labels[i] == labels[j] {
            1.0 / counts[i] as f64
        } else {
            0.0
        }
    })
}

/// Visual-to-skeleton and skeleton-to-visual supervised contrastive losses
/// from a `[bs, bs]` similarity matrix, each averaged over the batch.
pub fn contrastive_losses<'g>(sim: &Var<'g>, labels: &[usize], tau: f64) -> Result<(Var<'g>, Var<'g>)> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let n = labels.len();
    if sim.shape() != [n, n] || n == 0 {
        return Err(Error::shape("contrastive_losses", &sim.shape(), &[n, n]));
    }
    let w = sim.graph().constant(positive_weights(labels));
    let scaled = sim.scale(1.0 / tau);
    let direction = |m: Var<'g>| -> Result<Var<'g>> { Ok(m.log_softmax()?.mul(&w)?.sum().scale(-1.0 / n as f64)) };
    Ok((direction(scaled)?, direction(scaled.transpose()?)?))
}
