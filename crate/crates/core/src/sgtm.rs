//! Skeleton-guided temporal modelling: per-frame message tokens, skeleton
//! distillation into the visual messages, the unified typed token sequence,
//! per-column aggregation and the frame-level identity loss.
//!
//! Skeleton inputs are consumed only in [`Mode::Train`]. In [`Mode::Test`]
//! the distillation step is skipped and the sequence holds visual tokens and
//! visual messages only, so test features cannot depend on skeletons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::nn::{Attention, Binder, Init, Linear, TransformerBlock, WeightInit};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Test,
}

/// Rows of the type-embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenType {
    Visual = 0,
    VisualMessage = 1,
    Skeleton = 2,
    SkeletonMessage = 3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgtmConfig {
    pub heads: usize,
    /// Zero-init the aggregation block's residual branches.
    pub identity_init: bool,
    pub type_init: f64,
}

impl Default for SgtmConfig {
    fn default() -> Self {
        SgtmConfig {
            heads: 4,
            identity_init: false,
            type_init: 0.02,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgtm {
    pub visual_proj: Linear,
    pub skeleton_proj: Linear,
    pub visual_temporal: Attention,
    pub skeleton_temporal: Attention,
    pub distill: Attention,
    pub type_path: String,
    pub block: TransformerBlock,
    pub query_path: String,
    pub classifier: Linear,
    pub dim: usize,
}

pub struct SgtmOutput<'g> {
    /// Aggregated tokens `[bs·t, L, c]`.
    pub tokens: Var<'g>,
    /// Attention-pooled frame features `[bs·t, c]`.
    pub pooled: Var<'g>,
    pub frame_loss: Option<Var<'g>>,
}

impl Sgtm {
    pub fn new(init: &mut Init, path: &str, dim: usize, classes: usize, cfg: &SgtmConfig) -> Result<Self> {
        let type_path = format!("{path}.type_embed");
        init.uniform(&type_path, &[4, dim], cfg.type_init);
        let query_path = format!("{path}.pool_query");
        init.uniform(&query_path, &[dim], 1.0 / (dim as f64).sqrt());
        Ok(Sgtm {
            visual_proj: Linear::new(init, &format!("{path}.mte.visual_proj"), dim, dim, WeightInit::Uniform),
            skeleton_proj: Linear::new(init, &format!("{path}.mte.skeleton_proj"), dim, dim, WeightInit::Uniform),
            visual_temporal: Attention::new(init, &format!("{path}.mte.visual_attn"), dim, cfg.heads, WeightInit::Uniform)?,
            skeleton_temporal: Attention::new(init, &format!("{path}.mte.skeleton_attn"), dim, cfg.heads, WeightInit::Uniform)?,
            distill: Attention::new(init, &format!("{path}.atd"), dim, cfg.heads, WeightInit::Zero)?,
            type_path,
            block: TransformerBlock::new(init, &format!("{path}.aggregate"), dim, cfg.heads, cfg.identity_init)?,
            query_path,
            classifier: Linear::new(init, &format!("{path}.classifier"), dim, classes, WeightInit::Uniform),
            dim,
        })
    }

    /// Frame mean of `[bs, t, l, c]` tokens, projected, then self-attention
    /// across the `t` frames: `[bs, t, c]`.
    pub fn message<'g>(&self, b: &Binder<'g>, tokens: &Var<'g>, proj: &Linear, attn: &Attention) -> Result<Var<'g>> {
        let s = tokens.shape();
        if s.len() != 4 || s[1] == 0 || s[3] != self.dim {
            return Err(Error::invalid("message_tokens", format!("expected [bs, t>0, l, {}], got {s:?}", self.dim)));
        }
        attn.self_attend(b, &proj.forward(b, &tokens.mean_axis(2)?)?)
    }

    pub fn visual_messages<'g>(&self, b: &Binder<'g>, tokens: &Var<'g>) -> Result<Var<'g>> {
        self.message(b, tokens, &self.visual_proj, &self.visual_temporal)
    }

    pub fn skeleton_messages<'g>(&self, b: &Binder<'g>, tokens: &Var<'g>) -> Result<Var<'g>> {
        self.message(b, tokens, &self.skeleton_proj, &self.skeleton_temporal)
    }

    /// `m_vis + CrossAttn(m_vis, m_ske)` on `[bs, t, c]` messages.
    pub fn distill<'g>(&self, b: &Binder<'g>, m_vis: &Var<'g>, m_ske: &Var<'g>) -> Result<Var<'g>> {
        if m_vis.shape() != m_ske.shape() {
            return Err(Error::shape("distill", &m_vis.shape(), &m_ske.shape()));
        }
        m_vis.add(&self.distill.forward(b, m_vis, m_ske)?)
    }

    fn typed<'g>(&self, b: &Binder<'g>, x: &Var<'g>, ty: TokenType) -> Result<Var<'g>> {
        let row = b.param(&self.type_path)?.slice(0, ty as usize, 1)?.reshape(&[self.dim])?;
        x.add_row(&row)
    }

    /// Unified sequence `[bs·t, L, c]`: visual tokens, visual message, and in
    /// training the skeleton tokens and skeleton message, each with its type
    /// row added. `skeleton` is `(tokens [bs,t,Ls,c], messages [bs,t,c])`.
    pub fn assemble<'g>(
        &self,
        b: &Binder<'g>,
        visual: &Var<'g>,
        m_vis: &Var<'g>,
        skeleton: Option<(&Var<'g>, &Var<'g>)>,
    ) -> Result<Var<'g>> {
        let vs = visual.shape();
        let (bs, t) = (vs[0], vs[1]);
        let as_token = |m: &Var<'g>| m.reshape(&[bs, t, 1, self.dim]);
        let mut parts = vec![
            self.typed(b, visual, TokenType::Visual)?,
            self.typed(b, &as_token(m_vis)?, TokenType::VisualMessage)?,
        ];
        if let Some((tokens, m_ske)) = skeleton {
            let ss = tokens.shape();
            if ss.len() != 4 || ss[..2] != vs[..2] {
                return Err(Error::shape("assemble", &vs, &ss));
            }
            parts.push(self.typed(b, tokens, TokenType::Skeleton)?);
            parts.push(self.typed(b, &as_token(m_ske)?, TokenType::SkeletonMessage)?);
        }
        let x = Var::concat(&parts, 2)?;
        let l = x.shape()[2];
        x.reshape(&[bs * t, l, self.dim])
    }

    pub fn aggregate<'g>(&self, b: &Binder<'g>, x: &Var<'g>) -> Result<Var<'g>> {
        self.block.forward(b, x)
    }

    /// Softmax(query · token) weights over the `L` tokens of each column:
    /// `[n, L]`.
    pub fn pool_weights<'g>(&self, b: &Binder<'g>, tokens: &Var<'g>) -> Result<Var<'g>> {
        let s = tokens.shape();
        let q = b.param(&self.query_path)?.reshape(&[self.dim, 1])?;
        tokens.reshape(&[s[0] * s[1], s[2]])?.matmul(&q)?.reshape(&[s[0], s[1]])?.softmax()
    }

    /// Attention-pooled frame features `[n, c]`.
    pub fn pool<'g>(&self, b: &Binder<'g>, tokens: &Var<'g>) -> Result<Var<'g>> {
        let s = tokens.shape();
        let w = self.pool_weights(b, tokens)?.reshape(&[s[0], 1, s[1]])?;
        w.bmm(tokens, false)?.reshape(&[s[0], s[2]])
    }

    /// Identity cross-entropy of every frame of every sample, averaged over
    /// `bs·t`. `pooled: [bs·t, c]`, one label per sample.
    pub fn frame_loss<'g>(&self, b: &Binder<'g>, pooled: &Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
        let n = pooled.shape()[0];
        if labels.is_empty() || !n.is_multiple_of(labels.len()) {
            return Err(Error::invalid("frame_loss", format!("{n} frames for {} samples", labels.len())));
        }
        let t = n / labels.len();
        let per_frame: Vec<usize> = labels.iter().flat_map(|&y| std::iter::repeat_n(y, t)).collect();
        cross_entropy(&self.classifier.forward(b, pooled)?, &per_frame)
    }

    /// Full pass. In training, `skeleton` tokens `[bs, t, Ls, c]` are
    /// required and `labels` enable the frame loss. In test mode skeleton
    /// inputs are never read.
    pub fn forward<'g>(
        &self,
        b: &Binder<'g>,
        visual: &Var<'g>,
        skeleton: Option<&Var<'g>>,
        labels: Option<&[usize]>,
        mode: Mode,
    ) -> Result<SgtmOutput<'g>> {
        let m_vis = self.visual_messages(b, visual)?;
        let x = match mode {
            Mode::Train => {
                let ske = skeleton.ok_or_else(|| Error::invalid("sgtm", "training requires skeleton tokens"))?;
                let m_ske = self.skeleton_messages(b, ske)?;
                let m_hat = self.distill(b, &m_vis, &m_ske)?;
                self.assemble(b, visual, &m_hat, Some((ske, &m_ske)))?
            }
            Mode::Test => self.assemble(b, visual, &m_vis, None)?,
        };
        let tokens = self.aggregate(b, &x)?;
        let pooled = self.pool(b, &tokens)?;
        let frame_loss = match labels {
            Some(y) => Some(self.frame_loss(b, &pooled, y)?),
            None => None,
        };
        Ok(SgtmOutput { tokens, pooled, frame_loss })
    }

    /// Test-mode tracklet features `[bs, c]`: mean of the aggregated tokens
    /// over tokens and frames.
    pub fn inference_features<'g>(&self, b: &Binder<'g>, visual: &Var<'g>) -> Result<Var<'g>> {
        let bs = visual.shape()[0];
        let out = self.forward(b, visual, None, None, Mode::Test)?;
        let s = out.tokens.shape();
        out.tokens.reshape(&[bs, s[0] / bs * s[1], self.dim])?.mean_axis(1)
    }
}

/// Token count of one unified column.
pub fn sequence_length(visual_tokens: usize, skeleton_tokens: usize, mode: Mode) -> usize {
    match mode {
        Mode::Train => visual_tokens + 1 + skeleton_tokens + 1,
        Mode::Test => visual_tokens + 1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests::attention_oracle;
    use crate::nn::ParamStore;
    use crate::rng::stream;
    use crate::tensor::{finite_diff_check_many, CoordSample, Graph, Tensor};
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor {
        let mut r = stream(seed, "sgtm-test", 0);
        Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
    }

    fn build(dim: usize, classes: usize, seed: u64, identity: bool) -> (ParamStore, Sgtm) {
        let mut store = ParamStore::new();
        let cfg = SgtmConfig { heads: 2, identity_init: identity, ..Default::default() };
        let s = Sgtm::new(&mut Init::new(&mut store, seed), "sgtm", dim, classes, &cfg).unwrap();
        (store, s)
    }

    fn rows(t: &Tensor, n: usize) -> Vec<Vec<f64>> {
        t.data().chunks(t.numel() / n).map(|c| c.to_vec()).collect()
    }

    #[test]
    fn lengths_follow_token_accounting() {
        assert_eq!(sequence_length(9, 18, Mode::Train), 29);
        assert_eq!(sequence_length(9, 18, Mode::Test), 10);
        let (store, s) = build(4, 3, 0, false);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let v = g.constant(rand_t(&[2, 3, 9, 4], 1));
        let k = g.constant(rand_t(&[2, 3, 18, 4], 2));
        let train = s.forward(&b, &v, Some(&k), Some(&[0, 2]), Mode::Train).unwrap();
        assert_eq!(train.tokens.shape(), vec![6, 29, 4]);
        let test = s.forward(&b, &v, Some(&k), None, Mode::Test).unwrap();
        assert_eq!(test.tokens.shape(), vec![6, 10, 4]);
    }

    #[test]
    fn messages_match_pooled_attention_oracle() {
        let (store, s) = build(4, 3, 1, false);
        let toks = rand_t(&[1, 3, 5, 4], 3);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let m = s.visual_messages(&b, &g.constant(toks.clone())).unwrap().tensor();
        let pooled = g.constant(toks).mean_axis(2).unwrap();
        let proj = s.visual_proj.forward(&b, &pooled).unwrap().tensor();
        let want = attention_oracle(&store, &s.visual_temporal, &rows(&proj, 3), &rows(&proj, 3));
        for (got, w) in m.data().iter().zip(want.concat()) {
            assert!((got - w).abs() < 1e-10);
        }
    }

    #[test]
    fn identical_frames_give_identical_messages() {
        let (store, s) = build(4, 3, 2, false);
        let frame = rand_t(&[5, 4], 4);
        let toks = Tensor::from_fn(&[1, 3, 5, 4], |i| frame.data()[i % 20]);
        let g = Graph::new();
        let m = s.skeleton_messages(&Binder::new(&g, &store), &g.constant(toks)).unwrap().tensor();
        assert!(m.row(0) == m.row(1) && m.row(1) == m.row(2));
        let one = Tensor::from_fn(&[1, 1, 5, 4], |i| frame.data()[i]);
        let single = s.skeleton_messages(&Binder::new(&g, &store), &g.constant(one)).unwrap().tensor();
        assert!(single.max_abs_diff(&Tensor::new(&[1, 1, 4], m.row(0).to_vec()).unwrap()) < 1e-12);
    }

    #[test]
    fn zero_distill_output_is_identity() {
        let (store, s) = build(4, 3, 3, false);
        let g = Graph::new();
        let mv = rand_t(&[2, 3, 4], 5);
        let out = s.distill(&Binder::new(&g, &store), &g.constant(mv.clone()), &g.constant(rand_t(&[2, 3, 4], 6))).unwrap();
        assert!(out.tensor().bitwise_eq(&mv));
    }

    #[test]
    fn distill_matches_cross_attention_oracle() {
        let (mut store, s) = build(4, 3, 4, false);
        for p in [s.distill.out_proj.weight_path(), s.distill.out_proj.bias_path()] {
            let shape = store.get(&p).unwrap().shape().to_vec();
            *store.get_mut(&p).unwrap() = rand_t(&shape, 7);
        }
        let (mv, ms) = (rand_t(&[1, 2, 4], 8), rand_t(&[1, 2, 4], 9));
        let g = Graph::new();
        let out = s.distill(&Binder::new(&g, &store), &g.constant(mv.clone()), &g.constant(ms.clone())).unwrap().tensor();
        let att = attention_oracle(&store, &s.distill, &rows(&mv, 2), &rows(&ms, 2)).concat();
        for i in 0..8 {
            assert!((out.data()[i] - mv.data()[i] - att[i]).abs() < 1e-10);
        }
        // constant skeleton messages give the same contribution on every frame
        let flat = Tensor::from_fn(&[1, 2, 4], |i| [0.3, -0.2, 0.5, 0.1][i % 4]);
        let out = s.distill(&Binder::new(&g, &store), &g.constant(mv.clone()), &g.constant(flat)).unwrap().tensor();
        for c in 0..4 {
            let d0 = out.data()[c] - mv.data()[c];
            let d1 = out.data()[4 + c] - mv.data()[4 + c];
            assert!((d0 - d1).abs() < 1e-12);
        }
        assert!(s.distill(&Binder::new(&g, &store), &g.constant(mv), &g.constant(rand_t(&[1, 3, 4], 1))).is_err());
    }

    #[test]
    fn zero_types_make_assembly_concatenation() {
        let (mut store, s) = build(4, 3, 5, false);
        *store.get_mut(&s.type_path).unwrap() = Tensor::zeros(&[4, 4]);
        let (v, mv, k, mk) = (rand_t(&[1, 2, 3, 4], 1), rand_t(&[1, 2, 4], 2), rand_t(&[1, 2, 2, 4], 3), rand_t(&[1, 2, 4], 4));
        let g = Graph::new();
        let (kv, mkv) = (g.constant(k.clone()), g.constant(mk.clone()));
        let x = s
            .assemble(&Binder::new(&g, &store), &g.constant(v.clone()), &g.constant(mv.clone()), Some((&kv, &mkv)))
            .unwrap()
            .tensor();
        for f in 0..2 {
            let mut want = v.data()[f * 12..f * 12 + 12].to_vec();
            want.extend_from_slice(&mv.data()[f * 4..f * 4 + 4]);
            want.extend_from_slice(&k.data()[f * 8..f * 8 + 8]);
            want.extend_from_slice(&mk.data()[f * 4..f * 4 + 4]);
            assert_eq!(&x.data()[f * 28..f * 28 + 28], &want[..]);
        }
    }

    #[test]
    fn every_token_gets_its_type_row() {
        let (store, s) = build(4, 3, 6, false);
        let g = Graph::new();
        let z = |shape: &[usize]| g.constant(Tensor::zeros(shape));
        let (k, mk) = (z(&[1, 1, 2, 4]), z(&[1, 1, 4]));
        let x = s.assemble(&Binder::new(&g, &store), &z(&[1, 1, 3, 4]), &z(&[1, 1, 4]), Some((&k, &mk))).unwrap().tensor();
        let e = store.get(&s.type_path).unwrap();
        let types = [0, 0, 0, 1, 2, 2, 3];
        for (pos, &ty) in types.iter().enumerate() {
            assert_eq!(&x.data()[pos * 4..pos * 4 + 4], e.row(ty));
        }
    }

    #[test]
    fn pooling_weights_sum_to_one_and_singleton_is_exact() {
        let (store, s) = build(4, 3, 7, false);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let w = s.pool_weights(&b, &g.constant(rand_t(&[5, 7, 4], 8))).unwrap().tensor();
        for r in 0..5 {
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let one = rand_t(&[3, 1, 4], 9);
        let z = s.pool(&b, &g.constant(one.clone())).unwrap().tensor();
        assert_eq!(z.data(), one.data());
    }

    #[test]
    fn uniform_classifier_gives_log_k() {
        let (mut store, s) = build(4, 5, 8, false);
        *store.get_mut(&s.classifier.weight_path()).unwrap() = Tensor::zeros(&[4, 5]);
        *store.get_mut(&s.classifier.bias_path()).unwrap() = Tensor::zeros(&[5]);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        for (bs, t) in [(1, 1), (2, 3), (4, 2)] {
            let labels: Vec<usize> = (0..bs).map(|i| i % 5).collect();
            let l = s.frame_loss(&b, &g.constant(rand_t(&[bs * t, 4], 1)), &labels).unwrap();
            assert!((l.item().unwrap() - 5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_loss_matches_triple_sum() {
        let (store, s) = build(4, 3, 9, false);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let toks = rand_t(&[4, 6, 4], 10);
        let labels = [2, 0];
        let loss = s.frame_loss(&b, &s.pool(&b, &g.constant(toks.clone())).unwrap(), &labels).unwrap().item().unwrap();
        let q = store.get(&s.query_path).unwrap();
        let w = store.get(&s.classifier.weight_path()).unwrap();
        let bias = store.get(&s.classifier.bias_path()).unwrap();
        let mut total = 0.0;
        for i in 0..2 {
            for t in 0..2 {
                let col = i * 2 + t;
                let tok = |l: usize, c: usize| toks.data()[(col * 6 + l) * 4 + c];
                let sc: Vec<f64> = (0..6).map(|l| (0..4).map(|c| tok(l, c) * q.data()[c]).sum()).collect();
                let den: f64 = sc.iter().map(|x| x.exp()).sum();
                let z: Vec<f64> = (0..4).map(|c| (0..6).map(|l| sc[l].exp() / den * tok(l, c)).sum()).collect();
                let logits: Vec<f64> = (0..3).map(|k| bias.data()[k] + (0..4).map(|c| z[c] * w.data()[c * 3 + k]).sum::<f64>()).collect();
                let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
                total -= logits[labels[i]] - lse;
            }
        }
        assert!((loss - total / 4.0).abs() < 1e-9);
    }

    #[test]
    fn identity_block_feature_is_typed_token_mean() {
        let (store, s) = build(4, 3, 10, true);
        let v = rand_t(&[1, 2, 3, 4], 11);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let vv = g.constant(v.clone());
        let f = s.inference_features(&b, &vv).unwrap().tensor();
        let m = s.visual_messages(&b, &vv).unwrap().tensor();
        let e = store.get(&s.type_path).unwrap();
        for c in 0..4 {
            let mut acc = 0.0;
            for t in 0..2 {
                for l in 0..3 {
                    acc += v.data()[(t * 3 + l) * 4 + c] + e.data()[c];
                }
                acc += m.data()[t * 4 + c] + e.data()[4 + c];
            }
            assert!((f.data()[c] - acc / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_frames_keep_feature() {
        let (store, s) = build(4, 3, 11, false);
        let frame = rand_t(&[1, 1, 3, 4], 12);
        let twice = Tensor::from_fn(&[1, 2, 3, 4], |i| frame.data()[i % 12]);
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        let a = s.inference_features(&b, &g.constant(frame)).unwrap().tensor();
        let d = s.inference_features(&b, &g.constant(twice)).unwrap().tensor();
        assert!(a.max_abs_diff(&d) < 1e-12);
    }

    #[test]
    fn test_mode_ignores_skeleton_bitwise() {
        let (store, s) = build(4, 3, 12, false);
        let v = rand_t(&[2, 3, 5, 4], 13);
        let run = |ske: Option<Tensor>| {
            let g = Graph::new();
            let b = Binder::new(&g, &store);
            let k = ske.map(|t| g.constant(t));
            s.forward(&b, &g.constant(v.clone()), k.as_ref(), None, Mode::Test).unwrap().pooled.tensor()
        };
        let absent = run(None);
        assert!(absent.bitwise_eq(&run(Some(rand_t(&[2, 3, 18, 4], 14)))));
        assert!(absent.bitwise_eq(&run(Some(Tensor::zeros(&[2, 3, 18, 4])))));
        let g = Graph::new();
        let b = Binder::new(&g, &store);
        assert!(s.forward(&b, &g.constant(v), None, Some(&[0, 1]), Mode::Train).is_err());
    }

    #[test]
    fn full_train_path_passes_gradient_check() {
        let (mut store, s) = build(4, 3, 13, false);
        for p in [s.distill.out_proj.weight_path(), s.distill.out_proj.bias_path()] {
            let shape = store.get(&p).unwrap().shape().to_vec();
            *store.get_mut(&p).unwrap() = rand_t(&shape, 15);
        }
        let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
        let mut inputs: Vec<Tensor> = names.iter().map(|k| store.get(k).unwrap().clone()).collect();
        inputs.push(rand_t(&[2, 2, 3, 4], 16));
        inputs.push(rand_t(&[2, 2, 2, 4], 17));
        let err = finite_diff_check_many(
            |g, vs| {
                let n = names.len();
                let b = Binder::from_vars(g, names.iter().cloned().zip(vs[..n].iter().copied()).collect());
                let out = s.forward(&b, &vs[n], Some(&vs[n + 1]), Some(&[1, 2]), Mode::Train)?;
                Ok(out.frame_loss.expect("labels given"))
            },
            &inputs,
            1e-5,
            CoordSample::Random { count: 300, seed: 3 },
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
