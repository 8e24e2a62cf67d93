//! Registry of central finite-difference checks over every differentiable
//! primitive, layer and training loss. The command line and the test suite
//! both run it.

use std::ops::Range;

use rand::Rng as _;
use serde::Serialize;

use crate::align::{contrastive_losses, AlignConfig, AlignHeads};
use crate::error::Result;
use crate::losses::{batch_hard_triplet, label_smoothed_ce, SmoothedClassifier};
use crate::nn::{Attention, Binder, Init, LayerNorm, Linear, Mlp2, ParamStore, TransformerBlock, WeightInit};
use crate::pfu::{csip_loss, Pfu, PfuConfig};
use crate::rng::stream;
use crate::sgtm::{Mode, Sgtm, SgtmConfig};
use crate::skeleton::{draw_stpr_masks, SgtConfig, SkeletonEncoder, SkeletonGraph};
use crate::tensor::{finite_diff_relative, CoordSample, Graph, Tensor, Var};
use crate::visual::{sequence_feature, VisualConfig, VisualEncoder};

/// Largest accepted `|analytic − numeric| / max(ABS_FLOOR, |analytic|)`.
pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-5;
pub const STEP: f64 = 1e-6;
pub const DEFAULT_SEEDS: usize = 20;
/// Coordinates sampled per seed for checks with many parameters.
const SAMPLED_COORDS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Primitive,
    Layer,
    Loss,
}

type CheckFn = fn(u64) -> Result<f64>;

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub kind: CaseKind,
    check: CheckFn,
}

impl std::fmt::Debug for GradCase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "GradCase({})", self.name)
    }
}

impl GradCase {
    /// Worst relative error over the case's coordinates for one seed.
    pub fn check(&self, seed: u64) -> Result<f64> {
        (self.check)(seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteRow {
    pub name: &'static str,
    pub kind: CaseKind,
    pub seeds: usize,
    pub max_error: f64,
    pub worst_seed: u64,
    pub passed: bool,
}

pub fn run_case(case: &GradCase, seeds: Range<u64>) -> Result<SuiteRow> {
    let n = seeds.clone().count();
    let (mut worst, mut worst_seed) = (0.0f64, seeds.start);
    for seed in seeds {
        let e = case.check(seed)?;
        // NaN compares false and must still be reported
        if e.is_nan() || e > worst {
            worst = e;
            worst_seed = seed;
            if e.is_nan() {
                break;
            }
        }
    }
    Ok(SuiteRow {
        name: case.name,
        kind: case.kind,
        seeds: n,
        max_error: worst,
        worst_seed,
        passed: worst <= REL_TOL,
    })
}

/// Runs every registered case whose name contains `filter`.
pub fn run_suite(seeds: usize, filter: Option<&str>) -> Result<Vec<SuiteRow>> {
    registry()
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| run_case(c, 0..seeds as u64))
        .collect()
}

fn rand_t(shape: &[usize], seed: u64, label: &str) -> Tensor {
    let mut r = stream(seed, label, shape.iter().product::<usize>() as u64);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

fn inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| rand_t(s, seed, &format!("gradcheck-input-{i}")))
        .collect()
}

/// Random fixed projection to a scalar, so every output coordinate matters.
fn weighted<'g>(y: Var<'g>) -> Result<Var<'g>> {
    let w = y.graph().constant(rand_t(&y.shape(), 7, "gradcheck-weights"));
    Ok(y.mul(&w)?.sum())
}

/// A stencil that straddles a ReLU kink gives a wrong difference quotient
/// for a correct gradient, so a failing check is repeated once at a tenth of
/// the step. A wrong gradient fails at both.
fn check<F>(f: F, xs: &[Tensor], coords: CoordSample) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let coarse = finite_diff_relative(&f, xs, STEP, coords, ABS_FLOOR)?;
    if coarse <= REL_TOL {
        return Ok(coarse);
    }
    finite_diff_relative(&f, xs, STEP / 10.0, coords, ABS_FLOOR)
}

/// Checks through every parameter of `store` plus the `extra` inputs,
/// sampling coordinates.
fn check_params<F>(store: &ParamStore, extra: Vec<Tensor>, seed: u64, f: F) -> Result<f64>
where
    F: for<'g> Fn(&Binder<'g>, &[Var<'g>]) -> Result<Var<'g>>,
{
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    let mut xs: Vec<Tensor> = store.iter().map(|(_, v)| v.clone()).collect();
    xs.extend(extra);
    let n = names.len();
    check(
        |g, vs| {
            let b = Binder::from_vars(g, names.iter().cloned().zip(vs[..n].iter().copied()).collect());
            f(&b, &vs[n..])
        },
        &xs,
        CoordSample::Random { count: SAMPLED_COORDS, seed },
    )
}

/// Overwrites a parameter with random values; used to open branches that
/// start at zero.
fn randomize(store: &mut ParamStore, path: &str, seed: u64) {
    let p = store.get_mut(path).expect("registered parameter");
    *p = rand_t(p.shape(), seed, path);
}

macro_rules! primitive {
    ($name:expr, [$($s:expr),*], |$v:ident| $body:expr) => {{
        fn run(seed: u64) -> Result<f64> {
            let xs = inputs(&[$(&$s),*], seed);
            check(|_, $v| $body, &xs, CoordSample::All)
        }
        GradCase { name: $name, kind: CaseKind::Primitive, check: run }
    }};
}

fn skeleton_encoder(seed: u64) -> (ParamStore, SkeletonEncoder) {
    let cfg = SgtConfig { layers: 1, heads: 2, dim: 8, pe_dim: 2, ..Default::default() };
    let mut store = ParamStore::new();
    let enc = SkeletonEncoder::new(&mut Init::new(&mut store, seed), "skeleton", &cfg, &SkeletonGraph::path(5))
        .expect("valid encoder");
    (store, enc)
}

fn sgtm(seed: u64) -> (ParamStore, Sgtm) {
    let mut store = ParamStore::new();
    let cfg = SgtmConfig { heads: 2, ..Default::default() };
    let s = Sgtm::new(&mut Init::new(&mut store, seed), "sgtm", 4, 3, &cfg).expect("valid module");
    randomize(&mut store, &s.distill.out_proj.weight_path(), seed);
    (store, s)
}

fn pfu(seed: u64) -> (ParamStore, Pfu) {
    let mut store = ParamStore::new();
    let p = Pfu::new(&mut Init::new(&mut store, seed), "pfu", 4, &PfuConfig { heads: 2 }).expect("valid module");
    randomize(&mut store, "pfu.refine.fc2.weight", seed);
    (store, p)
}

fn align_direction(seed: u64, which: usize) -> Result<f64> {
    let mut store = ParamStore::new();
    let h = AlignHeads::new(&mut Init::new(&mut store, seed), "align", 4, &AlignConfig { tau: 0.1, ..Default::default() })?;
    let extra = inputs(&[&[4, 4], &[4, 4]], seed);
    check_params(&store, extra, seed, |b, v| {
        let sim = h.similarity(b, &v[0], &v[1])?;
        let (v2s, s2v) = contrastive_losses(&sim, &[0, 1, 0, 1], h.tau)?;
        Ok(if which == 0 { v2s } else { s2v })
    })
}

fn primitives() -> Vec<GradCase> {
    vec![
        primitive!("add", [[3, 2], [3, 2]], |v| weighted(v[0].add(&v[1])?)),
        primitive!("sub", [[3, 2], [3, 2]], |v| weighted(v[0].sub(&v[1])?)),
        primitive!("mul", [[3, 2], [3, 2]], |v| weighted(v[0].mul(&v[1])?)),
        primitive!("scale", [[4]], |v| weighted(v[0].scale(-1.7))),
        primitive!("shift", [[4]], |v| weighted(v[0].shift(0.3).mul(&v[0])?)),
        primitive!("matmul", [[2, 3], [3, 4]], |v| weighted(v[0].matmul(&v[1])?)),
        primitive!("bmm", [[2, 2, 3], [2, 3, 2]], |v| weighted(v[0].bmm(&v[1], false)?)),
        primitive!("bmm_transposed", [[2, 2, 3], [2, 4, 3]], |v| weighted(v[0].bmm(&v[1], true)?)),
        primitive!("transpose", [[2, 3]], |v| weighted(v[0].transpose()?)),
        primitive!("permute", [[2, 3, 2]], |v| weighted(v[0].permute(&[2, 0, 1])?)),
        primitive!("reshape", [[2, 3]], |v| weighted(v[0].reshape(&[3, 2])?.exp())),
        primitive!("concat", [[2, 1, 2], [2, 3, 2]], |v| weighted(Var::concat(&[v[0], v[1]], 1)?)),
        primitive!("slice", [[3, 4]], |v| weighted(v[0].slice(1, 1, 2)?)),
        primitive!("exp", [[5]], |v| weighted(v[0].exp())),
        primitive!("log", [[5]], |v| weighted(v[0].mul(&v[0])?.shift(0.5).log())),
        primitive!("relu", [[6]], |v| weighted(v[0].relu())),
        primitive!("sigmoid", [[5]], |v| weighted(v[0].sigmoid())),
        primitive!("tanh", [[5]], |v| weighted(v[0].tanh())),
        primitive!("sqrt", [[5]], |v| weighted(v[0].mul(&v[0])?.shift(0.2).sqrt())),
        primitive!("clamp_min", [[6]], |v| weighted(v[0].clamp_min(0.05))),
        primitive!("softmax", [[2, 4]], |v| weighted(v[0].scale(2.0).softmax()?)),
        primitive!("log_softmax", [[2, 4]], |v| weighted(v[0].log_softmax()?)),
        primitive!("sum_axis", [[2, 3, 2]], |v| weighted(v[0].sum_axis(1)?)),
        primitive!("mean_axis", [[2, 3, 2]], |v| weighted(v[0].mean_axis(2)?)),
        primitive!("sum", [[3, 2]], |v| Ok(v[0].exp().sum())),
        primitive!("mean", [[3, 2]], |v| v[0].exp().mean()),
        primitive!("l1_norm", [[5]], |v| Ok(v[0].l1_norm())),
        primitive!("l2_norm", [[5]], |v| Ok(v[0].l2_norm())),
        primitive!("sq_dist", [[3, 2], [4, 2]], |v| weighted(v[0].sq_dist(&v[1])?)),
        primitive!("sq_dist_self", [[3, 2]], |v| weighted(v[0].sq_dist(&v[0])?)),
        primitive!("layer_norm", [[3, 4], [4], [4]], |v| weighted(v[0].layer_norm(&v[1], &v[2], 1e-5)?)),
        primitive!("gather_rows", [[3, 2]], |v| weighted(v[0].gather_rows(&[2, 0, 2, 1])?)),
        primitive!("gather", [[3, 2]], |v| weighted(v[0].gather(&[5, 0, 5])?)),
        primitive!("add_row", [[3, 2], [2]], |v| weighted(v[0].add_row(&v[1])?)),
        primitive!("lerp_rows", [[3, 2], [3, 2], [3, 1]], |v| weighted(Var::lerp_rows(&v[0], &v[1], &v[2].sigmoid())?)),
    ]
}

fn layers() -> Vec<GradCase> {
    fn linear(seed: u64) -> Result<f64> {
        let mut store = ParamStore::new();
        let l = Linear::new(&mut Init::new(&mut store, seed), "lin", 4, 3, WeightInit::Uniform);
        check_params(&store, inputs(&[&[2, 3, 4]], seed), seed, |b, v| weighted(l.forward(b, &v[0])?))
    }
    fn mlp(seed: u64) -> Result<f64> {
        let mut store = ParamStore::new();
        let m = Mlp2::new(&mut Init::new(&mut store, seed), "mlp", 4, 6, 4, WeightInit::Uniform);
        check_params(&store, inputs(&[&[3, 4]], seed), seed, |b, v| weighted(m.forward(b, &v[0])?))
    }
    fn layer_norm(seed: u64) -> Result<f64> {
        let mut store = ParamStore::new();
        let l = LayerNorm::new(&mut Init::new(&mut store, seed), "ln", 4);
        check_params(&store, inputs(&[&[3, 4]], seed), seed, |b, v| weighted(l.forward(b, &v[0])?))
    }
    fn attention(seed: u64) -> Result<f64> {
        let mut store = ParamStore::new();
        let a = Attention::new(&mut Init::new(&mut store, seed), "attn", 4, 2, WeightInit::Uniform)?;
        check_params(&store, inputs(&[&[2, 3, 4], &[2, 5, 4]], seed), seed, |b, v| weighted(a.forward(b, &v[0], &v[1])?))
    }
    fn transformer_block(seed: u64) -> Result<f64> {
        let mut store = ParamStore::new();
        let t = TransformerBlock::new(&mut Init::new(&mut store, seed), "block", 4, 2, false)?;
        check_params(&store, inputs(&[&[2, 3, 4]], seed), seed, |b, v| weighted(t.forward(b, &v[0])?))
    }
    fn visual_encoder(seed: u64) -> Result<f64> {
        let cfg = VisualConfig { height: 16, width: 16, heads: 2, dim: 8, ..Default::default() };
        let mut store = ParamStore::new();
        let enc = VisualEncoder::new(&mut Init::new(&mut store, seed), "visual", &cfg)?;
        let images = rand_t(&[1, 2, 16, 16, 3], seed, "gradcheck-images");
        check_params(&store, vec![], seed, |b, _| weighted(sequence_feature(&enc.encode(b, &images)?)?))
    }
    fn skeleton_encoder_case(seed: u64) -> Result<f64> {
        let (store, enc) = skeleton_encoder(seed);
        let joints = rand_t(&[2, 3, 5, 3], seed, "gradcheck-joints");
        check_params(&store, vec![], seed, |b, _| {
            let f = enc.encode(b, &joints)?;
            weighted(f.sequence.add(&f.frames.mean_axis(1)?)?)
        })
    }
    fn prototype_fusion(seed: u64) -> Result<f64> {
        let (store, p) = pfu(seed);
        check_params(&store, inputs(&[&[3, 4], &[3, 4]], seed), seed, |b, v| weighted(p.fuse(b, &v[0], &v[1])?.0))
    }
    fn prototype_update(seed: u64) -> Result<f64> {
        let (store, p) = pfu(seed);
        check_params(&store, inputs(&[&[3, 4], &[2, 5, 4]], seed), seed, |b, v| weighted(p.update(b, &v[0], &v[1])?))
    }
    fn temporal_test_path(seed: u64) -> Result<f64> {
        let (store, s) = sgtm(seed);
        check_params(&store, inputs(&[&[2, 2, 3, 4]], seed), seed, |b, v| weighted(s.inference_features(b, &v[0])?))
    }
    let case = |name, check| GradCase { name, kind: CaseKind::Layer, check };
    vec![
        case("linear", linear as CheckFn),
        case("mlp", mlp),
        case("layer_norm_layer", layer_norm),
        case("attention", attention),
        case("transformer_block", transformer_block),
        case("visual_encoder", visual_encoder),
        case("skeleton_encoder", skeleton_encoder_case),
        case("prototype_fusion", prototype_fusion),
        case("prototype_update", prototype_update),
        case("temporal_test_path", temporal_test_path),
    ]
}

fn losses() -> Vec<GradCase> {
    fn v2s(seed: u64) -> Result<f64> {
        align_direction(seed, 0)
    }
    fn s2v(seed: u64) -> Result<f64> {
        align_direction(seed, 1)
    }
    fn csip(seed: u64) -> Result<f64> {
        let (store, p) = pfu(seed);
        let extra = inputs(&[&[3, 4], &[3, 4], &[2, 5, 4], &[2, 4]], seed);
        check_params(&store, extra, seed, |b, v| {
            let (fused, _) = p.fuse(b, &v[0], &v[1])?;
            csip_loss(&v[3], &[0, 2], &p.update(b, &fused, &v[2])?)
        })
    }
    fn frame(seed: u64) -> Result<f64> {
        let (store, s) = sgtm(seed);
        check_params(&store, inputs(&[&[2, 2, 3, 4], &[2, 2, 2, 4]], seed), seed, |b, v| {
            let out = s.forward(b, &v[0], Some(&v[1]), Some(&[1, 2]), Mode::Train)?;
            Ok(out.frame_loss.expect("labels given"))
        })
    }
    fn ce(seed: u64) -> Result<f64> {
        let logits = inputs(&[&[6, 4]], seed);
        let direct = check(|_, v| label_smoothed_ce(&v[0], &[0, 1, 2, 3, 1, 0], 0.1), &logits, CoordSample::All)?;
        let mut store = ParamStore::new();
        let classifier = Linear::new(&mut Init::new(&mut store, seed), "classifier", 4, 3, WeightInit::Uniform);
        let cls = SmoothedClassifier { classifier, eps: 0.1 };
        let through = check_params(&store, inputs(&[&[6, 4]], seed + 1000), seed, |b, v| cls.loss(b, &v[0], &[0, 1, 2, 0, 1, 2]))?;
        Ok(direct.max(through))
    }
    fn triplet(seed: u64) -> Result<f64> {
        let x = inputs(&[&[6, 4]], seed);
        check(|_, v| batch_hard_triplet(&v[0], &[0, 1, 2, 0, 1, 2], 0.3), &x, CoordSample::All)
    }
    fn gpc(seed: u64) -> Result<f64> {
        let (store, enc) = skeleton_encoder(seed);
        let joints = rand_t(&[2, 3, 5, 3], seed, "gradcheck-joints");
        let bank = rand_t(&[2, 8], seed, "gradcheck-bank").map(|x| 0.2 * x);
        check_params(&store, vec![], seed, |b, _| {
            let f = enc.encode(b, &joints)?;
            let frames = f.frames.reshape(&[6, 8])?;
            enc.gpc_loss(b, &f.sequence, &[0, 1], &frames, &[0, 0, 0, 1, 1, 1], &bank)
        })
    }
    fn stpr(seed: u64) -> Result<f64> {
        let (store, enc) = skeleton_encoder(seed);
        let joints = rand_t(&[2, 3, 5, 3], seed, "gradcheck-joints");
        let masks = draw_stpr_masks(2, 3, 5, 0.4, &mut stream(seed, "gradcheck-stpr", 0))?;
        check_params(&store, vec![], seed, |b, _| Ok(enc.stpr_loss(b, &joints, &masks)?.total))
    }
    let case = |name, check| GradCase { name, kind: CaseKind::Loss, check };
    vec![
        case("loss_visual_to_skeleton", v2s as CheckFn),
        case("loss_skeleton_to_visual", s2v),
        case("loss_prototype_contrastive", csip),
        case("loss_frame", frame),
        case("loss_cross_entropy", ce),
        case("loss_triplet", triplet),
        case("loss_graph_prototype", gpc),
        case("loss_masked_reconstruction", stpr),
    ]
}

/// Every registered check: primitives, layers, then losses.
pub fn registry() -> Vec<GradCase> {
    let mut all = primitives();
    all.extend(layers());
    all.extend(losses());
    all
}
