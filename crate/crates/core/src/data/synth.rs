//! Synthetic paired tracklets. Each identity has an appearance (body part
//! colours, image only) and a gait (body proportions, posture and per-joint
//! swing, which drives the skeleton and through it the rendered silhouette).

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Source, Tracklet};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};
use crate::skeleton::SkeletonGraph;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub identities: usize,
    pub tracklets_per_id: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cameras: usize,
    /// Tracklets per training identity held out as queries (camera 0).
    pub query_per_id: usize,
    /// Tracklets per training identity held out as gallery (camera 1).
    pub gallery_per_id: usize,
    /// Extra identities that appear only in query and gallery.
    pub heldout_identities: usize,
    pub skeleton_noise: f64,
    pub image_noise: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            identities: 16,
            tracklets_per_id: 8,
            frames: 4,
            height: 32,
            width: 16,
            cameras: 2,
            query_per_id: 1,
            gallery_per_id: 1,
            heldout_identities: 0,
            skeleton_noise: 0.01,
            image_noise: 0.05,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.identities + self.heldout_identities < 2 {
            return bad("data needs at least 2 identities".into());
        }
        if self.frames == 0 || self.height < 4 || self.width < 4 {
            return bad(format!("frames {} and image {}x{} too small", self.frames, self.height, self.width));
        }
        if self.cameras < 2 && self.query_per_id + self.gallery_per_id > 0 {
            return bad("query and gallery need two cameras".into());
        }
        if self.identities > 0 && self.query_per_id + self.gallery_per_id >= self.tracklets_per_id {
            return bad(format!(
                "{} held-out tracklets leave no training tracklets out of {}",
                self.query_per_id + self.gallery_per_id,
                self.tracklets_per_id
            ));
        }
        if self.heldout_identities > 0 && self.tracklets_per_id < 2 {
            return bad("held-out identities need two tracklets each".into());
        }
        if !(self.skeleton_noise >= 0.0 && self.image_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        Ok(())
    }
}

/// Standing pose in metres, y up, pelvis at the origin, in the bundled joint
/// order.
pub fn base_pose() -> [[f64; 3]; 17] {
    [
        [0.0, 0.0, 0.0],
        [-0.13, 0.0, 0.0],
        [-0.13, -0.45, 0.0],
        [-0.13, -0.9, 0.0],
        [0.13, 0.0, 0.0],
        [0.13, -0.45, 0.0],
        [0.13, -0.9, 0.0],
        [0.0, 0.23, 0.0],
        [0.0, 0.48, 0.0],
        [0.0, 0.58, 0.0],
        [0.0, 0.7, 0.0],
        [0.17, 0.48, 0.0],
        [0.2, 0.22, 0.0],
        [0.22, 0.0, 0.0],
        [-0.17, 0.48, 0.0],
        [-0.2, 0.22, 0.0],
        [-0.22, 0.0, 0.0],
    ]
}

const PARTS: usize = 4;

/// Depth of the feet below the pelvis in the base pose.
const FOOT_DEPTH: f64 = 0.9;

/// Body part of the bone ending at each joint: head, torso, arms, legs.
fn part_of(child: usize) -> usize {
    match child {
        10 => 0,
        7 | 8 | 9 | 11 | 14 => 1,
        12 | 13 | 15 | 16 => 2,
        _ => 3,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityParams {
    /// RGB in `[0, 1]` per body part.
    pub colours: [[f64; 3]; PARTS],
    pub height_scale: f64,
    pub width_scale: f64,
    pub posture: [[f64; 3]; 17],
    pub swing: [f64; 17],
    pub swing_phase: [f64; 17],
    /// Cycles per frame.
    pub cadence: f64,
}

impl IdentityParams {
    pub fn draw(seed: u64, pid: usize) -> Self {
        let mut r = stream(seed, "identity", pid as u64);
        let mut colours = [[0.0; 3]; PARTS];
        colours.iter_mut().flatten().for_each(|c| *c = r.gen_range(0.0..1.0));
        let mut posture = [[0.0; 3]; 17];
        posture.iter_mut().flatten().for_each(|p| *p = r.gen_range(-0.06..0.06));
        let mut swing = [0.0; 17];
        let mut swing_phase = [0.0; 17];
        for j in 0..17 {
            swing[j] = r.gen_range(0.02..0.16);
            swing_phase[j] = r.gen_range(0.0..std::f64::consts::TAU);
        }
        IdentityParams {
            colours,
            height_scale: r.gen_range(0.8..1.2),
            width_scale: r.gen_range(0.75..1.3),
            posture,
            swing,
            swing_phase,
            cadence: r.gen_range(0.1..0.3),
        }
    }

    /// Pelvis height above the floor.
    pub fn lift(&self) -> f64 {
        FOOT_DEPTH * self.height_scale
    }

    /// Joint coordinates of frame `t` for a walk started at `phase`, in a
    /// body frame standing on the floor (y = 0 at the feet).
    pub fn pose(&self, t: usize, phase: f64) -> [[f64; 3]; 17] {
        let mut out = base_pose();
        for (j, p) in out.iter_mut().enumerate() {
            let angle = std::f64::consts::TAU * self.cadence * t as f64 + self.swing_phase[j] + phase;
            p[0] = p[0] * self.width_scale + self.posture[j][0];
            p[1] = p[1] * self.height_scale + self.posture[j][1] + 0.25 * self.swing[j] * angle.cos();
            p[2] += self.posture[j][2] + self.swing[j] * angle.sin();
        }
        for p in &mut out {
            p[1] += self.lift();
        }
        out
    }
}

fn gaussian(r: &mut Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        0.0
    } else {
        Normal::new(0.0, sd).expect("finite sd").sample(r)
    }
}

/// Coarse rasterization: bones sampled along their length and stamped as
/// 2x2 blocks in the part colour over a camera-tinted background. Camera
/// `c` views the body rotated by `0.6·c` radians about the vertical axis.
fn render(pose: &[[f64; 3]; 17], id: &IdentityParams, cam: usize, background: [f64; 3], cfg: &DataConfig, r: &mut Rng) -> Vec<f64> {
    let (h, w) = (cfg.height, cfg.width);
    let mut img: Vec<f64> = (0..h * w).flat_map(|_| background).collect();
    let theta = 0.6 * cam as f64;
    let project = |p: &[f64; 3]| -> (f64, f64) {
        let u = p[0] * theta.cos() + p[2] * theta.sin();
        ((0.85 + id.lift() - p[1]) / 1.9 * h as f64, (u + 0.5) * w as f64)
    };
    let edges = &SkeletonGraph::h36m().edges;
    for &(a, b) in edges {
        let (pa, pb) = (project(&pose[a]), project(&pose[b]));
        let colour = id.colours[part_of(b)];
        for s in 0..=8 {
            let f = s as f64 / 8.0;
            let (y, x) = (pa.0 + f * (pb.0 - pa.0), pa.1 + f * (pb.1 - pa.1));
            let (y0, x0) = (y.floor() as isize, x.floor() as isize);
            for dy in 0..2 {
                for dx in 0..2 {
                    let (yy, xx) = (y0 + dy, x0 + dx);
                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                        let base = (yy as usize * w + xx as usize) * 3;
                        img[base..base + 3].copy_from_slice(&colour);
                    }
                }
            }
        }
    }
    for v in &mut img {
        *v += gaussian(r, cfg.image_noise);
    }
    img
}

fn make_tracklet(cfg: &DataConfig, id: &IdentityParams, pid: usize, index: usize, cam: usize) -> Tracklet {
    let mut r = stream(cfg.seed, "tracklet", (pid * 10_000 + index) as u64);
    let phase = r.gen_range(0.0..std::f64::consts::TAU);
    let mut bg_rng = stream(cfg.seed, "camera", cam as u64);
    let background = [bg_rng.gen_range(0.0..0.5), bg_rng.gen_range(0.0..0.5), bg_rng.gen_range(0.0..0.5)];
    let (t, h, w) = (cfg.frames, cfg.height, cfg.width);
    let mut images = Vec::with_capacity(t * h * w * 3);
    let mut skeletons = Vec::with_capacity(t * 51);
    for f in 0..t {
        let mut pose = id.pose(f, phase);
        pose.iter_mut().flatten().for_each(|v| *v += gaussian(&mut r, cfg.skeleton_noise));
        images.extend(render(&pose, id, cam, background, cfg, &mut r));
        skeletons.extend(pose.iter().flatten());
    }
    Tracklet {
        pid,
        cam,
        images: Tensor::new(&[t, h, w, 3], images).expect("sizes agree"),
        skeletons: Tensor::new(&[t, 17, 3], skeletons).expect("sizes agree"),
        valid: vec![true; t],
        source: Source::Synthetic,
    }
}

/// Deterministic dataset. For each training identity the first
/// `query_per_id` tracklets are queries on camera 0, the next
/// `gallery_per_id` are gallery entries on camera 1, and the rest train on
/// alternating cameras. Held-out identities split their tracklets evenly
/// between query and gallery.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut ds = Dataset { config: Some(cfg.clone()), train: vec![], query: vec![], gallery: vec![] };
    for pid in 0..cfg.identities + cfg.heldout_identities {
        let id = IdentityParams::draw(cfg.seed, pid);
        let heldout = pid >= cfg.identities;
        let n_query = if heldout { cfg.tracklets_per_id / 2 } else { cfg.query_per_id };
        let n_gallery = if heldout { cfg.tracklets_per_id - n_query } else { cfg.gallery_per_id };
        for k in 0..cfg.tracklets_per_id {
            if k < n_query {
                ds.query.push(make_tracklet(cfg, &id, pid, k, 0));
            } else if k < n_query + n_gallery {
                ds.gallery.push(make_tracklet(cfg, &id, pid, k, 1));
            } else {
                ds.train.push(make_tracklet(cfg, &id, pid, k, k % cfg.cameras));
            }
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DataConfig {
        DataConfig { identities: 3, tracklets_per_id: 4, frames: 3, ..Default::default() }
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&DataConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.train[0].skeletons, c.train[0].skeletons);
    }

    #[test]
    fn default_sizes() {
        let ds = generate_dataset(&DataConfig::default()).unwrap();
        assert_eq!(ds.len(), 128);
        assert_eq!((ds.train.len(), ds.query.len(), ds.gallery.len()), (96, 16, 16));
        assert!(ds.query.iter().all(|t| t.cam == 0) && ds.gallery.iter().all(|t| t.cam == 1));
        assert_eq!(ds.train[0].images.shape(), &[4, 32, 16, 3]);
        assert_eq!(ds.train_labels().1, (0..16).collect::<Vec<_>>());
    }

    #[test]
    fn heldout_identities_only_in_evaluation() {
        let cfg = DataConfig { heldout_identities: 2, ..small() };
        let ds = generate_dataset(&cfg).unwrap();
        assert!(ds.train.iter().all(|t| t.pid < 3));
        assert_eq!(ds.query.iter().filter(|t| t.pid >= 3).count(), 4);
        assert_eq!(ds.gallery.iter().filter(|t| t.pid >= 3).count(), 4);
    }

    #[test]
    fn noiseless_tracklets_differ_only_by_phase() {
        let cfg = DataConfig { skeleton_noise: 0.0, image_noise: 0.0, ..small() };
        let id = IdentityParams::draw(cfg.seed, 1);
        let a = make_tracklet(&cfg, &id, 1, 2, 0);
        let b = make_tracklet(&cfg, &id, 1, 4, 0);
        let pa = stream(cfg.seed, "tracklet", 10_002).gen_range(0.0..std::f64::consts::TAU);
        let pb = stream(cfg.seed, "tracklet", 10_004).gen_range(0.0..std::f64::consts::TAU);
        for f in 0..3 {
            let want_a: Vec<f64> = id.pose(f, pa).iter().flatten().copied().collect();
            let want_b: Vec<f64> = id.pose(f, pb).iter().flatten().copied().collect();
            assert_eq!(&a.skeletons.data()[f * 51..(f + 1) * 51], &want_a[..]);
            assert_eq!(&b.skeletons.data()[f * 51..(f + 1) * 51], &want_b[..]);
        }
        let same_phase = make_tracklet(&cfg, &id, 1, 2, 0);
        assert_eq!(a, same_phase);
    }

    #[test]
    fn identities_get_distinct_draws() {
        let a = IdentityParams::draw(0, 0);
        let b = IdentityParams::draw(0, 1);
        assert_ne!(a.colours, b.colours);
        assert_ne!(a.swing, b.swing);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_dataset(&DataConfig { identities: 1, ..small() }).is_err());
        assert!(generate_dataset(&DataConfig { tracklets_per_id: 2, ..small() }).is_err());
        assert!(generate_dataset(&DataConfig { frames: 0, ..small() }).is_err());
    }

    #[test]
    fn bodies_are_rendered_inside_the_frame() {
        let cfg = DataConfig { image_noise: 0.0, ..small() };
        let ds = generate_dataset(&cfg).unwrap();
        let t = &ds.train[0];
        let id = IdentityParams::draw(cfg.seed, t.pid);
        let frame = &t.images.data()[..32 * 16 * 3];
        let painted = frame.chunks(3).filter(|px| id.colours.iter().any(|c| c == *px)).count();
        assert!(painted > 40, "{painted}");
    }
}
