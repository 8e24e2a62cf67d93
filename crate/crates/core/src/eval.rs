//! Retrieval evaluation: Euclidean ranking, CMC and mAP with same-identity
//! same-camera exclusion, plus feature files for offline evaluation.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::checkpoint::{load_tensor, save_tensor};
use crate::tensor::Tensor;

/// `[nq, ng]` Euclidean distances between the rows of `query` and `gallery`.
pub fn pairwise_distances(query: &Tensor, gallery: &Tensor) -> Result<Tensor> {
    if query.ndim() != 2 || gallery.ndim() != 2 || query.cols() != gallery.cols() {
        return Err(Error::shape("pairwise_distances", query.shape(), gallery.shape()));
    }
    let (nq, ng) = (query.rows(), gallery.rows());
    Ok(Tensor::from_fn(&[nq, ng], |k| {
        let (a, b) = (query.row(k / ng), gallery.row(k % ng));
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }))
}

/// Rows scaled to unit length; all-zero rows stay zero.
pub fn l2_normalize(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Identity {
    pub pid: usize,
    pub cam: usize,
}

/// Canonical gallery order for one query: distance, then identity, camera
/// and index. Entries that compare equal on everything but index are
/// interchangeable for every metric, so results do not depend on the input
/// order of the gallery.
pub fn rank_gallery(dist: &[f64], gallery: &[Identity]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| canonical_cmp(dist, gallery, a, b));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    /// Gallery indices after exclusion, best first.
    pub ranking: Vec<usize>,
    pub ap: f64,
    /// 1-based rank of the first relevant entry.
    pub first_hit: usize,
}

/// Ranks the gallery for one query and scores it. `None` when no relevant
/// entry survives exclusion.
pub fn score_query(dist: &[f64], query: Identity, gallery: &[Identity], exclude_same_camera: bool) -> Option<QueryResult> {
    let ranking: Vec<usize> = rank_gallery(dist, gallery)
        .into_iter()
        .filter(|&g| !(exclude_same_camera && gallery[g] == query))
        .collect();
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    let mut first_hit = 0;
    for (pos, &g) in ranking.iter().enumerate() {
        if gallery[g].pid == query.pid {
            hits += 1;
            precision_sum += hits as f64 / (pos + 1) as f64;
            if first_hit == 0 {
                first_hit = pos + 1;
            }
        }
    }
    (hits > 0).then(|| QueryResult {
        ranking,
        ap: precision_sum / hits as f64,
        first_hit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    /// `cmc[k-1]` is the Rank-k hit rate for `k = 1..=gallery size`.
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub rank5: f64,
    pub num_queries: usize,
    pub skipped_queries: usize,
    /// Per-query AP, `null` for skipped queries.
    pub per_query_ap: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate(distances: &Tensor, query: &[Identity], gallery: &[Identity], exclude_same_camera: bool) -> Result<EvalReport> {
    if gallery.is_empty() {
        return Err(Error::Data("empty gallery".into()));
    }
    if distances.shape() != [query.len(), gallery.len()] {
        return Err(Error::shape("evaluate", distances.shape(), &[query.len(), gallery.len()]));
    }
    let ng = gallery.len();
    let mut cmc_hits = vec![0usize; ng];
    let mut per_query_ap = Vec::with_capacity(query.len());
    let mut ap_sum = 0.0;
    for (i, &q) in query.iter().enumerate() {
        match score_query(distances.row(i), q, gallery, exclude_same_camera) {
            Some(r) => {
                for hit in &mut cmc_hits[r.first_hit - 1..] {
                    *hit += 1;
                }
                ap_sum += r.ap;
                per_query_ap.push(Some(r.ap));
            }
            None => {
                log::warn!("query {i} (id {}, cam {}) has no valid gallery match, skipped", q.pid, q.cam);
                per_query_ap.push(None);
            }
        }
    }
    let valid = per_query_ap.iter().filter(|a| a.is_some()).count();
    if valid == 0 {
        return Err(Error::Data("no query has a valid gallery match".into()));
    }
    let cmc: Vec<f64> = cmc_hits.iter().map(|&h| h as f64 / valid as f64).collect();
    Ok(EvalReport {
        map: ap_sum / valid as f64,
        rank1: cmc[0],
        rank5: cmc[ng.min(5) - 1],
        cmc,
        num_queries: valid,
        skipped_queries: query.len() - valid,
        per_query_ap,
    })
}

/// Features with their identity labels, stored as a raw tensor file plus a
/// JSON sidecar of ids and cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Tensor,
    pub ids: Vec<Identity>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    pids: Vec<usize>,
    cams: Vec<usize>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".ids.json");
    PathBuf::from(p)
}

impl FeatureSet {
    pub fn new(features: Tensor, ids: Vec<Identity>) -> Result<Self> {
        if features.ndim() != 2 || features.rows() != ids.len() {
            return Err(Error::shape("feature_set", features.shape(), &[ids.len()]));
        }
        Ok(FeatureSet { features, ids })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensor(path, &self.features)?;
        let side = Sidecar {
            pids: self.ids.iter().map(|i| i.pid).collect(),
            cams: self.ids.iter().map(|i| i.cam).collect(),
        };
        let sp = sidecar_path(path);
        std::fs::write(&sp, serde_json::to_string(&side).expect("sidecar serializes")).map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let features = load_tensor(path)?;
        let sp = sidecar_path(path);
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&sp, &e))?;
        if side.pids.len() != side.cams.len() {
            return Err(Error::Format {
                path: sp,
                msg: "pids and cams differ in length".into(),
            });
        }
        let ids = side.pids.into_iter().zip(side.cams).map(|(pid, cam)| Identity { pid, cam }).collect();
        FeatureSet::new(features, ids).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Evaluates a query set against a gallery set.
pub fn evaluate_sets(query: &FeatureSet, gallery: &FeatureSet, exclude_same_camera: bool) -> Result<EvalReport> {
    let d = pairwise_distances(&query.features, &gallery.features)?;
    evaluate(&d, &query.ids, &gallery.ids, exclude_same_camera)
}

/// Total order used by [`rank_gallery`], exposed for oracles.
pub fn canonical_cmp(dist: &[f64], gallery: &[Identity], a: usize, b: usize) -> Ordering {
    dist[a]
        .total_cmp(&dist[b])
        .then(gallery[a].pid.cmp(&gallery[b].pid))
        .then(gallery[a].cam.cmp(&gallery[b].cam))
        .then(a.cmp(&b))
}
