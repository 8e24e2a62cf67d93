//! Identity supervision: cross-entropy (plain and label-smoothed) and the
//! batch-hard triplet loss.

use crate::error::{Error, Result};
use crate::nn::{Binder, Linear};
use crate::tensor::{Tensor, Var};

fn check_labels(op: &'static str, labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::invalid(op, format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::invalid(op, format!("label {bad} outside {k} classes")));
    }
    Ok(())
}

fn logits_dims(op: &'static str, logits: &Var) -> Result<(usize, usize)> {
    match logits.shape()[..] {
        [n, k] if n > 0 && k > 0 => Ok((n, k)),
        ref s => Err(Error::invalid(op, format!("logits must be [n, k], got {s:?}"))),
    }
}

/// Mean over rows of `−log softmax(logits)[label]`.
pub fn cross_entropy<'g>(logits: &Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let (n, k) = logits_dims("cross_entropy", logits)?;
    check_labels("cross_entropy", labels, n, k)?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * k + y).collect();
    Ok(logits.log_softmax()?.gather(&idx)?.sum().scale(-1.0 / n as f64))
}

/// Cross-entropy against `(1−ε)·onehot + ε/K`, averaged over rows.
pub fn label_smoothed_ce<'g>(logits: &Var<'g>, labels: &[usize], eps: f64) -> Result<Var<'g>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::Config(format!("label smoothing {eps} outside [0, 1)")));
    }
    let (n, k) = logits_dims("label_smoothed_ce", logits)?;
    check_labels("label_smoothed_ce", labels, n, k)?;
    let q = Tensor::from_fn(&[n, k], |i| {
        let hot = if labels[i / k] == i % k { 1.0 - eps } else { 0.0 };
        hot + eps / k as f64
    });
    let q = logits.graph().constant(q);
    Ok(logits.log_softmax()?.mul(&q)?.sum().scale(-1.0 / n as f64))
}

/// Identity classifier followed by label-smoothed cross-entropy.
#[derive(Clone, Debug)]
pub struct SmoothedClassifier {
    pub classifier: Linear,
    pub eps: f64,
}

impl SmoothedClassifier {
    pub fn loss<'g>(&self, b: &Binder<'g>, feats: &Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
        label_smoothed_ce(&self.classifier.forward(b, feats)?, labels, self.eps)
    }
}

/// Checks that every identity in the batch has at least two samples and
/// that there are at least two identities.
pub fn check_pk(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0usize) += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::invalid(
            "batch_hard_triplet",
            "PK structure required: at least 2 identities with at least 2 samples each",
        ));
    }
    Ok(())
}

/// Distance floor under the square root keeps the gradient finite when two
/// features coincide.
pub const DIST_FLOOR: f64 = 1e-12;

/// Batch-hard triplet loss on Euclidean distances: per anchor, the farthest
/// same-identity sample against the nearest other-identity sample.
pub fn batch_hard_triplet<'g>(feats: &Var<'g>, labels: &[usize], margin: f64) -> Result<Var<'g>> {
    let n = feats.shape()[0];
    check_labels("batch_hard_triplet", labels, n, usize::MAX)?;
    check_pk(labels)?;
    let dist = feats.sq_dist(feats)?.clamp_min(DIST_FLOOR).sqrt();
    let (pos, neg) = {
        let d = dist.value();
        let mut pos = Vec::with_capacity(n);
        let mut neg = Vec::with_capacity(n);
        for a in 0..n {
            let row = &d.data()[a * n..(a + 1) * n];
            let mut p = None::<usize>;
            let mut q = None::<usize>;
            for j in 0..n {
                if j == a {
                    continue;
                }
                if labels[j] == labels[a] {
                    if p.is_none_or(|p| row[j] > row[p]) {
                        p = Some(j);
                    }
                } else if q.is_none_or(|q| row[j] < row[q]) {
                    q = Some(j);
                }
            }
            pos.push(a * n + p.unwrap());
            neg.push(a * n + q.unwrap());
        }
        (pos, neg)
    };
    let gap = dist.gather(&pos)?.sub(&dist.gather(&neg)?)?.shift(margin).relu();
    gap.mean()
}
