//! Shared fixtures for the criterion benches.

use rand::Rng as _;
use skelreid::data::{generate_dataset, Dataset};
use skelreid::pipeline::{Batch, PipelineConfig, Session};
use skelreid::rng::stream;
use skelreid::Tensor;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = stream(seed, "bench", 0);
    Tensor::from_fn(shape, |_| r.gen_range(-1.0..1.0))
}

/// Desk-configuration dataset and an untrained session with prototype
/// banks in place, ready for either stage.
pub fn desk_session() -> (Dataset, Session) {
    let cfg = PipelineConfig::desk();
    let ds = generate_dataset(&cfg.data).expect("desk data");
    let mut s = Session::new(&cfg, &ds).expect("desk session");
    s.compute_banks(&ds).expect("banks");
    (ds, s)
}

/// The first `p` identities with `k` training tracklets each.
pub fn pk_batch(ds: &Dataset, s: &Session, p: usize, k: usize) -> Batch {
    let mut idx = Vec::with_capacity(p * k);
    for label in 0..p {
        idx.extend(s.labels.iter().enumerate().filter(|(_, &y)| y == label).map(|(i, _)| i).take(k));
    }
    let trks: Vec<_> = idx.iter().map(|&i| &ds.train[i]).collect();
    Batch::new(&trks, idx.iter().map(|&i| s.labels[i]).collect()).expect("batch")
}
