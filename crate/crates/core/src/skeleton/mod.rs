//! Skeleton graphs, their Laplacian positional encoding, and the skeleton
//! graph transformer with its two self-supervised objectives.

mod encoder;
mod objectives;

pub use encoder::{SgtConfig, SkeletonEncoder, SkeletonFeatures};
pub use objectives::{draw_stpr_masks, masked_l1, sgt_objective, StprMasks, StprTerms};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Eigenvalues below this are treated as zero (one per connected component).
const ZERO_EIGENVALUE: f64 = 1e-9;

/// The default 17-joint Human3.6M body graph.
pub const H36M_GRAPH_JSON: &str = include_str!("../../data/h36m_skeleton.json");

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    pub names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    joints: Vec<String>,
    edges: Vec<(usize, usize)>,
}

impl SkeletonGraph {
    pub fn new(names: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let j = names.len();
        if j == 0 {
            return Err(Error::Config("skeleton graph has no joints".into()));
        }
        for &(a, b) in &edges {
            if a >= j || b >= j || a == b {
                return Err(Error::Config(format!("invalid edge ({a}, {b}) for {j} joints")));
            }
        }
        Ok(SkeletonGraph { names, edges })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: GraphFile = serde_json::from_str(text).map_err(|e| Error::Config(format!("skeleton graph: {e}")))?;
        Self::new(f.joints, f.edges)
    }

    pub fn h36m() -> Self {
        Self::from_json(H36M_GRAPH_JSON).expect("bundled graph is valid")
    }

    /// A path over `n` joints named `j0..`.
    pub fn path(n: usize) -> Self {
        let names = (0..n).map(|i| format!("j{i}")).collect();
        Self::new(names, (1..n).map(|i| (i - 1, i)).collect()).expect("path graph is valid")
    }

    pub fn joints(&self) -> usize {
        self.names.len()
    }

    /// Symmetric 0/1 adjacency with zero diagonal.
    pub fn adjacency(&self) -> Tensor {
        let j = self.joints();
        let mut a = Tensor::zeros(&[j, j]);
        for &(x, y) in &self.edges {
            a.data_mut()[x * j + y] = 1.0;
            a.data_mut()[y * j + x] = 1.0;
        }
        a
    }

    /// Relabels joints so that new joint `i` is old joint `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        SkeletonGraph {
            names: perm.iter().map(|&p| self.names[p].clone()).collect(),
            edges: self.edges.iter().map(|&(a, b)| (inv[a], inv[b])).collect(),
        }
    }
}

/// `J×k` Laplacian eigenmap of the symmetric normalized Laplacian
/// `I − D^{-1/2} A D^{-1/2}`: eigenvectors of the `k` smallest nonzero
/// eigenvalues, unit columns, each signed so its first nonzero entry is
/// positive.
pub fn laplacian_pe(graph: &SkeletonGraph, k: usize) -> Result<Tensor> {
    let j = graph.joints();
    if k >= j {
        return Err(Error::Config(format!("positional encoding dim {k} must be below joint count {j}")));
    }
    let a = graph.adjacency();
    let deg: Vec<f64> = (0..j).map(|r| a.row(r).iter().sum()).collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let lap = DMatrix::from_fn(j, j, |r, c| {
        let id = if r == c { 1.0 } else { 0.0 };
        id - inv_sqrt[r] * a.data()[r * j + c] * inv_sqrt[c]
    });
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..j).filter(|&i| eig.eigenvalues[i] > ZERO_EIGENVALUE).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    if order.len() < k {
        return Err(Error::Config(format!(
            "graph has only {} nonzero Laplacian eigenvalues, {k} requested",
            order.len()
        )));
    }
    let mut pe = Tensor::zeros(&[j, k]);
    for (col, &i) in order.iter().take(k).enumerate() {
        let v = eig.eigenvectors.column(i);
        let norm = v.norm();
        let first = v.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(1.0);
        let sign = if first < 0.0 { -1.0 } else { 1.0 };
        for r in 0..j {
            pe.data_mut()[r * k + col] = sign * v[r] / norm;
        }
    }
    Ok(pe)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_graph_is_h36m() {
        let g = SkeletonGraph::h36m();
        assert_eq!(g.joints(), 17);
        assert_eq!(g.edges.len(), 16);
        assert_eq!(g.names[10], "Head");
        let a = g.adjacency();
        for r in 0..17 {
            assert_eq!(a.data()[r * 17 + r], 0.0);
            for c in 0..17 {
                assert_eq!(a.data()[r * 17 + c], a.data()[c * 17 + r]);
            }
        }
        assert_eq!(laplacian_pe(&g, 4).unwrap().shape(), &[17, 4]);
    }

    #[test]
    fn path_of_three_has_known_eigenvector() {
        let pe = laplacian_pe(&SkeletonGraph::path(3), 1).unwrap();
        let s = 1.0 / 2f64.sqrt();
        for (got, want) in pe.data().iter().zip([s, 0.0, -s]) {
            assert!((got - want).abs() < 1e-12, "{:?}", pe.data());
        }
    }

    #[test]
    fn columns_are_orthonormal() {
        for (g, k) in [(SkeletonGraph::h36m(), 6), (SkeletonGraph::path(7), 5)] {
            let pe = laplacian_pe(&g, k).unwrap();
            let j = g.joints();
            for a in 0..k {
                for b in 0..k {
                    let dot: f64 = (0..j).map(|r| pe.data()[r * k + a] * pe.data()[r * k + b]).sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn relabeling_permutes_rows_up_to_sign() {
        // a tree without symmetric branches has a simple spectrum
        let names = (0..6).map(|i| format!("n{i}")).collect();
        let g = SkeletonGraph::new(names, vec![(0, 1), (1, 2), (2, 3), (1, 4), (4, 5)]).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let k = 3;
        let pe = laplacian_pe(&g, k).unwrap();
        let pp = laplacian_pe(&g.permuted(&perm), k).unwrap();
        for c in 0..k {
            let sign = (0..6)
                .map(|i| pp.data()[i * k + c] * pe.data()[perm[i] * k + c])
                .sum::<f64>()
                .signum();
            for (i, &p) in perm.iter().enumerate() {
                assert!((pp.data()[i * k + c] - sign * pe.data()[p * k + c]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn disconnected_graph_limits_dimension() {
        let names = (0..4).map(|i| format!("n{i}")).collect();
        let g = SkeletonGraph::new(names, vec![(0, 1), (2, 3)]).unwrap();
        assert!(laplacian_pe(&g, 2).is_ok());
        assert!(matches!(laplacian_pe(&g, 3), Err(Error::Config(_))));
        assert!(laplacian_pe(&SkeletonGraph::path(3), 3).is_err());
    }

    #[test]
    fn bad_edges_rejected() {
        assert!(SkeletonGraph::new(vec!["a".into(), "b".into()], vec![(0, 2)]).is_err());
        assert!(SkeletonGraph::from_json("{\"joints\": [\"a\"], \"edges\": [[0, 0]]}").is_err());
    }
}
