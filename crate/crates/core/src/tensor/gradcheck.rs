use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which input coordinates a finite-difference check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum CoordSample {
    All,
    /// At most `count` coordinates drawn uniformly over all inputs.
    Random { count: usize, seed: u64 },
}

/// Max over coordinates of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    finite_diff_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), step, CoordSample::All)
}

/// [`finite_diff_check`] over several inputs at once.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], step: f64, coords: CoordSample) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    finite_diff_relative(f, xs, step, coords, 1.0)
}

/// Max over coordinates of `|analytic − central difference| / max(floor, |analytic|)`.
pub fn finite_diff_relative<F>(f: F, xs: &[Tensor], step: f64, coords: CoordSample, floor: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    if floor.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid("finite_diff_check", "floor must be positive"));
    }
    if step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::invalid("finite_diff_check", "step must be positive"));
    }
    let analytic: Vec<Tensor> = {
        let graph = Graph::new();
        let leaves: Vec<Var> = xs.iter().map(|x| graph.leaf(x.clone(), true)).collect();
        let out = f(&graph, &leaves)?;
        let grads = graph.backward(out)?;
        leaves
            .iter()
            .zip(xs)
            .map(|(v, x)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let graph = Graph::new();
        let leaves: Vec<Var> = inputs.iter().map(|x| graph.constant(x.clone())).collect();
        let out = f(&graph, &leaves)?;
        out.item().map_err(|_| Error::invalid("finite_diff_check", "function output is not scalar"))
    };

    let total: usize = xs.iter().map(Tensor::numel).sum();
    let flat: Vec<usize> = match coords {
        CoordSample::All => (0..total).collect(),
        CoordSample::Random { count, seed } if count < total => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = sample(&mut rng, total, count).into_vec();
            picked.sort_unstable();
            picked
        }
        CoordSample::Random { .. } => (0..total).collect(),
    };

    let mut inputs = xs.to_vec();
    let mut worst: f64 = 0.0;
    for c in flat {
        let (which, idx) = locate(xs, c);
        let orig = inputs[which].data()[idx];
        inputs[which].data_mut()[idx] = orig + step;
        let plus = eval(&inputs)?;
        inputs[which].data_mut()[idx] = orig - step;
        let minus = eval(&inputs)?;
        inputs[which].data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[which].data()[idx];
        let err = (a - numeric).abs() / a.abs().max(floor);
        if err.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(err);
    }
    Ok(worst)
}

fn locate(xs: &[Tensor], mut flat: usize) -> (usize, usize) {
    for (i, x) in xs.iter().enumerate() {
        if flat < x.numel() {
            return (i, flat);
        }
        flat -= x.numel();
    }
    unreachable!("coordinate out of range")
}
