use super::graph::{row_moments, Graph, Node, Op, Var};
use super::kernels::{self, split_axis};
use super::Tensor;
use crate::error::{Error, Result};

/// Gradients of a scalar with respect to the trainable leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// The gradient for `var` if it is a leaf that requires gradients and the
    /// output depends on it.
    pub fn get(&self, var: &Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: &Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn like(t: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(t.shape(), data).expect("gradient shape matches value")
}

impl Graph {
    /// Reverse-mode differentiation of a one-element `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        assert!(std::ptr::eq(self, output.graph), "output from another graph");
        let nodes = self.nodes.borrow();
        let out_node = &nodes[output.id];
        if out_node.value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("output must be scalar, got shape {:?}", out_node.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !out_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.id] = Some(like(&out_node.value, vec![1.0]));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, node, &g, &mut grads);
        }
        for (slot, node) in grads.iter_mut().zip(nodes.iter()) {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn propagate(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| &nodes[i].value;
    let wants = |i: usize| nodes[i].requires_grad;
    let mut send = |i: usize, t: Tensor| {
        if nodes[i].requires_grad {
            accumulate(&mut grads[i], t);
        }
    };
    let gd = g.data();
    let y = &node.value;

    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            send(*a, g.clone());
            send(*b, g.clone());
        }
        Op::Sub(a, b) => {
            send(*a, g.clone());
            send(*b, g.map(|v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if wants(*a) {
                send(*a, like(av, gd.iter().zip(bv.data()).map(|(g, b)| g * b).collect()));
            }
            if wants(*b) {
                send(*b, like(bv, gd.iter().zip(av.data()).map(|(g, a)| g * a).collect()));
            }
        }
        Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
        Op::Shift(a) => send(*a, g.clone()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if wants(*a) {
                let mut da = vec![0.0; m * k];
                kernels::mm_nt(gd, bv.data(), m, n, k, &mut da);
                send(*a, like(av, da));
            }
            if wants(*b) {
                let mut db = vec![0.0; k * n];
                kernels::mm_tn(av.data(), gd, k, m, n, &mut db);
                send(*b, like(bv, db));
            }
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = y.shape()[2];
            let mut da = wants(*a).then(|| vec![0.0; bs * m * k]);
            let mut db = wants(*b).then(|| vec![0.0; bs * k * n]);
            for i in 0..bs {
                let ad = &av.data()[i * m * k..(i + 1) * m * k];
                let bd = &bv.data()[i * k * n..(i + 1) * k * n];
                let gi = &gd[i * m * n..(i + 1) * m * n];
                if let Some(da) = da.as_mut() {
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        // y = a·bᵀ, b: [n,k]  =>  da = g·b
                        kernels::mm_nn(gi, bd, m, n, k, dai);
                    } else {
                        kernels::mm_nt(gi, bd, m, n, k, dai);
                    }
                }
                if let Some(db) = db.as_mut() {
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if *trans_b {
                        // db = gᵀ·a: [n,k]
                        kernels::mm_tn(gi, ad, n, m, k, dbi);
                    } else {
                        kernels::mm_tn(ad, gi, k, m, n, dbi);
                    }
                }
            }
            if let Some(da) = da {
                send(*a, like(av, da));
            }
            if let Some(db) = db {
                send(*b, like(bv, db));
            }
        }
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let mut out = vec![0.0; g.numel()];
            kernels::permute(gd, g.shape(), &inv, &mut out);
            send(*a, like(val(*a), out));
        }
        Op::Reshape(a) => send(*a, like(val(*a), gd.to_vec())),
        Op::Concat { inputs, axis } => {
            let (outer, _, inner) = split_axis(y.shape(), *axis);
            let total = y.shape()[*axis];
            let mut offset = 0;
            for &i in inputs {
                let n = val(i).shape()[*axis];
                if wants(i) {
                    let mut part = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        part.extend_from_slice(&gd[base..base + n * inner]);
                    }
                    send(i, like(val(i), part));
                }
                offset += n;
            }
        }
        Op::Slice { input, axis, start } => {
            let xv = val(*input);
            let (outer, n, inner) = split_axis(xv.shape(), *axis);
            let len = y.shape()[*axis];
            let mut dx = vec![0.0; xv.numel()];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                dx[base..base + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            send(*input, like(xv, dx));
        }
        Op::Exp(a) => send(*a, like(y, gd.iter().zip(y.data()).map(|(g, y)| g * y).collect())),
        Op::Log(a) => {
            let xv = val(*a);
            send(*a, like(xv, gd.iter().zip(xv.data()).map(|(g, x)| g / x).collect()));
        }
        Op::Relu(a) => {
            let xv = val(*a);
            send(*a, like(xv, gd.iter().zip(xv.data()).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()));
        }
        Op::Sigmoid(a) => send(*a, like(y, gd.iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect())),
        Op::Tanh(a) => send(*a, like(y, gd.iter().zip(y.data()).map(|(g, y)| g * (1.0 - y * y)).collect())),
        Op::Sqrt(a) => send(*a, like(y, gd.iter().zip(y.data()).map(|(g, y)| 0.5 * g / y).collect())),
        Op::ClampMin(a, lo) => {
            let xv = val(*a);
            send(*a, like(xv, gd.iter().zip(xv.data()).map(|(g, &x)| if x >= *lo { *g } else { 0.0 }).collect()));
        }
        Op::Softmax(a) => {
            let c = y.cols();
            let mut dx = vec![0.0; y.numel()];
            for ((yr, gr), dr) in y.data().chunks_exact(c).zip(gd.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for k in 0..c {
                    dr[k] = yr[k] * (gr[k] - dot);
                }
            }
            send(*a, like(y, dx));
        }
        Op::LogSoftmax(a) => {
            let c = y.cols();
            let mut dx = vec![0.0; y.numel()];
            for ((yr, gr), dr) in y.data().chunks_exact(c).zip(gd.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                let gsum: f64 = gr.iter().sum();
                for k in 0..c {
                    dr[k] = gr[k] - yr[k].exp() * gsum;
                }
            }
            send(*a, like(y, dx));
        }
        Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
            let xv = val(*a);
            let (outer, n, inner) = split_axis(xv.shape(), *axis);
            let s = if matches!(node.op, Op::MeanAxis(..)) { 1.0 / n as f64 } else { 1.0 };
            let mut dx = vec![0.0; xv.numel()];
            for o in 0..outer {
                let gs = &gd[o * inner..(o + 1) * inner];
                for k in 0..n {
                    for (d, gv) in dx[(o * n + k) * inner..(o * n + k + 1) * inner].iter_mut().zip(gs) {
                        *d = gv * s;
                    }
                }
            }
            send(*a, like(xv, dx));
        }
        Op::SumAll(a) => {
            let xv = val(*a);
            send(*a, Tensor::full(xv.shape(), gd[0]));
        }
        Op::MeanAll(a) => {
            let xv = val(*a);
            send(*a, Tensor::full(xv.shape(), gd[0] / xv.numel() as f64));
        }
        Op::L1Norm(a) => {
            let xv = val(*a);
            send(*a, xv.map(|x| if x > 0.0 { gd[0] } else if x < 0.0 { -gd[0] } else { 0.0 }));
        }
        Op::L2Norm(a) => {
            let xv = val(*a);
            let norm = y.data()[0];
            if norm > 0.0 {
                send(*a, xv.map(|x| gd[0] * x / norm));
            } else {
                send(*a, Tensor::zeros(xv.shape()));
            }
        }
        Op::SqDist(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, c, m) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
            let mut da = vec![0.0; n * c];
            let mut db = vec![0.0; m * c];
            for i in 0..n {
                for j in 0..m {
                    let w = 2.0 * gd[i * m + j];
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..c {
                        let diff = w * (av.data()[i * c + k] - bv.data()[j * c + k]);
                        da[i * c + k] += diff;
                        db[j * c + k] -= diff;
                    }
                }
            }
            send(*a, like(av, da));
            send(*b, like(bv, db));
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let xv = val(*x);
            let gam = val(*gamma).data();
            let c = xv.cols();
            let mut dx = vec![0.0; xv.numel()];
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut xhat = vec![0.0; c];
            let mut dxhat = vec![0.0; c];
            for ((xr, gr), dr) in xv.data().chunks_exact(c).zip(gd.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                let (mu, inv) = row_moments(xr, *eps);
                for k in 0..c {
                    xhat[k] = (xr[k] - mu) * inv;
                    dxhat[k] = gr[k] * gam[k];
                    dgamma[k] += gr[k] * xhat[k];
                    dbeta[k] += gr[k];
                }
                let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                for k in 0..c {
                    dr[k] = inv * (dxhat[k] - mean_d - xhat[k] * mean_dx);
                }
            }
            send(*x, like(xv, dx));
            send(*gamma, Tensor::new(&[c], dgamma).expect("gamma shape"));
            send(*beta, Tensor::new(&[c], dbeta).expect("beta shape"));
        }
        Op::GatherRows { table, indices } => {
            let tv = val(*table);
            let c = tv.shape()[1];
            let mut dt = vec![0.0; tv.numel()];
            for (r, &i) in indices.iter().enumerate() {
                for k in 0..c {
                    dt[i * c + k] += gd[r * c + k];
                }
            }
            send(*table, like(tv, dt));
        }
        Op::Gather { input, indices } => {
            let xv = val(*input);
            let mut dx = vec![0.0; xv.numel()];
            for (r, &i) in indices.iter().enumerate() {
                dx[i] += gd[r];
            }
            send(*input, like(xv, dx));
        }
        Op::AddRow(a, row) => {
            let c = y.cols();
            if wants(*row) {
                let mut dr = vec![0.0; c];
                for gr in gd.chunks_exact(c) {
                    for (d, v) in dr.iter_mut().zip(gr) {
                        *d += v;
                    }
                }
                send(*row, like(val(*row), dr));
            }
            send(*a, g.clone());
        }
        Op::LerpRows { s, v, alpha } => {
            let (sv, vv, av) = (val(*s), val(*v), val(*alpha));
            let c = sv.shape()[1];
            let mut ds = vec![0.0; sv.numel()];
            let mut dv = vec![0.0; vv.numel()];
            let mut da = vec![0.0; av.numel()];
            for (i, a) in av.data().iter().enumerate() {
                for k in 0..c {
                    let idx = i * c + k;
                    ds[idx] = a * gd[idx];
                    dv[idx] = (1.0 - a) * gd[idx];
                    da[i] += gd[idx] * (sv.data()[idx] - vv.data()[idx]);
                }
            }
            send(*s, like(sv, ds));
            send(*v, like(vv, dv));
            send(*alpha, like(av, da));
        }
    }
}
