//! The autograd tape.
//!
//! Ops execute eagerly; each records its parents so `backward` can walk the
//! tape in reverse. Values are dynamic-rank f64 arrays; image-like ops use
//! (B, C, H, W), vector ops use (B, D), and losses are 0-d scalars.

use std::collections::BTreeMap;

use ndarray::{ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn, Slice};

use super::conv;
use super::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param { pid: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Elu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    /// a + c * b
    AddScaled { a: NodeId, b: NodeId, c: f64 },
    ConcatC { xs: Vec<NodeId> },
    SliceC { x: NodeId, c0: usize, c1: usize },
    Upsample2 { x: NodeId },
    GlobalAvgPool { x: NodeId },
    BroadcastHw { x: NodeId },
    Reparam { mu: NodeId, logvar: NodeId, eps: NodeId },
    MseMean { a: NodeId, b: NodeId },
    L1Mean { a: NodeId, b: NodeId },
    KlStdNormal { mu: NodeId, logvar: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
    WeightedSum { xs: Vec<NodeId>, ws: Vec<f64> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    /// One tape node per param id, so reuse accumulates gradients.
    param_nodes: BTreeMap<usize, NodeId>,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.len(), 1);
        v.iter().next().copied().unwrap()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Const, false)
    }

    /// Bind a parameter. Repeated binds of the same pid return one node.
    pub fn param(&mut self, store: &ParamStore, pid: usize) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&pid) {
            return id;
        }
        let id = self.push(store.value(pid).clone(), Op::Param { pid }, true);
        self.param_nodes.insert(pid, id);
        id
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let y = conv::conv2d_fwd(&xv, &wv, bv.as_slice().unwrap(), stride, pad);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(y.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// x: (B, I), w: (O, I), b: (O) -> (B, O)
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let (bsz, i) = xv.dim();
        let (o, _) = wv.dim();
        let mut y = vec![0.0; bsz * o];
        conv::gemm(
            xv.as_slice().unwrap(),
            bsz,
            i,
            false,
            wv.as_slice().unwrap(),
            o,
            i,
            true,
            &mut y,
            1.0,
            0.0,
        );
        let mut y = ndarray::Array2::from_shape_vec((bsz, o), y).unwrap();
        y += &bv.insert_axis(Axis(0));
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(y.into_dyn(), Op::Linear { x, w, b }, needs)
    }

    pub fn elu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0]
            .value
            .mapv(|v| if v > 0.0 { v } else { v.exp() - 1.0 });
        let needs = self.needs(x);
        self.push(y, Op::Elu { x }, needs)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        let needs = self.needs(x);
        self.push(y, Op::Sigmoid { x }, needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::Add { a, b }, needs)
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        let y = &self.nodes[a.0].value + &(c * &self.nodes[b.0].value);
        let needs = self.needs(a) || self.needs(b);
        self.push(y, Op::AddScaled { a, b, c }, needs)
    }

    /// Concatenate (B, C, H, W) nodes along the channel axis.
    pub fn concat_c(&mut self, xs: &[NodeId]) -> NodeId {
        let views: Vec<_> = xs.iter().map(|id| self.nodes[id.0].value.view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).unwrap();
        let needs = xs.iter().any(|&id| self.needs(id));
        self.push(y, Op::ConcatC { xs: xs.to_vec() }, needs)
    }

    /// Channels [c0, c1) of a (B, C, H, W) node.
    pub fn slice_c(&mut self, x: NodeId, c0: usize, c1: usize) -> NodeId {
        let y = self.nodes[x.0]
            .value
            .slice_axis(Axis(1), Slice::from(c0..c1))
            .to_owned();
        let needs = self.needs(x);
        self.push(y, Op::SliceC { x, c0, c1 }, needs)
    }

    /// Nearest-neighbor 2x spatial upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (b, c, h, w) = xv.dim();
        let mut y = ndarray::Array4::zeros((b, c, 2 * h, 2 * w));
        for bi in 0..b {
            for ci in 0..c {
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        y[[bi, ci, yy, xx]] = xv[[bi, ci, yy / 2, xx / 2]];
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(y.into_dyn(), Op::Upsample2 { x }, needs)
    }

    /// (B, C, H, W) -> (B, C) spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let y = xv.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
        let needs = self.needs(x);
        self.push(y.into_dyn(), Op::GlobalAvgPool { x }, needs)
    }

    /// (B, C) -> (B, C, h, w) by copying each scalar over the plane.
    pub fn broadcast_hw(&mut self, x: NodeId, h: usize, w: usize) -> NodeId {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (b, c) = xv.dim();
        let mut y = ndarray::Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                y.slice_mut(ndarray::s![bi, ci, .., ..]).fill(xv[[bi, ci]]);
            }
        }
        let needs = self.needs(x);
        self.push(y.into_dyn(), Op::BroadcastHw { x }, needs)
    }

    /// z = mu + exp(logvar / 2) * eps, with eps a constant noise node.
    pub fn reparam(&mut self, mu: NodeId, logvar: NodeId, eps: NodeId) -> NodeId {
        let z = &self.nodes[mu.0].value
            + &(self.nodes[logvar.0].value.mapv(|lv| (0.5 * lv).exp())
                * &self.nodes[eps.0].value);
        let needs = self.needs(mu) || self.needs(logvar);
        self.push(z, Op::Reparam { mu, logvar, eps }, needs)
    }

    /// Mean over all elements of (a - b)^2.
    pub fn mse_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let v = d.mapv(|x| x * x).mean().unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(scalar(v), Op::MseMean { a, b }, needs)
    }

    /// Mean over all elements of |a - b|.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let v = d.mapv(f64::abs).mean().unwrap();
        let needs = self.needs(a) || self.needs(b);
        self.push(scalar(v), Op::L1Mean { a, b }, needs)
    }

    /// KL(N(mu, exp(logvar)) || N(0, 1)), summed over dims, mean over batch.
    pub fn kl_std_normal(&mut self, mu: NodeId, logvar: NodeId) -> NodeId {
        let muv = &self.nodes[mu.0].value;
        let lvv = &self.nodes[logvar.0].value;
        let b = muv.shape()[0] as f64;
        let total: f64 = muv
            .iter()
            .zip(lvv.iter())
            .map(|(&m, &lv)| -0.5 * (lv - m * m - lv.exp() + 1.0))
            .sum();
        let needs = self.needs(mu) || self.needs(logvar);
        self.push(scalar(total / b), Op::KlStdNormal { mu, logvar }, needs)
    }

    /// Softmax cross-entropy, mean over the batch. logits: (B, K).
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().unwrap();
        let (b, _) = lv.dim();
        assert_eq!(b, labels.len());
        let mut total = 0.0;
        for (row, &y) in lv.outer_iter().zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let needs = self.needs(logits);
        self.push(
            scalar(total / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        )
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, xs: &[NodeId], ws: &[f64]) -> NodeId {
        assert_eq!(xs.len(), ws.len());
        let v = xs
            .iter()
            .zip(ws)
            .map(|(&x, &w)| self.scalar(x) * w)
            .sum::<f64>();
        let needs = xs.iter().any(|&id| self.needs(id));
        self.push(
            scalar(v),
            Op::WeightedSum {
                xs: xs.to_vec(),
                ws: ws.to_vec(),
            },
            needs,
        )
    }

    /// Reverse pass from a scalar root; accumulates parameter gradients
    /// into `store` (in addition to whatever is already there).
    pub fn backward(&self, root: NodeId, store: &mut ParamStore) {
        debug_assert_eq!(self.nodes[root.0].value.len(), 1, "root must be scalar");
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for id in (0..=root.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(gy) = grads[id].take() else {
                continue;
            };
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Param { pid } => store.add_grad(*pid, &gy),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
                    if self.needs(*x) {
                        let xs = self.nodes[x.0].value.shape();
                        let dx = conv::conv2d_bwd_input(&gy4, &wv, *stride, *pad, xs[2], xs[3]);
                        acc(&mut grads, x.0, dx.into_dyn());
                    }
                    if self.needs(*w) || self.needs(*b) {
                        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                        let k = wv.dim().2;
                        let (dw, db) = conv::conv2d_bwd_params(&xv, &gy4, *stride, *pad, k);
                        if self.needs(*w) {
                            acc(&mut grads, w.0, dw.into_dyn());
                        }
                        if self.needs(*b) {
                            acc(&mut grads, b.0, db.into_dyn());
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let gy2 = gy.view().into_dimensionality::<Ix2>().unwrap();
                    let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let wv = self.nodes[w.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let (bsz, i) = xv.dim();
                    let (o, _) = wv.dim();
                    if self.needs(*x) {
                        let mut dx = vec![0.0; bsz * i];
                        conv::gemm(
                            gy2.as_slice().unwrap(),
                            bsz,
                            o,
                            false,
                            wv.as_slice().unwrap(),
                            o,
                            i,
                            false,
                            &mut dx,
                            1.0,
                            0.0,
                        );
                        let dx = ndarray::Array2::from_shape_vec((bsz, i), dx).unwrap();
                        acc(&mut grads, x.0, dx.into_dyn());
                    }
                    if self.needs(*w) {
                        let mut dw = vec![0.0; o * i];
                        conv::gemm(
                            gy2.as_slice().unwrap(),
                            bsz,
                            o,
                            true,
                            xv.as_slice().unwrap(),
                            bsz,
                            i,
                            false,
                            &mut dw,
                            1.0,
                            0.0,
                        );
                        let dw = ndarray::Array2::from_shape_vec((o, i), dw).unwrap();
                        acc(&mut grads, w.0, dw.into_dyn());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, b.0, gy2.sum_axis(Axis(0)).into_dyn());
                    }
                }
                Op::Elu { x } => {
                    let d = self.nodes[id]
                        .value
                        .mapv(|y| if y >= 0.0 { 1.0 } else { y + 1.0 });
                    acc(&mut grads, x.0, gy * d);
                }
                Op::Sigmoid { x } => {
                    let d = self.nodes[id].value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, x.0, gy * d);
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        acc(&mut grads, a.0, gy.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut grads, b.0, gy);
                    }
                }
                Op::AddScaled { a, b, c } => {
                    if self.needs(*b) {
                        acc(&mut grads, b.0, &gy * *c);
                    }
                    if self.needs(*a) {
                        acc(&mut grads, a.0, gy);
                    }
                }
                Op::ConcatC { xs } => {
                    let mut c0 = 0;
                    for &xid in xs {
                        let c = self.nodes[xid.0].value.shape()[1];
                        if self.needs(xid) {
                            let part = gy
                                .slice_axis(Axis(1), Slice::from(c0..c0 + c))
                                .to_owned();
                            acc(&mut grads, xid.0, part);
                        }
                        c0 += c;
                    }
                }
                Op::SliceC { x, c0, c1 } => {
                    let mut dx = ArrayD::zeros(self.nodes[x.0].value.raw_dim());
                    dx.slice_axis_mut(Axis(1), Slice::from(*c0..*c1))
                        .assign(&gy);
                    acc(&mut grads, x.0, dx);
                }
                Op::Upsample2 { x } => {
                    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let (b, c, h2, w2) = gy4.dim();
                    let mut dx = ndarray::Array4::zeros((b, c, h2 / 2, w2 / 2));
                    for bi in 0..b {
                        for ci in 0..c {
                            for yy in 0..h2 {
                                for xx in 0..w2 {
                                    dx[[bi, ci, yy / 2, xx / 2]] += gy4[[bi, ci, yy, xx]];
                                }
                            }
                        }
                    }
                    acc(&mut grads, x.0, dx.into_dyn());
                }
                Op::GlobalAvgPool { x } => {
                    let shape = self.nodes[x.0].value.shape().to_vec();
                    let (h, w) = (shape[2], shape[3]);
                    let gy2 = gy.view().into_dimensionality::<Ix2>().unwrap();
                    let mut dx = ndarray::Array4::zeros((shape[0], shape[1], h, w));
                    let inv = 1.0 / (h * w) as f64;
                    for bi in 0..shape[0] {
                        for ci in 0..shape[1] {
                            dx.slice_mut(ndarray::s![bi, ci, .., ..])
                                .fill(gy2[[bi, ci]] * inv);
                        }
                    }
                    acc(&mut grads, x.0, dx.into_dyn());
                }
                Op::BroadcastHw { x } => {
                    let gy4 = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let dx = gy4.sum_axis(Axis(3)).sum_axis(Axis(2));
                    acc(&mut grads, x.0, dx.into_dyn());
                }
                Op::Reparam { mu, logvar, eps } => {
                    if self.needs(*logvar) {
                        let sig = self.nodes[logvar.0].value.mapv(|lv| (0.5 * lv).exp());
                        let dlv = &gy * &(0.5 * sig * &self.nodes[eps.0].value);
                        acc(&mut grads, logvar.0, dlv);
                    }
                    if self.needs(*mu) {
                        acc(&mut grads, mu.0, gy);
                    }
                }
                Op::MseMean { a, b } => {
                    let g = gy.iter().next().copied().unwrap();
                    let d = &self.nodes[a.0].value - &self.nodes[b.0].value;
                    let n = d.len() as f64;
                    let da = d.mapv(|x| 2.0 * x / n * g);
                    if self.needs(*b) {
                        acc(&mut grads, b.0, -&da);
                    }
                    if self.needs(*a) {
                        acc(&mut grads, a.0, da);
                    }
                }
                Op::L1Mean { a, b } => {
                    let g = gy.iter().next().copied().unwrap();
                    let d = &self.nodes[a.0].value - &self.nodes[b.0].value;
                    let n = d.len() as f64;
                    let da = d.mapv(|x| x.signum() / n * g);
                    if self.needs(*b) {
                        acc(&mut grads, b.0, -&da);
                    }
                    if self.needs(*a) {
                        acc(&mut grads, a.0, da);
                    }
                }
                Op::KlStdNormal { mu, logvar } => {
                    let g = gy.iter().next().copied().unwrap();
                    let b = self.nodes[mu.0].value.shape()[0] as f64;
                    if self.needs(*mu) {
                        let dmu = self.nodes[mu.0].value.mapv(|m| m / b * g);
                        acc(&mut grads, mu.0, dmu);
                    }
                    if self.needs(*logvar) {
                        let dlv = self.nodes[logvar.0]
                            .value
                            .mapv(|lv| (lv.exp() - 1.0) / (2.0 * b) * g);
                        acc(&mut grads, logvar.0, dlv);
                    }
                }
                Op::CrossEntropy { logits, labels } => {
                    let g = gy.iter().next().copied().unwrap();
                    let lv = self.nodes[logits.0].value.view().into_dimensionality::<Ix2>().unwrap();
                    let (b, k) = lv.dim();
                    let mut dl = ndarray::Array2::zeros((b, k));
                    for (bi, (row, &y)) in lv.outer_iter().zip(labels).enumerate() {
                        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        for ki in 0..k {
                            let p = (row[ki] - m).exp() / denom;
                            dl[[bi, ki]] =
                                (p - if ki == y { 1.0 } else { 0.0 }) / b as f64 * g;
                        }
                    }
                    acc(&mut grads, logits.0, dl.into_dyn());
                }
                Op::WeightedSum { xs, ws } => {
                    let g = gy.iter().next().copied().unwrap();
                    for (&xid, &wi) in xs.iter().zip(ws) {
                        if self.needs(xid) {
                            let gx = ArrayD::from_elem(IxDyn(&[]), g * wi);
                            // scalar nodes may be 0-d or length-1; match shape
                            let gx = if self.nodes[xid.0].value.raw_dim() == gx.raw_dim() {
                                gx
                            } else {
                                ArrayD::from_elem(self.nodes[xid.0].value.raw_dim(), g * wi)
                            };
                            acc(&mut grads, xid.0, gx);
                        }
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

fn acc(grads: &mut [Option<ArrayD<f64>>], idx: usize, g: ArrayD<f64>) {
    match &mut grads[idx] {
        Some(t) => *t += &g,
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_conv, init_linear};
    use crate::rng::{next_gaussian, sub_rng};
    use ndarray::IxDyn;

    fn randn(shape: &[usize], rng: &mut impl rand::Rng) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| next_gaussian(rng))
    }

    /// A small net exercising every op, finite-difference checked end to end.
    #[test]
    fn full_op_set_matches_finite_differences() {
        let mut rng = sub_rng(11, "tape-fd");
        let mut store = ParamStore::new();
        let w1 = store.add("w1", init_conv(&mut rng, 4, 2, 3));
        let b1 = store.add("b1", ndarray::ArrayD::zeros(IxDyn(&[4])));
        let w2 = store.add("w2", init_conv(&mut rng, 2, 6, 3));
        let b2 = store.add("b2", randn(&[2], &mut rng) * 0.1);
        let wl = store.add("wl", init_linear(&mut rng, 3, 4, 1.0));
        let bl = store.add("bl", randn(&[3], &mut rng) * 0.1);
        let wmu = store.add("wmu", init_linear(&mut rng, 2, 4, 1.0));
        let bmu = store.add("bmu", randn(&[2], &mut rng) * 0.1);
        let wlv = store.add("wlv", init_linear(&mut rng, 2, 4, 0.1));
        let blv = store.add("blv", ndarray::ArrayD::zeros(IxDyn(&[2])));

        let x_in = randn(&[2, 2, 6, 6], &mut rng);
        let target = randn(&[2, 2, 6, 6], &mut rng) * 0.3 + 0.5;
        let eps = randn(&[2, 2], &mut rng);
        let labels = vec![1usize, 2usize];

        let loss_of = |store: &ParamStore| -> (f64, Tape, NodeId) {
            let mut t = Tape::new();
            let x = t.constant(x_in.clone());
            let tgt = t.constant(target.clone());
            let epsn = t.constant(eps.clone());
            let w1n = t.param(store, w1);
            let b1n = t.param(store, b1);
            let h1 = t.conv2d(x, w1n, b1n, 2, 1); // (2,4,3,3)
            let h1 = t.elu(h1);
            let pooled = t.global_avg_pool(h1); // (2,4)
            let wln = t.param(store, wl);
            let bln = t.param(store, bl);
            let logits = t.linear(pooled, wln, bln); // (2,3)
            let ce = t.cross_entropy(logits, &labels);
            let wmun = t.param(store, wmu);
            let bmun = t.param(store, bmu);
            let wlvn = t.param(store, wlv);
            let blvn = t.param(store, blv);
            let mu = t.linear(pooled, wmun, bmun); // (2,2)
            let lv = t.linear(pooled, wlvn, blvn);
            let kl = t.kl_std_normal(mu, lv);
            let z = t.reparam(mu, lv, epsn); // (2,2)
            let zmap = t.broadcast_hw(z, 3, 3); // (2,2,3,3)
            let cat = t.concat_c(&[h1, zmap]); // (2,6,3,3)
            let w2n = t.param(store, w2);
            let b2n = t.param(store, b2);
            let d = t.conv2d(cat, w2n, b2n, 1, 1); // (2,2,3,3)
            let up = t.upsample2(d); // (2,2,6,6)
            let up = t.sigmoid(up);
            let front = t.slice_c(up, 0, 1);
            let back = t.slice_c(up, 1, 2);
            let whole = t.concat_c(&[front, back]);
            let skip = t.add_scaled(whole, up, 0.5);
            let mse = t.mse_mean(skip, tgt);
            let l1 = t.l1_mean(skip, tgt);
            let total = t.weighted_sum(&[mse, l1, kl, ce], &[1.0, 0.7, 0.1, 0.5]);
            (t.scalar(total), t, total)
        };

        let (_, tape, root) = loss_of(&store);
        store.zero_grads();
        tape.backward(root, &mut store);

        let mut max_rel = 0.0f64;
        for pid in 0..store.len() {
            let n = store.value(pid).len();
            for j in (0..n).step_by(3) {
                let orig = store.value(pid).as_slice().unwrap()[j];
                let h = 1e-6 * (1.0 + orig.abs());
                store.value_mut(pid).as_slice_mut().unwrap()[j] = orig + h;
                let (lp, _, _) = loss_of(&store);
                store.value_mut(pid).as_slice_mut().unwrap()[j] = orig - h;
                let (lm, _, _) = loss_of(&store);
                store.value_mut(pid).as_slice_mut().unwrap()[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = store.grad(pid).as_slice().unwrap()[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
                assert!(
                    rel < 1e-5,
                    "param {} [{j}]: fd={fd:.9e} analytic={an:.9e} rel={rel:.3e}",
                    store.name(pid)
                );
            }
        }
        assert!(max_rel < 1e-5, "max rel err {max_rel:.3e}");
    }

    #[test]
    fn param_nodes_are_shared_and_grads_accumulate() {
        let mut rng = sub_rng(5, "tape-share");
        let mut store = ParamStore::new();
        let w = store.add("w", randn(&[3], &mut rng));
        let mut t = Tape::new();
        let a = t.param(&store, w);
        let b = t.param(&store, w);
        assert_eq!(a, b);
        let x = t.constant(randn(&[3], &mut rng));
        let s1 = t.mse_mean(a, x);
        let s2 = t.mse_mean(b, x);
        let total = t.weighted_sum(&[s1, s2], &[1.0, 1.0]);
        store.zero_grads();
        t.backward(total, &mut store);
        // d/dw of 2*mse(w, x) = 4 (w - x) / 3
        let want = (&store.value(w).clone() - &x_val(&t, x)) * (4.0 / 3.0);
        let got = store.grad(w).clone();
        let diff = (&got - &want).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    fn x_val(t: &Tape, id: NodeId) -> ArrayD<f64> {
        t.value(id).clone()
    }
}
