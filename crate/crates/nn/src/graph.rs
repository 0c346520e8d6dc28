//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as it is evaluated; nodes are stored
//! in creation order, which is a valid topological order, so the backward
//! pass is a single reverse sweep.

use std::collections::HashMap;

use crate::conv::{self, ConvGeom};
use crate::layers::Activation;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{NnError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Operation with a user supplied backward rule.
///
/// Used for losses whose analytic gradient lives outside this crate.
pub trait CustomOp {
    fn forward(&self, inputs: &[&Tensor]) -> Tensor;

    /// Gradients w.r.t. each input given the output gradient. `None` entries
    /// mean "no gradient" for that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, cols: Vec<f32> },
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    AddChannel(Var, Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    Upsample2(Var),
    PixelShuffle(Var, usize),
    StackGroups { x: Var, ranges: Vec<(usize, usize)> },
    MergeGroups { x: Var, ranges: Vec<(usize, usize)>, counts: Vec<f32> },
    MeanAbs(Var, Var),
    WeightedSum(Vec<(Var, f32)>),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true }
    }

    /// Graph for inference: no intermediate buffers are kept and
    /// [`Graph::backward`] yields no gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn into_value(mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, 0, 0, 0]))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Constant that still receives a gradient (for input-gradient checks).
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape(), self.value(w).shape());
        if xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(NnError::Shape(format!("conv2d input {xs:?} with weight {ws:?}")));
        }
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], ws[2], stride, pad)
            .ok_or_else(|| NnError::Shape(format!("conv2d kernel {ws:?} larger than padded input {xs:?}")))?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        let keep = rg && self.grad_enabled;
        let (out, cols) =
            conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom, keep);
        Ok(self.push(out, Op::Conv { x, w, b, geom, cols }, rg))
    }

    pub fn act(&mut self, x: Var, a: Activation) -> Var {
        if a == Activation::Identity {
            return x;
        }
        let out = self.value(x).map(|v| a.apply(v));
        let rg = self.rg(x);
        self.push(out, Op::Act(x, a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `x[n,c,:,:] + v[n,c]` where `v` is `[N,C,1,1]` (or `[1,C,1,1]`, broadcast over the batch).
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xs, vs) = (self.value(x).shape(), self.value(v).shape());
        if vs[1] != xs[1] || vs[2] != 1 || vs[3] != 1 || (vs[0] != xs[0] && vs[0] != 1) {
            return Err(NnError::Shape(format!("add_channel {xs:?} + {vs:?}")));
        }
        let mut out = self.value(x).clone();
        let hw = xs[2] * xs[3];
        let vd = self.value(v).data();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let (n, c) = (i / xs[1], i % xs[1]);
            let add = vd[if vs[0] == 1 { c } else { n * xs[1] + c }];
            for e in chunk {
                *e += add;
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::AddChannel(x, v), rg))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(NnError::Shape(format!("concat {sa:?} with {sb:?}")));
        }
        let (pa, pb) = (sa[1] * sa[2] * sa[3], sb[1] * sb[2] * sb[3]);
        let mut data = Vec::with_capacity(sa[0] * (pa + pb));
        for n in 0..sa[0] {
            data.extend_from_slice(&self.value(a).data()[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&self.value(b).data()[n * pb..(n + 1) * pb]);
        }
        let out = Tensor::from_vec([sa[0], sa[1] + sb[1], sa[2], sa[3]], data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat(a, b), rg))
    }

    /// Channels `[start, end)` of `x`.
    pub fn slice_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.value(x).shape();
        if start >= end || end > s[1] {
            return Err(NnError::Shape(format!("channel slice {start}..{end} of {s:?}")));
        }
        let out = slice_channels(self.value(x), start, end);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
        for p in 0..n * c {
            let s = &src.data()[p * h * w..(p + 1) * h * w];
            let d = &mut out.data_mut()[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2(x), rg)
    }

    /// Depth-to-space: `[N, C·r², H, W]` → `[N, C, H·r, W·r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let [n, cr, h, w] = self.value(x).shape();
        if r == 0 || cr % (r * r) != 0 {
            return Err(NnError::Shape(format!("pixel_shuffle factor {r} on {cr} channels")));
        }
        let c = cr / (r * r);
        let src = self.value(x).data();
        let mut out = Tensor::zeros([n, c, h * r, w * r]);
        let od = out.data_mut();
        for (p, plane) in src.chunks(h * w).enumerate() {
            let (item, ch) = (p / cr, p % cr);
            let (co, i, j) = (ch / (r * r), (ch % (r * r)) / r, ch % r);
            let base = (item * c + co) * h * r * w * r;
            for y in 0..h {
                for xx in 0..w {
                    od[base + (y * r + i) * w * r + xx * r + j] = plane[y * w + xx];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::PixelShuffle(x, r), rg))
    }

    /// Cuts `x: [N,C,H,W]` into equal-width band ranges and stacks them on the
    /// batch axis group-major: output item `g·N + n` is group `g` of item `n`.
    pub fn stack_groups(&mut self, x: Var, ranges: &[(usize, usize)]) -> Result<Var> {
        let s = self.value(x).shape();
        let width = check_ranges(ranges, s[1])?;
        let parts: Vec<Tensor> = ranges.iter().map(|&(a, b)| slice_channels(self.value(x), a, b)).collect();
        let out = Tensor::stack(&parts);
        debug_assert_eq!(out.c(), width);
        let rg = self.rg(x);
        Ok(self.push(out, Op::StackGroups { x, ranges: ranges.to_vec() }, rg))
    }

    /// Inverse of [`Graph::stack_groups`]: every band of the `c`-band output
    /// is the mean of all group slices that cover it.
    pub fn merge_groups(&mut self, x: Var, ranges: &[(usize, usize)], c: usize) -> Result<Var> {
        let s = self.value(x).shape();
        let width = check_ranges(ranges, c)?;
        if s[1] != width || s[0] % ranges.len() != 0 {
            return Err(NnError::Shape(format!("merge_groups input {s:?} for {} groups", ranges.len())));
        }
        let mut counts = vec![0.0f32; c];
        for &(a, b) in ranges {
            for cnt in &mut counts[a..b] {
                *cnt += 1.0;
            }
        }
        if counts.iter().any(|&k| k == 0.0) {
            return Err(NnError::Shape("merge_groups: band coverage gap".into()));
        }
        let n = s[0] / ranges.len();
        let hw = s[2] * s[3];
        let src = self.value(x);
        let mut out = Tensor::zeros([n, c, s[2], s[3]]);
        for (g, &(a, _)) in ranges.iter().enumerate() {
            for i in 0..n {
                for j in 0..width {
                    let from = ((g * n + i) * width + j) * hw;
                    let to = (i * c + a + j) * hw;
                    let scale = 1.0 / counts[a + j];
                    for k in 0..hw {
                        out.data_mut()[to + k] += src.data()[from + k] * scale;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MergeGroups { x, ranges: ranges.to_vec(), counts }, rg))
    }

    /// Scalar mean absolute difference.
    pub fn mean_abs(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NnError::Shape(format!("mean_abs {sa:?} vs {sb:?}")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let total: f64 = va.data().iter().zip(vb.data()).map(|(p, q)| (p - q).abs() as f64).sum();
        let out = Tensor::full([1, 1, 1, 1], (total / va.len() as f64) as f32);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MeanAbs(a, b), rg))
    }

    /// `Σ wᵢ·xᵢ` over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let first = terms.first().ok_or_else(|| NnError::Shape("empty weighted sum".into()))?;
        let mut out = Tensor::zeros(self.value(first.0).shape());
        for &(v, wgt) in terms {
            if self.value(v).shape() != out.shape() {
                return Err(NnError::Shape("weighted_sum: inconsistent shapes".into()));
            }
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += wgt * x;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(out, Op::WeightedSum(terms.to_vec()), rg))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Var {
        let out = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&vals)
        };
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(out, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Reverse sweep from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| {
                if !self.rg(v) {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Conv { x, w, b, geom, cols } => {
                    let cg =
                        conv::conv2d_backward(self.value(*x), self.value(*w), cols, geom, &g, self.rg(*x));
                    send(*x, cg.dx, &mut grads);
                    send(*w, cg.dw, &mut grads);
                    if let Some(b) = b {
                        send(*b, cg.db, &mut grads);
                    }
                }
                Op::Act(x, a) => {
                    let dx = self.value(*x).zip_map(&g, |v, d| a.derivative(v) * d);
                    send(*x, dx, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Sub(a, b) => {
                    send(*b, g.map(|v| -v), &mut grads);
                    send(*a, g, &mut grads);
                }
                Op::Scale(x, s) => send(*x, g.map(|v| v * s), &mut grads),
                Op::AddChannel(x, v) => {
                    let vs = self.value(*v).shape();
                    let xs = g.shape();
                    let hw = xs[2] * xs[3];
                    let mut dv = Tensor::zeros(vs);
                    for (k, chunk) in g.data().chunks(hw).enumerate() {
                        let (n, c) = (k / xs[1], k % xs[1]);
                        let idx = if vs[0] == 1 { c } else { n * xs[1] + c };
                        dv.data_mut()[idx] += chunk.iter().sum::<f32>();
                    }
                    send(*v, dv, &mut grads);
                    send(*x, g, &mut grads);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).c();
                    let c = g.c();
                    send(*a, slice_channels(&g, 0, ca), &mut grads);
                    send(*b, slice_channels(&g, ca, c), &mut grads);
                }
                Op::Slice { x, start } => {
                    let xs = self.value(*x).shape();
                    let mut dx = Tensor::zeros(xs);
                    let hw = xs[2] * xs[3];
                    let width = g.c();
                    for n in 0..xs[0] {
                        let src = &g.data()[n * width * hw..(n + 1) * width * hw];
                        let off = (n * xs[1] + start) * hw;
                        dx.data_mut()[off..off + width * hw].copy_from_slice(src);
                    }
                    send(*x, dx, &mut grads);
                }
                Op::Upsample2(x) => {
                    let [n, c, h, w] = self.value(*x).shape();
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for p in 0..n * c {
                        let s = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                        let d = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(y / 2) * w + xx / 2] += s[y * 2 * w + xx];
                            }
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::PixelShuffle(x, r) => {
                    let r = *r;
                    let [_, cr, h, w] = self.value(*x).shape();
                    let c = cr / (r * r);
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    for (p, plane) in dx.data_mut().chunks_mut(h * w).enumerate() {
                        let (item, ch) = (p / cr, p % cr);
                        let (co, i, j) = (ch / (r * r), (ch % (r * r)) / r, ch % r);
                        let base = (item * c + co) * h * r * w * r;
                        for y in 0..h {
                            for xx in 0..w {
                                plane[y * w + xx] = g.data()[base + (y * r + i) * w * r + xx * r + j];
                            }
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::StackGroups { x, ranges } => {
                    let xs = self.value(*x).shape();
                    let n = xs[0];
                    let hw = xs[2] * xs[3];
                    let width = g.c();
                    let mut dx = Tensor::zeros(xs);
                    for (gi, &(a, _)) in ranges.iter().enumerate() {
                        for item in 0..n {
                            for j in 0..width {
                                let from = ((gi * n + item) * width + j) * hw;
                                let to = (item * xs[1] + a + j) * hw;
                                for k in 0..hw {
                                    dx.data_mut()[to + k] += g.data()[from + k];
                                }
                            }
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::MergeGroups { x, ranges, counts } => {
                    let xs = self.value(*x).shape();
                    let n = xs[0] / ranges.len();
                    let hw = xs[2] * xs[3];
                    let (width, c) = (xs[1], g.c());
                    let mut dx = Tensor::zeros(xs);
                    for (gi, &(a, _)) in ranges.iter().enumerate() {
                        for item in 0..n {
                            for j in 0..width {
                                let to = ((gi * n + item) * width + j) * hw;
                                let from = (item * c + a + j) * hw;
                                let scale = 1.0 / counts[a + j];
                                for k in 0..hw {
                                    dx.data_mut()[to + k] = g.data()[from + k] * scale;
                                }
                            }
                        }
                    }
                    send(*x, dx, &mut grads);
                }
                Op::MeanAbs(a, b) => {
                    let scale = g.data()[0] / self.value(*a).len() as f32;
                    let da = self.value(*a).zip_map(self.value(*b), |p, q| sign(p - q) * scale);
                    if self.rg(*b) {
                        send(*b, da.map(|v| -v), &mut grads);
                    }
                    send(*a, da, &mut grads);
                }
                Op::WeightedSum(terms) => {
                    for &(v, wgt) in terms {
                        send(v, g.map(|d| d * wgt), &mut grads);
                    }
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let dins = op.backward(&vals, &node.value, &g);
                    for (&v, d) in inputs.iter().zip(dins) {
                        if let Some(d) = d {
                            send(v, d, &mut grads);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_ranges(ranges: &[(usize, usize)], c: usize) -> Result<usize> {
    let first = ranges.first().ok_or_else(|| NnError::Shape("no band groups".into()))?;
    let width = first.1 - first.0;
    for &(a, b) in ranges {
        if b <= a || b > c || b - a != width {
            return Err(NnError::Shape(format!("band range {a}..{b} invalid for {c} bands / width {width}")));
        }
    }
    Ok(width)
}

fn slice_channels(t: &Tensor, start: usize, end: usize) -> Tensor {
    let [n, c, h, w] = t.shape();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * (end - start) * hw);
    for i in 0..n {
        data.extend_from_slice(&t.data()[(i * c + start) * hw..(i * c + end) * hw]);
    }
    Tensor::from_vec([n, end - start, h, w], data)
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter of `store`, zero for parameters the
    /// graph never touched.
    pub fn param_grads(&self, graph: &Graph, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match graph.params.get(&id).and_then(|&v| self.get(v)) {
                Some(g) => g.clone(),
                None => Tensor::zeros(store.value(id).shape()),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(f(x)·r))/dx for a random projection r.
    fn check_input_grad(x0: Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.variable(x0.clone());
        let y = f(&mut g, x);
        let r = Tensor::randn(g.value(y).shape(), &mut rng);
        let rv = g.constant(r.clone());
        let prod = g.custom(&[y, rv], Box::new(DotOp));
        let grads = g.backward(prod);
        let analytic = grads.get(x).unwrap().clone();

        let eval = |t: Tensor| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(t);
            let y = f(&mut g, x);
            g.value(y).data().iter().zip(r.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let h = 1e-2f32;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.data_mut()[i] += h;
            let mut m = x0.clone();
            m.data_mut()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h as f64);
            let a = analytic.data()[i] as f64;
            assert!((fd - a).abs() < 2e-2 * (1.0 + fd.abs()), "index {i}: fd {fd} vs analytic {a}");
        }
    }

    struct DotOp;
    impl CustomOp for DotOp {
        fn forward(&self, inputs: &[&Tensor]) -> Tensor {
            let s: f32 = inputs[0].data().iter().zip(inputs[1].data()).map(|(a, b)| a * b).sum();
            Tensor::full([1, 1, 1, 1], s)
        }
        fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
            vec![Some(inputs[1].map(|v| v * g.data()[0])), None]
        }
    }

    #[test]
    fn conv_and_activation_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = Tensor::randn([3, 2, 3, 3], &mut rng);
        let x0 = Tensor::randn([2, 2, 5, 4], &mut rng);
        check_input_grad(x0, |g, x| {
            let w = g.constant(w.clone());
            let y = g.conv2d(x, w, None, 2, 1).unwrap();
            g.act(y, Activation::Silu)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = Tensor::randn([2, 6, 3, 3], &mut rng);
        let ranges = [(0, 4), (2, 6)];
        check_input_grad(x0, |g, x| {
            let s = g.stack_groups(x, &ranges).unwrap();
            let u = g.upsample2(s);
            let u = g.pixel_shuffle(u, 2).unwrap();
            let u = g.concat(u, u).unwrap();
            let u = g.concat(u, u).unwrap();
            let u = g.slice_channels(u, 0, 4).unwrap();
            let m = g.merge_groups(u, &ranges, 6).unwrap();
            let a = g.slice_channels(m, 1, 5).unwrap();
            let b = g.slice_channels(m, 0, 2).unwrap();
            let c = g.concat(a, b).unwrap();
            g.scale(c, 1.5)
        });
    }

    #[test]
    fn merge_of_stack_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = Tensor::randn([2, 30, 2, 2], &mut rng);
        let ranges = [(0, 16), (12, 28), (14, 30)];
        let mut g = Graph::inference();
        let x = g.constant(x0.clone());
        let s = g.stack_groups(x, &ranges).unwrap();
        let m = g.merge_groups(s, &ranges, 30).unwrap();
        assert!(g.value(m).max_abs_diff(&x0) < 1e-6);
    }

    #[test]
    fn mean_abs_gradient_sign() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::from_vec([1, 1, 1, 4], vec![1.0, -1.0, 2.0, 0.0]));
        let b = g.constant(Tensor::zeros([1, 1, 1, 4]));
        let l = g.mean_abs(a, b).unwrap();
        assert_eq!(g.value(l).data()[0], 1.0);
        let grads = g.backward(l);
        assert_eq!(grads.get(a).unwrap().data(), &[0.25, -0.25, 0.25, 0.0]);
    }

    #[test]
    fn pixel_shuffle_places_subpixels() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_vec([1, 4, 1, 1], vec![0.0, 1.0, 2.0, 3.0]));
        let y = g.pixel_shuffle(x, 2).unwrap();
        assert_eq!(g.value(y).shape(), [1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn coverage_gap_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 4, 1, 1]));
        assert!(g.merge_groups(x, &[(0, 4), (6, 10)], 10).is_err());
    }
}
