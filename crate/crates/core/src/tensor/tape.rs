//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value, so insertion
//! order is a topological order. [`Tape::backward`] walks the nodes in reverse
//! insertion order and accumulates adjoints; only nodes that depend on a
//! parameter receive one.

use super::{gemm_nt, gemm_tn, MatmulKind, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    /// Constant input; never receives a gradient.
    Input,
    /// Differentiable leaf.
    Parameter,
    Op,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var, MatmulKind),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<f64>),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    kind: NodeKind,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to parameter `var`; zeros when the
    /// root does not depend on it. Constants and intermediate ops have none.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, kind: NodeKind, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, kind, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, NodeKind::Op, needs_grad)
    }

    /// Registers a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, NodeKind::Parameter, true)
    }

    /// Registers a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, NodeKind::Input, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> NodeKind {
        self.nodes[v.0].kind
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = MatmulKind::classify(self.shape(a), self.shape(b))?;
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(value, Op::MatMul(a, b, kind), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push_op(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push_op(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds `b` to every trailing block of `a` (bias addition).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add_suffix(self.value(b))?;
        Ok(self.push_op(value, Op::AddSuffix(a, b), &[a, b]))
    }

    /// Multiplies every trailing block of `a` by `b` (gain).
    pub fn mul_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul_suffix(self.value(b))?;
        Ok(self.push_op(value, Op::MulSuffix(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).scale(factor);
        self.push_op(value, Op::Scale(a, factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).relu();
        self.push_op(value, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).tanh();
        self.push_op(value, Op::Tanh(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).softmax_rows()?;
        Ok(self.push_op(value, Op::Softmax(a), &[a]))
    }

    /// Standardises each row over the last axis.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (value, inv_std) = self.value(a).layer_norm_rows(eps)?;
        Ok(self.push_op(value, Op::LayerNorm(a, inv_std), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let value = {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::concat(&refs, axis)?
        };
        Ok(self.push_op(value, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push_op(value, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        Ok(self.push_op(value, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(a).gather_rows(rows)?;
        Ok(self.push_op(value, Op::GatherRows(a, rows.to_vec()), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push_op(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push_op(value, Op::Mean(a), &[a])
    }

    /// Back-propagates from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(Tensor::ones(root_value.shape()));
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            if node.kind == NodeKind::Parameter {
                grads[idx] = Some(g);
            }
        }
        // every parameter gets an adjoint, zero when unreachable from the root
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.kind == NodeKind::Parameter && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, g: Tensor) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(target));
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b, kind) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (ga, gb) = matmul_backward(kind, av, bv, g, self.wants(a), self.wants(b));
                if let Some(ga) = ga {
                    self.accumulate(grads, a, ga);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(b) {
                    self.accumulate(grads, b, g.scale(-1.0));
                }
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    self.accumulate(grads, a, g.mul(self.value(b)).expect("shape checked in forward"));
                }
                if self.wants(b) {
                    self.accumulate(grads, b, g.mul(self.value(a)).expect("shape checked in forward"));
                }
            }
            &Op::AddSuffix(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(b) {
                    self.accumulate(grads, b, reduce_to_suffix(g, self.shape(b)));
                }
            }
            &Op::MulSuffix(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.wants(a) {
                    self.accumulate(grads, a, g.mul_suffix(bv).expect("shape checked in forward"));
                }
                if self.wants(b) {
                    let prod = g.mul(av).expect("shape checked in forward");
                    self.accumulate(grads, b, reduce_to_suffix(&prod, bv.shape()));
                }
            }
            &Op::Scale(a, factor) => self.accumulate(grads, a, g.scale(factor)),
            &Op::Relu(a) => {
                let x = self.value(a);
                let data = g.data().iter().zip(x.data()).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect();
                self.accumulate(grads, a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            &Op::Tanh(a) => {
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect();
                self.accumulate(grads, a, Tensor::from_parts(g.shape().to_vec(), data));
            }
            &Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().expect("softmax input has a last axis");
                let mut out = vec![0.0; y.len()];
                for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let n = *y.shape().last().expect("layer-norm input has a last axis");
                let nf = n as f64;
                let mut out = vec![0.0; y.len()];
                for (((o, yr), gr), &inv) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)).zip(inv_std) {
                    let mean_g = gr.iter().sum::<f64>() / nf;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::Concat(parts, axis) => {
                let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[*axis]).collect();
                let pieces = g.split(*axis, &sizes).expect("shape checked in forward");
                for (&p, piece) in parts.iter().zip(pieces) {
                    self.accumulate(grads, p, piece);
                }
            }
            &Op::Reshape(a) => {
                self.accumulate(grads, a, g.reshape(self.shape(a)).expect("shape checked in forward"));
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                self.accumulate(grads, *a, g.permute(&inverse).expect("valid inverse permutation"));
            }
            Op::GatherRows(a, rows) => {
                let shape = self.shape(*a).to_vec();
                let c = shape[1];
                let mut out = vec![0.0; shape[0] * c];
                for (k, &r) in rows.iter().enumerate() {
                    for (o, &gv) in out[r * c..(r + 1) * c].iter_mut().zip(&g.data()[k * c..(k + 1) * c]) {
                        *o += gv;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(shape, out));
            }
            &Op::Sum(a) => {
                let shape = self.shape(a);
                self.accumulate(grads, a, Tensor::full(shape, g.item()));
            }
            &Op::Mean(a) => {
                let x = self.value(a);
                self.accumulate(grads, a, Tensor::full(x.shape(), g.item() / x.len() as f64));
            }
        }
    }
}

/// Sums the leading blocks of `g` into a tensor of shape `suffix`.
fn reduce_to_suffix(g: &Tensor, suffix: &[usize]) -> Tensor {
    let inner: usize = suffix.iter().product();
    let mut out = vec![0.0; inner];
    for chunk in g.data().chunks(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::from_parts(suffix.to_vec(), out)
}

fn matmul_backward(
    kind: MatmulKind,
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = want_a.then(|| vec![0.0; a.len()]);
    let mut gb = want_b.then(|| vec![0.0; b.len()]);
    match kind {
        MatmulKind::Rows { m, k, n } => {
            if let Some(ga) = ga.as_mut() {
                gemm_nt(gd, bd, ga, m, n, k);
            }
            if let Some(gb) = gb.as_mut() {
                gemm_tn(ad, gd, gb, k, m, n);
            }
        }
        MatmulKind::SharedLeft { g: batches, m, k, n } => {
            for bi in 0..batches {
                let gs = &gd[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    gemm_nt(gs, &bd[bi * k * n..(bi + 1) * k * n], ga, m, n, k);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm_tn(ad, gs, &mut gb[bi * k * n..(bi + 1) * k * n], k, m, n);
                }
            }
        }
        MatmulKind::Batched { g: batches, m, k, n } => {
            for bi in 0..batches {
                let gs = &gd[bi * m * n..(bi + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    gemm_nt(gs, &bd[bi * k * n..(bi + 1) * k * n], &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                }
                if let Some(gb) = gb.as_mut() {
                    gemm_tn(&ad[bi * m * k..(bi + 1) * m * k], gs, &mut gb[bi * k * n..(bi + 1) * k * n], k, m, n);
                }
            }
        }
    }
    (
        ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    /// Runs `build` once on a tape for backward and repeatedly for the
    /// finite-difference oracle, returning the worst relative error.
    fn check(inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root).unwrap();
        let numeric = finite_diff(
            |ps| {
                let mut t = Tape::new();
                let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
                let r = build(&mut t, &vs);
                t.value(r).item()
            },
            inputs,
            1e-5,
        );
        // central differences carry ~1e-11 absolute rounding noise here, so
        // entries far below that scale are compared against a 1e-6 floor
        vars.iter()
            .zip(&numeric)
            .flat_map(|(&v, n)| grads.get(v).unwrap().data().iter().zip(n.data()).map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-6)).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    /// Weighted sum so that every output element gets a distinct adjoint.
    fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(&mut rng, t.shape(x));
        let w = t.constant(w);
        let p = t.mul(x, w).unwrap();
        t.sum(p)
    }

    #[test]
    fn square_sum_gradient_is_twice_x() {
        let x = Tensor::vector(&[1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap(), &x.scale(2.0));
    }

    #[test]
    fn constant_root_gives_zero_gradients() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::ones(&[2, 2]));
        let c = tape.constant(Tensor::vector(&[3.0, 4.0]));
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &Tensor::zeros(&[2, 2]));
        assert!(g.get(c).is_none());
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(Tensor::ones(&[2]));
        assert!(matches!(tape.backward(p), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn matmul_sum_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[3, 4]);
        let w = random(&mut rng, &[4, 2]);
        let err = check(&[w], |t, v| {
            let a = t.constant(a.clone());
            let p = t.matmul(a, v[0]).unwrap();
            t.sum(p)
        });
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn parameter_gradient_shapes_match_values() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::ones(&[2, 3]));
        let b = tape.param(Tensor::ones(&[3, 5]));
        let m = tape.matmul(a, b).unwrap();
        let s = tape.mean(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().shape(), &[2, 3]);
        assert_eq!(g.get(b).unwrap().shape(), &[3, 5]);
    }

    #[derive(Debug, Clone, Copy)]
    enum Kind {
        MatMulRows,
        MatMulShared,
        MatMulBatched,
        Add,
        Sub,
        Mul,
        AddSuffix,
        MulSuffix,
        Scale,
        Relu,
        Tanh,
        Softmax,
        LayerNorm,
        Concat,
        Reshape,
        Permute,
        Gather,
        Mean,
    }

    const KINDS: [Kind; 18] = [
        Kind::MatMulRows,
        Kind::MatMulShared,
        Kind::MatMulBatched,
        Kind::Add,
        Kind::Sub,
        Kind::Mul,
        Kind::AddSuffix,
        Kind::MulSuffix,
        Kind::Scale,
        Kind::Relu,
        Kind::Tanh,
        Kind::Softmax,
        Kind::LayerNorm,
        Kind::Concat,
        Kind::Reshape,
        Kind::Permute,
        Kind::Gather,
        Kind::Mean,
    ];

    fn op_error(kind: Kind, d: [usize; 3], seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [p, q, r] = d;
        let (inputs, build): (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>) = match kind {
            Kind::MatMulRows => (
                vec![random(&mut rng, &[2, p, q]), random(&mut rng, &[q, r])],
                Box::new(move |t, v| {
                    let m = t.matmul(v[0], v[1]).unwrap();
                    weighted_sum(t, m, seed)
                }),
            ),
            Kind::MatMulShared => (
                vec![random(&mut rng, &[p, q]), random(&mut rng, &[2, q, r])],
                Box::new(move |t, v| {
                    let m = t.matmul(v[0], v[1]).unwrap();
                    weighted_sum(t, m, seed)
                }),
            ),
            Kind::MatMulBatched => (
                vec![random(&mut rng, &[3, p, q]), random(&mut rng, &[3, q, r])],
                Box::new(move |t, v| {
                    let m = t.matmul(v[0], v[1]).unwrap();
                    weighted_sum(t, m, seed)
                }),
            ),
            Kind::Add | Kind::Sub | Kind::Mul => (
                vec![random(&mut rng, &[p, q]), random(&mut rng, &[p, q])],
                Box::new(move |t, v| {
                    let m = match kind {
                        Kind::Add => t.add(v[0], v[1]),
                        Kind::Sub => t.sub(v[0], v[1]),
                        _ => t.mul(v[0], v[1]),
                    }
                    .unwrap();
                    weighted_sum(t, m, seed)
                }),
            ),
            Kind::AddSuffix | Kind::MulSuffix => (
                vec![random(&mut rng, &[r, p, q]), random(&mut rng, &[q])],
                Box::new(move |t, v| {
                    let m = if matches!(kind, Kind::AddSuffix) { t.add_suffix(v[0], v[1]) } else { t.mul_suffix(v[0], v[1]) }
                        .unwrap();
                    weighted_sum(t, m, seed)
                }),
            ),
            Kind::Scale | Kind::Relu | Kind::Tanh | Kind::Softmax | Kind::LayerNorm | Kind::Mean => (
                // layer norm of a nearly constant row has huge third derivatives,
                // which swamps the central-difference oracle; spread the rows
                vec![if matches!(kind, Kind::LayerNorm) {
                    let x = random(&mut rng, &[p, q]);
                    Tensor::from_parts(vec![p, q], x.data().iter().enumerate().map(|(i, v)| v + (i % q) as f64).collect())
                } else {
                    random(&mut rng, &[p, q])
                }],
                Box::new(move |t, v| {
                    let m = match kind {
                        Kind::Scale => t.scale(v[0], -0.75),
                        Kind::Relu => t.relu(v[0]),
                        Kind::Tanh => t.tanh(v[0]),
                        Kind::Softmax => t.softmax_rows(v[0]).unwrap(),
                        Kind::LayerNorm => t.layer_norm(v[0], 1e-5).unwrap(),
                        _ => return t.mean(v[0]),
                    };
                    weighted_sum(t, m, seed)
                }),
            ),
            Kind::Concat => (
                vec![random(&mut rng, &[p, q]), random(&mut rng, &[p, r])],
                Box::new(move |t, v| {
                    let m = t.concat(&[v[0], v[1]], 1).unwrap();
                    weighted_sum(t, m, seed)
                }),
            ),
            Kind::Reshape | Kind::Permute => (
                vec![random(&mut rng, &[p, q, r])],
                Box::new(move |t, v| {
                    let m = if matches!(kind, Kind::Reshape) {
                        t.reshape(v[0], &[p * q, r]).unwrap()
                    } else {
                        t.permute(v[0], &[2, 0, 1]).unwrap()
                    };
                    weighted_sum(t, m, seed)
                }),
            ),
            Kind::Gather => (
                vec![random(&mut rng, &[p, q])],
                Box::new(move |t, v| {
                    let rows: Vec<usize> = (0..r + 2).map(|i| (i * 7 + 3) % p).collect();
                    let m = t.gather_rows(v[0], &rows).unwrap();
                    weighted_sum(t, m, seed)
                }),
            ),
        };
        check(&inputs, build)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn every_op_matches_finite_differences(
            kind in 0usize..KINDS.len(),
            p in 1usize..=6,
            q in 1usize..=6,
            r in 1usize..=6,
            seed in 0u64..1_000_000,
        ) {
            let kind = KINDS[kind];
            let err = op_error(kind, [p, q, r], seed);
            prop_assert!(err <= 1e-4, "{:?} {:?}: {}", kind, [p, q, r], err);
        }
    }

    #[test]
    fn each_op_kind_checked_at_fixed_shapes() {
        for (i, &kind) in KINDS.iter().enumerate() {
            let err = op_error(kind, [3, 4, 2], 100 + i as u64);
            assert!(err <= 1e-4, "{kind:?}: {err}");
        }
    }
}
