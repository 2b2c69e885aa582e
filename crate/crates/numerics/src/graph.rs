//! Taped reverse-mode differentiation over matrices.
//!
//! A [`Graph`] records every operation applied to its variables. Calling
//! [`Graph::backward`] on a scalar result walks the tape in reverse and
//! accumulates `∂loss/∂p` into the [`ParamStore`] entry of every parameter
//! that was read with [`Graph::param`]. Inputs created with
//! [`Graph::input`] are constants: no gradient is propagated into them.
//!
//! The op set is exactly what the models in this workspace need; it is not
//! a general autodiff engine.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{NumericsError, Result};
use crate::params::ParamStore;
use crate::tensor::{gemm, GemmOperand, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node of a particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    idx: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(String),
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Exp(usize),
    Atan(usize),
    Square(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    GatherCols(usize, Vec<usize>),
    SumAll(usize),
    SumCols(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(NumericsError::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.idx >= self.nodes.len() {
            return Err(NumericsError::ForeignVariable);
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    /// Constant input (no gradient flows into it).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Read parameter `name` from `store`; its gradient is accumulated on backward.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), ng))
    }

    /// `a[n×d] + bias[1×d]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(bias)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        require_matrix("add_bias", av)?;
        if bv.shape() != [1, av.cols()] {
            return Err(shape_err("add_bias", av, bv));
        }
        let d = av.cols();
        let mut out = av.clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::AddBias(ia, ib), ng))
    }

    fn zip_with(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, op(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f);
        let ng = self.ng(ia);
        Ok(self.push(out, op(ia), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| k * x, |i| Op::Scale(i, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary(a, |x| x + k, Op::AddScalar)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn atan(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::atan, Op::Atan)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square)
    }

    /// `[a | b]` for matrices with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        require_matrix("concat_cols", av)?;
        require_matrix("concat_cols", bv)?;
        if av.rows() != bv.rows() {
            return Err(shape_err("concat_cols", av, bv));
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::matrix(n, ca + cb, data)?;
        let ng = self.ng(ia) || self.ng(ib);
        Ok(self.push(out, Op::ConcatCols(ia, ib), ng))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        require_matrix("slice_cols", av)?;
        if start > end || end > av.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "slice_cols",
                left: av.shape().to_vec(),
                right: vec![start, end],
            });
        }
        let n = av.rows();
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&av.row(r)[start..end]);
        }
        let out = Tensor::matrix(n, end - start, data)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::SliceCols(ia, start), ng))
    }

    /// Output column `j` is input column `indices[j]`.
    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        require_matrix("gather_cols", av)?;
        if indices.iter().any(|&j| j >= av.cols()) {
            return Err(NumericsError::ShapeMismatch {
                op: "gather_cols",
                left: av.shape().to_vec(),
                right: indices.to_vec(),
            });
        }
        let n = av.rows();
        let mut data = Vec::with_capacity(n * indices.len());
        for r in 0..n {
            let row = av.row(r);
            data.extend(indices.iter().map(|&j| row[j]));
        }
        let out = Tensor::matrix(n, indices.len(), data)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::GatherCols(ia, indices.to_vec()), ng))
    }

    /// Sum of every element, as a `[1×1]` scalar.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        let ng = self.ng(ia);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(ia), ng))
    }

    /// Per-row sum: `[n×d] → [n×1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        require_matrix("sum_cols", av)?;
        let n = av.rows();
        let data = (0..n).map(|r| av.row(r).iter().sum()).collect();
        let out = Tensor::matrix(n, 1, data)?;
        let ng = self.ng(ia);
        Ok(self.push(out, Op::SumCols(ia), ng))
    }

    /// Mean of every element, as a `[1×1]` scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let av = &self.nodes[ia].value;
        let m = av.data().iter().sum::<f64>() / av.len().max(1) as f64;
        let ng = self.ng(ia);
        Ok(self.push(Tensor::scalar(m), Op::Mean(ia), ng))
    }

    /// Scalar value of a `[1×1]` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value(v)?;
        if t.len() != 1 {
            return Err(NumericsError::NonScalarLoss(t.shape().to_vec()));
        }
        Ok(t.data()[0])
    }

    /// Back-propagate from scalar `loss`, accumulating into `store` gradients.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let li = self.check(loss)?;
        let lv = &self.nodes[li].value;
        if lv.len() != 1 {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.data()[0].is_finite() {
            return Err(NumericsError::NonFiniteLoss(lv.data()[0]));
        }
        // Resolve parameter targets before touching any gradient.
        let mut targets = Vec::new();
        for (i, node) in self.nodes[..=li].iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let pi = store.index_of(name)?;
                if store.by_index(pi).value.shape() != node.value.shape() {
                    return Err(shape_err("backward", &store.by_index(pi).value, &node.value));
                }
                targets.push((i, pi));
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(_) => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.ng(*a) {
                        let ga = acc(&mut grads, *a, av.shape());
                        // dA += dC · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            1.0,
                            GemmOperand::normal(g.data(), n),
                            GemmOperand::transposed(bv.data(), n),
                            1.0,
                            ga.data_mut(),
                        );
                    }
                    if self.ng(*b) {
                        let gb = acc(&mut grads, *b, bv.shape());
                        // dB += Aᵀ · dC
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            GemmOperand::transposed(av.data(), k),
                            GemmOperand::normal(g.data(), n),
                            1.0,
                            gb.data_mut(),
                        );
                    }
                }
                Op::AddBias(a, b) => {
                    if self.ng(*b) {
                        let d = self.nodes[*b].value.len();
                        let gb = acc(&mut grads, *b, self.nodes[*b].value.shape());
                        for row in g.data().chunks(d.max(1)) {
                            for (o, v) in gb.data_mut().iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                    if self.ng(*a) {
                        add_into(acc(&mut grads, *a, g.shape()), &g, 1.0);
                    }
                }
                Op::Add(a, b) => {
                    for &p in [a, b] {
                        if self.ng(p) {
                            add_into(acc(&mut grads, p, g.shape()), &g, 1.0);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        add_into(acc(&mut grads, *a, g.shape()), &g, 1.0);
                    }
                    if self.ng(*b) {
                        add_into(acc(&mut grads, *b, g.shape()), &g, -1.0);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.ng(*a) {
                        let ga = acc(&mut grads, *a, g.shape());
                        for ((o, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                            *o += gi * bi;
                        }
                    }
                    if self.ng(*b) {
                        let gb = acc(&mut grads, *b, g.shape());
                        for ((o, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                            *o += gi * ai;
                        }
                    }
                }
                Op::Scale(a, k) => add_into(acc(&mut grads, *a, g.shape()), &g, *k),
                Op::AddScalar(a) => add_into(acc(&mut grads, *a, g.shape()), &g, 1.0),
                Op::Relu(a) => {
                    let out = &self.nodes[i].value;
                    let ga = acc(&mut grads, *a, g.shape());
                    for ((o, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if *y > 0.0 {
                            *o += gi;
                        }
                    }
                }
                Op::Exp(a) => {
                    let out = &self.nodes[i].value;
                    let ga = acc(&mut grads, *a, g.shape());
                    for ((o, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        *o += gi * y;
                    }
                }
                Op::Atan(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = acc(&mut grads, *a, g.shape());
                    for ((o, gi), xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += gi / (1.0 + xi * xi);
                    }
                }
                Op::Square(a) => {
                    let x = &self.nodes[*a].value;
                    let ga = acc(&mut grads, *a, g.shape());
                    for ((o, gi), xi) in ga.data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *o += 2.0 * gi * xi;
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    let cb = self.nodes[*b].value.cols();
                    let w = ca + cb;
                    if self.ng(*a) {
                        let ga = acc(&mut grads, *a, self.nodes[*a].value.shape());
                        for (dst, src) in ga.data_mut().chunks_mut(ca.max(1)).zip(g.data().chunks(w)) {
                            for (o, v) in dst.iter_mut().zip(&src[..ca]) {
                                *o += v;
                            }
                        }
                    }
                    if self.ng(*b) {
                        let gb = acc(&mut grads, *b, self.nodes[*b].value.shape());
                        for (dst, src) in gb.data_mut().chunks_mut(cb.max(1)).zip(g.data().chunks(w)) {
                            for (o, v) in dst.iter_mut().zip(&src[ca..]) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let wa = self.nodes[*a].value.cols();
                    let w = g.cols();
                    let ga = acc(&mut grads, *a, self.nodes[*a].value.shape());
                    for (dst, src) in ga.data_mut().chunks_mut(wa.max(1)).zip(g.data().chunks(w.max(1))) {
                        for (o, v) in dst[*start..*start + w].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                Op::GatherCols(a, idx) => {
                    let wa = self.nodes[*a].value.cols();
                    let ga = acc(&mut grads, *a, self.nodes[*a].value.shape());
                    for (dst, src) in ga.data_mut().chunks_mut(wa.max(1)).zip(g.data().chunks(idx.len().max(1))) {
                        for (&j, v) in idx.iter().zip(src) {
                            dst[j] += v;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let s = g.data()[0];
                    let ga = acc(&mut grads, *a, self.nodes[*a].value.shape());
                    ga.data_mut().iter_mut().for_each(|o| *o += s);
                }
                Op::SumCols(a) => {
                    let wa = self.nodes[*a].value.cols();
                    let ga = acc(&mut grads, *a, self.nodes[*a].value.shape());
                    for (row, gi) in ga.data_mut().chunks_mut(wa.max(1)).zip(g.data()) {
                        row.iter_mut().for_each(|o| *o += gi);
                    }
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len().max(1) as f64;
                    let s = g.data()[0] / n;
                    let ga = acc(&mut grads, *a, self.nodes[*a].value.shape());
                    ga.data_mut().iter_mut().for_each(|o| *o += s);
                }
            }
        }

        for (node, pi) in targets {
            if let Some(g) = &grads[node] {
                add_into(&mut store.by_index_mut(pi).grad, g, 1.0);
            }
        }
        Ok(())
    }
}

fn acc<'a>(grads: &'a mut [Option<Tensor>], i: usize, shape: &[usize]) -> &'a mut Tensor {
    grads[i].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into(dst: &mut Tensor, src: &Tensor, k: f64) {
    for (o, v) in dst.data_mut().iter_mut().zip(src.data()) {
        *o += k * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn square_gradient() {
        let mut store = store_with("x", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let y = g.square(x).unwrap();
        g.backward(y, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn dead_relu_has_zero_gradient() {
        let mut store = store_with("x", Tensor::scalar(-1.0));
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let y = g.relu(x).unwrap();
        let l = g.sum_all(y).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        // l = x·x (two reads of the same parameter) → dl/dx = 2x
        let mut store = store_with("x", Tensor::scalar(1.5));
        let mut g = Graph::new();
        let a = g.param(&store, "x").unwrap();
        let b = g.param(&store, "x").unwrap();
        let l = g.mul(a, b).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[3.0]);
    }

    #[test]
    fn non_finite_loss_rejected() {
        let mut store = store_with("x", Tensor::scalar(1000.0));
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let y = g.exp(x).unwrap();
        assert!(matches!(
            g.backward(y, &mut store),
            Err(NumericsError::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn foreign_variable_rejected() {
        let mut store = store_with("x", Tensor::scalar(1.0));
        let mut g1 = Graph::new();
        let g2 = Graph::new();
        let x = g1.param(&store, "x").unwrap();
        assert!(matches!(
            g2.backward(x, &mut store),
            Err(NumericsError::ForeignVariable)
        ));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut store = store_with("x", Tensor::zeros(&[2, 2]));
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        assert!(g.backward(x, &mut store).is_err());
    }

    #[test]
    fn concat_slice_gather_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let b = g.input(Tensor::matrix(2, 1, vec![5., 6.]).unwrap());
        let c = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(c).unwrap().data(), &[1., 2., 5., 3., 4., 6.]);
        let s = g.slice_cols(c, 1, 3).unwrap();
        assert_eq!(g.value(s).unwrap().data(), &[2., 5., 4., 6.]);
        let p = g.gather_cols(c, &[2, 0, 1]).unwrap();
        assert_eq!(g.value(p).unwrap().data(), &[5., 1., 2., 6., 3., 4.]);
        assert!(g.slice_cols(c, 2, 4).is_err());
        let bad = g.input(Tensor::zeros(&[3, 1]));
        assert!(g.concat_cols(a, bad).is_err());
    }
}
