//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse and accumulates parameter gradients into the
//! [`ParamStore`] the parameters were read from. Nodes that depend only on
//! constants are never visited during the backward pass.

use super::tensor::gemm;
use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Tape handles for the nine GRU parameters.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

#[derive(Debug)]
struct GruCache {
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Affine { x: Var, w: Var, b: Var },
    MatMul { a: Var, b: Var },
    Gru { x: Var, h: Var, p: GruVars, cache: Box<GruCache> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherCols { x: Var, idx: Vec<usize> },
    Reshape(Var),
    SumRows(Var),
    SumCols(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A fresh tape is built for every forward pass; nothing is retained
/// across training iterations.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Reads the named parameter onto the tape (once per tape).
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let idx = store
            .index_of(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))?;
        Ok(self.param_at(store, idx))
    }

    pub fn param_at(&mut self, store: &ParamStore, idx: usize) -> Var {
        if self.param_vars.len() <= idx {
            self.param_vars.resize(idx + 1, None);
        }
        if let Some(v) = self.param_vars[idx] {
            return v;
        }
        let value = store.by_index(idx).1.value.clone();
        let v = self.push(value, Op::Param(idx), true);
        self.param_vars[idx] = Some(v);
        v
    }

    /// Reads the nine GRU parameters stored under `prefix` (`prefix.W_z`, ...).
    pub fn gru_params(&mut self, store: &ParamStore, prefix: &str) -> Result<GruVars> {
        let mut get = |s: &str| self.param(store, &format!("{prefix}.{s}"));
        Ok(GruVars {
            w_z: get("W_z")?,
            u_z: get("U_z")?,
            b_z: get("b_z")?,
            w_r: get("W_r")?,
            u_r: get("U_r")?,
            b_r: get("b_r")?,
            w_h: get("W_h")?,
            u_h: get("U_h")?,
            b_h: get("b_h")?,
        })
    }

    fn mat_dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn check_affine(&self, op: &'static str, x: Var, w: Var, b: Var) -> Result<(usize, usize, usize)> {
        let (bsz, i) = self.mat_dims(x);
        let (wi, o) = self.mat_dims(w);
        let bl = self.value(b).len();
        if self.value(w).shape().len() != 2 || wi != i || bl != o {
            return Err(Error::dim(
                op,
                format!(
                    "x {:?}, W {:?}, b {:?}",
                    self.value(x).shape(),
                    self.value(w).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok((bsz, i, o))
    }

    /// `y = x·W + b` with `x: [B×I]`, `W: [I×O]`, `b: [O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bsz, i, o) = self.check_affine("affine", x, w, b)?;
        let mut out = vec![0.0; bsz * o];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            gemm(bsz, i, o, xv, i as isize, 1, wv, o as isize, 1, &mut out, false);
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (y, bb) in row.iter_mut().zip(bv) {
                    *y += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::matrix(bsz, o, out), Op::Affine { x, w, b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat_dims(a);
        let (k2, n) = self.mat_dims(b);
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} · {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b }, rg))
    }

    /// One GRU step for a batch of rows.
    ///
    /// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
    /// `ĥ = tanh(xW_h + (r∘h)U_h + b_h)`, `h' = (1−z)∘h + z∘ĥ`.
    pub fn gru(&mut self, x: Var, h: Var, p: GruVars) -> Result<Var> {
        let (bsz, i, hd) = self.check_affine("gru", x, p.w_z, p.b_z)?;
        for (w, u, b) in [(p.w_z, p.u_z, p.b_z), (p.w_r, p.u_r, p.b_r), (p.w_h, p.u_h, p.b_h)] {
            self.check_affine("gru", x, w, b)?;
            self.check_affine("gru", h, u, b)?;
        }
        if self.mat_dims(h) != (bsz, hd) {
            return Err(Error::dim(
                "gru",
                format!("h {:?}, expected [{bsz}, {hd}]", self.value(h).shape()),
            ));
        }
        let n = bsz * hd;
        let xv = self.value(x).data();
        let hv = self.value(h).data();
        let pre = |w: Var, hin: &[f64], u: Var, b: Var| {
            let mut out = vec![0.0; n];
            gemm(bsz, i, hd, xv, i as isize, 1, self.value(w).data(), hd as isize, 1, &mut out, false);
            gemm(bsz, hd, hd, hin, hd as isize, 1, self.value(u).data(), hd as isize, 1, &mut out, true);
            let bv = self.value(b).data();
            for row in out.chunks_mut(hd) {
                for (y, bb) in row.iter_mut().zip(bv) {
                    *y += bb;
                }
            }
            out
        };
        let mut z = pre(p.w_z, hv, p.u_z, p.b_z);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        let mut r = pre(p.w_r, hv, p.u_r, p.b_r);
        r.iter_mut().for_each(|v| *v = sigmoid(*v));
        let rh: Vec<f64> = r.iter().zip(hv).map(|(a, b)| a * b).collect();
        let mut cand = pre(p.w_h, &rh, p.u_h, p.b_h);
        cand.iter_mut().for_each(|v| *v = v.tanh());
        let out: Vec<f64> = (0..n)
            .map(|k| (1.0 - z[k]) * hv[k] + z[k] * cand[k])
            .collect();
        let rg = self.rg(x)
            || self.rg(h)
            || [p.w_z, p.u_z, p.b_z, p.w_r, p.u_r, p.b_r, p.w_h, p.u_h, p.b_h]
                .iter()
                .any(|&v| self.rg(v));
        let cache = Box::new(GruCache { z, r, cand, rh });
        Ok(self.push(Tensor::matrix(bsz, hd, out), Op::Gru { x, h, p, cache }, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::dim(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat_dims(x);
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("{start}+{len} of {r} rows")));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(len, c, data), Op::SliceRows { x, start }, rg))
    }

    /// `out[k] = x[idx[k]]` row-wise.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.mat_dims(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {r}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(idx.len(), c, data), Op::GatherRows { x, idx }, rg))
    }

    /// Places row `k` of `x` at row `idx[k]` of a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, x: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        let (r, c) = self.mat_dims(x);
        if idx.len() != r || idx.iter().any(|&i| i >= rows) {
            return Err(Error::dim("scatter_rows", format!("{r} rows into {rows}")));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; rows * c];
        for (k, &i) in idx.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&src[k * c..(k + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(rows, c, data), Op::ScatterRows { x, idx }, rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = xs.first().map_or(0, |&v| self.mat_dims(v).1);
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let (r, cc) = self.mat_dims(v);
            if cc != c {
                return Err(Error::dim("concat_rows", format!("{cc} vs {c} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(v).data());
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::matrix(rows, c, data), Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = xs.first().map_or(0, |&v| self.mat_dims(v).0);
        let widths: Vec<usize> = xs.iter().map(|&v| self.mat_dims(v).1).collect();
        for &v in xs {
            if self.mat_dims(v).0 != r {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for row in 0..r {
            for &v in xs {
                data.extend_from_slice(self.value(v).row(row));
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::matrix(r, total, data), Op::ConcatCols(xs.to_vec()), rg))
    }

    /// Picks `k = idx.len() / rows` columns per row: `out[r, j] = x[r, idx[r·k + j]]`.
    pub fn gather_cols(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.mat_dims(x);
        if r == 0 || idx.len() % r != 0 || idx.iter().any(|&i| i >= c) {
            return Err(Error::dim(
                "gather_cols",
                format!("{} indices for [{r}×{c}]", idx.len()),
            ));
        }
        let k = idx.len() / r;
        let src = self.value(x).data();
        let data = idx
            .iter()
            .enumerate()
            .map(|(n, &col)| src[(n / k) * c + col])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(r, k, data), Op::GatherCols { x, idx }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `[R×C] → [R×1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.mat_dims(x);
        let src = self.value(x).data();
        let data = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(x);
        self.push(Tensor::matrix(r, 1, data), Op::SumRows(x), rg)
    }

    /// `[R×C] → [1×C]`, accumulating rows in order.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let (r, c) = self.mat_dims(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, s) in data.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *d += s;
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::matrix(1, c, data), Op::SumCols(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Accumulates `∂loss/∂θ` into every parameter read onto this tape.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, g, &mut grads, store);
        }

        if let Some(name) = store.first_non_finite_grad() {
            return Err(Error::NonFiniteGradient {
                param: name.to_string(),
            });
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
    }

    /// `g·Wᵀ` for `g: [B×O]`, `W: [I×O]`.
    fn grad_input(g: &[f64], w: &[f64], b: usize, i: usize, o: usize, out: &mut [f64], acc: bool) {
        gemm(b, o, i, g, o as isize, 1, w, 1, o as isize, out, acc);
    }

    /// `xᵀ·g` for `x: [B×I]`, `g: [B×O]`.
    fn grad_weight(x: &[f64], g: &[f64], b: usize, i: usize, o: usize) -> Vec<f64> {
        let mut out = vec![0.0; i * o];
        gemm(i, b, o, x, 1, i as isize, g, o as isize, 1, &mut out, false);
        out
    }

    fn col_sums(g: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; cols];
        for row in g.chunks(cols) {
            for (d, s) in out.iter_mut().zip(row) {
                *d += s;
            }
        }
        out
    }

    fn backward_node(&self, id: usize, g: Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(idx) => store.by_index_mut(*idx).grad.add_assign(&g),
            Op::Affine { x, w, b } => {
                let (bsz, i) = self.mat_dims(*x);
                let o = self.mat_dims(*w).1;
                if self.rg(*x) {
                    let mut dx = vec![0.0; bsz * i];
                    Self::grad_input(gd, self.value(*w).data(), bsz, i, o, &mut dx, false);
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                if self.rg(*w) {
                    let dw = Self::grad_weight(self.value(*x).data(), gd, bsz, i, o);
                    self.accumulate(grads, *w, self.like(*w, dw));
                }
                if self.rg(*b) {
                    let db = Self::col_sums(gd, o);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = self.mat_dims(*a);
                let n = self.mat_dims(*b).1;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    Self::grad_input(gd, self.value(*b).data(), m, k, n, &mut da, false);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let db = Self::grad_weight(self.value(*a).data(), gd, m, k, n);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Gru { x, h, p, cache } => self.backward_gru(*x, *h, p, cache, gd, grads),
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = node.value.data().iter().zip(gd).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Tanh(x) => {
                let d = node.value.data().iter().zip(gd).map(|(&t, &g)| g * (1.0 - t * t)).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let neg = gd.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, self.like(*b, neg));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = self.value(*b).data().iter().zip(gd).map(|(y, g)| y * g).collect();
                    self.accumulate(grads, *a, self.like(*a, d));
                }
                if self.rg(*b) {
                    let d = self.value(*a).data().iter().zip(gd).map(|(x, g)| x * g).collect();
                    self.accumulate(grads, *b, self.like(*b, d));
                }
            }
            Op::Scale(x, c) => {
                let d = gd.iter().map(|g| g * c).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Square(x) => {
                let d = self.value(*x).data().iter().zip(gd).map(|(v, g)| 2.0 * v * g).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::SliceRows { x, start } => {
                let (r, c) = self.mat_dims(*x);
                let mut d = vec![0.0; r * c];
                d[start * c..start * c + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = self.mat_dims(*x);
                let mut d = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for (dst, src) in d[i * c..(i + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *dst += src;
                    }
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::ScatterRows { x, idx } => {
                let c = self.mat_dims(*x).1;
                let mut d = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    d.extend_from_slice(&gd[i * c..(i + 1) * c]);
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    if self.rg(v) {
                        self.accumulate(grads, v, self.like(v, gd[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut off = 0;
                for &v in xs {
                    let (r, c) = self.mat_dims(v);
                    if self.rg(v) {
                        let mut d = Vec::with_capacity(r * c);
                        for row in 0..r {
                            d.extend_from_slice(&gd[row * total + off..row * total + off + c]);
                        }
                        self.accumulate(grads, v, self.like(v, d));
                    }
                    off += c;
                }
            }
            Op::GatherCols { x, idx } => {
                let (r, c) = self.mat_dims(*x);
                let k = idx.len() / r;
                let mut d = vec![0.0; r * c];
                for (n, &col) in idx.iter().enumerate() {
                    d[(n / k) * c + col] += gd[n];
                }
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
            }
            Op::SumRows(x) => {
                let (r, c) = self.mat_dims(*x);
                let d = (0..r * c).map(|n| gd[n / c]).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::SumCols(x) => {
                let (r, c) = self.mat_dims(*x);
                let d = (0..r * c).map(|n| gd[n % c]).collect();
                self.accumulate(grads, *x, self.like(*x, d));
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
        }
    }

    fn backward_gru(&self, x: Var, h: Var, p: &GruVars, cache: &GruCache, g: &[f64], grads: &mut [Option<Tensor>]) {
        let (bsz, i) = self.mat_dims(x);
        let hd = self.mat_dims(h).1;
        let n = bsz * hd;
        let hv = self.value(h).data();
        let xv = self.value(x).data();
        let GruCache { z, r, cand, rh } = cache;

        let mut dh = vec![0.0; n];
        let mut daz = vec![0.0; n];
        let mut dac = vec![0.0; n];
        for k in 0..n {
            dh[k] = g[k] * (1.0 - z[k]);
            let dz = g[k] * (cand[k] - hv[k]);
            daz[k] = dz * z[k] * (1.0 - z[k]);
            let dc = g[k] * z[k];
            dac[k] = dc * (1.0 - cand[k] * cand[k]);
        }
        let mut drh = vec![0.0; n];
        Self::grad_input(&dac, self.value(p.u_h).data(), bsz, hd, hd, &mut drh, false);
        let mut dar = vec![0.0; n];
        for k in 0..n {
            dh[k] += drh[k] * r[k];
            let dr = drh[k] * hv[k];
            dar[k] = dr * r[k] * (1.0 - r[k]);
        }

        if self.rg(x) {
            let mut dx = vec![0.0; bsz * i];
            Self::grad_input(&daz, self.value(p.w_z).data(), bsz, i, hd, &mut dx, false);
            Self::grad_input(&dar, self.value(p.w_r).data(), bsz, i, hd, &mut dx, true);
            Self::grad_input(&dac, self.value(p.w_h).data(), bsz, i, hd, &mut dx, true);
            self.accumulate(grads, x, self.like(x, dx));
        }
        if self.rg(h) {
            Self::grad_input(&daz, self.value(p.u_z).data(), bsz, hd, hd, &mut dh, true);
            Self::grad_input(&dar, self.value(p.u_r).data(), bsz, hd, hd, &mut dh, true);
            self.accumulate(grads, h, self.like(h, dh));
        }
        for (w, u, b, d, hin) in [
            (p.w_z, p.u_z, p.b_z, &daz, hv),
            (p.w_r, p.u_r, p.b_r, &dar, hv),
            (p.w_h, p.u_h, p.b_h, &dac, rh.as_slice()),
        ] {
            if self.rg(w) {
                let dw = Self::grad_weight(xv, d, bsz, i, hd);
                self.accumulate(grads, w, self.like(w, dw));
            }
            if self.rg(u) {
                let du = Self::grad_weight(hin, d, bsz, hd, hd);
                self.accumulate(grads, u, self.like(u, du));
            }
            if self.rg(b) {
                self.accumulate(grads, b, self.like(b, Self::col_sums(d, hd)));
            }
        }
    }
}
