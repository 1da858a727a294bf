//! Reverse-mode differentiation over `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! borrowed from a [`ParamSet`] and bound lazily, so a graph costs nothing for
//! weights it never touches. [`Graph::backward`] walks the tape once from a
//! scalar (1×1) root and returns gradients aligned with the parameter set.

use ndarray::{s, Array1, Array2, Axis, Zip};

use crate::error::NnError;
use crate::params::{Grads, ParamId, ParamSet};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value {
    Owned(Array2<f64>),
    Param(usize),
}

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNt(Var, Var),
    Add(Var, Var),
    /// matrix plus a 1×n row broadcast over rows
    AddRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Array2<f64>),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Unfold(Var, usize),
    WeightedSum(Var, Array2<f64>),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(id) => self.params.get(ParamId(*id)),
        }
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.dim(), (1, 1));
        a[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, a: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(a),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id.0),
            op: Op::Param(id.0),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(self.value(b));
        self.push(y, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a).dot(&self.value(b).t());
        self.push(y, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b), &[a, b])
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1×n row");
        let y = self.value(a) + self.value(row);
        self.push(y, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a) * c;
        self.push(y, Op::Scale(a, c), &[a])
    }

    /// Element-wise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, m: Array2<f64>) -> Var {
        let y = self.value(a) * &m;
        self.push(y, Op::MulConst(a, m), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| x.max(0.0));
        self.push(y, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::tanh);
        self.push(y, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(sigmoid);
        self.push(y, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(f64::exp);
        self.push(y, Op::Exp(a), &[a])
    }

    /// ln(1 + eˣ)
    pub fn softplus(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(softplus);
        self.push(y, Op::Softplus(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).mapv(|x| x * x);
        self.push(y, Op::Square(a), &[a])
    }

    /// Row-wise softmax. `allowed[[r, c]] == false` forces probability 0.
    pub fn softmax_rows(&mut self, a: Var, allowed: Option<&Array2<bool>>) -> Result<Var, NnError> {
        let y = softmax_rows(self.value(a), allowed)?;
        Ok(self.push(y, Op::Softmax(a), &[a]))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut y = self.value(a).clone();
        for mut row in y.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push(y, Op::LogSoftmax(a), &[a])
    }

    /// Per-row normalisation with learned 1×n gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mean = xv.sum_axis(Axis(1)) / n;
        let centered = xv - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + LAYER_NORM_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * self.value(gamma) + self.value(beta);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(y, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let y = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(y, Op::SliceCols(a, start), &[a])
    }

    /// Rows `idx` of `table`, in order (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let t = self.value(table);
        let mut y = Array2::zeros((idx.len(), t.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            y.row_mut(r).assign(&t.row(i));
        }
        self.push(y, Op::GatherRows(table, idx.to_vec()), &[table])
    }

    /// Zero-padded windows of `k` (odd) consecutive rows, laid side by side:
    /// row t of the result is `[x[t-k/2], …, x[t+k/2]]`.
    pub fn unfold(&mut self, a: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "unfold window must be odd");
        let x = self.value(a);
        let (l, c) = x.dim();
        let half = (k / 2) as isize;
        let mut y = Array2::zeros((l, k * c));
        for t in 0..l as isize {
            for j in 0..k as isize {
                let src = t + j - half;
                if src >= 0 && src < l as isize {
                    let jj = j as usize;
                    y.slice_mut(s![t as usize, jj * c..(jj + 1) * c])
                        .assign(&x.row(src as usize));
                }
            }
        }
        self.push(y, Op::Unfold(a, k), &[a])
    }

    /// Σ w ⊙ a as a 1×1 node.
    pub fn weighted_sum(&mut self, a: Var, w: Array2<f64>) -> Var {
        let y = (self.value(a) * &w).sum();
        self.push(Array2::from_elem((1, 1), y), Op::WeightedSum(a, w), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let w = Array2::ones(self.value(a).dim());
        self.weighted_sum(a, w)
    }

    /// Gradients of the 1×1 node `root` with respect to every bound parameter.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.value(root).dim(),
            (1, 1),
            "backward needs a scalar root"
        );
        let mut out = Grads::zeros_like(self.params);
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let y = self.value(Var(i));
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.add_to(ParamId(*id), &g),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(self.value(*b));
                        acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.t().dot(self.value(*a));
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    if self.needs(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *row, gr);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::MulConst(a, m) => acc(&mut grads, *a, g * m),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = Zip::from(&g).and(y).map_collect(|&g, &y| g * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = Zip::from(&g).and(y).map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * y),
                Op::Softplus(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let ga = Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| 2.0 * g * x);
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(g - &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let gs = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = g - &(y.mapv(f64::exp) * &gs);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.needs(*gamma) {
                        let gg = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gamma, gg);
                    }
                    if self.needs(*beta) {
                        let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *beta, gb);
                    }
                    if self.needs(*x) {
                        let n = xhat.ncols() as f64;
                        let gxhat = &g * self.value(*gamma);
                        let s1 = gxhat.sum_axis(Axis(1)).insert_axis(Axis(1));
                        let s2 = (&gxhat * xhat).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let inner = gxhat * n - &s1 - &(xhat * &s2);
                        let gx = inner * &(inv_std / n).insert_axis(Axis(1));
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if self.needs(*p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(table, idx) => {
                    let mut gt = Array2::zeros(self.value(*table).dim());
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = gt.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Unfold(a, k) => {
                    let (l, c) = self.value(*a).dim();
                    let half = (*k / 2) as isize;
                    let mut ga = Array2::zeros((l, c));
                    for t in 0..l as isize {
                        for j in 0..*k as isize {
                            let src = t + j - half;
                            if src >= 0 && src < l as isize {
                                let jj = j as usize;
                                let mut row = ga.row_mut(src as usize);
                                row += &g.slice(s![t as usize, jj * c..(jj + 1) * c]);
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::WeightedSum(a, w) => acc(&mut grads, *a, w * g[[0, 0]]),
            }
        }
        out
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Row-wise softmax over allowed entries; masked entries are exactly 0.
pub fn softmax_rows(
    a: &Array2<f64>,
    allowed: Option<&Array2<bool>>,
) -> Result<Array2<f64>, NnError> {
    if let Some(m) = allowed {
        if m.dim() != a.dim() {
            return Err(NnError::Shape(format!(
                "mask {:?} vs scores {:?}",
                m.dim(),
                a.dim()
            )));
        }
    }
    let mut y = a.clone();
    for (r, mut row) in y.rows_mut().into_iter().enumerate() {
        let ok = |c: usize| allowed.is_none_or(|m| m[[r, c]]);
        let mx = (0..row.len())
            .filter(|&c| ok(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return Err(NnError::FullyMasked { row: r });
        }
        let mut total = 0.0;
        for c in 0..row.len() {
            row[c] = if ok(c) { (row[c] - mx).exp() } else { 0.0 };
            total += row[c];
        }
        row.mapv_inplace(|v| v / total);
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_and_sum_gradients() {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = ps.insert("b", array![[5.0], [6.0]]).unwrap();
        let mut g = Graph::new(&ps);
        let (va, vb) = (g.param(a), g.param(b));
        let y = g.matmul(va, vb);
        let s = g.sum(y);
        assert_eq!(g.scalar(s), 17.0 + 39.0);
        let gr = g.backward(s);
        assert_eq!(gr.get(a), &array![[5.0, 6.0], [5.0, 6.0]]);
        assert_eq!(gr.get(b), &array![[4.0], [6.0]]);
    }

    #[test]
    fn binding_a_parameter_twice_reuses_the_node() {
        let mut ps = ParamSet::new();
        let a = ps.insert("a", array![[3.0]]).unwrap();
        let mut g = Graph::new(&ps);
        let x = g.param(a);
        let y = g.param(a);
        assert_eq!(x, y);
        let p = g.matmul(x, y);
        let s = g.sum(p);
        assert_eq!(g.backward(s).get(a)[[0, 0]], 6.0);
    }

    #[test]
    fn masked_softmax() {
        let a = array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]];
        let m = array![[true, false, true], [true, true, true]];
        let y = softmax_rows(&a, Some(&m)).unwrap();
        assert_eq!(y[[0, 1]], 0.0);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((y[[1, 0]] - 1.0 / 3.0).abs() < 1e-12);
        let none = array![[false, false, false], [true, true, true]];
        assert!(matches!(
            softmax_rows(&a, Some(&none)),
            Err(NnError::FullyMasked { row: 0 })
        ));
    }

    #[test]
    fn unfold_pads_with_zeros() {
        let ps = ParamSet::new();
        let mut g = Graph::new(&ps);
        let x = g.constant(array![[1.0], [2.0], [3.0]]);
        let u = g.unfold(x, 3);
        assert_eq!(
            g.value(u),
            &array![[0.0, 1.0, 2.0], [1.0, 2.0, 3.0], [2.0, 3.0, 0.0]]
        );
    }

    #[test]
    fn stable_pointwise_helpers() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
    }
}
