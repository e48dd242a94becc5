//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Backbone
//! parameters enter as [`Tape::param`] nodes that borrow the [`ParamStore`]
//! (no copy); anything else trainable (prefix vectors, classifier heads)
//! enters as [`Tape::leaf`]. [`Tape::backward`] returns gradients for both.

use ndarray::{concatenate, s, Array2, Axis};

use super::params::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Constant,
    MatMul(Var, Var),
    MatMulTransB(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        rstd: Vec<f64>,
    },
    SoftmaxRows(Var),
    Columns(Var, usize),
    ConcatColumns(Vec<Var>),
    Rows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GatherColumns(Var, Vec<usize>),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    frozen: bool,
}

/// Gradients from one backward pass. Parameter gradients are indexed by
/// [`ParamId`]; absent entries had no path to the output or are frozen.
pub struct Gradients {
    pub params: Vec<Option<Matrix>>,
    leaves: Vec<(usize, Matrix)>,
}

impl Gradients {
    pub fn leaf(&self, v: Var) -> Option<&Matrix> {
        self.leaves.iter().find(|(i, _)| *i == v.0).map(|(_, g)| g)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            frozen: false,
        }
    }

    /// A tape on which every parameter is treated as frozen, whatever the
    /// store says.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            frozen: true,
            ..Self::new(store)
        }
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let requires_grad = !self.frozen && self.store.is_trainable(id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulTransB(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add needs equal shapes; use add_row to broadcast");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn add_const(&mut self, a: Var, c: &Matrix) -> Var {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    /// Row-wise layer normalisation with a `1 × n` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut rstd = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * r);
            rstd.push(r);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let rg = self.rg(a);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn columns(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Columns(a, start), rg)
    }

    pub fn concat_columns(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts agree");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatColumns(parts.to_vec()), rg)
    }

    pub fn rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let v = self.value(a).slice(s![start..start + count, ..]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Rows(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts agree");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(id));
        }
        let rg = self.rg(table);
        self.push(v, Op::GatherRows(table, ids.to_vec()), rg)
    }

    pub fn gather_columns(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Matrix::zeros((t.nrows(), ids.len()));
        for (c, &id) in ids.iter().enumerate() {
            v.column_mut(c).assign(&t.column(id));
        }
        let rg = self.rg(table);
        self.push(v, Op::GatherColumns(table, ids.to_vec()), rg)
    }

    /// Backpropagates from a `1 × 1` output, seeding its gradient with 1.
    pub fn backward(self, output: Var) -> Gradients {
        let out = self.value(output);
        assert_eq!(out.dim(), (1, 1), "backward needs a scalar output");
        self.backward_with(output, Matrix::from_elem((1, 1), 1.0))
    }

    pub fn backward_with(self, output: Var, seed: Matrix) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Matrix>> = (0..self.store.len()).map(|_| None).collect();
        let mut leaves = Vec::new();
        grads[output.0] = Some(seed);

        fn acc(grads: &mut [Option<Matrix>], nodes: &[Node], v: Var, delta: Matrix) {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(g) => *g += &delta,
                slot @ None => *slot = Some(delta),
            }
        }

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            match &nodes[i].op {
                Op::Leaf => leaves.push((i, g)),
                Op::Param(id) => match &mut param_grads[id.index()] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                },
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        let d = g.dot(&self.value(*b).t());
                        acc(&mut grads, nodes, *a, d);
                    }
                    if nodes[b.0].requires_grad {
                        let d = self.value(*a).t().dot(&g);
                        acc(&mut grads, nodes, *b, d);
                    }
                }
                Op::MatMulTransB(a, b) => {
                    if nodes[a.0].requires_grad {
                        let d = g.dot(self.value(*b));
                        acc(&mut grads, nodes, *a, d);
                    }
                    if nodes[b.0].requires_grad {
                        let d = g.t().dot(self.value(*a));
                        acc(&mut grads, nodes, *b, d);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, nodes, *b, g.clone());
                    acc(&mut grads, nodes, *a, g);
                }
                Op::AddRow(a, row) => {
                    if nodes[row.0].requires_grad {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, nodes, *row, d);
                    }
                    acc(&mut grads, nodes, *a, g);
                }
                Op::AddConst(a) => acc(&mut grads, nodes, *a, g),
                Op::Scale(a, c) => acc(&mut grads, nodes, *a, g * *c),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let mut d = g;
                    d.zip_mut_with(x, |gv, &xv| *gv *= gelu_grad(xv));
                    acc(&mut grads, nodes, *a, d);
                }
                Op::Tanh(a) => {
                    let y = nodes[i].value.as_ref().expect("tanh value");
                    let mut d = g;
                    d.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                    acc(&mut grads, nodes, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    if nodes[gamma.0].requires_grad {
                        let d = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, nodes, *gamma, d);
                    }
                    if nodes[beta.0].requires_grad {
                        let d = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, nodes, *beta, d);
                    }
                    if nodes[x.0].requires_grad {
                        let gxhat = &g * self.value(*gamma);
                        let n = gxhat.ncols() as f64;
                        let mut dx = Matrix::zeros(gxhat.dim());
                        for r in 0..gxhat.nrows() {
                            let gr = gxhat.row(r);
                            let xr = xhat.row(r);
                            let mean_g = gr.sum() / n;
                            let mean_gx = gr.dot(&xr) / n;
                            for c in 0..gxhat.ncols() {
                                dx[(r, c)] = rstd[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                            }
                        }
                        acc(&mut grads, nodes, *x, dx);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = nodes[i].value.as_ref().expect("softmax value");
                    let mut d = &g * y;
                    for r in 0..d.nrows() {
                        let dot = d.row(r).sum();
                        for c in 0..d.ncols() {
                            d[(r, c)] -= y[(r, c)] * dot;
                        }
                    }
                    acc(&mut grads, nodes, *a, d);
                }
                Op::Columns(a, start) => {
                    if nodes[a.0].requires_grad {
                        let mut d = Matrix::zeros(self.value(*a).dim());
                        d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                        acc(&mut grads, nodes, *a, d);
                    }
                }
                Op::ConcatColumns(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if nodes[p.0].requires_grad {
                            acc(&mut grads, nodes, *p, g.slice(s![.., c..c + w]).to_owned());
                        }
                        c += w;
                    }
                }
                Op::Rows(a, start) => {
                    if nodes[a.0].requires_grad {
                        let mut d = Matrix::zeros(self.value(*a).dim());
                        d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                        acc(&mut grads, nodes, *a, d);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        if nodes[p.0].requires_grad {
                            acc(&mut grads, nodes, *p, g.slice(s![r..r + h, ..]).to_owned());
                        }
                        r += h;
                    }
                }
                Op::GatherRows(table, ids) => {
                    let mut d = Matrix::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = d.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, nodes, *table, d);
                }
                Op::GatherColumns(table, ids) => {
                    let mut d = Matrix::zeros(self.value(*table).dim());
                    for (c, &id) in ids.iter().enumerate() {
                        let mut col = d.column_mut(id);
                        col += &g.column(c);
                    }
                    acc(&mut grads, nodes, *table, d);
                }
            }
        }
        leaves.reverse();
        Gradients {
            params: param_grads,
            leaves,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(out ⊙ w))/d(leaf) against central differences for a
    /// graph built by `f`.
    fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let store = ParamStore::default();
        let weights = {
            let mut t = Tape::new(&store);
            let vs: Vec<_> = inputs.iter().map(|m| t.leaf(m.clone(), false)).collect();
            let out = f(&mut t, &vs);
            let d = t.value(out).dim();
            random(d.0, d.1, 99)
        };
        let eval = |ins: &[Matrix]| -> f64 {
            let mut t = Tape::new(&store);
            let vs: Vec<_> = ins.iter().map(|m| t.leaf(m.clone(), false)).collect();
            let out = f(&mut t, &vs);
            (t.value(out) * &weights).sum()
        };
        let mut t = Tape::new(&store);
        let vs: Vec<_> = inputs.iter().map(|m| t.leaf(m.clone(), true)).collect();
        let out = f(&mut t, &vs);
        let grads = t.backward_with(out, weights.clone());
        for (k, v) in vs.iter().enumerate() {
            let analytic = grads.leaf(*v).cloned().unwrap_or_else(|| Matrix::zeros(inputs[k].dim()));
            for idx in 0..inputs[k].len() {
                let (r, c) = (idx / inputs[k].ncols(), idx % inputs[k].ncols());
                let h = 1e-6;
                let mut plus = inputs.clone();
                plus[k][(r, c)] += h;
                let mut minus = inputs.clone();
                minus[k][(r, c)] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[(r, c)];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "input {k} [{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_grads() {
        check(vec![random(3, 4, 1), random(4, 2, 2)], |t, v| t.matmul(v[0], v[1]));
        check(vec![random(3, 4, 1), random(5, 4, 2)], |t, v| t.matmul_t(v[0], v[1]));
    }

    #[test]
    fn elementwise_grads() {
        check(vec![random(3, 4, 3)], |t, v| t.gelu(v[0]));
        check(vec![random(3, 4, 3)], |t, v| t.tanh(v[0]));
        check(vec![random(3, 4, 3)], |t, v| t.softmax_rows(v[0]));
        check(vec![random(3, 4, 3), random(1, 4, 4)], |t, v| t.add_row(v[0], v[1]));
        check(vec![random(3, 4, 3)], |t, v| t.scale(v[0], -1.7));
    }

    #[test]
    fn layer_norm_grads() {
        check(vec![random(3, 5, 5), random(1, 5, 6), random(1, 5, 7)], |t, v| {
            t.layer_norm(v[0], v[1], v[2], 1e-12)
        });
    }

    #[test]
    fn structural_grads() {
        check(vec![random(4, 6, 8)], |t, v| {
            let a = t.columns(v[0], 1, 3); // 4x3
            let b = t.rows(v[0], 2, 2); // 2x6
            let c = t.gather_rows(v[0], &[3, 0, 3, 1]); // 4x6
            let d = t.gather_columns(v[0], &[5, 5, 1]); // 4x3
            let left = t.concat_columns(&[a, d]); // 4x6
            let sum = t.add(left, c);
            t.concat_rows(&[sum, b]) // 6x6
        });
    }

    #[test]
    fn softmax_handles_negative_infinity() {
        let store = ParamStore::default();
        let mut t = Tape::new(&store);
        let x = t.leaf(array![[0.0, f64::NEG_INFINITY]], true);
        let y = t.softmax_rows(x);
        assert_eq!(t.value(y), &array![[1.0, 0.0]]);
    }

    #[test]
    fn repeated_param_nodes_accumulate() {
        let mut store = ParamStore::default();
        let w = store.insert("w", array![[1.0], [2.0]], true);
        let mut t = Tape::new(&store);
        let x = t.constant(array![[3.0, 5.0]]);
        let a = t.param(w);
        let b = t.param(w);
        let ya = t.matmul(x, a);
        let yb = t.matmul(x, b);
        let y = t.add(ya, yb);
        let g = t.backward(y);
        assert_eq!(g.param(w).unwrap(), &array![[6.0], [10.0]]);

        let mut t = Tape::frozen(&store);
        let a = t.param(w);
        let x = t.constant(array![[3.0, 5.0]]);
        let y = t.matmul(x, a);
        assert!(t.backward(y).param(w).is_none());
    }
}
