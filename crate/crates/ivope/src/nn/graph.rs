//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape of matrix-valued nodes built afresh for every
//! training step. Scalars are 1x1 matrices; batches are `n x d`. Binary
//! ops broadcast a `1 x d` row, an `n x 1` column, or a `1 x 1` scalar
//! against an `n x d` operand, and the backward pass reduces gradients back
//! to the operand shape.

use ndarray::{Array2, Axis};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(f64, NodeId),
    AddScalar(f64, NodeId),
    Neg(NodeId),
    Relu(NodeId),
    Elu(NodeId),
    Exp(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    LogSoftmaxRows(NodeId),
    LogSumExpRows(NodeId),
    GatherCols(NodeId, Vec<usize>),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

const LN_EPS: f64 = 1e-8;

/// Tape of matrix nodes supporting one reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(64) }
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts a constant (no gradient will be tracked through it).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = broadcast_zip(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let needs = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, c: f64, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value * c;
        let needs = self.ng(a);
        self.push(v, Op::Scale(c, a), needs)
    }

    pub fn add_scalar(&mut self, c: f64, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + c;
        let needs = self.ng(a);
        self.push(v, Op::AddScalar(c, a), needs)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -&self.nodes[a.0].value;
        let needs = self.ng(a);
        self.push(v, Op::Neg(a), needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| x.max(0.0));
        let needs = self.ng(a);
        self.push(v, Op::Relu(a), needs)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(|x| if x > 0.0 { x } else { x.exp_m1() });
        let needs = self.ng(a);
        self.push(v, Op::Elu(a), needs)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.mapv(f64::exp);
        let needs = self.ng(a);
        self.push(v, Op::Exp(a), needs)
    }

    /// Elementwise square.
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let needs = self.ng(a);
        self.push(v, Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let total = self.nodes[a.0].value.len() as f64;
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum() / total);
        let needs = self.ng(a);
        self.push(v, Op::Mean(a), needs)
    }

    /// Row-wise log-softmax of an `n x k` matrix.
    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|z| z - lse);
        }
        let needs = self.ng(a);
        self.push(v, Op::LogSoftmaxRows(a), needs)
    }

    /// Row-wise log-sum-exp of an `n x k` matrix, yielding `n x 1`.
    pub fn logsumexp_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::zeros((x.nrows(), 1));
        for (i, row) in x.rows().into_iter().enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            v[[i, 0]] = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        }
        let needs = self.ng(a);
        self.push(v, Op::LogSumExpRows(a), needs)
    }

    /// Picks column `idx[i]` from row `i`, yielding `n x 1`.
    pub fn gather_cols(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.nrows(), idx.len(), "gather index length");
        let mut v = Array2::zeros((x.nrows(), 1));
        for (i, &j) in idx.iter().enumerate() {
            v[[i, 0]] = x[[i, j]];
        }
        let needs = self.ng(a);
        self.push(v, Op::GatherCols(a, idx), needs)
    }

    /// Row-wise layer normalization with learnable gain/bias (`1 x d`).
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let b = &self.nodes[bias.0].value;
        let d = xv.ncols() as f64;
        let mut v = Array2::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            let mu = row.sum() / d;
            let var = row.iter().map(|&z| (z - mu) * (z - mu)).sum::<f64>() / d;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..xv.ncols() {
                v[[i, j]] = (row[j] - mu) * inv * g[[0, j]] + b[[0, j]];
            }
        }
        let needs = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(v, Op::LayerNormRows { x, gain, bias }, needs)
    }

    /// Reverse sweep from a scalar loss node. Returns per-node gradients;
    /// leaves never reached by the sweep get `None` (treated as zero).
    pub fn backward(&mut self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].needs_grad {
                grads[id] = Some(g);
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.ng(a) {
                        let d = g.dot(&self.nodes[b.0].value.t());
                        accumulate(&mut grads[a.0], d);
                    }
                    if self.ng(b) {
                        let d = self.nodes[a.0].value.t().dot(&g);
                        accumulate(&mut grads[b.0], d);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], reduce_to(&g, self.nodes[a.0].value.dim()));
                    }
                    if self.ng(b) {
                        accumulate(&mut grads[b.0], reduce_to(&g, self.nodes[b.0].value.dim()));
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], reduce_to(&g, self.nodes[a.0].value.dim()));
                    }
                    if self.ng(b) {
                        accumulate(&mut grads[b.0], -reduce_to(&g, self.nodes[b.0].value.dim()));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(a) {
                        let gb = broadcast_zip(&g, &self.nodes[b.0].value, |x, y| x * y);
                        accumulate(&mut grads[a.0], reduce_to(&gb, self.nodes[a.0].value.dim()));
                    }
                    if self.ng(b) {
                        let ga = broadcast_zip(&g, &self.nodes[a.0].value, |x, y| x * y);
                        accumulate(&mut grads[b.0], reduce_to(&ga, self.nodes[b.0].value.dim()));
                    }
                }
                Op::Scale(c, a) => {
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], &g * c);
                    }
                }
                Op::AddScalar(_, a) => {
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                }
                Op::Neg(a) => {
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], -&g);
                    }
                }
                Op::Relu(a) => {
                    if self.ng(a) {
                        let mask = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                        accumulate(&mut grads[a.0], &g * &mask);
                    }
                }
                Op::Elu(a) => {
                    if self.ng(a) {
                        let d = self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { x.exp() });
                        accumulate(&mut grads[a.0], &g * &d);
                    }
                }
                Op::Exp(a) => {
                    if self.ng(a) {
                        accumulate(&mut grads[a.0], &g * &self.nodes[id].value);
                    }
                }
                Op::Sum(a) => {
                    if self.ng(a) {
                        let d = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]]);
                        accumulate(&mut grads[a.0], d);
                    }
                }
                Op::Mean(a) => {
                    if self.ng(a) {
                        let n = self.nodes[a.0].value.len() as f64;
                        let d = Array2::from_elem(self.nodes[a.0].value.dim(), g[[0, 0]] / n);
                        accumulate(&mut grads[a.0], d);
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    if self.ng(a) {
                        // d = g - softmax(a) * rowsum(g)
                        let soft = self.nodes[id].value.mapv(f64::exp);
                        let row_sums = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                        let d = &g - &(&soft * &row_sums);
                        accumulate(&mut grads[a.0], d);
                    }
                }
                Op::LogSumExpRows(a) => {
                    if self.ng(a) {
                        // d = softmax(a) * g (column broadcast)
                        let x = &self.nodes[a.0].value;
                        let lse = &self.nodes[id].value;
                        let mut d = Array2::zeros(x.dim());
                        for i in 0..x.nrows() {
                            for j in 0..x.ncols() {
                                d[[i, j]] = (x[[i, j]] - lse[[i, 0]]).exp() * g[[i, 0]];
                            }
                        }
                        accumulate(&mut grads[a.0], d);
                    }
                }
                Op::GatherCols(a, idx) => {
                    if self.ng(a) {
                        let mut d = Array2::zeros(self.nodes[a.0].value.dim());
                        for (i, &j) in idx.iter().enumerate() {
                            d[[i, j]] += g[[i, 0]];
                        }
                        accumulate(&mut grads[a.0], d);
                    }
                }
                Op::LayerNormRows { x, gain, bias } => {
                    let xv = self.nodes[x.0].value.clone();
                    let gv = self.nodes[gain.0].value.clone();
                    let d = xv.ncols() as f64;
                    let mut dx = Array2::zeros(xv.dim());
                    let mut dgain = Array2::zeros((1, xv.ncols()));
                    let mut dbias = Array2::zeros((1, xv.ncols()));
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let mu = row.sum() / d;
                        let var = row.iter().map(|&z| (z - mu) * (z - mu)).sum::<f64>() / d;
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        // ghat = dL/d(normalized); means over the row
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        let mut gh = vec![0.0; xv.ncols()];
                        let mut xh = vec![0.0; xv.ncols()];
                        for j in 0..xv.ncols() {
                            xh[j] = (row[j] - mu) * inv;
                            gh[j] = g[[i, j]] * gv[[0, j]];
                            mean_gh += gh[j];
                            mean_ghx += gh[j] * xh[j];
                            dgain[[0, j]] += g[[i, j]] * xh[j];
                            dbias[[0, j]] += g[[i, j]];
                        }
                        mean_gh /= d;
                        mean_ghx /= d;
                        for j in 0..xv.ncols() {
                            dx[[i, j]] = inv * (gh[j] - mean_gh - xh[j] * mean_ghx);
                        }
                    }
                    if self.ng(x) {
                        accumulate(&mut grads[x.0], dx);
                    }
                    if self.ng(gain) {
                        accumulate(&mut grads[gain.0], dgain);
                    }
                    if self.ng(bias) {
                        accumulate(&mut grads[bias.0], dbias);
                    }
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

/// Gradients from one backward sweep, indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, or zeros when the node was never reached
    /// (a detached parameter has zero gradient, not an error).
    pub fn take(&mut self, id: NodeId, shape: (usize, usize)) -> Array2<f64> {
        self.grads
            .get_mut(id.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Array2::zeros(shape))
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

/// Broadcasts `b` against `a` (or vice versa) with numpy-style rules
/// restricted to matching dims or 1.
fn broadcast_zip(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    let rows = ar.max(br);
    let cols = ac.max(bc);
    assert!(
        (ar == rows || ar == 1) && (br == rows || br == 1),
        "incompatible row broadcast {ar} vs {br}"
    );
    assert!(
        (ac == cols || ac == 1) && (bc == cols || bc == 1),
        "incompatible col broadcast {ac} vs {bc}"
    );
    if a.dim() == b.dim() {
        let mut out = a.clone();
        out.zip_mut_with(b, |x, &y| *x = f(*x, y));
        return out;
    }
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let av = a[[if ar == 1 { 0 } else { i }, if ac == 1 { 0 } else { j }]];
        let bv = b[[if br == 1 { 0 } else { i }, if bc == 1 { 0 } else { j }]];
        f(av, bv)
    })
}

/// Sums a gradient of broadcasted shape back down to `shape`.
fn reduce_to(g: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if g.dim() == shape {
        return g.clone();
    }
    let (r, c) = shape;
    let mut out = g.clone();
    if r == 1 && out.nrows() > 1 {
        out = out.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if c == 1 && out.ncols() > 1 {
        out = out.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    debug_assert_eq!(out.dim(), shape);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    #[test]
    fn matmul_quadratic_gradient() {
        // loss = 1/2 ||W x||^2  =>  dL/dW = (W x) x^T
        let mut g = Graph::new();
        let w = g.param(arr2(&[[1.0, 2.0], [3.0, -1.0]]));
        let x = g.constant(arr2(&[[0.5], [2.0]]));
        let y = g.matmul(w, x);
        let sq = g.square(y);
        let s = g.sum(sq);
        let loss = g.scale(0.5, s);
        let mut grads = g.backward(loss);
        let dw = grads.take(w, (2, 2));
        let wx = [1.0 * 0.5 + 2.0 * 2.0, 3.0 * 0.5 - 1.0 * 2.0];
        let expect = arr2(&[[wx[0] * 0.5, wx[0] * 2.0], [wx[1] * 0.5, wx[1] * 2.0]]);
        assert_abs_diff_eq!(dw[[0, 0]], expect[[0, 0]], epsilon = 1e-12);
        assert_abs_diff_eq!(dw[[1, 1]], expect[[1, 1]], epsilon = 1e-12);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let w = g.param(arr2(&[[1.0, 2.0]]));
        let c = g.constant(arr2(&[[5.0]]));
        let loss = g.mean(c);
        let mut grads = g.backward(loss);
        let dw = grads.take(w, (1, 2));
        assert_eq!(dw, Array2::<f64>::zeros((1, 2)));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        // loss = sum(X + b) with X (3x2), b (1x2): dL/db = [3, 3]
        let mut g = Graph::new();
        let x = g.constant(Array2::ones((3, 2)));
        let b = g.param(arr2(&[[0.1, 0.2]]));
        let y = g.add(x, b);
        let loss = g.sum(y);
        let mut grads = g.backward(loss);
        let db = grads.take(b, (1, 2));
        assert_eq!(db, arr2(&[[3.0, 3.0]]));
    }

    #[test]
    fn log_softmax_rows_sums_to_one() {
        let mut g = Graph::new();
        let x = g.constant(arr2(&[[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]));
        let ls = g.log_softmax_rows(x);
        for row in g.value(ls).rows() {
            let p: f64 = row.iter().map(|&v| v.exp()).sum();
            assert_abs_diff_eq!(p, 1.0, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(g.value(ls)[[1, 0]], (1.0f64 / 3.0).ln(), epsilon = 1e-12);
    }

    #[test]
    fn gather_then_backward_scatters() {
        let mut g = Graph::new();
        let x = g.param(arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let picked = g.gather_cols(x, vec![1, 0]);
        let loss = g.sum(picked);
        let mut grads = g.backward(loss);
        let dx = grads.take(x, (2, 2));
        assert_eq!(dx, arr2(&[[0.0, 1.0], [1.0, 0.0]]));
    }

    #[test]
    fn logsumexp_is_stable_for_extreme_values() {
        let mut g = Graph::new();
        let x = g.constant(arr2(&[[1000.0, 1000.0], [-1000.0, -999.0]]));
        let l = g.logsumexp_rows(x);
        assert_abs_diff_eq!(g.value(l)[[0, 0]], 1000.0 + 2.0f64.ln(), epsilon = 1e-9);
        assert!(g.value(l)[[1, 0]].is_finite());
    }
}
