//! Minimal reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! A [`Tape`] records operations eagerly: every constructor computes the
//! forward value immediately and appends a node, so the node order is a
//! topological order of the graph. [`Tape::backward`] walks the nodes in
//! reverse exactly once and accumulates gradients.
//!
//! All values are row-major `[rows, cols]` arrays of `f64`. Batched vectors
//! are `[batch, dim]`; scalars are `[1, 1]`.

use ndarray::{concatenate, Array2, Axis};

use crate::seeding::sample_index;

/// Handle to a node on a tape.
pub type Id = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    /// `[B, n] + [1, n]`, broadcasting the row across the batch.
    AddRow(Id, Id),
    MatMul(Id, Id),
    Scale(Id, f64),
    Tanh(Id),
    Sigmoid(Id),
    Elu(Id),
    Exp(Id),
    /// Row-wise softmax applied independently to each contiguous group of
    /// `group` columns.
    SoftmaxGroups(Id, usize),
    LogSoftmaxGroups(Id, usize),
    /// Forward: one-hot sample per group of the input probabilities.
    /// Backward: pass-through (straight-through estimator).
    StSample(Id),
    /// Value passes, gradient stops. The source id is kept for
    /// debugging even though backward never follows it.
    Detach(#[allow(dead_code)] Id),
    ConcatCols(Id, Id, usize),
    /// Sum of all elements, a `[1, 1]` scalar.
    Sum(Id),
    /// `[B, n] -> [B, 1]`.
    RowSum(Id),
    Clamp(Id, f64, f64),
    /// Elementwise minimum; ties route the gradient to the first argument.
    MinElem(Id, Id),
}

struct Node {
    value: Array2<f64>,
    grad: Array2<f64>,
    op: Op,
}

/// A recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn assert_same_shape(what: &str, a: &Array2<f64>, b: &Array2<f64>) {
    assert_eq!(
        a.dim(),
        b.dim(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.dim(),
        b.dim()
    );
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

    fn push(&mut self, value: Array2<f64>, op: Op) -> Id {
        let grad = Array2::zeros(value.dim());
        self.nodes.push(Node { value, grad, op });
        self.nodes.len() - 1
    }

    /// Value of a node.
    pub fn value(&self, id: Id) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Value of a `[1, 1]` node as a scalar.
    pub fn scalar(&self, id: Id) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.dim(), (1, 1), "scalar(): node has shape {:?}", v.dim());
        v[(0, 0)]
    }

    /// Gradient accumulated at a node (after `backward`).
    pub fn grad(&self, id: Id) -> &Array2<f64> {
        &self.nodes[id].grad
    }

    /// Record an input or constant.
    pub fn leaf(&mut self, value: Array2<f64>) -> Id {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, v: f64) -> Id {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        assert_same_shape("add", &self.nodes[a].value, &self.nodes[b].value);
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        assert_same_shape("sub", &self.nodes[a].value, &self.nodes[b].value);
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        assert_same_shape("mul", &self.nodes[a].value, &self.nodes[b].value);
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, Op::Mul(a, b))
    }

    /// Broadcast-add a `[1, n]` row (bias) to a `[B, n]` batch.
    pub fn add_row(&mut self, a: Id, row: Id) -> Id {
        let (ra, ca) = self.nodes[a].value.dim();
        let (rb, cb) = self.nodes[row].value.dim();
        assert!(
            rb == 1 && ca == cb,
            "add_row: shape mismatch {:?} vs {:?}",
            (ra, ca),
            (rb, cb)
        );
        let v = &self.nodes[a].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn matmul(&mut self, a: Id, w: Id) -> Id {
        let (_, ca) = self.nodes[a].value.dim();
        let (rw, _) = self.nodes[w].value.dim();
        assert_eq!(
            ca,
            rw,
            "matmul: inner dimension mismatch {:?} vs {:?}",
            self.nodes[a].value.dim(),
            self.nodes[w].value.dim()
        );
        let v = self.nodes[a].value.dot(&self.nodes[w].value);
        self.push(v, Op::MatMul(a, w))
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    /// Exponential-linear unit: `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, a: Id) -> Id {
        let v = self.nodes[a]
            .value
            .mapv(|x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push(v, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Softmax over each contiguous group of `group` columns, per row.
    pub fn softmax_groups(&mut self, a: Id, group: usize) -> Id {
        let v = Self::softmax_value(&self.nodes[a].value, group, false);
        self.push(v, Op::SoftmaxGroups(a, group))
    }

    pub fn log_softmax_groups(&mut self, a: Id, group: usize) -> Id {
        let v = Self::softmax_value(&self.nodes[a].value, group, true);
        self.push(v, Op::LogSoftmaxGroups(a, group))
    }

    fn softmax_value(x: &Array2<f64>, group: usize, log: bool) -> Array2<f64> {
        let (_, cols) = x.dim();
        assert!(
            group >= 1 && cols % group == 0,
            "softmax_groups: {cols} columns not divisible by group size {group}"
        );
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            for g in 0..cols / group {
                let seg = g * group..(g + 1) * group;
                let m = row
                    .slice(ndarray::s![seg.clone()])
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for i in seg.clone() {
                    z += (row[i] - m).exp();
                }
                let lz = m + z.ln();
                for i in seg {
                    row[i] = if log { row[i] - lz } else { (row[i] - lz).exp() };
                }
            }
        }
        v
    }

    /// Straight-through categorical sample over each group of `group`
    /// columns of a probability array. Forward is an exact one-hot sample;
    /// backward passes the upstream gradient through unchanged.
    pub fn st_sample<R: rand::Rng>(&mut self, probs: Id, group: usize, rng: &mut R) -> Id {
        let p = &self.nodes[probs].value;
        let (rows, cols) = p.dim();
        assert!(
            group >= 1 && cols % group == 0,
            "st_sample: {cols} columns not divisible by group size {group}"
        );
        let mut v = Array2::zeros((rows, cols));
        for r in 0..rows {
            for g in 0..cols / group {
                let base = g * group;
                let seg: Vec<f64> = (0..group).map(|i| p[(r, base + i)]).collect();
                let k = sample_index(rng, &seg);
                v[(r, base + k)] = 1.0;
            }
        }
        self.push(v, Op::StSample(probs))
    }

    /// Value passes through; the gradient stops here.
    pub fn detach(&mut self, a: Id) -> Id {
        let v = self.nodes[a].value.clone();
        self.push(v, Op::Detach(a))
    }

    pub fn concat_cols(&mut self, a: Id, b: Id) -> Id {
        let (ra, ca) = self.nodes[a].value.dim();
        let (rb, _) = self.nodes[b].value.dim();
        assert_eq!(
            ra,
            rb,
            "concat_cols: row mismatch {:?} vs {:?}",
            self.nodes[a].value.dim(),
            self.nodes[b].value.dim()
        );
        let v = concatenate(
            Axis(1),
            &[self.nodes[a].value.view(), self.nodes[b].value.view()],
        )
        .expect("concat_cols");
        self.push(v, Op::ConcatCols(a, b, ca))
    }

    /// Sum of all elements, as a `[1, 1]` node.
    pub fn sum(&mut self, a: Id) -> Id {
        let v = Array2::from_elem((1, 1), self.nodes[a].value.sum());
        self.push(v, Op::Sum(a))
    }

    /// Mean of all elements, as a `[1, 1]` node.
    pub fn mean(&mut self, a: Id) -> Id {
        let n = self.nodes[a].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sum: `[B, n] -> [B, 1]`.
    pub fn row_sum(&mut self, a: Id) -> Id {
        let s = self.nodes[a].value.sum_axis(Axis(1));
        let rows = s.len();
        let v = s.into_shape_with_order((rows, 1)).expect("row_sum");
        self.push(v, Op::RowSum(a))
    }

    pub fn clamp(&mut self, a: Id, lo: f64, hi: f64) -> Id {
        let v = self.nodes[a].value.mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn min_elem(&mut self, a: Id, b: Id) -> Id {
        assert_same_shape("min_elem", &self.nodes[a].value, &self.nodes[b].value);
        let mut v = self.nodes[a].value.clone();
        v.zip_mut_with(&self.nodes[b].value, |x, &y| *x = x.min(y));
        self.push(v, Op::MinElem(a, b))
    }

    pub fn neg(&mut self, a: Id) -> Id {
        self.scale(a, -1.0)
    }

    /// Accumulate `∂loss/∂node` into every node's gradient slot.
    ///
    /// `loss` must be a `[1, 1]` node. Calling `backward` again on the same
    /// tape accumulates into the existing gradients.
    pub fn backward(&mut self, loss: Id) {
        assert_eq!(
            self.nodes[loss].value.dim(),
            (1, 1),
            "backward: loss must be scalar, got {:?}",
            self.nodes[loss].value.dim()
        );
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        grads[loss][(0, 0)] = 1.0;
        for id in (0..=loss).rev() {
            let op = self.nodes[id].op.clone();
            let g = grads[id].clone();
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a] += &g;
                    grads[b] += &g;
                }
                Op::Sub(a, b) => {
                    grads[a] += &g;
                    grads[b] -= &g;
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b].value;
                    let db = &g * &self.nodes[a].value;
                    grads[a] += &da;
                    grads[b] += &db;
                }
                Op::AddRow(a, row) => {
                    grads[a] += &g;
                    let gs = g.sum_axis(Axis(0));
                    let cols = gs.len();
                    let gs = gs.into_shape_with_order((1, cols)).unwrap();
                    grads[row] += &gs;
                }
                Op::MatMul(a, w) => {
                    let da = g.dot(&self.nodes[w].value.t());
                    let dw = self.nodes[a].value.t().dot(&g);
                    grads[a] += &da;
                    grads[w] += &dw;
                }
                Op::Scale(a, c) => {
                    let da = &g * c;
                    grads[a] += &da;
                }
                Op::Tanh(a) => {
                    let da = &g * &self.nodes[id].value.mapv(|y| 1.0 - y * y);
                    grads[a] += &da;
                }
                Op::Sigmoid(a) => {
                    let da = &g * &self.nodes[id].value.mapv(|y| y * (1.0 - y));
                    grads[a] += &da;
                }
                Op::Elu(a) => {
                    let da = &g * &self.nodes[id].value.mapv(|y| if y > 0.0 { 1.0 } else { y + 1.0 });
                    grads[a] += &da;
                }
                Op::Exp(a) => {
                    let da = &g * &self.nodes[id].value;
                    grads[a] += &da;
                }
                Op::SoftmaxGroups(a, group) => {
                    let y = &self.nodes[id].value;
                    let (rows, cols) = y.dim();
                    let mut da = Array2::zeros((rows, cols));
                    for r in 0..rows {
                        for gidx in 0..cols / group {
                            let base = gidx * group;
                            let mut dot = 0.0;
                            for i in 0..group {
                                dot += g[(r, base + i)] * y[(r, base + i)];
                            }
                            for i in 0..group {
                                da[(r, base + i)] =
                                    y[(r, base + i)] * (g[(r, base + i)] - dot);
                            }
                        }
                    }
                    grads[a] += &da;
                }
                Op::LogSoftmaxGroups(a, group) => {
                    let y = &self.nodes[id].value;
                    let (rows, cols) = y.dim();
                    let mut da = Array2::zeros((rows, cols));
                    for r in 0..rows {
                        for gidx in 0..cols / group {
                            let base = gidx * group;
                            let mut gsum = 0.0;
                            for i in 0..group {
                                gsum += g[(r, base + i)];
                            }
                            for i in 0..group {
                                da[(r, base + i)] =
                                    g[(r, base + i)] - y[(r, base + i)].exp() * gsum;
                            }
                        }
                    }
                    grads[a] += &da;
                }
                Op::StSample(a) => {
                    grads[a] += &g;
                }
                Op::Detach(_) => {}
                Op::ConcatCols(a, b, ca) => {
                    let ga = g.slice(ndarray::s![.., ..ca]).to_owned();
                    let gb = g.slice(ndarray::s![.., ca..]).to_owned();
                    grads[a] += &ga;
                    grads[b] += &gb;
                }
                Op::Sum(a) => {
                    let da = Array2::from_elem(self.nodes[a].value.dim(), g[(0, 0)]);
                    grads[a] += &da;
                }
                Op::RowSum(a) => {
                    let (rows, cols) = self.nodes[a].value.dim();
                    let mut da = Array2::zeros((rows, cols));
                    for r in 0..rows {
                        for c in 0..cols {
                            da[(r, c)] = g[(r, 0)];
                        }
                    }
                    grads[a] += &da;
                }
                Op::Clamp(a, lo, hi) => {
                    let x = &self.nodes[a].value;
                    let mut da = g.clone();
                    da.zip_mut_with(x, |gi, &xi| {
                        if xi < lo || xi > hi {
                            *gi = 0.0;
                        }
                    });
                    grads[a] += &da;
                }
                Op::MinElem(a, b) => {
                    let va = self.nodes[a].value.clone();
                    let vb = self.nodes[b].value.clone();
                    let mut da = g.clone();
                    let mut db = g;
                    ndarray::Zip::from(&mut da).and(&va).and(&vb).for_each(|gi, &x, &y| {
                        if x > y {
                            *gi = 0.0;
                        }
                    });
                    ndarray::Zip::from(&mut db).and(&va).and(&vb).for_each(|gi, &x, &y| {
                        if x <= y {
                            *gi = 0.0;
                        }
                    });
                    grads[a] += &da;
                    grads[b] += &db;
                }
            }
        }
        for (n, g) in self.nodes.iter_mut().zip(grads) {
            n.grad += &g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn affine_identity_passes_input_through() {
        let mut t = Tape::new();
        let x = t.leaf(array![[1.0, -2.0, 3.0]]);
        let w = t.leaf(Array2::eye(3));
        let b = t.leaf(Array2::zeros((1, 3)));
        let y0 = t.matmul(x, w);
        let y = t.add_row(y0, b);
        assert_eq!(t.value(y), t.value(x));
    }

    #[test]
    fn tanh_of_zero_vector_is_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::zeros((1, 4)));
        let y = t.tanh(x);
        assert!(t.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::zeros((1, 4)));
        let y = t.softmax_groups(x, 4);
        for &v in t.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_of_linear_loss_is_input() {
        // loss = sum(w * x) with x fixed => dloss/dw = x
        let mut t = Tape::new();
        let x = t.leaf(array![[2.0, -1.0, 0.5]]);
        let w = t.leaf(array![[1.0, 1.0, 1.0]]);
        let p = t.mul(w, x);
        let loss = t.sum(p);
        t.backward(loss);
        assert_eq!(t.grad(w), t.value(x));
    }

    #[test]
    fn grad_of_constant_loss_is_zero() {
        let mut t = Tape::new();
        let w = t.leaf(array![[3.0, 4.0]]);
        let c = t.scalar_leaf(5.0);
        let loss = t.sum(c);
        t.backward(loss);
        assert!(t.grad(w).iter().all(|&v| v == 0.0));
        let _ = w;
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(array![[2.0]]);
        let d = t.detach(x);
        let y = t.mul(d, d);
        let loss = t.sum(y);
        t.backward(loss);
        assert_eq!(t.value(y)[(0, 0)], 4.0);
        assert!(t.grad(x).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn st_sample_is_onehot_and_passes_gradient() {
        let mut rng = crate::seeding::stream(3, &[]);
        let mut t = Tape::new();
        let p = t.leaf(array![[0.3, 0.7, 0.0, 0.5, 0.25, 0.25]]);
        let z = t.st_sample(p, 3, &mut rng);
        let v = t.value(z).clone();
        assert_eq!(v.slice(ndarray::s![0, ..3]).sum(), 1.0);
        assert_eq!(v.slice(ndarray::s![0, 3..]).sum(), 1.0);
        let loss = t.sum(z);
        t.backward(loss);
        // Pass-through: identity Jacobian by construction.
        assert!(t.grad(p).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut t = Tape::new();
        let w = t.leaf(array![[1.0, 2.0]]);
        let loss = t.sum(w);
        t.backward(loss);
        t.backward(loss);
        assert!(t.grad(w).iter().all(|&g| g == 2.0));
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn shape_mismatch_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Array2::zeros((1, 3)));
        let b = t.leaf(Array2::zeros((1, 4)));
        let _ = t.add(a, b);
    }
}
