//! Tape-based reverse-mode differentiation over matrices.
//!
//! The tape is an append-only arena: pushing an operation records its value
//! and the indices of its inputs, so indices are already in topological
//! order. `backward` walks the tape once in reverse from the (scalar) root,
//! applying one closed-form adjoint per primitive. First-order only; the
//! tape is confined to a single training thread.

use crate::error::{MlnError, Result};
use crate::num::linalg::{pseudo_inverse, DEFAULT_RANK_TOL};
use crate::num::matrix::{softmax, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    /// Parameter leaf: receives a gradient.
    Leaf,
    /// Constant: stops gradient flow.
    Const,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    /// Each row divided by its own L2 norm.
    RowNormalize(usize),
    /// Sums each row into a column vector.
    RowSum(usize),
    /// M + 1·b where b is 1 x cols.
    AddRowBroadcast(usize, usize),
    /// M + a·1ᵀ where a is rows x 1.
    AddColBroadcast(usize, usize),
    /// Pseudo-inverse; adjoint assumes the input is invertible.
    Pinv(usize),
    /// Mean over rows of -log softmax(row)[label]; scalar output.
    SoftmaxXentMean(usize, Vec<usize>),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers a differentiable parameter.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a.0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a.0, b.0)))
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul_elem(self.value(b))?;
        Ok(self.push(v, Op::MulElem(a.0, b.0)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a.0, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).relu();
        self.push(v, Op::Relu(a.0))
    }

    pub fn row_normalize(&mut self, a: NodeId) -> Result<NodeId> {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let row = crate::num::matrix::l2_normalize(x.row(r))?;
            for (c, v) in row.into_iter().enumerate() {
                out.set(r, c, v);
            }
        }
        Ok(self.push(out, Op::RowNormalize(a.0)))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut out = Matrix::zeros(x.rows(), 1);
        for r in 0..x.rows() {
            out.set(r, 0, x.row(r).iter().sum());
        }
        self.push(out, Op::RowSum(a.0))
    }

    pub fn add_row_broadcast(&mut self, m: NodeId, b: NodeId) -> Result<NodeId> {
        let (mv, bv) = (self.value(m), self.value(b));
        if bv.rows() != 1 || bv.cols() != mv.cols() {
            return Err(MlnError::DimensionMismatch {
                op: "add_row_broadcast",
                detail: format!("{}x{} + {}x{}", mv.rows(), mv.cols(), bv.rows(), bv.cols()),
            });
        }
        let mut out = mv.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + bv.get(0, c);
                out.set(r, c, v);
            }
        }
        Ok(self.push(out, Op::AddRowBroadcast(m.0, b.0)))
    }

    pub fn add_col_broadcast(&mut self, m: NodeId, a: NodeId) -> Result<NodeId> {
        let (mv, av) = (self.value(m), self.value(a));
        if av.cols() != 1 || av.rows() != mv.rows() {
            return Err(MlnError::DimensionMismatch {
                op: "add_col_broadcast",
                detail: format!("{}x{} + {}x{}", mv.rows(), mv.cols(), av.rows(), av.cols()),
            });
        }
        let mut out = mv.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                let v = out.get(r, c) + av.get(r, 0);
                out.set(r, c, v);
            }
        }
        Ok(self.push(out, Op::AddColBroadcast(m.0, a.0)))
    }

    /// Pseudo-inverse node. The adjoint uses the inverse rule
    /// `Ā = -Yᵀ Ȳ Yᵀ` (Y = A⁻¹), valid where the input is invertible.
    pub fn pinv(&mut self, a: NodeId) -> NodeId {
        let v = pseudo_inverse(self.value(a), DEFAULT_RANK_TOL);
        self.push(v, Op::Pinv(a.0))
    }

    /// Mean softmax cross-entropy over rows of a logits matrix.
    pub fn softmax_xent_mean(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let x = self.value(logits);
        if labels.len() != x.rows() {
            return Err(MlnError::DimensionMismatch {
                op: "softmax_xent_mean",
                detail: format!("{} labels for {} rows", labels.len(), x.rows()),
            });
        }
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            total += crate::num::matrix::softmax_cross_entropy(x.row(r), label)?;
        }
        let v = Matrix::new(1, 1, vec![total / labels.len() as f64])?;
        Ok(self.push(v, Op::SoftmaxXentMean(logits.0, labels.to_vec())))
    }

    /// Gradients of a scalar root with respect to every node. Leaves not on
    /// a path to the root get zero gradient.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.rows() != 1 || rv.cols() != 1 {
            return Err(MlnError::NonScalarRoot { rows: rv.rows(), cols: rv.cols() });
        }
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[root.0].set(0, 0, 1.0);

        for i in (0..=root.0).rev() {
            if grads[i].max_abs() == 0.0 {
                continue;
            }
            let g = grads[i].clone();
            match &self.nodes[i].op {
                Op::Leaf | Op::Const => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value.transpose())?;
                    let db = self.nodes[*a].value.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, &da)?;
                    accumulate(&mut grads, *b, &db)?;
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, &g.transpose())?,
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g)?;
                    accumulate(&mut grads, *b, &g)?;
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g)?;
                    accumulate(&mut grads, *b, &g.scale(-1.0))?;
                }
                Op::MulElem(a, b) => {
                    let da = g.mul_elem(&self.nodes[*b].value)?;
                    let db = g.mul_elem(&self.nodes[*a].value)?;
                    accumulate(&mut grads, *a, &da)?;
                    accumulate(&mut grads, *b, &db)?;
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, &g.scale(*s))?,
                Op::Relu(a) => {
                    let x = &self.nodes[*a].value;
                    let mut dx = g.clone();
                    for (d, xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, &dx)?;
                }
                Op::RowNormalize(a) => {
                    let x = &self.nodes[*a].value;
                    let y = &self.nodes[i].value;
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let n = crate::num::matrix::norm(x.row(r));
                        let ydg = crate::num::matrix::dot(y.row(r), g.row(r));
                        for c in 0..x.cols() {
                            dx.set(r, c, (g.get(r, c) - y.get(r, c) * ydg) / n);
                        }
                    }
                    accumulate(&mut grads, *a, &dx)?;
                }
                Op::RowSum(a) => {
                    let x = &self.nodes[*a].value;
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        for c in 0..x.cols() {
                            dx.set(r, c, g.get(r, 0));
                        }
                    }
                    accumulate(&mut grads, *a, &dx)?;
                }
                Op::AddRowBroadcast(m, b) => {
                    accumulate(&mut grads, *m, &g)?;
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            let v = db.get(0, c) + g.get(r, c);
                            db.set(0, c, v);
                        }
                    }
                    accumulate(&mut grads, *b, &db)?;
                }
                Op::AddColBroadcast(m, a) => {
                    accumulate(&mut grads, *m, &g)?;
                    let mut da = Matrix::zeros(g.rows(), 1);
                    for r in 0..g.rows() {
                        da.set(r, 0, g.row(r).iter().sum());
                    }
                    accumulate(&mut grads, *a, &da)?;
                }
                Op::Pinv(a) => {
                    let y = &self.nodes[i].value;
                    let yt = y.transpose();
                    let da = yt.matmul(&g)?.matmul(&yt)?.scale(-1.0);
                    accumulate(&mut grads, *a, &da)?;
                }
                Op::SoftmaxXentMean(a, labels) => {
                    let x = &self.nodes[*a].value;
                    let scale = g.get(0, 0) / labels.len() as f64;
                    let mut dx = Matrix::zeros(x.rows(), x.cols());
                    for (r, &label) in labels.iter().enumerate() {
                        let p = softmax(x.row(r));
                        for c in 0..x.cols() {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dx.set(r, c, scale * (p[c] - onehot));
                        }
                    }
                    accumulate(&mut grads, *a, &dx)?;
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Matrix], idx: usize, delta: &Matrix) -> Result<()> {
    grads[idx] = grads[idx].add(delta)?;
    Ok(())
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.grads[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::rng::RngStream;

    /// Central finite differences of a scalar-valued closure over one
    /// parameter matrix. Independent oracle for every adjoint.
    pub(crate) fn finite_diff(
        params: &Matrix,
        step: f64,
        f: &dyn Fn(&Matrix) -> f64,
    ) -> Matrix {
        let mut out = Matrix::zeros(params.rows(), params.cols());
        for i in 0..params.data().len() {
            let mut plus = params.clone();
            plus.data_mut()[i] += step;
            let mut minus = params.clone();
            minus.data_mut()[i] -= step;
            out.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * step);
        }
        out
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        let denom = a.frobenius_norm().max(b.frobenius_norm()).max(1e-8);
        a.sub(b).unwrap().frobenius_norm() / denom
    }

    #[test]
    fn gradient_of_identity_is_one() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::new(1, 1, vec![3.0]).unwrap());
        let g = t.backward(x).unwrap();
        assert_eq!(g.get(x).get(0, 0), 1.0);
    }

    #[test]
    fn gradient_of_xtx_is_2x() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::col_vec(&[1.0, 2.0]));
        let xt = t.transpose(x);
        let y = t.matmul(xt, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(x), Err(MlnError::NonScalarRoot { .. })));
    }

    #[test]
    fn unreachable_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::new(1, 1, vec![2.0]).unwrap());
        let orphan = t.leaf(Matrix::new(1, 1, vec![5.0]).unwrap());
        let y = t.mul_elem(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(orphan).get(0, 0), 0.0);
        assert_eq!(g.get(x).get(0, 0), 4.0);
    }

    #[test]
    fn three_layer_composition_matches_finite_differences() {
        // random affine+relu stack ending in a scalar, checked against
        // central differences over 100 seeds
        for seed in 0..100u64 {
            let mut rng = RngStream::new(seed);
            let w1 = rng.normal_matrix(3, 4, 0.0, 0.7);
            let w2 = rng.normal_matrix(4, 3, 0.0, 0.7);
            let w3 = rng.normal_matrix(3, 1, 0.0, 0.7);
            let x0 = rng.normal_matrix(2, 3, 0.0, 1.0);

            let forward = |w1m: &Matrix, w2m: &Matrix, w3m: &Matrix| -> f64 {
                let h1 = x0.matmul(w1m).unwrap().relu();
                let h2 = h1.matmul(w2m).unwrap().relu();
                let y = h2.matmul(w3m).unwrap();
                y.data().iter().sum::<f64>()
            };

            let mut t = Tape::new();
            let x = t.constant(x0.clone());
            let n1 = t.leaf(w1.clone());
            let n2 = t.leaf(w2.clone());
            let n3 = t.leaf(w3.clone());
            let h1 = t.matmul(x, n1).unwrap();
            let h1 = t.relu(h1);
            let h2 = t.matmul(h1, n2).unwrap();
            let h2 = t.relu(h2);
            let y = t.matmul(h2, n3).unwrap();
            let ones = t.constant(Matrix::new(1, 2, vec![1.0, 1.0]).unwrap());
            let s = t.matmul(ones, y).unwrap();
            let g = t.backward(s).unwrap();

            let fd1 = finite_diff(&w1, 1e-5, &|w| forward(w, &w2, &w3));
            let fd2 = finite_diff(&w2, 1e-5, &|w| forward(&w1, w, &w3));
            let fd3 = finite_diff(&w3, 1e-5, &|w| forward(&w1, &w2, w));
            assert!(rel_err(g.get(n1), &fd1) < 1e-4, "seed {seed}");
            assert!(rel_err(g.get(n2), &fd2) < 1e-4, "seed {seed}");
            assert!(rel_err(g.get(n3), &fd3) < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn row_normalize_and_xent_match_finite_differences() {
        for seed in [1u64, 2, 3, 4, 5] {
            let mut rng = RngStream::new(seed);
            let p0 = rng.normal_matrix(3, 4, 0.5, 1.0);
            let labels = vec![0usize, 2, 1];

            let forward = |p: &Matrix| -> f64 {
                let mut t = Tape::new();
                let n = t.leaf(p.clone());
                let y = t.row_normalize(n).unwrap();
                let l = t.softmax_xent_mean(y, &labels).unwrap();
                t.value(l).get(0, 0)
            };

            let mut t = Tape::new();
            let n = t.leaf(p0.clone());
            let y = t.row_normalize(n).unwrap();
            let l = t.softmax_xent_mean(y, &labels).unwrap();
            let g = t.backward(l).unwrap();
            let fd = finite_diff(&p0, 1e-6, &forward);
            assert!(rel_err(g.get(n), &fd) < 1e-4, "seed {seed}");
        }
    }

    #[test]
    fn pinv_adjoint_matches_finite_differences_on_invertible_input() {
        let mut rng = RngStream::new(8);
        // well-conditioned symmetric positive definite input
        let b = rng.normal_matrix(3, 3, 0.0, 1.0);
        let a0 = b.transpose().matmul(&b).unwrap().add(&Matrix::identity(3)).unwrap();

        let forward = |a: &Matrix| -> f64 {
            let mut t = Tape::new();
            let n = t.leaf(a.clone());
            let y = t.pinv(n);
            t.value(y).data().iter().sum()
        };

        let mut t = Tape::new();
        let n = t.leaf(a0.clone());
        let y = t.pinv(n);
        let ones_l = t.constant(Matrix::new(1, 3, vec![1.0; 3]).unwrap());
        let ones_r = t.constant(Matrix::new(3, 1, vec![1.0; 3]).unwrap());
        let s0 = t.matmul(ones_l, y).unwrap();
        let s = t.matmul(s0, ones_r).unwrap();
        let g = t.backward(s).unwrap();
        let fd = finite_diff(&a0, 1e-5, &forward);
        assert!(rel_err(g.get(n), &fd) < 1e-4);
    }

    #[test]
    fn broadcast_adjoints_match_finite_differences() {
        let mut rng = RngStream::new(13);
        let m0 = rng.normal_matrix(3, 4, 0.0, 1.0);
        let b0 = rng.normal_matrix(1, 4, 0.0, 1.0);
        let labels = vec![1usize, 3, 0];
        let forward = |m: &Matrix, b: &Matrix| -> f64 {
            let mut t = Tape::new();
            let mn = t.leaf(m.clone());
            let bn = t.leaf(b.clone());
            let y = t.add_row_broadcast(mn, bn).unwrap();
            let l = t.softmax_xent_mean(y, &labels).unwrap();
            t.value(l).get(0, 0)
        };
        let mut t = Tape::new();
        let mn = t.leaf(m0.clone());
        let bn = t.leaf(b0.clone());
        let y = t.add_row_broadcast(mn, bn).unwrap();
        let l = t.softmax_xent_mean(y, &labels).unwrap();
        let g = t.backward(l).unwrap();
        let fdm = finite_diff(&m0, 1e-6, &|m| forward(m, &b0));
        let fdb = finite_diff(&b0, 1e-6, &|b| forward(&m0, b));
        assert!(rel_err(g.get(mn), &fdm) < 1e-4);
        assert!(rel_err(g.get(bn), &fdb) < 1e-4);
    }
}
