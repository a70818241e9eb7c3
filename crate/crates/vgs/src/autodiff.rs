//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records a computation as a sequence of nodes, each holding a
//! matrix value and the operation that produced it. Nodes are created in
//! topological order, so a single reverse sweep propagates gradients from
//! seeded outputs back to every leaf. The op set is exactly what the
//! encoders need: matrix product, additions, elementwise products and
//! nonlinearities, row extraction/stacking, softmax, and L2 normalization.
//!
//! Row vectors are `1 x n` matrices; softmax and normalization treat their
//! input as a flat vector regardless of orientation.

use ndarray::{Array2, Axis};

use crate::{Result, VgsError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Adds a `1 x n` row to every row of a matrix.
    AddRowBroadcast(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// Extracts row `t` as a `1 x n` matrix.
    Row(Var, usize),
    /// Stacks `1 x n` rows into a matrix.
    StackRows(Vec<Var>),
    Softmax(Var),
    L2Normalize(Var),
    Transpose(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> &Array2<f64> {
        &self.grads[v.0]
    }
}

/// A recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Registers an input; leaves receive gradients but propagate nothing.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRowBroadcast(a, row))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn row(&mut self, a: Var, t: usize) -> Var {
        let value = self
            .value(a)
            .row(t)
            .to_owned()
            .insert_axis(Axis(0));
        self.push(value, Op::Row(a, t))
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows needs at least one row");
        let cols = self.value(rows[0]).ncols();
        let mut value = Array2::zeros((rows.len(), cols));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&self.value(r).row(0));
        }
        self.push(value, Op::StackRows(rows.to_vec()))
    }

    /// Numerically stable softmax over all entries.
    pub fn softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exp = x.mapv(|v| (v - max).exp());
        let total: f64 = exp.sum();
        self.push(exp / total, Op::Softmax(a))
    }

    /// Scales all entries to unit Euclidean norm; zero norm is an error.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(VgsError::DegenerateEmbedding);
        }
        let value = x / norm;
        Ok(self.push(value, Op::L2Normalize(a)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// Runs one reverse sweep from the seeded nodes.
    ///
    /// Seeds accumulate, so several outputs can be driven at once; this is
    /// how a whole batch shares one tape.
    pub fn backward(&self, seeds: &[(Var, Array2<f64>)]) -> Gradients {
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.raw_dim()))
            .collect();
        for (var, seed) in seeds {
            assert_eq!(
                seed.raw_dim(),
                self.nodes[var.0].value.raw_dim(),
                "seed shape must match node shape"
            );
            grads[var.0] += seed;
        }
        for i in (0..self.nodes.len()).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[i].clone();
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[b.0].value.t());
                    let gb = self.nodes[a.0].value.t().dot(&g);
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::Add(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] += &g;
                }
                Op::Sub(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] -= &g;
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    grads[a.0] += &ga;
                    grads[b.0] += &gb;
                }
                Op::AddRowBroadcast(a, row) => {
                    let grow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[a.0] += &g;
                    grads[row.0] += &grow;
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    grads[a.0] += &(&g * &(y * &(1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    grads[a.0] += &(&g * &(1.0 - y * y));
                }
                Op::Relu(a) => {
                    // Subgradient 0 at the kink: strictly positive passes.
                    let mask = self.nodes[a.0].value.mapv(|v| f64::from(v > 0.0));
                    grads[a.0] += &(&g * &mask);
                }
                Op::Row(a, t) => {
                    let mut target = grads[a.0].row_mut(*t);
                    target += &g.row(0);
                }
                Op::StackRows(rows) => {
                    for (r, &var) in rows.iter().enumerate() {
                        let slice = g.row(r).to_owned().insert_axis(Axis(0));
                        grads[var.0] += &slice;
                    }
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[i].value;
                    let s = (&g * y).sum();
                    grads[a.0] += &(&(y * &g) - &(y * s));
                }
                Op::L2Normalize(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot = (&g * y).sum();
                    grads[a.0] += &((&g - &(y * dot)) / norm);
                }
                Op::Transpose(a) => {
                    grads[a.0] += &g.t();
                }
            }
        }
        Gradients { grads }
    }
}
