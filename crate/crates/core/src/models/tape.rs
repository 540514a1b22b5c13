//! Reverse-mode differentiation over a linear tape.
//!
//! Supports the handful of ops the two model kinds are built from. Every
//! value is a row-major matrix `[rows, cols]`; losses are `[1, 1]`.

use crate::error::{dim, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x · wᵀ` with `x: [b, in]`, `w: [out, in]`.
    MatMulT {
        x: Var,
        w: Var,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Relu(Var),
    Tanh(Var),
    /// Mean softmax cross-entropy against integer labels.
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    /// `1/(2n) Σ (pred - target)²`, `n` = rows.
    SquaredError {
        pred: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

#[derive(Debug, Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Registers a tensor as a leaf. 1-D tensors become a single row.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (rows, cols) = match t.shape() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => (s[..s.len() - 1].iter().product(), *s.last().unwrap()),
        };
        self.push(rows, cols, t.data().to_vec(), Op::Leaf)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, k) = self.dims(x);
        let (out, k2) = self.dims(w);
        if k != k2 {
            return Err(dim(format!("matmul: input width {k} vs weight width {k2}")));
        }
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut y = vec![0.0; b * out];
        for i in 0..b {
            let xr = &xv[i * k..(i + 1) * k];
            for j in 0..out {
                let wr = &wv[j * k..(j + 1) * k];
                y[i * out + j] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push(b, out, y, Op::MatMulT { x, w }))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let (br, bc) = self.dims(b);
        if br != 1 || bc != cols {
            return Err(dim(format!("bias [{br}, {bc}] does not fit width {cols}")));
        }
        let bv = &self.nodes[b.0].value;
        let y = self.nodes[x.0].value.iter().enumerate().map(|(i, v)| v + bv[i % cols]).collect();
        Ok(self.push(rows, cols, y, Op::AddBias { x, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let y = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        self.push(r, c, y, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let y = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(r, c, y, Op::Tanh(x))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.dims(logits);
        if labels.len() != b {
            return Err(dim(format!("{} labels for {b} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(dim(format!("label {bad} out of range for {c} classes")));
        }
        let lv = &self.nodes[logits.0].value;
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &lv[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + sum.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - log_z).exp();
            }
            loss += log_z - row[labels[i]];
        }
        loss /= b as f64;
        Ok(self.push(1, 1, vec![loss], Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    pub fn squared_error(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let (b, c) = self.dims(pred);
        if target.len() != b * c {
            return Err(dim(format!("target has {} values, prediction {}", target.len(), b * c)));
        }
        let pv = &self.nodes[pred.0].value;
        let sse: f64 = pv.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum();
        let loss = 0.5 * sse / b as f64;
        Ok(self.push(1, 1, vec![loss], Op::SquaredError { pred, target: target.to_vec() }))
    }

    /// Backpropagates from the scalar `root`; returns the adjoint of every node
    /// (`None` for nodes the root does not depend on).
    pub fn backward(&self, root: Var) -> Vec<Option<Vec<f64>>> {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(vec![1.0]);

        fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
            match slot {
                Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
                None => *slot = Some(delta),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMulT { x, w } => {
                    let (b, k) = self.dims(*x);
                    let out = node.cols;
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let mut dx = vec![0.0; b * k];
                    let mut dw = vec![0.0; out * k];
                    for i in 0..b {
                        for j in 0..out {
                            let gij = g[i * out + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                dx[i * k + l] += gij * wv[j * k + l];
                                dw[j * k + l] += gij * xv[i * k + l];
                            }
                        }
                    }
                    accumulate(&mut adj[x.0], dx);
                    accumulate(&mut adj[w.0], dw);
                }
                Op::AddBias { x, b } => {
                    let cols = node.cols;
                    let mut db = vec![0.0; cols];
                    for (i, gi) in g.iter().enumerate() {
                        db[i % cols] += gi;
                    }
                    accumulate(&mut adj[x.0], g.clone());
                    accumulate(&mut adj[b.0], db);
                }
                Op::Relu(x) => {
                    // subgradient 0 at the kink
                    let xv = &self.nodes[x.0].value;
                    let dx = g.iter().zip(xv).map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 }).collect();
                    accumulate(&mut adj[x.0], dx);
                }
                Op::Tanh(x) => {
                    let dx = g.iter().zip(&node.value).map(|(gi, y)| gi * (1.0 - y * y)).collect();
                    accumulate(&mut adj[x.0], dx);
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let (b, c) = self.dims(*logits);
                    let scale = g[0] / b as f64;
                    let mut d = probs.clone();
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * c + l] -= 1.0;
                    }
                    d.iter_mut().for_each(|v| *v *= scale);
                    accumulate(&mut adj[logits.0], d);
                }
                Op::SquaredError { pred, target } => {
                    let (b, _) = self.dims(*pred);
                    let scale = g[0] / b as f64;
                    let pv = &self.nodes[pred.0].value;
                    let d = pv.iter().zip(target).map(|(p, y)| scale * (p - y)).collect();
                    accumulate(&mut adj[pred.0], d);
                }
            }
            adj[idx] = Some(g);
        }
        adj
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_and_bias_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.leaf(&Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(vec![0.5]).unwrap());
        let y = tape.matmul_t(x, w).unwrap();
        let z = tape.add_bias(y, b).unwrap();
        assert_eq!(tape.value(z), &[-0.5, -0.5]);
    }

    #[test]
    fn squared_error_gradient_is_residual_over_n() {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let loss = tape.squared_error(p, &[0.0, 1.0]).unwrap();
        assert_eq!(tape.value(loss), &[0.5 * (1.0 + 4.0) / 2.0]);
        let adj = tape.backward(loss);
        assert_eq!(adj[p.0].as_deref(), Some(&[0.5, 1.0][..]));
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        let loss = tape.squared_error(r, &[0.0, 0.0, 0.0]).unwrap();
        let adj = tape.backward(loss);
        assert_eq!(adj[x.0].as_deref(), Some(&[0.0, 0.0, 2.0][..]));
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert!(tape.softmax_cross_entropy(x, &[2]).is_err());
    }
}
